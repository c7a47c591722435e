"""
Report command for ReelNet.

Parameter counts, per-layer capacity and reuse, size in bits per pixel, and
optionally a PSNR/bpp sweep over bit widths and the transfer matrix.
"""

import json
import logging
from typing import Any, Dict, List, Optional

from reelnet.commands import add_runtime_flags, frame_dims, pipeline_from_args, session_videos
from reelnet.config import SUPPORTED_BITS
from reelnet.errors import ConfigError
from reelnet.services import persistence
from reelnet.services.compress import BPP_MODES, dequantize, quantize, size_breakdown
from reelnet.services.metrics import evaluate_matrix, session_metric
from reelnet.services.model import count_parameters, decode_session
from reelnet.services.training import TrainedState

logger = logging.getLogger(__name__)


def parse_bits(spec: str) -> List[int]:
    try:
        bits = [int(b) for b in spec.split(',') if b.strip()]
    except ValueError:
        raise ConfigError(f"bad bit list '{spec}'") from None
    for b in bits:
        if b not in SUPPORTED_BITS:
            raise ConfigError(f"bits must be one of {SUPPORTED_BITS}, got {b}")
    return bits


def register(subparsers) -> None:
    parser = subparsers.add_parser('report', help='Size, capacity and quality summary of a checkpoint')
    parser.add_argument('--checkpoint', required=True, help='Trained checkpoint')
    parser.add_argument('--manifest', help='Session manifest (default: sources recorded in the checkpoint)')
    parser.add_argument('--bits', help='Comma-separated bit widths to sweep, e.g. 4,8,16,32')
    parser.add_argument('--bpp-mode', dest='bpp_mode', choices=BPP_MODES, default='exact',
                        help='Count masks bit-exact or byte-padded as stored (default: exact)')
    parser.add_argument('--matrix', action='store_true', help='Also compute the PSNR transfer matrix')
    parser.add_argument('--json', dest='as_json', action='store_true', help='Print JSON instead of tables')
    add_runtime_flags(parser)
    parser.set_defaults(handler=run)


def capacity_rows(state: TrainedState) -> List[Dict[str, Any]]:
    rows = []
    for session, layers in enumerate(state.masks.capacity_stats()):
        for name, stats in layers.items():
            rows.append(dict(stats, session=session, tensor=name))
    return rows


def bit_sweep(state: TrainedState, videos, bits: List[int], mode: str) -> List[Dict[str, Any]]:
    """Average PSNR and bpp of the model quantized to each bit width."""
    rows = []
    for b in bits:
        store = quantize(state.params, b, state.masks)
        params = dequantize(store)
        values = []
        for s, video in enumerate(videos):
            decoded = decode_session(params, state.masks, state.model_config, s, video.num_frames)
            values.append(session_metric(decoded, video.frames.to(decoded.dtype), 'psnr'))
        rows.append({
            'bits': b,
            'psnr': sum(values) / len(values),
            'bpp': size_breakdown(store, frame_dims(state), mode).bpp,
            'max_abs_error': store.stats['max_abs_error'],
        })
        logger.info("%d-bit: PSNR %.2f dB at %.4f bpp", b, rows[-1]['psnr'], rows[-1]['bpp'])
    return rows


def _render(summary: Dict[str, Any]) -> str:
    lines = ['Parameters']
    for name, count in summary['parameters'].items():
        lines.append(f'  {name:<20} {count:>12,}')
    lines.append(f"  {'total':<20} {sum(summary['parameters'].values()):>12,}")
    lines.append('')
    lines.append('Capacity (session, tensor, density, cumulative, reuse, new)')
    for row in summary['capacity']:
        lines.append(f"  {row['session']:>3} {row['tensor']:<22} {row['density']:.4f} "
                     f"{row['cumulative_density']:.4f} {row['reuse_fraction']:.4f} {row['new_weights']:>10}")
    lines.append('')
    size = summary['size']
    lines.append(f"Size ({size['mode']}, {size['bits']}-bit): {size['total_bits']:,} bits, {size['bpp']:.4f} bpp")
    if summary.get('sweep'):
        lines.append('')
        lines.append('Bits   PSNR (dB)   bpp')
        for row in summary['sweep']:
            lines.append(f"  {row['bits']:>2}   {row['psnr']:9.3f}   {row['bpp']:.4f}")
    if summary.get('matrix'):
        lines.append('')
        lines.append(summary['matrix'])
    return '\n'.join(lines)


def run(args) -> int:
    pipeline = pipeline_from_args(args)
    state = persistence.load(args.checkpoint)
    bits: Optional[List[int]] = parse_bits(args.bits) if args.bits else None

    store = state.quantized if state.quantized is not None else quantize(state.params, 32, state.masks)
    size = size_breakdown(store, frame_dims(state), args.bpp_mode)
    summary: Dict[str, Any] = {
        'parameters': dict(count_parameters(state.model_config)),
        'capacity': capacity_rows(state),
        'size': {'mode': args.bpp_mode, 'bits': store.bits, 'total_bits': size.total_bits, 'bpp': size.bpp,
                 'per_session': size.per_session},
    }

    if bits or args.matrix:
        videos = session_videos(state, args.manifest)
        if bits:
            summary['sweep'] = bit_sweep(state, videos, bits, args.bpp_mode)
        if args.matrix:
            report = evaluate_matrix([state], videos, 'psnr', pipeline.workers)
            summary['matrix'] = report.to_dict() if args.as_json else report.render_table()

    print(json.dumps(summary, indent=2) if args.as_json else _render(summary))
    return 0
