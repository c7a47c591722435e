"""
Quantize command for ReelNet: write a quantized copy of a checkpoint.
"""

import logging

from reelnet.config import SUPPORTED_BITS
from reelnet.errors import CheckpointError
from reelnet.services import persistence
from reelnet.services.compress import GRANULARITIES, quantize

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser('quantize', help='Uniform quantization of a checkpoint')
    parser.add_argument('--checkpoint', required=True, help='Trained fp32 checkpoint')
    parser.add_argument('--bits', type=int, choices=SUPPORTED_BITS, required=True, help='Bit width')
    parser.add_argument('--granularity', choices=GRANULARITIES, default='channel',
                        help='One range per output channel (default) or per tensor')
    parser.add_argument('--out', required=True, help='Quantized checkpoint to write')
    parser.set_defaults(handler=run)


def run(args) -> int:
    state = persistence.load(args.checkpoint)
    if state.quantized is not None:
        raise CheckpointError(f"{args.checkpoint} is already quantized to {state.quantized.bits} bits")
    state.quantized = quantize(state.params, args.bits, state.masks, args.granularity)
    persistence.save(state, args.out)
    return 0
