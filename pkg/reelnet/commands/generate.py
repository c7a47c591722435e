"""
Generate command for ReelNet: decode frames of one session to PNG files.
"""

import logging
import time
from typing import List

from reelnet.errors import ConfigError, SessionError
from reelnet.services import persistence
from reelnet.services.data import save_frames
from reelnet.services.model import decode_session

logger = logging.getLogger(__name__)


def parse_frame_range(spec: str, num_frames: int) -> List[int]:
    """'start:end' (end exclusive, either side optional) or a single index, 0-based."""
    try:
        if ':' in spec:
            start_text, end_text = spec.split(':', 1)
            start = int(start_text) if start_text else 0
            end = int(end_text) if end_text else num_frames
        else:
            start = int(spec)
            end = start + 1
    except ValueError:
        raise ConfigError(f"bad frame range '{spec}'") from None
    if not 0 <= start < end <= num_frames:
        raise ConfigError(f"frame range '{spec}' outside 0..{num_frames}")
    return list(range(start, end))


def register(subparsers) -> None:
    parser = subparsers.add_parser('generate', help='Decode one session to f%%05d.png frames')
    parser.add_argument('--checkpoint', required=True, help='Trained checkpoint')
    parser.add_argument('--session', type=int, required=True, help='0-based session index')
    parser.add_argument('--frames', help="Frame range 'start:end' (default: all)")
    parser.add_argument('--out', required=True, help='Output directory')
    parser.set_defaults(handler=run)


def run(args) -> int:
    state = persistence.load(args.checkpoint)
    if not 0 <= args.session < state.masks.session_count:
        raise SessionError(f"session {args.session} not trained ({state.masks.session_count} sessions)")
    if args.session >= len(state.records):
        raise SessionError(f"checkpoint has no record of session {args.session}")
    num_frames = state.records[args.session].num_frames
    frames = parse_frame_range(args.frames, num_frames) if args.frames else list(range(num_frames))

    start = time.perf_counter()
    decoded = decode_session(state.params, state.masks, state.model_config, args.session, num_frames, frames)
    elapsed = time.perf_counter() - start
    logger.info("Decoded %d frames at %.1f frames/s", len(frames), len(frames) / max(elapsed, 1e-9))

    written = save_frames(decoded, args.out, frames[0])
    logger.info("Wrote %d frames to %s", len(written), args.out)
    return 0
