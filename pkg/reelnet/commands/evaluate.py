"""
Eval command for ReelNet.

Fills the transfer matrix from the stage checkpoints next to the given
checkpoint, or from the checkpoint alone by checking every session's decode
against its recorded end-of-session digest.
"""

import logging

from reelnet.commands import add_runtime_flags, pipeline_from_args, session_videos
from reelnet.services import persistence
from reelnet.services.data import save_json_config
from reelnet.services.metrics import METRIC_KINDS, evaluate_matrix

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser('eval', help='Transfer matrix, final average and backward transfer')
    parser.add_argument('--checkpoint', required=True, help='Trained checkpoint')
    parser.add_argument('--manifest', help='Session manifest (default: sources recorded in the checkpoint)')
    parser.add_argument('--metric', choices=METRIC_KINDS, default='psnr', help='Matrix metric (default: psnr)')
    parser.add_argument('--no-stages', dest='use_stages', action='store_false',
                        help='Ignore stage checkpoints and use digests only')
    parser.add_argument('--out', help='Write the report as JSON here')
    add_runtime_flags(parser)
    parser.set_defaults(handler=run)


def run(args) -> int:
    pipeline = pipeline_from_args(args)
    state = persistence.load(args.checkpoint)
    videos = session_videos(state, args.manifest)

    stages = persistence.load_stages(args.checkpoint) if args.use_stages and state.quantized is None else []
    if len(stages) != state.masks.session_count:
        stages = [state]
    else:
        logger.info("Using %d stage checkpoints", len(stages))

    report = evaluate_matrix(stages, videos, args.metric, pipeline.workers)
    print(report.render_table())
    if args.out:
        save_json_config(args.out, report.to_dict())
    if state.quantized is None and not all(report.verified.values()):
        logger.warning("Some sessions did not reproduce their end-of-session decode")
    return 0
