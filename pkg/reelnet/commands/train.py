"""
Train command for ReelNet.

Trains the manifest's sessions strictly in order, writing the main checkpoint
and a stage checkpoint after every session so a killed run can resume.
"""

import logging

from reelnet.commands import add_config_flags, add_runtime_flags, pipeline_from_args
from reelnet.errors import ConfigError, ResumeMismatchError
from reelnet.services import persistence
from reelnet.services.data import load_manifest
from reelnet.services.training import MetricsLog, TrainedState, train_session

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser('train', help='Encode the manifest videos session by session')
    parser.add_argument('--manifest', required=True, help='Session manifest (JSON)')
    parser.add_argument('--out', required=True, help='Checkpoint to write')
    parser.add_argument('--resume-from', dest='resume_from', help='Checkpoint of an interrupted run')
    parser.add_argument('--sessions', type=int, help='Stop after this many sessions')
    parser.add_argument('--dense', action='store_true', help='Train session 0 unmasked (needs --sessions 1)')
    add_config_flags(parser)
    add_runtime_flags(parser)
    parser.set_defaults(handler=run)


def _same_source(recorded, listed) -> bool:
    if 'synthetic' in listed:
        spec = dict(listed['synthetic'])
        spec.setdefault('seed', 0)
        return recorded.get('synthetic') == spec
    return recorded == listed


def _check_resume(state: TrainedState, pipeline, manifest) -> None:
    if state.quantized is not None:
        raise ResumeMismatchError("cannot resume training from a quantized checkpoint")
    if state.model_config.to_dict() != pipeline.model_config.to_dict():
        raise ResumeMismatchError("model config differs from the checkpoint being resumed")
    if state.train_config.to_dict() != pipeline.train_config.to_dict():
        raise ResumeMismatchError("training config differs from the checkpoint being resumed")
    if state.masks.session_count > len(manifest.sessions):
        raise ResumeMismatchError(
            f"checkpoint has {state.masks.session_count} sessions, manifest only {len(manifest.sessions)}"
        )
    for record in state.records:
        if not _same_source(record.source, manifest.sessions[record.session]):
            raise ResumeMismatchError(f"session {record.session} source differs from the manifest")


def run(args) -> int:
    manifest = load_manifest(args.manifest)
    pipeline = pipeline_from_args(args, manifest)

    if args.resume_from:
        state = persistence.load(args.resume_from)
        _check_resume(state, pipeline, manifest)
        logger.info("Resuming after session %d", state.masks.session_count - 1)
    else:
        state = TrainedState.create(pipeline.model_config, pipeline.train_config)

    target = len(manifest.sessions) if args.sessions is None else min(args.sessions, len(manifest.sessions))
    if args.dense and (state.masks.session_count > 0 or target > 1):
        raise ConfigError("--dense trains a single session; pass --sessions 1 on a fresh run")
    metrics_log = MetricsLog(pipeline.metrics_log) if pipeline.metrics_log else None

    first = state.masks.session_count
    for session in range(first, target):
        video = manifest.load_session(session)
        train_session(video, state, metrics_log, dense=args.dense)
        persistence.save(state, args.out)
        persistence.save_stage(state, args.out)

    if first >= target:
        persistence.save(state, args.out)
    logger.info("Trained %d sessions into %s", state.masks.session_count, args.out)
    return 0
