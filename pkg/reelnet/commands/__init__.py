"""
Command modules for ReelNet.

Each module exposes ``register(subparsers)``, which adds its sub-command and
binds ``run(args) -> int`` as the handler, the way route modules expose a
blueprint for the application factory.
"""

import argparse
import logging
from typing import Any, Dict, List, Optional

from reelnet import Pipeline, create_pipeline
from reelnet.errors import ManifestError
from reelnet.services.data import SessionManifest, VideoSession, load_manifest, load_source
from reelnet.services.training import TrainedState

logger = logging.getLogger(__name__)


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    """Flags that feed create_pipeline."""
    parser.add_argument('--config', help='JSON config file with model/train keys')
    parser.add_argument('--preset', choices=['desk', 'full'], help='Architecture preset (default: desk)')
    parser.add_argument('--capacity', type=float, help='Fraction of each layer a session may select')
    parser.add_argument('--fso', action='append', metavar='SPEC',
                        help="Spectral branch 'block:modes_h:modes_w[:noconv][:noimag][:c=x]', "
                             "repeatable; 'none' for mask-only")
    parser.add_argument('--seed', type=int, help='Random seed')
    parser.add_argument('--epochs', type=int, help='Epochs per session')


def add_runtime_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--workers', type=int, help='Threads for per-session evaluation')
    parser.add_argument('--metrics-log', dest='metrics_log', help='Per-step JSON-lines log')


def pipeline_from_args(args: argparse.Namespace, manifest: Optional[SessionManifest] = None) -> Pipeline:
    flags = {key: getattr(args, key, None)
             for key in ('preset', 'capacity', 'fso', 'seed', 'epochs', 'workers', 'metrics_log')}
    if getattr(args, 'debug', False):
        flags['debug'] = True
    return create_pipeline(
        flags,
        manifest_model=manifest.model if manifest else None,
        manifest_train=manifest.train if manifest else None,
        config_path=getattr(args, 'config', None),
    )


def session_videos(state: TrainedState, manifest_path: Optional[str]) -> List[VideoSession]:
    """Ground-truth videos for every trained session.

    Taken from the manifest when one is given, otherwise from the sources
    recorded in the checkpoint.
    """
    count = state.masks.session_count
    if manifest_path:
        manifest = load_manifest(manifest_path)
        if len(manifest.sessions) < count:
            raise ManifestError(f"manifest lists {len(manifest.sessions)} sessions, checkpoint has {count}")
        return [manifest.load_session(s) for s in range(count)]
    if len(state.records) < count:
        raise ManifestError("checkpoint lacks session sources; pass --manifest")
    return [load_source(state.records[s].source, s) for s in range(count)]


def frame_dims(state: TrainedState) -> List[tuple]:
    return [(r.num_frames, r.height, r.width) for r in state.records]


def register_all(subparsers) -> Dict[str, Any]:
    from reelnet.commands import evaluate, generate, quantize, report, train

    modules = {'train': train, 'eval': evaluate, 'generate': generate, 'quantize': quantize, 'report': report}
    for module in modules.values():
        module.register(subparsers)
    return modules
