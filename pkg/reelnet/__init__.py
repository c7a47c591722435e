"""
ReelNet - forget-free multi-video neural representation.

Settings factory: resolves model and training configuration from defaults,
manifest or config files, REELNET_* environment variables and flags, in
increasing order of precedence.
"""

import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional

from reelnet.config import ENV_PREFIX, FULL_TRAIN
from reelnet.errors import ConfigError
from reelnet.services.data import load_json_config
from reelnet.services.model import FsoPlacement, ModelConfig, full_config
from reelnet.services.training import TrainConfig

__version__ = '0.1.0'

logger = logging.getLogger(__name__)

PRESETS = ('desk', 'full')


def _parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ('1', 'true', 'yes', 'on'):
        return True
    if lowered in ('0', 'false', 'no', 'off', ''):
        return False
    raise ValueError(value)


# env suffix -> (settings key, parser)
ENV_OVERRIDES: Dict[str, tuple] = {
    'SEED': ('seed', int),
    'EPOCHS': ('epochs', int),
    'CAPACITY': ('capacity', float),
    'METRICS_LOG': ('metrics_log', str),
    'WORKERS': ('workers', int),
    'DEBUG': ('debug', _parse_bool),
}


@dataclass
class Pipeline:
    """Resolved settings shared by every command."""

    model_config: ModelConfig
    train_config: TrainConfig
    metrics_log: Optional[str] = None
    workers: int = 1
    debug: bool = False
    sources: Dict[str, str] = field(default_factory=dict)


def read_env(environ: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    """REELNET_* overrides; invalid values are logged and ignored."""
    environ = os.environ if environ is None else environ
    values: Dict[str, Any] = {}
    for suffix, (key, parse) in ENV_OVERRIDES.items():
        raw = environ.get(ENV_PREFIX + suffix)
        if raw is None:
            continue
        try:
            values[key] = parse(raw)
        except ValueError:
            logger.warning("Invalid %s%s environment variable '%s', ignoring", ENV_PREFIX, suffix, raw)
    return values


def _split_config(data: Mapping[str, Any]) -> tuple:
    """A config file is either {"model": {...}, "train": {...}} or one flat object of either kind of key."""
    if 'model' in data or 'train' in data:
        unknown = set(data) - {'model', 'train'}
        if unknown:
            raise ConfigError(f"Unknown config sections: {sorted(unknown)}")
        return dict(data.get('model', {})), dict(data.get('train', {}))
    model_keys = set(ModelConfig.__dataclass_fields__)
    return ({k: v for k, v in data.items() if k in model_keys},
            {k: v for k, v in data.items() if k not in model_keys})


def create_pipeline(
    flags: Optional[Mapping[str, Any]] = None,
    manifest_model: Optional[Mapping[str, Any]] = None,
    manifest_train: Optional[Mapping[str, Any]] = None,
    config_path: Optional[str] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> Pipeline:
    """Resolve settings.

    Priority:
    1. Command line flags (entries that are None are ignored)
    2. Environment variables: REELNET_SEED, REELNET_EPOCHS, ...
    3. Config file (--config), then the manifest's model/train sections
    4. Defaults (desk preset unless ``preset='full'``)
    """
    flags = {k: v for k, v in (flags or {}).items() if v is not None}
    env = read_env(environ)
    sources: Dict[str, str] = {}

    preset = flags.get('preset', 'desk')
    if preset not in PRESETS:
        raise ConfigError(f"Unknown preset '{preset}' (expected one of {PRESETS})")
    model_data = full_config().to_dict() if preset == 'full' else ModelConfig().to_dict()
    train_data = dict(FULL_TRAIN) if preset == 'full' else TrainConfig().to_dict()

    layers: List[tuple] = [('manifest', dict(manifest_model or {}), dict(manifest_train or {}))]
    if config_path:
        file_model, file_train = _split_config(load_json_config(config_path))
        layers.append(('config', file_model, file_train))
    for origin, model_part, train_part in layers:
        for target, part, kind in ((model_data, model_part, 'model'), (train_data, train_part, 'train')):
            unknown = set(part) - set(target)
            if unknown:
                raise ConfigError(f"Unknown {kind} config keys in {origin}: {sorted(unknown)}")
            target.update(part)
            sources.update({key: origin for key in part})

    def apply(key: str, setter: Callable[[Any], None]) -> None:
        for origin, values in (('env', env), ('flag', flags)):
            if key in values:
                setter(values[key])
                sources[key] = origin

    apply('seed', lambda v: train_data.__setitem__('seed', int(v)))
    apply('epochs', lambda v: train_data.__setitem__('epochs', int(v)))
    apply('capacity', lambda v: model_data.__setitem__('capacity_c', float(v)))
    if 'fso' in flags:
        specs = [s for s in flags['fso'] if s.lower() != 'none']
        model_data['fso_placements'] = [asdict(FsoPlacement.parse(s)) for s in specs]
        sources['fso_placements'] = 'flag'

    # keep warmup inside a shortened run
    train_data['warmup_epochs'] = min(train_data['warmup_epochs'], train_data['epochs'])

    model_config = ModelConfig.from_dict(model_data)
    train_config = TrainConfig.from_dict(train_data)

    settings = {'metrics_log': None, 'workers': 1, 'debug': False}
    for key in settings:
        apply(key, lambda v, key=key: settings.__setitem__(key, v))
    if settings['workers'] < 1:
        raise ConfigError(f"workers must be positive, got {settings['workers']}")

    logger.debug("Resolved settings (origins: %s)", sources)
    return Pipeline(model_config, train_config, settings['metrics_log'], int(settings['workers']),
                    bool(settings['debug']), sources)


__all__ = ['Pipeline', 'create_pipeline', 'read_env', '__version__']
