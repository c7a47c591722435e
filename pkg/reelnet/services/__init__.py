"""
Services module for ReelNet.
Contains the decoder, spectral layer, subnetwork selection, training,
metrics, compression, data and checkpoint logic.
"""

from reelnet.services.path_utils import (
    expand_path,
    normalize_path,
    resolve_path,
    frame_path,
    stage_checkpoint_path,
    find_stage_checkpoints,
)
from reelnet.services.fso import (
    FsoLayer,
    fso_forward,
    fso_param_count,
)
from reelnet.services.subnet import (
    SessionMaskSet,
    ScoreState,
    select_topc,
    subnet_mask,
    accumulate,
    gate_weight_gradient,
    pack_masks,
    unpack_masks,
)
from reelnet.services.model import (
    FsoPlacement,
    ModelConfig,
    ParameterStore,
    desk_config,
    full_config,
    count_parameters,
    positional_encode,
    forward,
    decode_session,
)
from reelnet.services.data import (
    VideoSession,
    SessionManifest,
    load_frame_dir,
    save_frames,
    synth_video,
    load_manifest,
    frames_digest,
)
from reelnet.services.metrics import (
    MetricsReport,
    psnr,
    ssim,
    ms_ssim,
    evaluate_matrix,
)
from reelnet.services.training import (
    TrainConfig,
    TrainedState,
    SessionRecord,
    MetricsLog,
    loss,
    lr_schedule,
    backward,
    adam_step,
    train_session,
)
from reelnet.services.compress import (
    QuantizedStore,
    quantize,
    dequantize,
    bpp,
    size_breakdown,
)
from reelnet.services.persistence import (
    save,
    load,
    save_stage,
    load_stages,
)

__all__ = [
    # Path utilities
    'expand_path',
    'normalize_path',
    'resolve_path',
    'frame_path',
    'stage_checkpoint_path',
    'find_stage_checkpoints',
    # Spectral layer
    'FsoLayer',
    'fso_forward',
    'fso_param_count',
    # Subnetworks
    'SessionMaskSet',
    'ScoreState',
    'select_topc',
    'subnet_mask',
    'accumulate',
    'gate_weight_gradient',
    'pack_masks',
    'unpack_masks',
    # Decoder
    'FsoPlacement',
    'ModelConfig',
    'ParameterStore',
    'desk_config',
    'full_config',
    'count_parameters',
    'positional_encode',
    'forward',
    'decode_session',
    # Data management
    'VideoSession',
    'SessionManifest',
    'load_frame_dir',
    'save_frames',
    'synth_video',
    'load_manifest',
    'frames_digest',
    # Metrics
    'MetricsReport',
    'psnr',
    'ssim',
    'ms_ssim',
    'evaluate_matrix',
    # Training
    'TrainConfig',
    'TrainedState',
    'SessionRecord',
    'MetricsLog',
    'loss',
    'lr_schedule',
    'backward',
    'adam_step',
    'train_session',
    # Compression
    'QuantizedStore',
    'quantize',
    'dequantize',
    'bpp',
    'size_breakdown',
    # Checkpoints
    'save',
    'load',
    'save_stage',
    'load_stages',
]
