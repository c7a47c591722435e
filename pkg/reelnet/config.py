"""
Configuration constants and settings for ReelNet.
"""

from typing import Set, Dict, Any, Tuple

# Environment variable prefix for overrides (REELNET_SEED, REELNET_EPOCHS, ...)
ENV_PREFIX = 'REELNET_'

# Frame files follow the ffmpeg image2 naming: f00001.png, f00002.png, ...
FRAME_PATTERN = 'f{index:05d}.png'
FRAME_SUFFIX = '.png'

# Synthetic desk-scale videos
SYNTH_KINDS: Set[str] = {'moving_gradient', 'bouncing_box', 'noise_texture'}

# Quantization bit widths; 32 means "keep fp32 as-is"
SUPPORTED_BITS: Tuple[int, ...] = (4, 8, 16, 32)

# Checkpoint format
CHECKPOINT_MAGIC = b'RNCK'
CHECKPOINT_VERSION = 2

# Stage checkpoints written next to the main checkpoint after every session
STAGE_TEMPLATE = '{stem}.stage-{session:02d}{suffix}'

# SSIM window (Gaussian, clipped to the frame for tiny inputs)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

# Canonical multi-scale weights, renormalized when fewer scales fit
MS_SSIM_WEIGHTS: Tuple[float, ...] = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)

# Positional encoding constants
EMBED_BASE = 1.25
EMBED_LEVELS = 40

# Default model hyperparameters (desk scale; see model.full_config for 1280x720)
DEFAULT_MODEL: Dict[str, Any] = {
    'embed_base': EMBED_BASE,
    'embed_levels_per_index': EMBED_LEVELS,
    'stem_dims': [160, 128, 512],
    'stem_bias': False,
    'base_spatial': [4, 4],
    'upscale_factors': [2, 2],
    'block_channels': [32, 16],
    'min_channel_width': 8,
    'fso_placements': [
        {'block_index': 1, 'modes_h': 4, 'modes_w': 4, 'combine_with_conv': True, 'use_imaginary': True},
    ],
    'capacity_c': 0.5,
    'head_channels': 3,
    'activation': 'gelu',
    'output_squash': True,
    'max_sessions': 8,
}

# Default training hyperparameters (desk scale)
DEFAULT_TRAIN: Dict[str, Any] = {
    'alpha': 0.7,
    'lr': 2e-3,
    'epochs': 750,
    'warmup_epochs': 75,
    'batch_size': 1,
    'adam_beta1': 0.9,
    'adam_beta2': 0.999,
    'adam_eps': 1e-8,
    'seed': 0,
}

# Full-scale training hyperparameters
FULL_TRAIN: Dict[str, Any] = dict(DEFAULT_TRAIN, lr=5e-4, epochs=150, warmup_epochs=30)

# Log line format shared by cli.py and the tests
LOG_FORMAT = '%(asctime)s [%(name)s] %(levelname)s: %(message)s'
