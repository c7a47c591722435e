import os

import hypothesis
import pytest
import torch

from reelnet.services.data import synth_video
from reelnet.services.model import FsoPlacement, ModelConfig, desk_config as make_desk_config
from reelnet.services.training import TrainConfig, TrainedState

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=100, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "fast"))


def make_tiny_config(**overrides) -> ModelConfig:
    """Two-level encoding, 2x2 base grid, one r=2 block with a 2x2-mode spectral branch; decodes 4x4."""
    values = dict(
        embed_levels_per_index=2,
        stem_dims=[8, 8, 8 * 2 * 2],
        base_spatial=(2, 2),
        upscale_factors=[2],
        block_channels=[4],
        min_channel_width=4,
        fso_placements=[FsoPlacement(0, 2, 2)],
        capacity_c=0.5,
        max_sessions=4,
    )
    values.update(overrides)
    config = ModelConfig(**values)
    config.validate()
    return config


@pytest.fixture
def tiny_config():
    return make_tiny_config()


@pytest.fixture
def desk_config():
    return make_desk_config()


@pytest.fixture
def tiny_train_config():
    return TrainConfig(epochs=5, warmup_epochs=1, lr=1e-2, seed=3)


@pytest.fixture
def synthetic_sessions():
    """Three distinct 4-frame 4x4 clips for the tiny model."""
    kinds = ['moving_gradient', 'bouncing_box', 'noise_texture']
    return [synth_video(kind, 4, 4, 4, seed=s, session_index=s) for s, kind in enumerate(kinds)]


@pytest.fixture
def tiny_state(tiny_config, tiny_train_config):
    return TrainedState.create(tiny_config, tiny_train_config, dtype=torch.float64)


@pytest.fixture
def tmp_checkpoint(tmp_path):
    return str(tmp_path / "run.ckpt")
