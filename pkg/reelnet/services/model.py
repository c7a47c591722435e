"""
Decoder model services for ReelNet.

The decoder maps a (session, frame) index pair to an RGB frame:
positional encoding -> stem MLP -> NeRV blocks (conv3x3 + pixel shuffle,
optionally with a Fourier branch) -> per-session 1x1 head -> sigmoid.

Parameters live in a plain ParameterStore rather than an nn.Module, so the
same functional forward serves dense, masked and straight-through training.
"""

import copy
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import torch
import torch.nn.functional as F

from reelnet.config import DEFAULT_MODEL
from reelnet.errors import ConfigError, SessionError, ShapeError
from reelnet.services.fso import FsoLayer, fso_forward, fso_param_count
from reelnet.services.subnet import SessionMaskSet, init_scores, score_seed

logger = logging.getLogger(__name__)

ACTIVATIONS = {
    'gelu': F.gelu,
    'relu': F.relu,
    'silu': F.silu,
}


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class FsoPlacement:
    """Where a Fourier branch sits and how it is combined with the conv branch."""

    block_index: int
    modes_h: int
    modes_w: int
    combine_with_conv: bool = True
    use_imaginary: bool = True
    capacity: Optional[float] = None

    @classmethod
    def parse(cls, spec: str) -> 'FsoPlacement':
        """Parse 'block:modes_h:modes_w[:noconv][:noimag][:c=0.3]'."""
        parts = [p.strip() for p in spec.split(':') if p.strip()]
        if len(parts) < 3:
            raise ConfigError(f"FSO placement '{spec}' needs block:modes_h:modes_w")
        try:
            block, modes_h, modes_w = (int(p) for p in parts[:3])
        except ValueError:
            raise ConfigError(f"FSO placement '{spec}' has non-integer fields") from None
        placement = cls(block, modes_h, modes_w)
        for flag in parts[3:]:
            if flag == 'noconv':
                placement.combine_with_conv = False
            elif flag == 'noimag':
                placement.use_imaginary = False
            elif flag.startswith('c='):
                try:
                    placement.capacity = float(flag[2:])
                except ValueError:
                    raise ConfigError(f"FSO placement '{spec}' has a bad capacity") from None
            else:
                raise ConfigError(f"Unknown FSO placement flag '{flag}'")
        return placement

    def to_spec(self) -> str:
        spec = f"{self.block_index}:{self.modes_h}:{self.modes_w}"
        if not self.combine_with_conv:
            spec += ':noconv'
        if not self.use_imaginary:
            spec += ':noimag'
        if self.capacity is not None:
            spec += f':c={self.capacity}'
        return spec


@dataclass
class ModelConfig:
    """Complete hyperparameter description of the decoder."""

    embed_base: float = DEFAULT_MODEL['embed_base']
    embed_levels_per_index: int = DEFAULT_MODEL['embed_levels_per_index']
    stem_dims: List[int] = field(default_factory=lambda: list(DEFAULT_MODEL['stem_dims']))
    stem_bias: bool = DEFAULT_MODEL['stem_bias']
    base_spatial: Tuple[int, int] = tuple(DEFAULT_MODEL['base_spatial'])
    upscale_factors: List[int] = field(default_factory=lambda: list(DEFAULT_MODEL['upscale_factors']))
    block_channels: List[int] = field(default_factory=lambda: list(DEFAULT_MODEL['block_channels']))
    min_channel_width: int = DEFAULT_MODEL['min_channel_width']
    fso_placements: List[FsoPlacement] = field(
        default_factory=lambda: [FsoPlacement(**p) for p in DEFAULT_MODEL['fso_placements']]
    )
    capacity_c: float = DEFAULT_MODEL['capacity_c']
    head_channels: int = DEFAULT_MODEL['head_channels']
    activation: str = DEFAULT_MODEL['activation']
    output_squash: bool = DEFAULT_MODEL['output_squash']
    max_sessions: int = DEFAULT_MODEL['max_sessions']

    def __post_init__(self):
        self.base_spatial = tuple(int(v) for v in self.base_spatial)
        self.fso_placements = [
            p if isinstance(p, FsoPlacement) else FsoPlacement(**p) for p in self.fso_placements
        ]

    # -- derived geometry ---------------------------------------------------

    @property
    def embed_dim(self) -> int:
        return 4 * self.embed_levels_per_index

    @property
    def stem_channels(self) -> int:
        h0, w0 = self.base_spatial
        return self.stem_dims[-1] // (h0 * w0)

    @property
    def channels(self) -> List[int]:
        return [max(c, self.min_channel_width) for c in self.block_channels]

    @property
    def output_spatial(self) -> Tuple[int, int]:
        h, w = self.base_spatial
        scale = math.prod(self.upscale_factors)
        return (h * scale, w * scale)

    def block_spatial(self, block: int) -> Tuple[Tuple[int, int], Tuple[int, int]]:
        """(input, output) spatial size of a block."""
        h, w = self.base_spatial
        for r in self.upscale_factors[:block]:
            h, w = h * r, w * r
        r = self.upscale_factors[block]
        return (h, w), (h * r, w * r)

    def block_in_channels(self, block: int) -> int:
        return self.stem_channels if block == 0 else self.channels[block - 1]

    def placement_for(self, block: int) -> Optional[FsoPlacement]:
        for placement in self.fso_placements:
            if placement.block_index == block:
                return placement
        return None

    def fso_layer(self, block: int) -> Optional[FsoLayer]:
        placement = self.placement_for(block)
        if placement is None:
            return None
        spatial_in, spatial_out = self.block_spatial(block)
        return FsoLayer(
            in_ch=self.block_in_channels(block),
            out_ch=self.channels[block],
            modes_h=placement.modes_h,
            modes_w=placement.modes_w,
            spatial_in=spatial_in,
            spatial_out=spatial_out,
            use_imaginary=placement.use_imaginary,
        )

    def has_conv(self, block: int) -> bool:
        placement = self.placement_for(block)
        return placement is None or placement.combine_with_conv

    # -- validation / (de)serialization -------------------------------------

    def validate(self) -> None:
        """Raise ConfigError for an inconsistent configuration."""
        if self.embed_levels_per_index < 1:
            raise ConfigError("embed_levels_per_index must be positive")
        if len(self.stem_dims) < 2:
            raise ConfigError("stem_dims needs at least an input and an output width")
        if self.stem_dims[0] != self.embed_dim:
            raise ConfigError(
                f"stem_dims[0]={self.stem_dims[0]} must equal 4*embed_levels_per_index={self.embed_dim}"
            )
        h0, w0 = self.base_spatial
        if h0 < 1 or w0 < 1 or self.stem_dims[-1] % (h0 * w0):
            raise ConfigError(f"stem output {self.stem_dims[-1]} is not a multiple of {h0}x{w0}")
        if len(self.upscale_factors) != len(self.block_channels):
            raise ConfigError("upscale_factors and block_channels must have the same length")
        if any(r < 1 for r in self.upscale_factors):
            raise ConfigError("upscale factors must be positive")
        if not 0.0 < self.capacity_c <= 1.0:
            raise ConfigError(f"capacity_c must lie in (0, 1], got {self.capacity_c}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"Unknown activation '{self.activation}'")
        if self.max_sessions < 1:
            raise ConfigError("max_sessions must be positive")
        seen = set()
        for placement in self.fso_placements:
            if not 0 <= placement.block_index < len(self.block_channels):
                raise ConfigError(f"FSO placement block {placement.block_index} does not exist")
            if placement.block_index in seen:
                raise ConfigError(f"Two FSO placements on block {placement.block_index}")
            if placement.capacity is not None and not 0.0 < placement.capacity <= 1.0:
                raise ConfigError(f"FSO capacity must lie in (0, 1], got {placement.capacity}")
            seen.add(placement.block_index)
            try:
                self.fso_layer(placement.block_index).validate()
            except ShapeError as e:
                raise ConfigError(str(e)) from None

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['base_spatial'] = list(self.base_spatial)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'ModelConfig':
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown model config keys: {sorted(unknown)}")
        config = cls(**copy.deepcopy(dict(data)))
        config.validate()
        return config


def desk_config(**overrides) -> ModelConfig:
    """Small configuration that decodes 16x16 frames on a laptop core."""
    config = ModelConfig(**overrides)
    config.validate()
    return config


def full_config(fso_blocks: Tuple[int, ...] = (0, 1)) -> ModelConfig:
    """Full-size 1280x720 architecture, with the spectral branch on the given blocks."""
    known = {0: FsoPlacement(0, 16, 4), 1: FsoPlacement(1, 80, 22)}
    config = ModelConfig(
        embed_base=1.25,
        embed_levels_per_index=40,
        stem_dims=[160, 512, 112 * 16 * 9],
        stem_bias=False,
        base_spatial=(16, 9),
        upscale_factors=[5, 2, 2, 2, 2],
        block_channels=[112, 96, 96, 96, 96],
        min_channel_width=96,
        fso_placements=[known[b] for b in fso_blocks],
        capacity_c=0.3,
        max_sessions=17,
    )
    config.validate()
    return config


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def count_parameters(config: ModelConfig) -> 'OrderedDict[str, int]':
    """Closed-form per-layer parameter counts (head counted once)."""
    counts: 'OrderedDict[str, int]' = OrderedDict()
    for i, (fan_in, fan_out) in enumerate(zip(config.stem_dims[:-1], config.stem_dims[1:])):
        counts[f'stem.{i}'] = fan_in * fan_out + (fan_out if config.stem_bias else 0)
    for k, r in enumerate(config.upscale_factors):
        in_ch, out_ch = config.block_in_channels(k), config.channels[k]
        if config.has_conv(k):
            counts[f'blocks.{k}.conv'] = in_ch * out_ch * r * r * 9 + out_ch * r * r
        layer = config.fso_layer(k)
        if layer is not None:
            counts[f'blocks.{k}.fso'] = fso_param_count(layer)
    counts['head'] = config.channels[-1] * config.head_channels + config.head_channels
    return counts


def trunk_shapes(config: ModelConfig) -> 'OrderedDict[str, Tuple[int, ...]]':
    """Shapes of every trunk tensor, in layer order."""
    shapes: 'OrderedDict[str, Tuple[int, ...]]' = OrderedDict()
    for i, (fan_in, fan_out) in enumerate(zip(config.stem_dims[:-1], config.stem_dims[1:])):
        shapes[f'stem.{i}.weight'] = (fan_out, fan_in)
        if config.stem_bias:
            shapes[f'stem.{i}.bias'] = (fan_out,)
    for k, r in enumerate(config.upscale_factors):
        in_ch, out_ch = config.block_in_channels(k), config.channels[k]
        if config.has_conv(k):
            shapes[f'blocks.{k}.conv.weight'] = (out_ch * r * r, in_ch, 3, 3)
            shapes[f'blocks.{k}.conv.bias'] = (out_ch * r * r,)
        layer = config.fso_layer(k)
        if layer is not None:
            shapes[f'blocks.{k}.fso.real'] = layer.weight_shape
            if layer.use_imaginary:
                shapes[f'blocks.{k}.fso.imag'] = layer.weight_shape
    return shapes


def is_scored(name: str) -> bool:
    """Biases are not ranked; they are owned whole by the session that trains them."""
    return not name.endswith('.bias')


def fan_in(name: str, shape: Tuple[int, ...]) -> int:
    if '.fso.' in name:
        return shape[2]
    return math.prod(shape[1:]) if len(shape) > 1 else shape[0]


def capacity_for(config: ModelConfig, name: str) -> float:
    """Layer-wise capacity; a placement may override it for its spectral weights."""
    if '.fso.' in name:
        placement = config.placement_for(int(name.split('.')[1]))
        if placement is not None and placement.capacity is not None:
            return placement.capacity
    return config.capacity_c


def _uniform(shape, bound: float, generator: torch.Generator, dtype: torch.dtype) -> torch.Tensor:
    values = torch.rand(shape, generator=generator, dtype=torch.float64) * 2.0 - 1.0
    return (values * bound).to(dtype)


@dataclass
class ParameterStore:
    """Trunk weights, their scores, and the per-session heads."""

    weights: 'OrderedDict[str, torch.Tensor]'
    scores: 'OrderedDict[str, torch.Tensor]'
    heads: Dict[int, Dict[str, torch.Tensor]] = field(default_factory=dict)
    seed: int = 0

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> 'ParameterStore':
        """Seeded initialization: trunk weights now, scores for session 0."""
        config.validate()
        generator = torch.Generator().manual_seed(seed)
        weights: 'OrderedDict[str, torch.Tensor]' = OrderedDict()
        for name, shape in trunk_shapes(config).items():
            if '.fso.' in name:
                # FNO-style scale: 1/(in*out) * U[0, 1)
                scale = 1.0 / (shape[2] * shape[3])
                weights[name] = (torch.rand(shape, generator=generator, dtype=torch.float64) * scale).to(dtype)
            elif name.endswith('.bias'):
                parent = weights[name[:-len('bias')] + 'weight']
                weights[name] = _uniform(shape, 1.0 / math.sqrt(fan_in(name, tuple(parent.shape))), generator, dtype)
            else:
                weights[name] = _uniform(shape, 1.0 / math.sqrt(fan_in(name, shape)), generator, dtype)
        store = cls(weights=weights, scores=OrderedDict(), seed=seed)
        store.scores = OrderedDict(init_scores(store.score_shapes(), store.fan_ins(), seed, 0, dtype))
        logger.debug("Initialized %d trunk tensors (seed=%d)", len(weights), seed)
        return store

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.weights.values())).dtype

    def maskable_shapes(self) -> 'OrderedDict[str, Tuple[int, ...]]':
        return OrderedDict((name, tuple(t.shape)) for name, t in self.weights.items())

    def score_shapes(self) -> 'OrderedDict[str, Tuple[int, ...]]':
        return OrderedDict((n, s) for n, s in self.maskable_shapes().items() if is_scored(n))

    def fan_ins(self) -> Dict[str, int]:
        return {name: fan_in(name, tuple(t.shape)) for name, t in self.weights.items()}

    def add_head(self, session: int, config: ModelConfig) -> Dict[str, torch.Tensor]:
        """Create the 1x1 output head for a new session (seeded by seed and session)."""
        generator = torch.Generator().manual_seed(score_seed(self.seed, session) ^ 0x5EED)
        in_ch = config.channels[-1]
        bound = 1.0 / math.sqrt(in_ch)
        head = {
            'weight': _uniform((config.head_channels, in_ch, 1, 1), bound, generator, self.dtype),
            'bias': _uniform((config.head_channels,), bound, generator, self.dtype),
        }
        self.heads[session] = head
        return head

    def head(self, session: int) -> Dict[str, torch.Tensor]:
        if session not in self.heads:
            raise SessionError(f"no head for session {session}")
        return self.heads[session]

    def clone(self) -> 'ParameterStore':
        return ParameterStore(
            weights=OrderedDict((n, t.detach().clone()) for n, t in self.weights.items()),
            scores=OrderedDict((n, t.detach().clone()) for n, t in self.scores.items()),
            heads={s: {n: t.detach().clone() for n, t in h.items()} for s, h in self.heads.items()},
            seed=self.seed,
        )

    def to(self, dtype: torch.dtype) -> 'ParameterStore':
        return ParameterStore(
            weights=OrderedDict((n, t.detach().to(dtype)) for n, t in self.weights.items()),
            scores=OrderedDict((n, t.detach().to(dtype)) for n, t in self.scores.items()),
            heads={s: {n: t.detach().to(dtype) for n, t in h.items()} for s, h in self.heads.items()},
            seed=self.seed,
        )


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def normalized_indices(session: int, frame: int, num_frames: int, config: ModelConfig) -> Tuple[float, float]:
    """Map 0-based indices into (0, 1]: s_norm=(s+1)/S_max, t_norm=(t+1)/T."""
    if not 0 <= session < config.max_sessions:
        raise SessionError(f"session {session} outside 0..{config.max_sessions - 1}")
    if not 0 <= frame < num_frames:
        raise ShapeError(f"frame {frame} outside 0..{num_frames - 1}")
    return (session + 1) / config.max_sessions, (frame + 1) / num_frames


def positional_encode(
    s_norm: float,
    t_norm: float,
    config: ModelConfig,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """[sin(b^j*pi*s)..., cos(b^j*pi*s)..., sin(b^j*pi*t)..., cos(b^j*pi*t)...]."""
    if not (math.isfinite(s_norm) and math.isfinite(t_norm)):
        raise ConfigError(f"indices must be finite, got s={s_norm}, t={t_norm}")
    levels = torch.arange(config.embed_levels_per_index, dtype=torch.float64)
    bases = (config.embed_base ** levels) * math.pi
    parts = []
    for value in (s_norm, t_norm):
        phase = bases * value
        parts.extend([torch.sin(phase), torch.cos(phase)])
    return torch.cat(parts).to(dtype)


def embed_frames(session: int, frames: List[int], num_frames: int, config: ModelConfig,
                 dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Stacked embeddings (B, embed_dim) for several frames of one session."""
    rows = [positional_encode(*normalized_indices(session, t, num_frames, config), config, dtype)
            for t in frames]
    return torch.stack(rows)


def pixel_shuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """(C*r^2, H, W) -> (C, r*H, r*W) with out[c, r*i+a, r*j+b] = x[c*r^2 + a*r + b, i, j]."""
    if x.dim() < 3 or x.shape[-3] % (r * r):
        raise ShapeError(f"channel count {x.shape[-3] if x.dim() >= 3 else None} not divisible by {r * r}")
    return F.pixel_shuffle(x, r)


def pixel_unshuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """Inverse of pixel_shuffle."""
    if x.shape[-1] % r or x.shape[-2] % r:
        raise ShapeError(f"spatial size {tuple(x.shape[-2:])} not divisible by {r}")
    return F.pixel_unshuffle(x, r)


MaskArg = Union[SessionMaskSet, Mapping[str, torch.Tensor], None]


def _session_masks(masks: MaskArg, session: int) -> Optional[Mapping[str, torch.Tensor]]:
    if isinstance(masks, SessionMaskSet):
        return masks.mask(session)
    return masks


def _mask_for(name: str, masks: Optional[Mapping[str, torch.Tensor]]) -> Optional[torch.Tensor]:
    if masks is None:
        return None
    mask = masks.get(name)
    if mask is None and is_scored(name):
        raise ShapeError(f"no mask for weight {name}")
    return mask


def _masked(params: ParameterStore, name: str, masks: Optional[Mapping[str, torch.Tensor]]) -> torch.Tensor:
    weight = params.weights[name]
    mask = _mask_for(name, masks)
    if mask is None:
        return weight
    if mask.shape != weight.shape:
        raise ShapeError(f"mask {name}: shape {tuple(mask.shape)} != weight shape {tuple(weight.shape)}")
    return weight * mask.to(weight.dtype)


def forward(
    embedding: torch.Tensor,
    session: int,
    params: ParameterStore,
    masks: MaskArg,
    config: ModelConfig,
    return_hidden: bool = False,
):
    """Decode frames from embeddings of shape (D,) or (B, D).

    ``masks`` is the session's SessionMaskSet, a name->mask mapping (real masks
    carry straight-through gradients) or None for the dense network.

    Returns:
        (3, H, W) or (B, 3, H, W) in [0, 1]; with ``return_hidden`` also the
        list of block outputs.
    """
    head = params.head(session)
    session_masks = _session_masks(masks, session)
    act = ACTIVATIONS[config.activation]

    batched = embedding.dim() == 2
    h = embedding if batched else embedding.unsqueeze(0)
    if h.shape[-1] != config.embed_dim:
        raise ShapeError(f"embedding width {h.shape[-1]} != {config.embed_dim}")

    for i in range(len(config.stem_dims) - 1):
        weight = _masked(params, f'stem.{i}.weight', session_masks)
        bias = _masked(params, f'stem.{i}.bias', session_masks) if config.stem_bias else None
        h = act(F.linear(h, weight, bias))

    h0, w0 = config.base_spatial
    h = h.reshape(h.shape[0], config.stem_channels, h0, w0)

    hidden = []
    for k, r in enumerate(config.upscale_factors):
        y = None
        if config.has_conv(k):
            weight = _masked(params, f'blocks.{k}.conv.weight', session_masks)
            bias = _masked(params, f'blocks.{k}.conv.bias', session_masks)
            y = pixel_shuffle(F.conv2d(h, weight, bias, padding=1), r)
        layer = config.fso_layer(k)
        if layer is not None:
            layer.weights_real = params.weights[f'blocks.{k}.fso.real']
            mask_real = _mask_for(f'blocks.{k}.fso.real', session_masks)
            mask_imag = None
            if layer.use_imaginary:
                layer.weights_imag = params.weights[f'blocks.{k}.fso.imag']
                mask_imag = _mask_for(f'blocks.{k}.fso.imag', session_masks)
            spectral = fso_forward(h, layer, mask_real, mask_imag)
            y = spectral if y is None else y + spectral
        h = act(y)
        hidden.append(h if batched else h.squeeze(0))

    out = F.conv2d(h, head['weight'], head['bias'])
    if config.output_squash:
        out = torch.sigmoid(out)
    out = out if batched else out.squeeze(0)
    if return_hidden:
        return out, hidden
    return out


@torch.no_grad()
def decode_session(
    params: ParameterStore,
    masks: MaskArg,
    config: ModelConfig,
    session: int,
    num_frames: int,
    frames: Optional[List[int]] = None,
    chunk: int = 16,
) -> torch.Tensor:
    """Decode frames of a trained session; returns (T, 3, H, W)."""
    indices = list(range(num_frames)) if frames is None else list(frames)
    outputs = []
    for start in range(0, len(indices), chunk):
        embeddings = embed_frames(session, indices[start:start + chunk], num_frames, config, params.dtype)
        outputs.append(forward(embeddings, session, params, masks, config))
    return torch.cat(outputs)
