"""
Post-training compression for ReelNet.

Per-channel uniform affine quantization of the trained weights and heads,
plus bits-per-pixel accounting. Masks travel alongside unchanged; scores are
not needed to decode and are dropped.
"""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from reelnet.config import SUPPORTED_BITS
from reelnet.errors import ConfigError, SessionError
from reelnet.services.model import ParameterStore, is_scored
from reelnet.services.subnet import SessionMaskSet, packed_size

logger = logging.getLogger(__name__)

BPP_MODES = ('exact', 'padded')
GRANULARITIES = ('channel', 'tensor')

# min and scale are charged as two float32 values per quantized channel
_RANGE_BITS = 64


@dataclass
class QuantizedTensor:
    """Integer codes plus the affine ranges that map them back.

    ``minimum`` and ``scale`` hold one entry per channel: a value is
    ``minimum[c] + scale[c] * code`` for the channel ``c`` it belongs to
    (see ``channel_rows``). A single entry covers the whole tensor. With 32
    bits the codes are the original float values and both lists are empty.
    """

    bits: int
    minimum: List[float]
    scale: List[float]
    codes: torch.Tensor
    dtype: torch.dtype = torch.float32

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.codes.shape)

    @property
    def numel(self) -> int:
        return self.codes.numel()

    @property
    def channels(self) -> int:
        return len(self.minimum)


@dataclass
class QuantizedStore:
    bits: int
    weights: 'OrderedDict[str, QuantizedTensor]'
    heads: Dict[int, Dict[str, QuantizedTensor]]
    masks: SessionMaskSet
    seed: int = 0
    stats: Dict[str, float] = field(default_factory=dict)


def _check_bits(bits: int) -> None:
    if bits not in SUPPORTED_BITS:
        raise ConfigError(f"bits must be one of {SUPPORTED_BITS}, got {bits}")


def _check_granularity(granularity: str) -> None:
    if granularity not in GRANULARITIES:
        raise ConfigError(f"granularity must be one of {GRANULARITIES}, got '{granularity}'")


def _code_dtype(bits: int) -> torch.dtype:
    return torch.uint8 if bits <= 8 else torch.int32


def channel_rows(tensor: torch.Tensor, granularity: str = 'channel') -> torch.Tensor:
    """(channels, entries) view: one channel per dim-0 slice, a single one for vectors.

    With ``granularity='tensor'`` the whole tensor is one channel.
    """
    if granularity == 'channel' and tensor.dim() >= 2:
        return tensor.reshape(tensor.shape[0], -1)
    return tensor.reshape(1, -1)


def quantize_tensor(tensor: torch.Tensor, bits: int, support: Optional[torch.Tensor] = None,
                    granularity: str = 'channel') -> QuantizedTensor:
    """Quantize one tensor with a range per channel, taken over ``support`` when given.

    ``granularity='tensor'`` uses a single range for the whole tensor.

    Entries outside the support are never read by a decode and get code 0,
    as do all entries of a channel with nothing in its support.
    """
    _check_bits(bits)
    _check_granularity(granularity)
    values = tensor.detach().cpu()
    if bits == 32:
        return QuantizedTensor(32, [], [], values.clone(), values.dtype)

    rows = channel_rows(values.double(), granularity)
    if support is None:
        selected = torch.ones_like(rows, dtype=torch.bool)
    else:
        selected = channel_rows(support.detach().cpu().bool(), granularity)
    covered = selected.any(dim=1)
    zeros = torch.zeros(rows.shape[0], dtype=torch.float64)
    minimum = torch.where(covered, rows.masked_fill(~selected, math.inf).amin(dim=1), zeros)
    maximum = torch.where(covered, rows.masked_fill(~selected, -math.inf).amax(dim=1), zeros)

    levels = 2 ** bits - 1
    scale = (maximum - minimum) / levels
    step = torch.where(scale > 0, scale, torch.ones_like(scale))
    codes = torch.round((rows - minimum[:, None]) / step[:, None]).clamp(0, levels)
    codes = codes * (selected & (scale > 0)[:, None]).to(codes.dtype)
    return QuantizedTensor(bits, minimum.tolist(), scale.tolist(),
                           codes.reshape(values.shape).to(_code_dtype(bits)), values.dtype)


def dequantize_tensor(quantized: QuantizedTensor) -> torch.Tensor:
    if quantized.bits == 32:
        return quantized.codes.clone()
    minimum = torch.tensor(quantized.minimum, dtype=torch.float64)[:, None]
    scale = torch.tensor(quantized.scale, dtype=torch.float64)[:, None]
    values = minimum + scale * quantized.codes.double().reshape(quantized.channels, -1)
    return values.reshape(quantized.shape).to(quantized.dtype)


def quantize(params: ParameterStore, bits: int, masks: SessionMaskSet,
             granularity: str = 'channel') -> QuantizedStore:
    """Quantize trunk weights over their cumulative-mask support, and every head."""
    _check_bits(bits)
    _check_granularity(granularity)
    support = masks.cumulative() if masks.session_count else None
    weights: 'OrderedDict[str, QuantizedTensor]' = OrderedDict()
    max_error = 0.0
    for name, tensor in params.weights.items():
        q = quantize_tensor(tensor, bits, None if support is None else support[name], granularity)
        weights[name] = q
        restored = dequantize_tensor(q)
        diff = (restored.double() - tensor.detach().cpu().double()).abs()
        if support is not None:
            diff = diff * support[name].to(diff.dtype)
        max_error = max(max_error, diff.max().item() if diff.numel() else 0.0)
    heads = {
        session: {name: quantize_tensor(t, bits, granularity=granularity) for name, t in head.items()}
        for session, head in params.heads.items()
    }
    store = QuantizedStore(bits, weights, heads, masks, params.seed, {'max_abs_error': max_error})
    logger.info("Quantized %d trunk tensors and %d heads to %d bits per %s (max |error| %.3g)",
                len(weights), len(heads), bits, granularity, max_error)
    return store


def dequantize(store: QuantizedStore) -> ParameterStore:
    """Float parameters for decoding; the returned store carries no scores."""
    weights = OrderedDict((name, dequantize_tensor(q)) for name, q in store.weights.items())
    heads = {s: {name: dequantize_tensor(q) for name, q in head.items()} for s, head in store.heads.items()}
    return ParameterStore(weights=weights, scores=OrderedDict(), heads=heads, seed=store.seed)


# ---------------------------------------------------------------------------
# Size accounting
# ---------------------------------------------------------------------------

@dataclass
class SizeBreakdown:
    weight_bits: int
    mask_bits: int
    head_bits: int
    range_bits: int
    pixels: int
    per_session: List[Dict[str, int]] = field(default_factory=list)

    @property
    def total_bits(self) -> int:
        return self.weight_bits + self.mask_bits + self.head_bits + self.range_bits

    @property
    def bpp(self) -> float:
        return self.total_bits / self.pixels


def size_breakdown(store: QuantizedStore, frame_dims: Sequence[Tuple[int, int, int]],
                   mode: str = 'exact') -> SizeBreakdown:
    """Bits charged to each session.

    A weight is charged once, to the first session whose mask selects it.
    Mask bits are charged for score-ranked tensors only. ``padded`` rounds
    every mask up to whole bytes and adds the stored min/scale pair of
    every quantized channel.

    Args:
        store: Quantized model.
        frame_dims: (T, H, W) of each trained session, in session order.
        mode: 'exact' or 'padded'.
    """
    if mode not in BPP_MODES:
        raise ConfigError(f"bpp mode must be one of {BPP_MODES}, got '{mode}'")
    sessions = store.masks.session_count
    if len(frame_dims) < sessions:
        raise SessionError(f"{sessions} sessions trained but {len(frame_dims)} frame sizes given")
    pixels = sum(t * h * w for t, h, w in frame_dims[:sessions])
    if pixels <= 0:
        raise ConfigError("bpp needs at least one pixel")

    weight_bits = mask_bits = head_bits = range_bits = 0
    per_session = []
    cumulative = {name: torch.zeros(q.shape, dtype=torch.bool) for name, q in store.weights.items()}
    for s in range(sessions):
        masks = store.masks.mask(s)
        row = {'weight_bits': 0, 'mask_bits': 0, 'head_bits': 0}
        for name, q in store.weights.items():
            owned = torch.logical_and(masks[name], ~cumulative[name])
            row['weight_bits'] += int(owned.sum()) * q.bits
            cumulative[name] = torch.logical_or(cumulative[name], masks[name])
            if is_scored(name):
                row['mask_bits'] += packed_size(q.numel) * 8 if mode == 'padded' else q.numel
        head = store.heads.get(s, {})
        row['head_bits'] = sum(q.numel * q.bits for q in head.values())
        weight_bits += row['weight_bits']
        mask_bits += row['mask_bits']
        head_bits += row['head_bits']
        per_session.append(row)

    if mode == 'padded' and store.bits != 32:
        tensors = list(store.weights.values()) + [q for h in store.heads.values() for q in h.values()]
        range_bits = sum(q.channels for q in tensors) * _RANGE_BITS
    return SizeBreakdown(weight_bits, mask_bits, head_bits, range_bits, pixels, per_session)


def bpp(store: QuantizedStore, frame_dims: Sequence[Tuple[int, int, int]], mode: str = 'exact') -> float:
    return size_breakdown(store, frame_dims, mode).bpp
