"""
Subnetwork selection services for ReelNet.

Every maskable weight tensor has a score tensor of the same shape. Each
training step keeps the top-c fraction of scores per layer; the kept weights
form the session's subnetwork. When a session ends its mask is frozen and
OR-ed into the cumulative mask, and weights under the cumulative mask never
receive another update.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from reelnet.errors import CorruptMaskError, SessionError, ShapeError

logger = logging.getLogger(__name__)


def _check_congruent(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def topc_count(numel: int, c: float) -> int:
    """Number of weights kept at capacity c (round half up)."""
    return int(math.floor(c * numel + 0.5))


def select_topc(scores: torch.Tensor, c: float) -> torch.Tensor:
    """Boolean mask of the round(c*n) largest scores.

    Ties go to the lower flat index, so the result is platform independent.
    """
    if scores.numel() == 0:
        raise ShapeError("cannot select from an empty score tensor")
    if not 0.0 < c <= 1.0:
        raise ShapeError(f"capacity must lie in (0, 1], got {c}")
    if not torch.isfinite(scores).all():
        raise ShapeError("scores must be finite")

    flat = scores.detach().reshape(-1)
    k = topc_count(flat.numel(), c)
    mask = torch.zeros(flat.numel(), dtype=torch.bool, device=flat.device)
    if k > 0:
        order = torch.sort(flat, descending=True, stable=True).indices
        mask[order[:k]] = True
    return mask.reshape(scores.shape)


class GetSubnet(torch.autograd.Function):
    """Top-c indicator with a straight-through backward pass."""

    @staticmethod
    def forward(ctx, scores, c):
        return select_topc(scores, c).to(scores.dtype)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output, None


def subnet_mask(scores: torch.Tensor, c: float) -> torch.Tensor:
    """Real-valued 0/1 mask whose gradient flows back to the scores unchanged."""
    return GetSubnet.apply(scores, c)


def accumulate(cumulative_prev: torch.Tensor, session_mask: torch.Tensor) -> torch.Tensor:
    """Elementwise OR of the previous cumulative mask and a session mask."""
    _check_congruent(cumulative_prev, session_mask, "accumulate")
    return torch.logical_or(cumulative_prev.bool(), session_mask.bool())


def gate_weight_gradient(
    grad: torch.Tensor,
    session_mask: torch.Tensor,
    cumulative_prev: torch.Tensor,
) -> torch.Tensor:
    """grad * m_s * (1 - M_prev): weights owned by past sessions get exactly zero."""
    _check_congruent(grad, session_mask, "gate_weight_gradient")
    _check_congruent(grad, cumulative_prev, "gate_weight_gradient")
    trainable = torch.logical_and(session_mask.bool(), ~cumulative_prev.bool())
    return grad * trainable.to(grad.dtype)


def score_gradient_ste(upstream: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    """Score gradient with the indicator treated as identity: dL/d(theta*m) * theta."""
    _check_congruent(upstream, theta, "score_gradient_ste")
    return upstream * theta


# ---------------------------------------------------------------------------
# Bit packing (1 bit per weight, each layer padded to a whole byte)
# ---------------------------------------------------------------------------

def packed_size(numel: int) -> int:
    return (numel + 7) // 8


def pack_masks(masks: Sequence[torch.Tensor]) -> bytes:
    """Concatenate masks in layer order, one bit per weight, little bit order."""
    chunks = []
    for mask in masks:
        bits = mask.detach().cpu().reshape(-1).bool().numpy()
        chunks.append(np.packbits(bits, bitorder='little').tobytes())
    return b''.join(chunks)


def unpack_masks(data: bytes, shapes: Sequence[Tuple[int, ...]]) -> List[torch.Tensor]:
    """Inverse of pack_masks for the given layer shapes."""
    expected = sum(packed_size(math.prod(shape)) for shape in shapes)
    if len(data) != expected:
        raise CorruptMaskError(f"mask stream has {len(data)} bytes, expected {expected}")
    masks = []
    offset = 0
    buffer = np.frombuffer(data, dtype=np.uint8)
    for shape in shapes:
        numel = math.prod(shape)
        nbytes = packed_size(numel)
        bits = np.unpackbits(buffer[offset:offset + nbytes], count=numel, bitorder='little')
        masks.append(torch.from_numpy(bits.astype(np.bool_)).reshape(shape))
        offset += nbytes
    return masks


# ---------------------------------------------------------------------------
# Session masks and scores
# ---------------------------------------------------------------------------

@dataclass
class SessionMaskSet:
    """Frozen per-session masks, in session order, keyed by tensor name."""

    shapes: Dict[str, Tuple[int, ...]]
    sessions: List[Dict[str, torch.Tensor]] = field(default_factory=list)

    @property
    def session_count(self) -> int:
        return len(self.sessions)

    @property
    def names(self) -> List[str]:
        return list(self.shapes)

    def mask(self, session: int) -> Dict[str, torch.Tensor]:
        if not 0 <= session < len(self.sessions):
            raise SessionError(f"no mask for session {session} ({len(self.sessions)} sessions trained)")
        return self.sessions[session]

    def cumulative(self, upto: Optional[int] = None) -> Dict[str, torch.Tensor]:
        """M after session ``upto`` (inclusive); all zeros before any session."""
        last = len(self.sessions) - 1 if upto is None else upto
        if last >= len(self.sessions):
            raise SessionError(f"no mask for session {last}")
        result = {name: torch.zeros(shape, dtype=torch.bool) for name, shape in self.shapes.items()}
        for session in self.sessions[:last + 1]:
            for name in result:
                result[name] = accumulate(result[name], session[name])
        return result

    def add_session(self, masks: Mapping[str, torch.Tensor]) -> None:
        """Freeze a finished session's masks."""
        if set(masks) != set(self.shapes):
            raise ShapeError("session masks must cover every maskable tensor")
        frozen = {}
        for name, shape in self.shapes.items():
            mask = masks[name].detach().bool().cpu()
            if tuple(mask.shape) != tuple(shape):
                raise ShapeError(f"mask {name}: shape {tuple(mask.shape)} != {tuple(shape)}")
            frozen[name] = mask.clone()
        self.sessions.append(frozen)

    def capacity_stats(self) -> List[Dict[str, Dict[str, float]]]:
        """Per session and tensor: density, cumulative density, reuse and new-weight fractions."""
        stats = []
        cumulative = {name: torch.zeros(shape, dtype=torch.bool) for name, shape in self.shapes.items()}
        for session in self.sessions:
            row = {}
            for name, mask in session.items():
                numel = mask.numel()
                selected = int(mask.sum())
                reused = int(torch.logical_and(mask, cumulative[name]).sum())
                cumulative[name] = accumulate(cumulative[name], mask)
                row[name] = {
                    'density': selected / numel,
                    'cumulative_density': int(cumulative[name].sum()) / numel,
                    'reuse_fraction': reused / selected if selected else 0.0,
                    'new_weights': selected - reused,
                }
            stats.append(row)
        return stats


def init_scores(
    shapes: Mapping[str, Tuple[int, ...]],
    fan_ins: Mapping[str, int],
    seed: int,
    session: int,
    dtype: torch.dtype = torch.float32,
) -> Dict[str, torch.Tensor]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) scores, seeded by (seed, session)."""
    generator = torch.Generator().manual_seed(score_seed(seed, session))
    scores = {}
    for name, shape in shapes.items():
        bound = 1.0 / math.sqrt(max(fan_ins[name], 1))
        values = torch.rand(shape, generator=generator, dtype=torch.float64) * 2.0 - 1.0
        scores[name] = (values * bound).to(dtype)
    return scores


def score_seed(seed: int, session: int) -> int:
    return (seed * 1_000_003 + 7919 * (session + 1)) % (2 ** 63)


@dataclass
class ScoreState:
    """Score tensors of the running session plus the seed they were drawn from."""

    scores: Dict[str, torch.Tensor]
    seed: int
    session: int = 0

    def reinitialize(self, session: int, shapes: Mapping[str, Tuple[int, ...]], fan_ins: Mapping[str, int],
                     dtype: torch.dtype = torch.float32) -> None:
        self.scores = init_scores(shapes, fan_ins, self.seed, session, dtype)
        self.session = session
        logger.info("Re-initialized %d score tensors for session %d", len(self.scores), session)
