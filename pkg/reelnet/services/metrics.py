"""
Reconstruction metrics for ReelNet.

PSNR, SSIM and MS-SSIM on frames in [0, 1], plus the continual-learning
aggregates: the transfer matrix A (A[i][s] = metric on session s after
training through session i), the final average and backward transfer.
"""

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import torch
import torch.nn.functional as F

from reelnet.config import MS_SSIM_WEIGHTS, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW
from reelnet.errors import SessionError, ShapeError

logger = logging.getLogger(__name__)

METRIC_KINDS = ('psnr', 'ms-ssim')


def _check_pair(pred: torch.Tensor, true: torch.Tensor) -> None:
    if pred.shape != true.shape:
        raise ShapeError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(true.shape)}")


def _batched(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == 3 else x


# ---------------------------------------------------------------------------
# PSNR
# ---------------------------------------------------------------------------

def psnr(pred: torch.Tensor, true: torch.Tensor) -> float:
    """10*log10(1/MSE) in dB; identical inputs give +inf."""
    _check_pair(pred, true)
    mse = torch.mean((pred.detach().double() - true.detach().double()) ** 2).item()
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def psnr_per_frame(pred: torch.Tensor, true: torch.Tensor) -> List[float]:
    _check_pair(pred, true)
    return [psnr(p, t) for p, t in zip(_batched(pred), _batched(true))]


# ---------------------------------------------------------------------------
# SSIM / MS-SSIM
# ---------------------------------------------------------------------------

def window_size(height: int, width: int) -> int:
    """Gaussian window side: 11, clipped to the frame for tiny inputs."""
    return min(SSIM_WINDOW, height, width)


def gaussian_window(size: int, sigma: float = SSIM_SIGMA, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def _ssim_components(x: torch.Tensor, y: torch.Tensor, window: torch.Tensor):
    """Per-image mean SSIM and mean contrast-structure term, 'valid' windows only."""
    channels = x.shape[1]
    kernel = window.to(x.dtype).expand(channels, 1, *window.shape)
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2

    def blur(t):
        return F.conv2d(t, kernel, groups=channels)

    mu_x, mu_y = blur(x), blur(y)
    sigma_xx = blur(x * x) - mu_x * mu_x
    sigma_yy = blur(y * y) - mu_y * mu_y
    sigma_xy = blur(x * y) - mu_x * mu_y

    cs_map = (2.0 * sigma_xy + c2) / (sigma_xx + sigma_yy + c2)
    luminance = (2.0 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    ssim_map = luminance * cs_map
    return ssim_map.mean(dim=(1, 2, 3)), cs_map.mean(dim=(1, 2, 3))


def ssim_tensor(pred: torch.Tensor, true: torch.Tensor, window: Optional[int] = None) -> torch.Tensor:
    """Differentiable mean SSIM, one value per image (used by the training loss)."""
    _check_pair(pred, true)
    x, y = _batched(pred), _batched(true)
    height, width = x.shape[-2:]
    size = window_size(height, width) if window is None else window
    if size > min(height, width):
        raise ShapeError(f"frame {height}x{width} is smaller than the {size}x{size} SSIM window")
    values, _ = _ssim_components(x, y, gaussian_window(size, dtype=x.dtype))
    return values


def ssim(pred: torch.Tensor, true: torch.Tensor, window: Optional[int] = None) -> float:
    """Mean SSIM over all images and channels, in [-1, 1]."""
    with torch.no_grad():
        return ssim_tensor(pred.double(), true.double(), window).mean().item()


def ms_ssim(pred: torch.Tensor, true: torch.Tensor, window: Optional[int] = None) -> float:
    """Multi-scale SSIM in [0, 1].

    Uses the canonical five scale weights; scales whose downsampled frame no
    longer fits the window are dropped and the remaining weights renormalized.
    """
    _check_pair(pred, true)
    with torch.no_grad():
        x, y = _batched(pred).double(), _batched(true).double()
        height, width = x.shape[-2:]
        size = window_size(height, width) if window is None else window
        if size > min(height, width):
            raise ShapeError(f"frame {height}x{width} is smaller than the {size}x{size} SSIM window")

        scales = 1
        while scales < len(MS_SSIM_WEIGHTS) and min(height, width) // (2 ** scales) >= size:
            scales += 1
        weights = torch.tensor(MS_SSIM_WEIGHTS[:scales], dtype=torch.float64)
        weights = weights / weights.sum()

        kernel = gaussian_window(size)
        factors = []
        for level in range(scales):
            ssim_val, cs_val = _ssim_components(x, y, kernel)
            factors.append(torch.relu(ssim_val if level == scales - 1 else cs_val))
            if level < scales - 1:
                x, y = F.avg_pool2d(x, 2), F.avg_pool2d(y, 2)
        stacked = torch.stack(factors, dim=0)
        values = torch.prod(stacked ** weights[:, None], dim=0)
        return values.mean().item()


def session_metric(pred: torch.Tensor, true: torch.Tensor, kind: str) -> float:
    """Average over frames of the per-frame metric."""
    if kind == 'psnr':
        values = psnr_per_frame(pred, true)
    elif kind == 'ms-ssim':
        values = [ms_ssim(p, t) for p, t in zip(_batched(pred), _batched(true))]
    else:
        raise ShapeError(f"unknown metric '{kind}'")
    return sum(values) / len(values)


# ---------------------------------------------------------------------------
# Transfer matrix
# ---------------------------------------------------------------------------

def _difference(a: float, b: float) -> float:
    if a == b:
        return 0.0
    return a - b


@dataclass
class MetricsReport:
    """Transfer matrix with its final average and backward transfer."""

    matrix: List[List[Optional[float]]]
    metric_kind: str = 'psnr'
    avg_final: float = 0.0
    bwt: float = 0.0
    bwt_defined: bool = False
    verified: Dict[int, bool] = field(default_factory=dict)

    @classmethod
    def from_matrix(cls, matrix: List[List[Optional[float]]], metric_kind: str = 'psnr',
                    verified: Optional[Dict[int, bool]] = None) -> 'MetricsReport':
        n = len(matrix)
        if n == 0:
            raise SessionError("transfer matrix needs at least one session")
        final = matrix[n - 1]
        if any(v is None for v in final[:n]):
            raise SessionError("final row of the transfer matrix is incomplete")
        avg_final = sum(final[:n]) / n
        bwt, defined = 0.0, n > 1
        if defined:
            diffs = []
            for s in range(n - 1):
                if matrix[s][s] is None:
                    raise SessionError(f"missing end-of-session value for session {s}")
                diffs.append(_difference(final[s], matrix[s][s]))
            bwt = sum(diffs) / len(diffs)
        return cls(matrix=matrix, metric_kind=metric_kind, avg_final=avg_final,
                   bwt=bwt, bwt_defined=defined, verified=dict(verified or {}))

    def to_dict(self) -> Dict[str, Any]:
        def encode(v):
            if v is None:
                return None
            return 'inf' if math.isinf(v) else v

        return {
            'metric': self.metric_kind,
            'matrix': [[encode(v) for v in row] for row in self.matrix],
            'avg_final': encode(self.avg_final),
            'bwt': self.bwt,
            'bwt_defined': self.bwt_defined,
            'verified': {str(k): v for k, v in self.verified.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def render_table(self) -> str:
        """Plain-text table: rows are training stages, columns sessions."""
        n = len(self.matrix)

        def cell(v):
            if v is None:
                return '-'
            return 'inf' if math.isinf(v) else f'{v:.4f}'

        header = ['after \\ session'] + [str(s) for s in range(n)]
        rows = [[f'stage {i}'] + [cell(v) for v in row] for i, row in enumerate(self.matrix)]
        widths = [max(len(r[c]) for r in [header] + rows) for c in range(len(header))]
        lines = ['  '.join(text.rjust(w) for text, w in zip(r, widths)) for r in [header] + rows]
        lines.append('')
        lines.append(f"{self.metric_kind.upper()} avg (final) = {cell(self.avg_final)}")
        bwt = f'{self.bwt:.4f}' if self.bwt_defined else '0.0000 (undefined: one session)'
        lines.append(f"BWT = {bwt}")
        return '\n'.join(lines)


def evaluate_matrix(stages, sessions, metric: str = 'psnr', workers: int = 1) -> MetricsReport:
    """Fill the transfer matrix from trained states.

    Args:
        stages: Either one state per finished session (stage i = state after
            session i), or a single final state. With a single state, earlier
            rows are reconstructed from its decodes after checking them
            against the digests recorded at the end of each session.
        sessions: VideoSession objects in session order.
        metric: 'psnr' or 'ms-ssim'.
        workers: Threads used to decode sessions of one row in parallel.
    """
    from reelnet.services.data import frames_digest
    from reelnet.services.model import decode_session

    if metric not in METRIC_KINDS:
        raise ShapeError(f"unknown metric '{metric}'")
    stages = list(stages)
    if not stages:
        raise SessionError("no trained state to evaluate")
    n = stages[-1].masks.session_count
    if len(sessions) < n:
        raise SessionError(f"state has {n} sessions but only {len(sessions)} videos were given")

    def score(state, s):
        start = time.perf_counter()
        decoded = decode_session(state.params, state.masks, state.model_config, s, sessions[s].num_frames)
        elapsed = time.perf_counter() - start
        logger.debug("Decoded session %d at %.1f frames/s", s, sessions[s].num_frames / max(elapsed, 1e-9))
        return session_metric(decoded, sessions[s].frames.to(decoded.dtype), metric), frames_digest(decoded)

    def row(state, upto):
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            return list(pool.map(lambda s: score(state, s), range(upto + 1)))

    matrix: List[List[Optional[float]]] = [[None] * n for _ in range(n)]
    verified: Dict[int, bool] = {}

    if len(stages) == n:
        final_records = stages[-1].records
        for i, state in enumerate(stages):
            if state.masks.session_count < i + 1:
                raise SessionError(f"stage {i} has only {state.masks.session_count} sessions")
            for s, (value, digest) in enumerate(row(state, i)):
                matrix[i][s] = value
                if i == n - 1:
                    verified[s] = s < len(final_records) and final_records[s].digest == digest
        for s in range(n):
            if not verified[s]:
                logger.warning("Session %d decode differs from its end-of-session digest", s)
    elif len(stages) == 1:
        state = stages[0]
        final = row(state, n - 1)
        for s, (value, digest) in enumerate(final):
            record = state.records[s] if s < len(state.records) else None
            same = record is not None and record.digest == digest
            verified[s] = same
            if getattr(state, 'quantized', None) is not None:
                # every stage of a quantized model shares the same frozen weights
                same = True
            for i in range(s, n):
                if i == n - 1 or same:
                    matrix[i][s] = value
            if not same and record is not None:
                matrix[s][s] = record.psnr if metric == 'psnr' else record.ms_ssim
                logger.warning("Session %d decode differs from its end-of-session digest", s)
    else:
        raise SessionError(f"expected 1 or {n} stage states, got {len(stages)}")

    return MetricsReport.from_matrix(matrix, metric, verified)
