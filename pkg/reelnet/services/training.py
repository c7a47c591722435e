"""
Session training for ReelNet.

One session = one video. At the start of a session the scores are redrawn,
a fresh output head is added and the cumulative mask of all earlier sessions
is fixed. Every step then recomputes the top-c mask from the current scores,
decodes a batch of frames through the masked network, and updates weights
(gated away from anything an earlier session owns), scores and the head.
When the session ends its mask is frozen and merged into the cumulative mask.
"""

import json
import logging
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence

import torch
from filelock import FileLock

from reelnet.config import DEFAULT_TRAIN
from reelnet.errors import ConfigError, DatasetError, SessionError, ShapeError, TrainingDiverged
from reelnet.services.data import VideoSession, frames_digest
from reelnet.services.metrics import psnr, session_metric, ssim_tensor
from reelnet.services.model import (
    ModelConfig,
    ParameterStore,
    capacity_for,
    decode_session,
    embed_frames,
    forward,
    is_scored,
)
from reelnet.services.subnet import (
    ScoreState,
    SessionMaskSet,
    gate_weight_gradient,
    select_topc,
    subnet_mask,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Configuration and state
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    alpha: float = DEFAULT_TRAIN['alpha']
    lr: float = DEFAULT_TRAIN['lr']
    epochs: int = DEFAULT_TRAIN['epochs']
    warmup_epochs: int = DEFAULT_TRAIN['warmup_epochs']
    batch_size: int = DEFAULT_TRAIN['batch_size']
    adam_beta1: float = DEFAULT_TRAIN['adam_beta1']
    adam_beta2: float = DEFAULT_TRAIN['adam_beta2']
    adam_eps: float = DEFAULT_TRAIN['adam_eps']
    seed: int = DEFAULT_TRAIN['seed']

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lr <= 0 or not math.isfinite(self.lr):
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError(f"warmup_epochs={self.warmup_epochs} must lie in 0..epochs={self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ConfigError("Adam betas must lie in [0, 1)")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'TrainConfig':
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown train config keys: {sorted(unknown)}")
        config = cls(**dict(data))
        config.validate()
        return config


@dataclass
class SessionRecord:
    """What a finished session left behind, checked again at evaluation time."""

    session: int
    source: Dict[str, Any]
    num_frames: int
    height: int
    width: int
    digest: str
    psnr: float
    ms_ssim: float
    steps: int

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['psnr'] = 'inf' if math.isinf(self.psnr) else self.psnr
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'SessionRecord':
        values = dict(data)
        values['psnr'] = math.inf if values.get('psnr') == 'inf' else float(values['psnr'])
        return cls(**values)


@dataclass
class TrainedState:
    """Everything a checkpoint holds: configs, parameters, frozen masks, session records."""

    model_config: ModelConfig
    train_config: TrainConfig
    params: ParameterStore
    masks: SessionMaskSet
    records: List[SessionRecord] = field(default_factory=list)
    quantized: Optional[Any] = None

    @classmethod
    def create(cls, model_config: ModelConfig, train_config: TrainConfig,
               dtype: torch.dtype = torch.float32) -> 'TrainedState':
        model_config.validate()
        train_config.validate()
        params = ParameterStore.initialize(model_config, train_config.seed, dtype)
        masks = SessionMaskSet(dict(params.maskable_shapes()))
        return cls(model_config, train_config, params, masks)

    @property
    def session_count(self) -> int:
        return self.masks.session_count


# ---------------------------------------------------------------------------
# Loss and schedule
# ---------------------------------------------------------------------------

def loss(pred: torch.Tensor, true: torch.Tensor, alpha: float) -> torch.Tensor:
    """alpha * mean|v - v_hat| + (1 - alpha) * (1 - SSIM(v, v_hat)), differentiable."""
    if pred.shape != true.shape:
        raise ShapeError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(true.shape)}")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    l1 = torch.mean(torch.abs(pred - true))
    if alpha == 1.0:
        return alpha * l1
    return alpha * l1 + (1.0 - alpha) * (1.0 - ssim_tensor(pred, true).mean())


def loss_and_grad(pred: torch.Tensor, true: torch.Tensor, alpha: float):
    """Loss value and its gradient with respect to the prediction."""
    leaf = pred.detach().clone().requires_grad_(True)
    value = loss(leaf, true.to(leaf.dtype), alpha)
    (grad,) = torch.autograd.grad(value, leaf)
    return value.detach(), grad


def lr_schedule(step: int, total_steps: int, warmup_steps: int, lr: float) -> float:
    """Linear warmup from 0, then cosine annealing down to 0 at ``total_steps``."""
    if step < warmup_steps:
        return lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return lr
    progress = min(step - warmup_steps, total_steps - warmup_steps) / (total_steps - warmup_steps)
    return lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Gradients and optimizer
# ---------------------------------------------------------------------------

@dataclass
class StepGradients:
    loss: float
    weights: Dict[str, torch.Tensor]
    scores: Dict[str, torch.Tensor]
    head: Dict[str, torch.Tensor]
    pred: torch.Tensor


def session_mask(params: ParameterStore, config: ModelConfig, straight_through: bool = True) -> Dict[str, torch.Tensor]:
    """Top-c mask of the current scores; biases are always fully selected."""
    masks = {}
    for name, weight in params.weights.items():
        if is_scored(name):
            scores = params.scores[name]
            c = capacity_for(config, name)
            masks[name] = subnet_mask(scores, c) if straight_through else select_topc(scores, c)
        else:
            masks[name] = torch.ones_like(weight, dtype=torch.bool if not straight_through else weight.dtype)
    return masks


def backward(
    params: ParameterStore,
    embeddings: torch.Tensor,
    targets: torch.Tensor,
    session: int,
    config: ModelConfig,
    alpha: float,
    cumulative_prev: Optional[Mapping[str, torch.Tensor]] = None,
    dense: bool = False,
) -> StepGradients:
    """Loss and gated gradients for one batch.

    Weight gradients are multiplied by m_s * (1 - M_prev); score gradients
    pass the top-c indicator straight through (dL/dw_eff * theta). With
    ``dense`` the network runs unmasked and no scores are involved.
    """
    head = params.head(session)
    weights = [w.requires_grad_(True) for w in params.weights.values()]
    head_tensors = [t.requires_grad_(True) for t in head.values()]
    if dense:
        scores, masks = [], None
    else:
        scores = [s.requires_grad_(True) for s in params.scores.values()]
        masks = session_mask(params, config)

    pred = forward(embeddings, session, params, masks, config)
    value = loss(pred, targets.to(pred.dtype), alpha)
    if not torch.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value.item()} in session {session}")

    grads = torch.autograd.grad(value, weights + scores + head_tensors, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for g, t in zip(grads, weights + scores + head_tensors)]
    names = list(params.weights)
    weight_grads = dict(zip(names, grads[:len(weights)]))
    score_grads = dict(zip(list(params.scores) if not dense else [], grads[len(weights):len(weights) + len(scores)]))
    head_grads = dict(zip(head, grads[len(weights) + len(scores):]))

    if not dense:
        for name, grad in weight_grads.items():
            prev = cumulative_prev[name] if cumulative_prev is not None else torch.zeros_like(grad, dtype=torch.bool)
            weight_grads[name] = gate_weight_gradient(grad, masks[name].detach(), prev)

    return StepGradients(value.item(), weight_grads, score_grads, head_grads, pred.detach())


def make_optimizer(tensors: Sequence[torch.Tensor], train_config: TrainConfig) -> torch.optim.Adam:
    """Fresh Adam for one session; zero moments keep frozen weights exactly still."""
    return torch.optim.Adam(
        list(tensors),
        lr=train_config.lr,
        betas=(train_config.adam_beta1, train_config.adam_beta2),
        eps=train_config.adam_eps,
    )


@torch.no_grad()
def adam_step(
    tensors: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    optimizer: torch.optim.Adam,
    lr_t: float,
) -> None:
    """Apply one bias-corrected Adam update in place."""
    if len(tensors) != len(grads):
        raise ShapeError(f"{len(tensors)} tensors but {len(grads)} gradients")
    for tensor, grad in zip(tensors, grads):
        if tensor.shape != grad.shape:
            raise ShapeError(f"gradient shape {tuple(grad.shape)} != tensor shape {tuple(tensor.shape)}")
        tensor.grad = grad.detach().clone()
    for group in optimizer.param_groups:
        group['lr'] = lr_t
    optimizer.step()
    for tensor in tensors:
        tensor.grad = None


# ---------------------------------------------------------------------------
# Metrics log
# ---------------------------------------------------------------------------

class MetricsLog:
    """Per-step training records appended as JSON lines."""

    def __init__(self, path: str):
        self.path = path
        self._lock = FileLock(path + '.lock')

    def write(self, **record) -> None:
        line = json.dumps({k: ('inf' if isinstance(v, float) and math.isinf(v) else v) for k, v in record.items()})
        with self._lock:
            with open(self.path, 'a') as f:
                f.write(line + '\n')

    def read(self) -> List[Dict[str, Any]]:
        with self._lock:
            with open(self.path, 'r') as f:
                return [json.loads(line) for line in f if line.strip()]


# ---------------------------------------------------------------------------
# Session loop
# ---------------------------------------------------------------------------

def _detach_all(params: ParameterStore) -> None:
    for store in (params.weights, params.scores):
        for name, tensor in store.items():
            store[name] = tensor.detach()
    for session, head in params.heads.items():
        params.heads[session] = {name: t.detach() for name, t in head.items()}


def train_session(
    video: VideoSession,
    state: TrainedState,
    metrics_log: Optional[MetricsLog] = None,
    dense: bool = False,
    epochs: Optional[int] = None,
) -> SessionRecord:
    """Train the next session on ``video`` and freeze its subnetwork.

    Args:
        video: Frames of the new session.
        state: Trained state holding all earlier sessions; updated in place.
        metrics_log: Optional per-step log.
        dense: Train the unmasked network (comparison runs with c=1). Only
            allowed for session 0.
        epochs: Override of ``state.train_config.epochs``.

    Returns:
        The session's record: decode digest, and the frame-averaged PSNR and
        MS-SSIM at session end.
    """
    model_config, train_config, params = state.model_config, state.train_config, state.params
    session = state.masks.session_count
    if session >= model_config.max_sessions:
        raise SessionError(f"all {model_config.max_sessions} sessions are already trained")
    if dense and session > 0:
        # a dense session owns every weight, so a later one would overwrite it
        raise ConfigError(f"dense training is limited to session 0, got session {session}")
    if video.num_frames < 1:
        raise DatasetError(f"session {session} has no frames")
    out_h, out_w = model_config.output_spatial
    if (video.height, video.width) != (out_h, out_w):
        raise ShapeError(f"session {session} frames are {video.height}x{video.width}, model decodes {out_h}x{out_w}")

    epochs = train_config.epochs if epochs is None else epochs
    warmup = min(train_config.warmup_epochs, epochs)
    steps_per_epoch = math.ceil(video.num_frames / train_config.batch_size)
    total_steps = epochs * steps_per_epoch
    warmup_steps = warmup * steps_per_epoch

    scores = ScoreState({}, params.seed)
    scores.reinitialize(session, params.score_shapes(), params.fan_ins(), params.dtype)
    params.scores = OrderedDict(scores.scores)
    head = params.add_head(session, model_config)
    cumulative_prev = state.masks.cumulative(session - 1) if session > 0 else {
        name: torch.zeros(shape, dtype=torch.bool) for name, shape in params.maskable_shapes().items()
    }

    tensors = list(params.weights.values()) + list(head.values())
    if not dense:
        tensors += list(params.scores.values())
    optimizer = make_optimizer(tensors, train_config)
    targets = video.frames.to(params.dtype)
    embeddings = embed_frames(session, list(range(video.num_frames)), video.num_frames, model_config, params.dtype)

    logger.info("Session %d: %d frames %dx%d, %d steps (c=%s%s)", session, video.num_frames,
                video.width, video.height, total_steps, model_config.capacity_c, ', dense' if dense else '')
    start = time.perf_counter()
    step = 0
    for epoch in range(epochs):
        for first in range(0, video.num_frames, train_config.batch_size):
            batch = slice(first, first + train_config.batch_size)
            grads = backward(params, embeddings[batch], targets[batch], session, model_config,
                             train_config.alpha, cumulative_prev, dense)
            lr_t = lr_schedule(step + 1, total_steps, warmup_steps, train_config.lr)
            ordered = [grads.weights[n] for n in params.weights] + [grads.head[n] for n in head]
            if not dense:
                ordered += [grads.scores[n] for n in params.scores]
            adam_step(tensors, ordered, optimizer, lr_t)
            step += 1
            if logger.isEnabledFor(logging.DEBUG) or metrics_log is not None:
                step_psnr = psnr(grads.pred, targets[batch])
                logger.debug("session %d step %d/%d lr=%.3g loss=%.6f psnr=%.2f", session, step,
                             total_steps, lr_t, grads.loss, step_psnr)
                if metrics_log is not None:
                    metrics_log.write(step=step, session=session, epoch=epoch, lr=lr_t,
                                      loss=grads.loss, psnr=step_psnr)

    _detach_all(params)
    if dense:
        final = {name: torch.ones(shape, dtype=torch.bool) for name, shape in params.maskable_shapes().items()}
    else:
        final = session_mask(params, model_config, straight_through=False)
    state.masks.add_session(final)

    decoded = decode_session(params, state.masks, model_config, session, video.num_frames)
    record = SessionRecord(
        session=session,
        source=dict(video.source),
        num_frames=video.num_frames,
        height=video.height,
        width=video.width,
        digest=frames_digest(decoded),
        psnr=session_metric(decoded, targets, 'psnr'),
        ms_ssim=session_metric(decoded, targets, 'ms-ssim'),
        steps=total_steps,
    )
    state.records.append(record)
    logger.info("Session %d done in %.1fs: PSNR %.2f dB, MS-SSIM %.4f", session,
                time.perf_counter() - start, record.psnr, record.ms_ssim)
    return record
