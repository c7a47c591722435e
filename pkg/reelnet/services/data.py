"""
Data management services for ReelNet.
Handles video sessions (PNG frame folders and synthetic clips), session
manifests, and the JSON config files they reference.
"""

import hashlib
import json
import logging
import math
import os
import re
from dataclasses import dataclass, field
from typing import Any, Dict, List

import numpy as np
import torch
import torch.nn.functional as F
from filelock import FileLock

from reelnet.config import FRAME_PATTERN, FRAME_SUFFIX, SYNTH_KINDS
from reelnet.errors import ConfigError, DatasetError, ManifestError
from reelnet.services.path_utils import frame_path, resolve_path

logger = logging.getLogger(__name__)

_FRAME_RE = re.compile(r'^f(\d{5})\.png$')


# ---------------------------------------------------------------------------
# JSON config files
# ---------------------------------------------------------------------------

def load_json_config(path: str) -> Dict[str, Any]:
    """Load a JSON key/value file.

    Returns:
        The parsed dictionary
    """
    try:
        with open(path, 'r') as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except (json.JSONDecodeError, IOError) as e:
        raise ConfigError(f"could not read config file {path}: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def save_json_config(path: str, data: Dict[str, Any]) -> None:
    """Write a JSON key/value file under a file lock."""
    lock = FileLock(path + '.lock')
    with lock:
        with open(path, 'w') as f:
            json.dump(data, f, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Video sessions
# ---------------------------------------------------------------------------

@dataclass
class VideoSession:
    """Ordered frames of one session, shape (T, 3, H, W), values in [0, 1]."""

    session_index: int
    frames: torch.Tensor
    source: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.frames.dim() != 4 or self.frames.shape[1] != 3:
            raise DatasetError(f"frames must have shape (T, 3, H, W), got {tuple(self.frames.shape)}")
        if self.frames.shape[0] < 1:
            raise DatasetError("a session needs at least one frame")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[2]

    @property
    def width(self) -> int:
        return self.frames.shape[3]


def frames_digest(frames: torch.Tensor) -> str:
    """SHA-256 of the raw little-endian frame bytes (bit-exact identity check)."""
    array = frames.detach().cpu().contiguous().numpy()
    array = array.astype(array.dtype.newbyteorder('<'), copy=False)
    return hashlib.sha256(array.tobytes()).hexdigest()


def load_frame_dir(path: str, session_index: int = 0) -> VideoSession:
    """Load f00001.png, f00002.png, ... from a directory.

    Raises:
        DatasetError: on a numbering gap, mixed frame sizes or an unreadable file.
    """
    from PIL import Image

    directory = resolve_path(path)
    if not os.path.isdir(directory):
        raise DatasetError(f"frame directory not found: {directory}")

    numbers = sorted(
        int(m.group(1)) for m in (_FRAME_RE.match(name) for name in os.listdir(directory)) if m
    )
    if not numbers:
        raise DatasetError(f"no f#####{FRAME_SUFFIX} frames in {directory}")
    for expected, found in enumerate(numbers, start=1):
        if found != expected:
            raise DatasetError(f"gap at index {expected} in {directory}")

    frames = []
    size = None
    for number in numbers:
        file_path = os.path.join(directory, FRAME_PATTERN.format(index=number))
        try:
            with Image.open(file_path) as img:
                rgb = np.asarray(img.convert('RGB'), dtype=np.uint8)
        except (OSError, ValueError) as e:
            raise DatasetError(f"unreadable frame {file_path}: {e}") from None
        if size is None:
            size = rgb.shape[:2]
        elif rgb.shape[:2] != size:
            raise DatasetError(f"frame {file_path} is {rgb.shape[1]}x{rgb.shape[0]}, expected {size[1]}x{size[0]}")
        frames.append(torch.from_numpy(rgb.astype(np.float32) / 255.0).permute(2, 0, 1))

    logger.info("Loaded %d frames (%dx%d) from %s", len(frames), size[1], size[0], directory)
    return VideoSession(session_index, torch.stack(frames), {'frames': directory})


def save_frames(frames: torch.Tensor, directory: str, first_index: int = 0) -> List[str]:
    """Write frames (T, 3, H, W) in [0, 1] as 8-bit PNGs; frame t -> f{t+1:05d}.png."""
    from PIL import Image

    os.makedirs(directory, exist_ok=True)
    written = []
    array = (frames.detach().cpu().double().clamp(0.0, 1.0) * 255.0).round().to(torch.uint8)
    for offset, frame in enumerate(array):
        target = frame_path(directory, first_index + offset)
        Image.fromarray(frame.permute(1, 2, 0).contiguous().numpy()).save(target)
        written.append(target)
    return written


# ---------------------------------------------------------------------------
# Synthetic clips
# ---------------------------------------------------------------------------

def synth_video(kind: str, num_frames: int, height: int, width: int, seed: int = 0,
                session_index: int = 0) -> VideoSession:
    """Deterministic desk-scale clip of the given kind."""
    if kind not in SYNTH_KINDS:
        raise DatasetError(f"unknown synthetic kind '{kind}' (expected one of {sorted(SYNTH_KINDS)})")
    if num_frames < 1 or height < 1 or width < 1:
        raise DatasetError(f"synthetic video needs positive dims, got T={num_frames}, H={height}, W={width}")

    generator = torch.Generator().manual_seed(seed)
    ys = torch.linspace(0.0, 1.0, height, dtype=torch.float64)[:, None].expand(height, width)
    xs = torch.linspace(0.0, 1.0, width, dtype=torch.float64)[None, :].expand(height, width)
    frames = []

    if kind == 'moving_gradient':
        phase0 = torch.rand(3, generator=generator, dtype=torch.float64)
        for t in range(num_frames):
            shift = t / max(num_frames, 1)
            channels = [
                0.5 + 0.4 * torch.sin(2 * math.pi * (xs + shift + phase0[0])),
                0.5 + 0.4 * torch.cos(2 * math.pi * (ys - shift + phase0[1])),
                0.5 + 0.4 * torch.sin(2 * math.pi * (xs + ys + phase0[2])),
            ]
            frames.append(torch.stack(channels))

    elif kind == 'bouncing_box':
        background = 0.05 + 0.1 * torch.rand(3, generator=generator, dtype=torch.float64)
        color = 0.6 + 0.4 * torch.rand(3, generator=generator, dtype=torch.float64)
        box_h, box_w = max(1, height // 3), max(1, width // 3)
        pos = torch.rand(2, generator=generator, dtype=torch.float64)
        pos = torch.stack([pos[0] * (height - box_h), pos[1] * (width - box_w)])
        velocity = torch.tensor([max(1.0, height / 8.0), max(1.0, width / 6.0)], dtype=torch.float64)
        for _ in range(num_frames):
            frame = background[:, None, None].expand(3, height, width).clone()
            top, left = int(pos[0].round()), int(pos[1].round())
            frame[:, top:top + box_h, left:left + box_w] = color[:, None, None]
            frames.append(frame)
            for axis, limit in ((0, height - box_h), (1, width - box_w)):
                pos[axis] += velocity[axis]
                if pos[axis] < 0 or pos[axis] > limit:
                    velocity[axis] = -velocity[axis]
                    pos[axis] = pos[axis].clamp(0, max(limit, 0))

    else:  # noise_texture
        coarse = torch.rand(1, 3, 4, 4, generator=generator, dtype=torch.float64)
        texture = F.interpolate(coarse, size=(height, width), mode='bilinear', align_corners=False)[0]
        for t in range(num_frames):
            frames.append(torch.roll(texture, shifts=(t, t), dims=(1, 2)))

    video = torch.stack(frames).clamp(0.0, 1.0).to(torch.float32)
    source = {'synthetic': {'kind': kind, 'frames': num_frames, 'height': height, 'width': width, 'seed': seed}}
    return VideoSession(session_index, video, source)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

@dataclass
class SessionManifest:
    """Ordered session sources plus optional model/training config references.

    Each source is either {"frames": "<dir>"} or
    {"synthetic": {"kind": ..., "frames": T, "height": H, "width": W, "seed": s}}.
    """

    sessions: List[Dict[str, Any]]
    model: Dict[str, Any] = field(default_factory=dict)
    train: Dict[str, Any] = field(default_factory=dict)
    base_dir: str = '.'

    def load_session(self, index: int) -> VideoSession:
        if not 0 <= index < len(self.sessions):
            raise ManifestError(f"manifest has no session {index}")
        return load_source(self.sessions[index], index, self.base_dir)


def _validate_source(source: Any, index: int) -> None:
    if not isinstance(source, dict) or len(source) != 1 or not ({'frames', 'synthetic'} & set(source)):
        raise ManifestError(f"session {index}: expected {{'frames': dir}} or {{'synthetic': {{...}}}}")
    if 'synthetic' in source:
        spec = source['synthetic']
        missing = {'kind', 'frames', 'height', 'width'} - set(spec)
        if missing:
            raise ManifestError(f"session {index}: synthetic spec missing {sorted(missing)}")


def load_source(source: Dict[str, Any], index: int, base_dir: str = '.') -> VideoSession:
    _validate_source(source, index)
    if 'frames' in source:
        path = source['frames']
        if not os.path.isabs(resolve_path(path)):
            path = os.path.join(base_dir, path)
        video = load_frame_dir(path, index)
        video.source = {'frames': source['frames']}
        return video
    spec = source['synthetic']
    return synth_video(spec['kind'], int(spec['frames']), int(spec['height']), int(spec['width']),
                       int(spec.get('seed', 0)), index)


def load_manifest(path: str) -> SessionManifest:
    """Read a manifest file; model/train entries may be inline dicts or config file paths."""
    data = load_json_config(path)
    base_dir = os.path.dirname(resolve_path(path))
    sessions = data.get('sessions')
    if not isinstance(sessions, list) or not sessions:
        raise ManifestError(f"manifest {path} lists no sessions")
    for index, source in enumerate(sessions):
        _validate_source(source, index)

    def section(key):
        value = data.get(key, {})
        if isinstance(value, str):
            target = value if os.path.isabs(value) else os.path.join(base_dir, value)
            return load_json_config(target)
        if not isinstance(value, dict):
            raise ManifestError(f"manifest '{key}' must be an object or a file path")
        return value

    return SessionManifest(sessions=sessions, model=section('model'), train=section('train'), base_dir=base_dir)

