"""
Path utilities for ReelNet.
Handles path expansion, frame file naming and stage-checkpoint naming.
"""

import os
import re
from typing import Dict

from reelnet.config import FRAME_PATTERN, STAGE_TEMPLATE


def expand_path(path_str: str) -> str:
    """Expand ~ to home directory.

    Args:
        path_str: The path string to expand

    Returns:
        The expanded path
    """
    return os.path.expanduser(path_str)


def normalize_path(path_str: str) -> str:
    """Expand and normalize a path for consistent comparison.

    Args:
        path_str: The path string to normalize

    Returns:
        The normalized path
    """
    return os.path.normpath(expand_path(path_str))


def resolve_path(path_str: str) -> str:
    """Normalize a path and accept both '/' and '\\' separators."""
    return normalize_path(path_str.replace('\\', os.sep))


def frame_path(directory: str, frame_index: int) -> str:
    """Path of 0-based frame ``frame_index``: frame 0 -> f00001.png."""
    return os.path.join(directory, FRAME_PATTERN.format(index=frame_index + 1))


def stage_checkpoint_path(checkpoint_path: str, session: int) -> str:
    """Stage checkpoint written after ``session`` (0-based) next to the main one.

    run.ckpt, session 0 -> run.stage-01.ckpt
    """
    directory, name = os.path.split(checkpoint_path)
    stem, suffix = os.path.splitext(name)
    return os.path.join(directory, STAGE_TEMPLATE.format(stem=stem, session=session + 1, suffix=suffix))


def find_stage_checkpoints(checkpoint_path: str) -> Dict[int, str]:
    """Existing stage checkpoints for a main checkpoint, keyed by 0-based session."""
    directory, name = os.path.split(checkpoint_path)
    stem, suffix = os.path.splitext(name)
    pattern = re.compile(re.escape(stem) + r'\.stage-(\d{2,})' + re.escape(suffix) + '$')
    found = {}
    for entry in os.listdir(directory or '.'):
        match = pattern.match(entry)
        if match:
            found[int(match.group(1)) - 1] = os.path.join(directory, entry)
    return dict(sorted(found.items()))
