"""Naive Concat baseline: upper-body joint rotations from one clip spliced
onto the lower body and root trajectory of another."""
from __future__ import annotations

import numpy as np

from ..errors import LengthMismatch
from ..metrics import UPPER_BODY
from ..pose import ROT_DIM, MotionClip


def joint_slots(joints) -> np.ndarray:
    """Frame-vector indices of the 6D slots of ``joints``."""
    return np.array([j * ROT_DIM + c for j in sorted(joints) for c in range(ROT_DIM)], dtype=np.int64)


def concat_baseline(upper_clip: MotionClip, lower_clip: MotionClip, partition=UPPER_BODY) -> MotionClip:
    """Rotations of ``partition`` joints from ``upper_clip``; every other joint
    and the root translation from ``lower_clip``."""
    if upper_clip.n_frames != lower_clip.n_frames or upper_clip.fps != lower_clip.fps:
        raise LengthMismatch(f"{upper_clip.n_frames}@{upper_clip.fps} vs {lower_clip.n_frames}@{lower_clip.fps}")
    if upper_clip.normalized or lower_clip.normalized:
        raise ValueError("concat works on denormalized clips")
    data = lower_clip.data.copy()
    slots = joint_slots(partition)
    data[:, slots] = upper_clip.data[:, slots]
    meta = {"concat": {"upper": upper_clip.meta, "lower": lower_clip.meta, "partition": sorted(partition)}}
    return MotionClip(data, lower_clip.fps, meta=meta)
