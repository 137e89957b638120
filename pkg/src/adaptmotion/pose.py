"""Pose representation: 6D rotations, the 135-d frame layout, normalization
and forward kinematics on a 22-joint SMPL-style skeleton.

World frame is Z-up, meters. A character with identity root rotation faces +x
with its left side towards +y.

Frame layout (135 values, joint-major, translation last)::

    [j0.a(3) j0.b(3) | j1.a(3) j1.b(3) | ... | j21.a(3) j21.b(3) | dx dy dz]

``a`` and ``b`` are the first two columns of the parent-relative rotation
matrix. ``dx dy dz`` is the world-frame root displacement since the previous
frame; for frame 0 it is the displacement from the skeleton's root start
(see :attr:`Skeleton.root_start`).
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DegenerateRotation, NormalizedInput, NotARotation, StatsMismatch

N_JOINTS = 22
ROT_DIM = 6
FRAME_DIM = N_JOINTS * ROT_DIM + 3  # 135
TRANS_SLICE = slice(N_JOINTS * ROT_DIM, FRAME_DIM)
ROT_EPS = 1e-8

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
)
SMPL_PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19)

# x forward, y left, z up. Arms hang down in the rest pose.
_REST_OFFSETS = (
    (0.0, 0.0, 0.0),  # pelvis
    (0.0, 0.09, -0.08),  # left_hip
    (0.0, -0.09, -0.08),  # right_hip
    (0.0, 0.0, 0.11),  # spine1
    (0.0, 0.0, -0.40),  # left_knee
    (0.0, 0.0, -0.40),  # right_knee
    (0.0, 0.0, 0.13),  # spine2
    (0.0, 0.0, -0.40),  # left_ankle
    (0.0, 0.0, -0.40),  # right_ankle
    (0.0, 0.0, 0.05),  # spine3
    (0.12, 0.0, -0.05),  # left_foot
    (0.12, 0.0, -0.05),  # right_foot
    (0.0, 0.0, 0.22),  # neck
    (0.0, 0.08, 0.15),  # left_collar
    (0.0, -0.08, 0.15),  # right_collar
    (0.0, 0.0, 0.10),  # head
    (0.0, 0.10, 0.0),  # left_shoulder
    (0.0, -0.10, 0.0),  # right_shoulder
    (0.0, 0.0, -0.27),  # left_elbow
    (0.0, 0.0, -0.27),  # right_elbow
    (0.0, 0.0, -0.25),  # left_wrist
    (0.0, 0.0, -0.25),  # right_wrist
)


@dataclass(frozen=True)
class Skeleton:
    parents: tuple[int, ...] = SMPL_PARENTS
    rest_offsets: np.ndarray = field(default_factory=lambda: np.array(_REST_OFFSETS, dtype=np.float64))

    def __post_init__(self):
        offsets = np.asarray(self.rest_offsets, dtype=np.float64)
        if offsets.shape != (len(self.parents), 3):
            raise ValueError(f"rest_offsets must be ({len(self.parents)}, 3), got {offsets.shape}")
        if self.parents[0] != -1:
            raise ValueError("joint 0 must be the root")
        for j, p in enumerate(self.parents[1:], start=1):
            if not 0 <= p < j:
                raise ValueError(f"parent[{j}]={p} violates parent[j] < j")
        object.__setattr__(self, "rest_offsets", offsets)

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def root_height(self) -> float:
        """Pelvis height when standing in the rest pose with the lowest joint on z=0."""
        rest = np.zeros((self.n_joints, 3))
        for j in range(1, self.n_joints):
            rest[j] = rest[self.parents[j]] + self.rest_offsets[j]
        return float(-rest[:, 2].min())

    @property
    def root_start(self) -> np.ndarray:
        """Where root integration starts: the origin at standing pelvis height."""
        return np.array([0.0, 0.0, self.root_height])


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.array(x, dtype=np.float64))


def axis_rotation(axis: str, angle) -> np.ndarray:
    """Rotation matrices about a principal axis; ``angle`` may be an array."""
    angle = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    o, z = np.ones_like(c), np.zeros_like(c)
    rows = {
        "x": ((o, z, z), (z, c, -s), (z, s, c)),
        "y": ((c, z, s), (z, o, z), (-s, z, c)),
        "z": ((c, -s, z), (s, c, z), (z, z, o)),
    }[axis]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def rot6d_to_matrix(r6, check: bool = True, eps: float = ROT_EPS) -> torch.Tensor:
    """Gram-Schmidt decode of ``(..., 6)`` into ``(..., 3, 3)`` rotation matrices.

    With ``check=False`` near-degenerate inputs are clamped instead of raising,
    which is what the sampler wants when decoding noisy intermediate motion.
    """
    r6 = _as_tensor(r6)
    a, b = r6[..., :3], r6[..., 3:6]
    a_norm = a.norm(dim=-1, keepdim=True)
    if check and bool((a_norm <= eps).any()):
        raise DegenerateRotation("first 6D column has (near) zero norm")
    c1 = a / a_norm.clamp_min(eps)
    b_perp = b - (c1 * b).sum(-1, keepdim=True) * c1
    b_norm = b_perp.norm(dim=-1, keepdim=True)
    if check and bool((b_norm <= eps * b.norm(dim=-1, keepdim=True).clamp_min(1.0)).any()):
        raise DegenerateRotation("6D columns are parallel or second column is zero")
    c2 = b_perp / b_norm.clamp_min(eps)
    c3 = torch.cross(c1, c2, dim=-1)
    return torch.stack((c1, c2, c3), dim=-1)


def matrix_to_rot6d(mat, check: bool = True, tol: float = 1e-6) -> torch.Tensor:
    mat = _as_tensor(mat)
    if check:
        eye = torch.eye(3, dtype=mat.dtype)
        ortho = (mat.transpose(-1, -2) @ mat - eye).abs().amax() if mat.numel() else 0.0
        det = torch.linalg.det(mat) if mat.numel() else torch.ones(())
        if float(ortho) > tol or bool(((det - 1.0).abs() > tol).any()):
            raise NotARotation("input is not a rotation matrix within tolerance")
    return torch.cat((mat[..., :, 0], mat[..., :, 1]), dim=-1)


def encode_frame(rots, delta) -> torch.Tensor:
    """``(..., 22, 3, 3)`` rotations + ``(..., 3)`` delta -> ``(..., 135)``."""
    rots = _as_tensor(rots)
    delta = _as_tensor(delta).to(rots.dtype)
    r6 = matrix_to_rot6d(rots, check=False)
    return torch.cat((r6.flatten(-2), delta), dim=-1)


def decode_frame(vec, check: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Inverse of :func:`encode_frame`."""
    vec = _as_tensor(vec)
    if vec.shape[-1] != FRAME_DIM:
        raise ValueError(f"expected last dim {FRAME_DIM}, got {vec.shape[-1]}")
    r6 = vec[..., : N_JOINTS * ROT_DIM].unflatten(-1, (N_JOINTS, ROT_DIM))
    return rot6d_to_matrix(r6, check=check), vec[..., TRANS_SLICE]


@dataclass
class PoseFrame:
    joint_rots: np.ndarray  # (22, 6)
    delta_trans: np.ndarray  # (3,)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.joint_rots, dtype=np.float64).reshape(-1),
                               np.asarray(self.delta_trans, dtype=np.float64)])

    @classmethod
    def from_vector(cls, vec) -> "PoseFrame":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (FRAME_DIM,):
            raise ValueError(f"expected ({FRAME_DIM},), got {vec.shape}")
        return cls(vec[: N_JOINTS * ROT_DIM].reshape(N_JOINTS, ROT_DIM).copy(), vec[TRANS_SLICE].copy())


@dataclass
class MotionClip:
    data: np.ndarray  # (N, 135)
    fps: float
    normalized: bool = False
    stats_id: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[1] != FRAME_DIM:
            raise ValueError(f"clip data must be (N, {FRAME_DIM}), got {self.data.shape}")
        if not self.fps > 0:
            raise ValueError("fps must be positive")
        if self.normalized and not self.stats_id:
            raise ValueError("a normalized clip must reference its stats_id")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def duration(self) -> float:
        return self.n_frames / self.fps

    def frame(self, k: int) -> PoseFrame:
        return PoseFrame.from_vector(self.data[k])

    def rotations(self) -> np.ndarray:
        if self.normalized:
            raise NormalizedInput("decode rotations from a denormalized clip")
        return decode_frame(self.data)[0].numpy()

    def replace(self, **kw) -> "MotionClip":
        fields = dict(data=self.data, fps=self.fps, normalized=self.normalized,
                      stats_id=self.stats_id, meta=dict(self.meta))
        fields.update(kw)
        return MotionClip(**fields)


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    min_std: float = 1e-6

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.maximum(np.asarray(self.std, dtype=np.float64), self.min_std)
        if mean.shape != std.shape or mean.ndim != 1:
            raise StatsMismatch("mean and std must be matching vectors")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @classmethod
    def from_data(cls, frames: np.ndarray, min_std: float = 1e-6) -> "NormStats":
        frames = np.asarray(frames, dtype=np.float64).reshape(-1, FRAME_DIM)
        return cls(frames.mean(0), frames.std(0), min_std=min_std)

    @property
    def stats_id(self) -> str:
        h = hashlib.sha256(self.mean.tobytes() + self.std.tobytes())
        return h.hexdigest()[:16]

    def to_json(self) -> dict:
        return {"stats_id": self.stats_id, "min_std": self.min_std,
                "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "NormStats":
        stats = cls(np.array(d["mean"]), np.array(d["std"]), min_std=d.get("min_std", 1e-6))
        if "stats_id" in d and d["stats_id"] != stats.stats_id:
            raise StatsMismatch("stored stats_id does not match the stored arrays")
        return stats

    def torch(self, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        return torch.as_tensor(self.mean, dtype=dtype), torch.as_tensor(self.std, dtype=dtype)


def normalize(clip: MotionClip, stats: NormStats) -> MotionClip:
    if clip.normalized:
        raise NormalizedInput("clip is already normalized")
    if stats.mean.shape[0] != clip.data.shape[1]:
        raise StatsMismatch(f"stats dim {stats.mean.shape[0]} != clip dim {clip.data.shape[1]}")
    return clip.replace(data=(clip.data - stats.mean) / stats.std, normalized=True, stats_id=stats.stats_id)


def denormalize(clip: MotionClip, stats: NormStats) -> MotionClip:
    if not clip.normalized:
        raise NormalizedInput("clip is not normalized")
    if clip.stats_id != stats.stats_id:
        raise StatsMismatch(f"clip was normalized with {clip.stats_id}, got stats {stats.stats_id}")
    return clip.replace(data=clip.data * stats.std + stats.mean, normalized=False)


def integrate_root(clip: MotionClip, start=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Absolute root positions, ``pos[k] = start + sum(delta[:k+1])``."""
    if clip.normalized:
        raise NormalizedInput("integrate_root needs a denormalized clip")
    return np.asarray(start, dtype=np.float64) + np.cumsum(clip.data[:, TRANS_SLICE], axis=0)


def root_positions(deltas: torch.Tensor, start) -> torch.Tensor:
    """Torch version of :func:`integrate_root` over ``(..., N, 3)`` deltas."""
    return torch.as_tensor(start, dtype=deltas.dtype) + deltas.cumsum(dim=-2)


def forward_kinematics(rots, root_pos, skeleton: Skeleton, return_rots: bool = False):
    """World joint positions from parent-relative rotations.

    ``rots`` is ``(..., 22, 3, 3)`` (or ``(..., 22, 6)``), ``root_pos`` is
    ``(..., 3)``. Returns ``(..., 22, 3)`` and, optionally, the world rotations.
    """
    rots = _as_tensor(rots)
    if rots.shape[-1] == ROT_DIM:
        rots = rot6d_to_matrix(rots)
    root_pos = _as_tensor(root_pos).to(rots.dtype)
    offsets = torch.as_tensor(skeleton.rest_offsets, dtype=rots.dtype)
    world_r = [rots[..., 0, :, :]]
    world_p = [root_pos]
    for j in range(1, skeleton.n_joints):
        p = skeleton.parents[j]
        world_p.append(world_p[p] + world_r[p] @ offsets[j])
        world_r.append(world_r[p] @ rots[..., j, :, :])
    pos = torch.stack(world_p, dim=-2)
    if return_rots:
        return pos, torch.stack(world_r, dim=-3)
    return pos


def frame_forward_kinematics(frame: PoseFrame, skeleton: Skeleton, root_pos) -> np.ndarray:
    rots = rot6d_to_matrix(frame.joint_rots)
    return forward_kinematics(rots, root_pos, skeleton).numpy()


def clip_joint_positions(clip: MotionClip, skeleton: Skeleton, return_rots: bool = False):
    """``(N, 22, 3)`` world joint trajectories of a denormalized clip."""
    rots = torch.as_tensor(clip.rotations())
    root = torch.as_tensor(integrate_root(clip, skeleton.root_start))
    out = forward_kinematics(rots, root, skeleton, return_rots=return_rots)
    if return_rots:
        return out[0].numpy(), out[1].numpy()
    return out.numpy()


def motion_joint_positions(x: torch.Tensor, skeleton: Skeleton, return_rots: bool = False):
    """Differentiable decode + root integration + FK for ``(..., N, 135)`` tensors.

    Uses the non-raising Gram-Schmidt so noisy or predicted motion never throws.
    """
    rots, deltas = decode_frame(x, check=False)
    root = root_positions(deltas, skeleton.root_start)
    return forward_kinematics(rots, root, skeleton, return_rots=return_rots)


# --- MotionClip container ---------------------------------------------------
#
#   bytes 0..7    magic  b"MOTCLIP1"
#   bytes 8..11   uint32 little-endian header length H
#   bytes 12..    H bytes of UTF-8 JSON header:
#                 {"fps", "frame_count", "dims", "normalized", "stats_id", "meta"}
#   then          frame_count * dims float64 little-endian values, row-major

MAGIC = b"MOTCLIP1"


def save_clip(path, clip: MotionClip) -> None:
    header = {
        "fps": clip.fps,
        "frame_count": clip.n_frames,
        "dims": FRAME_DIM,
        "normalized": clip.normalized,
        "stats_id": clip.stats_id,
        "meta": clip.meta,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(clip.data, dtype="<f8").tobytes()
    Path(path).write_bytes(MAGIC + struct.pack("<I", len(hbytes)) + hbytes + payload)


def load_clip(path) -> MotionClip:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a motion clip file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    n, dims = header["frame_count"], header["dims"]
    data = np.frombuffer(raw[12 + hlen :], dtype="<f8")
    if data.size != n * dims:
        raise ValueError(f"{path}: expected {n * dims} values, found {data.size}")
    return MotionClip(data.reshape(n, dims).astype(np.float64), header["fps"],
                      header["normalized"], header["stats_id"], header.get("meta", {}))
