"""Objects as unions of analytic primitives, basis point set features, sphere
body proxies and object penetration measurement.

Penetration convention: a proxy sphere ``(center, r)`` has signed clearance
``sdf(center) - r``. It penetrates when that is negative and its depth is the
absolute value. Collision losses and both penetration metrics use the same
quantity.

Object spec files are JSON::

    {"format": "object-spec", "version": 1,
     "primitives": [
        {"type": "box", "center": [x, y, z], "half_extents": [hx, hy, hz],
         "yaw": radians},                       # or "rotation": 3x3 rows
        {"type": "sphere", "center": [x, y, z], "radius": r}]}
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .pose import N_JOINTS, MotionClip, Skeleton, axis_rotation, clip_joint_positions


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")

    def sdf(self, p: torch.Tensor) -> torch.Tensor:
        c = torch.as_tensor(self.center, dtype=p.dtype)
        return (p - c).norm(dim=-1) - self.radius

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.center - self.radius, self.center + self.radius

    def grown(self, factor: float) -> "Sphere":
        return Sphere(self.center, self.radius * factor)

    def moved(self, rot: np.ndarray, trans: np.ndarray) -> "Sphere":
        return Sphere(rot @ self.center + trans, self.radius)

    def to_json(self) -> dict:
        return {"type": "sphere", "center": self.center.tolist(), "radius": self.radius}


@dataclass(frozen=True)
class Box:
    center: np.ndarray
    half_extents: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))  # local -> world

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        he = np.asarray(self.half_extents, dtype=np.float64).reshape(3)
        if not (he > 0).all():
            raise ValueError("box half extents must be positive")
        object.__setattr__(self, "half_extents", he)
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))

    def sdf(self, p: torch.Tensor) -> torch.Tensor:
        c = torch.as_tensor(self.center, dtype=p.dtype)
        rot = torch.as_tensor(self.rotation, dtype=p.dtype)
        local = (p - c) @ rot  # row-vector form of R^T (p - c)
        q = local.abs() - torch.as_tensor(self.half_extents, dtype=p.dtype)
        outside = q.clamp_min(0.0).norm(dim=-1)
        inside = q.amax(dim=-1).clamp_max(0.0)
        return outside + inside

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
        return self.center + (signs * self.half_extents) @ self.rotation.T

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = self.corners()
        return c.min(0), c.max(0)

    def grown(self, factor: float) -> "Box":
        return Box(self.center, self.half_extents * factor, self.rotation)

    def moved(self, rot: np.ndarray, trans: np.ndarray) -> "Box":
        return Box(rot @ self.center + trans, self.half_extents, rot @ self.rotation)

    def to_json(self) -> dict:
        return {"type": "box", "center": self.center.tolist(), "half_extents": self.half_extents.tolist(),
                "rotation": self.rotation.tolist()}


@dataclass(frozen=True)
class ObjectGeometry:
    primitives: tuple

    def __post_init__(self):
        prims = tuple(self.primitives)
        if not prims:
            raise ValueError("an object needs at least one primitive")
        object.__setattr__(self, "primitives", prims)

    def sdf(self, p) -> torch.Tensor:
        p = torch.as_tensor(p) if not isinstance(p, torch.Tensor) else p
        if not p.is_floating_point():
            p = p.double()
        d = self.primitives[0].sdf(p)
        for prim in self.primitives[1:]:
            d = torch.minimum(d, prim.sdf(p))
        return d

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = zip(*(prim.bounds() for prim in self.primitives))
        return np.min(lo, axis=0), np.max(hi, axis=0)

    def bounding_sphere(self) -> tuple[np.ndarray, float]:
        """Sphere around the axis-aligned bounding box; center and radius."""
        lo, hi = self.bounds()
        center = (lo + hi) / 2
        return center, float(np.linalg.norm(hi - lo) / 2)

    def grown(self, factor: float) -> "ObjectGeometry":
        """Every primitive inflated in place (centers fixed)."""
        return ObjectGeometry(tuple(p.grown(factor) for p in self.primitives))

    def moved(self, rot, trans) -> "ObjectGeometry":
        rot = np.asarray(rot, dtype=np.float64)
        trans = np.asarray(trans, dtype=np.float64)
        return ObjectGeometry(tuple(p.moved(rot, trans) for p in self.primitives))

    def to_json(self) -> dict:
        return {"format": "object-spec", "version": 1, "primitives": [p.to_json() for p in self.primitives]}

    @classmethod
    def from_json(cls, d: dict) -> "ObjectGeometry":
        if d.get("format") != "object-spec":
            raise ValueError("not an object-spec document")
        prims = []
        for p in d["primitives"]:
            if p["type"] == "sphere":
                prims.append(Sphere(p["center"], float(p["radius"])))
            elif p["type"] == "box":
                if "rotation" in p:
                    rot = np.asarray(p["rotation"], dtype=np.float64)
                else:
                    rot = axis_rotation("z", float(p.get("yaw", 0.0)))
                prims.append(Box(p["center"], p["half_extents"], rot))
            else:
                raise ValueError(f"unknown primitive type {p['type']!r}")
        return cls(tuple(prims))


def sdf(obj: ObjectGeometry, p):
    """Signed distance of point(s) ``p`` to ``obj``; returns a float for a single point."""
    is_np = not isinstance(p, torch.Tensor)
    d = obj.sdf(torch.as_tensor(np.asarray(p, dtype=np.float64)) if is_np else p)
    if is_np:
        d = d.numpy()
        return float(d) if d.ndim == 0 else d
    return d


def save_object(path, obj: ObjectGeometry) -> None:
    Path(path).write_text(json.dumps(obj.to_json(), indent=1, sort_keys=True))


def load_object(path) -> ObjectGeometry:
    return ObjectGeometry.from_json(json.loads(Path(path).read_text()))


# --- basis point sets --------------------------------------------------------

@dataclass(frozen=True)
class BasisPointSet:
    points: np.ndarray  # (n_bps, 3)
    seed: int
    radius: float


def bps_generate(seed: int, n_bps: int = 512, radius: float = 1.0) -> BasisPointSet:
    """Uniform sample of the ball of ``radius`` around the origin."""
    if n_bps <= 0 or radius <= 0:
        raise ValueError("n_bps and radius must be positive")
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((n_bps, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * rng.random(n_bps) ** (1.0 / 3.0)
    return BasisPointSet(d * r[:, None], seed, radius)


def fit_bps(bps: BasisPointSet, obj: ObjectGeometry, margin: float = 1.2) -> BasisPointSet:
    """Move a canonical basis set onto ``obj``'s bounding sphere (scaled by ``margin``).

    The set keeps world axes, so object orientation shows up in the features
    while translation does not.
    """
    center, rad = obj.bounding_sphere()
    scale = margin * rad / bps.radius
    return BasisPointSet(center + bps.points * scale, bps.seed, margin * rad)


def bps_object_features(bps: BasisPointSet, obj: ObjectGeometry) -> np.ndarray:
    """Unsigned distance from every basis point to the object surface."""
    return np.abs(obj.sdf(torch.as_tensor(bps.points)).numpy())


def bps_interaction_features(points, joints) -> torch.Tensor:
    """Distance from each basis point to its nearest joint.

    ``points`` is ``(..., n_bps, 3)``, ``joints`` is ``(..., 22, 3)``; leading
    dims broadcast. Returns ``(..., n_bps)``.
    """
    points = points.points if isinstance(points, BasisPointSet) else points
    points = torch.as_tensor(points)
    joints = torch.as_tensor(joints).to(points.dtype)
    lead = torch.broadcast_shapes(points.shape[:-2], joints.shape[:-2])
    p = points.expand(*lead, *points.shape[-2:])
    j = joints.expand(*lead, *joints.shape[-2:])
    return torch.cdist(p.reshape(-1, *p.shape[-2:]), j.reshape(-1, *j.shape[-2:])).amin(-1).reshape(*lead, p.shape[-2])


# --- body proxies and penetration ---------------------------------------------

TORSO_JOINTS = (0, 3, 6, 9)


@dataclass(frozen=True)
class BodyProxy:
    joint_index: np.ndarray  # (P,)
    local_offset: np.ndarray  # (P, 3), in the joint's world frame
    radius: np.ndarray  # (P,)

    def __post_init__(self):
        ji = np.asarray(self.joint_index, dtype=np.int64)
        off = np.asarray(self.local_offset, dtype=np.float64).reshape(len(ji), 3)
        rad = np.asarray(self.radius, dtype=np.float64).reshape(len(ji))
        if not (rad > 0).all():
            raise ValueError("proxy radii must be positive")
        if ((ji < 0) | (ji >= N_JOINTS)).any():
            raise ValueError("proxy joint index out of range")
        object.__setattr__(self, "joint_index", ji)
        object.__setattr__(self, "local_offset", off)
        object.__setattr__(self, "radius", rad)

    def centers(self, joints: torch.Tensor, world_rots: torch.Tensor | None = None) -> torch.Tensor:
        """Proxy centers ``(..., P, 3)`` from joints ``(..., 22, 3)``."""
        c = joints[..., self.joint_index, :]
        if world_rots is not None and np.any(self.local_offset):
            off = torch.as_tensor(self.local_offset, dtype=joints.dtype)
            c = c + (world_rots[..., self.joint_index, :, :] @ off.unsqueeze(-1)).squeeze(-1)
        return c


def default_body_proxy(radius: float = 0.06, torso_radius: float = 0.10) -> BodyProxy:
    rad = np.full(N_JOINTS, radius)
    rad[list(TORSO_JOINTS)] = torso_radius
    return BodyProxy(np.arange(N_JOINTS), np.zeros((N_JOINTS, 3)), rad)


def proxy_clearance(obj: ObjectGeometry, centers: torch.Tensor, proxy: BodyProxy) -> torch.Tensor:
    """``sdf(center) - radius`` per proxy; negative means penetration."""
    return obj.sdf(centers) - torch.as_tensor(proxy.radius, dtype=centers.dtype)


def _clip_clearance(clip, skeleton, proxy, obj) -> np.ndarray:
    joints, rots = clip_joint_positions(clip, skeleton, return_rots=True)
    centers = proxy.centers(torch.as_tensor(joints), torch.as_tensor(rots))
    return proxy_clearance(obj, centers, proxy).numpy()  # (N, P)


def penetration_value(clip: MotionClip, skeleton: Skeleton, proxy: BodyProxy, obj: ObjectGeometry) -> float:
    """Mean depth over all penetrating proxy samples of all frames (0 if none)."""
    d = _clip_clearance(clip, skeleton, proxy, obj)
    pen = d[d < 0]
    return float(-pen.mean()) if pen.size else 0.0


def penetration_ratio(clip: MotionClip, skeleton: Skeleton, proxy: BodyProxy, obj: ObjectGeometry) -> float:
    """Fraction of frames where any proxy penetrates the object."""
    d = _clip_clearance(clip, skeleton, proxy, obj)
    return float((d < 0).any(axis=1).mean())
