"""Procedural training data: chairs, walk-to-sit motions and standing
gesture motions with matching click-train audio.

All clips start at the origin facing +x. Chair-local axes: +x is the
direction a seated person faces, +z up.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..encoders import GoalSpec, SpeechInput, wrap_angle
from ..errors import BadBeats, UnreachableGoal
from ..geometry import Box, ObjectGeometry, default_body_proxy, penetration_ratio
from ..pose import FRAME_DIM, MotionClip, Skeleton, axis_rotation
from ..diffusion import select_supervision_frames

FPS = 20.0
N_FRAMES = 64
K_FRAMES = 15
TURN_FRAMES = 12
SAMPLE_RATE = 16000

# pelvis sits this far above the seat top: hip proxies (r 0.06, 0.08 below the
# pelvis) then clear the seat by 4.5 cm, leaving generated sits some slack
SEAT_CLEARANCE = 0.185
SEAT_SETBACK = 0.13  # pelvis in front of the backrest face
STAND_MARGIN = 0.22  # stand point in front of the seat edge
THICKNESS = 0.04  # seat slab; low seats become a solid block down to the floor

PROMPTS = {
    "ends_sitting": "a person walks to the chair and sits down",
    "starts_sitting": "a person stands up from the chair and walks away",
    "none": "a person walks past the chair",
    "gesture": "a person stands and talks while gesturing",
}
WORDS = ("so", "the", "idea", "is", "we", "really", "think", "about", "this", "and", "then",
         "move", "on", "right", "okay", "well", "you", "know", "it", "works")


@dataclass(frozen=True)
class Chair:
    seat_top: float
    depth: float
    width: float
    back_height: float
    position: np.ndarray  # world xy of the seat point
    yaw: float  # facing direction

    @property
    def seat_point_local(self) -> np.ndarray:
        return np.array([-self.depth / 2 + SEAT_SETBACK, 0.0, self.seat_top + SEAT_CLEARANCE])

    def local_to_world(self, p) -> np.ndarray:
        rot = axis_rotation("z", self.yaw)
        off = np.array([*self.position, 0.0]) - rot @ (self.seat_point_local * [1, 1, 0])
        return np.asarray(p) @ rot.T + off

    def geometry(self) -> ObjectGeometry:
        d, w, top = self.depth, self.width, self.seat_top
        t = min(THICKNESS, top)
        boxes = [Box([0, 0, top - t / 2], [d / 2, w / 2, t / 2]),
                 Box([-d / 2 - 0.02, 0, top + self.back_height / 2], [0.02, w / 2, self.back_height / 2])]
        leg_h = top - t
        if leg_h > 0.01:
            for sx in (-1, 1):
                for sy in (-1, 1):
                    boxes.append(Box([sx * (d / 2 - 0.02), sy * (w / 2 - 0.02), leg_h / 2], [0.02, 0.02, leg_h / 2]))
        rot = axis_rotation("z", self.yaw)
        trans = self.local_to_world(np.zeros(3))
        return ObjectGeometry(tuple(boxes)).moved(rot, trans)

    def goal(self) -> GoalSpec:
        return GoalSpec(self.position, self.seat_top + SEAT_CLEARANCE, self.yaw)

    def stand_point(self) -> np.ndarray:
        """World xy where the walk ends, in front of the seat edge."""
        dist = self.depth / 2 + STAND_MARGIN - self.seat_point_local[0]
        return np.asarray(self.position) + dist * np.array([math.cos(self.yaw), math.sin(self.yaw)])


@dataclass
class SyntheticScene:
    object: ObjectGeometry
    goal: GoalSpec
    tag: str
    chair: Chair
    path_end: np.ndarray | None = None  # walk-past target for tag "none"

    @property
    def prompt(self) -> str:
        return PROMPTS[self.tag]


def make_scene(seed: int, tag: str = "ends_sitting", seat_height: float | None = None) -> SyntheticScene:
    """Random chair roughly ahead of the origin. ``seat_height`` is the seated
    pelvis height, i.e. the goal height."""
    rng = np.random.default_rng(seed)
    h = float(rng.uniform(0.40, 0.65)) if seat_height is None else float(seat_height)
    seat_top = h - SEAT_CLEARANCE
    if seat_top < 0.01:
        raise UnreachableGoal(f"seat height {h} is too low for a chair")
    depth, width = rng.uniform(0.42, 0.50), rng.uniform(0.44, 0.52)
    back = rng.uniform(0.45, 0.60)
    alpha = rng.uniform(-math.pi / 6, math.pi / 6)
    if tag == "none":
        dist = rng.uniform(1.2, 1.8)
        side = rng.choice([-1.0, 1.0])
        lateral = side * rng.uniform(0.9, 1.2)
        pos = dist * np.array([math.cos(alpha), math.sin(alpha)]) + lateral * np.array([-math.sin(alpha), math.cos(alpha)])
        chair = Chair(seat_top, depth, width, back, pos, float(rng.uniform(-math.pi, math.pi)))
        length = rng.uniform(2.6, 3.4)
        end = length * np.array([math.cos(alpha), math.sin(alpha)])
        goal = GoalSpec(end, Skeleton().root_height, alpha)
        return SyntheticScene(chair.geometry(), goal, tag, chair, end)
    if tag == "starts_sitting":
        # seated at the origin, then stand, turn and walk away roughly ahead
        chair = Chair(seat_top, depth, width, back, np.zeros(2), alpha)
        heading = alpha + rng.uniform(-math.pi / 6, math.pi / 6)
        end = chair.stand_point() + rng.uniform(1.6, 2.2) * np.array([math.cos(heading), math.sin(heading)])
        goal = GoalSpec(end, Skeleton().root_height, heading)
        return SyntheticScene(chair.geometry(), goal, tag, chair, end)
    if tag != "ends_sitting":
        raise ValueError(f"unknown tag {tag!r}")
    dist = rng.uniform(1.9, 2.5)
    pos = dist * np.array([math.cos(alpha), math.sin(alpha)])
    yaw = wrap_angle(alpha + math.pi + rng.uniform(-math.pi / 6, math.pi / 6))
    chair = Chair(seat_top, depth, width, back, pos, yaw)
    return SyntheticScene(chair.geometry(), chair.goal(), tag, chair)


# --- kinematics helpers --------------------------------------------------------

def _min_jerk(u):
    u = np.clip(u, 0.0, 1.0)
    return u ** 3 * (10 - 15 * u + 6 * u ** 2)


def _ease(u):
    return 0.5 - 0.5 * np.cos(np.pi * np.clip(u, 0.0, 1.0))


def _pack(rots: np.ndarray, root: np.ndarray, skeleton: Skeleton) -> np.ndarray:
    """``(N, 22, 3, 3)`` parent-relative rotations + ``(N, 3)`` root positions -> ``(N, 135)``."""
    n = rots.shape[0]
    r6 = np.concatenate([rots[..., :, 0], rots[..., :, 1]], axis=-1).reshape(n, -1)
    deltas = np.diff(np.vstack([skeleton.root_start, root]), axis=0)
    out = np.concatenate([r6, deltas], axis=1)
    assert out.shape[1] == FRAME_DIM
    return out


def _rest(n: int) -> np.ndarray:
    return np.broadcast_to(np.eye(3), (n, 22, 3, 3)).copy()


def _pitch(a):
    # positive pitches a down-pointing limb forward (+x)
    return axis_rotation("y", -np.asarray(a))


def _walk(rots, root, frames, start, end, yaw, z0, stride=1.1, swing=math.radians(22)):
    """Minimum-jerk walk from ``start`` to ``end`` (xy) over ``frames``."""
    n = len(frames)
    u = np.linspace(0.0, 1.0, n)
    s = _min_jerk(u)
    dist = float(np.linalg.norm(np.asarray(end) - np.asarray(start)))
    xy = np.asarray(start) + s[:, None] * (np.asarray(end) - np.asarray(start))
    speed = np.gradient(s) * dist
    env = speed / max(speed.max(), 1e-9)
    phase = 2 * np.pi * s * dist / stride
    legs = swing * env * np.sin(phase)
    knee_l = math.radians(35) * env * np.clip(np.sin(phase + 0.6), 0, None)
    knee_r = math.radians(35) * env * np.clip(-np.sin(phase + 0.6), 0, None)
    arms = math.radians(8) * env * np.sin(phase)
    rots[frames, 0] = axis_rotation("z", yaw)
    rots[frames, 1] = _pitch(legs)
    rots[frames, 2] = _pitch(-legs)
    rots[frames, 4] = _pitch(-knee_l)
    rots[frames, 5] = _pitch(-knee_r)
    rots[frames, 16] = _pitch(-arms)
    rots[frames, 17] = _pitch(arms)
    root[frames, :2] = xy
    root[frames, 2] = z0 - 0.012 * env * (1 - np.cos(2 * phase)) / 2


def _sit_angles(h: float) -> tuple[float, float]:
    """Hip flexion and shin angle from vertical for a pelvis at height ``h``."""
    hip_z = h - 0.08
    ratio = (hip_z - 0.05) / 0.40
    beta = math.acos(min(1.0, ratio)) if ratio < 1 else 0.0
    return math.pi / 2, min(beta, math.radians(80))


def _sit_segment(chair: Chair, k: int, skeleton: Skeleton):
    """``k`` frames from standing at the stand point to seated."""
    z0 = skeleton.root_height
    rots, root = _rest(k), np.zeros((k, 3))
    u = np.arange(1, k + 1) / k
    e = _min_jerk(u)
    stand = chair.stand_point()
    seat = np.asarray(chair.position)
    h = chair.goal().height
    phi, beta = _sit_angles(h)
    root[:, :2] = stand + e[:, None] * (seat - stand)
    # the pelvis clears the seat edge before it drops
    root[:, 2] = z0 + (h - z0) * _min_jerk(np.clip(1.25 * u - 0.25, 0, 1))
    rots[:, 0] = axis_rotation("z", chair.yaw)
    hip, shin = phi * e, beta * e
    for j in (1, 2):
        rots[:, j] = _pitch(hip)
    for j in (4, 5):
        rots[:, j] = _pitch(-(hip - shin))
    for j in (7, 8):
        rots[:, j] = _pitch(-shin)
    rots[:, 3] = axis_rotation("y", math.radians(25) * np.sin(np.pi * u))
    for j in (16, 17):
        rots[:, j] = _pitch(math.radians(20) * e)
    for j in (18, 19):
        rots[:, j] = _pitch(math.radians(55) * e)
    return rots, root


def _turn(rots, root, frames, xy, yaw_from, yaw_to, z0):
    d = wrap_angle(yaw_to - yaw_from)
    u = _ease((np.arange(len(frames)) + 1) / len(frames))
    rots[frames, 0] = axis_rotation("z", yaw_from + d * u)
    root[frames, :2] = xy
    root[frames, 2] = z0


def _walk_to_sit(scene: SyntheticScene, n: int, k: int, skeleton: Skeleton, stride: float = 1.1):
    chair = scene.chair
    z0 = skeleton.root_height
    n_walk = n - k - TURN_FRAMES
    rots, root = _rest(n), np.zeros((n, 3))
    stand = chair.stand_point()
    walk_yaw = math.atan2(stand[1], stand[0])
    _walk(rots, root, np.arange(n_walk), np.zeros(2), stand, walk_yaw, z0, stride)
    _turn(rots, root, np.arange(n_walk, n - k), stand, walk_yaw, chair.yaw, z0)
    rots[n - k:], root[n - k:] = _sit_segment(chair, k, skeleton)
    return rots, root


def _stand_and_leave(scene: SyntheticScene, n: int, k: int, skeleton: Skeleton, stride: float = 1.1):
    chair = scene.chair
    z0 = skeleton.root_height
    rots, root = _rest(n), np.zeros((n, 3))
    sit_r, sit_p = _sit_segment(chair, k + 1, skeleton)
    # reversed sit; drop the standing end frame so the turn starts from it
    rots[:k], root[:k] = sit_r[::-1][:k], sit_p[::-1][:k]
    stand = chair.stand_point()
    end = scene.path_end
    walk_yaw = math.atan2(end[1] - stand[1], end[0] - stand[0])
    _turn(rots, root, np.arange(k, k + TURN_FRAMES), stand, chair.yaw, walk_yaw, z0)
    _walk(rots, root, np.arange(k + TURN_FRAMES, n), stand, end, walk_yaw, z0, stride)
    return rots, root


def _walk_past(scene: SyntheticScene, n: int, skeleton: Skeleton, stride: float = 1.1):
    rots, root = _rest(n), np.zeros((n, 3))
    end = scene.path_end
    _walk(rots, root, np.arange(n), np.zeros(2), end, math.atan2(end[1], end[0]), skeleton.root_height, stride)
    return rots, root


def gen_interaction_clip(scene: SyntheticScene, n: int = N_FRAMES, fps: float = FPS, seed: int = 0,
                         k: int = K_FRAMES, skeleton: Skeleton | None = None, verify: bool = True):
    """Walk-to-sit (or its reverse, or a walk-past) for ``scene``.

    Returns the clip and labels ``{"tag", "mask", "goal"}``. ``seed`` only adds a
    small deterministic jitter to the walking stride.
    """
    skeleton = skeleton or Skeleton()
    if n < k + 20:
        raise UnreachableGoal(f"{n} frames are too few to walk and sit")
    stride = 1.1 * (1.0 + 0.08 * np.random.default_rng(seed).uniform(-1.0, 1.0))
    if scene.tag == "none":
        rots, root = _walk_past(scene, n, skeleton, stride)
    elif scene.tag == "starts_sitting":
        rots, root = _stand_and_leave(scene, n, k, skeleton, stride)
    else:
        rots, root = _walk_to_sit(scene, n, k, skeleton, stride)
    final_xy = root[-1, :2]
    if np.linalg.norm(final_xy - scene.goal.position) > 0.02:
        raise UnreachableGoal("generated motion misses the goal")
    clip = MotionClip(_pack(rots, root, skeleton), fps, meta={"tag": scene.tag, "seed": int(seed)})
    if verify:
        pr = penetration_ratio(clip, skeleton, default_body_proxy(), scene.object)
        if pr != 0.0:
            raise UnreachableGoal(f"generated motion penetrates the object (ratio {pr:.3f})")
    labels = {"tag": scene.tag, "mask": select_supervision_frames(scene.tag, n, k), "goal": scene.goal}
    return clip, labels


# --- gesture clips -------------------------------------------------------------

def beat_frames(beat_times, n: int, fps: float) -> np.ndarray:
    t = np.asarray(beat_times, dtype=np.float64).reshape(-1)
    if t.size == 0:
        raise BadBeats("need at least one beat")
    if (t <= 0).any() or (t >= (n - 1) / fps).any():
        raise BadBeats("beat times must lie strictly inside the clip")
    f = np.round(t * fps).astype(np.int64)
    if (np.diff(f) < 3).any():
        raise BadBeats("beats must be increasing and at least 3 frames apart")
    return f


def random_beats(rng: np.random.Generator, n: int, fps: float, min_gap: int = 5, max_gap: int = 10) -> np.ndarray:
    """Beat times on the frame grid."""
    frames, f = [], int(rng.integers(3, max_gap))
    while f < n - 3:
        frames.append(f)
        f += int(rng.integers(min_gap, max_gap + 1))
    return np.array(frames, dtype=np.float64) / fps


def _keypose(rng) -> dict:
    lean = math.radians(rng.uniform(-10.0, 5.0))  # negative leans back
    return {
        "lean": lean,
        "twist": math.radians(rng.uniform(-10, 10)),
        "nod": math.radians(rng.uniform(-10, 10)),
        "sh_pitch": np.radians(rng.uniform(10, 75, 2)),
        "sh_abd": np.radians(rng.uniform(5, 45, 2)),
        "elbow": np.radians(rng.uniform(20, 100, 2)),
    }


def _pose_rots(p: dict) -> dict:
    r = {}
    for j in (3, 6, 9):
        r[j] = axis_rotation("z", p["twist"] / 3) @ axis_rotation("y", p["lean"] / 3)
    r[15] = axis_rotation("y", p["nod"])
    r[16] = axis_rotation("x", p["sh_abd"][0]) @ _pitch(p["sh_pitch"][0])
    r[17] = axis_rotation("x", -p["sh_abd"][1]) @ _pitch(p["sh_pitch"][1])
    r[18] = _pitch(p["elbow"][0])
    r[19] = _pitch(p["elbow"][1])
    return r


def click_audio(beat_times, duration: float, rng: np.random.Generator, sr: int = SAMPLE_RATE,
                band=(200.0, 5000.0)) -> np.ndarray:
    """Decaying band-limited noise bursts starting at ``beat_times``.

    Between bursts the signal is silent, so band-energy flux is zero there and
    only the burst onsets peak.
    """
    n = int(round(duration * sr))
    x = np.zeros(n)
    click_len = int(0.03 * sr)
    freqs = np.fft.rfftfreq(click_len, 1.0 / sr)
    keep = (freqs >= band[0]) & (freqs <= band[1])
    env = np.exp(-np.arange(click_len) / (0.005 * sr))
    for b in beat_times:
        burst = np.fft.irfft(np.fft.rfft(rng.standard_normal(click_len)) * keep, n=click_len)
        burst *= 0.5 / np.abs(burst).max() * env
        i = int(round(b * sr))
        m = min(click_len, n - i)
        x[i:i + m] += burst[:m]
    return x


def tiling_tokens(duration: float, rng: np.random.Generator) -> list:
    out, t = [], 0.0
    while t < duration - 1e-9:
        e = min(duration, t + float(rng.uniform(0.2, 0.5)))
        out.append((str(rng.choice(WORDS)), round(t, 6), round(e, 6)))
        t = e
    out[-1] = (out[-1][0], out[-1][1], duration)
    return out


def gen_gesture_clip(beat_times, n: int = N_FRAMES, fps: float = FPS, seed: int = 0,
                     skeleton: Skeleton | None = None):
    """Standing clip whose upper body pauses (zero velocity) exactly at the beat
    frames, plus click-train speech with a token transcript."""
    skeleton = skeleton or Skeleton()
    frames = beat_frames(beat_times, n, fps)
    rng = np.random.default_rng(seed)
    keys = np.concatenate([[0], frames, [n - 1]])
    keys = np.unique(keys)
    poses = [_keypose(rng) for _ in keys]
    rots = _rest(n)
    for a, b, pa, pb in zip(keys[:-1], keys[1:], poses[:-1], poses[1:]):
        for f in range(a, b + 1):
            w = _ease((f - a) / (b - a))
            p = {key: (1 - w) * np.asarray(pa[key]) + w * np.asarray(pb[key]) for key in pa}
            for j, r in _pose_rots(p).items():
                rots[f, j] = r
    root = np.tile(skeleton.root_start, (n, 1))
    clip = MotionClip(_pack(rots, root, skeleton), fps, meta={"tag": "gesture", "seed": int(seed)})
    duration = n / fps
    speech = SpeechInput(click_audio(np.asarray(beat_times, dtype=np.float64), duration, rng), SAMPLE_RATE, tiling_tokens(duration, rng))
    return clip, speech
