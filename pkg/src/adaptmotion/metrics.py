"""Evaluation metrics: gesture features, Frechet gesture distance, beat
consistency, diversity and goal-reaching error.

The gesture feature extractor is a fixed statistical one (window means and
standard deviations), so FGD values are only meaningful relative to each
other within this package.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import GoalSpec, SpeechInput, band_energies, wrap_angle
from .errors import ClipTooShort, DimensionMismatch, EmptyAudio, EmptyClip, NotPSD, TooFewSamples
from .pose import N_JOINTS, MotionClip, Skeleton, clip_joint_positions, integrate_root, rot6d_to_matrix

# spine chain, neck, head, collars, shoulders, elbows, wrists
UPPER_BODY = (3, 6, 9, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21)

BC_SIGMA = 0.1
ONSET_FACTOR = 1.5
SPEED_FACTOR = 0.3
COV_REG = 1e-6


def _check_clip(clip: MotionClip) -> None:
    if clip.n_frames == 0:
        raise EmptyClip("clip has no frames")


def joint_speeds(clip: MotionClip, skeleton: Skeleton, joints=UPPER_BODY) -> np.ndarray:
    """``(N, J)`` joint speeds in m/s, measured in the pelvis frame so that
    walking does not count as gesturing. Central differences, one-sided at the
    ends."""
    _check_clip(clip)
    pos, rots = clip_joint_positions(clip, skeleton, return_rots=True)
    local = np.einsum("nji,nkj->nki", rots[:, 0], pos[:, list(joints)] - pos[:, :1])
    if clip.n_frames < 2:
        return np.zeros(local.shape[:2])
    vel = np.gradient(local, 1.0 / clip.fps, axis=0)
    return np.linalg.norm(vel, axis=-1)


def gesture_features(clip: MotionClip, skeleton: Skeleton | None = None, window: int = 32, stride: int = 16,
                     joints=UPPER_BODY) -> np.ndarray:
    """``(n_windows, 2 * (6J + J))`` window statistics.

    Each row is ``[mean(rot6d), mean(speed), std(rot6d), std(speed)]`` over the
    frames of one window, rotations taken from the upper-body joints.
    """
    if window <= 0 or stride <= 0:
        raise ValueError("window and stride must be positive")
    if clip.n_frames < window:
        raise ClipTooShort(f"need at least {window} frames, got {clip.n_frames}")
    if clip.normalized:
        raise ValueError("gesture features need a denormalized clip")
    skeleton = skeleton or Skeleton()
    rots = clip.data[:, : N_JOINTS * 6].reshape(clip.n_frames, N_JOINTS, 6)[:, list(joints)].reshape(clip.n_frames, -1)
    chan = np.concatenate([rots, joint_speeds(clip, skeleton, joints)], axis=1)
    rows = []
    for s in range(0, clip.n_frames - window + 1, stride):
        w = chan[s:s + window]
        rows.append(np.concatenate([w.mean(0), w.std(0)]))
    return np.stack(rows)


def clip_feature(clip: MotionClip, skeleton: Skeleton | None = None, window: int = 32, stride: int = 16) -> np.ndarray:
    """One vector per clip: the mean of its window features."""
    return gesture_features(clip, skeleton, window, stride).mean(0)


@dataclass(frozen=True)
class GaussianFit:
    mean: np.ndarray
    cov: np.ndarray


def fit_gaussian(features, reg: float = COV_REG) -> GaussianFit:
    """Mean and unbiased covariance (plus ``reg`` on the diagonal) of row vectors."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise TooFewSamples("need at least two feature vectors")
    cov = np.cov(f, rowvar=False, ddof=1).reshape(f.shape[1], f.shape[1])
    return GaussianFit(f.mean(0), cov + reg * np.eye(f.shape[1]))


def _psd_eig(mat: np.ndarray, tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    sym = (mat + mat.T) / 2
    w, v = np.linalg.eigh(sym)
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.size and w.min() < -tol * scale:
        raise NotPSD(f"matrix has eigenvalue {w.min():.3e}")
    return np.clip(w, 0.0, None), v


def frechet_gesture_distance(a: GaussianFit, b: GaussianFit) -> float:
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)``."""
    if a.mean.shape != b.mean.shape or a.cov.shape != b.cov.shape:
        raise DimensionMismatch(f"{a.mean.shape} vs {b.mean.shape}")
    for c in (a.cov, b.cov):
        if not np.allclose(c, c.T, atol=1e-9):
            raise NotPSD("covariance is not symmetric")
    w, v = _psd_eig(a.cov)
    sqrt_a = (v * np.sqrt(w)) @ v.T
    _psd_eig(b.cov)
    inner, _ = _psd_eig(sqrt_a @ b.cov @ sqrt_a)
    diff = a.mean - b.mean
    d = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.sqrt(inner).sum()
    return float(max(d, 0.0))


# --- beats -----------------------------------------------------------------

def _local_minima(s: np.ndarray) -> np.ndarray:
    # strictly lower than the left neighbour, not higher than the right one;
    # a flat valley counts once, at its first frame
    if s.size < 3:
        return np.zeros(0, dtype=np.int64)
    k = np.arange(1, s.size - 1)
    return k[(s[k] < s[k - 1]) & (s[k] <= s[k + 1])]


def _local_maxima(s: np.ndarray) -> np.ndarray:
    if s.size < 3:
        return np.zeros(0, dtype=np.int64)
    k = np.arange(1, s.size - 1)
    return k[(s[k] > s[k - 1]) & (s[k] >= s[k + 1])]


def kinematic_beats(clip: MotionClip, skeleton: Skeleton | None = None, factor: float = SPEED_FACTOR) -> np.ndarray:
    """Times (s) of local minima of mean upper-body speed below ``factor`` x median speed."""
    speed = joint_speeds(clip, skeleton or Skeleton()).mean(1)
    k = _local_minima(speed)
    k = k[speed[k] < factor * np.median(speed)]
    return k / clip.fps


def onset_strength(speech: SpeechInput, fps: float, n_frames: int | None = None) -> np.ndarray:
    """Band-energy flux per motion frame: summed positive log-energy increase."""
    log_e, _ = band_energies(speech, fps, n_frames)
    flux = np.zeros(log_e.shape[0])
    flux[1:] = np.clip(np.diff(log_e, axis=0), 0.0, None).sum(1)
    return flux


def audio_beats(speech: SpeechInput, fps: float, n_frames: int | None = None, factor: float = ONSET_FACTOR) -> np.ndarray:
    """Times (s) of local maxima of onset strength above ``factor`` x median flux."""
    if speech.samples.size == 0:
        raise EmptyAudio("speech has no samples")
    flux = onset_strength(speech, fps, n_frames)
    k = _local_maxima(flux)
    k = k[flux[k] > factor * np.median(flux)]
    return k / fps


def beat_consistency_times(kin_times, audio_times, sigma: float = BC_SIGMA) -> float:
    """Mean over kinematic beats of ``exp(-d^2 / 2 sigma^2)``, ``d`` the distance
    to the nearest audio beat. No kinematic beats gives 0."""
    kin = np.asarray(kin_times, dtype=np.float64).reshape(-1)
    aud = np.asarray(audio_times, dtype=np.float64).reshape(-1)
    if kin.size == 0 or aud.size == 0:
        return 0.0
    d2 = ((kin[:, None] - aud[None, :]) ** 2).min(1)
    return float(np.exp(-d2 / (2.0 * sigma ** 2)).mean())


def beat_consistency(clip: MotionClip, speech: SpeechInput, sigma: float = BC_SIGMA,
                     skeleton: Skeleton | None = None) -> float:
    if speech.samples.size == 0:
        raise EmptyAudio("speech has no samples")
    kin = kinematic_beats(clip, skeleton)
    aud = audio_beats(speech, clip.fps, clip.n_frames)
    return beat_consistency_times(kin, aud, sigma)


# --- diversity and goal reaching ------------------------------------------------

def diversity(features, n_pairs: int = 200, seed: int = 0) -> float:
    """Mean Euclidean distance over ``n_pairs`` seeded distinct pairs.

    Rows are sorted first so the result does not depend on input order; when
    ``n_pairs`` covers every pair, all pairs are used.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise TooFewSamples("need at least two feature vectors")
    f = f[np.lexsort(f.T[::-1])]
    i, j = np.triu_indices(f.shape[0], k=1)
    if n_pairs < i.size:
        pick = np.random.default_rng(seed).choice(i.size, size=n_pairs, replace=False)
        i, j = i[pick], j[pick]
    return float(np.linalg.norm(f[i] - f[j], axis=1).mean())


def root_heading(clip: MotionClip, frame: int = -1) -> float:
    """Yaw of the root's forward (+x) axis projected on the ground plane."""
    r = rot6d_to_matrix(clip.data[frame, :6], check=False).numpy()
    return float(np.arctan2(r[1, 0], r[0, 0]))


def goal_reach_error(clip: MotionClip, skeleton: Skeleton, goal: GoalSpec) -> tuple[float, float, float]:
    """Final-frame ``(planar position error, height error, heading error)``."""
    _check_clip(clip)
    root = integrate_root(clip, skeleton.root_start)[-1]
    pos = float(np.linalg.norm(root[:2] - np.asarray(goal.position)))
    height = float(abs(root[2] - goal.height))
    orient = float(abs(wrap_angle(root_heading(clip) - goal.heading)))
    return pos, height, orient
