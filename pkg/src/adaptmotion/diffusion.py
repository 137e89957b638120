"""Noise schedule, training losses, multi-branch guidance with adaptive weight
fusion, and the sampling loop."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .denoiser import AdaptationBranch, MotionDenoiser, adapted_forward
from .encoders import ConditionBundle, audio_features, goal_features, text_features
from .errors import BadWindow, MissingCondition, MissingObject, ShapeMismatch, StepOutOfRange
from .geometry import BasisPointSet, BodyProxy, ObjectGeometry, bps_object_features, default_body_proxy, fit_bps, proxy_clearance
from .pose import FRAME_DIM, MotionClip, NormStats, Skeleton, decode_frame, motion_joint_positions, root_positions


class NoiseSchedule:
    def __init__(self, betas):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0 or ((betas < 0) | (betas > 1)).any():
            raise ValueError("betas must be a non-empty vector in [0, 1]")
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = np.cumprod(self.alphas)
        self.alpha_bars_prev = np.concatenate([[1.0], self.alpha_bars[:-1]])
        with np.errstate(divide="ignore", invalid="ignore"):
            denom = 1.0 - self.alpha_bars
            self.coef_x0 = betas * np.sqrt(self.alpha_bars_prev) / denom
            self.coef_xt = (1.0 - self.alpha_bars_prev) * np.sqrt(self.alphas) / denom
            self.posterior_var = betas * (1.0 - self.alpha_bars_prev) / denom

    @property
    def T(self) -> int:
        return self.betas.size

    def check_step(self, t) -> None:
        t = np.asarray(t)
        if ((t < 0) | (t >= self.T)).any():
            raise StepOutOfRange(f"timestep outside [0, {self.T})")


def make_schedule(T: int = 50, kind: str = "cosine", s: float = 0.008) -> NoiseSchedule:
    if kind == "cosine":
        f = lambda u: math.cos((u / T + s) / (1 + s) * math.pi / 2) ** 2  # noqa: E731
        ab = np.array([f(t + 1) / f(0) for t in range(T)])
        ab_prev = np.concatenate([[1.0], ab[:-1]])
        betas = np.clip(1.0 - ab / ab_prev, 1e-8, 0.999)
    elif kind == "linear":
        scale = 1000.0 / T
        betas = np.linspace(scale * 1e-4, min(scale * 0.02, 0.999), T)
    else:
        raise ValueError(f"unknown schedule {kind!r}")
    return NoiseSchedule(betas)


def _coef(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    c = torch.as_tensor(values[np.asarray(t)], dtype=like.dtype)
    return c.reshape(c.shape + (1,) * (like.ndim - c.ndim)) if c.ndim else c


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``; ``t`` is a step or one step per batch row."""
    schedule.check_step(t)
    t = t.cpu().numpy() if isinstance(t, torch.Tensor) else t
    ab = _coef(schedule.alpha_bars, t, x0)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


def posterior_mean(x_t, t: int, x0_pred, schedule: NoiseSchedule):
    return schedule.coef_x0[t] * x0_pred + schedule.coef_xt[t] * x_t


def p_sample_step(x_t, t: int, x0_pred, schedule: NoiseSchedule, noise=None):
    """One ancestral DDPM step ``x_t -> x_{t-1}``; step 0 returns the mean."""
    schedule.check_step(t)
    if x0_pred.shape != x_t.shape:
        raise ShapeMismatch(f"x0 {tuple(x0_pred.shape)} vs x_t {tuple(x_t.shape)}")
    mean = posterior_mean(x_t, t, x0_pred, schedule)
    if t == 0 or noise is None:
        return mean
    return mean + math.sqrt(schedule.posterior_var[t]) * noise


# --- training losses -----------------------------------------------------------

@dataclass
class LossWeights:
    w_rec: float = 1.0
    w_pelvis: float = 1.0
    w_contact: float = 1.0
    w_collision: float = 1.0
    k_frames: int = 15

    def __post_init__(self):
        if min(self.w_rec, self.w_pelvis, self.w_contact, self.w_collision) < 0:
            raise ValueError("loss weights must be non-negative")


TAGS = ("ends_sitting", "starts_sitting", "none")
CONTACT_JOINTS = (0, 1, 2)  # pelvis and both upper-leg roots


def select_supervision_frames(tag: str, n: int, k: int) -> np.ndarray:
    if not 0 < k <= n:
        raise BadWindow(f"need 0 < K <= N, got K={k}, N={n}")
    mask = np.zeros(n, dtype=bool)
    if tag == "ends_sitting":
        mask[n - k:] = True
    elif tag == "starts_sitting":
        mask[:k] = True
    elif tag != "none":
        raise ValueError(f"unknown motion tag {tag!r}")
    return mask


def loss_sw(x0_pred: torch.Tensor, x0_gt: torch.Tensor, stats: NormStats, skeleton: Skeleton,
            objects, mask, weights: LossWeights, proxy: BodyProxy | None = None,
            contact_joints=CONTACT_JOINTS) -> tuple[torch.Tensor, dict]:
    """Selective-window loss: reconstruction + final pelvis + contact + collision.

    ``x0_*`` are normalized ``(B, N, 135)``; ``objects`` has one entry per row
    (``None`` allowed when that row's mask is empty); ``mask`` is ``(B, N)``.
    """
    if x0_pred.shape != x0_gt.shape:
        raise ShapeMismatch(f"{tuple(x0_pred.shape)} vs {tuple(x0_gt.shape)}")
    proxy = proxy or default_body_proxy()
    mean, std = stats.torch(x0_pred.dtype)
    zero = x0_pred.new_zeros(())
    terms = {"rec": ((x0_pred - x0_gt) ** 2).mean()}

    pred = x0_pred * std + mean
    gt = x0_gt * std + mean
    start = skeleton.root_start
    pos_p = root_positions(pred[..., -3:], start)[:, -1]
    pos_g = root_positions(gt[..., -3:], start)[:, -1]
    rot_err = ((pred[:, -1, :6] - gt[:, -1, :6]) ** 2).sum(-1)
    terms["pelvis"] = (((pos_p - pos_g) ** 2).sum(-1) + rot_err).mean()

    mask = torch.as_tensor(np.asarray(mask), dtype=torch.bool)
    need_geo = (weights.w_contact > 0 or weights.w_collision > 0) and bool(mask.any())
    contact, collision = zero, zero
    if need_geo:
        joints = motion_joint_positions(pred, skeleton)  # (B, N, 22, 3)
        radii = torch.as_tensor(proxy.radius, dtype=pred.dtype)
        is_contact = torch.as_tensor(np.isin(proxy.joint_index, contact_joints))
        total_frames = int(mask.sum())
        for b in range(pred.shape[0]):
            if not bool(mask[b].any()):
                continue
            if objects[b] is None:
                raise MissingObject(f"row {b} has supervised frames but no object")
            centers = proxy.centers(joints[b, mask[b]])
            clear = objects[b].sdf(centers) - radii  # (M, P)
            contact = contact + clear[:, is_contact].clamp_min(0.0).amin(-1).sum()
            collision = collision + (torch.relu(-clear) ** 2).mean(-1).sum()
        contact = contact / total_frames
        collision = collision / total_frames
    terms["contact"] = contact
    terms["collision"] = collision
    total = (weights.w_rec * terms["rec"] + weights.w_pelvis * terms["pelvis"]
             + weights.w_contact * contact + weights.w_collision * collision)
    return total, terms


# --- guidance and adaptive fusion ------------------------------------------------

def guided_prediction(x_uncond: torch.Tensor, residuals, lambdas) -> torch.Tensor:
    """``x_uncond + sum_i lambda_i r_i``, summed in the given order.

    ``lambdas`` entries may be scalars or per-row ``(B,)`` tensors.
    """
    out = x_uncond
    for r, lam in zip(residuals, lambdas, strict=True):
        if r.shape != x_uncond.shape:
            raise ShapeMismatch(f"residual {tuple(r.shape)} vs {tuple(x_uncond.shape)}")
        lam = torch.as_tensor(lam, dtype=r.dtype)
        out = out + lam.reshape(lam.shape + (1,) * (r.ndim - lam.ndim)) * r
    return out


def _clip_norm(x: torch.Tensor) -> torch.Tensor:
    """Frobenius norm over the last two dims."""
    return x.flatten(-2).norm(dim=-1)


def normalize_cospeech_residual(r_cospeech, r_int, eps: float = 1e-12):
    """Rescale the co-speech residual to the interaction residual's norm.

    Rows whose interaction residual is exactly zero pass through unchanged.
    """
    n_int = _clip_norm(r_int)
    n_cos = _clip_norm(r_cospeech)
    scale = torch.where(n_int > 0, n_int / n_cos.clamp_min(eps), torch.ones_like(n_int))
    return r_cospeech * scale.unsqueeze(-1).unsqueeze(-1)


@dataclass
class FusionConfig:
    lambda_init: float = 1.0
    eta: float = 0.05
    bounds: tuple = (0.0, 4.0)
    # curvature: step scaled by 1 / (2 |r|^2); raw: plain gradient step
    step: str = "curvature"

    def to_json(self) -> dict:
        d = asdict(self)
        d["bounds"] = list(self.bounds)
        return d


@dataclass
class FusionState:
    lambdas: dict  # branch name -> (B,) tensor
    eta: float = 0.05
    bounds: tuple = (0.0, 4.0)
    step: str = "curvature"

    @classmethod
    def init(cls, names, batch: int, cfg: FusionConfig, dtype=torch.float32) -> "FusionState":
        lo, hi = cfg.bounds
        lam0 = min(max(cfg.lambda_init, lo), hi)
        return cls({n: torch.full((batch,), lam0, dtype=dtype) for n in names}, cfg.eta, tuple(cfg.bounds), cfg.step)


def fusion_losses(x_fused, anchors: dict) -> dict:
    """Squared distance of the fused prediction to each single-branch anchor, per row."""
    return {k: ((x_fused - a) ** 2).flatten(-2).sum(-1) for k, a in anchors.items()}


def fusion_gradients(x_fused, anchors: dict, residuals: dict) -> dict:
    """``dL_k / d lambda_k = 2 <x_fused - anchor_k, r_k>`` (``r_k`` as used in the fused sum)."""
    return {k: 2.0 * ((x_fused - anchors[k]) * residuals[k]).flatten(-2).sum(-1) for k in anchors}


def adaptive_fusion_update(x_fused, anchors: dict, residuals: dict, state: FusionState) -> FusionState:
    grads = fusion_gradients(x_fused, anchors, residuals)
    lo, hi = state.bounds
    new = dict(state.lambdas)
    for k, g in grads.items():
        if state.step == "curvature":
            curv = 2.0 * (residuals[k] ** 2).flatten(-2).sum(-1)
            delta = torch.where(curv > 0, g / curv.clamp_min(1e-30), torch.zeros_like(g))
        else:
            delta = g
        new[k] = (state.lambdas[k] - state.eta * delta.to(state.lambdas[k].dtype)).clamp(lo, hi)
    return FusionState(new, state.eta, state.bounds, state.step)


# --- model container and condition preparation -----------------------------------

@dataclass
class MotionModel:
    mdm: MotionDenoiser
    stats: NormStats
    branches: dict = field(default_factory=dict)
    skeleton: Skeleton = field(default_factory=Skeleton)
    bps: BasisPointSet | None = None
    fps: float = 20.0

    @property
    def dtype(self):
        return self.mdm.in_proj.weight.dtype


def interaction_static(objects, bps: BasisPointSet, dtype=torch.float32) -> dict:
    """Per-row fitted basis points and object features (computed once per object)."""
    pts, feats = [], []
    for obj in objects:
        fitted = fit_bps(bps, obj)
        pts.append(fitted.points)
        feats.append(bps_object_features(fitted, obj))
    return {"bps_points": torch.as_tensor(np.stack(pts), dtype=dtype),
            "obj_feats": torch.as_tensor(np.stack(feats), dtype=dtype)}


def interaction_inputs(x_t: torch.Tensor, static: dict, stats: NormStats, skeleton: Skeleton) -> dict:
    """Interaction branch inputs from the current noisy normalized motion."""
    mean, std = stats.torch(x_t.dtype)
    with torch.no_grad():
        joints = motion_joint_positions(x_t * std + mean, skeleton)
    return {"joints": joints, **static}


def speech_inputs(speeches, fps: float, n_frames: int, dtype=torch.float32) -> dict:
    audio = np.stack([audio_features(s, fps, n_frames) for s in speeches])
    text = np.stack([text_features(s, fps, n_frames) for s in speeches])
    return {"audio": torch.as_tensor(audio, dtype=dtype), "text": torch.as_tensor(text, dtype=dtype)}


@dataclass
class BatchConditions:
    prompt: torch.Tensor
    goal: torch.Tensor
    goal_mask: torch.Tensor
    interaction: dict | None = None  # static part; joints are added per step
    cospeech: dict | None = None


def prepare_conditions(bundles, model: MotionModel, n_frames: int) -> BatchConditions:
    dtype = model.dtype
    prompt = torch.as_tensor(np.stack([b.embedding for b in bundles]), dtype=dtype)
    goal = np.zeros((len(bundles), 5))
    mask = np.zeros(len(bundles))
    for i, b in enumerate(bundles):
        if b.goal is not None:
            goal[i], mask[i] = goal_features(b.goal), 1.0
    conds = BatchConditions(prompt, torch.as_tensor(goal, dtype=dtype), torch.as_tensor(mask, dtype=dtype))
    names = set(bundles[0].active_branches)
    if any(set(b.active_branches) != names for b in bundles):
        raise ValueError("all bundles in a batch must activate the same branches")
    if "interaction" in names:
        if model.bps is None:
            raise MissingCondition("model has no basis point set")
        conds.interaction = interaction_static([b.object for b in bundles], model.bps, dtype)
    if "cospeech" in names:
        conds.cospeech = speech_inputs([b.speech for b in bundles], model.fps, n_frames, dtype)
    return conds


def _branch_cond(name: str, x_t, conds: BatchConditions, model: MotionModel) -> dict:
    if name == "interaction":
        if conds.interaction is None:
            raise MissingCondition("no object in bundle")
        return interaction_inputs(x_t, conds.interaction, model.stats, model.skeleton)
    if conds.cospeech is None:
        raise MissingCondition("no speech in bundle")
    return conds.cospeech


def predict(x_t, t: int, conds: BatchConditions, model: MotionModel, branch: str | None = None):
    """One forward pass with at most one branch active."""
    if branch is None:
        return model.mdm(x_t, t, conds.prompt, conds.goal, conds.goal_mask)
    if branch not in model.branches:
        raise MissingCondition(f"model has no {branch!r} branch")
    cond = _branch_cond(branch, x_t, conds, model)
    return adapted_forward(x_t, t, conds.prompt, model.mdm, model.branches[branch], cond,
                           conds.goal, conds.goal_mask)


def fusion_anchors(x_t, t: int, conds: BatchConditions, model: MotionModel) -> dict:
    """Unconditioned, interaction-only and cospeech-only predictions plus residuals."""
    x_u = predict(x_t, t, conds, model)
    x_int = predict(x_t, t, conds, model, "interaction")
    x_cos = predict(x_t, t, conds, model, "cospeech")
    return {"uncond": x_u, "interaction": x_int, "cospeech": x_cos,
            "r_interaction": x_int - x_u, "r_cospeech": x_cos - x_u}


@torch.no_grad()
def guided_x0(x_t, t: int, conds: BatchConditions, model: MotionModel, names, state: FusionState | None):
    """Fused ``x0`` for the active branch set; returns ``(x0, new_state)``."""
    names = tuple(names)
    if not names:
        return predict(x_t, t, conds, model), state
    if len(names) == 1:
        (k,) = names
        lam = state.lambdas[k]
        if bool((lam == 1).all()):
            return predict(x_t, t, conds, model, k), state
        x_u = predict(x_t, t, conds, model)
        x_c = predict(x_t, t, conds, model, k)
        return guided_prediction(x_u, [x_c - x_u], [lam]), state
    a = fusion_anchors(x_t, t, conds, model)
    r_int = a["r_interaction"]
    r_cos = normalize_cospeech_residual(a["r_cospeech"], r_int)
    lam = state.lambdas
    x0 = guided_prediction(a["uncond"], [r_int, r_cos], [lam["interaction"], lam["cospeech"]])
    new_state = adaptive_fusion_update(
        x0, {"interaction": a["interaction"], "cospeech": a["cospeech"]},
        {"interaction": r_int, "cospeech": r_cos}, state)
    return x0, new_state


def _noise(gens, shape, dtype) -> torch.Tensor:
    return torch.stack([torch.randn(shape, generator=g, dtype=torch.float64) for g in gens]).to(dtype)


@torch.no_grad()
def sample(model: MotionModel, bundles, schedule: NoiseSchedule, seeds, n_frames: int,
           fusion: FusionConfig | None = None) -> list[MotionClip]:
    """Sample one clip per bundle. Each row draws noise from its own seeded
    generator, so a row's result does not depend on its batch neighbours' seeds."""
    bundles = list(bundles)
    seeds = [int(s) for s in seeds]
    if len(seeds) != len(bundles):
        raise ValueError("need one seed per bundle")
    fusion = fusion or FusionConfig()
    groups: dict = {}
    for i, b in enumerate(bundles):
        groups.setdefault(b.active_branches, []).append(i)
    out: list = [None] * len(bundles)
    for names, idx in groups.items():
        clips = _sample_group(model, [bundles[i] for i in idx], schedule, [seeds[i] for i in idx],
                              n_frames, fusion, names)
        for i, c in zip(idx, clips):
            out[i] = c
    return out


def _sample_group(model, bundles, schedule, seeds, n_frames, fusion, names):
    dtype = model.dtype
    conds = prepare_conditions(bundles, model, n_frames)
    gens = [torch.Generator().manual_seed(s) for s in seeds]
    shape = (n_frames, FRAME_DIM)
    x = _noise(gens, shape, dtype)
    state = FusionState.init(names, len(bundles), fusion, dtype)
    lam_trace = []
    for t in reversed(range(schedule.T)):
        x0, state = guided_x0(x, t, conds, model, names, state)
        if len(names) == 2:
            lam_trace.append({k: v.tolist() for k, v in state.lambdas.items()})
        noise = _noise(gens, shape, dtype) if t > 0 else None
        x = p_sample_step(x, t, x0, schedule, noise)
    clips = []
    data = x.double().numpy() * model.stats.std + model.stats.mean
    for i, (b, s) in enumerate(zip(bundles, seeds)):
        meta = {"seed": s, "prompt": b.prompt, "branches": list(names), "T": schedule.T,
                "fusion": fusion.to_json(), "stats_id": model.stats.stats_id}
        if lam_trace:
            meta["lambda_final"] = {k: v[i] for k, v in lam_trace[-1].items()}
        clips.append(MotionClip(data[i], model.fps, meta=meta))
    return clips


def sample_full(bundle: ConditionBundle, model: MotionModel, schedule: NoiseSchedule, seed: int,
                n_frames: int, fusion: FusionConfig | None = None) -> MotionClip:
    return sample(model, [bundle], schedule, [seed], n_frames, fusion)[0]
