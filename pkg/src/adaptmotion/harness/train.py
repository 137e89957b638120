"""Three-stage training: base model, then each adaptation branch on a frozen
base model. Every step draws its randomness from ``(seed, step)`` so a resumed
run continues exactly where a straight run would be."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..denoiser import (AdamWState, DenoiserConfig, adamw_step, adapted_forward, build_module, load_checkpoint,
                        save_checkpoint, set_frozen)
from ..diffusion import (LossWeights, MotionModel, interaction_inputs, interaction_static, loss_sw, make_schedule,
                         q_sample, select_supervision_frames, speech_inputs)
from ..encoders import goal_features, prompt_embed
from ..errors import DataMismatch, MissingPrereq
from ..geometry import bps_generate
from ..pose import NormStats, Skeleton, normalize
from .corpus import CorpusManifest, load_entry

STAGES = ("mdm", "interaction", "cospeech")


@dataclass
class TrainConfig:
    stage: str = "mdm"
    steps: int = 1000
    batch: int = 16
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    weights: dict = field(default_factory=lambda: asdict(LossWeights()))
    schedule: str = "cosine"
    T: int = 50
    seed: int = 0
    cond_dropout: float = 0.1
    goal_prob: float = 0.5
    # cospeech stage: roll each clip and its speech features by one random
    # circular shift, so the branch learns alignment rather than clip identity
    shift_aug: bool = True
    bps_seed: int = 0
    model: dict = field(default_factory=dict)  # DenoiserConfig overrides
    log_every: int = 10

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.steps < 0 or self.batch <= 0 or self.lr <= 0:
            raise ValueError("steps, batch and lr must be positive")
        self.betas = tuple(self.betas)
        LossWeights(**self.weights)

    @classmethod
    def from_json(cls, d: dict, **overrides) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        known.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**known)

    def to_json(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(**{**self.model, "T": self.T})


@dataclass
class TrainData:
    x: torch.Tensor  # (M, N, 135) normalized
    prompt: torch.Tensor  # (M, d_cond)
    goal: torch.Tensor  # (M, 5)
    has_goal: torch.Tensor  # (M,)
    mask: np.ndarray  # (M, N) supervision frames
    objects: list
    inter: dict | None = None
    speech: dict | None = None

    def __len__(self):
        return self.x.shape[0]


def build_dataset(manifest: CorpusManifest, stats: NormStats, stage: str, k_frames: int = 15,
                  bps=None, dtype=torch.float32, split: str = "train") -> TrainData:
    kind = None if stage == "mdm" else stage
    entries = manifest.select(split, kind)
    if not entries:
        raise DataMismatch(f"no {split} clips usable for stage {stage!r}")
    loaded = [load_entry(manifest, e) for e in entries]
    n = loaded[0].clip.n_frames
    if any(le.clip.n_frames != n for le in loaded):
        raise DataMismatch("clips in a training set must share a frame count")
    x = np.stack([normalize(le.clip, stats).data for le in loaded])
    goal = np.stack([goal_features(le.goal) if le.goal else np.zeros(5) for le in loaded])
    has_goal = np.array([le.goal is not None for le in loaded], dtype=np.float64)
    mask = np.stack([select_supervision_frames(le.entry.tag, n, k_frames) if le.object is not None
                     else np.zeros(n, dtype=bool) for le in loaded])
    data = TrainData(torch.as_tensor(x, dtype=dtype),
                     torch.as_tensor(np.stack([prompt_embed(e.prompt) for e in entries]), dtype=dtype),
                     torch.as_tensor(goal, dtype=dtype), torch.as_tensor(has_goal, dtype=dtype), mask,
                     [le.object for le in loaded])
    if stage == "interaction":
        data.inter = interaction_static(data.objects, bps, dtype)
    if stage == "cospeech":
        data.speech = speech_inputs([le.speech for le in loaded], loaded[0].clip.fps, n, dtype)
    return data


def _batch_cond(d: dict | None, idx) -> dict | None:
    return None if d is None else {k: v[idx] for k, v in d.items()}


def train_step(cfg: TrainConfig, step: int, data: TrainData, modules: dict, schedule, stats: NormStats,
               skeleton: Skeleton) -> tuple[torch.Tensor, dict]:
    """Loss of one seeded minibatch (graph attached)."""
    rng = np.random.default_rng([cfg.seed, step])
    idx = rng.integers(0, len(data), cfg.batch)
    t = rng.integers(0, schedule.T, cfg.batch)
    eps = torch.as_tensor(rng.standard_normal((cfg.batch,) + tuple(data.x.shape[1:])), dtype=data.x.dtype)
    drop = rng.random(cfg.batch) < cfg.cond_dropout
    use_goal = rng.random(cfg.batch) < cfg.goal_prob
    x0 = data.x[idx]
    x_t = q_sample(x0, t, eps, schedule)
    tt = torch.as_tensor(t)
    prompt = data.prompt[idx]
    goal_mask = data.has_goal[idx] * torch.as_tensor(use_goal, dtype=x0.dtype)
    mdm = modules["mdm"]
    if cfg.stage == "mdm":
        keep = torch.as_tensor(~drop, dtype=x0.dtype)
        pred = mdm(x_t, tt, prompt * keep[:, None], data.goal[idx], goal_mask * keep)
        loss = ((pred - x0) ** 2).mean()
        return loss, {"rec": loss.item()}
    branch = modules[cfg.stage]
    if cfg.stage == "interaction":
        cond = interaction_inputs(x_t, _batch_cond(data.inter, idx), stats, skeleton)
    else:
        cond = _batch_cond(data.speech, idx)
        if cfg.shift_aug:
            n = x0.shape[1]
            shift = rng.integers(0, n, cfg.batch)
            order = torch.as_tensor((np.arange(n)[None, :] - shift[:, None]) % n)
            rows = torch.arange(cfg.batch)[:, None]
            x0 = x0[rows, order]
            x_t = q_sample(x0, t, eps, schedule)
            cond = {k: v[rows, order] for k, v in cond.items()}
    pred = adapted_forward(x_t, tt, prompt, mdm, branch, cond, data.goal[idx], goal_mask)
    weights = LossWeights(**cfg.weights)
    if cfg.stage == "cospeech":
        weights = LossWeights(weights.w_rec, 0.0, 0.0, 0.0, weights.k_frames)
    loss, terms = loss_sw(pred, x0, stats, skeleton, [data.objects[i] for i in idx], data.mask[idx], weights)
    return loss, {k: float(v.detach()) for k, v in terms.items()}


def _init_modules(cfg: TrainConfig, init: dict | None, dcfg: DenoiserConfig) -> dict:
    if cfg.stage == "mdm":
        torch.manual_seed(cfg.seed)
        return {"mdm": build_module("mdm", dcfg)}
    if init is None or "mdm" not in init["modules"]:
        raise MissingPrereq(f"stage {cfg.stage!r} needs a checkpoint with a trained base model")
    modules = dict(init["modules"])
    torch.manual_seed(cfg.seed)
    modules[cfg.stage] = build_module(cfg.stage, init["config"])
    return modules


def train_stage(cfg: TrainConfig, manifest: CorpusManifest, out_path, init_checkpoint=None,
                resume: bool = False, log_path=None) -> Path:
    """Train one stage and write a checkpoint holding every module so far.

    ``init_checkpoint`` is the previous stage's checkpoint (required for the
    branch stages). With ``resume`` it must instead be a checkpoint of this
    same stage, and training continues from its step counter.
    """
    stats = manifest.stats()
    skeleton = Skeleton()
    init = load_checkpoint(init_checkpoint) if init_checkpoint else None
    start = 0
    opt = AdamWState()
    if init is not None:
        if init["stats"]["stats_id"] != manifest.stats_id:
            raise DataMismatch("checkpoint was trained on different normalization stats")
    if resume:
        if init is None or init["meta"].get("stage") != cfg.stage:
            raise MissingPrereq("resume needs a checkpoint of the same stage")
        modules = dict(init["modules"])
        dcfg = init["config"]
        start = int(init["meta"]["step"])
        opt = AdamWState.from_state_dict(init["optimizer"][cfg.stage])
    else:
        dcfg = init["config"] if init is not None else cfg.denoiser_config()
        modules = _init_modules(cfg, init, dcfg)
    if dcfg.T != cfg.T:
        raise DataMismatch(f"checkpoint uses T={dcfg.T}, config asks for T={cfg.T}")
    bps = bps_generate(cfg.bps_seed, dcfg.n_bps)
    data = build_dataset(manifest, stats, cfg.stage, LossWeights(**cfg.weights).k_frames, bps)
    schedule = make_schedule(cfg.T, cfg.schedule)

    for name, mod in modules.items():
        set_frozen(mod, name != cfg.stage)
        mod.train()
    params = [p for p in modules[cfg.stage].parameters()]
    log_lines = []
    for step in range(start, cfg.steps):
        loss, terms = train_step(cfg, step, data, modules, schedule, stats, skeleton)
        grads = torch.autograd.grad(loss, params)
        adamw_step(params, grads, opt, cfg.lr, cfg.betas, cfg.weight_decay)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            log_lines.append({"step": step, "loss": loss.item(), **terms})
    meta = {"stage": cfg.stage, "step": max(start, cfg.steps), "train_config": cfg.to_json(),
            "bps_seed": cfg.bps_seed, "fps": float(_fps(manifest)),
            "stages": sorted(set((init or {}).get("meta", {}).get("stages", [])) | {cfg.stage})}
    optim = dict((init or {}).get("optimizer", {}) if resume else {})
    optim[cfg.stage] = opt.state_dict()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_path, dcfg, modules, stats.to_json(), meta, optim)
    if log_path is not None:
        _write_log(log_path, log_lines, append=resume)
    return out_path


def _fps(manifest: CorpusManifest) -> float:
    return float(manifest.config.get("fps", 20.0))


def _write_log(path, rows: list, append: bool = False) -> None:
    keys = ["step", "loss"] + sorted({k for r in rows for k in r} - {"step", "loss"})
    path = Path(path)
    lines = [] if append and path.exists() else ["\t".join(keys)]
    lines += ["\t".join(repr(r.get(k, "")) if k != "step" else str(r[k]) for k in keys) for r in rows]
    with path.open("a" if append else "w") as f:
        f.write("\n".join(lines) + "\n")


def read_log(path) -> list[dict]:
    rows = Path(path).read_text().strip().splitlines()
    keys = rows[0].split("\t")
    return [{k: float(v) for k, v in zip(keys, r.split("\t")) if v != ""} for r in rows[1:]]


def load_model(checkpoint) -> MotionModel:
    payload = load_checkpoint(checkpoint) if not isinstance(checkpoint, dict) else checkpoint
    mods = payload["modules"]
    for m in mods.values():
        m.eval()
    cfg = payload["config"]
    meta = payload["meta"]
    return MotionModel(mods["mdm"], NormStats.from_json(payload["stats"]),
                       {k: v for k, v in mods.items() if k != "mdm"}, Skeleton(),
                       bps_generate(int(meta.get("bps_seed", 0)), cfg.n_bps), float(meta.get("fps", 20.0)))


def smoothed_ratio(losses, frac: float = 0.1) -> float:
    """Mean of the last ``frac`` of a loss curve over the mean of the first ``frac``."""
    arr = np.asarray(losses, dtype=np.float64)
    k = max(1, int(len(arr) * frac))
    return float(arr[-k:].mean() / arr[:k].mean())


def config_from_file(path, **overrides) -> TrainConfig:
    d = json.loads(Path(path).read_text()) if path else {}
    d = d.get("train", d)
    stage = overrides.get("stage")
    if stage and isinstance(d.get(stage), dict):
        d = {**d, **d[stage]}
    return TrainConfig.from_json(d, **overrides)
