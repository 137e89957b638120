"""Corpus evaluation and the held-out comparisons between branch sets."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..diffusion import FusionConfig, MotionModel, make_schedule, sample
from ..encoders import ConditionBundle
from ..errors import DataMismatch
from ..geometry import default_body_proxy, penetration_ratio, penetration_value
from ..metrics import (beat_consistency, clip_feature, diversity, fit_gaussian, frechet_gesture_distance,
                       goal_reach_error)
from ..pose import Skeleton
from . import synth
from .baseline import concat_baseline
from .corpus import CorpusManifest, load_entry


@dataclass
class MetricConfig:
    window: int = 32
    stride: int = 16
    bc_sigma: float = 0.1
    n_pairs: int = 200
    seed: int = 0
    schedule: str = "cosine"
    T: int = 50
    goal_in_bundle: bool = True

    @classmethod
    def from_json(cls, d: dict) -> "MetricConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def _clip_metrics(clip, le, skeleton, proxy, mc: MetricConfig) -> dict:
    row = {"id": le.entry.id, "tag": le.entry.tag}
    if le.speech is not None:
        row["bc"] = beat_consistency(clip, le.speech, mc.bc_sigma, skeleton)
    if le.goal is not None:
        row["pos_err"], row["height_err"], row["orient_err"] = goal_reach_error(clip, skeleton, le.goal)
    if le.object is not None:
        row["pen_value"] = penetration_value(clip, skeleton, proxy, le.object)
        row["pen_ratio"] = penetration_ratio(clip, skeleton, proxy, le.object)
    return row


def _aggregate(rows: list) -> dict:
    keys = sorted({k for r in rows for k in r} - {"id", "tag"})
    return {k: float(np.mean([r[k] for r in rows if k in r])) for k in keys}


def entry_bundle(le, goal: bool = True) -> ConditionBundle:
    return ConditionBundle(le.entry.prompt, le.goal if goal else None, le.object, le.speech)


def evaluate_corpus(manifest: CorpusManifest, model: MotionModel | None = None, mc: MetricConfig | None = None,
                    split: str = "test", fusion: FusionConfig | None = None) -> dict:
    """Per-clip and aggregate metrics.

    With a model, one sample per entry is drawn (seed ``mc.seed + i``) from the
    entry's conditions and compared against the ground-truth clips; without
    one, the ground-truth clips are scored against themselves.
    """
    mc = mc or MetricConfig()
    skeleton, proxy = Skeleton(), default_body_proxy()
    if model is not None and model.stats.stats_id != manifest.stats_id:
        raise DataMismatch("checkpoint stats do not match the corpus stats")
    loaded = [load_entry(manifest, e) for e in manifest.select(split)]
    if len(loaded) < 2:
        raise DataMismatch(f"split {split!r} has fewer than two clips")
    gt = [le.clip for le in loaded]
    if model is None:
        gen = gt
    else:
        sched = make_schedule(mc.T, mc.schedule)
        bundles = [entry_bundle(le, mc.goal_in_bundle) for le in loaded]
        gen = sample(model, bundles, sched, [mc.seed + i for i in range(len(loaded))], gt[0].n_frames, fusion)
    rows = [_clip_metrics(c, le, skeleton, proxy, mc) for c, le in zip(gen, loaded)]
    f_gt = np.stack([clip_feature(c, skeleton, mc.window, mc.stride) for c in gt])
    f_gen = np.stack([clip_feature(c, skeleton, mc.window, mc.stride) for c in gen])
    agg = _aggregate(rows)
    agg["fgd"] = frechet_gesture_distance(fit_gaussian(f_gt), fit_gaussian(f_gen))
    agg["diversity"] = diversity(f_gen, mc.n_pairs, mc.seed)
    return {"config": asdict(mc), "split": split, "stats_id": manifest.stats_id,
            "source": "model" if model is not None else "ground_truth", "clips": rows, "aggregate": agg}


def report_table(report: dict) -> str:
    """Tab-separated per-clip table followed by an aggregate row."""
    rows = report["clips"]
    keys = sorted({k for r in rows for k in r} - {"id", "tag"})
    lines = ["\t".join(["id", "tag"] + keys)]
    for r in rows:
        lines.append("\t".join([r["id"], r["tag"]] + [f"{r[k]:.6f}" if k in r else "" for k in keys]))
    agg = report["aggregate"]
    lines.append("\t".join(["ALL", "-"] + [f"{agg[k]:.6f}" if k in agg else "" for k in keys]))
    lines.append("# " + "  ".join(f"{k}={v:.6f}" for k, v in sorted(agg.items()) if k not in keys))
    return "\n".join(lines) + "\n"


# --- held-out branch comparisons ------------------------------------------------

@dataclass
class HeldOut:
    scenes: list
    speeches: list


def held_out_set(seed: int, n: int = 16, n_frames: int = synth.N_FRAMES, fps: float = synth.FPS) -> HeldOut:
    """Fresh chair scenes and speech tracks, seeded away from any corpus."""
    rng = np.random.default_rng([seed, 7777])
    scenes, speeches = [], []
    for _ in range(n):
        scenes.append(synth.make_scene(int(rng.integers(2 ** 31)), "ends_sitting"))
        s = int(rng.integers(2 ** 31))
        beats = synth.random_beats(np.random.default_rng(s), n_frames, fps)
        speeches.append(synth.gen_gesture_clip(beats, n_frames, fps, s)[1])
    return HeldOut(scenes, speeches)


def branch_comparison(model: MotionModel, held: HeldOut, seed: int = 0, T: int = 50, schedule: str = "cosine",
                      goal: bool = True, fusion: FusionConfig | None = None, n_frames: int = synth.N_FRAMES) -> dict:
    """Interaction-only, cospeech-only, fused and Concat samples on held-out
    scenes against unconditioned samples with the same seeds."""
    sched = make_schedule(T, schedule)
    skeleton, proxy = Skeleton(), default_body_proxy()
    n = len(held.scenes)
    seeds = [seed + i for i in range(n)]
    sit = synth.PROMPTS["ends_sitting"]
    talk = synth.PROMPTS["gesture"]
    g = [s.goal if goal else None for s in held.scenes]
    b_int = [ConditionBundle(sit, g[i], held.scenes[i].object) for i in range(n)]
    b_unc = [b.without("object") for b in b_int]
    b_cos = [ConditionBundle(talk, None, None, held.speeches[i]) for i in range(n)]
    b_cos_unc = [b.without("speech") for b in b_cos]
    b_fused = [ConditionBundle(sit, g[i], held.scenes[i].object, held.speeches[i]) for i in range(n)]
    out = sample(model, b_int + b_unc + b_cos + b_cos_unc + b_fused, sched, seeds * 5, n_frames, fusion)
    c_int, c_unc, c_cos, c_cos_unc, c_fused = (out[i * n:(i + 1) * n] for i in range(5))
    c_concat = [concat_baseline(u, lo) for u, lo in zip(c_cos, c_int)]

    def pen(clips):
        return [penetration_ratio(c, skeleton, proxy, s.object) for c, s in zip(clips, held.scenes)]

    def pos(clips):
        return [goal_reach_error(c, skeleton, s.goal)[0] for c, s in zip(clips, held.scenes)]

    def bc(clips):
        return [beat_consistency(c, sp, skeleton=skeleton) for c, sp in zip(clips, held.speeches)]

    per = {
        "interaction": {"pen_ratio": pen(c_int), "pos_err": pos(c_int)},
        "uncond": {"pen_ratio": pen(c_unc), "pos_err": pos(c_unc)},
        "cospeech": {"bc": bc(c_cos)},
        "cospeech_uncond": {"bc": bc(c_cos_unc)},
        "fused": {"pen_ratio": pen(c_fused), "bc": bc(c_fused), "pos_err": pos(c_fused)},
        "concat": {"pen_ratio": pen(c_concat), "bc": bc(c_concat), "pos_err": pos(c_concat)},
    }
    means = {k: {m: float(np.mean(v)) for m, v in d.items()} for k, d in per.items()}
    return {"per_sample": per, "mean": means, "seeds": seeds, "goal_in_bundle": goal, "T": T,
            "clips": {"interaction": c_int, "uncond": c_unc, "cospeech": c_cos, "cospeech_uncond": c_cos_unc,
                      "fused": c_fused, "concat": c_concat}}
