"""Command line entry point.

    adaptmotion gen-data --out-dir DATA [--config C] [--seed S]
    adaptmotion train {mdm,interaction,cospeech} --data DATA --out-dir RUN [--checkpoint PREV] [--resume]
    adaptmotion sample --checkpoint CKPT --config C --out-dir OUT [--seed S]
    adaptmotion evaluate --data DATA --out-dir OUT [--checkpoint CKPT]
    adaptmotion concat-baseline --upper A.motion --lower B.motion --out-dir OUT
    adaptmotion export --clip X.motion --out-dir OUT [--object OBJ.json]

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from ..diffusion import FusionConfig, make_schedule, sample
from ..encoders import ConditionBundle, GoalSpec, load_speech
from ..geometry import load_object, save_object
from ..pose import JOINT_NAMES, Skeleton, clip_joint_positions, load_clip, save_clip
from . import synth
from .baseline import concat_baseline
from .corpus import CorpusConfig, CorpusManifest, generate_corpus
from .evaluate import MetricConfig, evaluate_corpus, report_table
from .train import STAGES, config_from_file, load_model, train_stage

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _read_config(path) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file {path} does not exist")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}") from None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _need(value, flag: str):
    if value is None:
        raise UsageError(f"{flag} is required")
    return value


# --- commands ------------------------------------------------------------------

def cmd_gen_data(args) -> None:
    cfg = _read_config(args.config)
    corpus_cfg = CorpusConfig.from_json(cfg.get("corpus", {}))
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    generate_corpus(_need(args.out_dir, "--out-dir"), seed, corpus_cfg)


def cmd_train(args) -> None:
    cfg = config_from_file(args.config, stage=args.stage, seed=args.seed)
    data = args.data or _read_config(args.config).get("data")
    manifest = CorpusManifest.load(_need(data, "--data"))
    out = Path(_need(args.out_dir, "--out-dir"))
    out.mkdir(parents=True, exist_ok=True)
    train_stage(cfg, manifest, out / f"{args.stage}.pt", args.checkpoint, resume=args.resume,
                log_path=out / f"loss_{args.stage}.tsv")


def _bundle_from_spec(spec: dict, base: Path, n_frames: int, fps: float) -> ConditionBundle:
    obj = goal = speech = None
    if "scene" in spec:
        sc = synth.make_scene(int(spec["scene"].get("seed", 0)), spec["scene"].get("tag", "ends_sitting"),
                              spec["scene"].get("seat_height"))
        obj, goal = sc.object, sc.goal
    if "object" in spec:
        obj = load_object(base / spec["object"])
    if "goal" in spec:
        goal = GoalSpec.from_json(spec["goal"])
    if spec.get("use_goal") is False:
        goal = None
    if "speech" in spec:
        s = int(spec["speech"].get("seed", 0))
        beats = synth.random_beats(np.random.default_rng(s), n_frames, fps)
        speech = synth.gen_gesture_clip(beats, n_frames, fps, s)[1]
    if "audio" in spec:
        speech = load_speech(base / spec["audio"], base / spec["transcript"] if "transcript" in spec else None)
    prompt = spec.get("prompt")
    if not prompt:
        raise UsageError("each bundle needs a prompt")
    return ConditionBundle(prompt, goal, obj, speech)


def cmd_sample(args) -> None:
    cfg = _read_config(args.config)
    scfg = cfg.get("sample", cfg)
    model = load_model(_need(args.checkpoint, "--checkpoint"))
    n_frames = int(scfg.get("n_frames", synth.N_FRAMES))
    base = Path(args.config).parent if args.config else Path(".")
    specs = scfg.get("bundles") or []
    if not specs:
        raise UsageError("sample config needs a non-empty 'bundles' list")
    bundles = [_bundle_from_spec(s, base, n_frames, model.fps) for s in specs]
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    seeds = [seed + i for i in range(len(bundles))]
    fusion = FusionConfig(**scfg.get("fusion", {}))
    T = model.mdm.cfg.T
    clips = sample(model, bundles, make_schedule(T, scfg.get("schedule", "cosine")), seeds, n_frames, fusion)
    out = Path(_need(args.out_dir, "--out-dir"))
    out.mkdir(parents=True, exist_ok=True)
    for i, (clip, spec) in enumerate(zip(clips, specs)):
        clip.meta.update({"config": scfg, "checkpoint": Path(args.checkpoint).name})
        save_clip(out / f"sample_{i:03d}.motion", clip)
        if bundles[i].object is not None:
            save_object(out / f"sample_{i:03d}.object.json", bundles[i].object)


def cmd_evaluate(args) -> None:
    cfg = _read_config(args.config)
    data = args.data or cfg.get("data")
    manifest = CorpusManifest.load(_need(data, "--data"))
    mc = MetricConfig.from_json(cfg.get("metrics", {}))
    if args.seed is not None:
        mc.seed = args.seed
    model = load_model(args.checkpoint) if args.checkpoint else None
    fusion = FusionConfig(**cfg.get("sample", {}).get("fusion", {}))
    report = evaluate_corpus(manifest, model, mc, cfg.get("split", "test"), fusion)
    out = Path(_need(args.out_dir, "--out-dir"))
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", report)
    (out / "report.tsv").write_text(report_table(report))


def cmd_concat(args) -> None:
    upper = load_clip(_need(args.upper, "--upper"))
    lower = load_clip(_need(args.lower, "--lower"))
    out = Path(_need(args.out_dir, "--out-dir"))
    out.mkdir(parents=True, exist_ok=True)
    save_clip(out / "concat.motion", concat_baseline(upper, lower))


def _svg_path(root_xy: np.ndarray, footprints: list) -> str:
    pts = np.vstack([root_xy] + footprints) if footprints else root_xy
    lo, hi = pts.min(0) - 0.3, pts.max(0) + 0.3
    scale = 400.0 / max(hi - lo)
    w, h = (hi - lo) * scale

    def xy(p):
        # svg y grows downwards
        return f"{(p[0] - lo[0]) * scale:.2f},{(hi[1] - p[1]) * scale:.2f}"

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0f}" height="{h:.0f}" '
             f'viewBox="0 0 {w:.2f} {h:.2f}">']
    for fp in footprints:
        parts.append(f'<polygon points="{" ".join(xy(p) for p in fp)}" fill="#ccc" stroke="#888"/>')
    parts.append(f'<polyline points="{" ".join(xy(p) for p in root_xy)}" fill="none" stroke="#1f77b4" stroke-width="2"/>')
    parts.append(f'<circle cx="{xy(root_xy[0]).split(",")[0]}" cy="{xy(root_xy[0]).split(",")[1]}" r="4" fill="green"/>')
    parts.append(f'<circle cx="{xy(root_xy[-1]).split(",")[0]}" cy="{xy(root_xy[-1]).split(",")[1]}" r="4" fill="red"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _footprints(obj) -> list:
    out = []
    for prim in obj.primitives:
        if hasattr(prim, "corners"):
            c = prim.corners()[:, :2]
            centered = c - c.mean(0)
            order = np.argsort(np.arctan2(centered[:, 1], centered[:, 0]))
            out.append(c[order][::2] if len(c) == 8 else c[order])
    return out


def cmd_export(args) -> None:
    clip = load_clip(_need(args.clip, "--clip"))
    skeleton = Skeleton()
    joints = clip_joint_positions(clip, skeleton)
    out = Path(_need(args.out_dir, "--out-dir"))
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.clip).stem
    with (out / f"{stem}.csv").open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["frame", "time"] + [f"{n}_{a}" for n in JOINT_NAMES for a in "xyz"])
        for k in range(clip.n_frames):
            w.writerow([k, f"{k / clip.fps:.6f}"] + [f"{v:.6f}" for v in joints[k].reshape(-1)])
    fps = _footprints(load_object(args.object)) if args.object else []
    (out / f"{stem}.svg").write_text(_svg_path(joints[:, 0, :2], fps))


# --- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="adaptmotion", description="Adaptive multi-condition motion diffusion.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir")
        sp.add_argument("--checkpoint")

    common(sub.add_parser("gen-data", help="write a synthetic corpus"))
    t = sub.add_parser("train", help="train one stage")
    t.add_argument("stage", choices=STAGES)
    t.add_argument("--data")
    t.add_argument("--resume", action="store_true")
    common(t)
    common(sub.add_parser("sample", help="sample clips from a checkpoint"))
    e = sub.add_parser("evaluate", help="metric report for a corpus split")
    e.add_argument("--data")
    common(e)
    c = sub.add_parser("concat-baseline", help="splice upper body of one clip onto another")
    c.add_argument("--upper")
    c.add_argument("--lower")
    common(c)
    x = sub.add_parser("export", help="CSV joint trajectories and an SVG root path")
    x.add_argument("--clip")
    x.add_argument("--object")
    common(x)
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample, "evaluate": cmd_evaluate,
            "concat-baseline": cmd_concat, "export": cmd_export}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("missing command")
        COMMANDS[args.command](args)
    except (ValueError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
