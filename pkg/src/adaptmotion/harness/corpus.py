"""Corpus files: generation of the synthetic corpus, the manifest, and loading
clips and conditions back into memory.

Layout of a corpus directory::

    manifest.json        entries + stats_id + generation config
    stats.json           NormStats of the training split
    clips/<id>.motion    MotionClip container (denormalized)
    objects/<id>.json    object spec (interaction clips)
    audio/<id>.wav       16-bit PCM speech (gesture clips)
    audio/<id>.tsv       transcript
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..encoders import GoalSpec, load_speech, save_transcript, save_wav
from ..errors import DataMismatch
from ..geometry import load_object, save_object
from ..pose import MotionClip, NormStats, load_clip, save_clip
from . import synth

MANIFEST_FORMAT = "corpus-manifest"
SPLITS = ("train", "test")


@dataclass
class CorpusConfig:
    n_clips: int = 64
    gesture_fraction: float = 0.375
    # among interaction clips
    tag_weights: dict = field(default_factory=lambda: {"ends_sitting": 0.7, "starts_sitting": 0.15, "none": 0.15})
    test_every: int = 8  # every k-th clip goes to the test split
    n_frames: int = synth.N_FRAMES
    fps: float = synth.FPS
    k_frames: int = synth.K_FRAMES
    min_std: float = 1e-3

    @classmethod
    def from_json(cls, d: dict) -> "CorpusConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class Entry:
    id: str
    motion: str
    prompt: str
    tag: str
    split: str
    object: str | None = None
    audio: str | None = None
    transcript: str | None = None
    goal: dict | None = None

    def to_json(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class CorpusManifest:
    root: Path
    entries: list
    stats_id: str
    config: dict = field(default_factory=dict)
    seed: int = 0

    def to_json(self) -> dict:
        return {"format": MANIFEST_FORMAT, "version": 1, "seed": self.seed, "stats_id": self.stats_id,
                "config": self.config, "entries": [e.to_json() for e in self.entries]}

    def save(self) -> None:
        (self.root / "manifest.json").write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, root) -> "CorpusManifest":
        root = Path(root)
        path = root / "manifest.json" if root.is_dir() else root
        root = path.parent
        d = json.loads(path.read_text())
        if d.get("format") != MANIFEST_FORMAT:
            raise DataMismatch(f"{path}: not a corpus manifest")
        m = cls(root, [Entry(**e) for e in d["entries"]], d["stats_id"], d.get("config", {}), d.get("seed", 0))
        m.validate()
        return m

    def validate(self) -> None:
        ids = set()
        for e in self.entries:
            if e.id in ids:
                raise DataMismatch(f"duplicate entry id {e.id}")
            ids.add(e.id)
            if e.split not in SPLITS:
                raise DataMismatch(f"entry {e.id}: unknown split {e.split!r}")
            for rel in (e.motion, e.object, e.audio, e.transcript):
                if rel is not None and not (self.root / rel).exists():
                    raise DataMismatch(f"entry {e.id}: missing file {rel}")

    def stats(self) -> NormStats:
        stats = NormStats.from_json(json.loads((self.root / "stats.json").read_text()))
        if stats.stats_id != self.stats_id:
            raise DataMismatch("stats.json does not match the manifest stats_id")
        return stats

    def select(self, split: str | None = None, kind: str | None = None) -> list:
        out = [e for e in self.entries if split is None or e.split == split]
        if kind == "interaction":
            out = [e for e in out if e.object is not None]
        elif kind == "cospeech":
            out = [e for e in out if e.audio is not None]
        return out


@dataclass
class LoadedEntry:
    entry: Entry
    clip: MotionClip
    object: object = None
    speech: object = None
    goal: GoalSpec | None = None


def load_entry(manifest: CorpusManifest, e: Entry) -> LoadedEntry:
    clip = load_clip(manifest.root / e.motion)
    obj = load_object(manifest.root / e.object) if e.object else None
    speech = None
    if e.audio:
        speech = load_speech(manifest.root / e.audio, manifest.root / e.transcript if e.transcript else None)
    goal = GoalSpec.from_json(e.goal) if e.goal else None
    return LoadedEntry(e, clip, obj, speech, goal)


def _plan(cfg: CorpusConfig, rng: np.random.Generator) -> list:
    n_gest = int(round(cfg.n_clips * cfg.gesture_fraction))
    n_int = cfg.n_clips - n_gest
    tags, weights = zip(*sorted(cfg.tag_weights.items()))
    counts = np.floor(np.asarray(weights) / sum(weights) * n_int).astype(int)
    counts[tags.index("ends_sitting")] += n_int - counts.sum()
    kinds = [t for t, c in zip(tags, counts) for _ in range(c)] + ["gesture"] * n_gest
    return [kinds[i] for i in rng.permutation(len(kinds))]


def generate_corpus(out_dir, seed: int = 0, cfg: CorpusConfig | None = None) -> CorpusManifest:
    """Write a synthetic corpus; bit-for-bit reproducible from ``(seed, cfg)``."""
    cfg = cfg or CorpusConfig()
    root = Path(out_dir)
    for sub in ("clips", "objects", "audio"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries, train_frames = [], []
    for i, kind in enumerate(_plan(cfg, rng)):
        cid = f"c{i:04d}"
        sub_seed = int(rng.integers(2 ** 31))
        split = "test" if cfg.test_every and i % cfg.test_every == cfg.test_every - 1 else "train"
        e = Entry(cid, f"clips/{cid}.motion", synth.PROMPTS[kind], kind, split)
        if kind == "gesture":
            beats = synth.random_beats(np.random.default_rng(sub_seed), cfg.n_frames, cfg.fps)
            clip, speech = synth.gen_gesture_clip(beats, cfg.n_frames, cfg.fps, sub_seed)
            e.audio, e.transcript = f"audio/{cid}.wav", f"audio/{cid}.tsv"
            save_wav(root / e.audio, speech)
            save_transcript(root / e.transcript, speech.tokens)
        else:
            scene = synth.make_scene(sub_seed, kind)
            clip, labels = synth.gen_interaction_clip(scene, cfg.n_frames, cfg.fps, sub_seed, cfg.k_frames)
            e.object, e.goal = f"objects/{cid}.json", scene.goal.to_json()
            save_object(root / e.object, scene.object)
        clip.meta.update({"id": cid, "prompt": e.prompt})
        save_clip(root / e.motion, clip)
        if split == "train":
            train_frames.append(clip.data)
        entries.append(e)
    stats = NormStats.from_data(np.concatenate(train_frames), min_std=cfg.min_std)
    (root / "stats.json").write_text(json.dumps(stats.to_json(), sort_keys=True))
    manifest = CorpusManifest(root, entries, stats.stats_id, asdict(cfg), seed)
    manifest.save()
    return manifest
