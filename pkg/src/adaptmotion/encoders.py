"""Condition encoders: prompt and goal embeddings, the speech front end with
its joint audio-text projection, and the basis-point interaction encoder.

Transcript files are tab-separated with a header line ``token start_s end_s``.
Audio is mono PCM WAV (16-bit or float32).
"""
from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile
from torch import nn

from .errors import BadTiming, EmptyAudio, EmptyPrompt, LengthMismatch, MissingObject
from .geometry import BasisPointSet, ObjectGeometry, bps_interaction_features

D_COND = 64
D_TXT = 16
N_BANDS = 16
LOG_FLOOR = 1e-10  # band energies of digital silence map to log(LOG_FLOOR)


def tokenize(text: str) -> list[str]:
    return re.findall(r"[a-z0-9']+", text.lower())


def hash_vector(token: str, dim: int, salt: str = "tok") -> np.ndarray:
    """Unit vector seeded by a stable hash of ``token``."""
    digest = hashlib.sha256(f"{salt}:{token}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def prompt_embed(text: str, dim: int = D_COND) -> np.ndarray:
    """Bag-of-tokens hash embedding, L2-normalized."""
    tokens = tokenize(text)
    if not tokens:
        raise EmptyPrompt("prompt has no tokens")
    v = np.sum([hash_vector(t, dim, "prompt") for t in tokens], axis=0)
    return v / np.linalg.norm(v)


# --- goal --------------------------------------------------------------------

def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w <= -np.pi, w + 2 * np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


@dataclass(frozen=True)
class GoalSpec:
    position: np.ndarray  # ground-plane (x, y)
    height: float
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(2))
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    def features(self) -> np.ndarray:
        return goal_features(self)

    def to_json(self) -> dict:
        return {"position": self.position.tolist(), "height": self.height, "heading": self.heading}

    @classmethod
    def from_json(cls, d: dict) -> "GoalSpec":
        return cls(d["position"], float(d["height"]), float(d["heading"]))


def goal_features(goal: GoalSpec) -> np.ndarray:
    """(x, y, height, cos heading, sin heading)."""
    return np.array([goal.position[0], goal.position[1], goal.height,
                     math.cos(goal.heading), math.sin(goal.heading)])


def goal_from_features(f) -> GoalSpec:
    f = np.asarray(f, dtype=np.float64)
    return GoalSpec(f[:2], float(f[2]), math.atan2(f[4], f[3]))


class GoalEncoder(nn.Module):
    def __init__(self, d_cond: int = D_COND):
        super().__init__()
        self.proj = nn.Linear(5, d_cond)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return self.proj(feats)


def goal_embed(goal: GoalSpec, encoder: GoalEncoder) -> torch.Tensor:
    w = encoder.proj.weight
    return encoder(torch.as_tensor(goal_features(goal), dtype=w.dtype))


# --- speech ------------------------------------------------------------------

@dataclass
class SpeechInput:
    samples: np.ndarray
    sample_rate: int
    tokens: list = field(default_factory=list)  # [(token, start_s, end_s), ...]

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        self.tokens = [(str(t), float(s), float(e)) for t, s, e in self.tokens]

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def validate_tokens(self) -> None:
        dur = self.duration
        for tok, s, e in self.tokens:
            if not (0.0 <= s < e) or e > dur + 1e-9:
                raise BadTiming(f"token {tok!r} has bad interval [{s}, {e}] for duration {dur}")


def save_wav(path, speech: SpeechInput, float32: bool = False) -> None:
    if float32:
        wavfile.write(path, speech.sample_rate, speech.samples.astype(np.float32))
    else:
        pcm = np.clip(np.round(speech.samples * 32767.0), -32768, 32767).astype(np.int16)
        wavfile.write(path, speech.sample_rate, pcm)


def load_wav(path) -> tuple[np.ndarray, int]:
    sr, data = wavfile.read(path)
    if data.ndim > 1:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32767.0
    return np.asarray(data, dtype=np.float64), int(sr)


def save_transcript(path, tokens) -> None:
    lines = ["token\tstart_s\tend_s"] + [f"{t}\t{s:.6f}\t{e:.6f}" for t, s, e in tokens]
    Path(path).write_text("\n".join(lines) + "\n")


def load_transcript(path) -> list:
    rows = Path(path).read_text().strip().splitlines()
    if not rows or rows[0].split("\t") != ["token", "start_s", "end_s"]:
        raise BadTiming(f"{path}: missing transcript header")
    out = []
    for line in rows[1:]:
        tok, s, e = line.split("\t")
        out.append((tok, float(s), float(e)))
    return out


def load_speech(wav_path, transcript_path=None) -> SpeechInput:
    samples, sr = load_wav(wav_path)
    tokens = load_transcript(transcript_path) if transcript_path else []
    return SpeechInput(samples, sr, tokens)


def frame_count(duration: float, fps: float) -> int:
    return int(math.ceil(duration * fps - 1e-9))


def mel_band_edges(sample_rate: int, n_bands: int) -> np.ndarray:
    """``n_bands + 2`` mel-spaced edge frequencies in Hz from 0 to Nyquist."""
    mel_max = 2595.0 * np.log10(1.0 + (sample_rate / 2) / 700.0)
    mels = np.linspace(0.0, mel_max, n_bands + 2)
    return 700.0 * (10 ** (mels / 2595.0) - 1.0)


def band_energies(speech: SpeechInput, fps: float, n_frames: int | None = None,
                  n_bands: int = N_BANDS) -> tuple[np.ndarray, np.ndarray]:
    """Log triangular-band energies ``(N, n_bands)`` and RMS ``(N,)`` per motion frame.

    Frame ``k`` uses a Hann window of two hops centered on ``k / fps``.
    """
    if speech.samples.size == 0:
        raise EmptyAudio("speech has no samples")
    sr = speech.sample_rate
    hop = sr / fps
    win = max(4, int(round(2 * hop)))
    n_fft = 1 << (win - 1).bit_length()
    n = frame_count(speech.duration, fps) if n_frames is None else n_frames
    pad = win
    x = np.concatenate([np.zeros(pad), speech.samples, np.zeros(pad + int(n * hop) + win)])
    starts = (np.arange(n) * hop).round().astype(np.int64) + pad - win // 2
    idx = starts[:, None] + np.arange(win)[None, :]
    frames = x[idx]
    # frames past the end of the audio are silence
    rms = np.sqrt((frames ** 2).mean(axis=1))
    spec = np.abs(np.fft.rfft(frames * np.hanning(win), n=n_fft, axis=1)) ** 2 / win
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sr)
    edges = mel_band_edges(sr, n_bands)
    fb = np.zeros((n_bands, freqs.size))
    for b in range(n_bands):
        lo, mid, hi = edges[b], edges[b + 1], edges[b + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[b] = np.clip(np.minimum(up, down), 0.0, None)
    energy = spec @ fb.T
    return np.log(energy + LOG_FLOOR), rms


def audio_features(speech: SpeechInput, fps: float, n_frames: int | None = None,
                   n_bands: int = N_BANDS) -> np.ndarray:
    """``(N, n_bands + 1)``: log band energies then RMS, one row per motion frame."""
    logE, rms = band_energies(speech, fps, n_frames, n_bands)
    return np.concatenate([logE, rms[:, None]], axis=1)


def text_features(speech: SpeechInput, fps: float, n_frames: int | None = None, d_txt: int = D_TXT) -> np.ndarray:
    """Hash embedding of the token active at each frame time ``k / fps``; zeros in gaps."""
    speech.validate_tokens()
    n = frame_count(speech.duration, fps) if n_frames is None else n_frames
    out = np.zeros((n, d_txt))
    times = np.arange(n) / fps
    for tok, s, e in speech.tokens:
        active = (times >= s - 1e-9) & (times < e - 1e-9)
        out[active] = hash_vector(tok.lower(), d_txt, "word")
    return out


class SpeechEncoder(nn.Module):
    def __init__(self, d_out: int, n_audio: int = N_BANDS + 1, d_txt: int = D_TXT):
        super().__init__()
        self.n_audio, self.d_txt = n_audio, d_txt
        self.proj = nn.Linear(n_audio + d_txt, d_out)

    def forward(self, audio: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        if audio.shape[:-1] != text.shape[:-1]:
            raise LengthMismatch(f"audio {tuple(audio.shape)} vs text {tuple(text.shape)}")
        return self.proj(torch.cat([audio, text], dim=-1))


def speech_content_encode(audio, text, encoder: SpeechEncoder) -> torch.Tensor:
    dtype = encoder.proj.weight.dtype
    return encoder(torch.as_tensor(audio, dtype=dtype), torch.as_tensor(text, dtype=dtype))


class InteractionEncoder(nn.Module):
    """Two-layer MLP over concatenated object and interaction BPS features."""

    def __init__(self, d_out: int, n_bps: int = 512, hidden: int = 128):
        super().__init__()
        self.n_bps = n_bps
        self.fc1 = nn.Linear(2 * n_bps, hidden)
        self.fc2 = nn.Linear(hidden, d_out)

    def forward(self, obj_feats: torch.Tensor, inter_feats: torch.Tensor) -> torch.Tensor:
        obj = obj_feats.unsqueeze(-2).expand(*inter_feats.shape[:-1], obj_feats.shape[-1])
        return self.fc2(torch.nn.functional.silu(self.fc1(torch.cat([obj, inter_feats], dim=-1))))


def interaction_encode(joints, obj_feats, bps_points, encoder: InteractionEncoder) -> torch.Tensor:
    """Per-frame interaction features.

    ``joints``: ``(..., N, 22, 3)`` world joints from the current noisy motion;
    ``obj_feats``: ``(..., n_bps)`` precomputed object features;
    ``bps_points``: ``(..., n_bps, 3)`` basis points fitted to the object.
    """
    if obj_feats is None or bps_points is None:
        raise MissingObject("interaction encoding needs an object")
    dtype = encoder.fc1.weight.dtype
    joints = torch.as_tensor(joints, dtype=dtype)
    pts = torch.as_tensor(bps_points, dtype=dtype)
    inter = bps_interaction_features(pts.unsqueeze(-3), joints)  # (..., N, n_bps)
    return encoder(torch.as_tensor(obj_feats, dtype=dtype), inter)


@dataclass
class ConditionBundle:
    """Everything one sample is conditioned on. Branches activate on presence."""

    prompt: str
    goal: GoalSpec | None = None
    object: ObjectGeometry | None = None
    speech: SpeechInput | None = None
    embedding: np.ndarray | None = None

    def __post_init__(self):
        if self.embedding is None:
            self.embedding = prompt_embed(self.prompt)

    @property
    def active_branches(self) -> tuple[str, ...]:
        out = []
        if self.object is not None:
            out.append("interaction")
        if self.speech is not None:
            out.append("cospeech")
        return tuple(out)

    def without(self, *names: str) -> "ConditionBundle":
        return ConditionBundle(
            self.prompt,
            None if "goal" in names else self.goal,
            None if "object" in names or "interaction" in names else self.object,
            None if "speech" in names or "cospeech" in names else self.speech,
            self.embedding,
        )
