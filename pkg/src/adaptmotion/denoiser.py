"""Motion denoiser (IN -> 8 transformer blocks -> OUT), adaptation branches
injected block-by-block, gradients, AdamW and checkpoint files.

Token layout: one condition token (prompt + goal + timestep) followed by one
token per frame. Branches only see frame tokens, so the condition token gets
a zero branch residual.
"""
from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .encoders import D_COND, GoalEncoder, InteractionEncoder, SpeechEncoder, interaction_encode
from .errors import MissingCondition, NoTrace, ShapeMismatch, StepOutOfRange
from .pose import FRAME_DIM

N_BLOCKS = 8


@dataclass
class DenoiserConfig:
    d_model: int = 64
    n_heads: int = 4
    ff_mult: int = 4
    n_blocks: int = N_BLOCKS
    d_cond: int = D_COND
    d_time: int = 64
    n_feats: int = FRAME_DIM
    T: int = 50
    # branch encoders
    n_bps: int = 512
    inter_hidden: int = 128

    def to_json(self) -> dict:
        return asdict(self)


def sinusoid(pos: torch.Tensor, dim: int) -> torch.Tensor:
    """``[sin(p w_0) .. sin(p w_{h-1}), cos(p w_0) .. cos(p w_{h-1})]`` with ``w_i = 10000^(-i/h)``."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = pos.to(torch.float64).unsqueeze(-1) * freqs
    return torch.cat([ang.sin(), ang.cos()], dim=-1)


def time_embed(t, T: int, dim: int = 64) -> torch.Tensor:
    t = torch.as_tensor(t)
    if bool(((t < 0) | (t >= T)).any()):
        raise StepOutOfRange(f"timestep outside [0, {T})")
    return sinusoid(t, dim)


class Block(nn.Module):
    """Pre-norm transformer block: self-attention then GELU feed-forward."""

    def __init__(self, d_model: int, n_heads: int, ff_mult: int = 4):
        super().__init__()
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.norm1 = nn.LayerNorm(d_model)
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.attn_out = nn.Linear(d_model, d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff1 = nn.Linear(d_model, ff_mult * d_model)
        self.ff2 = nn.Linear(ff_mult * d_model, d_model)

    def attention(self, h):
        B, S, D = h.shape
        dh = D // self.n_heads
        q, k, v = self.qkv(h).view(B, S, 3, self.n_heads, dh).permute(2, 0, 3, 1, 4)
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        return self.attn_out((w @ v).transpose(1, 2).reshape(B, S, D))

    def forward(self, h):
        h = h + self.attention(self.norm1(h))
        return h + self.ff2(F.gelu(self.ff1(self.norm2(h))))


class MotionDenoiser(nn.Module):
    """Base model predicting clean normalized motion from ``x_t``."""

    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DenoiserConfig()
        self.in_proj = nn.Linear(cfg.n_feats, cfg.d_model)
        self.goal_encoder = GoalEncoder(cfg.d_cond)
        self.cond_proj = nn.Linear(cfg.d_cond + cfg.d_time, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg.d_model, cfg.n_heads, cfg.ff_mult) for _ in range(cfg.n_blocks))
        self.out_norm = nn.LayerNorm(cfg.d_model)
        self.out_proj = nn.Linear(cfg.d_model, cfg.n_feats)

    def cond_token(self, t, prompt, goal=None, goal_mask=None):
        dtype = self.in_proj.weight.dtype
        c = prompt.to(dtype)
        if goal is not None:
            g = self.goal_encoder(goal.to(dtype))
            if goal_mask is not None:
                g = g * goal_mask.to(dtype).unsqueeze(-1)
            c = c + g
        temb = time_embed(t, self.cfg.T, self.cfg.d_time).to(dtype)
        return self.cond_proj(torch.cat([c, temb], dim=-1))

    def embed(self, x, t, prompt, goal=None, goal_mask=None):
        """IN: token sequence ``(B, 1 + N, d_model)``."""
        if x.ndim != 3 or x.shape[-1] != self.cfg.n_feats:
            raise ShapeMismatch(f"expected (B, N, {self.cfg.n_feats}), got {tuple(x.shape)}")
        B, N, _ = x.shape
        t = torch.as_tensor(t).expand(B) if torch.as_tensor(t).ndim == 0 else torch.as_tensor(t)
        if prompt.shape[0] != B or t.shape[0] != B:
            raise ShapeMismatch("batch sizes of x, t and prompt differ")
        frames = self.in_proj(x) + sinusoid(torch.arange(N), self.cfg.d_model).to(x.dtype)
        return torch.cat([self.cond_token(t, prompt, goal, goal_mask).unsqueeze(1), frames], dim=1)

    def out(self, h):
        """OUT on frame tokens only."""
        return self.out_proj(self.out_norm(h[:, 1:]))

    def forward(self, x, t, prompt, goal=None, goal_mask=None, injections=None):
        """Predict ``x0``. ``injections`` are the 8 gated branch activations
        ``(B, N, d_model)``; injection ``j`` is added before block ``j + 1``
        (and the last one before OUT)."""
        h = self.embed(x, t, prompt, goal, goal_mask)
        if injections is None:
            for blk in self.blocks:
                h = blk(h)
            return self.out(h)
        if len(injections) != len(self.blocks):
            raise ShapeMismatch(f"need {len(self.blocks)} injections, got {len(injections)}")
        pad = h.new_zeros(h.shape[0], 1, h.shape[-1])
        h = self.blocks[0](h)
        for j in range(1, len(self.blocks)):
            h = self.blocks[j](h + torch.cat([pad, injections[j - 1]], dim=1))
        return self.out(h + torch.cat([pad, injections[-1]], dim=1))


class AdaptationBranch(nn.Module):
    """Encoder ``E_k`` + 8 blocks ``L_k1..L_k8`` + zero-initialized output gates."""

    KINDS = ("interaction", "cospeech")

    def __init__(self, kind: str, cfg: DenoiserConfig | None = None):
        super().__init__()
        if kind not in self.KINDS:
            raise ValueError(f"unknown branch kind {kind!r}")
        self.kind = kind
        self.cfg = cfg = cfg or DenoiserConfig()
        if kind == "interaction":
            self.encoder = InteractionEncoder(cfg.d_model, cfg.n_bps, cfg.inter_hidden)
        else:
            self.encoder = SpeechEncoder(cfg.d_model)
        self.time_proj = nn.Linear(cfg.d_time, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg.d_model, cfg.n_heads, cfg.ff_mult) for _ in range(cfg.n_blocks))
        self.gates = nn.Parameter(torch.zeros(cfg.n_blocks, cfg.d_model))

    def encode(self, cond: dict) -> torch.Tensor:
        try:
            if self.kind == "interaction":
                return interaction_encode(cond["joints"], cond["obj_feats"], cond["bps_points"], self.encoder)
            dtype = self.encoder.proj.weight.dtype
            return self.encoder(cond["audio"].to(dtype), cond["text"].to(dtype))
        except KeyError as e:
            raise MissingCondition(f"{self.kind} branch needs condition input {e}") from None

    def activations(self, cond: dict, t) -> list[torch.Tensor]:
        """Ungated ``c_k1..c_k8``."""
        c = self.encode(cond)
        B, N, _ = c.shape
        t = torch.as_tensor(t)
        t = t.expand(B) if t.ndim == 0 else t
        temb = time_embed(t, self.cfg.T, self.cfg.d_time).to(c.dtype)
        c = c + sinusoid(torch.arange(N), self.cfg.d_model).to(c.dtype) + self.time_proj(temb).unsqueeze(1)
        out = []
        for blk in self.blocks:
            c = blk(c)
            out.append(c)
        return out

    def forward(self, cond: dict, t) -> list[torch.Tensor]:
        return [g * c for g, c in zip(self.gates, self.activations(cond, t))]


def mdm_forward(x_t, t, prompt, mdm: MotionDenoiser, goal=None, goal_mask=None):
    return mdm(x_t, t, prompt, goal, goal_mask)


def adapted_forward(x_t, t, prompt, mdm: MotionDenoiser, branch: AdaptationBranch, cond: dict,
                    goal=None, goal_mask=None):
    if cond is None:
        raise MissingCondition(f"{branch.kind} branch called without condition inputs")
    inj = branch(cond, t)
    if inj[0].shape[:2] != x_t.shape[:2]:
        raise ShapeMismatch(f"branch features {tuple(inj[0].shape[:2])} vs motion {tuple(x_t.shape[:2])}")
    return mdm(x_t, t, prompt, goal, goal_mask, injections=inj)


def zero_condition(kind: str, like: dict) -> dict:
    return {k: torch.zeros_like(v) for k, v in like.items()}


def set_frozen(module: nn.Module, frozen: bool = True) -> None:
    for p in module.parameters():
        p.requires_grad_(not frozen)


def gradients(loss: torch.Tensor, *modules: nn.Module, prefixes=None) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of ``loss`` for every trainable parameter.

    Frozen parameters (``requires_grad=False``) are absent from the result.
    """
    if not isinstance(loss, torch.Tensor) or loss.grad_fn is None:
        raise NoTrace("loss was not computed in gradient mode")
    prefixes = prefixes or [f"m{i}" for i in range(len(modules))]
    named = [(f"{pre}.{n}", p) for pre, m in zip(prefixes, modules)
             for n, p in m.named_parameters() if p.requires_grad]
    if not named:
        return {}
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return {n: (g if g is not None else torch.zeros_like(p)) for (n, p), g in zip(named, grads)}


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: list = field(default_factory=list)
    exp_avg_sq: list = field(default_factory=list)

    def state_dict(self) -> dict:
        return {"step": self.step, "exp_avg": [m.clone() for m in self.exp_avg],
                "exp_avg_sq": [v.clone() for v in self.exp_avg_sq]}

    @classmethod
    def from_state_dict(cls, d: dict) -> "AdamWState":
        return cls(int(d["step"]), list(d["exp_avg"]), list(d["exp_avg_sq"]))


@torch.no_grad()
def adamw_step(params, grads, state: AdamWState, lr: float = 1e-4, betas=(0.9, 0.999),
               weight_decay: float = 0.0, eps: float = 1e-8) -> AdamWState:
    """One decoupled-weight-decay Adam update, in place on ``params``."""
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise ShapeMismatch("params and grads differ in length")
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    b1, b2 = betas
    state.step += 1
    bc1 = 1 - b1 ** state.step
    bc2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatch(f"param {tuple(p.shape)} vs grad {tuple(g.shape)}")
        p.mul_(1 - lr * weight_decay)
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(eps), value=-lr)
    return state


# --- checkpoints ---------------------------------------------------------------
#
# torch.save of a plain dict:
#   format      "adaptmotion-checkpoint"
#   version     1
#   config      DenoiserConfig as a dict
#   modules     {"mdm": {param name: tensor}, "interaction": {...}, "cospeech": {...}}
#   shapes      {module: {param name: [dims]}}
#   stats       NormStats.to_json()
#   meta        free-form JSON (stage, steps, seed, training config, ...)
#   optimizer   optional {module: AdamWState.state_dict()}

CKPT_FORMAT = "adaptmotion-checkpoint"
CKPT_VERSION = 1


def build_module(name: str, cfg: DenoiserConfig) -> nn.Module:
    return MotionDenoiser(cfg) if name == "mdm" else AdaptationBranch(name, cfg)


def save_checkpoint(path, cfg: DenoiserConfig, modules: dict, stats_json: dict, meta: dict | None = None,
                    optimizer: dict | None = None) -> None:
    payload = {
        "format": CKPT_FORMAT,
        "version": CKPT_VERSION,
        "config": cfg.to_json(),
        "modules": {k: {n: t.detach().clone() for n, t in m.state_dict().items()} for k, m in modules.items()},
        "shapes": {k: {n: list(t.shape) for n, t in m.state_dict().items()} for k, m in modules.items()},
        "stats": stats_json,
        "meta": meta or {},
    }
    if optimizer is not None:
        payload["optimizer"] = optimizer
    # via a buffer: the zip record name then does not depend on the file name
    buf = io.BytesIO()
    torch.save(payload, buf)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> dict:
    """Load and validate; returns the payload with ``modules`` rebuilt as nn.Modules."""
    payload = torch.load(path, weights_only=True)
    if payload.get("format") != CKPT_FORMAT or payload.get("version") != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format")
    cfg = DenoiserConfig(**payload["config"])
    built = {}
    for name, sd in payload["modules"].items():
        mod = build_module(name, cfg)
        expected = {n: list(t.shape) for n, t in mod.state_dict().items()}
        if expected != payload["shapes"][name] or {n: list(t.shape) for n, t in sd.items()} != expected:
            raise ShapeMismatch(f"{path}: parameter shapes of {name!r} do not match the config")
        mod = mod.to(next(iter(sd.values())).dtype)
        mod.load_state_dict(sd)
        built[name] = mod
    payload["config"] = cfg
    payload["modules"] = built
    return payload
