"""Acceptance suite. Every check prints a single PASS/FAIL line and the same
lines are repeated in the pytest terminal summary."""
import json
import math
import time

import numpy as np
import pytest
import torch
from torch import nn
from torch.func import functional_call, vmap

import conftest
import nn_oracle as O
from adaptmotion.denoiser import AdaptationBranch, DenoiserConfig, MotionDenoiser, adapted_forward, mdm_forward
from adaptmotion.diffusion import (FusionState, NoiseSchedule, adaptive_fusion_update, fusion_gradients,
                                   fusion_losses, guided_prediction, make_schedule, normalize_cospeech_residual,
                                   p_sample_step, q_sample)
from adaptmotion.geometry import (BodyProxy, Box, ObjectGeometry, Sphere, bps_generate, bps_object_features, fit_bps,
                                  penetration_ratio, sdf)
from adaptmotion.harness.corpus import generate_corpus
from adaptmotion.harness.evaluate import branch_comparison, held_out_set
from adaptmotion.harness.train import TrainConfig, load_model, read_log, smoothed_ratio, train_stage
from adaptmotion.metrics import GaussianFit, beat_consistency_times, diversity, fit_gaussian, frechet_gesture_distance
from adaptmotion.pose import MotionClip, Skeleton, matrix_to_rot6d, rot6d_to_matrix
from conftest import identity_frames, random_rotations

D64 = torch.float64


def report(n: int, name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} {n}: {name} | {detail}"
    conftest.ACCEPTANCE.append(line)
    print(line)
    assert ok, line


# 1 ------------------------------------------------------------------------------------

def test_rotation_suite():
    rng = np.random.default_rng(0)
    r6 = torch.as_tensor(rng.standard_normal((10_000, 6)))
    mats = random_rotations(rng, 10_000)
    t0 = time.perf_counter()
    R = rot6d_to_matrix(r6).numpy()
    back = rot6d_to_matrix(matrix_to_rot6d(mats)).numpy()
    elapsed = time.perf_counter() - t0
    ortho = np.abs(np.einsum("nji,njk->nik", R, R) - np.eye(3)).max()
    det = np.abs(np.linalg.det(R) - 1).max()
    trip = np.abs(back - mats).max()
    ok = ortho <= 1e-9 and det <= 1e-9 and trip <= 1e-9 and elapsed < 1.0
    report(1, "rotation suite", ok, f"orth {ortho:.1e} det {det:.1e} round-trip {trip:.1e} time {elapsed:.3f}s")


# 2 ------------------------------------------------------------------------------------

def _randomized(module, seed, scale=0.4):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return module


def test_adaptation_recurrence_fidelity():
    cfg = DenoiserConfig(d_model=8, n_heads=2, d_cond=16, d_time=8, T=10, n_bps=8, inter_hidden=8)
    mdm = _randomized(MotionDenoiser(cfg).double(), 0)
    br = _randomized(AdaptationBranch("cospeech", cfg).double(), 1)
    g = torch.Generator().manual_seed(2)
    x = torch.randn(1, 4, 135, generator=g, dtype=D64)
    prompt = torch.randn(1, 16, generator=g, dtype=D64)
    goal = torch.randn(1, 5, generator=g, dtype=D64)
    cond = {"audio": torch.randn(1, 4, 17, generator=g, dtype=D64),
            "text": torch.randn(1, 4, 16, generator=g, dtype=D64)}
    out = adapted_forward(x, 4, prompt, mdm, br, cond, goal).detach().numpy()[0]
    c0 = O.speech_encode(br, cond["audio"][0].numpy(), cond["text"][0].numpy())
    ref = O.adapted_forward(mdm, br, x[0].numpy(), 4, prompt[0].numpy(), c0, goal[0].numpy())
    err = np.abs(out - ref).max()
    base = mdm_forward(x, 4, prompt, mdm, goal)
    with torch.no_grad():
        br.gates.zero_()
    zero_gate = torch.equal(adapted_forward(x, 4, prompt, mdm, br, cond, goal), base)
    zero_cond = torch.equal(adapted_forward(x, 4, prompt, mdm, br, {k: torch.zeros_like(v) for k, v in cond.items()},
                                            goal), base)
    report(2, "adaptation recurrence fidelity", err <= 1e-9 and zero_gate and zero_cond,
           f"oracle err {err:.1e}, zero-gate exact {zero_gate}, zero-gate zero-cond exact {zero_cond}")


# 3 ------------------------------------------------------------------------------------

class _AllModules(nn.Module):
    def __init__(self, cfg, fixture):
        super().__init__()
        self.mdm = MotionDenoiser(cfg)
        self.interaction = AdaptationBranch("interaction", cfg)
        self.cospeech = AdaptationBranch("cospeech", cfg)
        self.fx = fixture

    def forward(self):
        f = self.fx
        return ((f["w0"] * mdm_forward(f["x"], 3, f["prompt"], self.mdm, f["goal"])).sum()
                + (f["w1"] * adapted_forward(f["x"], 3, f["prompt"], self.mdm, self.interaction, f["ci"], f["goal"])).sum()
                + (f["w2"] * adapted_forward(f["x"], 3, f["prompt"], self.mdm, self.cospeech, f["cs"], f["goal"])).sum())


def test_gradient_suite():
    N = 4
    cfg = DenoiserConfig(d_model=8, n_heads=2, d_time=8, n_bps=8, inter_hidden=8)
    g = torch.Generator().manual_seed(0)

    def r(*s):
        return torch.randn(*s, generator=g, dtype=D64)

    fx = {"x": r(1, N, 135), "prompt": r(1, cfg.d_cond), "goal": r(1, 5), "w0": r(1, N, 135), "w1": r(1, N, 135),
          "w2": r(1, N, 135), "ci": {"joints": r(1, N, 22, 3), "bps_points": r(1, 8, 3), "obj_feats": r(1, 8).abs()},
          "cs": {"audio": r(1, N, 17), "text": r(1, N, 16)}}
    model = _randomized(_AllModules(cfg, fx).double(), 1, 0.3)
    t0 = time.perf_counter()
    names = [k for k, _ in model.named_parameters()]
    analytic = torch.autograd.grad(model(), list(model.parameters()))
    params = {k: v.detach() for k, v in model.named_parameters()}
    h, worst, count = 1e-4, 0.0, 0
    for name, an in zip(names, analytic):
        P = params[name]
        n = P.numel()
        count += n
        # every coordinate perturbed on its own; vmap batches the forward passes
        steps = (torch.eye(n, dtype=D64) * h).reshape(n, *P.shape)

        def f(d, name=name, P=P):
            return functional_call(model, {**params, name: P + d}, ())

        up = torch.cat([vmap(f)(e) for e in steps.split(256)])
        dn = torch.cat([vmap(f)(-e) for e in steps.split(256)])
        fd = ((up - dn) / (2 * h)).reshape(P.shape)
        rel = float((fd - an).norm()) / max(float(fd.norm() + an.norm()), 1e-10)
        worst = max(worst, rel)
    elapsed = time.perf_counter() - t0
    report(3, "gradient suite", worst <= 1e-4 and elapsed < 120,
           f"{count} parameters in {len(names)} tensors, worst rel err {worst:.1e}, time {elapsed:.1f}s")


# 4 ------------------------------------------------------------------------------------

def test_guidance_algebra():
    g = torch.Generator().manual_seed(0)
    worst = 0.0
    for _ in range(200):
        xu, r1, r2 = (torch.randn(2, 8, 135, generator=g, dtype=D64) for _ in range(3))
        a, b = (float(v) for v in torch.rand(2, generator=g) * 6 - 3)
        sup = (guided_prediction(xu, [r1 + r2], [a]) - xu) - (guided_prediction(xu, [r1], [a]) - xu) \
            - (guided_prediction(xu, [r2], [a]) - xu)
        lin = (guided_prediction(xu, [r1], [a + b]) - xu) - (guided_prediction(xu, [r1], [a]) - xu) \
            - (guided_prediction(xu, [r1], [b]) - xu)
        two = guided_prediction(xu, [r1, r2], [a, b]) - (xu + a * r1 + b * r2)
        zero = guided_prediction(xu, [r1, r2], [0.0, 0.0]) - xu
        one = guided_prediction(xu, [r1], [1.0]) - (xu + r1)
        worst = max(worst, *(float(t.abs().max()) for t in (sup, lin, two, zero, one)))
    report(4, "guidance algebra", worst <= 1e-12, f"worst identity residual {worst:.1e}")


# 5 ------------------------------------------------------------------------------------

def _fusion_fixture(rng):
    xu, ai, ac = (torch.as_tensor(rng.standard_normal((1, 4, 9))) for _ in range(3))
    ri = ai - xu
    rc = normalize_cospeech_residual(ac - xu, ri)
    lam = {"interaction": torch.as_tensor(rng.uniform(0, 3, 1)), "cospeech": torch.as_tensor(rng.uniform(0, 3, 1))}
    return xu, {"interaction": ai, "cospeech": ac}, {"interaction": ri, "cospeech": rc}, lam


def _fused(xu, res, lam):
    return guided_prediction(xu, [res["interaction"], res["cospeech"]], [lam["interaction"], lam["cospeech"]])


def test_adaptive_fusion():
    rng = np.random.default_rng(0)
    grad_err, increases = 0.0, 0
    for _ in range(1000):
        xu, anc, res, lam = _fusion_fixture(rng)
        x = _fused(xu, res, lam)
        grads = fusion_gradients(x, anc, res)
        before = fusion_losses(x, anc)
        bound = min(1.0 / (2 * float((r ** 2).sum())) for r in res.values())
        eta = float(rng.uniform(0.01, 0.99)) * bound
        new = adaptive_fusion_update(x, anc, res, FusionState(lam, eta, (-1e9, 1e9), "raw"))
        h = 1e-5
        for k in anc:
            up, dn = dict(lam), dict(lam)
            up[k], dn[k] = lam[k] + h, lam[k] - h
            fd = (fusion_losses(_fused(xu, res, up), anc)[k] - fusion_losses(_fused(xu, res, dn), anc)[k]) / (2 * h)
            grad_err = max(grad_err, abs(float(fd - grads[k])) / max(1.0, abs(float(grads[k]))))
            moved = dict(lam)
            moved[k] = new.lambdas[k]
            after = float(fusion_losses(_fused(xu, res, moved), anc)[k])
            increases += after > float(before[k]) * (1 + 1e-12)
    report(5, "adaptive fusion", grad_err <= 1e-8 and increases == 0,
           f"dL/dlambda vs FD worst {grad_err:.1e}, loss increases {increases}/2000")


# 6 ------------------------------------------------------------------------------------

def test_diffusion_suite():
    g = torch.Generator().manual_seed(0)
    x0, eps = torch.randn(2, 16, 135, generator=g, dtype=D64), torch.randn(2, 16, 135, generator=g, dtype=D64)
    start = torch.equal(q_sample(x0, 0, eps, NoiseSchedule(np.zeros(4))), x0)
    end = torch.equal(q_sample(x0, 0, eps, NoiseSchedule(np.ones(1))), eps)
    s = make_schedule(50)
    x = torch.randn(2, 16, 135, generator=g, dtype=D64)
    for t in reversed(range(50)):
        x = p_sample_step(x, t, x0, s, None)
    err = float((x - x0).abs().max())
    report(6, "diffusion suite", start and end and err <= 1e-6,
           f"endpoints exact {start and end}, oracle recovery err {err:.1e} (T=50)")


# 7 ------------------------------------------------------------------------------------

def test_geometry_suite():
    box = ObjectGeometry((Box((0, 0, 0), (1.0, 0.5, 0.25)),))
    cases = [((0, 0, 0), -0.25), ((2, 0, 0), 1.0), ((0, 0.5, 0), 0.0), ((2, 1.5, 0), math.sqrt(2)),
             ((1.3, 0.9, 0.25), 0.5)]
    sdf_ok = all(sdf(box, p) == pytest.approx(v, abs=1e-15) for p, v in cases)
    ball = ObjectGeometry((Sphere((1, 2, 3), 0.5),))
    sdf_ok &= sdf(ball, (1, 2, 3)) == -0.5 and sdf(ball, (1, 2, 5)) == 1.5

    rng = np.random.default_rng(0)
    b = Box((0.2, -0.1, 0.4), (0.35, 0.2, 0.3))
    obj = ObjectGeometry((b,))
    bps = fit_bps(bps_generate(0, 256), obj)
    n = 100_000
    he = b.half_extents
    areas = np.array([he[1] * he[2]] * 2 + [he[0] * he[2]] * 2 + [he[0] * he[1]] * 2)
    face = rng.choice(6, n, p=areas / areas.sum())
    pts = rng.uniform(-1, 1, (n, 3)) * he
    axis = face // 2
    pts[np.arange(n), axis] = np.where(face % 2 == 0, -1.0, 1.0) * he[axis]
    pts += b.center
    resolution = math.sqrt(4 * areas.sum() / n)
    brute = torch.cdist(torch.as_tensor(bps.points), torch.as_tensor(pts)).amin(1).numpy()
    bps_err = np.abs(bps_object_features(bps, obj) - brute).max()

    sk = Skeleton()
    clip = MotionClip(identity_frames(12), 20.0)
    pelvis = BodyProxy([0], [[0, 0, 0]], [0.1])
    far = penetration_ratio(clip, sk, pelvis, ObjectGeometry((Sphere((4, 4, 1), 0.5),)))
    inside = penetration_ratio(clip, sk, pelvis, ObjectGeometry((Box(sk.root_start, (0.3, 0.3, 0.3)),)))
    ok = sdf_ok and bps_err <= 2 * resolution and far == 0.0 and inside == 1.0
    report(7, "geometry suite", ok, f"sdf exact {sdf_ok}, bps err {bps_err:.2e} vs 2x resolution {2 * resolution:.2e}, "
                                    f"ratio far {far} inside {inside}")


# 8 ------------------------------------------------------------------------------------

def test_metric_suite():
    rng = np.random.default_rng(0)
    g = fit_gaussian(rng.standard_normal((50, 8)))
    ident = frechet_gesture_distance(g, g)
    one = GaussianFit(np.array([0.0]), np.array([[1.0]]))
    closed = max(abs(frechet_gesture_distance(one, GaussianFit(np.array([3.0]), np.array([[1.0]]))) - 9.0),
                 abs(frechet_gesture_distance(one, GaussianFit(np.array([1.0]), np.array([[9.0]]))) - 5.0))
    delta, sigma = 0.07, 0.1
    bc = abs(beat_consistency_times([2.0 + delta], [2.0, 3.5], sigma) - math.exp(-delta ** 2 / (2 * sigma ** 2)))
    f = rng.standard_normal((15, 5))
    brute = np.mean([np.linalg.norm(f[i] - f[j]) for i in range(15) for j in range(i + 1, 15)])
    div = diversity(f, n_pairs=10_000)
    ok = ident <= 1e-8 and closed <= 1e-9 and bc <= 1e-9 and div == pytest.approx(brute, abs=1e-12)
    report(8, "metric suite", ok, f"fgd self {ident:.1e}, 1-D closed forms {closed:.1e}, bc offset {bc:.1e}, "
                                  f"diversity {div:.6f} vs brute {brute:.6f}")


# 9 ------------------------------------------------------------------------------------

E2E = {
    "corpus_seed": 0,
    "held_out_seed": 123,
    "sample_seed": 1000,
    "stages": {
        "mdm": {"steps": 1500, "lr": 3e-4},
        "interaction": {"steps": 1000, "lr": 3e-4, "weights": {"w_collision": 100.0, "w_contact": 0.0}},
        "cospeech": {"steps": 1500, "lr": 1e-3},
    },
}


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    t0 = time.perf_counter()
    manifest = generate_corpus(root / "data", E2E["corpus_seed"])
    prev = None
    for stage, kw in E2E["stages"].items():
        assert kw["steps"] <= 2000
        ckpt = train_stage(TrainConfig(stage=stage, **kw), manifest, root / f"{stage}.pt", prev,
                           log_path=root / f"{stage}.tsv")
        prev = ckpt
    model = load_model(prev)
    res = branch_comparison(model, held_out_set(E2E["held_out_seed"]), seed=E2E["sample_seed"])
    res["elapsed"] = time.perf_counter() - t0
    res["stage1_ratio"] = smoothed_ratio([r["loss"] for r in read_log(root / "mdm.tsv")])
    (root / "summary.json").write_text(json.dumps({"mean": res["mean"], "elapsed": res["elapsed"]}, indent=1))
    return res


@pytest.mark.slow
def test_end_to_end_smoke(e2e):
    m = e2e["mean"]
    a = e2e["stage1_ratio"] <= 0.5
    b = (m["interaction"]["pen_ratio"] < m["uncond"]["pen_ratio"]
         and m["interaction"]["pos_err"] < m["uncond"]["pos_err"])
    c = m["cospeech"]["bc"] > m["cospeech_uncond"]["bc"]
    d = m["fused"]["pen_ratio"] < m["concat"]["pen_ratio"] and abs(m["fused"]["bc"] - m["cospeech"]["bc"]) <= 0.1
    t = e2e["elapsed"] <= 30 * 60
    detail = (f"(a) stage-1 smoothed loss ratio {e2e['stage1_ratio']:.3f} {'ok' if a else 'FAIL'}; "
              f"(b) pen {m['interaction']['pen_ratio']:.3f} vs uncond {m['uncond']['pen_ratio']:.3f}, "
              f"pos_err {m['interaction']['pos_err']:.3f} vs {m['uncond']['pos_err']:.3f} {'ok' if b else 'FAIL'}; "
              f"(c) bc {m['cospeech']['bc']:.3f} vs uncond {m['cospeech_uncond']['bc']:.3f} {'ok' if c else 'FAIL'}; "
              f"(d) fused pen {m['fused']['pen_ratio']:.3f} vs concat {m['concat']['pen_ratio']:.3f}, "
              f"fused bc {m['fused']['bc']:.3f} vs cospeech {m['cospeech']['bc']:.3f} {'ok' if d else 'FAIL'}; "
              f"time {e2e['elapsed']:.0f}s {'ok' if t else 'FAIL'}")
    report(9, "end-to-end smoke", a and b and c and d and t, detail)


# 10 -----------------------------------------------------------------------------------

def test_cli_determinism(tmp_path):
    from adaptmotion.harness.cli import main

    cfg = {"seed": 1, "corpus": {"n_clips": 16},
           "train": {"steps": 2, "batch": 2, "model": {"d_model": 8, "n_heads": 2, "n_bps": 16, "inter_hidden": 8,
                                                       "T": 6}},
           "metrics": {"T": 6, "n_pairs": 10},
           "sample": {"bundles": [{"prompt": "sit down while talking", "scene": {"seed": 2}, "speech": {"seed": 3}}]}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))

    def run(d):
        c = ["--config", str(path)]
        codes = [main(["gen-data", "--out-dir", str(d / "data")] + c)]
        prev = []
        for st in ("mdm", "interaction", "cospeech"):
            codes.append(main(["train", st, "--data", str(d / "data"), "--out-dir", str(d / "run")] + c + prev))
            prev = ["--checkpoint", str(d / "run" / f"{st}.pt")]
        ck = str(d / "run" / "cospeech.pt")
        codes.append(main(["sample", "--checkpoint", ck, "--out-dir", str(d / "s")] + c))
        codes.append(main(["evaluate", "--data", str(d / "data"), "--checkpoint", ck, "--out-dir", str(d / "e")] + c))
        sm = str(d / "s" / "sample_000.motion")
        codes.append(main(["concat-baseline", "--upper", sm, "--lower", sm, "--out-dir", str(d / "c")]))
        codes.append(main(["export", "--clip", sm, "--out-dir", str(d / "x")]))
        assert codes == [0] * len(codes)
        return {p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}

    a, b = run(tmp_path / "a"), run(tmp_path / "b")
    differing = [str(k) for k in a if a[k] != b.get(k)]
    ok = a.keys() == b.keys() and not differing
    report(10, "CLI determinism", ok, f"{len(a)} output files compared, differing: {differing or 'none'}")
