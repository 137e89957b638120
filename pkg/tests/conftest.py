import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

torch.set_num_threads(1)


def random_rotations(rng, n):
    """Uniform random rotations via QR of Gaussian matrices (independent of the package)."""
    q, r = np.linalg.qr(rng.standard_normal((n, 3, 3)))
    q = q * np.sign(np.diagonal(r, axis1=-2, axis2=-1))[:, None, :]
    det = np.linalg.det(q)
    q[det < 0, :, 0] *= -1
    return q


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def identity_frames(n):
    data = np.zeros((n, 135))
    data[:, :132] = np.tile([1.0, 0, 0, 0, 1, 0], 22)
    return data


def tiny_model(seed=0, branches=("interaction", "cospeech"), gate=0.5, d_model=16, T=10, dtype=torch.float64):
    """Small randomly initialised model with open gates, for sampling tests."""
    from adaptmotion.denoiser import AdaptationBranch, DenoiserConfig, MotionDenoiser
    from adaptmotion.diffusion import MotionModel
    from adaptmotion.geometry import bps_generate
    from adaptmotion.pose import NormStats, Skeleton

    cfg = DenoiserConfig(d_model=d_model, n_heads=2, n_bps=32, inter_hidden=16, T=T)
    torch.manual_seed(seed)
    mdm = MotionDenoiser(cfg).to(dtype).eval()
    brs = {}
    for k in branches:
        br = AdaptationBranch(k, cfg).to(dtype).eval()
        with torch.no_grad():
            br.gates.fill_(gate)
        brs[k] = br
    std = np.full(135, 0.2)
    std[132:] = 0.02
    stats = NormStats(identity_frames(1)[0], std)
    return MotionModel(mdm, stats, brs, Skeleton(), bps_generate(0, cfg.n_bps), 20.0)


# one PASS/FAIL line per acceptance criterion, echoed again in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
