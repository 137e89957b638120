import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from adaptmotion.encoders import (LOG_FLOOR, N_BANDS, ConditionBundle, GoalEncoder, GoalSpec, InteractionEncoder,
                                  SpeechEncoder, SpeechInput, audio_features, band_energies, goal_embed,
                                  goal_features, goal_from_features, interaction_encode, load_speech,
                                  mel_band_edges, prompt_embed, save_transcript, save_wav, speech_content_encode,
                                  text_features, wrap_angle)
from adaptmotion.errors import BadTiming, EmptyAudio, EmptyPrompt, LengthMismatch, MissingObject
from adaptmotion.geometry import Box, ObjectGeometry, bps_generate, bps_object_features, fit_bps

SR = 16000
FPS = 20.0


# --- prompt ----------------------------------------------------------------------

def test_prompt_embedding_basics():
    a = prompt_embed("a person sits down")
    assert np.array_equal(a, prompt_embed("a person sits down"))
    assert a.shape == (64,)
    assert abs(np.linalg.norm(a) - 1) < 1e-9
    b = prompt_embed("a person walks")
    assert float(a @ b) < 1 - 1e-6
    with pytest.raises(EmptyPrompt):
        prompt_embed("   ")
    with pytest.raises(EmptyPrompt):
        ConditionBundle("")


# --- goal --------------------------------------------------------------------------

def test_goal_heading_periodic():
    enc = GoalEncoder().double()
    a = goal_embed(GoalSpec((1, 2), 0.5, math.pi), enc)
    b = goal_embed(GoalSpec((1, 2), 0.5, -math.pi), enc)
    assert torch.allclose(a, b, atol=1e-15)
    assert GoalSpec((0, 0), 0, -math.pi).heading == pytest.approx(math.pi)


def test_zero_goal_is_bias():
    enc = GoalEncoder().double()
    z = torch.as_tensor([0.0, 0, 0, 0, 0], dtype=torch.float64)
    assert torch.equal(enc(z), enc.proj.bias)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 2), st.floats(-math.pi + 1e-6, math.pi))
def test_goal_feature_round_trip(x, y, h, th):
    g = goal_from_features(goal_features(GoalSpec((x, y), h, th)))
    assert np.allclose(g.position, [x, y], atol=1e-12)
    assert g.height == pytest.approx(h, abs=1e-12)
    assert abs(wrap_angle(g.heading - th)) < 1e-9


@given(st.floats(-50, 50))
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.cos(w) == pytest.approx(math.cos(a), abs=1e-9)


# --- audio -------------------------------------------------------------------------

def test_silence_at_floor():
    logE, rms = band_energies(SpeechInput(np.zeros(SR), SR), FPS)
    assert np.array_equal(logE, np.full_like(logE, math.log(LOG_FLOOR)))
    assert (rms == 0).all()


def test_tone_peaks_in_its_band():
    t = np.arange(SR) / SR
    logE, _ = band_energies(SpeechInput(np.sin(2 * np.pi * 440 * t), SR), FPS)
    edges = mel_band_edges(SR, N_BANDS)
    # oracle: the band whose triangle peaks closest to 440 Hz
    centers = edges[1:-1]
    expected = int(np.argmin(np.abs(centers - 440)))
    assert (logE[2:-2].argmax(axis=1) == expected).all()


def test_tone_band_by_direct_analysis():
    """Direct short-time FFT of one window gives the same argmax band."""
    t = np.arange(SR) / SR
    x = np.sin(2 * np.pi * 440 * t)
    win = int(round(2 * SR / FPS))
    k = 10
    seg = x[int(k * SR / FPS) - win // 2: int(k * SR / FPS) - win // 2 + win] * np.hanning(win)
    p = np.abs(np.fft.rfft(seg)) ** 2
    f = np.fft.rfftfreq(win, 1 / SR)
    edges = mel_band_edges(SR, N_BANDS)
    e = [(p * np.clip(np.minimum((f - edges[b]) / (edges[b + 1] - edges[b]),
                                 (edges[b + 2] - f) / (edges[b + 2] - edges[b + 1])), 0, None)).sum()
         for b in range(N_BANDS)]
    logE, _ = band_energies(SpeechInput(x, SR), FPS)
    assert int(np.argmax(e)) == int(logE[k].argmax())


@pytest.mark.parametrize("dur", [1.0, 1.01, 0.333])
def test_feature_length(dur):
    sp = SpeechInput(np.random.default_rng(0).standard_normal(int(round(dur * SR))), SR)
    assert audio_features(sp, FPS).shape == (math.ceil(round(dur * SR) / SR * FPS - 1e-9), N_BANDS + 1)
    assert audio_features(sp, FPS, n_frames=7).shape == (7, N_BANDS + 1)


def test_empty_audio():
    with pytest.raises(EmptyAudio):
        audio_features(SpeechInput(np.zeros(0), SR), FPS)


# --- text --------------------------------------------------------------------------

def test_text_features_cases():
    sp = SpeechInput(np.zeros(SR), SR, [])
    assert (text_features(sp, FPS) == 0).all()
    whole = text_features(SpeechInput(np.zeros(SR), SR, [("hello", 0.0, 1.0)]), FPS)
    assert (whole == whole[0]).all() and np.abs(whole[0]).sum() > 0
    two = text_features(SpeechInput(np.zeros(SR), SR, [("a", 0.0, 0.25), ("b", 0.5, 1.0)]), FPS)
    # frame k is at k/20 s: a on 0..4, gap on 5..9, b on 10..19
    assert (two[:5] == two[0]).all()
    assert (two[5:10] == 0).all()
    assert (two[10:] == two[10]).all() and not np.array_equal(two[0], two[10])


@pytest.mark.parametrize("tokens", [[("a", 0.5, 0.2)], [("a", -0.1, 0.2)], [("a", 0.0, 2.0)]])
def test_bad_timing(tokens):
    with pytest.raises(BadTiming):
        text_features(SpeechInput(np.zeros(SR), SR, tokens), FPS)


def test_speech_files_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    sp = SpeechInput(rng.uniform(-0.5, 0.5, SR // 2), SR, [("hi", 0.0, 0.2), ("there", 0.25, 0.5)])
    save_wav(tmp_path / "a.wav", sp)
    save_transcript(tmp_path / "a.tsv", sp.tokens)
    back = load_speech(tmp_path / "a.wav", tmp_path / "a.tsv")
    assert back.sample_rate == SR and back.tokens == sp.tokens
    assert np.abs(back.samples - sp.samples).max() < 1e-4
    save_wav(tmp_path / "f.wav", sp, float32=True)
    assert np.abs(load_speech(tmp_path / "f.wav").samples - sp.samples).max() < 1e-7


# --- speech content projection -------------------------------------------------------

def test_speech_encoder_linear_cases():
    enc = SpeechEncoder(8).double()
    rng = np.random.default_rng(0)
    a, t = rng.standard_normal((5, 17)), rng.standard_normal((5, 16))
    with torch.no_grad():
        enc.proj.weight.zero_()
        enc.proj.bias.zero_()
    assert (speech_content_encode(a, t, enc) == 0).all()
    with torch.no_grad():
        enc.proj.weight.copy_(torch.eye(8, 33, dtype=torch.float64))
    assert np.allclose(speech_content_encode(a, t, enc).detach().numpy(), a[:, :8], atol=0)
    with torch.no_grad():
        enc.proj.weight.normal_()
        enc.proj.bias.normal_()
    W, b = enc.proj.weight.detach().numpy(), enc.proj.bias.detach().numpy()
    oracle = np.concatenate([a, t], 1) @ W.T + b
    assert np.abs(speech_content_encode(a, t, enc).detach().numpy() - oracle).max() < 1e-9
    with pytest.raises(LengthMismatch):
        speech_content_encode(a, t[:4], enc)


# --- interaction ---------------------------------------------------------------------

def _object_and_bps():
    obj = ObjectGeometry((Box((1.0, 0.0, 0.3), (0.25, 0.25, 0.3)),))
    bps = fit_bps(bps_generate(0, 32), obj)
    return obj, bps


def test_interaction_encoder_zero_and_oracle():
    obj, bps = _object_and_bps()
    enc = InteractionEncoder(8, n_bps=32, hidden=16).double()
    rng = np.random.default_rng(1)
    joints = rng.standard_normal((6, 22, 3))
    of = bps_object_features(bps, obj)
    out = interaction_encode(joints, of, bps.points, enc).detach().numpy()
    # hand-composed oracle
    inter = np.array([[min(np.linalg.norm(p - j) for j in fr) for p in bps.points] for fr in joints])
    z = np.concatenate([np.tile(of, (6, 1)), inter], 1)
    W1, b1 = enc.fc1.weight.detach().numpy(), enc.fc1.bias.detach().numpy()
    W2, b2 = enc.fc2.weight.detach().numpy(), enc.fc2.bias.detach().numpy()
    h = z @ W1.T + b1
    h = h / (1 + np.exp(-h))
    assert np.abs(out - (h @ W2.T + b2)).max() < 1e-9
    for p in enc.parameters():
        with torch.no_grad():
            p.zero_()
    assert (interaction_encode(joints, of, bps.points, enc) == 0).all()
    with pytest.raises(MissingObject):
        interaction_encode(joints, None, None, enc)


def test_encoder_jacobians_match_fd():
    obj, bps = _object_and_bps()
    enc = InteractionEncoder(4, n_bps=32, hidden=8).double()
    of = torch.as_tensor(bps_object_features(bps, obj))
    joints = torch.tensor(np.random.default_rng(2).standard_normal((2, 22, 3)), requires_grad=True)
    assert torch.autograd.gradcheck(lambda j: interaction_encode(j, of, bps.points, enc), (joints,), atol=1e-5)
    senc = SpeechEncoder(4).double()
    a = torch.randn(3, 17, dtype=torch.float64, requires_grad=True)
    t = torch.randn(3, 16, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda x, y: senc(x, y), (a, t), atol=1e-5)


def test_bundle_branches():
    obj, _ = _object_and_bps()
    sp = SpeechInput(np.zeros(SR), SR)
    b = ConditionBundle("sit", GoalSpec((0, 0), 0.5, 0), obj, sp)
    assert b.active_branches == ("interaction", "cospeech")
    assert b.without("object").active_branches == ("cospeech",)
    assert b.without("speech", "object").active_branches == ()
    assert b.without("goal").goal is None
    assert np.array_equal(b.without("object").embedding, b.embedding)
