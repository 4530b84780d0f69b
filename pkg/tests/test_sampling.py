import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tm_diffuse import denoiser as dn
from tm_diffuse.diffusion import cosine_schedule
from tm_diffuse.errors import ValidationError
from tm_diffuse.sampling import (
    FixedTargetDenoiser,
    GuidanceConfig,
    assemble_series,
    em_refine,
    replace_known,
    sample_completion,
    sample_tomography,
    sample_unconditional,
)

S100 = cosine_schedule(100)
SMALL = dn.DenoiserConfig(flow_count=6, window_len=4, diffusion_steps=30, model_dim=16,
                          heads=2, encoder_blocks=1, decoder_blocks=1, ff_dim=32)


@pytest.fixture(scope="module")
def tiny_model():
    torch.manual_seed(0)
    return dn.TransformerDenoiser(SMALL).eval()


class CountingDenoiser(FixedTargetDenoiser):
    def __init__(self, target):
        super().__init__(target)
        self.calls = 0

    def __call__(self, x_t, t):
        self.calls += 1
        return super().__call__(x_t, t)


# ---------------------------------------------------------------- config


def test_timesteps_and_validation():
    assert GuidanceConfig(ddim_stride=3).timesteps(300)[:3] == [300, 297, 294]
    assert len(GuidanceConfig(ddim_stride=3).timesteps(300)) == 100
    assert GuidanceConfig(ddim_stride=7).timesteps(20) == [20, 13, 6]
    with pytest.raises(ValidationError):
        GuidanceConfig(ddim_stride=3, steps_used=50).timesteps(300)
    with pytest.raises(ValidationError):
        GuidanceConfig(rho_fixed=-1)
    with pytest.raises(ValidationError):
        GuidanceConfig(rho_mode="schedule")


def test_scheduled_rho():
    cfg = GuidanceConfig(rho_mode="schedule", sigma_z=0.5)
    a = S100.alpha[40]
    assert cfg.rho(40, S100) == pytest.approx((1 - a) / (math.sqrt(a) * 0.25), rel=1e-12)


# --------------------------------------------------------------- oracle runs


def test_oracle_unconditional_reaches_target():
    x_star = np.random.default_rng(0).random((5, 3))
    out = sample_unconditional(FixedTargetDenoiser(x_star), S100, 4, (5, 3), GuidanceConfig())
    assert np.max(np.abs(out - x_star)) < 1e-3


def test_strided_sampling_call_count():
    S300 = cosine_schedule(300)
    x_star = np.full((2, 2), 0.4)
    m = CountingDenoiser(x_star)
    out = sample_unconditional(m, S300, 1, (2, 2), GuidanceConfig(ddim_stride=3))
    assert m.calls == 100
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out[0], x_star, atol=1e-12)


def test_oracle_completion_reproduces_observed_entries():
    rng = np.random.default_rng(1)
    x_star = rng.random((5, 4))
    M = (rng.random((5, 4)) < 0.5).astype(float)
    X_obs = x_star * M
    out = sample_completion(FixedTargetDenoiser(x_star), S100, X_obs, M, GuidanceConfig())
    assert np.array_equal(out[M > 0], x_star[M > 0])
    assert np.max(np.abs(out - x_star)) < 1e-3


def test_completion_with_full_mask_returns_input(tiny_model):
    X = np.random.default_rng(2).random((6, 4))
    out = sample_completion(tiny_model, cosine_schedule(30), X, np.ones_like(X),
                            GuidanceConfig())
    assert np.array_equal(out, X)


def test_empty_mask_completion_is_unconditional(tiny_model):
    s = cosine_schedule(30)
    cfg = GuidanceConfig(seed=5)
    zero = np.zeros((3, 6, 4))
    a = sample_completion(tiny_model, s, zero, zero, cfg)
    b = sample_unconditional(tiny_model, s, 3, (6, 4), cfg)
    assert np.array_equal(a, b)


def test_guidance_off_tomography_matches_unconditional(tiny_model):
    s = cosine_schedule(30)
    A = np.random.default_rng(3).random((4, 6))
    Y = np.random.default_rng(4).random((2, 4, 4))
    cfg = GuidanceConfig(rho_fixed=0.0, em_iters=0, seed=9)
    a = sample_tomography(tiny_model, s, A, Y, cfg)
    b = sample_unconditional(tiny_model, s, 2, (6, 4), cfg)
    assert np.array_equal(a, b)


def test_window_streams_are_independent_of_batching(tiny_model):
    s = cosine_schedule(30)
    A = np.random.default_rng(3).random((4, 6))
    Y = np.random.default_rng(4).random((4, 4, 4))
    whole = sample_tomography(tiny_model, s, A, Y, GuidanceConfig(seed=11))
    head = sample_tomography(tiny_model, s, A, Y[:2], GuidanceConfig(seed=11))
    tail = sample_tomography(tiny_model, s, A, Y[2:], GuidanceConfig(seed=13))
    np.testing.assert_allclose(np.concatenate([head, tail]), whole, rtol=1e-6, atol=1e-9)
    again = sample_tomography(tiny_model, s, A, Y, GuidanceConfig(seed=11))
    assert np.array_equal(whole, again)


def test_guidance_reduces_link_residual(tiny_model):
    # an untrained model ignores y; guidance alone must pull predictions towards Ax = y
    s = cosine_schedule(30)
    rng = np.random.default_rng(6)
    A = (rng.random((5, 6)) < 0.5).astype(float)
    A[0] = 1
    y = A @ rng.random((6, 4))
    trace_off, trace_on = [], []
    sample_tomography(tiny_model, s, A, y, GuidanceConfig(rho_fixed=0.0, em_iters=0),
                      trace=trace_off)
    sample_tomography(tiny_model, s, A, y, GuidanceConfig(rho_fixed=0.05, em_iters=0),
                      trace=trace_on)
    assert len(trace_on) == 30
    assert trace_on[-1] < trace_off[-1]


def test_tomography_dimension_errors(tiny_model):
    with pytest.raises(ValidationError, match="3 links but loads have 4"):
        sample_tomography(tiny_model, cosine_schedule(30), np.ones((3, 6)), np.ones((4, 4)),
                          GuidanceConfig())
    with pytest.raises(ValidationError, match="7 flow columns"):
        sample_tomography(tiny_model, cosine_schedule(30), np.ones((3, 7)), np.ones((3, 4)),
                          GuidanceConfig())


# -------------------------------------------------------------- replacement


def test_replace_known_keeps_unobserved_and_final_step():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 3, 3))
    X = rng.random((1, 3, 3))
    M = np.zeros((1, 3, 3))
    M[0, 1] = 1
    out = replace_known(x, X, M, 10, S100, rng=np.random.default_rng(0))
    assert np.array_equal(out[M == 0], x[M == 0])
    eps = rng.standard_normal(x.shape)
    out = replace_known(x, X, M, 10, S100, eps=eps)
    ab = S100.alpha_bar[10]
    np.testing.assert_allclose(out[M > 0], (math.sqrt(ab) * X + math.sqrt(1 - ab) * eps)[M > 0])
    out0 = replace_known(x, X, M, 0, S100)
    assert np.array_equal(out0[M > 0], X[M > 0])


# ------------------------------------------------------------------- EM


def _kl(y, Ax):
    return float(np.sum(y * np.log(y / Ax) - y + Ax))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_em_decreases_poisson_divergence(seed):
    rng = np.random.default_rng(seed)
    A = rng.random((4, 8)) + 0.01
    y = A @ (rng.random(8) + 0.01)
    x = rng.random(8) + 0.01
    prev = _kl(y, A @ x)
    for _ in range(30):
        x = em_refine(x, A, y, 1)
        cur = _kl(y, A @ x)
        assert cur <= prev + 1e-12
        prev = cur
    assert np.all(x >= 0)


def test_em_fixed_point_and_zero_column():
    rng = np.random.default_rng(8)
    A = rng.random((4, 8))
    A[:, 5] = 0
    x = rng.random(8)
    y = A @ x
    out = em_refine(x, A, y, 25)
    np.testing.assert_allclose(A @ out, y, rtol=1e-12)
    np.testing.assert_allclose(out, x, rtol=1e-12)
    assert out[5] == x[5]


def test_em_hand_step():
    A = np.array([[1.0, 1.0], [0.0, 1.0]])
    x = np.array([1.0, 1.0])
    y = np.array([4.0, 1.0])
    # x1 <- 1/1 * (4/2) = 2 ; x2 <- 1/2 * (4/2 + 1/1) = 1.5
    np.testing.assert_allclose(em_refine(x, A, y, 1), [2.0, 1.5], rtol=1e-15)


def test_em_rejects_negative_loads():
    with pytest.raises(ValidationError):
        em_refine(np.ones(2), np.eye(2), np.array([1.0, -1.0]), 3)


def test_em_matrix_columns_independent():
    rng = np.random.default_rng(9)
    A = rng.random((3, 5))
    X = rng.random((5, 4))
    Y = A @ rng.random((5, 4))
    out = em_refine(X, A, Y, 7)
    for k in range(4):
        np.testing.assert_allclose(out[:, k], em_refine(X[:, k], A, Y[:, k], 7), rtol=1e-13)


# --------------------------------------------------------------- assembly


def test_assemble_series_overlap_mean():
    w = np.stack([np.full((2, 3), 1.0), np.full((2, 3), 3.0)])
    out = assemble_series(w, [0, 2], 5)
    np.testing.assert_array_equal(out[0], [1, 1, 2, 3, 3])
    with pytest.raises(ValidationError, match="slot 3"):
        assemble_series(w, [0, 4], 7)
