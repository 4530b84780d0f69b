import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tm_diffuse import metrics
from tm_diffuse.errors import ValidationError


def _brute_mmd2(X, Y, sigma):
    X = [np.ravel(x) for x in X]
    Y = [np.ravel(y) for y in Y]

    def k(a, b):
        return math.exp(-sum((a - b) ** 2) / (2 * sigma * sigma))

    n, m = len(X), len(Y)
    xx = sum(k(X[i], X[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    yy = sum(k(Y[i], Y[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    xy = sum(k(a, b) for a in X for b in Y) / (n * m)
    return xx - 2 * xy + yy


def test_nmae_nrmse_hand_values():
    X = np.array([[1.0, 2.0, 3.0, 9.0]])
    Xh = np.array([[2.0, 2.0, 2.0, 9.0]])
    M = np.array([[0, 0, 0, 1]])
    assert abs(metrics.nmae(X, Xh, M) - 1 / 3) < 1e-12
    assert abs(metrics.nrmse(X, Xh, M) - math.sqrt(2) / math.sqrt(14)) < 1e-12
    assert metrics.nmae(X, X, M) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 1e3), st.integers(0, 2**31))
def test_nrmse_scale_invariant(c, seed):
    rng = np.random.default_rng(seed)
    X, Xh = rng.random((2, 4, 5)) + 0.1
    assert metrics.nrmse(c * X, c * Xh) == pytest.approx(metrics.nrmse(X, Xh), rel=1e-10)
    assert metrics.nmae(c * X, c * Xh) == pytest.approx(metrics.nmae(X, Xh), rel=1e-10)


def test_nmae_undefined_and_shape_errors():
    with pytest.raises(ValidationError):
        metrics.nmae(np.zeros((2, 2)), np.ones((2, 2)))
    with pytest.raises(ValidationError):
        metrics.nmae(np.ones((2, 2)), np.ones((2, 3)))
    with pytest.raises(ValidationError):
        metrics.nrmse(np.ones((2, 2)), np.ones((2, 2)), np.ones((2, 2)))


def test_tre_values_and_grouping():
    X = np.array([[1.0, 0.0, 2.0], [1.0, 0.0, 2.0]])
    Xh = np.array([[2.0, 1.0, 2.0], [1.0, 0.0, 0.0]])
    out = metrics.tre(X, Xh)
    assert out[0] == 0.5 and math.isnan(out[1]) and out[2] == 0.5
    rng = np.random.default_rng(0)
    X = rng.random((3, 672)) + 0.1
    Xh = X + rng.standard_normal(X.shape) * 0.01
    per = metrics.tre(X, Xh)
    grouped = metrics.tre(X, Xh, group=8)
    assert grouped.shape == (84,)
    np.testing.assert_allclose(grouped, per.reshape(84, 8).mean(axis=1), rtol=1e-12)


def test_mmd_zero_samples_case():
    z = np.zeros((2, 3))
    assert abs(metrics.mmd2(z, z)) < 1e-12
    assert abs(metrics.mmd2(z, z, bandwidth=0.7)) < 1e-12


@pytest.mark.parametrize("use_numba", [False, True])
def test_mmd_matches_brute_force(use_numba):
    rng = np.random.default_rng(1)
    X = rng.random((7, 2, 3))
    Y = rng.random((5, 2, 3)) + 0.3
    sigma = 0.8
    assert metrics.mmd2(X, Y, sigma, use_numba=use_numba) == pytest.approx(
        _brute_mmd2(X, Y, sigma), abs=1e-12)


def test_median_bandwidth_brute_force():
    rng = np.random.default_rng(2)
    X, Y = rng.random((4, 3)), rng.random((3, 3))
    Z = np.concatenate([X, Y])
    d = [np.linalg.norm(Z[i] - Z[j]) for i in range(7) for j in range(i + 1, 7)]
    assert metrics.median_bandwidth(X, Y) == pytest.approx(np.median(d), rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_mmd_symmetric(seed):
    rng = np.random.default_rng(seed)
    X, Y = rng.random((6, 4)), rng.random((9, 4))
    assert abs(metrics.mmd2(X, Y) - metrics.mmd2(Y, X)) < 1e-12


def test_mmd_same_distribution_near_zero():
    rng = np.random.default_rng(3)
    X, Y = rng.standard_normal((2, 500, 4))
    v = metrics.mmd2(X, Y)
    assert abs(v) < 0.01
    assert abs(v) < 3 * metrics.mmd2_permutation_std(X, Y, n_perm=20)


def test_mmd_separated_point_masses():
    X = np.zeros((10, 2))
    Y = np.full((12, 2), 100.0)
    assert metrics.mmd2(X, Y, bandwidth=1.0) > 1


def test_mmd_input_errors():
    with pytest.raises(ValidationError):
        metrics.mmd2(np.zeros((1, 2)), np.zeros((3, 2)))
    with pytest.raises(ValidationError):
        metrics.mmd2(np.zeros((3, 2)), np.zeros((3, 4)))


def test_evaluate_report_formats(tmp_path):
    X = np.array([[1.0, 2.0], [3.0, 4.0]])
    rep = metrics.evaluate(X, X, np.ones_like(X))
    assert math.isnan(rep.nmae)
    text = rep.to_text()
    assert "nmae=NA" in text and "observed=4" in text
    rep = metrics.evaluate(X, X)
    rep.write(tmp_path / "r.txt", tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("nmae,nrmse,tre_mean")
    assert lines[1].startswith("0.0,0.0,0.0")


def test_flat_samples_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    real, synth = rng.random((3, 2, 4)), rng.random((5, 2, 4))
    metrics.export_flat_samples(real, synth, tmp_path / "f.csv")
    r, s = metrics.read_flat_samples(tmp_path / "f.csv")
    np.testing.assert_array_equal(r, real.reshape(3, -1))
    np.testing.assert_array_equal(s, synth.reshape(5, -1))
    with pytest.raises(ValidationError, match="8 features"):
        metrics.export_flat_samples(real, rng.random((2, 3)), tmp_path / "g.csv")
