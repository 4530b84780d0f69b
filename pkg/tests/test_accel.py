import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tm_diffuse import _accel

needs_numba = pytest.mark.skipif(not _accel.NUMBA_AVAILABLE, reason="numba not installed")


@needs_numba
@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9), st.integers(1, 4), st.integers(0, 30),
       st.integers(0, 2**31))
def test_em_paths_agree(L, N, T, iters, seed):
    rng = np.random.default_rng(seed)
    A = (rng.random((L, N)) < 0.6) * rng.random((L, N))
    X = rng.random((N, T))
    Y = rng.random((L, T)) * (rng.random((L, T)) < 0.9)
    a = _accel.em_refine(X, A, Y, iters, use_numba=False)
    b = _accel.em_refine(X, A, Y, iters, use_numba=True)
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-300)


@needs_numba
@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 10), st.booleans(),
       st.floats(1e-3, 10.0), st.integers(0, 2**31))
def test_kernel_sum_paths_agree(n, m, d, diag, gamma, seed):
    rng = np.random.default_rng(seed)
    X = rng.random((n, d))
    Y = X.copy() if diag else rng.random((m, d))
    a = _accel.gaussian_kernel_sum(X, Y, gamma, diag, use_numba=False)
    b = _accel.gaussian_kernel_sum(X, Y, gamma, diag, use_numba=True)
    assert a == pytest.approx(b, rel=1e-9, abs=1e-12)


def test_zero_prediction_links_are_neutral():
    A = np.array([[1.0, 0.0], [0.0, 1.0]])
    X = np.array([[0.0], [1.0]])
    Y = np.array([[0.0], [2.0]])
    for use in (False, True) if _accel.NUMBA_AVAILABLE else (False,):
        out = _accel.em_refine(X, A, Y, 3, use_numba=use)
        np.testing.assert_array_equal(out[:, 0], [0.0, 2.0])


@pytest.mark.parametrize("flag, expected", [("0", "False"), ("", "False"), ("1", "True")])
def test_env_flag_selects_path(flag, expected):
    env = dict(os.environ, TM_DIFFUSE_NUMBA=flag)
    code = "from tm_diffuse import _accel; print(_accel.USE_NUMBA)"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True)
    if expected == "True" and not _accel.NUMBA_AVAILABLE:
        expected = "False"
    assert out.stdout.strip() == expected
