import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from panel_fegmm import _kernels_py, kernels


def naive_window(u, ell, two_sided):
    T = u.shape[0]
    out = np.zeros_like(u)
    for t in range(T):
        for j in range(-ell if two_sided else 0, ell + 1):
            if 0 <= t - j < T:
                out[t] += u[t - j]
    return out


def naive_geometric(x, rho, nterms, start, forward):
    L = x.shape[-1]
    span = start + nterms - 1
    out = np.zeros(x.shape[:-1] + (L - span,))
    for k in range(L - span):
        t = k if forward else k + span
        for s in range(start, start + nterms):
            out[..., k] += rho ** s * x[..., t + s if forward else t - s]
    return out


BACKENDS = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])

finite = st.floats(-1e3, 1e3, allow_nan=False)


@pytest.mark.parametrize("backend", BACKENDS)
@settings(max_examples=60, deadline=None)
@given(u=arrays(np.float64, st.tuples(st.integers(1, 30), st.integers(1, 4)), elements=finite),
       ell=st.integers(0, 6), two_sided=st.booleans())
def test_window_sum_matches_loops(backend, u, ell, two_sided):
    got = kernels.window_sum(u, ell, two_sided, backend=backend)
    np.testing.assert_allclose(got, naive_window(u, ell, two_sided), rtol=1e-12, atol=1e-9)


@pytest.mark.parametrize("backend", BACKENDS)
def test_window_sum_batch_matches_single(backend, rng):
    u = rng.normal(size=(5, 40, 3))
    got = kernels.window_sum_batch(u, 3, True, backend=backend)
    for i in range(5):
        np.testing.assert_allclose(got[i], naive_window(u[i], 3, True), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("forward,start", [(True, 1), (False, 0), (True, 0), (False, 2)])
def test_geometric_filter_matches_loops(backend, forward, start, rng):
    x = rng.normal(size=(4, 90))
    got = kernels.geometric_filter(x, 0.6, 12, start, forward, backend=backend)
    np.testing.assert_allclose(got, naive_geometric(x, 0.6, 12, start, forward), rtol=1e-12, atol=1e-12)


def test_backends_agree_on_large_input(rng):
    if kernels.BACKEND != "cython":
        pytest.skip("compiled kernels not built")
    u = rng.normal(size=(51, 23, 7))
    np.testing.assert_allclose(kernels.window_sum_batch(u, 2, False, "cython"),
                               _kernels_py.window_sum_batch(u, 2, False), rtol=1e-13, atol=1e-13)
    x = rng.normal(size=(51, 100))
    np.testing.assert_allclose(kernels.geometric_filter(x, 0.31, 36, 1, True, "cython"),
                               _kernels_py.geometric_filter(x, 0.31, 36, 1, True), rtol=1e-13, atol=1e-13)


def test_window_with_zero_lag_is_identity(rng):
    u = rng.normal(size=(10, 2))
    np.testing.assert_allclose(kernels.window_sum(u, 0), u, rtol=0, atol=1e-14)


def test_negative_lag_rejected():
    with pytest.raises(ValueError):
        kernels.window_sum(np.ones((3, 1)), -1)


def test_geometric_filter_rejects_short_series():
    with pytest.raises(ValueError):
        _kernels_py.geometric_filter(np.ones((1, 5)), 0.5, 10, 0, True)
