import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panel_fegmm.errors import NumericError
from panel_fegmm.moments import (ModelDims, check_derivatives, finite_difference_suite, linear_rc_iv,
                                 sample_jacobians, sample_moment, variance_components)
from panel_fegmm.panel import IndividualBlock


def test_dims_invariants():
    assert ModelDims(5, 2, 2).order_condition
    assert not ModelDims(3, 2, 2).order_condition
    with pytest.raises(ValueError):
        ModelDims(1, 0, 2)
    with pytest.raises(ValueError):
        ModelDims(2, 0, 0)


def test_linear_moments_match_formula(rng):
    m = linear_rc_iv(2, 1, 3)
    z = rng.normal(size=(8, 7))
    theta, alpha = np.array([0.4]), np.array([1.0, -2.0])
    e = z[:, 0] - z[:, 1:3] @ alpha - z[:, 3] * theta[0]
    w = np.column_stack([z[:, 1:3], z[:, 4:]])
    np.testing.assert_allclose(m.g(z, theta, alpha), w * e[:, None], rtol=1e-14)
    assert m.dims == ModelDims(5, 1, 2)
    assert m.linear_in_alpha and m.linear_in_theta


def test_variance_components_moment(rng):
    m = variance_components()
    z = rng.normal(size=(6, 1))
    np.testing.assert_allclose(m.g(z, np.zeros(0), [0.3]), z - 0.3)
    assert m.G_theta(z, np.zeros(0), [0.3]).shape == (6, 1, 0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_linear_derivatives_against_finite_differences(seed):
    r = np.random.default_rng(seed)
    m = linear_rc_iv(2, 2, 3)
    errs = check_derivatives(m, r.normal(size=(5, 8)), r.normal(size=2), r.normal(size=2))
    assert max(errs.values()) < 1e-6


def test_exp_model_derivatives(exp_model, rng):
    # the nonlinear test model used as a bias oracle must itself be right
    for _ in range(10):
        errs = check_derivatives(exp_model, rng.normal(size=(6, 4)), rng.normal(size=1) * 0.5,
                                 rng.normal(size=1) * 0.5)
        assert max(errs.values()) < 1e-6


def test_finite_difference_suite_reproduces_analytic(exp_model, rng):
    fd = finite_difference_suite(exp_model)
    z, th, al = rng.normal(size=(5, 4)), np.array([0.3]), np.array([-0.2])
    np.testing.assert_allclose(fd.G_alpha(z, th, al), exp_model.G_alpha(z, th, al), rtol=1e-7, atol=1e-9)
    np.testing.assert_allclose(fd.G_alphaalpha(z, th, al), exp_model.G_alphaalpha(z, th, al),
                               rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(fd.G_thetaalpha(z, th, al), exp_model.G_thetaalpha(z, th, al),
                               rtol=1e-5, atol=1e-7)


def test_finite_difference_bare_callable_needs_dims():
    with pytest.raises(ValueError):
        finite_difference_suite(lambda z, t, a: z)
    m = finite_difference_suite(lambda z, t, a: z[:, :1] - a[0] * t[0], ModelDims(1, 1, 1))
    z = np.ones((3, 1))
    np.testing.assert_allclose(m.G_theta(z, [2.0], [3.0])[:, 0, 0], -3.0, rtol=1e-8)


def test_finite_difference_warns_on_nonfinite():
    m = finite_difference_suite(lambda z, t, a: np.log(z[:, :1] - a[0]), ModelDims(1, 0, 1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.warns(RuntimeWarning):
            m.G_alpha(np.zeros((2, 1)), np.zeros(0), [0.0])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_moment_names_individual_and_time():
    m = finite_difference_suite(lambda z, t, a: z[:, :1] / a[0], ModelDims(1, 0, 1))
    block = IndividualBlock("bad", [4, 7], [[1.0], [np.finfo(float).max]])
    with pytest.raises(NumericError) as exc:
        sample_moment(block, m, np.zeros(0), [1e-310])
    assert "bad" in str(exc.value) and "t=" in str(exc.value)


def test_sample_jacobians_are_time_averages(rng, linear_model):
    z = rng.normal(size=(7, 7))
    block = IndividualBlock("1", np.arange(7), z)
    Gt, Ga = sample_jacobians(block, linear_model, [0.1], [0.2, 0.3])
    np.testing.assert_allclose(Ga, linear_model.G_alpha(z, [0.1], [0.2, 0.3]).mean(axis=0))
    assert Gt.shape == (5, 1)
