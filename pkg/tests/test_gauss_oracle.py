from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import integrate

from chaoslab.errors import ConstraintViolation, UsageError
from chaoslab.gauss_oracle import (
    conditioning_windows,
    heat_kernel_lp_constant,
    heat_kernel_lp_norm,
    heat_kernel_lp_norm_quad,
    window_integral,
    window_sweep,
)
from chaoslab.kernels import H1, ExponentPair, builtin, classify

DYADIC = [(0.0, 2.0**-k) for k in range(6, 0, -1)]


def test_normalisation_and_frozen_values():
    assert heat_kernel_lp_norm(1.0, 1.0, 3) == pytest.approx(1.0, rel=1e-15)
    assert heat_kernel_lp_norm(1.0, 2.0, 1) == pytest.approx((4 * math.pi) ** -0.25, rel=1e-14)
    assert heat_kernel_lp_norm(1.0, 2.0, 1) == pytest.approx(0.5311259660135985, rel=1e-12)
    assert heat_kernel_lp_norm(4.0, 2.0, 1) == pytest.approx(heat_kernel_lp_norm(1.0, 2.0, 1) / 4**0.25, rel=1e-14)


def test_constant_formula():
    p, d = 3.0, 2
    assert heat_kernel_lp_constant(p, d) == pytest.approx(
        (2 * math.pi) ** (-(d / 2) * (1 - 1 / p)) * p ** (-d / (2 * p)), rel=1e-15)


def test_domain_errors():
    with pytest.raises(ConstraintViolation):
        heat_kernel_lp_norm(0.0, 2.0, 1)
    with pytest.raises(ConstraintViolation):
        heat_kernel_lp_norm(1.0, 0.5, 1)


@pytest.mark.parametrize("p", [1.0, 2.5, 7.0])
def test_closed_form_matches_quadrature(p):
    for d in (1, 4):
        assert heat_kernel_lp_norm(0.3, p, d) == pytest.approx(heat_kernel_lp_norm_quad(0.3, p, d), rel=1e-8)


def test_zero_kernel_integral_is_zero():
    rep = window_integral(builtin("zero", {"d": 2}), 0.0, 0.5)
    assert rep.integral_value[0] == 0.0


def test_bounded_kernel_integral_is_c2_width():
    k = builtin("constant", {"c": 1.7, "d": 2})
    rep = window_integral(k, 0.2, 0.7, [0.3, -0.1])
    assert rep.integral_value[0] == pytest.approx(1.7**2 * 0.5, rel=1e-4)


def test_bounded_kernel_sweep_slope_one():
    rep = window_sweep(builtin("bounded-lipschitz"), DYADIC)
    assert rep.fitted_slope == pytest.approx(1.0, abs=1e-3)


def test_truncated_riesz_against_double_quadrature():
    # independent oracle: I = int_0^w int_{|z|<=1} |z|^{-2a} g_u(z) dz du in d = 1
    alpha, w = 0.25, 0.25
    k = builtin("riesz-truncated", {"alpha": alpha, "d": 1, "p": 3.0, "q": 8.0})

    def inner(u):
        f = lambda z: z ** (-2 * alpha) * math.exp(-z * z / (2 * u)) / math.sqrt(2 * math.pi * u)  # noqa: E731
        return 2 * integrate.quad(f, 0, 1, limit=200, points=[min(1.0, math.sqrt(u))])[0]

    ref = integrate.quad(inner, 0, w, limit=200)[0]
    got = window_integral(k, 0.0, w).integral_value[0]
    assert got == pytest.approx(ref, rel=5e-4)


def test_truncated_riesz_2d_frozen_value():
    k = builtin("riesz-truncated", {"alpha": 0.3, "d": 2})
    assert window_integral(k, 0.0, 0.5).integral_value[0] == pytest.approx(0.86246, rel=1e-3)


def test_monotone_in_window_width():
    k = builtin("riesz-truncated", {"alpha": 0.3, "d": 2})
    vals = [window_integral(k, 0.1, 0.1 + w, [0.2, 0.0]).integral_value[0] for w in (0.05, 0.1, 0.2, 0.4)]
    assert np.all(np.diff(vals) > 0)


def test_h1_kernels_obey_fitted_bound():
    k = builtin("riesz-truncated", {"alpha": 0.3, "d": 2, "p": 5.0, "q": 5.0})
    assert classify(k).verdict == H1
    rep = window_sweep(k, DYADIC, shifts=[[0.0, 0.0], [0.5, 0.0]])
    assert math.isfinite(rep.c0_estimate)
    assert np.all(rep.integral_value <= rep.bound() * (1 + 1e-12))
    assert len(rep.rows()) == 2 * len(DYADIC)


def test_sweep_argument_errors():
    k = builtin("constant")
    with pytest.raises(UsageError):
        window_sweep(k, DYADIC[:3])
    with pytest.raises(UsageError):
        window_sweep(k, [(0.0, 0.5), (0.1, 0.6), (0.2, 0.7), (0.3, 0.8)])
    with pytest.raises(UsageError):
        window_integral(k, 0.5, 0.5)


def test_conditioning_windows_values():
    ex = ExponentPair(8.0, 8.0, 1)  # e = 0.625
    growth, _, _ = conditioning_windows(1.0, 1.0, 1.0, ex, 1.0)
    assert growth == pytest.approx(1.0)
    growth, _, _ = conditioning_windows(2.0, 2.0, 1.0, ex, 1.0)
    assert growth == pytest.approx(math.pow(2.0, -3.2), rel=1e-14)
    assert growth == pytest.approx(0.10881882041201557, rel=1e-12)
    _, delta, n = conditioning_windows(1.0, 1.0, 1.0, ex, 1.0)
    assert (delta, n) == (0.5, 2)


def test_conditioning_windows_rejects_bad_exponent():
    with pytest.raises(ConstraintViolation):
        conditioning_windows(1.0, 1.0, 1.0, ExponentPair(3.0, 4.0, 3), 1.0)
