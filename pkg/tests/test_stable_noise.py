import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from gatedwindow.stable_noise import (
    EstimationError, StableDomainError, StableParams, kappa_alpha, mcculloch_estimate, noise_floor,
    sample_sas,
)

# P(|X| > 10) for SaS(alpha=1.5, sigma=1), by Fourier inversion of exp(-|t|^1.5)
TAIL_10_ALPHA_15 = 0.01327961837789926


def sas_tail_by_inversion(alpha, x):
    """P(|X| > x) = 1 - (2/pi) int_0^inf sin(x t) exp(-t^alpha) / t dt."""
    head, _ = quad(lambda t: math.sin(x * t) * math.exp(-t ** alpha) / t, 0, 1, limit=200)
    tail, _ = quad(lambda t: math.exp(-t ** alpha) / t, 1, np.inf, weight="sin", wvar=x)
    return 1 - 2 / math.pi * (head + tail)


def test_params_validated():
    for bad in [dict(alpha=0.0, sigma=1), dict(alpha=2.1, sigma=1), dict(alpha=1.5, sigma=0),
                dict(alpha=1.5, sigma=1, location=math.inf)]:
        with pytest.raises(StableDomainError):
            StableParams(**bad)


def test_gaussian_case_variance():
    x = sample_sas(StableParams(2.0, 1 / math.sqrt(2)), 100_000, 11)
    se = math.sqrt(2 / x.size)  # standard error of a unit sample variance
    assert abs(x.var() - 1.0) < 3 * se


def test_median_tracks_location():
    x = sample_sas(StableParams(1.5, 1.0, 5.0), 100_000, 12)
    assert abs(np.median(x) - 5.0) < 0.05


def test_seed_determinism():
    p = StableParams(1.3, 2.0)
    assert np.array_equal(sample_sas(p, 500, 3), sample_sas(p, 500, 3))
    assert not np.array_equal(sample_sas(p, 500, 3), sample_sas(p, 500, 4))


def test_cauchy_branch_quartiles():
    x = sample_sas(StableParams(1.0, 1.0), 200_000, 13)
    q25, q75 = np.quantile(x, [0.25, 0.75])
    assert abs(q25 + 1) < 0.02 and abs(q75 - 1) < 0.02


def test_tail_matches_characteristic_function_inversion():
    assert sas_tail_by_inversion(1.5, 10.0) == pytest.approx(TAIL_10_ALPHA_15, rel=1e-8)
    x = sample_sas(StableParams(1.5, 1.0), 1_000_000, 14)
    emp = np.mean(np.abs(x) > 10)
    assert 1 / 1.3 < emp / TAIL_10_ALPHA_15 < 1.3


@pytest.mark.parametrize("alpha, sigma, a_tol, s_lo, s_hi", [
    (1.5, 1.0, 0.05, 0.95, 1.05),
    (1.2, 2.0, 0.07, 1.9, 2.1),
])
def test_mcculloch_round_trip(alpha, sigma, a_tol, s_lo, s_hi):
    fit = mcculloch_estimate(sample_sas(StableParams(alpha, sigma), 100_000, 15))
    assert abs(fit.alpha_hat - alpha) <= a_tol
    assert s_lo <= fit.sigma_hat <= s_hi
    assert fit.n_samples == 100_000


def test_mcculloch_normal_sample():
    fit = mcculloch_estimate(np.random.default_rng(16).standard_normal(100_000))
    assert fit.alpha_hat >= 1.95
    # standard normal is SaS(2, 1/sqrt 2)
    assert fit.sigma_hat == pytest.approx(1 / math.sqrt(2), rel=0.03)


def test_mcculloch_clamps_extreme_tails():
    x = sample_sas(StableParams(0.4, 1.0), 20_000, 17)
    fit = mcculloch_estimate(x)
    assert fit.clamped and fit.alpha_hat == 0.5


def test_mcculloch_errors():
    with pytest.raises(EstimationError):
        mcculloch_estimate(np.zeros(50))
    with pytest.raises(EstimationError):
        mcculloch_estimate(np.ones(1000))


@settings(max_examples=30, deadline=None)
@given(shift=st.floats(-1e3, 1e3), scale=st.floats(0.01, 100))
def test_mcculloch_affine_equivariance(shift, scale):
    x = sample_sas(StableParams(1.6, 1.0), 2000, 18)
    a = mcculloch_estimate(x)
    b = mcculloch_estimate(scale * x + shift)
    assert b.alpha_hat == pytest.approx(a.alpha_hat, abs=1e-6)
    assert b.sigma_hat == pytest.approx(scale * a.sigma_hat, rel=1e-6)


def test_kappa():
    assert kappa_alpha(2.0) == 2.0
    assert kappa_alpha(1.5) == pytest.approx(3.0)
    for bad in (1.0, 0.7, 2.5):
        with pytest.raises(StableDomainError):
            kappa_alpha(bad)


def test_noise_floor_closed_form():
    assert noise_floor(1.0, 2.0, 100) == pytest.approx(0.1)
    assert noise_floor(2.0, 1.5, 1000) == pytest.approx(2.0 * 1000 ** (-1 / 3))
    with pytest.raises(StableDomainError):
        noise_floor(1.0, 1.0, 10)
