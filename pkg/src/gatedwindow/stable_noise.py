"""Symmetric alpha-stable sampling, quantile estimation and concentration arithmetic.

The SaS law used throughout has characteristic function
``exp(i*loc*t - sigma**alpha * |t|**alpha)``; at ``alpha == 2`` this is a
Gaussian with variance ``2 * sigma**2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class StableDomainError(ValueError):
    """Parameter outside the domain where a stable-law quantity is defined."""


class EstimationError(ValueError):
    """Sample cannot be fitted (too small or degenerate)."""


@dataclass(frozen=True)
class StableParams:
    alpha: float
    sigma: float
    location: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.alpha <= 2.0) or not math.isfinite(self.alpha):
            raise StableDomainError(f"alpha must lie in (0, 2], got {self.alpha}")
        if not (self.sigma > 0.0) or not math.isfinite(self.sigma):
            raise StableDomainError(f"sigma must be positive, got {self.sigma}")
        if not math.isfinite(self.location):
            raise StableDomainError(f"location must be finite, got {self.location}")


@dataclass(frozen=True)
class StableFit:
    alpha_hat: float
    sigma_hat: float
    n_samples: int
    clamped: bool


def sample_sas(params: StableParams, n: int, seed) -> np.ndarray:
    """Draw ``n`` i.i.d. SaS variates with the Chambers-Mallows-Stuck transform.

    ``seed`` is anything accepted by :func:`numpy.random.default_rng`.
    """
    if n < 1:
        raise StableDomainError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    a = params.alpha
    v = rng.uniform(-0.5 * np.pi, 0.5 * np.pi, size=n)
    w = rng.standard_exponential(size=n)
    if a == 2.0:
        x = 2.0 * np.sqrt(w) * np.sin(v)
    elif a == 1.0:
        x = np.tan(v)
    else:
        x = (np.sin(a * v) / np.cos(v) ** (1.0 / a)
             * (np.cos((1.0 - a) * v) / w) ** ((1.0 - a) / a))
    return params.location + params.sigma * x


# McCulloch (1986), symmetric column (beta = 0) of the alpha table, indexed
# by nu_alpha = (q95 - q05) / (q75 - q25).
_NU_ALPHA = np.array([2.439, 2.5, 2.6, 2.7, 2.8, 3.0, 3.2, 3.5, 4.0,
                      5.0, 6.0, 8.0, 10.0, 15.0, 25.0])
_ALPHA_OF_NU = np.array([2.000, 1.916, 1.808, 1.729, 1.664, 1.563, 1.484,
                         1.391, 1.279, 1.128, 1.029, 0.896, 0.818, 0.698,
                         0.593])

# Symmetric column of the scale table: nu_c = (q75 - q25) / sigma.
_ALPHA_GRID = np.array([0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4,
                        1.5, 1.6, 1.7, 1.8, 1.9, 2.0])
_NU_C = np.array([2.588, 2.337, 2.189, 2.098, 2.040, 2.000, 1.980, 1.965,
                  1.955, 1.946, 1.939, 1.933, 1.927, 1.921, 1.914, 1.908])

ALPHA_MIN = 0.5
ALPHA_MAX = 2.0


def _alpha_from_nu(nu: float) -> tuple[float, bool]:
    if nu < _NU_ALPHA[0]:
        return ALPHA_MAX, True
    if nu > _NU_ALPHA[-1]:
        # extrapolate along the last segment, then clamp
        slope = (_ALPHA_OF_NU[-1] - _ALPHA_OF_NU[-2]) / (_NU_ALPHA[-1] - _NU_ALPHA[-2])
        raw = _ALPHA_OF_NU[-1] + slope * (nu - _NU_ALPHA[-1])
        return max(ALPHA_MIN, float(raw)), True
    return float(np.interp(nu, _NU_ALPHA, _ALPHA_OF_NU)), False


def mcculloch_estimate(samples) -> StableFit:
    """Symmetric McCulloch quantile estimator of (alpha, sigma).

    Quantiles use linear interpolation of order statistics (numpy's default).
    ``clamped`` is set when the tail ratio falls outside the tabulated range.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 100:
        raise EstimationError(f"need at least 100 samples, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise EstimationError("samples contain non-finite values")
    q05, q25, q75, q95 = np.quantile(x, [0.05, 0.25, 0.75, 0.95])
    iqr = q75 - q25
    if not iqr > 0.0:
        raise EstimationError("zero interquartile range; sample is degenerate")
    nu = (q95 - q05) / iqr
    alpha_hat, clamped = _alpha_from_nu(nu)
    sigma_hat = iqr / float(np.interp(alpha_hat, _ALPHA_GRID, _NU_C))
    return StableFit(alpha_hat=alpha_hat, sigma_hat=float(sigma_hat),
                     n_samples=int(x.size), clamped=clamped)


def kappa_alpha(alpha: float) -> float:
    """Concentration exponent alpha / (alpha - 1); defined for alpha in (1, 2]."""
    if not (1.0 < alpha <= 2.0):
        raise StableDomainError(f"kappa_alpha needs alpha in (1, 2], got {alpha}")
    return alpha / (alpha - 1.0)


def noise_floor(sigma: float, alpha: float, n_sequences: int) -> float:
    """SaS scale of the mean of ``n_sequences`` i.i.d. SaS(0, sigma) terms."""
    kappa_alpha(alpha)
    if n_sequences < 1:
        raise StableDomainError(f"n_sequences must be >= 1, got {n_sequences}")
    return sigma * float(n_sequences) ** (1.0 / alpha - 1.0)
