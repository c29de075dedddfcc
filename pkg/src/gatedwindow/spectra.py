"""Log-space envelope fits, regime classification, neuron time scales and CCDFs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cells import ContractError
from .transport import EffRateTensor, EnvelopeCurve

EXPONENTIAL = "exponential"
POWERLAW = "powerlaw"
ALGEBRAIC = "algebraic"
AMBIGUOUS = "ambiguous"

POSITIVE_FLOOR = 1e-12
REGIME_MARGIN = 0.03
MIN_POINTS = 3


class FitError(ValueError):
    """Too few usable points for a log-space fit."""


@dataclass(frozen=True)
class FitResult:
    model: str
    amplitude: float
    rate: float          # lambda for exponential, beta for powerlaw
    r_squared: float
    n_points: int
    n_excluded: int = 0
    zero_variance: bool = False

    def to_dict(self) -> dict:
        return {"model": self.model, "amplitude": self.amplitude, "rate": self.rate,
                "r_squared": self.r_squared, "n_points": self.n_points,
                "n_excluded": self.n_excluded, "zero_variance": self.zero_variance}


def _as_series(curve, values=None) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(curve, EnvelopeCurve):
        return curve.lag_grid.astype(float), np.asarray(curve.f_values, dtype=float)
    if values is None:
        raise ContractError("pass an EnvelopeCurve or (lags, values)")
    lags = np.asarray(curve, dtype=float)
    vals = np.asarray(values, dtype=float)
    if lags.shape != vals.shape or lags.ndim != 1:
        raise ContractError("lags and values must be equal-length 1-D arrays")
    return lags, vals


def _loglinear(x: np.ndarray, y: np.ndarray):
    A = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot <= 1e-24 * max(1.0, float(np.sum(y ** 2))):
        return float(slope), float(intercept), 1.0, True
    ss_res = float(np.sum((y - A @ np.array([slope, intercept])) ** 2))
    return float(slope), float(intercept), float(np.clip(1.0 - ss_res / ss_tot, 0.0, 1.0)), False


def _fit(model: str, curve, values):
    lags, vals = _as_series(curve, values)
    keep = vals > POSITIVE_FLOOR
    n = int(keep.sum())
    if n < MIN_POINTS:
        raise FitError(f"{model} fit needs >= {MIN_POINTS} positive points, got {n}")
    x = lags[keep] if model == EXPONENTIAL else np.log(lags[keep])
    slope, intercept, r2, flat = _loglinear(x, np.log(vals[keep]))
    return FitResult(model, float(np.exp(intercept)), -slope, r2, n, int(vals.size - n), flat)


def fit_exponential(curve, values=None) -> FitResult:
    """``f ~ C exp(-lam * l)`` by least squares of ``log f`` on ``l``."""
    return _fit(EXPONENTIAL, curve, values)


def fit_powerlaw(curve, values=None) -> FitResult:
    """``f ~ c l^-beta`` by least squares of ``log f`` on ``log l``."""
    lags, _ = _as_series(curve, values)
    if np.any(lags <= 0):
        raise FitError("power-law fit needs positive lags")
    return _fit(POWERLAW, curve, values)


@dataclass(frozen=True)
class RegimeClassification:
    label: str
    exponential: FitResult
    powerlaw: FitResult


def classify_regime(curve, values=None, margin: float = REGIME_MARGIN) -> RegimeClassification:
    fe = fit_exponential(curve, values)
    fp = fit_powerlaw(curve, values)
    gap = fe.r_squared - fp.r_squared
    if gap >= margin:
        label = EXPONENTIAL
    elif -gap >= margin:
        label = ALGEBRAIC
    else:
        label = AMBIGUOUS
    return RegimeClassification(label, fe, fp)


@dataclass
class TauSpectrum:
    tau: np.ndarray         # inf for non-decaying neurons, nan where absent
    amplitude: np.ndarray
    r_squared: np.ndarray
    absent: np.ndarray      # bool
    tau_env: float

    def present(self) -> np.ndarray:
        return self.tau[~self.absent]


def _tau(rate: float) -> float:
    return 1.0 / rate if rate > 0 else np.inf


def tau_spectrum(tensor: EffRateTensor) -> TauSpectrum:
    """Per-neuron exponential fits of ``|mu|`` over lags; ``tau_q = 1 / lam_q``."""
    lags = tensor.lag_grid
    if lags.size < MIN_POINTS:
        raise ContractError(f"need >= {MIN_POINTS} lags for time-scale fits")
    mags = tensor.abs_values if tensor.abs_values is not None else np.abs(tensor.values)
    H = mags.shape[1]
    tau = np.full(H, np.nan)
    amp = np.full(H, np.nan)
    r2 = np.full(H, np.nan)
    absent = np.zeros(H, dtype=bool)
    for q in range(H):
        try:
            fit = fit_exponential(lags, mags[:, q])
        except FitError:
            absent[q] = True
            continue
        tau[q], amp[q], r2[q] = _tau(fit.rate), fit.amplitude, fit.r_squared
    env = mags.sum(axis=1)
    try:
        tau_env = _tau(fit_exponential(lags, env).rate)
    except FitError:
        tau_env = float("nan")
    return TauSpectrum(tau, amp, r2, absent, tau_env)


@dataclass(frozen=True)
class CcdfCurve:
    thresholds: np.ndarray
    survival: np.ndarray

    def at(self, x: float) -> float:
        """``P(tau >= x)`` under the empirical law."""
        idx = np.searchsorted(self.thresholds, x, side="left")
        if idx >= self.thresholds.size:
            return 0.0
        return float(self.survival[idx])


def ccdf(values) -> CcdfCurve:
    """Empirical survival ``P(tau >= x)`` at the sorted unique values."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise ContractError("ccdf of an empty set")
    uniq, first = np.unique(v, return_index=True)
    return CcdfCurve(uniq, (v.size - first) / v.size)
