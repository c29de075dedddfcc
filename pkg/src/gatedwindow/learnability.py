"""Matched statistic, noise fits, detectability thresholds and learnability windows.

A random unit probe ``w`` over the full parameter vector compresses the
lag-``l`` gradient contribution of each neuron into a scalar alignment
``zeta_q = delta_t[q] * <B_q(t - l), w>``.  Rate-weighted, sign-oriented sums
of these alignments give the matched statistic whose per-lag SaS fit sets the
detection threshold on the envelope.

For LSTM the neuron coordinate of ``B`` is the cell state ``c`` (the
effective rates transport ``c_{t-l}`` to ``h_t``) while ``delta`` is taken on
``h``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import cells, transport
from .cells import ContractError
from .stable_noise import StableDomainError, StableFit, kappa_alpha, mcculloch_estimate
from .training import Dataset, ModelParams

EXPONENTIAL = "exponential"
POLYNOMIAL = "polynomial"
LOGARITHMIC = "logarithmic"
REGIMES = (LOGARITHMIC, POLYNOMIAL, EXPONENTIAL)

M_BAR_FLOOR = 1e-12
DEFAULT_EPSILON = 0.05
DEFAULT_C_ALPHA = 1.0


@dataclass(frozen=True)
class ProbeVector:
    w: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        w = np.array(self.w, dtype=float)
        if w.ndim != 1 or abs(np.linalg.norm(w) - 1.0) > 1e-12:
            raise ContractError("probe must be a unit vector")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def P(self) -> int:
        return self.w.size


def draw_probe(P: int, seed) -> ProbeVector:
    """Uniform draw from the unit sphere in R^P."""
    if P < 1:
        raise ContractError("P must be >= 1")
    v = np.random.default_rng(seed).standard_normal(P)
    v /= np.linalg.norm(v)
    # one renormalisation pass keeps |norm - 1| at the rounding floor
    v /= np.linalg.norm(v)
    return ProbeVector(v, seed if isinstance(seed, int) else None)


def _cell_direction(model: ModelParams, probe: ProbeVector) -> dict[str, np.ndarray]:
    if probe.P != model.size:
        raise ContractError(f"probe has {probe.P} entries, model has {model.size} parameters")
    n = model.cell.size
    return cells.unflatten(probe.w[:n], cells.param_shapes(model.kind, model.cell.D, model.cell.H))


def local_loss_gradients(model: ModelParams, batch: Dataset, caches) -> np.ndarray:
    """``d E_t / d h_t`` for ``E_t = (w.h_t + b - y_t)^2``; zero where the target is masked."""
    hs = np.stack([c.h for c in caches], axis=-2)
    resid = np.where(batch.mask, hs @ model.w_out + model.b_out - batch.targets, 0.0)
    return 2.0 * resid[..., None] * model.w_out


def source_tangents(model: ModelParams, caches, probe: ProbeVector) -> np.ndarray:
    """Immediate parameter sensitivity of each step's neuron coordinates along the probe.

    Shape ``(..., T, H)``: ``h`` for the gated RNNs and GRU, ``c`` for LSTM.
    """
    dparams = _cell_direction(model, probe)
    out = []
    for cache in caches:
        dh, dc = cells.step_tangent(model.cell, cache, dparams)
        out.append(dc if dc is not None else dh)
    return np.stack(out, axis=-2)


def neuron_alignments(model: ModelParams, sequence: Dataset, anchor: int, lag: int,
                      probe: ProbeVector) -> np.ndarray:
    """Per-neuron alignments ``zeta_q`` for one sequence, anchor and lag."""
    T = sequence.inputs.shape[-2]
    if lag < 1 or anchor - lag < 0 or anchor >= T:
        raise ContractError(f"anchor {anchor} with lag {lag} is outside a length-{T} sequence")
    _, caches = cells.run_sequence(model.cell, sequence.inputs)
    delta = local_loss_gradients(model, sequence, caches)
    v = source_tangents(model, caches, probe)
    return delta[..., anchor, :] * v[..., anchor - lag, :]


def matched_statistic(zeta, mu, signs) -> float | np.ndarray:
    """``sum_q mu_q * sign_q * zeta_q`` over the last axis."""
    zeta, mu, signs = (np.asarray(a, dtype=float) for a in (zeta, mu, signs))
    if not (zeta.shape[-1] == mu.shape[-1] == signs.shape[-1]):
        raise ContractError("zeta, mu and signs must have the same length")
    return np.sum(mu * signs * zeta, axis=-1)


def estimate_alignment(zeta_samples, mu):
    """Signs, magnitudes and the envelope-normalised alignment from sampled ``zeta``.

    ``zeta_samples`` has shape ``(n_sequences, H)``; ties resolve to +1.
    """
    z = np.asarray(zeta_samples, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ContractError("need zeta samples from at least 2 sequences")
    m_hat = z.mean(axis=0)
    signs = np.where(m_hat >= 0.0, 1.0, -1.0)
    return signs, np.abs(m_hat), m_bar_mu(mu, np.abs(m_hat))


def m_bar_mu(mu, abs_m) -> float:
    mu = np.asarray(mu, dtype=float)
    denom = np.sum(np.abs(mu))
    if denom == 0.0:
        raise ContractError("all effective rates are zero; alignment coefficient undefined")
    return float(np.sum(mu * np.asarray(abs_m)) / denom)


@dataclass
class MatchedSamples:
    lag_grid: np.ndarray
    samples: np.ndarray                 # (L, N) per-sequence statistics
    signs: np.ndarray | None = None     # (L, H)
    abs_m: np.ndarray | None = None     # (L, H)
    m_bar: np.ndarray | None = None     # (L,)

    def __post_init__(self):
        self.lag_grid = np.asarray(self.lag_grid, dtype=int)
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 2 or self.samples.shape[0] != self.lag_grid.size:
            raise ContractError("samples must have shape (lags, sequences)")
        if self.samples.shape[1] < 1:
            raise ContractError("every lag needs at least one sample")
        if self.signs is not None and not np.all(np.isin(self.signs, (-1.0, 1.0))):
            raise ContractError("signs must be +-1")


def collect_matched_samples(model: ModelParams, data: Dataset, lag_grid, probe: ProbeVector,
                            anchors=None, mu: float = 1.0, order: str = transport.FIRST,
                            chunk: int = 32):
    """Effective rates and matched-statistic samples over a diagnostic set.

    Sequences are processed in fixed-order chunks.  Signs come from the
    diagnostic set itself: the per-neuron mean alignment over all sequences
    and anchors.  Returns ``(MatchedSamples, EffRateTensor)``.
    """
    lags = np.asarray(lag_grid, dtype=int)
    T = data.inputs.shape[-2]
    if anchors is None:
        anchors = transport.default_anchors(T, int(lags.max()))
    anchors = np.asarray(anchors, dtype=int)
    n = len(data)
    H = model.cell.H
    L = lags.size
    weighted = np.empty((n, L, H))  # per-sequence anchor mean of mu * zeta
    zeta_sum = np.zeros((L, H))
    mu_sum = np.zeros((L, H))
    mu_abs_sum = np.zeros((L, H))
    src = anchors[:, None] - lags[None, :]
    for start in range(0, n, chunk):
        batch = data.subset(slice(start, start + chunk))
        _, caches = cells.run_sequence(model.cell, batch.inputs)
        factors = transport.transport_factors(model.cell, caches)
        rates = transport.rate_grid(factors, lags, anchors, mu, order)  # (b, A, L, H)
        delta = local_loss_gradients(model, batch, caches)[:, anchors, :][:, :, None, :]
        v = source_tangents(model, caches, probe)[:, src, :]
        zeta = delta * v
        weighted[start:start + len(batch)] = np.mean(rates * zeta, axis=1)
        zeta_sum += zeta.sum(axis=(0, 1))
        mu_sum += rates.sum(axis=(0, 1))
        mu_abs_sum += np.abs(rates).sum(axis=(0, 1))
    count = n * anchors.size
    m_hat = zeta_sum / count
    signs = np.where(m_hat >= 0.0, 1.0, -1.0)
    mu_mean = mu_sum / count
    tensor = transport.EffRateTensor(lags, mu_mean, order, anchors.size, n, mu_abs_sum / count)
    samples = np.einsum("nlh,lh->ln", weighted, signs)
    m_bar = np.array([m_bar_mu(mu_mean[i], np.abs(m_hat[i])) for i in range(L)])
    return MatchedSamples(lags, samples, signs, np.abs(m_hat), m_bar), tensor


@dataclass
class NoiseProfile:
    lag_grid: np.ndarray
    fits: list[StableFit]
    alpha_pooled: float

    @property
    def alpha_hat(self) -> np.ndarray:
        return np.array([f.alpha_hat for f in self.fits])

    @property
    def sigma_hat(self) -> np.ndarray:
        return np.array([f.sigma_hat for f in self.fits])

    @property
    def clamped(self) -> np.ndarray:
        return np.array([f.clamped for f in self.fits])


def fit_noise(matched: MatchedSamples) -> NoiseProfile:
    """Median-centred McCulloch fit per lag; pooled tail index is the median over lags."""
    fits = []
    for row in matched.samples:
        fits.append(mcculloch_estimate(row - np.median(row)))
    pooled = float(np.median([f.alpha_hat for f in fits]))
    return NoiseProfile(matched.lag_grid.copy(), fits, pooled)


@dataclass
class ThresholdCurve:
    lag_grid: np.ndarray
    eps_th: np.ndarray
    N: float
    epsilon: float
    c_alpha: float
    alpha: float
    sigma: np.ndarray
    m_bar: np.ndarray


def _log_factor(epsilon: float, c_alpha: float) -> float:
    if not 0.0 < epsilon < 0.5:
        raise ContractError(f"detection error epsilon must lie in (0, 1/2), got {epsilon}")
    if not c_alpha > 0:
        raise ContractError("c_alpha must be positive")
    return math.sqrt(math.log(1.0 / (2.0 * epsilon)) / c_alpha)


def threshold_values(sigma, m_bar, N: float, alpha: float, epsilon: float = DEFAULT_EPSILON,
                     c_alpha: float = DEFAULT_C_ALPHA) -> np.ndarray:
    """``sigma / (N^{1/kappa} m_bar) * sqrt(log(1/(2 eps)) / c_alpha)``; inf below the alignment floor."""
    if N < 1:
        raise ContractError("N must be >= 1")
    kappa = kappa_alpha(alpha)
    sigma = np.asarray(sigma, dtype=float)
    m_bar = np.asarray(m_bar, dtype=float)
    ok = m_bar >= M_BAR_FLOOR
    safe = np.where(ok, m_bar, 1.0)
    out = sigma / (float(N) ** (1.0 / kappa) * safe) * _log_factor(epsilon, c_alpha)
    return np.where(ok, out, np.inf)


def detectability_threshold(profile: NoiseProfile, m_bar, N: float,
                            epsilon: float = DEFAULT_EPSILON,
                            c_alpha: float = DEFAULT_C_ALPHA) -> ThresholdCurve:
    alpha = profile.alpha_pooled
    if not alpha > 1.0:
        raise StableDomainError(f"pooled tail index {alpha} <= 1: detection threshold undefined")
    m_bar = np.broadcast_to(np.asarray(m_bar, dtype=float), profile.lag_grid.shape)
    sigma = profile.sigma_hat
    eps_th = threshold_values(sigma, m_bar, N, alpha, epsilon, c_alpha)
    return ThresholdCurve(profile.lag_grid.copy(), eps_th, float(N), epsilon, c_alpha, alpha,
                          sigma, np.array(m_bar))


def kappa_alpha_eps(alpha: float, epsilon: float, c_alpha: float) -> float:
    kappa = kappa_alpha(alpha)
    return _log_factor(epsilon, c_alpha) ** kappa


def sample_complexity(f, sigma, m_bar, alpha: float, epsilon: float = DEFAULT_EPSILON,
                      c_alpha: float = DEFAULT_C_ALPHA):
    """Minimal sequence count ``kappa_{a,eps} * (sigma / (m_bar f))^kappa``; inf where f == 0."""
    kappa = kappa_alpha(alpha)
    f = np.asarray(f, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    m_bar = np.asarray(m_bar, dtype=float)
    denom = m_bar * f
    with np.errstate(divide="ignore"):
        ratio = np.where(denom > 0, sigma / np.where(denom > 0, denom, 1.0), np.inf)
    out = kappa_alpha_eps(alpha, epsilon, c_alpha) * ratio ** kappa
    return float(out) if out.ndim == 0 else out


def empirical_window(envelope: transport.EnvelopeCurve, threshold: ThresholdCurve) -> int:
    """Largest grid lag whose envelope reaches the threshold; 0 when none does."""
    if not np.array_equal(envelope.lag_grid, threshold.lag_grid):
        raise ContractError("envelope and threshold live on different lag grids")
    ok = envelope.f_values >= threshold.eps_th
    return int(envelope.lag_grid[ok].max()) if ok.any() else 0


def grid_inverse(envelope: transport.EnvelopeCurve, y: float) -> int:
    """``sup{l in grid : f(l) >= y}`` with sup of the empty set taken as 0."""
    ok = envelope.f_values >= y
    return int(envelope.lag_grid[ok].max()) if ok.any() else 0


@dataclass
class WindowReport:
    budgets: list[int]
    H_hat: list[int]
    epsilon: float
    c_alpha: float
    alpha_pooled: float
    thresholds: list[ThresholdCurve] = field(default_factory=list)
    available: bool = True
    reason: str = ""


def window_report(envelope: transport.EnvelopeCurve, profile: NoiseProfile, m_bar, budgets,
                  epsilon: float = DEFAULT_EPSILON, c_alpha: float = DEFAULT_C_ALPHA) -> WindowReport:
    budgets = [int(b) for b in budgets]
    if any(b < 1 for b in budgets) or budgets != sorted(set(budgets)):
        raise ContractError("budget grid must be increasing positive integers")
    if not profile.alpha_pooled > 1.0:
        return WindowReport(budgets, [], epsilon, c_alpha, profile.alpha_pooled, available=False,
                            reason=f"pooled alpha {profile.alpha_pooled:.4g} <= 1")
    curves = [detectability_threshold(profile, m_bar, N, epsilon, c_alpha) for N in budgets]
    H = [empirical_window(envelope, c) for c in curves]
    return WindowReport(budgets, H, epsilon, c_alpha, profile.alpha_pooled, curves)


# -- canonical envelope families -------------------------------------------------


def canonical_envelope(regime: str, params: dict):
    """Envelope callable for a canonical decay family.

    exponential: ``c * lam**l``; polynomial: ``c * l**-beta``;
    logarithmic: ``c / log(1 + l)``.
    """
    c = float(params.get("c", 1.0))
    if not c > 0:
        raise ContractError("regime constant c must be positive")
    if regime == EXPONENTIAL:
        lam = float(params["lam"])
        if not 0.0 < lam < 1.0:
            raise ContractError("exponential regime needs lam in (0, 1)")
        return lambda l: c * lam ** np.asarray(l, dtype=float)
    if regime == POLYNOMIAL:
        beta = float(params["beta"])
        if not beta > 0:
            raise ContractError("polynomial regime needs beta > 0")
        return lambda l: c * np.asarray(l, dtype=float) ** (-beta)
    if regime == LOGARITHMIC:
        return lambda l: c / np.log1p(np.asarray(l, dtype=float))
    raise ContractError(f"unknown regime {regime!r}; expected one of {REGIMES}")


def _continuous_inverse(regime: str, params: dict, y: float) -> float:
    c = float(params.get("c", 1.0))
    try:
        if regime == EXPONENTIAL:
            return math.log(c / y) / math.log(1.0 / float(params["lam"]))
        if regime == POLYNOMIAL:
            return (c / y) ** (1.0 / float(params["beta"]))
        return math.expm1(c / y)
    except OverflowError:
        return math.inf


# lags above this are not exactly representable as floats, so f(l) and f(l + 1)
# may coincide and the rounding correction below loses its meaning
_EXACT_LAG_LIMIT = 2.0 ** 52


@dataclass(frozen=True)
class TheoreticalWindow:
    window: int | float  # exact generalized inverse sup{l >= 1 : f(l) >= y}; inf on overflow
    level: float         # y = level_constant * N^{-1/kappa}
    continuous: float    # real-valued solution of f(l) = y
    asymptotic: float    # leading-order law with unit constants


def theoretical_window(regime: str, params: dict, N: float, alpha: float,
                       level_constant: float = 1.0) -> TheoreticalWindow:
    """Window of a canonical envelope at level ``level_constant * N^{-1/kappa}``."""
    f = canonical_envelope(regime, params)
    kappa = kappa_alpha(alpha)
    if not level_constant > 0 or N < 1:
        raise ContractError("level constant must be positive and N >= 1")
    y = level_constant * float(N) ** (-1.0 / kappa)
    cont = _continuous_inverse(regime, params, y)
    if not math.isfinite(cont):
        ell = math.inf
    elif cont >= _EXACT_LAG_LIMIT:
        ell = int(math.floor(cont))
    else:
        ell = max(0, int(math.floor(cont)))
        # settle rounding at exact level crossings by direct evaluation
        while f(ell + 1) >= y:
            ell += 1
        while ell >= 1 and f(ell) < y:
            ell -= 1
    try:
        if regime == EXPONENTIAL:
            asym = math.log(N) / (kappa * math.log(1.0 / float(params["lam"])))
        elif regime == POLYNOMIAL:
            asym = float(N) ** (1.0 / (kappa * float(params["beta"])))
        else:
            asym = math.expm1(float(N) ** (1.0 / kappa))
    except OverflowError:
        asym = math.inf
    return TheoreticalWindow(ell, y, cont, asym)


@dataclass(frozen=True)
class SandwichVerdict:
    passed: bool
    violating_lag: int | None = None
    reason: str = ""


def sandwich_check(envelope: transport.EnvelopeCurve, sigma, m_bar, sigma_bounds, m_bounds,
                   alpha: float, epsilon: float, N: float, c_alpha: float = DEFAULT_C_ALPHA,
                   rtol: float = 1e-12) -> SandwichVerdict:
    """Check the two-sided sample-complexity and window bounds implied by bounded sigma and m_bar."""
    c_s, C_s = (float(b) for b in sigma_bounds)
    c_m, C_m = (float(b) for b in m_bounds)
    if not (0 < c_s <= C_s and 0 < c_m <= C_m):
        raise ContractError("bounds must satisfy 0 < lower <= upper")
    lags = envelope.lag_grid
    f = envelope.f_values
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), lags.shape)
    m_bar = np.broadcast_to(np.asarray(m_bar, dtype=float), lags.shape)
    for i, lag in enumerate(lags):
        if not c_s <= sigma[i] <= C_s:
            return SandwichVerdict(False, int(lag), f"sigma {sigma[i]:.6g} outside [{c_s}, {C_s}]")
        if not c_m <= m_bar[i] <= C_m:
            return SandwichVerdict(False, int(lag), f"m_bar {m_bar[i]:.6g} outside [{c_m}, {C_m}]")
    kappa = kappa_alpha(alpha)
    k_ae = kappa_alpha_eps(alpha, epsilon, c_alpha)
    c_star = k_ae * (c_s / C_m) ** kappa
    C_star = k_ae * (C_s / c_m) ** kappa
    N_ell = np.atleast_1d(sample_complexity(f, sigma, m_bar, alpha, epsilon, c_alpha))
    with np.errstate(divide="ignore"):
        base = np.where(f > 0, f, 0.0) ** (-kappa)
    for i, lag in enumerate(lags):
        if not np.isfinite(base[i]):
            continue
        lo, hi = c_star * base[i], C_star * base[i]
        if N_ell[i] < lo * (1 - rtol) or N_ell[i] > hi * (1 + rtol):
            return SandwichVerdict(False, int(lag), f"N(l)={N_ell[i]:.6g} outside [{lo:.6g}, {hi:.6g}]")
    scale = _log_factor(epsilon, c_alpha) * float(N) ** (-1.0 / kappa)
    H = empirical_window(envelope, ThresholdCurve(
        lags, threshold_values(sigma, m_bar, N, alpha, epsilon, c_alpha), N, epsilon, c_alpha,
        alpha, sigma, m_bar))
    lower = grid_inverse(envelope, (C_s / c_m) * scale * (1 + rtol))
    upper = grid_inverse(envelope, (c_s / C_m) * scale * (1 - rtol))
    if not lower <= H <= upper:
        return SandwichVerdict(False, H, f"window {H} outside [{lower}, {upper}]")
    return SandwichVerdict(True)
