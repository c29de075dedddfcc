"""Property checks shared by ``gatedwindow verify`` and the acceptance tests.

Every check returns a :class:`CheckResult`; none of them raises on a
failed property.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import cells, learnability as lrn, stable_noise as sn, transport
from .cells import KIND_TAGS
from .training import TaskConfig, bptt_gradients, forward_loss, generate_task, init_model


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(name, fn, *args, **kw) -> CheckResult:
    t0 = time.perf_counter()
    passed, detail = fn(*args, **kw)
    return CheckResult(name, bool(passed), detail, time.perf_counter() - t0)


def random_cell(kind: str, D: int, H: int, rng: np.random.Generator, scale: float = 0.6) -> cells.CellParams:
    """Cell with dense random weights and biases (not an initialisation scheme)."""
    p = cells.init_params(kind, D, H, int(rng.integers(2 ** 63)))
    return p.replace(**{k: scale * rng.standard_normal(p[k].shape) for k in p.arrays})


def random_state(params: cells.CellParams, rng: np.random.Generator, batch=()) -> cells.CellState:
    H = params.H
    h = 0.8 * np.tanh(rng.standard_normal(batch + (H,)))
    c = rng.standard_normal(batch + (H,)) if params.kind.tag == cells.LSTM else None
    return cells.CellState(h, c)


def _stack_state(params, v):
    H = params.H
    if params.kind.tag == cells.LSTM:
        return cells.CellState(v[:H], v[H:])
    return cells.CellState(v, None)


# -- 1 ---------------------------------------------------------------------------


def _jacobian_fd(trials: int, H: int, D: int, seed: int, step: float = 1e-6):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for kind in KIND_TAGS:
        for _ in range(trials):
            p = random_cell(kind, D, H, rng)
            s = random_state(p, rng)
            x = rng.standard_normal(D)
            _, cache = cells.step(p, x, s)
            J = cells.one_step_jacobian(p, cache)
            v0 = s.stacked()
            fd = np.empty_like(J)
            for j in range(v0.size):
                e = np.zeros_like(v0)
                e[j] = step
                hi = cells.step(p, x, _stack_state(p, v0 + e))[0].stacked()
                lo = cells.step(p, x, _stack_state(p, v0 - e))[0].stacked()
                fd[:, j] = (hi - lo) / (2 * step)
            worst = max(worst, float(np.max(np.abs(J - fd)) / max(np.max(np.abs(fd)), 1e-12)))
    return worst < 1e-5, f"max relative error {worst:.2e} over {trials} trials x {len(KIND_TAGS)} kinds"


def check_jacobians(trials: int = 50, H: int = 4, D: int = 3, seed: int = 1) -> CheckResult:
    return _timed("jacobian_vs_fd", _jacobian_fd, trials, H, D, seed)


# -- 2 ---------------------------------------------------------------------------


def _bptt_fd(H: int, D: int, T: int, seed: int, step: float = 1e-5):
    rng = np.random.default_rng(seed)
    task = TaskConfig(D=D, T=T, lags=(1, 2), coefficients=(0.7, -0.4), noise_std=0.1, seed=seed)
    batch = generate_task(task, 3, seed + 1)
    worst, where = 0.0, ""
    for kind in KIND_TAGS:
        model = init_model(kind, D, H, seed)
        model = model.with_flat(model.flatten() + 0.3 * rng.standard_normal(model.size))
        loss, fc = forward_loss(model, batch)
        g = bptt_gradients(model, batch, fc).flatten()
        theta = model.flatten()
        fd = np.empty_like(theta)
        for i in range(theta.size):
            e = np.zeros_like(theta)
            e[i] = step
            fd[i] = (forward_loss(model.with_flat(theta + e), batch)[0]
                     - forward_loss(model.with_flat(theta - e), batch)[0]) / (2 * step)
        names = model.names()
        sizes = [int(np.prod(s)) for s in _shapes(model)]
        off = 0
        for name, size in zip(names, sizes):
            a, b = g[off:off + size], fd[off:off + size]
            err = float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-10))
            if err > worst:
                worst, where = err, f"{kind}.{name}"
            off += size
    return worst < 1e-4, f"max relative error {worst:.2e} ({where})"


def _shapes(model):
    shapes = [model.cell[k].shape for k in cells.param_shapes(model.kind, model.cell.D, model.cell.H)]
    return shapes + [model.w_out.shape, ()]


def check_bptt(H: int = 4, D: int = 3, T: int = 6, seed: int = 2) -> CheckResult:
    return _timed("bptt_vs_fd", _bptt_fd, H, D, T, seed)


# -- 3 ---------------------------------------------------------------------------


def _first_order(trials: int, H: int, D: int, max_len: int, seed: int):
    rng = np.random.default_rng(seed)
    ratios = []
    for t in range(trials):
        kind = KIND_TAGS[t % len(KIND_TAGS)]
        p = random_cell(kind, D, H, rng)
        n = int(rng.integers(2, max_len + 1))
        xs = rng.standard_normal((n, D))
        _, caches = cells.run_sequence(p, xs, random_state(p, rng))
        splits = [transport.retention_split(p, c) for c in caches]
        Ts = [s[0] for s in splits]
        Rs = [s[1] for s in splits]
        scale = 0.05 / max(1.0, max(np.linalg.norm(R, 2) for R in Rs))

        def gap(eps):
            exact = transport.jacobian_product([T + eps * R for T, R in zip(Ts, Rs)])
            approx = transport.first_order_transport(Ts, [eps * R for R in Rs])
            return np.linalg.norm(exact - approx)

        ratios.append(gap(scale) / gap(scale / 2))
    ratios = np.array(ratios)
    ok = np.all((ratios >= 3.5) & (ratios <= 4.5))
    return ok, f"ratios in [{ratios.min():.3f}, {ratios.max():.3f}] over {trials} trials"


def check_first_order(trials: int = 25, H: int = 3, D: int = 2, max_len: int = 4, seed: int = 3) -> CheckResult:
    return _timed("first_order_error_order", _first_order, trials, H, D, max_len, seed)


# -- 4 ---------------------------------------------------------------------------


def _zeroth_monotone(n_traj: int, H: int, D: int, T: int, max_lag: int, seed: int):
    rng = np.random.default_rng(seed)
    lags = np.arange(1, max_lag + 1)
    anchors = transport.default_anchors(T, max_lag)
    violations = 0
    per_model = 50
    for kind in KIND_TAGS:
        done = 0
        while done < n_traj:
            b = min(per_model, n_traj - done)
            p = random_cell(kind, D, H, rng, scale=1.0)
            xs = rng.standard_normal((b, T, D))
            _, caches = cells.run_sequence(p, xs)
            grid = transport.rate_grid(transport.transport_factors(p, caches), lags, anchors, 1.0,
                                       transport.ZEROTH)
            env = np.abs(grid).sum(axis=-1).mean(axis=-2)   # (b, L)
            violations += int(np.sum(np.diff(env, axis=-1) > 0))
            done += b
    return violations == 0, f"{violations} increases over {n_traj} trajectories per kind"


def check_zeroth_monotone(n_traj: int = 1000, H: int = 6, D: int = 3, T: int = 40, max_lag: int = 24,
                 seed: int = 4) -> CheckResult:
    return _timed("zeroth_order_monotone", _zeroth_monotone, n_traj, H, D, T, max_lag, seed)


# -- 5 ---------------------------------------------------------------------------


def _const_closed(H: int, D: int, T: int, seed: int, mu: float, s: float):
    rng = np.random.default_rng(seed)
    kind = cells.CellKind(cells.CONST, s)
    p = cells.init_params(kind, D, H, seed)
    lags = np.arange(1, T // 2 + 1)
    _, caches = cells.run_sequence(p, rng.standard_normal((4, T, D)))
    tensor = transport.effective_rates(p, caches, lags, mu=mu, order=transport.ZEROTH)
    f = transport.envelope(tensor).f_values
    expect = H * mu * (1 - s) ** lags
    err = float(np.max(np.abs(f - expect) / expect))
    return err < 1e-12, f"max relative deviation {err:.1e}"


def check_const_closed_form(H: int = 8, D: int = 3, T: int = 64, seed: int = 5, mu: float = 0.01,
                            s: float = 0.5) -> CheckResult:
    return _timed("constgate_closed_form", _const_closed, H, D, T, seed, mu, s)


# -- 6 ---------------------------------------------------------------------------


def _stable_roundtrip(n: int, seed: int):
    out, ok = [], True
    for i, alpha in enumerate((1.2, 1.5, 1.8, 2.0)):
        sigma = 1.0 + 0.5 * i
        fit = sn.mcculloch_estimate(sn.sample_sas(sn.StableParams(alpha, sigma), n, seed + i))
        good = abs(fit.alpha_hat - alpha) <= 0.07 and abs(fit.sigma_hat / sigma - 1) <= 0.05
        ok &= good
        out.append(f"a={alpha}:({fit.alpha_hat:.3f},{fit.sigma_hat / sigma:.3f})")
    return ok, " ".join(out)


def noise_floor_slope(alpha: float, budgets=(100, 1000, 10000), reps: int = 1000, seed: int = 0) -> float:
    """Log-log slope of the fitted scale of N-sample means against N."""
    scales = []
    for j, N in enumerate(budgets):
        x = sn.sample_sas(sn.StableParams(alpha, 1.0), N * reps, seed + j).reshape(reps, N)
        scales.append(sn.mcculloch_estimate(x.mean(axis=1)).sigma_hat)
    return float(np.polyfit(np.log(budgets), np.log(scales), 1)[0])


def _floor_slopes(seed: int):
    ok, parts = True, []
    for i, alpha in enumerate((1.2, 1.5, 1.8, 2.0)):
        slope = noise_floor_slope(alpha, seed=seed + 10 * i)
        target = -(1 - 1 / alpha)
        ok &= abs(slope - target) <= 0.05
        parts.append(f"a={alpha}:{slope:.3f}/{target:.3f}")
    return ok, " ".join(parts)


def check_stable(n: int = 100_000, seed: int = 6) -> list[CheckResult]:
    return [_timed("stable_roundtrip", _stable_roundtrip, n, seed),
            _timed("noise_floor_slope", _floor_slopes, seed + 100)]


# -- 7 ---------------------------------------------------------------------------


def _profile(lags, sigma, alpha):
    fits = [sn.StableFit(alpha, float(s), 100, False) for s in sigma]
    return lrn.NoiseProfile(np.asarray(lags), fits, alpha)


def _duality(trials: int, seed: int):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        L = int(rng.integers(1, 20))
        lags = np.arange(1, L + 1)
        f = np.exp(rng.uniform(-8, 2, L))
        sigma = np.exp(rng.uniform(-3, 3, L))
        m_bar = np.exp(rng.uniform(-3, 1, L))
        alpha = rng.uniform(1.05, 2.0)
        eps = rng.uniform(0.001, 0.49)
        c = np.exp(rng.uniform(-1, 1))
        N = lrn.sample_complexity(f, sigma, m_bar, alpha, eps, c)
        for i in range(L):
            if N[i] < 1:
                continue
            th = lrn.detectability_threshold(_profile(lags, sigma, alpha), m_bar, N[i], eps, c)
            worst = max(worst, abs(th.eps_th[i] / f[i] - 1))
    return worst < 1e-9, f"max relative round-trip error {worst:.1e} over {trials} trials"


def _sandwich(trials: int, seed: int):
    rng = np.random.default_rng(seed)
    fails = 0
    for _ in range(trials):
        lags = np.arange(1, 81)
        env = transport.EnvelopeCurve(lags, rng.uniform(0.5, 3) * rng.uniform(0.7, 0.97) ** lags)
        c_s = rng.uniform(0.1, 1)
        C_s = c_s * rng.uniform(1, 3)
        c_m = rng.uniform(0.1, 1)
        C_m = c_m * rng.uniform(1, 3)
        sigma = rng.uniform(c_s, C_s, lags.size)
        m_bar = rng.uniform(c_m, C_m, lags.size)
        alpha = rng.uniform(1.1, 2.0)
        N = float(np.exp(rng.uniform(np.log(10), np.log(1e6))))
        v = lrn.sandwich_check(env, sigma, m_bar, (c_s, C_s), (c_m, C_m), alpha, 0.05, N)
        fails += not v.passed
    return fails == 0, f"{trials - fails}/{trials} randomized trials pass"


def check_duality(trials: int = 200, seed: int = 7) -> list[CheckResult]:
    return [_timed("threshold_complexity_duality", _duality, trials, seed),
            _timed("sandwich_trials", _sandwich, 100, seed + 1)]


# -- 8 ---------------------------------------------------------------------------

REGIME_CASES = (
    (lrn.EXPONENTIAL, {"c": 1.0, "lam": 0.9}),
    (lrn.EXPONENTIAL, {"c": 2.0, "lam": 0.5}),
    (lrn.POLYNOMIAL, {"c": 1.0, "beta": 1.0}),
    (lrn.POLYNOMIAL, {"c": 0.5, "beta": 2.0}),
    (lrn.LOGARITHMIC, {"c": 0.3}),
)


def _regime_level(regime: str, params: dict, budgets, alpha: float, max_lag: int) -> float:
    """Threshold constant that keeps the largest-budget window on the lag grid."""
    if regime != lrn.LOGARITHMIC:
        return 0.1
    # logarithmic windows grow like exp(N^{1/kappa}); land the top budget near max_lag / 2
    y_top = params.get("c", 1.0) / math.log1p(max_lag / 2)
    return y_top * max(budgets) ** (1 / sn.kappa_alpha(alpha))


def _regime_oracles(budgets, alpha: float, max_lag: int, log_max_lag: int = 10 ** 6):
    worst, worst_case, compared = 0, "", 0
    for regime, params in REGIME_CASES:
        L = log_max_lag if regime == lrn.LOGARITHMIC else max_lag
        lags = np.arange(1, L + 1)
        f = lrn.canonical_envelope(regime, params)
        env = transport.EnvelopeCurve(lags, f(lags))
        level = _regime_level(regime, params, budgets, alpha, L)
        prof = _profile(lags, np.full(lags.size, level), alpha)
        for N in budgets:
            # sigma = level, m_bar = 1, eps = 1/(2e), c_alpha = 1 gives threshold level * N^{-1/kappa}
            th = lrn.detectability_threshold(prof, 1.0, N, 1 / (2 * math.e), 1.0)
            emp = lrn.empirical_window(env, th)
            exact = lrn.theoretical_window(regime, params, N, alpha, level).window
            if exact > L:
                continue
            compared += 1
            gap = abs(emp - exact)
            if gap > worst:
                worst, worst_case = gap, f"{regime} {params} N={N}"
    complete = compared == len(REGIME_CASES) * len(budgets)
    return worst <= 1 and complete, worst, worst_case, compared


def _regimes(seed: int):
    budgets = [int(round(x)) for x in np.logspace(2, 6, 9)]
    parts, ok = [], True
    for alpha in (2.0, 1.5):
        good, gap, case, n = _regime_oracles(budgets, alpha, 20000)
        ok &= good
        parts.append(f"alpha={alpha} max gap {gap} over {n} comparisons" + (f" at {case}" if gap else ""))
    # exponential slope against log N
    lam = 0.9
    for alpha in (2.0, 1.5):
        H = [lrn.theoretical_window(lrn.EXPONENTIAL, {"c": 1.0, "lam": lam}, N, alpha).window for N in budgets]
        slope = np.polyfit(np.log(budgets), H, 1)[0]
        target = 1 / (sn.kappa_alpha(alpha) * math.log(1 / lam))
        rel = abs(slope / target - 1)
        ok &= rel <= 0.05
        parts.append(f"exp slope a={alpha} rel err {rel:.3f}")
    # heavy-tail compression
    worst = 0.0
    for N in budgets:
        h2 = lrn.theoretical_window(lrn.EXPONENTIAL, {"c": 1.0, "lam": lam}, N, 2.0).window
        h15 = lrn.theoretical_window(lrn.EXPONENTIAL, {"c": 1.0, "lam": lam}, N, 1.5).window
        worst = max(worst, abs(h15 - h2 * (2 / 3)))
    ok &= worst <= 1
    parts.append(f"alpha 1.5 vs 2 max deviation from 2/3 ratio {worst:.2f} lag")
    return ok, "; ".join(parts)


def check_regimes(seed: int = 8) -> CheckResult:
    return _timed("scaling_regime_oracles", _regimes, seed)


def run_property_suite() -> list[CheckResult]:
    """Criteria that need no trained models."""
    out = [check_jacobians(), check_bptt(), check_first_order(), check_zeroth_monotone(), check_const_closed_form()]
    out += check_stable()
    out += check_duality()
    out.append(check_regimes())
    return out
