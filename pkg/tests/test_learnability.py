import math

import numpy as np
import pytest

from gatedwindow import cells, learnability as lb, transport as tr
from gatedwindow.cells import CellState, ContractError, KIND_TAGS
from gatedwindow.stable_noise import StableDomainError, StableParams, sample_sas
from gatedwindow.training import TaskConfig, generate_task, init_model

EPS_UNIT_LOG = 1 / (2 * math.e)  # makes log(1/(2 eps)) = 1


def test_probe_is_unit_and_seeded():
    for P in (1, 7, 1000):
        for seed in range(5):
            w = lb.draw_probe(P, seed).w
            assert abs(np.linalg.norm(w) - 1) <= 1e-12
    assert np.array_equal(lb.draw_probe(50, 3).w, lb.draw_probe(50, 3).w)
    with pytest.raises(ContractError):
        lb.ProbeVector(np.array([1.0, 1.0]))


def _setup(kind, H=3, D=2, T=8, seed=0):
    model = init_model(kind, D, H, seed)
    rng = np.random.default_rng(seed)
    model = model.with_flat(model.flatten() + 0.3 * rng.standard_normal(model.size))
    task = TaskConfig(D=D, T=T, lags=(1, 2), coefficients=(0.5, 0.3), noise_std=0.2, seed=seed)
    return model, generate_task(task, 1, seed + 1)


@pytest.mark.parametrize("kind", KIND_TAGS)
def test_alignments_match_finite_difference_oracle(kind):
    model, seq = _setup(kind, seed=KIND_TAGS.index(kind))
    probe = lb.draw_probe(model.size, 11)
    anchor, lag = 6, 3
    zeta = lb.neuron_alignments(model, seq, anchor, lag, probe)[0]

    states, caches = cells.run_sequence(model.cell, seq.inputs)
    h = states[anchor].h[0]
    delta = 2 * (h @ model.w_out + model.b_out - seq.targets[0, anchor]) * model.w_out
    src = anchor - lag
    prev = CellState.zeros(model.cell, 1) if src == 0 else states[src - 1]
    theta, eps = model.cell.flatten(), 1e-6
    w = probe.w[:theta.size]

    def coord(cell):
        s, _ = cells.step(cell, seq.inputs[:, src], prev)
        return (s.c if kind == cells.LSTM else s.h)[0]

    dv = (coord(model.cell.with_flat(theta + eps * w)) - coord(model.cell.with_flat(theta - eps * w))) / (2 * eps)
    assert np.allclose(zeta, delta * dv, atol=1e-8)


def test_readout_probe_gives_zero_alignment():
    model, seq = _setup("GRU")
    w = np.zeros(model.size)
    w[model.cell.size] = 1.0  # first readout weight
    z = lb.neuron_alignments(model, seq, 5, 2, lb.ProbeVector(w))
    assert not z.any()


def test_alignment_sign_flips_with_probe():
    model, seq = _setup("DiagGate")
    p = lb.draw_probe(model.size, 2)
    a = lb.neuron_alignments(model, seq, 5, 2, p)
    b = lb.neuron_alignments(model, seq, 5, 2, lb.ProbeVector(-p.w))
    assert np.allclose(a, -b, atol=1e-15)


def test_alignment_rejects_bad_lag():
    model, seq = _setup("LSTM")
    with pytest.raises(ContractError):
        lb.neuron_alignments(model, seq, 2, 3, lb.draw_probe(model.size, 0))


def test_matched_statistic_examples():
    assert lb.matched_statistic([2.0], [0.5], [1.0]) == 1.0
    assert lb.matched_statistic(np.zeros(4), np.ones(4), np.ones(4)) == 0.0
    with pytest.raises(ContractError):
        lb.matched_statistic([1.0, 2.0], [1.0], [1.0])


def test_alignment_coefficient_examples():
    assert lb.m_bar_mu([1.0, 3.0], [2.0, 4.0]) == pytest.approx(3.5)
    with pytest.raises(ContractError):
        lb.m_bar_mu([0.0, 0.0], [1.0, 1.0])
    z = np.tile([0.7, -0.2, 1.5], (6, 1))
    signs, abs_m, _ = lb.estimate_alignment(z, np.ones(3))
    assert np.allclose(abs_m, [0.7, 0.2, 1.5]) and list(signs) == [1, -1, 1]


def test_mean_samples_give_nonnegative_statistic():
    rng = np.random.default_rng(0)
    for _ in range(50):
        z = rng.standard_normal((20, 5)) + rng.standard_normal(5)
        mu = rng.uniform(0, 2, 5)
        signs, abs_m, _ = lb.estimate_alignment(z, mu)
        S = lb.matched_statistic(z.mean(axis=0), mu, signs)
        assert S == pytest.approx(np.sum(mu * abs_m), abs=1e-12) and S >= 0


def test_collect_matched_samples_shapes_and_signs():
    model = init_model("GRU", 3, 4, 1)
    data = generate_task(TaskConfig(D=3, T=16, lags=(2,), coefficients=(1.0,), seed=1), 10, 2)
    lags = np.array([1, 2, 4])
    ms, tensor = lb.collect_matched_samples(model, data, lags, lb.draw_probe(model.size, 3), chunk=3)
    assert ms.samples.shape == (3, 10) and tensor.values.shape == (3, 4)
    assert ms.signs.shape == (3, 4) and np.all(ms.abs_m >= 0)
    ms2, t2 = lb.collect_matched_samples(model, data, lags, lb.draw_probe(model.size, 3), chunk=10)
    assert np.allclose(ms.samples, ms2.samples, atol=1e-15) and np.allclose(tensor.values, t2.values)


def _matched(rows):
    rows = np.asarray(rows)
    return lb.MatchedSamples(np.arange(1, rows.shape[0] + 1), rows)


def test_fit_noise_recovers_injected_parameters():
    rows = [sample_sas(StableParams(1.5, s), 100_000, 20 + i) for i, s in enumerate((0.5, 1.0, 3.0))]
    prof = lb.fit_noise(_matched(rows))
    assert np.all(np.abs(prof.alpha_hat - 1.5) <= 0.05)
    assert np.allclose(prof.sigma_hat, [0.5, 1.0, 3.0], rtol=0.05)
    assert abs(prof.alpha_pooled - 1.5) <= 0.05


def test_fit_noise_gaussian_and_location_free():
    rng = np.random.default_rng(5)
    rows = rng.standard_normal((3, 100_000))
    prof = lb.fit_noise(_matched(rows))
    assert prof.alpha_pooled >= 1.95
    shifted = lb.fit_noise(_matched(rows + 40.0))
    assert np.allclose(shifted.sigma_hat, prof.sigma_hat, rtol=1e-12)


def test_threshold_examples():
    assert lb.threshold_values(1.0, 1.0, 100, 2.0, EPS_UNIT_LOG) == pytest.approx(0.1, rel=1e-12)
    assert lb.threshold_values(1.0, 1.0, 400, 2.0, EPS_UNIT_LOG) == pytest.approx(0.05, rel=1e-12)
    assert lb.threshold_values(1.0, 1.0, 1000, 1.5, EPS_UNIT_LOG) == pytest.approx(0.1, rel=1e-12)
    assert lb.threshold_values(1.0, 1e-13, 100, 2.0) == np.inf
    with pytest.raises(ContractError):
        lb.threshold_values(1.0, 1.0, 100, 2.0, epsilon=0.5)


def test_threshold_rejects_heavy_pooled_alpha():
    rows = [sample_sas(StableParams(0.8, 1.0), 5000, s) for s in (3, 4)]
    prof = lb.fit_noise(_matched(rows))
    assert prof.alpha_pooled <= 1
    with pytest.raises(StableDomainError):
        lb.detectability_threshold(prof, 1.0, 100)
    env = tr.EnvelopeCurve(np.array([1, 2]), np.array([1.0, 0.5]))
    rep = lb.window_report(env, prof, 1.0, [10, 100])
    assert not rep.available and "alpha" in rep.reason


def test_sample_complexity_examples():
    assert lb.sample_complexity(0.1, 1.0, 1.0, 2.0, EPS_UNIT_LOG) == pytest.approx(100, rel=1e-12)
    assert lb.sample_complexity(0.2, 1.0, 1.0, 2.0, EPS_UNIT_LOG) == pytest.approx(25, rel=1e-12)
    assert lb.sample_complexity(0.0, 1.0, 1.0, 2.0) == math.inf
    rng = np.random.default_rng(1)
    for _ in range(200):
        alpha = rng.uniform(1.05, 2.0)
        sigma, m, eps = rng.uniform(0.1, 5), rng.uniform(0.1, 5), rng.uniform(0.01, 0.45)
        N = 10 ** rng.uniform(0, 6)
        th = lb.threshold_values(sigma, m, N, alpha, eps)
        assert lb.sample_complexity(th, sigma, m, alpha, eps) == pytest.approx(N, rel=1e-9)


def _const_threshold(lags, value):
    n = len(lags)
    return lb.ThresholdCurve(np.asarray(lags), np.full(n, value), 1.0, 0.05, 1.0, 2.0, np.ones(n), np.ones(n))


def test_empirical_window_examples():
    lags = np.arange(1, 11)
    env = tr.EnvelopeCurve(lags, 2.0 ** -lags)
    assert lb.empirical_window(env, _const_threshold(lags, 0.1)) == 3
    assert lb.empirical_window(env, _const_threshold(lags, 1.0)) == 0
    assert lb.empirical_window(env, _const_threshold(lags, 0.0)) == 10


def test_window_monotone_in_budget_and_alpha():
    rng = np.random.default_rng(2)
    lags = np.arange(1, 40)
    budgets = [10, 100, 1000, 10 ** 4, 10 ** 5]
    for _ in range(30):
        f = np.sort(rng.uniform(0, 1, lags.size))[::-1] * rng.uniform(0.1, 10)
        env = tr.EnvelopeCurve(lags, f)
        sigma, m = rng.uniform(0.5, 2, lags.size), rng.uniform(0.1, 1, lags.size)
        by_alpha = []
        for alpha in (1.2, 1.5, 2.0):
            H = [lb.empirical_window(env, lb.ThresholdCurve(
                lags, lb.threshold_values(sigma, m, N, alpha), N, 0.05, 1.0, alpha, sigma, m)) for N in budgets]
            assert H == sorted(H)
            by_alpha.append(H)
        assert all(a <= b for lo, hi in zip(by_alpha, by_alpha[1:]) for a, b in zip(lo, hi))


def test_threshold_complexity_duality():
    rng = np.random.default_rng(3)
    lags = np.arange(1, 30)
    for _ in range(50):
        f = rng.uniform(0, 1, lags.size) * np.exp(-0.1 * lags)
        env = tr.EnvelopeCurve(lags, f)
        sigma, m = rng.uniform(0.5, 2, lags.size), rng.uniform(0.1, 1, lags.size)
        alpha, N = rng.uniform(1.1, 2.0), int(10 ** rng.uniform(1, 6))
        th = lb.ThresholdCurve(lags, lb.threshold_values(sigma, m, N, alpha), N, 0.05, 1.0, alpha, sigma, m)
        need = lb.sample_complexity(f, sigma, m, alpha)
        ok = need <= N * (1 + 1e-12)
        assert lb.empirical_window(env, th) == (int(lags[ok].max()) if ok.any() else 0)


def test_theoretical_window_examples():
    w = lb.theoretical_window(lb.EXPONENTIAL, {"lam": 0.5}, 100, 2.0)
    assert w.level == pytest.approx(0.1) and w.window == 3
    lags = np.arange(1, 11)
    assert w.window == lb.empirical_window(tr.EnvelopeCurve(lags, 0.5 ** lags), _const_threshold(lags, 0.1))
    a = lb.theoretical_window(lb.POLYNOMIAL, {"beta": 2.0}, 1e4, 2.0)
    b = lb.theoretical_window(lb.POLYNOMIAL, {"beta": 2.0}, 1e8, 2.0)
    assert (a.window, b.window) == (10, 100)
    for N in (1e3, 1e5, 1e7):
        w2 = lb.theoretical_window(lb.EXPONENTIAL, {"lam": 0.8}, N, 2.0).window
        w15 = lb.theoretical_window(lb.EXPONENTIAL, {"lam": 0.8}, N, 1.5).window
        assert abs(w15 - 2 / 3 * w2) <= 1


def test_theoretical_window_large_values():
    w = lb.theoretical_window(lb.LOGARITHMIC, {}, 1e6, 2.0)
    assert w.window == math.inf or w.window >= 2 ** 52
    w = lb.theoretical_window(lb.LOGARITHMIC, {"c": 1.0}, 4, 2.0)
    f = lb.canonical_envelope(lb.LOGARITHMIC, {})
    assert f(w.window) >= w.level > f(w.window + 1)
    with pytest.raises(ContractError):
        lb.theoretical_window(lb.EXPONENTIAL, {"lam": 1.5}, 10, 2.0)
    with pytest.raises(ContractError):
        lb.canonical_envelope("stretched", {})


def _exp_env(n=40, lam=0.8):
    lags = np.arange(1, n + 1)
    return tr.EnvelopeCurve(lags, 3.0 * lam ** lags)


def test_sandwich_degenerate_bounds():
    v = lb.sandwich_check(_exp_env(), 1.5, 0.4, (1.5, 1.5), (0.4, 0.4), 1.7, 0.05, 1000)
    assert v.passed


def test_sandwich_randomized_within_bounds():
    rng = np.random.default_rng(4)
    env = _exp_env()
    for _ in range(100):
        sb = np.sort(rng.uniform(0.2, 3, 2))
        mb = np.sort(rng.uniform(0.05, 1, 2))
        sigma = rng.uniform(*sb, env.lag_grid.size)
        m = rng.uniform(*mb, env.lag_grid.size)
        v = lb.sandwich_check(env, sigma, m, sb, mb, rng.uniform(1.1, 2), rng.uniform(0.01, 0.4),
                              int(10 ** rng.uniform(0, 6)))
        assert v.passed, v.reason


def test_sandwich_reports_violating_lag():
    env = _exp_env()
    sigma = np.ones(env.lag_grid.size)
    sigma[6] = 5.0
    v = lb.sandwich_check(env, sigma, 0.5, (0.5, 2.0), (0.5, 0.5), 2.0, 0.05, 100)
    assert not v.passed and v.violating_lag == 7
