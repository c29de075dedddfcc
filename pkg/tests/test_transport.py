import numpy as np
import pytest

from gatedwindow import cells, transport as tr
from gatedwindow.cells import ContractError, KIND_TAGS
from gatedwindow.checks import random_cell, random_state


def trajectory(kind, H=3, D=2, T=9, seed=0):
    rng = np.random.default_rng(seed)
    p = random_cell(kind, D, H, rng)
    _, caches = cells.run_sequence(p, rng.standard_normal((T, D)), random_state(p, rng))
    return p, caches


def brute_force_rates(p, caches, anchor, lag, order):
    """Diagonal of the explicit (first-order) transport for one anchor and lag."""
    H = p.H
    steps = caches[anchor - lag + 1:anchor + 1]
    splits = [tr.retention_split(p, c) for c in steps]
    Ts = [s[0] for s in splits]
    if order == tr.ZEROTH:
        M = tr.jacobian_product(Ts)
    else:
        M = tr.first_order_transport(Ts, [s[1] for s in splits])
    if p.kind.tag == cells.LSTM:
        # c_{k-l} -> h_k block, then expressed through the anchor's output gate
        return np.diag(M[:H, H:])
    d = np.diag(M).copy()
    if p.kind.tag == cells.GRU:
        r = np.stack([c.act["r"] for c in steps])
        z = np.stack([tr._retention(p, c) for c in steps])
        d += np.prod(r, axis=0) + np.prod(z * r, axis=0)
    return d


def test_jacobian_product_order_and_identity():
    A = np.array([[1.0, 2.0], [0.0, 1.0]])
    B = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert np.array_equal(tr.jacobian_product([A, B]), B @ A)
    assert np.array_equal(tr.jacobian_product([], size=3), np.eye(3))
    with pytest.raises(ContractError):
        tr.jacobian_product([])
    with pytest.raises(ContractError):
        tr.jacobian_product([A, np.eye(3)])


def test_first_order_exact_cases():
    rng = np.random.default_rng(1)
    T1, R1 = rng.standard_normal((2, 3, 3))
    assert np.allclose(tr.first_order_transport([T1], [R1]), T1 + R1)
    Ts = list(rng.standard_normal((4, 3, 3)))
    assert np.allclose(tr.first_order_transport(Ts, [np.zeros((3, 3))] * 4), tr.jacobian_product(Ts))


@pytest.mark.parametrize("kind", KIND_TAGS)
def test_retention_split_sums_to_jacobian(kind):
    p, caches = trajectory(kind, seed=2)
    for c in caches:
        T, R = tr.retention_split(p, c)
        assert np.allclose(T + R, cells.one_step_jacobian(p, c), atol=1e-14)


def test_lstm_first_order_discrepancy_ratio():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p = random_cell("LSTM", 2, 3, rng)
        # mixing has no c-columns, so second-order terms reach the (h, c) block only from 3 steps on
        n = int(rng.integers(3, 5))
        _, caches = cells.run_sequence(p, rng.standard_normal((n, 2)), random_state(p, rng))
        splits = [tr.retention_split(p, c) for c in caches]

        def gap(eps):
            exact = tr.jacobian_product([T + eps * R for T, R in splits])
            approx = tr.first_order_transport([T for T, _ in splits], [eps * R for _, R in splits])
            return np.linalg.norm((exact - approx)[:3, 3:])

        eps = 0.02
        assert 3.5 <= gap(eps) / gap(eps / 2) <= 4.5


@pytest.mark.parametrize("order", tr.ORDERS)
@pytest.mark.parametrize("kind", KIND_TAGS)
def test_rate_grid_matches_explicit_products(kind, order):
    p, caches = trajectory(kind, T=10, seed=4)
    lags = np.array([1, 2, 3, 5])
    anchors = np.array([5, 7, 9])
    grid = tr.rate_grid(tr.transport_factors(p, caches), lags, anchors, 1.0, order)
    for i, k in enumerate(anchors):
        for j, l in enumerate(lags):
            assert np.allclose(grid[i, j], brute_force_rates(p, caches, k, l, order), atol=1e-12)


def test_lstm_zeroth_is_single_path():
    p, caches = trajectory("LSTM", H=4, T=12, seed=5)
    t = tr.effective_rates(p, caches, [3], anchors=[11], mu=0.1, order=tr.ZEROTH)
    f = np.prod([c.act["f"] for c in caches[9:12]], axis=0)
    e = caches[11].act["o"] * (1 - caches[11].tanh_c ** 2)
    assert np.allclose(t.values[0], 0.1 * e * f, rtol=1e-13)


def test_const_gate_closed_form_and_envelope():
    kind = cells.CellKind("ConstGate", 0.5)
    p = cells.init_params(kind, 3, 5, 6)
    _, caches = cells.run_sequence(p, np.random.default_rng(6).standard_normal((2, 20, 3)))
    lags = np.arange(1, 9)
    t = tr.effective_rates(p, caches, lags, mu=1e-3, order=tr.ZEROTH)
    assert np.allclose(t.values, 1e-3 * 0.5 ** lags[:, None], rtol=1e-13)
    env = tr.envelope(t)
    assert np.allclose(env.f_values, 5 * 1e-3 * 0.5 ** lags, rtol=1e-13)
    assert t.n_sequences == 2 and t.n_anchors == 12


@pytest.mark.parametrize("kind", KIND_TAGS)
def test_zeroth_rates_nonnegative_and_monotone(kind):
    p, caches = trajectory(kind, H=5, T=30, seed=7)
    t = tr.effective_rates(p, caches, np.arange(1, 16), order=tr.ZEROTH)
    assert np.all(t.values >= 0)
    assert np.all(np.diff(tr.envelope(t).f_values) <= 0)


def test_anchor_and_lag_validation():
    p, caches = trajectory("GRU", T=8, seed=8)
    f = tr.transport_factors(p, caches)
    with pytest.raises(ContractError):
        tr.rate_grid(f, [2, 1], [5])
    with pytest.raises(ContractError):
        tr.rate_grid(f, [4], [3])
    with pytest.raises(ContractError):
        tr.rate_grid(f, [1], [8])
    with pytest.raises(ContractError):
        tr.rate_grid(f, [1], [5], order="second")
    with pytest.raises(ContractError):
        tr.default_anchors(8, 8)


def test_tensor_invariants_and_merge():
    with pytest.raises(ContractError):
        tr.EffRateTensor(np.array([2, 1]), np.zeros((2, 3)), tr.ZEROTH, 1, 1)
    with pytest.raises(ContractError):
        tr.EffRateTensor(np.array([1, 2]), np.array([[1.0, np.nan], [0, 0]]), tr.ZEROTH, 1, 1)
    a = tr.EffRateTensor([1, 2], np.ones((2, 2)), tr.FIRST, 3, 1)
    b = tr.EffRateTensor([1, 2], 4 * np.ones((2, 2)), tr.FIRST, 3, 3)
    m = a.merge(b)
    assert m.n_sequences == 4 and np.allclose(m.values, 3.25)


def test_batched_rates_equal_mean_of_single_sequences():
    rng = np.random.default_rng(9)
    p = random_cell("DiagGate", 2, 3, rng)
    xs = rng.standard_normal((3, 12, 2))
    _, caches = cells.run_sequence(p, xs)
    joint = tr.effective_rates(p, caches, [1, 4], order=tr.FIRST)
    singles = [tr.effective_rates(p, cells.run_sequence(p, x)[1], [1, 4], order=tr.FIRST) for x in xs]
    assert np.allclose(joint.values, np.mean([s.values for s in singles], axis=0), atol=1e-15)


def test_lag_grid_rounding():
    g = tr.make_lag_grid(4, 256, 128)
    assert g[0] == 4 and g[-1] == 256 and g.size == 128
    assert np.all(np.diff(g) >= 1)
    assert list(tr.make_lag_grid(1, 3, 10)) == [1, 2, 3]
    with pytest.raises(ContractError):
        tr.make_lag_grid(0, 5, 3)
