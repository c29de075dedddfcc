"""Jacobian-product transport, its first-order expansion, and effective learning rates.

Time indexing is 0-based: ``caches[k]`` describes the step producing state
``s_k``.  For an anchor ``k`` and lag ``l`` the transport runs over steps
``k-l+1 .. k`` and maps ``s_{k-l}`` to ``s_k``.

For every cell the one-step Jacobian splits as ``J = T + R`` with a
retention part ``T`` that is diagonal (block upper-triangular for LSTM).
Because the effective rates keep only diagonals, a single mixing insertion
contributes ``prod(retention) * diag(R_p) / retention_p``; the helpers below
exploit that to avoid materialising any ``H x H`` products.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cells import CONST, DIAG, GRU, LSTM, SHARED, CellParams, ContractError, StepCache

ZEROTH = "zeroth_only"
FIRST = "zeroth_plus_first"
ORDERS = (ZEROTH, FIRST)

_TINY = 1e-300


def jacobian_product(jacobians, size: int | None = None) -> np.ndarray:
    """``J_t @ ... @ J_{l+1}`` for jacobians listed in time order ``l+1 .. t``."""
    jacobians = [np.asarray(J, dtype=float) for J in jacobians]
    if not jacobians:
        if size is None:
            raise ContractError("empty product needs an explicit size")
        return np.eye(size)
    n = jacobians[0].shape[-1]
    M = np.eye(n)
    for J in jacobians:
        if J.shape[-2:] != (n, n):
            raise ContractError(f"jacobian of shape {J.shape} in a product of {n}x{n} matrices")
        M = J @ M
    return M


def first_order_transport(retention, mixing) -> np.ndarray:
    """Zeroth plus single-insertion terms of ``prod_j (T_j + R_j)``.

    Both lists are in time order.  Returns
    ``T_{t:l} + sum_p T_{t:p} R_p T_{p-1:l}``.
    """
    Ts = [np.asarray(T, dtype=float) for T in retention]
    Rs = [np.asarray(R, dtype=float) for R in mixing]
    if len(Ts) != len(Rs):
        raise ContractError("retention and mixing lists differ in length")
    if not Ts:
        raise ContractError("need at least one factor")
    n = Ts[0].shape[-1]
    for A in Ts + Rs:
        if A.shape[-2:] != (n, n):
            raise ContractError(f"factor of shape {A.shape} in an expansion of {n}x{n} matrices")
    m = len(Ts)
    # prefix[i] = T_{i-1} ... T_0 ; suffix[i] = T_{m-1} ... T_{i}
    prefix = [np.eye(n)]
    for T in Ts:
        prefix.append(T @ prefix[-1])
    suffix = [np.eye(n)] * (m + 1)
    for i in range(m - 1, -1, -1):
        suffix[i] = suffix[i + 1] @ Ts[i]
    out = prefix[m].copy()
    for p in range(m):
        out += suffix[p + 1] @ Rs[p] @ prefix[p]
    return out


def retention_split(params: CellParams, cache: StepCache, jacobian: np.ndarray | None = None):
    """``(T, R)`` with ``J = T + R`` for one cached step (explicit matrices)."""
    from .cells import one_step_jacobian

    J = one_step_jacobian(params, cache) if jacobian is None else jacobian
    H = params.H
    T = np.zeros_like(J)
    tag = params.kind.tag
    idx = np.arange(H)
    if tag == LSTM:
        f = cache.act["f"]
        e = cache.act["o"] * (1.0 - cache.tanh_c ** 2)
        T[..., idx, H + idx] = e * f
        T[..., H + idx, H + idx] = f
    else:
        T[..., idx, idx] = _retention(params, cache)
    return T, J - T


def _retention(params: CellParams, cache: StepCache) -> np.ndarray:
    tag = params.kind.tag
    g = cache.act["g"]
    if tag == LSTM:
        return cache.act["f"]
    if tag == GRU:
        return 1.0 - cache.act["z"]
    if tag == CONST:
        return np.full_like(g, 1.0 - params.kind.const_gate_value)
    return np.broadcast_to(1.0 - cache.act["s"], g.shape)


def _diag_of_mixing(params: CellParams, cache: StepCache) -> np.ndarray:
    """Diagonal of ``R`` (the h->h block of ``R`` for LSTM)."""
    tag = params.kind.tag
    g, hp = cache.act["g"], cache.h_prev
    sg = 1.0 - g * g
    diag_u = lambda name: np.diagonal(params[name])  # noqa: E731
    if tag == LSTM:
        o = cache.act["o"]
        tc = cache.tanh_c
        e = o * (1.0 - tc * tc)
        return tc * o * (1 - o) * diag_u("U_o") + e * _diag_lstm_c(params, cache)
    if tag == GRU:
        z, r = cache.act["z"], cache.act["r"]
        # diag(U_h D(v) U_r) = (U_h * U_r^T) @ v
        cross = (hp * r * (1 - r)) @ (params["U_h"] * params["U_r"].T).T
        return (g - hp) * z * (1 - z) * diag_u("U_z") + z * sg * (diag_u("U_h") * r + cross)
    if tag == DIAG:
        s = cache.act["s"]
        return (g - hp) * s * (1 - s) * diag_u("U_s") + s * sg * diag_u("U_h")
    if tag == SHARED:
        s = cache.act["s"]
        return s * sg * diag_u("U_h") + s * (1 - s) * (g - hp) * params["u_s"]
    return params.kind.const_gate_value * sg * diag_u("U_h")


def _diag_lstm_c(params: CellParams, cache: StepCache) -> np.ndarray:
    """Diagonal of the c <- h block of the LSTM Jacobian."""
    i, f = cache.act["i"], cache.act["f"]
    g = cache.act["g"]
    return (cache.c_prev * f * (1 - f) * np.diagonal(params["U_f"])
            + i * (1 - g * g) * np.diagonal(params["U_g"])
            + g * i * (1 - i) * np.diagonal(params["U_i"]))


@dataclass
class TransportFactors:
    """Per-step diagonal factors stacked over time, shape ``(..., T, H)``."""
    tag: str
    retention: np.ndarray
    mixing: np.ndarray
    expression: np.ndarray | None = None   # LSTM e = o * (1 - tanh(c)^2)
    cell_mixing: np.ndarray | None = None  # LSTM diag of the c <- h block
    reset: np.ndarray | None = None        # GRU reset gate


def transport_factors(params: CellParams, caches) -> TransportFactors:
    caches = list(caches)
    if not caches:
        raise ContractError("no caches supplied")
    for c in caches:
        if c.kind != params.kind:
            raise ContractError(f"cache from {c.kind.tag} used with {params.kind.tag} parameters")
    stack = lambda xs: np.stack(xs, axis=-2)  # noqa: E731
    tag = params.kind.tag
    out = TransportFactors(
        tag,
        retention=stack([np.asarray(_retention(params, c)) for c in caches]),
        mixing=stack([_diag_of_mixing(params, c) for c in caches]),
    )
    if tag == LSTM:
        out.expression = stack([c.act["o"] * (1.0 - c.tanh_c ** 2) for c in caches])
        out.cell_mixing = stack([_diag_lstm_c(params, c) for c in caches])
    if tag == GRU:
        out.reset = stack([c.act["r"] for c in caches])
    return out


def _padded_cumsum(v: np.ndarray) -> np.ndarray:
    pad = np.zeros(v.shape[:-2] + (1, v.shape[-1]))
    return np.concatenate([pad, np.cumsum(v, axis=-2)], axis=-2)


def _window(cum: np.ndarray, hi: np.ndarray, lo: np.ndarray) -> np.ndarray:
    """``cum[..., hi, :] - cum[..., lo, :]`` broadcast over (anchor, lag)."""
    return cum[..., hi, :] - cum[..., lo, :]


def validate_lags_anchors(lags, anchors, T: int):
    lags = np.asarray(lags, dtype=int)
    anchors = np.asarray(anchors, dtype=int)
    if lags.ndim != 1 or lags.size == 0 or np.any(lags < 1) or np.any(np.diff(lags) <= 0):
        raise ContractError("lag grid must be strictly increasing integers >= 1")
    if anchors.ndim != 1 or anchors.size == 0:
        raise ContractError("need at least one anchor")
    if anchors.min() - lags.max() < 0 or anchors.max() >= T:
        raise ContractError(
            f"anchors {anchors.min()}..{anchors.max()} with max lag {lags.max()} exceed "
            f"the available history of a length-{T} sequence")
    return lags, anchors


def default_anchors(T: int, max_lag: int, stride: int = 1) -> np.ndarray:
    """All anchors whose lag-``max_lag`` source is a computed state."""
    if max_lag >= T:
        raise ContractError(f"max lag {max_lag} leaves no anchors in a length-{T} sequence")
    return np.arange(max_lag, T, max(1, int(stride)))


def rate_grid(factors: TransportFactors, lags, anchors, mu: float = 1.0, order: str = FIRST) -> np.ndarray:
    """Effective rates for every (anchor, lag, neuron): shape ``(..., A, L, H)``."""
    if order not in ORDERS:
        raise ContractError(f"order must be one of {ORDERS}, got {order!r}")
    T = factors.retention.shape[-2]
    lags, anchors = validate_lags_anchors(lags, anchors, T)
    hi = anchors[:, None] + 1
    lo = anchors[:, None] - lags[None, :] + 1
    a = np.maximum(factors.retention, _TINY)
    log_a = _padded_cumsum(np.log(a))
    phi = np.exp(_window(log_a, hi, lo))  # product over steps k-l+1 .. k

    if factors.tag == LSTM:
        e = factors.expression
        e_anchor = e[..., anchors, :][..., :, None, :]
        rates = e_anchor * phi
        if order == FIRST:
            # p = k insertion: A_k e_{k-1} prod(f over k-l+1 .. k-1); needs l >= 2
            prev = np.maximum(anchors - 1, 0)
            phi_prev = np.exp(_window(log_a, prev[:, None] + 1, lo))
            A_k = factors.mixing[..., anchors, :][..., :, None, :]
            e_prev = e[..., prev, :][..., :, None, :]
            term_last = A_k * e_prev * phi_prev
            # p in k-l+2 .. k-1: e_k phi C_p e_{p-1} / f_p
            w = np.zeros_like(e)
            w[..., 1:, :] = factors.cell_mixing[..., 1:, :] * e[..., :-1, :] / a[..., 1:, :]
            K = _padded_cumsum(w)
            lo2 = np.minimum(lo + 1, hi - 1)
            inner = _window(K, hi - 1, lo2)
            gamma1 = term_last + e_anchor * phi * inner
            gamma1 = np.where(lags[None, :, None] >= 2, gamma1, 0.0)
            rates = rates + gamma1
        return mu * rates

    rates = phi.copy()
    if factors.tag == GRU:
        r = np.maximum(factors.reset, _TINY)
        log_r = _padded_cumsum(np.log(r))
        rates += np.exp(_window(log_r, hi, lo))
        rates += np.exp(_window(log_a + log_r, hi, lo))
    if order == FIRST:
        Q = _padded_cumsum(factors.mixing / a)
        rates += phi * _window(Q, hi, lo)
    return mu * rates


@dataclass
class EffRateTensor:
    lag_grid: np.ndarray
    values: np.ndarray
    order: str
    n_anchors: int
    n_sequences: int
    abs_values: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.lag_grid = np.asarray(self.lag_grid, dtype=int)
        self.values = np.asarray(self.values, dtype=float)
        if self.abs_values is None:
            self.abs_values = np.abs(self.values)
        self.abs_values = np.asarray(self.abs_values, dtype=float)
        if self.order not in ORDERS:
            raise ContractError(f"order must be one of {ORDERS}")
        if self.lag_grid.ndim != 1 or np.any(np.diff(self.lag_grid) <= 0) or self.lag_grid.min() < 1:
            raise ContractError("lag grid must be strictly increasing with min lag >= 1")
        if self.values.shape != (self.lag_grid.size, self.values.shape[-1]) or self.values.ndim != 2:
            raise ContractError(f"values must have shape (lags, H), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ContractError("effective rates must be finite")

    @property
    def H(self) -> int:
        return self.values.shape[1]

    def merge(self, other: "EffRateTensor") -> "EffRateTensor":
        """Sequence-weighted average with another tensor on the same grid."""
        if not np.array_equal(self.lag_grid, other.lag_grid) or self.order != other.order:
            raise ContractError("cannot merge tensors with different grids or orders")
        n1, n2 = self.n_sequences, other.n_sequences
        w1, w2 = n1 / (n1 + n2), n2 / (n1 + n2)
        return EffRateTensor(self.lag_grid, w1 * self.values + w2 * other.values, self.order,
                             self.n_anchors, n1 + n2, w1 * self.abs_values + w2 * other.abs_values)


def tensor_from_grid(grid: np.ndarray, lags, order: str) -> EffRateTensor:
    """Average an ``(..., A, L, H)`` rate grid over sequences and anchors."""
    grid = np.asarray(grid)
    A = grid.shape[-3]
    n_seq = int(np.prod(grid.shape[:-3])) if grid.ndim > 3 else 1
    flat = grid.reshape((-1,) + grid.shape[-2:])
    return EffRateTensor(np.asarray(lags), flat.mean(axis=0), order, A, n_seq,
                         np.abs(flat).mean(axis=0))


def effective_rates(params: CellParams, caches, lag_grid, anchors=None, mu: float = 1.0,
                    order: str = FIRST) -> EffRateTensor:
    """Per-lag, per-neuron effective learning rates averaged over anchors.

    ``caches`` come from :func:`cells.run_sequence`; a leading batch axis
    is averaged as well (sequences are weighted equally).
    """
    factors = transport_factors(params, caches)
    T = factors.retention.shape[-2]
    lags = np.asarray(lag_grid, dtype=int)
    if anchors is None:
        anchors = default_anchors(T, int(lags.max()))
    grid = rate_grid(factors, lags, anchors, mu, order)
    return tensor_from_grid(grid, lags, order)


@dataclass
class EnvelopeCurve:
    lag_grid: np.ndarray
    f_values: np.ndarray

    def __post_init__(self):
        self.lag_grid = np.asarray(self.lag_grid, dtype=int)
        self.f_values = np.asarray(self.f_values, dtype=float)
        if self.lag_grid.shape != self.f_values.shape:
            raise ContractError("lag grid and envelope values differ in length")
        if np.any(self.f_values < 0):
            raise ContractError("envelope values must be nonnegative")


def envelope(tensor: EffRateTensor) -> EnvelopeCurve:
    """l1 aggregation over neurons of the mean absolute effective rate."""
    return EnvelopeCurve(tensor.lag_grid.copy(), tensor.abs_values.sum(axis=1))


def make_lag_grid(lag_min: int, lag_max: int, count: int) -> np.ndarray:
    """``count`` uniformly spaced lags in [min, max], rounded and deduplicated."""
    if lag_min < 1 or lag_max < lag_min or count < 1:
        raise ContractError(f"invalid lag grid spec ({lag_min}, {lag_max}, {count})")
    if count == 1:
        return np.array([int(lag_min)])
    return np.unique(np.rint(np.linspace(lag_min, lag_max, count)).astype(int))
