"""Forward dynamics, exact one-step Jacobians and per-step calculus for five gated cells.

Every function accepts an optional leading batch dimension: inputs of shape
``(..., D)`` and states of shape ``(..., H)``.  Jacobians come back with
shape ``(..., n, n)`` where ``n = H`` (``2H`` for LSTM, state ordered
``[h; c]``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

CONST = "ConstGate"
SHARED = "SharedGate"
DIAG = "DiagGate"
GRU = "GRU"
LSTM = "LSTM"
KIND_TAGS = (CONST, SHARED, DIAG, GRU, LSTM)

DEFAULT_CONST_GATE = 0.5

# affine maps ``W x + U h + b`` present in each kind (SharedGate's scalar gate
# is handled separately)
_AFFINE = {
    CONST: ("h",),
    SHARED: ("h",),
    DIAG: ("s", "h"),
    GRU: ("z", "r", "h"),
    LSTM: ("i", "f", "o", "g"),
}


class ContractError(ValueError):
    """Shapes, kinds or caches do not match."""


@dataclass(frozen=True)
class CellKind:
    tag: str
    const_gate_value: float | None = None

    def __post_init__(self):
        if self.tag not in KIND_TAGS:
            raise ContractError(f"unknown cell kind {self.tag!r}; expected one of {KIND_TAGS}")
        if self.tag == CONST:
            s = DEFAULT_CONST_GATE if self.const_gate_value is None else float(self.const_gate_value)
            if not 0.0 < s < 1.0:
                raise ContractError(f"const_gate_value must lie in (0, 1), got {s}")
            object.__setattr__(self, "const_gate_value", s)
        elif self.const_gate_value is not None:
            raise ContractError("const_gate_value is only meaningful for ConstGate")

    @classmethod
    def parse(cls, spec) -> "CellKind":
        if isinstance(spec, CellKind):
            return spec
        if isinstance(spec, dict):
            return cls(spec["tag"], spec.get("const_gate_value"))
        return cls(str(spec))

    def to_dict(self) -> dict:
        d = {"tag": self.tag}
        if self.const_gate_value is not None:
            d["const_gate_value"] = self.const_gate_value
        return d

    @property
    def state_mult(self) -> int:
        return 2 if self.tag == LSTM else 1


def param_shapes(kind: CellKind, D: int, H: int) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map of the trainable arrays of one cell."""
    shapes: dict[str, tuple[int, ...]] = {}
    if kind.tag == SHARED:
        shapes.update(w_s=(D,), u_s=(H,), b_s=(1,))
    for g in _AFFINE[kind.tag]:
        shapes[f"W_{g}"] = (H, D)
        shapes[f"U_{g}"] = (H, H)
        shapes[f"b_{g}"] = (H,)
    return shapes


@dataclass(frozen=True)
class CellParams:
    kind: CellKind
    D: int
    H: int
    arrays: dict[str, np.ndarray]

    def __post_init__(self):
        expected = param_shapes(self.kind, self.D, self.H)
        if list(self.arrays) != list(expected):
            if set(self.arrays) != set(expected):
                raise ContractError(
                    f"{self.kind.tag} expects arrays {sorted(expected)}, got {sorted(self.arrays)}")
            object.__setattr__(self, "arrays", {k: self.arrays[k] for k in expected})
        frozen = {}
        for name, shape in expected.items():
            a = np.array(self.arrays[name], dtype=float)
            if a.shape != shape:
                raise ContractError(f"{name}: expected shape {shape}, got {a.shape}")
            if not np.all(np.isfinite(a)):
                raise ContractError(f"{name} has non-finite entries")
            a.setflags(write=False)
            frozen[name] = a
        object.__setattr__(self, "arrays", frozen)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())

    @property
    def state_dim(self) -> int:
        return self.kind.state_mult * self.H

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def with_flat(self, theta: np.ndarray) -> "CellParams":
        return CellParams(self.kind, self.D, self.H, unflatten(theta, param_shapes(self.kind, self.D, self.H)))

    def replace(self, **arrays) -> "CellParams":
        new = dict(self.arrays)
        new.update(arrays)
        return CellParams(self.kind, self.D, self.H, new)


def unflatten(theta, shapes: dict[str, tuple[int, ...]]) -> dict[str, np.ndarray]:
    theta = np.asarray(theta, dtype=float)
    out, k = {}, 0
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        out[name] = theta[k:k + n].reshape(shape)
        k += n
    if k != theta.size:
        raise ContractError(f"flat vector has {theta.size} entries, expected {k}")
    return out


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.where(np.diag(r) < 0.0, -1.0, 1.0)


def init_params(kind, D: int, H: int, seed) -> CellParams:
    """Orthogonal recurrent matrices, N(0, 1/D) input weights, zero biases.

    SharedGate's recurrent gate vector ``u_s`` is drawn N(0, 1/H).
    """
    kind = CellKind.parse(kind)
    if D < 1 or H < 1:
        raise ContractError(f"D and H must be >= 1, got D={D}, H={H}")
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(kind, D, H).items():
        if name.startswith("b_"):
            arrays[name] = np.zeros(shape)
        elif name.startswith("U_"):
            arrays[name] = _orthogonal(rng, H)
        elif name == "u_s":
            arrays[name] = rng.standard_normal(shape) / np.sqrt(H)
        else:
            arrays[name] = rng.standard_normal(shape) / np.sqrt(D)
    return CellParams(kind, D, H, arrays)


@dataclass
class CellState:
    h: np.ndarray
    c: np.ndarray | None = None

    @classmethod
    def zeros(cls, params: CellParams, batch_shape=()) -> "CellState":
        h = np.zeros(tuple(batch_shape) + (params.H,))
        c = np.zeros_like(h) if params.kind.tag == LSTM else None
        return cls(h, c)

    def stacked(self) -> np.ndarray:
        return self.h if self.c is None else np.concatenate([self.h, self.c], axis=-1)


@dataclass
class StepCache:
    """Everything the Jacobian, backward and tangent passes need for one step.

    ``act`` holds gate activations (sigmoid gates in (0, 1); the candidate
    ``g`` is a tanh output).  SharedGate's ``s`` keeps a trailing axis of 1.
    """
    kind: CellKind
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray | None
    act: dict[str, np.ndarray]
    h: np.ndarray
    c: np.ndarray | None = None
    tanh_c: np.ndarray | None = None
    pre: dict[str, np.ndarray] = field(default_factory=dict)

    def slope(self, name: str) -> np.ndarray:
        """Diagonal slope factor of an activation (sigma' or 1 - tanh^2)."""
        a = self.act[name]
        return 1.0 - a * a if name == "g" else a * (1.0 - a)


def _affine(p: CellParams, g: str, x, h):
    return x @ p[f"W_{g}"].T + h @ p[f"U_{g}"].T + p[f"b_{g}"]


def step(params: CellParams, x, state: CellState) -> tuple[CellState, StepCache]:
    kind = params.kind
    x = np.asarray(x, dtype=float)
    h_prev = np.asarray(state.h, dtype=float)
    if x.shape[-1] != params.D or h_prev.shape[-1] != params.H:
        raise ContractError(
            f"step expects x[..., {params.D}] and h[..., {params.H}], got {x.shape} and {h_prev.shape}")
    if x.shape[:-1] != h_prev.shape[:-1]:
        raise ContractError(f"batch shapes differ: {x.shape[:-1]} vs {h_prev.shape[:-1]}")
    tag = kind.tag
    c_prev = None
    pre, act = {}, {}

    if tag == LSTM:
        if state.c is None:
            raise ContractError("LSTM state needs a cell vector")
        c_prev = np.asarray(state.c, dtype=float)
        for g in ("i", "f", "o", "g"):
            pre[g] = _affine(params, g, x, h_prev)
        for g in ("i", "f", "o"):
            act[g] = expit(pre[g])
        act["g"] = np.tanh(pre["g"])
        c = act["f"] * c_prev + act["i"] * act["g"]
        tc = np.tanh(c)
        h = act["o"] * tc
        return CellState(h, c), StepCache(kind, x, h_prev, c_prev, act, h, c, tc, pre)

    if state.c is not None:
        raise ContractError(f"{tag} state has no cell vector")
    if tag == GRU:
        pre["z"] = _affine(params, "z", x, h_prev)
        pre["r"] = _affine(params, "r", x, h_prev)
        act["z"] = expit(pre["z"])
        act["r"] = expit(pre["r"])
        pre["g"] = x @ params["W_h"].T + (act["r"] * h_prev) @ params["U_h"].T + params["b_h"]
        act["g"] = np.tanh(pre["g"])
        s = act["z"]
    else:
        pre["g"] = _affine(params, "h", x, h_prev)
        act["g"] = np.tanh(pre["g"])
        if tag == DIAG:
            pre["s"] = _affine(params, "s", x, h_prev)
            act["s"] = expit(pre["s"])
        elif tag == SHARED:
            pre["s"] = (x @ params["w_s"] + h_prev @ params["u_s"] + params["b_s"][0])[..., None]
            act["s"] = expit(pre["s"])
        if tag == CONST:
            s = kind.const_gate_value
        else:
            s = act["s"]
    h = (1.0 - s) * h_prev + s * act["g"]
    return CellState(h), StepCache(kind, x, h_prev, None, act, h, pre=pre)


def run_sequence(params: CellParams, inputs, initial: CellState | None = None):
    """Unroll ``step`` over the time axis (axis -2 of ``inputs``).

    Returns ``(states, caches)``, each a list of length T.
    """
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim < 2 or inputs.shape[-2] < 1:
        raise ContractError(f"inputs must have shape (..., T, D) with T >= 1, got {inputs.shape}")
    state = CellState.zeros(params, inputs.shape[:-2]) if initial is None else initial
    states, caches = [], []
    for t in range(inputs.shape[-2]):
        state, cache = step(params, inputs[..., t, :], state)
        states.append(state)
        caches.append(cache)
    return states, caches


def _check_cache(params: CellParams, cache: StepCache):
    if cache.kind != params.kind:
        raise ContractError(f"cache from {cache.kind.tag} used with {params.kind.tag} parameters")


def _rows(v, M):
    """D(v) @ M for batched v."""
    return v[..., :, None] * M


def _eye_like(v):
    n = v.shape[-1]
    return np.broadcast_to(np.eye(n), v.shape[:-1] + (n, n))


def one_step_jacobian(params: CellParams, cache: StepCache) -> np.ndarray:
    """Exact d s_t / d s_{t-1} at the cached step."""
    _check_cache(params, cache)
    tag = params.kind.tag
    hp = cache.h_prev
    g = cache.act["g"]
    sg = 1.0 - g * g
    if tag == LSTM:
        i, f, o = cache.act["i"], cache.act["f"], cache.act["o"]
        tc = cache.tanh_c
        C = (_rows(cache.c_prev * f * (1 - f), params["U_f"])
             + _rows(i * sg, params["U_g"])
             + _rows(g * i * (1 - i), params["U_i"]))
        e = o * (1.0 - tc * tc)
        hh = _rows(tc * o * (1 - o), params["U_o"]) + _rows(e, C)
        hc = _rows(e * f, _eye_like(f))
        cc = _rows(f, _eye_like(f))
        top = np.concatenate([hh, hc], axis=-1)
        bottom = np.concatenate([C, cc], axis=-1)
        return np.concatenate([top, bottom], axis=-2)
    if tag == GRU:
        z, r = cache.act["z"], cache.act["r"]
        J = _eye_like(z) - _rows(z, _eye_like(z))
        J = J + _rows((g - hp) * z * (1 - z), params["U_z"])
        Uh_r = params["U_h"] * r[..., None, :]
        J = J + _rows(z * sg, Uh_r)
        inner = (params["U_h"] * (hp * r * (1 - r))[..., None, :]) @ params["U_r"]
        return J + _rows(z * sg, inner)
    if tag == DIAG:
        s = cache.act["s"]
        J = _eye_like(s) - _rows(s, _eye_like(s))
        J = J + _rows((g - hp) * s * (1 - s), params["U_s"])
        return J + _rows(s * sg, params["U_h"])
    if tag == SHARED:
        s = cache.act["s"]  # (..., 1)
        J = (1.0 - s)[..., None] * _eye_like(g)
        J = J + _rows(s * sg, params["U_h"])
        rank1 = ((s * (1 - s)) * (g - hp))[..., :, None] * params["u_s"]
        return J + rank1
    s = params.kind.const_gate_value
    return (1.0 - s) * _eye_like(g) + _rows(s * sg, params["U_h"])


def step_backward(params: CellParams, cache: StepCache, dh, dc=None):
    """Reverse-mode pass through one step.

    ``dh``/``dc`` are adjoints of ``h_t``/``c_t``.  Returns
    ``(dh_prev, dc_prev, grads)`` with parameter gradients summed over any
    batch axes.
    """
    _check_cache(params, cache)
    tag = params.kind.tag
    x, hp = cache.x, cache.h_prev
    g = cache.act["g"]
    sg = 1.0 - g * g
    grads = {}
    da = {}
    bx = x.reshape(-1, x.shape[-1])
    bh = hp.reshape(-1, hp.shape[-1])

    def acc(name, d, inp_h=None):
        d2 = d.reshape(-1, d.shape[-1])
        grads[f"W_{name}"] = d2.T @ bx
        grads[f"U_{name}"] = d2.T @ (bh if inp_h is None else inp_h.reshape(-1, inp_h.shape[-1]))
        grads[f"b_{name}"] = d2.sum(axis=0)

    dc_prev = None
    if tag == LSTM:
        i, f, o = cache.act["i"], cache.act["f"], cache.act["o"]
        tc = cache.tanh_c
        dc_tot = dh * o * (1.0 - tc * tc)
        if dc is not None:
            dc_tot = dc_tot + dc
        da["o"] = dh * tc * o * (1 - o)
        da["f"] = dc_tot * cache.c_prev * f * (1 - f)
        da["i"] = dc_tot * g * i * (1 - i)
        da["g"] = dc_tot * i * sg
        dc_prev = dc_tot * f
        dh_prev = np.zeros_like(hp)
        for name in ("i", "f", "o", "g"):
            acc(name, da[name])
            dh_prev = dh_prev + da[name] @ params[f"U_{name}"]
        return dh_prev, dc_prev, {k: grads[k] for k in param_shapes(params.kind, params.D, params.H)}

    if tag == GRU:
        z, r = cache.act["z"], cache.act["r"]
        dh_prev = dh * (1.0 - z)
        da_g = dh * z * sg
        acc("h", da_g, inp_h=r * hp)
        d_rh = da_g @ params["U_h"]
        dh_prev = dh_prev + d_rh * r
        da_r = d_rh * hp * r * (1 - r)
        da_z = dh * (g - hp) * z * (1 - z)
        acc("z", da_z)
        acc("r", da_r)
        dh_prev = dh_prev + da_z @ params["U_z"] + da_r @ params["U_r"]
    else:
        if tag == CONST:
            s = params.kind.const_gate_value
        else:
            s = cache.act["s"]
        dh_prev = dh * (1.0 - s)
        da_g = dh * s * sg
        acc("h", da_g)
        dh_prev = dh_prev + da_g @ params["U_h"]
        if tag == DIAG:
            da_s = dh * (g - hp) * s * (1 - s)
            acc("s", da_s)
            dh_prev = dh_prev + da_s @ params["U_s"]
        elif tag == SHARED:
            da_s = np.sum(dh * (g - hp), axis=-1, keepdims=True) * s * (1 - s)
            d1 = da_s.reshape(-1, 1)
            grads["w_s"] = (d1 * bx).sum(axis=0)
            grads["u_s"] = (d1 * bh).sum(axis=0)
            grads["b_s"] = d1.sum(axis=0)
            dh_prev = dh_prev + da_s * params["u_s"]
    return dh_prev, dc_prev, {k: grads[k] for k in param_shapes(params.kind, params.D, params.H)}


def step_tangent(params: CellParams, cache: StepCache, dparams: dict[str, np.ndarray]):
    """Forward-mode derivative of ``(h_t, c_t)`` along ``dparams`` with inputs held fixed.

    This is the immediate parameter sensitivity ``(d s_t / d theta) . v`` of
    one step, i.e. the previous state is not perturbed.
    Returns ``(dh, dc)``; ``dc`` is None except for LSTM.
    """
    _check_cache(params, cache)
    tag = params.kind.tag
    x, hp = cache.x, cache.h_prev
    g = cache.act["g"]
    sg = 1.0 - g * g

    def dpre(name, inp_h=None):
        h_in = hp if inp_h is None else inp_h
        return x @ dparams[f"W_{name}"].T + h_in @ dparams[f"U_{name}"].T + dparams[f"b_{name}"]

    if tag == LSTM:
        i, f, o = cache.act["i"], cache.act["f"], cache.act["o"]
        tc = cache.tanh_c
        di = dpre("i") * i * (1 - i)
        df = dpre("f") * f * (1 - f)
        do = dpre("o") * o * (1 - o)
        dg = dpre("g") * sg
        dc = df * cache.c_prev + di * g + i * dg
        dh = do * tc + o * (1.0 - tc * tc) * dc
        return dh, dc
    if tag == GRU:
        z, r = cache.act["z"], cache.act["r"]
        dz = dpre("z") * z * (1 - z)
        dr = dpre("r") * r * (1 - r)
        dg = (dpre("h", inp_h=r * hp) + (dr * hp) @ params["U_h"].T) * sg
        return dz * (g - hp) + z * dg, None
    dg = dpre("h") * sg
    if tag == CONST:
        return params.kind.const_gate_value * dg, None
    s = cache.act["s"]
    if tag == DIAG:
        ds = dpre("s") * s * (1 - s)
    else:
        ds = (x @ dparams["w_s"] + hp @ dparams["u_s"] + dparams["b_s"][0])[..., None] * s * (1 - s)
    return ds * (g - hp) + s * dg, None
