"""Delayed-regression task, linear-readout model, full BPTT and the optimizers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import cells
from .cells import CellKind, CellParams, ContractError

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "momentum", "adamw")


class ConfigError(ValueError):
    """A configuration value violates its declared domain."""


class TrainingError(RuntimeError):
    """Training produced non-finite values."""


@dataclass(frozen=True)
class TaskConfig:
    D: int = 16
    T: int = 1024
    lags: tuple[int, ...] = (32, 64, 128, 192, 256)
    coefficients: tuple[float, ...] = (0.6, 0.5, 0.4, 0.32, 0.26)
    noise_std: float = 0.3
    u: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lags", tuple(int(l) for l in self.lags))
        object.__setattr__(self, "coefficients", tuple(float(c) for c in self.coefficients))
        if self.D < 1 or self.T < 2:
            raise ConfigError(f"task.D must be >= 1 and task.T >= 2 (got D={self.D}, T={self.T})")
        if not self.lags or any(l < 1 for l in self.lags) or list(self.lags) != sorted(set(self.lags)):
            raise ConfigError("task.lags must be increasing positive integers")
        if len(self.lags) != len(self.coefficients):
            raise ConfigError("task.lags and task.coefficients differ in length")
        if max(self.lags) >= self.T:
            raise ConfigError(f"task.lags: max lag {max(self.lags)} must be < task.T = {self.T}")
        if self.noise_std < 0:
            raise ConfigError("task.noise_std must be >= 0")
        if self.u is None:
            v = np.random.default_rng(self.seed).standard_normal(self.D)
            object.__setattr__(self, "u", tuple(float(a) for a in v / np.linalg.norm(v)))
        else:
            v = np.asarray(self.u, dtype=float)
            if v.shape != (self.D,) or abs(np.linalg.norm(v) - 1.0) > 1e-12:
                raise ConfigError("task.u must be a unit vector of length D")
            object.__setattr__(self, "u", tuple(float(a) for a in v))

    @property
    def max_lag(self) -> int:
        return max(self.lags)


@dataclass
class Dataset:
    inputs: np.ndarray   # (N, T, D)
    targets: np.ndarray  # (N, T)
    mask: np.ndarray     # (N, T) bool, False in the burn-in region

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.targets[idx], self.mask[idx])


def generate_task(cfg: TaskConfig, n_sequences: int, seed) -> Dataset:
    """``y_t = sum_k c_k u.x_{t - l_k} + eps_t``, valid for 0-based ``t >= max lag``."""
    if n_sequences < 1:
        raise ConfigError("n_sequences must be >= 1")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_sequences, cfg.T, cfg.D))
    eps = rng.standard_normal((n_sequences, cfg.T)) * cfg.noise_std
    proj = x @ np.asarray(cfg.u)
    y = np.zeros((n_sequences, cfg.T))
    L = cfg.max_lag
    for lag, c in zip(cfg.lags, cfg.coefficients):
        y[:, L:] += c * proj[:, L - lag:cfg.T - lag]
    y[:, L:] += eps[:, L:]
    mask = np.zeros((n_sequences, cfg.T), dtype=bool)
    mask[:, L:] = True
    return Dataset(x, y, mask)


@dataclass(frozen=True)
class ModelParams:
    cell: CellParams
    w_out: np.ndarray
    b_out: float = 0.0

    def __post_init__(self):
        w = np.array(self.w_out, dtype=float)
        if w.shape != (self.cell.H,):
            raise ContractError(f"readout must have shape ({self.cell.H},), got {w.shape}")
        w.setflags(write=False)
        object.__setattr__(self, "w_out", w)
        object.__setattr__(self, "b_out", float(self.b_out))

    @property
    def kind(self) -> CellKind:
        return self.cell.kind

    @property
    def size(self) -> int:
        return self.cell.size + self.cell.H + 1

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.cell.flatten(), self.w_out, [self.b_out]])

    def with_flat(self, theta) -> "ModelParams":
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.size:
            raise ContractError(f"flat vector has {theta.size} entries, expected {self.size}")
        n = self.cell.size
        H = self.cell.H
        return ModelParams(self.cell.with_flat(theta[:n]), theta[n:n + H], theta[n + H])

    def names(self) -> list[str]:
        return list(self.cell.arrays) + ["w_out", "b_out"]


def init_model(kind, D: int, H: int, seed) -> ModelParams:
    """Cell per :func:`cells.init_params` plus an N(0, 1/H) readout and zero bias."""
    ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    cell_ss, out_ss = ss.spawn(2)
    cell = cells.init_params(kind, D, H, cell_ss)
    w = np.random.default_rng(out_ss).standard_normal(H) / np.sqrt(H)
    return ModelParams(cell, w, 0.0)


@dataclass
class ForwardCache:
    caches: list
    predictions: np.ndarray  # (N, T)
    residuals: np.ndarray    # (N, T), zero where masked
    mask: np.ndarray
    n_valid: int
    loss_scale: float = 1.0


def forward_loss(model: ModelParams, batch: Dataset, loss_scale: float = 1.0):
    """Mean squared error over valid steps; returns ``(loss, ForwardCache)``."""
    states, caches = cells.run_sequence(model.cell, batch.inputs)
    hs = np.stack([s.h for s in states], axis=-2)
    pred = hs @ model.w_out + model.b_out
    mask = np.asarray(batch.mask, dtype=bool)
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise ContractError("batch has no valid targets")
    resid = np.where(mask, pred - batch.targets, 0.0)
    loss = loss_scale * float(np.sum(resid * resid)) / n_valid
    return loss, ForwardCache(caches, pred, resid, mask, n_valid, loss_scale)


@dataclass
class GradientBundle:
    grads: dict[str, np.ndarray]
    deltas: np.ndarray | None = None  # (N, T, H): dL/dh_t from the loss term at t

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.ravel(g) for g in self.grads.values()])

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(np.square(g))) for g in self.grads.values())))

    def scaled(self, factor: float) -> "GradientBundle":
        return GradientBundle({k: factor * g for k, g in self.grads.items()}, self.deltas)


def bptt_gradients(model: ModelParams, batch: Dataset, fc: ForwardCache) -> GradientBundle:
    """Exact reverse-mode gradients through the full unroll."""
    T = batch.inputs.shape[-2]
    if len(fc.caches) != T:
        raise ContractError("forward cache does not match the batch length")
    dpred = 2.0 * fc.loss_scale * fc.residuals / fc.n_valid  # (N, T)
    hs = np.stack([c.h for c in fc.caches], axis=-2)
    grads = {name: np.zeros_like(a) for name, a in model.cell.arrays.items()}
    g_w = np.einsum("nt,nth->h", dpred, hs)
    g_b = np.array(dpred.sum())
    deltas = dpred[..., None] * model.w_out
    dh = np.zeros_like(fc.caches[0].h)
    dc = np.zeros_like(dh) if model.kind.tag == cells.LSTM else None
    for t in range(T - 1, -1, -1):
        dh = dh + deltas[..., t, :]
        dh, dc, step_grads = cells.step_backward(model.cell, fc.caches[t], dh, dc)
        for name, g in step_grads.items():
            grads[name] += g
    grads["w_out"] = g_w
    grads["b_out"] = g_b
    return GradientBundle(grads, deltas)


def clip_global_norm(g: GradientBundle, threshold: float) -> GradientBundle:
    if not threshold > 0:
        raise ConfigError("clip threshold must be positive")
    norm = g.global_norm()
    if norm > threshold:
        return g.scaled(threshold / norm)
    return g


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adamw"
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 512
    epochs: int = 500
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"train.optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise ConfigError("train.learning_rate must be > 0")
        if not self.clip_norm > 0:
            raise ConfigError("train.clip_norm must be > 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("train.weight_decay must be >= 0 and train.momentum in [0, 1)")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas) or not self.eps > 0:
            raise ConfigError("train.betas must be two values in [0, 1) and train.eps > 0")


@dataclass
class OptimizerState:
    kind: str
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def optimizer_step(state: OptimizerState, model: ModelParams, g: GradientBundle, cfg: TrainConfig):
    """One parameter update; returns ``(model', state')``."""
    if state.kind != cfg.optimizer:
        raise ContractError(f"optimizer state is for {state.kind!r}, config asks for {cfg.optimizer!r}")
    grad = g.flatten()
    if not np.all(np.isfinite(grad)):
        bad = [k for k, a in g.grads.items() if not np.all(np.isfinite(a))]
        raise TrainingError(f"non-finite gradient in {bad} at optimizer step {state.step + 1}")
    theta = model.flatten()
    lr = cfg.learning_rate
    t = state.step + 1
    if cfg.optimizer == "sgd":
        return model.with_flat(theta - lr * grad), replace(state, step=t)
    if cfg.optimizer == "momentum":
        v = grad.copy() if state.v is None else cfg.momentum * state.v + grad
        return model.with_flat(theta - lr * v), replace(state, step=t, v=v)
    b1, b2 = cfg.betas
    m = (1 - b1) * grad if state.m is None else b1 * state.m + (1 - b1) * grad
    v = (1 - b2) * grad * grad if state.v is None else b2 * state.v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    new = theta - lr * m_hat / (np.sqrt(v_hat) + cfg.eps) - lr * cfg.weight_decay * theta
    return model.with_flat(new), OptimizerState(cfg.optimizer, t, m, v)


@dataclass
class TrainResult:
    model: ModelParams
    losses: list[float] = field(default_factory=list)


def train(kind, model_seed, data: Dataset, cfg: TrainConfig, H: int = 128,
          init: ModelParams | None = None) -> TrainResult:
    """Mini-batch training with global-norm clipping.

    Shuffling draws from ``cfg.seed``; the loss history holds the mean
    pre-update batch loss of every epoch.
    """
    if len(data) == 0:
        raise ContractError("empty dataset")
    model = init if init is not None else init_model(kind, data.inputs.shape[-1], H, model_seed)
    state = OptimizerState(cfg.optimizer)
    rng = np.random.default_rng(cfg.seed)
    losses: list[float] = []
    n = len(data)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            batch = data.subset(np.sort(order[start:start + cfg.batch_size]))
            loss, fc = forward_loss(model, batch)
            if not np.isfinite(loss):
                raise TrainingError(f"{model.kind.tag}: loss became non-finite in epoch {epoch}")
            g = clip_global_norm(bptt_gradients(model, batch, fc), cfg.clip_norm)
            model, state = optimizer_step(state, model, g, cfg)
            total += loss * len(batch)
            count += len(batch)
        losses.append(total / count)
        log.debug("%s epoch %d loss %.6f", model.kind.tag, epoch, losses[-1])
    return TrainResult(model, losses)
