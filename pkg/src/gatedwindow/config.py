"""Study configuration: strict JSON loading, validation, presets and seed sub-streams."""

from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import transport
from .cells import CellKind, ContractError, KIND_TAGS
from .learnability import DEFAULT_C_ALPHA, DEFAULT_EPSILON
from .training import ConfigError, TaskConfig, TrainConfig

_TASK_FIELDS = {f.name for f in dataclasses.fields(TaskConfig)}
_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed"}


@dataclass(frozen=True)
class LagGridSpec:
    min: int
    max: int
    count: int

    def grid(self) -> np.ndarray:
        return transport.make_lag_grid(self.min, self.max, self.count)


@dataclass(frozen=True)
class Seeds:
    master: int = 0
    probe: int | None = None


@dataclass(frozen=True)
class StudyConfig:
    task: TaskConfig
    train: TrainConfig
    cells: tuple[CellKind, ...]
    H: int
    lag_grid: LagGridSpec
    n_train: int
    n_diagnostic: int
    budgets: tuple[int, ...]
    epsilon: float = DEFAULT_EPSILON
    c_alpha: float = DEFAULT_C_ALPHA
    seeds: Seeds = field(default_factory=Seeds)
    order: str = transport.FIRST
    anchor_stride: int = 1
    output_dir: str | None = None

    def __post_init__(self):
        if self.H < 1:
            raise ConfigError("H must be >= 1")
        if not self.cells:
            raise ConfigError("cells must list at least one cell kind")
        tags = [c.tag for c in self.cells]
        if len(set(tags)) != len(tags):
            raise ConfigError("cells: each kind may appear once")
        lg = self.lag_grid
        if not (1 <= lg.min <= lg.max <= self.task.T - 1) or lg.count < 1:
            raise ConfigError(f"lag_grid must satisfy 1 <= min <= max <= T - 1 = {self.task.T - 1} "
                              "and count >= 1")
        if self.n_train < 1:
            raise ConfigError("n_train must be >= 1")
        if self.n_diagnostic < 100:
            raise ConfigError("n_diagnostic must be >= 100")
        b = list(self.budgets)
        if not b or any(x < 1 for x in b) or b != sorted(set(b)):
            raise ConfigError("budgets must be a strictly increasing list of positive integers")
        if not 0.0 < self.epsilon < 0.5:
            raise ConfigError("epsilon must lie in (0, 1/2)")
        if not self.c_alpha > 0:
            raise ConfigError("c_alpha must be > 0")
        if self.order not in transport.ORDERS:
            raise ConfigError(f"order must be one of {transport.ORDERS}")
        if self.anchor_stride < 1:
            raise ConfigError("anchor_stride must be >= 1")
        if not 0 <= self.seeds.master < 2 ** 64:
            raise ConfigError("seeds.master must be an unsigned 64-bit integer")

    # -- derived quantities -------------------------------------------------

    def lags(self) -> np.ndarray:
        return self.lag_grid.grid()

    def anchors(self) -> np.ndarray:
        return transport.default_anchors(self.task.T, int(self.lags().max()), self.anchor_stride)

    def train_config_for(self, kind: CellKind) -> TrainConfig:
        return dataclasses.replace(self.train, seed=derive_seed(self.seeds.master, f"train.shuffle.{kind.tag}"))

    def probe_seed(self) -> int:
        if self.seeds.probe is not None:
            return self.seeds.probe
        return derive_seed(self.seeds.master, "probe")

    def with_overrides(self, seed: int | None = None, order: str | None = None) -> "StudyConfig":
        """Copy with a new master seed and/or transport order (task re-derived from the seed)."""
        d = self.to_dict()
        if seed is not None:
            d["seeds"]["master"] = seed
            d["task"].pop("u", None)
            d["task"].pop("seed", None)
        if order is not None:
            d["order"] = order
        return parse_config(d)

    def to_dict(self) -> dict:
        task = dataclasses.asdict(self.task)
        task["lags"] = list(task["lags"])
        task["coefficients"] = list(task["coefficients"])
        task["u"] = list(task["u"])
        train = dataclasses.asdict(self.train)
        train.pop("seed")
        train["betas"] = list(train["betas"])
        return {
            "task": task,
            "train": train,
            "cells": [c.to_dict() for c in self.cells],
            "H": self.H,
            "lag_grid": dataclasses.asdict(self.lag_grid),
            "n_train": self.n_train,
            "n_diagnostic": self.n_diagnostic,
            "budgets": list(self.budgets),
            "epsilon": self.epsilon,
            "c_alpha": self.c_alpha,
            "seeds": dataclasses.asdict(self.seeds),
            "order": self.order,
            "anchor_stride": self.anchor_stride,
            "output_dir": self.output_dir,
        }


def derive_seed(master: int, name: str) -> int:
    """Counter-based named sub-stream of the master seed, as a 64-bit integer.

    Each stage keys its stream by name, so adding a stage never shifts the
    streams of existing ones.
    """
    ss = np.random.SeedSequence(int(master), spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


_TOP = {"task", "train", "cells", "H", "lag_grid", "n_train", "n_diagnostic", "budgets",
        "epsilon", "c_alpha", "seeds", "order", "anchor_stride", "output_dir"}
_REQUIRED = {"task", "train", "cells", "H", "lag_grid", "n_train", "n_diagnostic", "budgets"}


def _check_keys(section: str, d, allowed, required=()):
    if not isinstance(d, dict):
        raise ConfigError(f"{section or 'config'} must be an object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        where = f"{section}." if section else ""
        raise ConfigError(f"unknown field(s): {', '.join(where + k for k in unknown)}")
    missing = sorted(set(required) - set(d))
    if missing:
        where = f"{section}." if section else ""
        raise ConfigError(f"missing field(s): {', '.join(where + k for k in missing)}")


def _int(name, v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{name} must be an integer, got {v!r}")
    return v


def parse_config(d: dict) -> StudyConfig:
    """Build a validated StudyConfig; unknown or mistyped fields raise ConfigError."""
    _check_keys("", d, _TOP, _REQUIRED)
    _check_keys("task", d["task"], _TASK_FIELDS)
    _check_keys("train", d["train"], _TRAIN_FIELDS)
    _check_keys("lag_grid", d["lag_grid"], {"min", "max", "count"}, {"min", "max", "count"})
    seeds = d.get("seeds", {})
    _check_keys("seeds", seeds, {"master", "probe"})
    master = _int("seeds.master", seeds.get("master", 0))
    probe = seeds.get("probe")
    if probe is not None:
        probe = _int("seeds.probe", probe)
    task_d = dict(d["task"])
    task_d.setdefault("seed", derive_seed(master, "task.u"))
    for k in ("D", "T", "seed"):
        if k in task_d:
            _int(f"task.{k}", task_d[k])
    try:
        task = TaskConfig(**task_d)
        train = TrainConfig(**d["train"])
        cells = d["cells"]
        if not isinstance(cells, list):
            raise ConfigError("cells must be a list")
        for c in cells:
            if isinstance(c, dict):
                _check_keys("cells[]", c, {"tag", "const_gate_value"}, {"tag"})
        kinds = tuple(CellKind.parse(c) for c in cells)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    except ContractError as exc:
        raise ConfigError(f"cells: {exc}") from None
    lg = LagGridSpec(*(_int(f"lag_grid.{k}", d["lag_grid"][k]) for k in ("min", "max", "count")))
    budgets = d["budgets"]
    if not isinstance(budgets, list):
        raise ConfigError("budgets must be a list")
    return StudyConfig(
        task=task, train=train, cells=kinds, H=_int("H", d["H"]), lag_grid=lg,
        n_train=_int("n_train", d["n_train"]), n_diagnostic=_int("n_diagnostic", d["n_diagnostic"]),
        budgets=tuple(_int("budgets[]", b) for b in budgets),
        epsilon=float(d.get("epsilon", DEFAULT_EPSILON)), c_alpha=float(d.get("c_alpha", DEFAULT_C_ALPHA)),
        seeds=Seeds(master, probe), order=d.get("order", transport.FIRST),
        anchor_stride=_int("anchor_stride", d.get("anchor_stride", 1)), output_dir=d.get("output_dir"),
    )


def load_config(path) -> StudyConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(d)


_PRESETS = {
    # full-scale protocol (H=128, T=1024, 8000 sequences)
    "full": {
        "task": {"D": 16, "T": 1024, "lags": [32, 64, 128, 192, 256],
                 "coefficients": [0.6, 0.5, 0.4, 0.32, 0.26], "noise_std": 0.3},
        "train": {"optimizer": "adamw", "learning_rate": 1e-3, "weight_decay": 1e-4,
                  "batch_size": 512, "epochs": 500, "clip_norm": 1.0},
        "cells": list(KIND_TAGS), "H": 128,
        "lag_grid": {"min": 4, "max": 256, "count": 128},
        "n_train": 8000, "n_diagnostic": 8000,
        "budgets": [100, 300, 1000, 3000, 10000, 30000, 100000],
    },
    # scaled-down study that runs on one core in minutes
    "desk": {
        "task": {"D": 16, "T": 128, "lags": [4, 8, 16], "coefficients": [0.6, 0.5, 0.4],
                 "noise_std": 0.3},
        "train": {"optimizer": "adamw", "learning_rate": 3e-2, "weight_decay": 1e-4,
                  "batch_size": 32, "epochs": 50, "clip_norm": 1.0},
        "cells": list(KIND_TAGS), "H": 16,
        "lag_grid": {"min": 1, "max": 32, "count": 32},
        "n_train": 400, "n_diagnostic": 400,
        "budgets": [10, 30, 100, 300, 1000, 3000, 10000, 30000, 100000],
    },
}


def preset(name: str) -> StudyConfig:
    if name not in _PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(_PRESETS)}")
    return parse_config(json.loads(json.dumps(_PRESETS[name])))


def preset_dict(name: str) -> dict:
    return json.loads(json.dumps(_PRESETS[name]))
