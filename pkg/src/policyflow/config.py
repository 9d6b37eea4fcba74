"""Experiment configuration: strict JSON parsing, reward catalog, initial policies.

Every section maps onto a dataclass; keys that are not dataclass fields are
rejected with the offending key named, so a config file doubles as a
regression fixture that cannot silently drift.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .flows import STEPPERS, FlowParams, InnerParams, LangevinParams
from .fokker_planck import FPScheme
from .measures import ActionGrid, DiscreteMeasure, RewardField, make_grid


class ConfigError(ParameterError):
    """Malformed or out-of-range experiment description."""


REWARD_KEYS = {
    "quadratic": {"center": 0.0, "curvature": 1.0},
    "bimodal": {"centers": (-0.7, 0.7), "widths": (0.5, 0.5), "heights": (1.0, 0.8)},
    "linear": {"slope": 1.0},
    "custom": {"values": None},
}

INITIAL_KEYS = {
    "uniform": {},
    "gaussian": {"mean": 0.0, "std": 0.5},
    "point": {"x": 0.0},
    "custom": {"values": None},
}


@dataclass(frozen=True)
class GridSpec:
    lo: float = -2.0
    hi: float = 2.0
    n: int = 128


@dataclass(frozen=True)
class CatalogEntry:
    """A named family plus its parameters (``kind`` selects the family)."""

    kind: str
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DiagnosticsSpec:
    """``eps`` is the regularization of the transport-to-Gibbs column (null disables it);
    ``tv_tol`` is the terminal TV-to-Gibbs criterion behind the report's ``converged`` flag."""

    stride: int = 1
    eps: float | None = 0.05
    tv_tol: float = 1e-2
    save_intermediate: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    grid: GridSpec
    reward: CatalogEntry
    beta: float
    stepper: str
    flow: FlowParams
    initial: CatalogEntry = CatalogEntry("uniform")
    scheme: FPScheme = FPScheme()
    langevin: LangevinParams = LangevinParams()
    diagnostics: DiagnosticsSpec = DiagnosticsSpec()
    out_dir: str | None = None

    @property
    def horizon(self) -> float:
        return self.flow.n_steps * self.flow.tau


def _strict(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in {where}")
    try:
        return cls(**data)
    except ParameterError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _catalog(data, table, where, default_kind=None):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    kind = data.get("kind", default_kind)
    if kind not in table:
        raise ConfigError(f"{where}: unknown kind {kind!r}; choose from {sorted(table)}")
    params = dict(table[kind])
    for key, value in data.items():
        if key == "kind":
            continue
        if key not in params:
            raise ConfigError(f"unknown key {key!r} in {where} ({kind})")
        params[key] = value
    missing = [k for k, v in params.items() if v is None]
    if missing:
        raise ConfigError(f"{where} ({kind}) needs {missing}")
    return CatalogEntry(kind, params)


def _positive(value, name):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not (value > 0 and math.isfinite(value)):
        raise ConfigError(f"{name} must be a positive number, got {value!r}")
    return float(value)


TOP_KEYS = ("name", "grid", "reward", "beta", "stepper", "initial", "flow", "scheme",
            "langevin", "diagnostics", "out_dir")


def parse_config(data: dict, default_name: str = "experiment") -> ExperimentConfig:
    """Validate a decoded JSON object and build an ExperimentConfig."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    for key in data:
        if key not in TOP_KEYS:
            raise ConfigError(f"unknown key {key!r} in config")
    for key in ("reward", "beta", "stepper", "flow"):
        if key not in data:
            raise ConfigError(f"config is missing required key {key!r}")
    grid = _strict(GridSpec, data.get("grid", {}), "grid")
    try:
        make_grid(grid.lo, grid.hi, grid.n)
    except ParameterError as exc:
        raise ConfigError(f"grid: {exc}") from exc
    beta = _positive(data["beta"], "beta")
    stepper = data["stepper"]
    if stepper not in STEPPERS:
        raise ConfigError(f"unknown stepper {stepper!r}; choose from {list(STEPPERS)}")
    flow = dict(data["flow"]) if isinstance(data["flow"], dict) else data["flow"]
    if isinstance(flow, dict):
        if "beta" in flow:
            raise ConfigError("unknown key 'beta' in flow (beta is a top-level key)")
        inner = _strict(InnerParams, flow.pop("inner", {}), "flow.inner")
        flow = _strict(FlowParams, {**flow, "beta": beta, "inner": inner}, "flow")
    else:
        raise ConfigError("flow: expected an object")
    name = data.get("name", default_name)
    if not isinstance(name, str) or not name:
        raise ConfigError("name must be a nonempty string")
    cfg = ExperimentConfig(
        name=name,
        grid=grid,
        reward=_catalog(data["reward"], REWARD_KEYS, "reward"),
        beta=beta,
        stepper=stepper,
        flow=flow,
        initial=_catalog(data.get("initial", {"kind": "uniform"}), INITIAL_KEYS, "initial", "uniform"),
        scheme=_strict(FPScheme, data.get("scheme", {}), "scheme"),
        langevin=_strict(LangevinParams, data.get("langevin", {}), "langevin"),
        diagnostics=_strict(DiagnosticsSpec, data.get("diagnostics", {}), "diagnostics"),
        out_dir=data.get("out_dir"),
    )
    # build once so that catalog parameter errors surface as config errors
    build_reward(cfg)
    build_initial(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(data, default_name=path.stem)


def build_grid(cfg: ExperimentConfig) -> ActionGrid:
    return make_grid(cfg.grid.lo, cfg.grid.hi, cfg.grid.n)


def _vector(values, n, where):
    try:
        arr = np.asarray(values, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: values must be numbers") from exc
    if arr.shape != (n,):
        raise ConfigError(f"{where}: expected {n} values, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{where}: values must be finite")
    return arr


def reward_values(entry: CatalogEntry, x: np.ndarray) -> np.ndarray:
    p = entry.params
    try:
        if entry.kind == "quadratic":
            return -0.5 * float(p["curvature"]) * (x - float(p["center"])) ** 2
        if entry.kind == "linear":
            return float(p["slope"]) * x
        if entry.kind == "bimodal":
            c, w, h = (np.asarray(p[k], dtype=float) for k in ("centers", "widths", "heights"))
            if not (c.shape == w.shape == h.shape and c.ndim == 1 and len(c) >= 1):
                raise ConfigError("reward (bimodal): centers, widths, heights must be equal-length lists")
            if np.any(w <= 0):
                raise ConfigError("reward (bimodal): widths must be positive")
            return np.sum(h[:, None] * np.exp(-((x[None, :] - c[:, None]) ** 2) / (2 * w[:, None] ** 2)),
                          axis=0)
        return _vector(p["values"], len(x), "reward (custom)")
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ParameterError):
            raise
        raise ConfigError(f"reward ({entry.kind}): {exc}") from exc


def build_reward(cfg: ExperimentConfig) -> RewardField:
    grid = build_grid(cfg)
    return RewardField(grid, reward_values(cfg.reward, grid.centers))


def build_initial(cfg: ExperimentConfig) -> DiscreteMeasure:
    grid = build_grid(cfg)
    p = cfg.initial.params
    kind = cfg.initial.kind
    try:
        if kind == "uniform":
            return DiscreteMeasure.uniform(grid)
        if kind == "gaussian":
            std = _positive(p["std"], "initial.std")
            z = (grid.centers - float(p["mean"])) / std
            return DiscreteMeasure.from_weights(grid, np.exp(-0.5 * z * z))
        if kind == "point":
            x = float(p["x"])
            if not grid.lo <= x <= grid.hi:
                raise ConfigError(f"initial.x = {x} lies outside the grid")
            return DiscreteMeasure.point_mass(grid, int(grid.cell_of(np.array([x]))[0]))
        return DiscreteMeasure.from_weights(grid, _vector(p["values"], grid.n, "initial (custom)"))
    except ConfigError:
        raise
    except (ParameterError, TypeError, ValueError) as exc:
        raise ConfigError(f"initial ({kind}): {exc}") from exc
