"""Experiment configuration: YAML parsing, validation and rendering."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

import yaml

from .attacks import ATTACK_KINDS, AttackError, AttackSpec
from .defenses import DEFENSE_KINDS, DefenseError, DefenseSpec


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


OBJECTIVES = ("quadratic_saddle", "double_well", "softmax")
OBJECTIVE_PARAMS = {"quadratic_saddle": {"delta"}, "double_well": set(),
                    "softmax": {"classes", "samples", "data_seed"}}
ATTACK_PARAMS = {"factor", "delay", "z_max", "start_iter", "stop_iter", "inner", "inner_params"}
DEFENSE_PARAMS = {f.name for f in dataclasses.fields(DefenseSpec)} - {"kind", "reset_every"}
REQUIRED = ("objective", "d", "T")


@dataclass(frozen=True)
class ExperimentConfig:
    objective: str = "quadratic_saddle"
    objective_params: tuple[tuple[str, Any], ...] = ()
    d: int = 10
    m: int = 10
    x0: float | tuple[float, ...] = 0.0
    attack: AttackSpec = field(default_factory=AttackSpec)
    defense: DefenseSpec = field(default_factory=DefenseSpec)
    eta: float = 0.05
    schedule: tuple[tuple[int, float], ...] = ()
    nu: float = 0.0
    T: int = 1000
    iterations_per_epoch: int = 100
    epsilon: float = 0.1
    p: float = 0.01
    V: float = 1.0
    seed: int = 0
    wlog_clip: bool = False
    metrics_cadence: int = 10

    @property
    def byzantine_ids(self) -> tuple[int, ...]:
        return self.attack.byzantine_ids

    @property
    def alpha(self) -> float:
        return len(self.attack.byzantine_ids) / self.m

    @property
    def honest_ids(self) -> tuple[int, ...]:
        byz = set(self.attack.byzantine_ids)
        return tuple(i for i in range(self.m) if i not in byz)

    def objective_kwargs(self) -> dict[str, Any]:
        return dict(self.objective_params)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _num(raw: dict, key: str, kind: type, default: Any, *, positive: bool = False,
         nonneg: bool = False) -> Any:
    value = raw.get(key, default)
    if value is None:
        return None
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
    else:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        value = float(value)
    if positive and not value > 0:
        raise ConfigError(key, f"must be positive, got {value}")
    if nonneg and value < 0:
        raise ConfigError(key, f"must be non-negative, got {value}")
    return value


def _attack(name: Any, params: Any, byz: tuple[int, ...], key: str = "attack") -> AttackSpec:
    if name not in ATTACK_KINDS:
        raise ConfigError(key, f"unknown attack {name!r}; choose from {', '.join(ATTACK_KINDS)}")
    params = dict(params or {})
    unknown = set(params) - ATTACK_PARAMS
    if unknown:
        raise ConfigError(f"{key}_params", f"unknown keys {sorted(unknown)}")
    inner = None
    if name == "transient":
        if "inner" not in params:
            raise ConfigError(f"{key}_params.inner", "transient attack needs an inner attack")
        inner = _attack(params["inner"], params.get("inner_params"), byz, key=f"{key}_params.inner")
    elif "inner" in params or "inner_params" in params:
        raise ConfigError(f"{key}_params.inner", "only the transient attack takes an inner attack")
    kw = {}
    for k, kind in (("factor", float), ("z_max", float), ("delay", int), ("start_iter", int),
                    ("stop_iter", int)):
        if k in params:
            kw[k] = _num(params, k, kind, None, nonneg=k != "factor")
    try:
        return AttackSpec(kind=name, byzantine_ids=byz, inner=inner, **kw)
    except AttackError as exc:
        raise ConfigError(f"{key}_params", str(exc)) from None


def _defense(name: Any, params: Any, reset_every: Any) -> DefenseSpec:
    if name not in DEFENSE_KINDS:
        raise ConfigError("defense", f"unknown defense {name!r}; choose from {', '.join(DEFENSE_KINDS)}")
    params = dict(params or {})
    unknown = set(params) - DEFENSE_PARAMS
    if unknown:
        raise ConfigError("defense_params", f"unknown keys {sorted(unknown)}")
    kw: dict[str, Any] = {}
    for k in ("b", "n_r", "T", "T0", "T1"):
        if k in params:
            kw[k] = _num(params, k, int, None, positive=k != "b", nonneg=True)
    for k in ("rho", "threshold_scale", "multiplier"):
        if k in params:
            kw[k] = _num(params, k, float, None, positive=True)
    for k in ("floor", "floor_long"):
        if k in params:
            kw[k] = _num(params, k, float, None, nonneg=True)
    if "threshold_mode" in params:
        kw["threshold_mode"] = params["threshold_mode"]
    if "eject" in params:
        if not isinstance(params["eject"], bool):
            raise ConfigError("defense_params.eject", "expected true/false")
        kw["eject"] = params["eject"]
    if reset_every is not None:
        if isinstance(reset_every, bool) or not isinstance(reset_every, int) or reset_every < 1:
            raise ConfigError("reset_every", f"must be a positive integer, got {reset_every!r}")
    try:
        return DefenseSpec(kind=name, reset_every=reset_every, **kw)
    except DefenseError as exc:
        raise ConfigError("defense_params", str(exc)) from None


KNOWN_KEYS = set(REQUIRED) | {
    "objective_params", "m", "x0", "byzantine_ids", "attack", "attack_params", "defense",
    "defense_params", "eta", "schedule", "nu", "iterations_per_epoch", "epsilon", "p", "V",
    "seed", "wlog_clip", "metrics_cadence", "reset_every",
}


def config_from_dict(raw: dict[str, Any]) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<document>", "expected a key/value mapping")
    for key in REQUIRED:
        if key not in raw:
            raise ConfigError(key, "missing required key")
    unknown = set(raw) - KNOWN_KEYS
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown key")

    objective = raw["objective"]
    if objective not in OBJECTIVES:
        raise ConfigError("objective", f"unknown objective {objective!r}; choose from {', '.join(OBJECTIVES)}")
    oparams = dict(raw.get("objective_params") or {})
    bad = set(oparams) - OBJECTIVE_PARAMS[objective]
    if bad:
        raise ConfigError("objective_params", f"unknown keys {sorted(bad)} for {objective}")

    d = _num(raw, "d", int, None, positive=True)
    m = _num(raw, "m", int, 10, positive=True)
    if objective == "softmax" and d % int(oparams.get("classes", 3)):
        raise ConfigError("d", "softmax needs d to be a multiple of classes")

    byz = raw.get("byzantine_ids", []) or []
    if not isinstance(byz, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in byz):
        raise ConfigError("byzantine_ids", "expected a list of worker ids")
    if any(not 0 <= i < m for i in byz) or len(set(byz)) != len(byz):
        raise ConfigError("byzantine_ids", f"ids must be distinct and in [0, {m})")
    byz_t = tuple(byz)

    attack = _attack(raw.get("attack", "honest"), raw.get("attack_params"), byz_t)
    defense = _defense(raw.get("defense", "mean"), raw.get("defense_params"), raw.get("reset_every"))
    if defense.is_safeguard and defense.threshold_mode == "theoretical" and 2 * len(byz) >= m:
        raise ConfigError("byzantine_ids", "theoretical thresholds need fewer than m/2 Byzantine workers")
    try:
        defense.validate_for(m)
    except DefenseError as exc:
        raise ConfigError("defense_params.b", str(exc)) from None

    x0 = raw.get("x0", 0.0)
    if isinstance(x0, list):
        if len(x0) != d or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in x0):
            raise ConfigError("x0", f"expected {d} numbers")
        x0 = tuple(float(v) for v in x0)
    else:
        x0 = _num(raw, "x0", float, 0.0)

    schedule = raw.get("schedule", []) or []
    try:
        schedule = tuple((int(e), float(f)) for e, f in schedule)
    except (TypeError, ValueError):
        raise ConfigError("schedule", "expected a list of [epoch, factor] pairs") from None
    if any(e < 0 or f <= 0 for e, f in schedule):
        raise ConfigError("schedule", "epochs must be >= 0 and factors positive")

    p = _num(raw, "p", float, 0.01, positive=True)
    if not p < 1:
        raise ConfigError("p", "must lie in (0, 1)")
    wlog = raw.get("wlog_clip", False)
    if not isinstance(wlog, bool):
        raise ConfigError("wlog_clip", "expected true/false")
    seed = _num(raw, "seed", int, 0, nonneg=True)

    return ExperimentConfig(
        objective=objective,
        objective_params=tuple(sorted(oparams.items())),
        d=d, m=m, x0=x0, attack=attack, defense=defense,
        eta=_num(raw, "eta", float, 0.05, positive=True),
        schedule=schedule,
        nu=_num(raw, "nu", float, 0.0, nonneg=True),
        T=_num(raw, "T", int, None, positive=True),
        iterations_per_epoch=_num(raw, "iterations_per_epoch", int, 100, positive=True),
        epsilon=_num(raw, "epsilon", float, 0.1, positive=True),
        p=p,
        V=_num(raw, "V", float, 1.0, nonneg=True),
        seed=seed,
        wlog_clip=wlog,
        metrics_cadence=_num(raw, "metrics_cadence", int, 10, positive=True),
    )


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<document>", f"not valid YAML: {exc}") from None
    return config_from_dict(raw)


def _render_attack(a: AttackSpec) -> tuple[str, dict]:
    params: dict[str, Any] = {"factor": a.factor, "delay": a.delay, "z_max": a.z_max}
    if a.kind == "transient":
        inner_name, inner_params = _render_attack(a.inner)
        params.update(start_iter=a.start_iter, stop_iter=a.stop_iter, inner=inner_name,
                      inner_params=inner_params)
    return a.kind, params


def render_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    attack, attack_params = _render_attack(cfg.attack)
    dparams = {f.name: getattr(cfg.defense, f.name) for f in dataclasses.fields(DefenseSpec)
               if f.name not in ("kind", "reset_every") and getattr(cfg.defense, f.name) is not None}
    return {
        "objective": cfg.objective,
        "objective_params": dict(cfg.objective_params),
        "d": cfg.d,
        "m": cfg.m,
        "x0": list(cfg.x0) if isinstance(cfg.x0, tuple) else cfg.x0,
        "byzantine_ids": list(cfg.attack.byzantine_ids),
        "attack": attack,
        "attack_params": attack_params,
        "defense": cfg.defense.kind,
        "defense_params": dparams,
        "reset_every": cfg.defense.reset_every,
        "eta": cfg.eta,
        "schedule": [list(s) for s in cfg.schedule],
        "nu": cfg.nu,
        "T": cfg.T,
        "iterations_per_epoch": cfg.iterations_per_epoch,
        "epsilon": cfg.epsilon,
        "p": cfg.p,
        "V": cfg.V,
        "seed": cfg.seed,
        "wlog_clip": cfg.wlog_clip,
        "metrics_cadence": cfg.metrics_cadence,
    }


def render_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(render_dict(cfg), sort_keys=False)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
