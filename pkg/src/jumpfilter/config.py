"""Experiment configuration: a TOML file with ``[model]``, ``[run]`` and ``[output]`` tables."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .model import (Constant, FiniteStateSignalModel, GatedShift, GatedSize, JumpDiffusionSystem, Linear, MarkSpace,
                    ModelError, PolynomialX, StateTable)

SOLVERS = ("zakai", "ks", "grid_bayes", "particle")
METRICS = ("normalization", "l1", "density", "martingale", "protter_shimbo", "assumptions")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted path of the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class RunConfig:
    dt: float
    T: float
    seeds: tuple[int, ...]
    n_paths: int = 1000
    n_particles: int = 1000
    resample_threshold: float = 0.5


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "out"
    solvers: tuple[str, ...] = ("zakai",)
    metrics: tuple[str, ...] = ("normalization",)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    model: FiniteStateSignalModel | JumpDiffusionSystem
    run: RunConfig
    output: OutputConfig
    raw: dict = field(repr=False, compare=False, default_factory=dict)

    @property
    def digest(self) -> str:
        """Hash of the effective configuration (after overrides)."""
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_overrides(self, dt: float | None = None, seeds=None) -> ExperimentConfig:
        raw = json.loads(json.dumps(self.raw))
        if dt is not None:
            raw.setdefault("run", {})["dt"] = dt
        if seeds is not None:
            raw.setdefault("run", {})["seeds"] = list(seeds)
        return from_dict(raw, self.name)


# ---------------------------------------------------------------------------
# coefficient families


def _num(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(where, f"expected a number, got {value!r}")
    return float(value)


def _nums(value, where: str, length: int | None = None) -> tuple[float, ...]:
    if not isinstance(value, list):
        raise ConfigError(where, f"expected a list of numbers, got {value!r}")
    out = tuple(_num(v, f"{where}[{i}]") for i, v in enumerate(value))
    if length is not None and len(out) != length:
        raise ConfigError(where, f"expected {length} entries, got {len(out)}")
    return out


def coefficient(spec, where: str, states=None):
    """Build a coefficient from ``{kind = ..., ...}`` or a bare number."""
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        return Constant(float(spec))
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError(where, "expected a number or a table with a 'kind' key")
    kind = spec["kind"]
    if kind == "constant":
        return Constant(_num(spec.get("value", 0.0), f"{where}.value"))
    if kind == "linear":
        return Linear(*(_num(spec.get(k, 0.0), f"{where}.{k}") for k in ("a", "bt", "bx", "by")))
    if kind == "polynomial":
        return PolynomialX(_nums(spec.get("coeffs"), f"{where}.coeffs"))
    if kind == "state_table":
        st = spec.get("states", list(states) if states is not None else None)
        if st is None:
            raise ConfigError(f"{where}.states", "required outside finite-state models")
        st = _nums(st, f"{where}.states")
        return StateTable(st, _nums(spec.get("values"), f"{where}.values", len(st)))
    if kind == "gated_shift":
        return GatedShift(_num(spec.get("from"), f"{where}.from"), _num(spec.get("to"), f"{where}.to"))
    if kind == "gated_size":
        when = spec.get("when_x")
        return GatedSize(_num(spec.get("size"), f"{where}.size"), None if when is None else _nums(when, f"{where}.when_x"))
    raise ConfigError(f"{where}.kind", f"unknown coefficient family {kind!r}")


def _finite_model(m: dict, horizon: float) -> FiniteStateSignalModel:
    states = _nums(m.get("states"), "model.states")
    n = len(states)
    lam0 = _nums(m.get("lambda0"), "model.lambda0", n)
    mu0 = m.get("mu0")
    if not isinstance(mu0, list) or len(mu0) != n:
        raise ConfigError("model.mu0", f"expected {n} rows")
    mu0 = tuple(_nums(r, f"model.mu0[{i}]", n) for i, r in enumerate(mu0))
    sizes = m.get("obs_jump_size", [[0.0] * n for _ in range(n)])
    if not isinstance(sizes, list) or len(sizes) != n:
        raise ConfigError("model.obs_jump_size", f"expected {n} rows")
    sizes = tuple(_nums(r, f"model.obs_jump_size[{i}]", n) for i, r in enumerate(sizes))
    extra = []
    for i, e in enumerate(m.get("extra_obs_marks", [])):
        extra.append((_nums(e.get("rates"), f"model.extra_obs_marks[{i}].rates", n),
                      _num(e.get("size"), f"model.extra_obs_marks[{i}].size")))
    prior = m.get("prior")
    return FiniteStateSignalModel(
        states=states, lambda0=lam0, mu0=mu0, obs_jump_size=sizes,
        b1=coefficient(m.get("b1", 0.0), "model.b1", states),
        sigma1=coefficient(m.get("sigma1", 1.0), "model.sigma1", states),
        extra_obs_marks=tuple(extra),
        rho=_num(m.get("rho", 0.0), "model.rho"),
        x0=_num(m.get("x0", states[0]), "model.x0"),
        y0=_num(m.get("y0", 0.0), "model.y0"),
        horizon=horizon,
        prior=None if prior is None else _nums(prior, "model.prior", n),
    )


def _system_model(m: dict, horizon: float) -> JumpDiffusionSystem:
    states = m.get("states")
    states = None if states is None else _nums(states, "model.states")
    pairs, k0, k1 = [], {}, {}
    for i, mk in enumerate(m.get("marks", [])):
        where = f"model.marks[{i}]"
        name = mk.get("name")
        if not isinstance(name, str):
            raise ConfigError(f"{where}.name", "expected a string")
        pairs.append((name, _num(mk.get("rate"), f"{where}.rate")))
        k0[name] = coefficient(mk.get("k0", 0.0), f"{where}.k0", states)
        k1[name] = coefficient(mk.get("k1", 0.0), f"{where}.k1", states)
    prior = m.get("prior")
    if prior is not None:
        if states is None:
            raise ConfigError("model.prior", "needs model.states")
        prior = dict(zip(states, _nums(prior, "model.prior", len(states))))
    return JumpDiffusionSystem(
        b0=coefficient(m.get("b0", 0.0), "model.b0", states),
        sigma0=coefficient(m.get("sigma0", 0.0), "model.sigma0", states),
        b1=coefficient(m.get("b1", 0.0), "model.b1", states),
        sigma1=coefficient(m.get("sigma1", 1.0), "model.sigma1", states),
        marks=MarkSpace.from_pairs(pairs), K0=k0, K1=k1,
        rho=_num(m.get("rho", 0.0), "model.rho"),
        x0=_num(m.get("x0", 0.0), "model.x0"),
        y0=_num(m.get("y0", 0.0), "model.y0"),
        horizon=horizon, prior=prior, states=states,
    )


FAMILIES = {"finite_state": _finite_model, "jump_diffusion": _system_model}


def from_dict(raw: dict, name: str = "config") -> ExperimentConfig:
    for section in ("model", "run"):
        if not isinstance(raw.get(section), dict):
            raise ConfigError(section, "missing section")
    r = raw["run"]
    dt = _num(r.get("dt"), "run.dt")
    if not dt > 0:
        raise ConfigError("run.dt", f"must be > 0, got {dt}")
    T = _num(r.get("T"), "run.T")
    if not T > 0:
        raise ConfigError("run.T", f"must be > 0, got {T}")
    if dt > T:
        raise ConfigError("run.dt", f"must not exceed run.T={T}")
    seeds = r.get("seeds")
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigError("run.seeds", "expected a nonempty list of integers")
    n_paths = r.get("n_paths", 1000)
    n_particles = r.get("n_particles", 1000)
    for key, val in (("n_paths", n_paths), ("n_particles", n_particles)):
        if not isinstance(val, int) or val < 1:
            raise ConfigError(f"run.{key}", f"expected a positive integer, got {val!r}")
    thr = _num(r.get("resample_threshold", 0.5), "run.resample_threshold")
    if not 0 < thr <= 1:
        raise ConfigError("run.resample_threshold", "must lie in (0, 1]")
    run = RunConfig(dt, T, tuple(seeds), n_paths, n_particles, thr)

    m = raw["model"]
    family = m.get("family")
    if family not in FAMILIES:
        raise ConfigError("model.family", f"unknown family {family!r}; expected one of {sorted(FAMILIES)}")
    try:
        model = FAMILIES[family](m, T)
    except ModelError as exc:
        raise ConfigError("model", str(exc)) from None

    o = raw.get("output", {})
    solvers = tuple(o.get("solvers", ["zakai"] if family == "finite_state" else ["particle"]))
    for i, s in enumerate(solvers):
        if s not in SOLVERS:
            raise ConfigError(f"output.solvers[{i}]", f"unknown solver {s!r}")
        if s in ("zakai", "ks", "grid_bayes") and family != "finite_state":
            raise ConfigError(f"output.solvers[{i}]", f"{s} needs a finite_state model")
    metrics = tuple(o.get("metrics", ["normalization"]))
    for i, s in enumerate(metrics):
        if s not in METRICS:
            raise ConfigError(f"output.metrics[{i}]", f"unknown metric {s!r}")
    output = OutputConfig(str(o.get("directory", f"out/{name}")), solvers, metrics)
    return ExperimentConfig(name, model, run, output, raw)


def bundled_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("jumpfilter.configs").iterdir() if p.name.endswith(".toml"))


def load_config(source) -> ExperimentConfig:
    """Load a config from a path, or from a bundled name such as ``desk_a``."""
    path = Path(source)
    if path.is_file():
        text, name = path.read_text(encoding="utf-8"), path.stem
    elif str(source) in bundled_names():
        text = resources.files("jumpfilter.configs").joinpath(f"{source}.toml").read_text(encoding="utf-8")
        name = str(source)
    else:
        raise FileNotFoundError(f"no config file {source!r} and no bundled config of that name ({', '.join(bundled_names())})")
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<file>", str(exc)) from None
    return from_dict(raw, name)


def load_model(name: str, **changes):
    """Model of a bundled (or file) config, with dataclass field overrides."""
    model = load_config(name).model
    return replace(model, **changes) if changes else model
