"""Run configuration read from YAML, with line-anchored diagnostics.

One file drives every command. Top-level sections:

``seed``        master seed for simulation, multi-start jitter and BLB
``model``       state-space preset, registers, mixture and event recording
``covariates``  list of dimensions (name, categories, kind, bounds, baseline)
``simulation``  entry counts, category frequencies and true parameters
``fit``         optimiser options and an optional initial point
``blb``         subset plan and derived quantities
``decode``      which state roles count as present
``output``      output directory

Unknown keys are rejected so that typos do not pass silently.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from .blb import DERIVED, MODES, PARTITION, BlbOptions, BlbPlan
from .covariates import KINDS, CovariateScheme, Dimension
from .emission import EventRecording
from .errors import ConfigError
from .estimator import FitOptions
from .model import ModelSpec
from .population import DEFAULT_PRESENT_ROLES
from .statespace import PRESETS, ROLES, preset


class _Map(dict):
    """Mapping that remembers the source line of each key."""

    lines: dict


class _Loader(yaml.SafeLoader):
    pass


def _construct_map(loader, node):
    loader.flatten_mapping(node)
    out = _Map()
    out.lines = {}
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=True)
        if key in out:
            raise ConfigError(f"line {key_node.start_mark.line + 1}: duplicate key {key!r}")
        out[key] = loader.construct_object(value_node, deep=True)
        out.lines[key] = key_node.start_mark.line + 1
    out.lines["__self__"] = node.start_mark.line + 1
    return out


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_map)


class _Section:
    """Typed access to one mapping, raising ConfigError with file and line."""

    def __init__(self, data, path: str, source: str):
        if data is None:
            data = _Map()
            data.lines = {}
        if not isinstance(data, dict):
            raise ConfigError(f"{source}: section {path or 'top level'} must be a mapping")
        self.data, self.path, self.source = data, path, source
        self.used: set = set()

    def where(self, key=None) -> str:
        lines = getattr(self.data, "lines", {})
        line = lines.get(key, lines.get("__self__"))
        return f"{self.source}:{line}" if line else self.source

    def fail(self, key, msg: str):
        name = f"{self.path}.{key}" if self.path else str(key)
        raise ConfigError(f"{self.where(key)}: {name}: {msg}")

    def has(self, key) -> bool:
        return key in self.data

    def get(self, key, kind, default=None, required=False):
        self.used.add(key)
        if key not in self.data or self.data[key] is None:
            if required:
                raise ConfigError(f"{self.where()}: {self.path or 'config'}: missing required key {key!r}")
            return default
        value = self.data[key]
        try:
            if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
                return float(value)
            if kind is int and isinstance(value, int) and not isinstance(value, bool):
                return value
            if kind is bool and isinstance(value, bool):
                return value
            if kind is str and isinstance(value, str):
                return value
            if kind is list and isinstance(value, list):
                return value
            if kind is dict and isinstance(value, dict):
                return value
        except (TypeError, ValueError):
            pass
        self.fail(key, f"expected {kind.__name__}, got {type(value).__name__} {value!r}")

    def section(self, key) -> "_Section":
        self.used.add(key)
        return _Section(self.data.get(key), f"{self.path}.{key}" if self.path else key, self.source)

    def finish(self):
        extra = [k for k in self.data if k not in self.used]
        if extra:
            self.fail(extra[0], "unknown key")


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimulationSettings:
    entries: tuple[int, ...]
    frequencies: Mapping[str, tuple[float, ...]]
    truth: Mapping[str, float]


@dataclass(frozen=True)
class RunConfig:
    spec: ModelSpec
    seed: int = 0
    simulation: SimulationSettings | None = None
    fit: FitOptions = field(default_factory=FitOptions)
    init: Mapping[str, float] | str | None = None
    blb: Mapping[str, Any] = field(default_factory=dict)
    blb_options: BlbOptions = field(default_factory=BlbOptions)
    present_roles: frozenset = DEFAULT_PRESENT_ROLES
    output_dir: str = "out"
    source: str = ""

    def with_seed(self, seed: int) -> "RunConfig":
        from dataclasses import replace
        return replace(self, seed=int(seed), fit=replace(self.fit, seed=int(seed)))

    def true_params(self) -> np.ndarray:
        if self.simulation is None:
            raise ConfigError(f"{self.source}: no simulation section with true parameters")
        return named_vector(self.spec, self.simulation.truth, f"{self.source}: simulation.truth")

    def initial_params(self) -> np.ndarray | None:
        if self.init is None:
            return None
        if self.init == "truth":
            return self.true_params()
        return named_vector(self.spec, self.init, f"{self.source}: fit.init")

    def blb_plan(self, n: int) -> BlbPlan:
        b = dict(self.blb)
        return BlbPlan(n=n, s=b.get("s", 5), r=b.get("r", 50), b=b.get("b"), gamma=b.get("gamma"),
                       mode=b.get("mode", PARTITION), seed=self.seed)


def named_vector(spec: ModelSpec, values: Mapping[str, float], where: str) -> np.ndarray:
    """Flat parameter vector from name -> value pairs; missing names are zero."""
    unknown = [k for k in values if k not in spec.param_names]
    if unknown:
        raise ConfigError(f"{where}: unknown parameter name {unknown[0]!r} "
                          f"(the model has {spec.n_params} parameters, e.g. {spec.param_names[0]!r})")
    return spec.from_named({k: float(v) for k, v in values.items()})


def _pattern(sec: _Section, key, item, registers) -> int:
    if isinstance(item, int) and not isinstance(item, bool):
        return item
    names = [item] if isinstance(item, str) else item
    if not isinstance(names, list) or not names:
        sec.fail(key, f"false-positive pattern {item!r} must be a register name list or a bitmask")
    mask = 0
    for name in names:
        if name not in registers:
            sec.fail(key, f"unknown register {name!r} in false-positive pattern")
        mask |= 1 << registers.index(name)
    return mask


def _dimension(item, idx: int, source: str) -> Dimension:
    sec = _Section(item, f"covariates[{idx}]", source)
    name = sec.get("name", str, required=True)
    cats = sec.get("categories", list, required=True)
    kind = sec.get("kind", str, "static")
    if kind not in KINDS:
        sec.fail("kind", f"unknown kind {kind!r}; expected one of {KINDS}")
    bounds = sec.get("bounds", list, [])
    baseline = sec.get("baseline", str)
    sec.finish()
    try:
        return Dimension(name, tuple(cats), baseline, kind, tuple(bounds))
    except (ConfigError, TypeError, ValueError) as exc:
        raise ConfigError(f"{sec.where()}: covariates[{idx}]: {exc}") from None


def parse_config(data, source: str = "<config>") -> RunConfig:
    top = _Section(data, "", source)
    seed = top.get("seed", int, 0)

    m = top.section("model")
    name = m.get("state_space", str, "sweden8")
    if name not in PRESETS:
        m.fail("state_space", f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    registers = m.get("registers", list, required=True)
    if not all(isinstance(r, str) for r in registers):
        m.fail("registers", "register names must be strings")
    fp_raw = m.get("false_positive_patterns", list, [])
    fp = tuple(_pattern(m, "false_positive_patterns", p, registers) for p in fp_raw)
    rec_sec = m.section("recording")
    rec_kw = {k: rec_sec.get(k, float) for k in ("psi_e", "psi_r", "phi_p", "phi_a")}
    rec_sec.finish()
    try:
        recording = EventRecording(**{k: v for k, v in rec_kw.items() if v is not None})
    except ConfigError as exc:
        raise ConfigError(f"{rec_sec.where()}: {exc}") from None

    cov_raw = top.get("covariates", list, [])
    dims = tuple(_dimension(item, i, source) for i, item in enumerate(cov_raw))
    try:
        scheme = CovariateScheme(dims)
        spec = ModelSpec(preset(name), scheme, tuple(registers),
                         n_groups=m.get("groups", int, 1),
                         group_specific=tuple(m.get("group_specific", list, [])),
                         fp_patterns=fp, recording=recording,
                         first_year=m.get("first_year", int, required=True),
                         n_years=m.get("n_years", int, required=True))
    except ConfigError as exc:
        raise ConfigError(f"{m.where()}: model: {exc}") from None
    m.finish()

    sim = None
    if top.has("simulation"):
        s = top.section("simulation")
        entries = s.get("entries", list)
        per_year = s.get("entries_per_year", int)
        if (entries is None) == (per_year is None):
            s.fail("entries", "give exactly one of entries (one count per year) or entries_per_year")
        if entries is None:
            entries = [per_year] * spec.n_years
        if len(entries) != spec.n_years or not all(isinstance(v, int) and v >= 0 for v in entries):
            s.fail("entries", f"need {spec.n_years} non-negative integer counts")
        if sum(entries) == 0:
            s.fail("entries", "total entry count must be positive")
        freqs = s.get("frequencies", dict, {})
        for k, v in freqs.items():
            d = next((d for d in dims if d.name == k), None)
            if d is None:
                s.fail("frequencies", f"unknown covariate {k!r}")
            if (not isinstance(v, list) or len(v) != len(d.categories)
                    or any(not isinstance(p, (int, float)) or p < 0 for p in v) or abs(sum(v) - 1) > 1e-9):
                s.fail("frequencies", f"{k}: need {len(d.categories)} probabilities summing to 1")
        truth = s.get("truth", dict, {})
        named_vector(spec, truth, s.where("truth"))
        s.finish()
        sim = SimulationSettings(tuple(entries), {k: tuple(map(float, v)) for k, v in freqs.items()},
                                 {k: float(v) for k, v in truth.items()})

    f = top.section("fit")
    fit_kw = {}
    for key, kind in (("max_iter", int), ("gtol", float), ("ftol", float), ("n_starts", int),
                      ("jitter", float), ("standard_errors", bool), ("hessian_step", float),
                      ("canonicalize", bool)):
        v = f.get(key, kind)
        if v is not None:
            fit_kw[key] = v
    init = f.data.get("init")
    f.used.add("init")
    if init is not None and init != "truth":
        if not isinstance(init, dict):
            f.fail("init", "expected 'truth' or a mapping of parameter names to values")
        named_vector(spec, init, f.where("init"))
    if init == "truth" and sim is None:
        f.fail("init", "init: truth needs a simulation section")
    try:
        fit = FitOptions(seed=seed, **fit_kw)
    except ConfigError as exc:
        raise ConfigError(f"{f.where()}: fit: {exc}") from None
    f.finish()

    b = top.section("blb")
    blb = {}
    for key, kind in (("s", int), ("r", int), ("b", int), ("gamma", float), ("mode", str)):
        v = b.get(key, kind)
        if v is not None:
            blb[key] = v
    if blb.get("mode", PARTITION) not in MODES:
        b.fail("mode", f"unknown mode {blb['mode']!r}; expected one of {MODES}")
    if "gamma" in blb and not 0.5 <= blb["gamma"] <= 1.0:
        b.fail("gamma", "must lie in [0.5, 1]")
    for key in ("s", "r"):
        if key in blb and blb[key] < 1:
            b.fail(key, "must be >= 1")
    requests = b.get("derived", list, list(BlbOptions().requests))
    for q in requests:
        if q not in DERIVED:
            b.fail("derived", f"unknown quantity {q!r}; expected some of {DERIVED}")
    warm = b.get("warm_start", bool, True)
    b.finish()

    d = top.section("decode")
    roles = d.get("present_roles", list)
    if roles is not None:
        bad = [r for r in roles if r not in ROLES]
        if bad:
            d.fail("present_roles", f"unknown role {bad[0]!r}; expected some of {ROLES}")
        roles = frozenset(roles)
    d.finish()
    present_roles = roles or DEFAULT_PRESENT_ROLES

    o = top.section("output")
    out_dir = o.get("dir", str, "out")
    o.finish()
    top.finish()

    opts = BlbOptions(fit=fit, requests=tuple(requests), warm_start=warm, present_roles=present_roles)
    return RunConfig(spec, seed, sim, fit, init, blb, opts, present_roles, out_dir, source)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    try:
        data = yaml.load(text, Loader=_Loader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        line = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{path}{line}: invalid YAML: {exc.problem}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return parse_config(data, str(path))
