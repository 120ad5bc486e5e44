"""Synthetic register populations with known latent trajectories.

Individuals enter present, then move year by year along the transition
matrix of their covariate profile, emitting one observation category per
year. The draw of each observation is written directly from the state's
role, independently of the likelihood code, so simulated data can serve as
an oracle for it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .emission import FLAG_DEATH, FLAG_EMIGRATION, FLAG_NONE, FLAG_REIMMIGRATION
from .errors import ConfigError
from .model import ModelSpec, profile_tables
from .population import DEFAULT_PRESENT_ROLES, PopulationSeries, population_series
from .records import Record
from .statespace import (ABROAD_DEATH, ABROAD_EMIG, ABROAD_KNOWN, ABROAD_UNKNOWN, DEAD,
                         PRESENT, PRESENT_DEATH, RETURNED)

AGE_SPAN_LAST = 20


@dataclass(frozen=True)
class SimulationConfig:
    spec: ModelSpec
    params: np.ndarray
    entries: tuple[int, ...]
    frequencies: Mapping[str, Sequence[float]] = field(default_factory=dict)
    seed: int = 0
    id_prefix: str = "sim"

    def __post_init__(self):
        spec = self.spec
        object.__setattr__(self, "params", np.asarray(self.params, dtype=float))
        object.__setattr__(self, "entries", tuple(int(v) for v in self.entries))
        if self.params.shape != (spec.n_params,):
            raise ConfigError(f"true parameter vector needs {spec.n_params} entries")
        if len(self.entries) != spec.n_years:
            raise ConfigError(f"need one entry count per study year ({spec.n_years})")
        if min(self.entries) < 0 or sum(self.entries) == 0:
            raise ConfigError("entry counts must be non-negative with a positive total")
        freqs = {}
        for d in spec.scheme.dimensions:
            if d.kind == "duration":
                continue
            f = self.frequencies.get(d.name)
            if f is None:
                f = [1.0 / len(d.categories)] * len(d.categories)
            freqs[d.name] = tuple(float(v) for v in f)
            if len(f) != len(d.categories) or abs(sum(f) - 1.0) > 1e-9 or min(f) < 0:
                raise ConfigError(f"frequencies for {d.name!r} must be {len(d.categories)} probabilities summing to 1")
        object.__setattr__(self, "frequencies", freqs)


@dataclass
class GroundTruth:
    ids: list[str]
    entry: np.ndarray    # (n,) entry index
    states: np.ndarray   # (n, T) 0-based state index, -1 before entry
    groups: np.ndarray   # (n,) 0-based mixture group
    covariates: list[dict]


def _draw(rng, probs: np.ndarray) -> np.ndarray:
    """One categorical draw per row of ``probs``."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    # zero-probability categories share the previous cdf value and are never chosen
    return (u[:, None] >= cdf).sum(1)


def simulate_population(config: SimulationConfig) -> tuple[list[Record], GroundTruth]:
    spec = config.spec
    rng = np.random.default_rng(config.seed)
    T, K = spec.n_years, spec.K
    entry = np.repeat(np.arange(T), config.entries)
    n = len(entry)
    scheme = spec.scheme

    covariates = [dict() for _ in range(n)]
    for d in scheme.dimensions:
        if d.kind == "duration":
            continue
        cat = rng.choice(len(d.categories), size=n, p=np.asarray(config.frequencies[d.name]))
        if d.kind == "static":
            for i in range(n):
                covariates[i][d.name] = d.categories[cat[i]]
        else:
            lo = np.asarray(d.bounds)[cat]
            hi = np.append(np.asarray(d.bounds[1:]), d.bounds[-1] + AGE_SPAN_LAST)[cat]
            ages = rng.integers(lo, hi)
            for i in range(n):
                covariates[i][d.name] = int(ages[i])

    years = list(spec.years)
    profile = np.array([scheme.year_profiles(covariates[i], spec.first_year + entry[i], years)
                        for i in range(n)], dtype=np.int64).reshape(n, T)

    tables = profile_tables(spec, config.params)
    pi = np.exp(tables.log_pi)
    groups = rng.choice(spec.G, size=n, p=pi / pi.sum())
    soft = np.exp(tables.log_soft)  # (G, P, J)
    roles = np.array(spec.state_space.roles)
    rec = spec.recording
    present0 = spec.state_space.present_index

    states = np.full((n, T), -1, dtype=np.int64)
    codes = np.full((n, T), -1, dtype=np.int64)
    fp_codes = np.array([0, *spec.fp_patterns], dtype=np.int64)
    for t in range(T):
        alive = entry < t
        states[entry == t, t] = present0
        idx = np.flatnonzero(alive)
        if idx.size:
            rows = tables.gamma[profile[idx, t - 1], states[idx, t - 1]]
            states[idx, t] = _draw(rng, rows)
        on = np.flatnonzero(entry <= t)
        st = states[on, t]
        role = roles[st]
        prof = profile[on, t]
        code = np.zeros(on.size, dtype=np.int64)
        u = rng.random(on.size)

        sel = np.isin(role, (PRESENT, RETURNED))
        if sel.any():
            pat = _draw(rng, soft[groups[on[sel]], prof[sel]])
            flag = np.where((role[sel] == RETURNED) & (u[sel] < rec.psi_r), FLAG_REIMMIGRATION, FLAG_NONE)
            code[sel] = pat | (flag << K)
        fp_roles = [ABROAD_UNKNOWN, ABROAD_DEATH] + ([DEAD] if spec.state_space.dead_false_positive else [])
        sel = np.isin(role, fp_roles)
        if sel.any():
            code[sel] = fp_codes[_draw(rng, tables.fp[prof[sel]])]
        sel = role == ABROAD_DEATH
        code[sel & (u < rec.phi_a)] = FLAG_DEATH << K
        sel = role == PRESENT_DEATH
        code[sel] = np.where(u[sel] < rec.phi_p, FLAG_DEATH << K, 0)
        sel = role == ABROAD_EMIG
        code[sel] = np.where(u[sel] < rec.psi_e, FLAG_EMIGRATION << K, 0)
        code[role == ABROAD_KNOWN] = 0
        if not spec.state_space.dead_false_positive:
            code[role == DEAD] = 0
        codes[on, t] = code

    width = len(str(n))
    ids = [f"{config.id_prefix}{i:0{width}d}" for i in range(n)]
    records = [Record(ids[i], spec.first_year + int(entry[i]), covariates[i], codes[i, entry[i]:])
               for i in range(n)]
    return records, GroundTruth(ids, entry, states, groups, covariates)


def truth_population_series(truth: GroundTruth, spec: ModelSpec,
                            present_roles=DEFAULT_PRESENT_ROLES) -> PopulationSeries:
    return population_series(truth.states, spec, present_roles=present_roles)
