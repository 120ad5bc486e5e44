"""Per-year tallies of latent states, registered counts and overcoverage."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .emission import FLAG_DEATH, FLAG_EMIGRATION, FLAG_REIMMIGRATION
from .errors import DomainError
from .model import ModelSpec
from .records import RecordBatch
from .statespace import (ABROAD_DEATH, ABROAD_EMIG, ABROAD_KNOWN, ABROAD_UNKNOWN, DEAD,
                         PRESENT, PRESENT_DEATH, RETURNED)

DEFAULT_PRESENT_ROLES = frozenset({PRESENT, PRESENT_DEATH, RETURNED})


@dataclass(frozen=True)
class PopulationSeries:
    years: np.ndarray
    present: np.ndarray
    abroad_known: np.ndarray
    abroad_unknown: np.ndarray
    dead: np.ndarray
    registered: np.ndarray | None = None

    @property
    def entered(self) -> np.ndarray:
        return self.present + self.abroad_known + self.abroad_unknown + self.dead

    @property
    def overcoverage(self) -> np.ndarray | None:
        if self.registered is None:
            return None
        return np.array([overcoverage(p, r) if r > 0 else np.nan
                         for p, r in zip(self.present, self.registered)])

    def as_dict(self) -> dict[str, list]:
        out = {"year": [int(y) for y in self.years]}
        for k in ("present", "abroad_known", "abroad_unknown", "dead"):
            out[k] = [float(v) for v in getattr(self, k)]
        if self.registered is not None:
            out["registered"] = [float(v) for v in self.registered]
            out["overcoverage"] = [float(v) for v in self.overcoverage]
        return out


def role_classes(spec: ModelSpec, present_roles=DEFAULT_PRESENT_ROLES) -> np.ndarray:
    """Class per state: 0 present, 1 abroad-known, 2 abroad-unknown, 3 dead."""
    out = []
    for role in spec.state_space.roles:
        if role in present_roles:
            out.append(0)
        elif role in (ABROAD_EMIG, ABROAD_KNOWN):
            out.append(1)
        elif role == ABROAD_UNKNOWN:
            out.append(2)
        elif role in (DEAD, ABROAD_DEATH, PRESENT_DEATH):
            out.append(3)
        else:
            out.append(0)
    return np.array(out)


def population_series(states: np.ndarray, spec: ModelSpec, weights=None,
                      present_roles=DEFAULT_PRESENT_ROLES, registered=None) -> PopulationSeries:
    """Tally (n, T) state indices (-1 before entry), optionally weighted per individual."""
    states = np.asarray(states)
    w = np.ones(states.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    cls = role_classes(spec, present_roles)
    entered = states >= 0
    klass = np.where(entered, cls[np.maximum(states, 0)], -1)
    counts = [((klass == k) * w[:, None]).sum(0) for k in range(4)]
    return PopulationSeries(spec.years, *counts,
                            registered=None if registered is None else np.asarray(registered, dtype=float))


def population_size(states: np.ndarray, spec: ModelSpec, year: int, weights=None,
                    present_roles=DEFAULT_PRESENT_ROLES) -> float:
    t = year - spec.first_year
    if not 0 <= t < spec.n_years:
        raise DomainError(f"year {year} outside the study window")
    return float(population_series(states, spec, weights, present_roles).present[t])


def registered_series(batch: RecordBatch, weights=None) -> np.ndarray:
    """Administratively registered count per year, derived from recorded events.

    Registered from entry; a recorded emigration de-registers from its year, a
    recorded re-immigration re-registers from its year, and a recorded death
    de-registers from the following year.
    """
    f, started = batch.flag, batch.codes >= 0
    n, T = batch.codes.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    reg = np.zeros((n, T), dtype=bool)
    status = np.zeros(n, dtype=bool)
    died = np.zeros(n, dtype=bool)
    for t in range(T):
        entering = batch.entry == t
        status = np.where(entering, True, status)
        status &= ~died
        status = np.where(started[:, t] & (f[:, t] == FLAG_EMIGRATION), False, status)
        status = np.where(started[:, t] & (f[:, t] == FLAG_REIMMIGRATION), True, status)
        reg[:, t] = status & started[:, t]
        died |= started[:, t] & (f[:, t] == FLAG_DEATH)
    return (reg * w[:, None]).sum(0)


def overcoverage(population_estimate: float, rtb_size: float) -> float:
    """Percentage of the registered population that is not actually present."""
    if not rtb_size > 0:
        raise DomainError("RTB size must be positive")
    return (1.0 - population_estimate / rtb_size) * 100.0
