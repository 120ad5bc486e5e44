"""Individual records and their array form.

A record holds one person's entry year, base covariates and one category
code per year from entry to the end of the study window. ``RecordBatch``
stacks many records into dense ``(n, T)`` arrays, with ``-1`` before entry.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .emission import FLAG_DEATH, FLAG_EMIGRATION, FLAG_NONE, FLAG_REIMMIGRATION, is_valid_code
from .errors import ConfigError, DataError
from .model import ModelSpec
from .statespace import (ABROAD_DEATH, ABROAD_EMIG, ABROAD_KNOWN, ABROAD_UNKNOWN, DEAD,
                         PRESENT, PRESENT_DEATH, RETURNED)


@dataclass(frozen=True)
class Record:
    id: str
    entry_year: int
    covariates: Mapping[str, object]
    codes: tuple[int, ...]  # one per year, entry_year .. last year

    def __post_init__(self):
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "entry_year", int(self.entry_year))
        object.__setattr__(self, "codes", tuple(int(c) for c in self.codes))
        object.__setattr__(self, "covariates", dict(self.covariates))

    @property
    def years(self) -> range:
        return range(self.entry_year, self.entry_year + len(self.codes))

    def observations(self) -> list[tuple[int, int]]:
        return list(zip(self.years, self.codes))


def validate_record(rec: Record, spec: ModelSpec) -> str | None:
    """Problem description for an invalid record, or None."""
    if not spec.first_year <= rec.entry_year <= spec.last_year:
        return f"entry year {rec.entry_year} outside study window"
    if len(rec.codes) != spec.last_year - rec.entry_year + 1:
        return (f"expected {spec.last_year - rec.entry_year + 1} consecutive yearly observations "
                f"from {rec.entry_year}, got {len(rec.codes)}")
    bad = ~np.asarray(is_valid_code(np.asarray(rec.codes, dtype=np.int64), spec.K))
    if bad.any():
        return f"invalid category code {rec.codes[int(np.argmax(bad))]}"
    try:
        spec.scheme.validate_base(rec.covariates)
    except ConfigError as exc:
        return str(exc)
    return None


def validate_records(records: Sequence[Record], spec: ModelSpec) -> None:
    problems = []
    seen = set()
    for rec in records:
        msg = validate_record(rec, spec)
        if msg is None and rec.id in seen:
            msg = "duplicate record id"
        seen.add(rec.id)
        if msg:
            problems.append((rec.id, msg))
    if problems:
        shown = "; ".join(f"{i}: {m}" for i, m in problems[:20])
        raise DataError(f"{len(problems)} invalid record(s) of {len(records)}: {shown}")


@dataclass
class RecordBatch:
    """Dense arrays for a list of records under one ModelSpec."""

    spec: ModelSpec
    ids: list[str]
    entry: np.ndarray     # (n,) entry index into the study window
    codes: np.ndarray     # (n, T), -1 before entry
    profile: np.ndarray   # (n, T) covariate profile id per year
    _emission: tuple = field(default=None, repr=False)

    @classmethod
    def from_records(cls, records: Sequence[Record], spec: ModelSpec) -> "RecordBatch":
        n, T = len(records), spec.n_years
        entry = np.zeros(n, dtype=np.int64)
        codes = np.full((n, T), -1, dtype=np.int64)
        profile = np.zeros((n, T), dtype=np.int64)
        years = list(spec.years)
        for i, rec in enumerate(records):
            t0 = rec.entry_year - spec.first_year
            entry[i] = t0
            codes[i, t0:] = rec.codes
            profile[i] = spec.scheme.year_profiles(rec.covariates, rec.entry_year, years)
        return cls(spec, [r.id for r in records], entry, codes, profile)

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, index) -> "RecordBatch":
        index = np.asarray(index)
        return RecordBatch(self.spec, [self.ids[i] for i in index], self.entry[index],
                           self.codes[index], self.profile[index])

    @property
    def started(self) -> np.ndarray:
        return np.arange(self.spec.n_years)[None, :] >= self.entry[:, None]

    @property
    def pattern(self) -> np.ndarray:
        return np.where(self.codes >= 0, self.codes & (self.spec.J - 1), 0)

    @property
    def flag(self) -> np.ndarray:
        return np.where(self.codes >= 0, self.codes >> self.spec.K, 0)

    def emission_design(self):
        """Per person-year coefficients (a, b, c, fp_col) of the emission vector.

        Pr(y_nt | state s, group g) = a[n,t,s] * softmax_g(pattern) + b[s] * fp[col] + c[n,t,s]
        where fp[col] is the absent-state channel probability of the observed
        category (col = -1 when the category cannot come from that channel).
        Entries before entry are all zero and are masked by the caller.
        """
        if self._emission is None:
            self._emission = _emission_design(self)
        return self._emission

    def event_counts(self) -> dict[str, np.ndarray]:
        """Per-year counts of recorded emigrations, deaths, re-immigrations."""
        f = self.flag
        obs = self.codes >= 0
        return {
            "emigration": ((f == FLAG_EMIGRATION) & obs).sum(0),
            "death": ((f == FLAG_DEATH) & obs).sum(0),
            "reimmigration": ((f == FLAG_REIMMIGRATION) & obs).sum(0),
        }


def _emission_design(batch: RecordBatch):
    spec = batch.spec
    rec = spec.recording
    n, T, S = len(batch), spec.n_years, spec.S
    flag, pattern = batch.flag, batch.pattern
    started = batch.codes >= 0
    none = (flag == FLAG_NONE) & started
    nobs = (none & (pattern == 0)).astype(float)
    is_reimm = ((flag == FLAG_REIMMIGRATION) & started).astype(float)
    is_emig = ((flag == FLAG_EMIGRATION) & started).astype(float)
    is_death = ((flag == FLAG_DEATH) & started).astype(float)
    none = none.astype(float)
    a = np.zeros((n, T, S))
    c = np.zeros((n, T, S))
    b = np.zeros(S)
    for s, role in enumerate(spec.state_space.roles):
        if role == PRESENT:
            a[..., s] = none
        elif role == RETURNED:
            a[..., s] = rec.psi_r * is_reimm + (1 - rec.psi_r) * none
        elif role == PRESENT_DEATH:
            c[..., s] = rec.phi_p * is_death + (1 - rec.phi_p) * nobs
        elif role == ABROAD_EMIG:
            c[..., s] = rec.psi_e * is_emig + (1 - rec.psi_e) * nobs
        elif role == ABROAD_KNOWN:
            c[..., s] = nobs
        elif role == ABROAD_UNKNOWN:
            b[s] = 1.0
        elif role == ABROAD_DEATH:
            c[..., s] = rec.phi_a * is_death
            b[s] = 1 - rec.phi_a
        elif role == DEAD:
            if spec.state_space.dead_false_positive:
                b[s] = 1.0
            else:
                c[..., s] = nobs
    fp_col = np.full((n, T), -1, dtype=np.int64)
    fp_col[nobs > 0] = 0
    for m, pat in enumerate(spec.fp_patterns):
        fp_col[(none > 0) & (pattern == pat)] = m + 1
    return a, b, c, fp_col
