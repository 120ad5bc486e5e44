"""Categorical covariate schemes with dummy coding and explicit baselines.

A scheme is a list of dimensions. Static dimensions (sex, country of birth)
take their category straight from the record. Two kinds of dimension evolve
with calendar year and are derived rather than stored:

* ``age``: the record stores age at entry; the category in a given year is
  the bin of ``age_at_entry + (year - entry_year)``.
* ``duration``: years since entry, binned. Nothing is stored on the record.

Bins are described by ascending lower bounds, one per category.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError

KINDS = ("static", "age", "duration")


@dataclass(frozen=True)
class Dimension:
    name: str
    categories: tuple[str, ...]
    baseline: str | None = None
    kind: str = "static"
    bounds: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(str(c) for c in self.categories))
        object.__setattr__(self, "bounds", tuple(int(b) for b in self.bounds))
        if self.baseline is None:
            object.__setattr__(self, "baseline", self.categories[0] if self.categories else None)
        if len(self.categories) < 1:
            raise ConfigError(f"dimension {self.name!r} has no categories")
        if len(set(self.categories)) != len(self.categories):
            raise ConfigError(f"dimension {self.name!r} has duplicate categories")
        if self.baseline not in self.categories:
            raise ConfigError(f"baseline {self.baseline!r} is not a category of {self.name!r}")
        if self.kind not in KINDS:
            raise ConfigError(f"dimension {self.name!r}: unknown kind {self.kind!r}")
        if self.kind != "static":
            if len(self.bounds) != len(self.categories):
                raise ConfigError(f"dimension {self.name!r} needs one lower bound per category")
            if any(b2 <= b1 for b1, b2 in zip(self.bounds, self.bounds[1:])):
                raise ConfigError(f"dimension {self.name!r}: bounds must increase")

    @property
    def non_baseline(self) -> tuple[str, ...]:
        return tuple(c for c in self.categories if c != self.baseline)

    def index(self, category) -> int:
        try:
            return self.categories.index(str(category))
        except ValueError:
            raise ConfigError(
                f"unknown category {category!r} for covariate {self.name!r}"
            ) from None

    def bin(self, value: int) -> int:
        """Category index for a numeric value (age or years since entry)."""
        idx = int(np.searchsorted(self.bounds, value, side="right")) - 1
        return max(idx, 0)


@dataclass(frozen=True)
class CovariateScheme:
    dimensions: tuple[Dimension, ...] = ()
    _columns: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "dimensions", tuple(self.dimensions))
        names = [d.name for d in self.dimensions]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate covariate dimension names")
        cols = {}
        for d in self.dimensions:
            for c in d.non_baseline:
                cols[(d.name, c)] = len(cols)
        object.__setattr__(self, "_columns", cols)

    @property
    def n_effects(self) -> int:
        return len(self._columns)

    @property
    def effect_names(self) -> list[str]:
        return [f"{d}={c}" for (d, c) in self._columns]

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(d.categories) for d in self.dimensions)

    @property
    def n_profiles(self) -> int:
        return int(np.prod(self.shape)) if self.dimensions else 1

    def dimension(self, name: str) -> Dimension:
        for d in self.dimensions:
            if d.name == name:
                return d
        raise ConfigError(f"unknown covariate dimension {name!r}")

    def column(self, dim: str, category: str) -> int | None:
        """Design column of a category, or None for the baseline."""
        d = self.dimension(dim)
        d.index(category)
        return self._columns.get((dim, str(category)))

    # profiles -----------------------------------------------------------
    def profile_id(self, cats: Sequence[int]) -> int:
        if not self.dimensions:
            return 0
        return int(np.ravel_multi_index(tuple(cats), self.shape))

    def profile_cats(self, pid: int) -> tuple[int, ...]:
        if not self.dimensions:
            return ()
        return tuple(int(i) for i in np.unravel_index(pid, self.shape))

    def profiles(self) -> list[tuple[int, ...]]:
        return list(itertools.product(*(range(n) for n in self.shape)))

    def profile_labels(self, pid: int) -> dict[str, str]:
        cats = self.profile_cats(pid)
        return {d.name: d.categories[i] for d, i in zip(self.dimensions, cats)}

    def design_row(self, cats: Sequence[int]) -> np.ndarray:
        x = np.zeros(self.n_effects)
        for d, i in zip(self.dimensions, cats):
            col = self._columns.get((d.name, d.categories[i]))
            if col is not None:
                x[col] = 1.0
        return x

    def design_matrix(self) -> np.ndarray:
        """One-hot design rows for every profile, in profile-id order."""
        return np.array([self.design_row(c) for c in self.profiles()]).reshape(
            self.n_profiles, self.n_effects
        )

    def design(self, covariates: Mapping[str, str]) -> np.ndarray:
        """Design vector for a fully resolved covariate profile (dim -> category)."""
        return self.design_row(self.resolve(covariates))

    def resolve(self, covariates: Mapping[str, str]) -> tuple[int, ...]:
        cats = []
        for d in self.dimensions:
            if d.name not in covariates:
                raise ConfigError(f"covariate profile is missing dimension {d.name!r}")
            cats.append(d.index(covariates[d.name]))
        extra = set(covariates) - {d.name for d in self.dimensions}
        if extra:
            raise ConfigError(f"unknown covariate dimension(s) {sorted(extra)}")
        return tuple(cats)

    # per-year derivation -------------------------------------------------
    def validate_base(self, base: Mapping) -> None:
        for d in self.dimensions:
            if d.kind == "duration":
                continue
            if d.name not in base:
                raise ConfigError(f"missing covariate {d.name!r}")
            if d.kind == "static":
                d.index(base[d.name])
            else:
                try:
                    int(base[d.name])
                except (TypeError, ValueError):
                    raise ConfigError(
                        f"covariate {d.name!r} must be an integer age at entry"
                    ) from None

    def year_cats(self, base: Mapping, entry_year: int, year: int) -> tuple[int, ...]:
        elapsed = year - entry_year
        cats = []
        for d in self.dimensions:
            if d.kind == "static":
                cats.append(d.index(base[d.name]))
            elif d.kind == "age":
                cats.append(d.bin(int(base[d.name]) + elapsed))
            else:
                cats.append(d.bin(elapsed))
        return tuple(cats)

    def year_profiles(self, base: Mapping, entry_year: int, years: Sequence[int]) -> np.ndarray:
        return np.array(
            [self.profile_id(self.year_cats(base, entry_year, y)) for y in years], dtype=np.int64
        )
