"""Latent state spaces and covariate-driven transition matrices.

Two state spaces are built in:

``general3``
    present / abroad / dead, driven by survival ``s``, emigration ``e`` and
    re-immigration ``r``.
``sweden8``
    the refined space separating recorded from unrecorded emigration. It adds
    the de-registration probability ``lam`` and single-year intermediate
    states so that recorded events land in the right year.

Builders work elementwise on arrays of probabilities, so the same code serves
scalar calls and stacks of per-profile matrices. Every entry is a product in
which each probability or its complement appears at most once; gradients
rely on that multilinearity.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import expit

from .covariates import CovariateScheme
from .errors import ConfigError, DomainError

# state roles
PRESENT = "present"
PRESENT_DEATH = "present-death-recorded"
ABROAD_EMIG = "abroad-emigration-recorded"
ABROAD_KNOWN = "abroad-known"
ABROAD_UNKNOWN = "abroad-unknown"
ABROAD_DEATH = "abroad-death-recorded"
RETURNED = "returned-re-registered"
DEAD = "dead"
ROLES = (PRESENT, PRESENT_DEATH, ABROAD_EMIG, ABROAD_KNOWN, ABROAD_UNKNOWN,
         ABROAD_DEATH, RETURNED, DEAD)

# life events, in parameter-block order
EMIGRATION = "emigration"
REIMMIGRATION = "reimmigration"
DEREGISTRATION = "deregistration"
SURVIVAL = "survival"
EVENTS = (EMIGRATION, REIMMIGRATION, DEREGISTRATION, SURVIVAL)


@dataclass(frozen=True)
class State:
    id: int
    label: str
    role: str


@dataclass(frozen=True)
class StateSpaceConfig:
    """Declared states plus the name of the transition builder that drives them.

    ``dead_false_positive`` routes the false-positive channel into the dead
    state's emission row (the eight-state case study does this; the general
    three-state model lets the dead emit only "no observation").
    """

    name: str
    states: tuple[State, ...]
    absorbing: frozenset[int]
    intermediate: frozenset[int]
    events: tuple[str, ...]
    dead_false_positive: bool = False
    _permitted: np.ndarray = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        if self.name not in _BUILDERS:
            raise ConfigError(f"no transition builder named {self.name!r}")
        roles = [s.role for s in self.states]
        for r in roles:
            if r not in ROLES:
                raise ConfigError(f"unknown state role {r!r}")
        if roles.count(PRESENT) != 1 or roles.count(DEAD) != 1:
            raise ConfigError("a state space needs exactly one present and one dead state")
        if [s.id for s in self.states] != list(range(1, len(self.states) + 1)):
            raise ConfigError("state ids must be 1..S in order")
        for e in self.events:
            if e not in EVENTS:
                raise ConfigError(f"unknown life event {e!r}")
        probe = self.transition(0.37, 0.29, 0.41, 0.53)
        if probe.shape != (self.n_states, self.n_states):
            raise ConfigError(f"builder {self.name!r} does not match {self.n_states} states")
        permitted = probe > 0
        for a in self.absorbing:
            row = np.zeros(self.n_states)
            row[a - 1] = 1.0
            if not np.array_equal(probe[a - 1], row):
                raise ConfigError(f"absorbing state {a} does not map onto itself")
        for a in self.intermediate:
            if permitted[a - 1, a - 1]:
                raise ConfigError(f"intermediate state {a} has a self-transition")
        permitted.setflags(write=False)
        object.__setattr__(self, "_permitted", permitted)

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def roles(self) -> tuple[str, ...]:
        return tuple(s.role for s in self.states)

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(s.label for s in self.states)

    @property
    def present_index(self) -> int:
        return self.roles.index(PRESENT)

    @property
    def permitted(self) -> np.ndarray:
        """Boolean S x S mask of structurally possible transitions."""
        return self._permitted

    def indices(self, *roles: str) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r in roles]

    def initial(self) -> np.ndarray:
        d = np.zeros(self.n_states)
        d[self.present_index] = 1.0
        return d

    def transition(self, s, e, r, lam=None, complements=None):
        """Transition matrix (or stack of them) from life-event probabilities.

        ``complements`` optionally supplies (1-s, 1-e, 1-r, 1-lam) computed
        without cancellation, e.g. ``expit(-eta)``.
        """
        if lam is None:
            lam = 0.5
        args = [np.asarray(v, dtype=float) for v in (s, e, r, lam)]
        if complements is None:
            comps = [1.0 - a for a in args]
        else:
            comps = [np.asarray(c, dtype=float) for c in complements]
        return _BUILDERS[self.name](*args, *comps)


def _rows(rows):
    shape = np.broadcast_shapes(*[np.shape(v) for row in rows for v in row if not isinstance(v, (int, float))])
    zero = np.zeros(shape)
    out = [np.stack([v + zero for v in row], axis=-1) for row in rows]
    return np.stack(out, axis=-2)


def _general3(s, e, r, lam, sb, eb, rb, lb):
    return _rows([
        [s * eb, s * e, sb],
        [s * r, s * rb, sb],
        [0.0, 0.0, 1.0],
    ])


def _sweden8(s, e, r, lam, sb, eb, rb, lb):
    present = [s * eb, sb, lam * s * e, 0.0, lb * s * e, 0.0, 0.0, 0.0]
    to_dead = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]
    known = [0.0, 0.0, 0.0, s * rb, 0.0, sb, s * r, 0.0]
    unknown = [s * r, 0.0, 0.0, 0.0, s * rb, sb, 0.0, 0.0]
    return _rows([present, to_dead, known, known, unknown, to_dead, present, to_dead])


_BUILDERS = {"general3": _general3, "sweden8": _sweden8}


def general3() -> StateSpaceConfig:
    return StateSpaceConfig(
        name="general3",
        states=(State(1, "present", PRESENT), State(2, "abroad", ABROAD_UNKNOWN),
                State(3, "dead", DEAD)),
        absorbing=frozenset({3}),
        intermediate=frozenset(),
        events=(EMIGRATION, REIMMIGRATION, SURVIVAL),
        dead_false_positive=False,
    )


def sweden8() -> StateSpaceConfig:
    return StateSpaceConfig(
        name="sweden8",
        states=(
            State(1, "present and alive", PRESENT),
            State(2, "present and death recorded", PRESENT_DEATH),
            State(3, "abroad and emigration recorded", ABROAD_EMIG),
            State(4, "abroad with known absence", ABROAD_KNOWN),
            State(5, "abroad with unknown absence", ABROAD_UNKNOWN),
            State(6, "abroad and death recorded", ABROAD_DEATH),
            State(7, "returned and re-registered", RETURNED),
            State(8, "dead", DEAD),
        ),
        absorbing=frozenset({8}),
        intermediate=frozenset({2, 3, 6, 7}),
        events=EVENTS,
        dead_false_positive=True,
    )


PRESETS = {"general3": general3, "sweden8": sweden8}


def preset(name: str) -> StateSpaceConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown state-space preset {name!r}; choose from {sorted(PRESETS)}") from None


def _check_probs(**probs):
    for k, v in probs.items():
        if not np.all((np.asarray(v) >= 0) & (np.asarray(v) <= 1)):
            raise DomainError(f"{k} must lie in [0, 1], got {v!r}")


def build_transition_matrix_general(s: float, e: float, r: float) -> np.ndarray:
    _check_probs(s=s, e=e, r=r)
    return general3().transition(s, e, r)


def build_transition_matrix_case(s: float, e: float, r: float, lam: float) -> np.ndarray:
    _check_probs(s=s, e=e, r=r, lam=lam)
    return sweden8().transition(s, e, r, lam)


@dataclass(frozen=True)
class LifeEventCoefficients:
    """Logistic-regression coefficients for one life event.

    ``effects`` maps ``"dimension=category"`` to a logit-scale effect. Baseline
    categories carry no coefficient; non-baseline categories left out are 0.
    """

    scheme: CovariateScheme
    intercept: float = 0.0
    effects: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        known = set(self.scheme.effect_names)
        for key in self.effects:
            if key not in known:
                raise ConfigError(f"unknown covariate category {key!r} in life-event coefficients")
        object.__setattr__(self, "effects", {k: float(self.effects.get(k, 0.0))
                                             for k in self.scheme.effect_names})

    def vector(self) -> np.ndarray:
        return np.array([self.intercept, *self.effects.values()], dtype=float)

    def linear_predictor(self, covariates: Mapping[str, str]) -> float:
        x = self.scheme.design(covariates)
        return float(self.intercept + x @ np.array(list(self.effects.values()), dtype=float))


def life_event_probability(coeffs: LifeEventCoefficients, covariates: Mapping[str, str]) -> float:
    """Inverse-logit of intercept plus the matching covariate effects."""
    return float(expit(coeffs.linear_predictor(covariates)))
