"""Model specification and the flat parameter vector layout.

Every free parameter lives in one flat float vector. ``ModelSpec.layout``
maps positions to named blocks; ``unpack`` turns the vector into per-block
arrays with plain integer gathers, so the same code runs on numpy arrays and
on traced JAX arrays. Tied entries (emission effects shared across mixture
groups) point at the same position, and structurally absent entries point at
a trailing zero slot.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, NamedTuple

import numpy as np
from scipy.special import expit, logsumexp

from .covariates import CovariateScheme
from .emission import (EmissionCoefficients, EventRecording, FalsePositiveCoefficients,
                       check_register_count, pair_index, pattern_bits, pattern_pair_bits)
from .errors import ConfigError
from .statespace import (DEREGISTRATION, EMIGRATION, EVENTS, REIMMIGRATION, SURVIVAL,
                         LifeEventCoefficients, StateSpaceConfig)


class Params(NamedTuple):
    life: object    # (4, 1 + C) in EVENTS order; unused events are zero
    main: object    # (G, K)
    regcov: object  # (G, K, C)
    pair: object    # (K(K-1)/2,)
    mix: object     # (G - 1,)
    fp: object      # (M, 1 + C)


@dataclass(frozen=True)
class Layout:
    names: tuple[str, ...]
    life: np.ndarray
    main: np.ndarray
    regcov: np.ndarray
    pair: np.ndarray
    mix: np.ndarray
    fp: np.ndarray

    @property
    def size(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class ModelSpec:
    state_space: StateSpaceConfig
    scheme: CovariateScheme
    registers: tuple[str, ...]
    n_groups: int = 1
    group_specific: tuple[str, ...] = ()
    fp_patterns: tuple[int, ...] = ()
    recording: EventRecording = field(default_factory=EventRecording)
    first_year: int = 0
    n_years: int = 1

    def __post_init__(self):
        object.__setattr__(self, "registers", tuple(self.registers))
        object.__setattr__(self, "group_specific", tuple(self.group_specific))
        object.__setattr__(self, "fp_patterns", tuple(int(p) for p in self.fp_patterns))
        K = len(self.registers)
        if K < 1:
            raise ConfigError("at least one register is required")
        check_register_count(K)
        if len(set(self.registers)) != K:
            raise ConfigError("duplicate register names")
        if self.n_groups < 1:
            raise ConfigError("mixture group count must be >= 1")
        for r in self.group_specific:
            if r not in self.registers:
                raise ConfigError(f"group-specific register {r!r} is not a declared register")
        if self.n_groups > 1 and not self.group_specific:
            raise ConfigError("a mixture with G > 1 needs at least one group-specific register")
        for p in self.fp_patterns:
            if not 0 < p < (1 << K):
                raise ConfigError(f"false-positive pattern {p} is not a non-empty pattern of {K} registers")
        if len(set(self.fp_patterns)) != len(self.fp_patterns):
            raise ConfigError("duplicate false-positive patterns")
        if self.n_years < 1:
            raise ConfigError("n_years must be >= 1")

    # sizes ---------------------------------------------------------------
    @property
    def K(self) -> int:
        return len(self.registers)

    @property
    def J(self) -> int:
        return 1 << self.K

    @property
    def S(self) -> int:
        return self.state_space.n_states

    @property
    def G(self) -> int:
        return self.n_groups

    @property
    def C(self) -> int:
        return self.scheme.n_effects

    @property
    def M(self) -> int:
        return len(self.fp_patterns)

    @property
    def n_params(self) -> int:
        return self.layout.size

    @property
    def years(self) -> np.ndarray:
        return self.first_year + np.arange(self.n_years)

    @property
    def last_year(self) -> int:
        return self.first_year + self.n_years - 1

    def register_index(self, name: str) -> int:
        try:
            return self.registers.index(name)
        except ValueError:
            raise ConfigError(f"unknown register {name!r}") from None

    def pattern_of(self, registers) -> int:
        p = 0
        for r in registers:
            p |= 1 << self.register_index(r)
        return p

    def pattern_name(self, pattern: int) -> str:
        regs = [r for k, r in enumerate(self.registers) if pattern >> k & 1]
        return "+".join(regs) if regs else "none"

    # cached tables -------------------------------------------------------
    @cached_property
    def design(self) -> np.ndarray:
        return self.scheme.design_matrix()

    @cached_property
    def bits(self) -> np.ndarray:
        return pattern_bits(self.K)

    @cached_property
    def pair_bits(self) -> np.ndarray:
        return pattern_pair_bits(self.K)

    @cached_property
    def layout(self) -> Layout:
        names: list[str] = []

        def add(name):
            names.append(name)
            return len(names) - 1

        effects = self.scheme.effect_names
        C, K, G = self.C, self.K, self.G
        life = np.full((len(EVENTS), 1 + C), -1, dtype=np.int64)
        for event in self.state_space.events:
            i = EVENTS.index(event)
            life[i, 0] = add(f"{event}:intercept")
            for c, eff in enumerate(effects):
                life[i, 1 + c] = add(f"{event}:{eff}")
        main = np.full((G, K), -1, dtype=np.int64)
        regcov = np.full((G, K, C), -1, dtype=np.int64)
        for k, reg in enumerate(self.registers):
            groups = range(G) if (reg in self.group_specific and G > 1) else [None]
            for g in groups:
                tag = "" if g is None else f"[g{g + 1}]"
                idx = add(f"emission:{reg}{tag}")
                cols = [add(f"emission:{reg}:{eff}{tag}") for eff in effects]
                targets = range(G) if g is None else [g]
                for gg in targets:
                    main[gg, k] = idx
                    regcov[gg, k, :] = cols
        pair = np.array([add(f"emission:{self.registers[k]}*{self.registers[l]}")
                         for k, l in pair_index(K)], dtype=np.int64)
        mix = np.array([add(f"mixing:logit[g{g + 1}]") for g in range(G - 1)], dtype=np.int64)
        fp = np.full((self.M, 1 + C), -1, dtype=np.int64)
        for m, pat in enumerate(self.fp_patterns):
            pname = self.pattern_name(pat)
            fp[m, 0] = add(f"false_positive:{pname}:intercept")
            for c, eff in enumerate(effects):
                fp[m, 1 + c] = add(f"false_positive:{pname}:{eff}")
        n = len(names)
        arrays = []
        for a in (life, main, regcov, pair, mix, fp):
            a = np.where(a < 0, n, a)  # trailing zero slot
            a.setflags(write=False)
            arrays.append(a)
        return Layout(tuple(names), *arrays)

    @property
    def param_names(self) -> tuple[str, ...]:
        return self.layout.names

    # pack / unpack -------------------------------------------------------
    def unpack(self, flat) -> Params:
        L = self.layout
        ext = np.concatenate([np.asarray(flat, dtype=float), np.zeros(1)])
        return Params(ext[L.life], ext[L.main], ext[L.regcov], ext[L.pair], ext[L.mix], ext[L.fp])

    def pack(self, params: Params) -> np.ndarray:
        L = self.layout
        flat = np.zeros(L.size + 1)
        # later writes win; tied entries are equal for any unpacked vector
        for idx, vals in zip((L.life, L.main, L.regcov, L.pair, L.mix, L.fp), params):
            flat[np.asarray(idx).ravel()] = np.asarray(vals, dtype=float).ravel()
        return flat[:-1].copy()

    def named(self, flat) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.param_names, np.asarray(flat))}

    def from_named(self, values: Mapping[str, float], base=None) -> np.ndarray:
        flat = np.zeros(self.n_params) if base is None else np.array(base, dtype=float)
        index = {n: i for i, n in enumerate(self.param_names)}
        for name, v in values.items():
            if name not in index:
                raise ConfigError(f"unknown parameter name {name!r}")
            flat[index[name]] = float(v)
        return flat

    def block_indices(self, prefix: str) -> np.ndarray:
        return np.array([i for i, n in enumerate(self.param_names) if n.startswith(prefix)], dtype=int)

    # public coefficient views ----------------------------------------------
    def life_coefficients(self, flat, event: str) -> LifeEventCoefficients:
        p = self.unpack(flat)
        row = p.life[EVENTS.index(event)]
        return LifeEventCoefficients(self.scheme, float(row[0]),
                                     dict(zip(self.scheme.effect_names, map(float, row[1:]))))

    def emission_coefficients(self, flat) -> EmissionCoefficients:
        p = self.unpack(flat)
        return EmissionCoefficients(np.asarray(p.main), np.asarray(p.pair), np.asarray(p.regcov))

    def fp_coefficients(self, flat) -> FalsePositiveCoefficients:
        p = self.unpack(flat)
        return FalsePositiveCoefficients(self.fp_patterns, np.asarray(p.fp))

    def mixing_proportions(self, flat) -> np.ndarray:
        return np.exp(log_mixing(self.unpack(flat).mix))


# ---------------------------------------------------------------------------
# per-profile tables


def log_mixing(mix_logits) -> np.ndarray:
    full = np.concatenate([np.asarray(mix_logits, dtype=float), np.zeros(1)])
    return full - logsumexp(full)


class ProfileTables(NamedTuple):
    life: np.ndarray      # (4, P) event probabilities, EVENTS order
    comp: np.ndarray      # (4, P) their complements
    gamma: np.ndarray     # (P, S, S) transition matrices
    log_soft: np.ndarray  # (G, P, J) log softmax over register patterns
    fp: np.ndarray        # (P, M + 1) absent-state channel: [no observation, fp patterns...]
    log_pi: np.ndarray    # (G,)


TRANSITION_ORDER = tuple(EVENTS.index(e) for e in (SURVIVAL, EMIGRATION, REIMMIGRATION, DEREGISTRATION))


def profile_tables(spec: ModelSpec, flat) -> ProfileTables:
    """Per covariate profile: life-event probabilities, transitions, emissions."""
    p = spec.unpack(flat)
    X = spec.design
    eta = p.life[:, :1] + p.life[:, 1:] @ X.T
    prob, comp = expit(eta), expit(-eta)
    gamma = spec.state_space.transition(*(prob[j] for j in TRANSITION_ORDER),
                                        complements=[comp[j] for j in TRANSITION_ORDER])
    per_reg = p.main[:, None, :] + np.einsum("gkc,pc->gpk", p.regcov, X)
    logits = per_reg @ spec.bits.T.astype(float)
    if spec.pair_bits.shape[1]:
        logits = logits + (spec.pair_bits @ p.pair)[None, None, :]
    log_soft = logits - logsumexp(logits, axis=-1, keepdims=True)
    fp_eta = np.concatenate([np.zeros((1, X.shape[0])), p.fp[:, :1] + p.fp[:, 1:] @ X.T], axis=0)
    fp = np.exp(fp_eta - logsumexp(fp_eta, axis=0, keepdims=True)).T
    return ProfileTables(prob, comp, gamma, log_soft, np.ascontiguousarray(fp), log_mixing(p.mix))
