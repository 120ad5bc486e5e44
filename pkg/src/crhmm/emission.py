"""Observation categories and state-conditional emission probabilities.

A person-year produces one of ``2 * 2**K + 2`` categories: a register pattern
(bit k set when seen in register k) with no event flag, the same patterns
with a re-immigration flag, or one of two pure-event categories (emigration
recorded, death recorded), which carry the empty pattern.

On disk a category is a single integer: pattern in bits ``0..K-1`` and the
flag in bits ``K..K+1`` (0 none, 1 emigration, 2 death, 3 re-immigration).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

from .errors import ConfigError
from .statespace import (ABROAD_DEATH, ABROAD_EMIG, ABROAD_KNOWN, ABROAD_UNKNOWN, DEAD,
                         PRESENT, PRESENT_DEATH, RETURNED)

FLAG_NONE, FLAG_EMIGRATION, FLAG_DEATH, FLAG_REIMMIGRATION = 0, 1, 2, 3
FLAG_NAMES = {FLAG_NONE: "none", FLAG_EMIGRATION: "emigration-recorded",
              FLAG_DEATH: "death-recorded", FLAG_REIMMIGRATION: "re-immigration-recorded"}
MAX_REGISTERS = 20


@dataclass(frozen=True)
class ObservationCategory:
    pattern: int
    flag: int = FLAG_NONE

    def __post_init__(self):
        if self.flag not in FLAG_NAMES:
            raise ValueError(f"invalid event flag {self.flag}")
        if self.pattern < 0:
            raise ValueError("register pattern must be non-negative")
        if self.flag in (FLAG_EMIGRATION, FLAG_DEATH) and self.pattern != 0:
            raise ValueError("emigration/death categories carry no register pattern")

    def encode(self, n_registers: int) -> int:
        if self.pattern >= 1 << n_registers:
            raise ValueError(f"pattern {self.pattern} needs more than {n_registers} registers")
        return self.pattern | (self.flag << n_registers)

    @classmethod
    def decode(cls, code: int, n_registers: int) -> "ObservationCategory":
        if not is_valid_code(code, n_registers):
            raise ValueError(f"invalid category code {code} for K={n_registers}")
        return cls(int(code) & ((1 << n_registers) - 1), int(code) >> n_registers)

    @property
    def is_no_observation(self) -> bool:
        return self.pattern == 0 and self.flag == FLAG_NONE


NO_OBSERVATION = ObservationCategory(0, FLAG_NONE)
EMIGRATED = ObservationCategory(0, FLAG_EMIGRATION)
DEATH_RECORDED = ObservationCategory(0, FLAG_DEATH)


def is_valid_code(code, n_registers: int):
    """Vectorised validity check of integer category codes."""
    code = np.asarray(code)
    pattern = code & ((1 << n_registers) - 1)
    flag = code >> n_registers
    ok = (code >= 0) & (flag <= 3)
    ok &= ~(((flag == FLAG_EMIGRATION) | (flag == FLAG_DEATH)) & (pattern != 0))
    return ok if ok.ndim else bool(ok)


def all_categories(n_registers: int) -> list[ObservationCategory]:
    J = 1 << n_registers
    cats = [ObservationCategory(p, FLAG_NONE) for p in range(J)]
    cats += [ObservationCategory(p, FLAG_REIMMIGRATION) for p in range(J)]
    return cats + [EMIGRATED, DEATH_RECORDED]


def check_register_count(n_registers: int) -> None:
    if n_registers > MAX_REGISTERS:
        raise ConfigError(
            f"{n_registers} registers exceed the enumeration cap of {MAX_REGISTERS}"
        )


def pattern_bits(n_registers: int) -> np.ndarray:
    """(2**K, K) 0/1 matrix; row j holds the register bits of pattern j."""
    check_register_count(n_registers)
    J = 1 << n_registers
    return ((np.arange(J)[:, None] >> np.arange(n_registers)) & 1).astype(float)


def pair_index(n_registers: int) -> list[tuple[int, int]]:
    return [(k, l) for k in range(n_registers) for l in range(k + 1, n_registers)]


def pattern_pair_bits(n_registers: int) -> np.ndarray:
    """(2**K, K(K-1)/2) products of register bits for every register pair."""
    B = pattern_bits(n_registers)
    pairs = pair_index(n_registers)
    if not pairs:
        return np.zeros((B.shape[0], 0))
    return np.stack([B[:, k] * B[:, l] for k, l in pairs], axis=1)


@dataclass(frozen=True)
class EmissionCoefficients:
    """Multicategory-logit coefficients for the present-state emission.

    main:   (G, K) register main effects
    pair:   (K(K-1)/2,) register x register effects, shared by all groups
    regcov: (G, K, C) register x covariate effects
    The all-zero pattern is the baseline with linear predictor 0.
    """

    main: np.ndarray
    pair: np.ndarray
    regcov: np.ndarray

    @property
    def n_registers(self) -> int:
        return self.main.shape[1]

    def logits(self, group: int, x: np.ndarray) -> np.ndarray:
        K = self.n_registers
        B = pattern_bits(K)
        per_register = self.main[group] + self.regcov[group] @ np.asarray(x, dtype=float)
        return B @ per_register + pattern_pair_bits(K) @ self.pair

    def log_probabilities(self, group: int, x: np.ndarray) -> np.ndarray:
        """Log softmax over all 2**K register patterns (max-subtracted)."""
        eta = self.logits(group, x)
        return eta - logsumexp(eta)


def category_log_probability(coeffs: EmissionCoefficients, group: int, x: np.ndarray,
                             category: ObservationCategory) -> float:
    if category.flag not in (FLAG_NONE, FLAG_REIMMIGRATION):
        raise ValueError("only register-pattern categories have a multicategory-logit probability")
    return float(coeffs.log_probabilities(group, x)[category.pattern])


@dataclass(frozen=True)
class FalsePositiveCoefficients:
    """Logit coefficients (rows: intercept then covariate effects) per false-positive pattern.

    With M patterns the absent-state channel is a softmax over
    ``[no observation, pattern_1, ..., pattern_M]`` with no-observation as
    reference, which for M = 1 is the plain inverse-logit.
    """

    patterns: tuple[int, ...]
    coefs: np.ndarray  # (M, 1 + C)

    def probabilities(self, x: np.ndarray) -> np.ndarray:
        """[Pr(no observation), Pr(pattern_1), ...]."""
        if not self.patterns:
            return np.ones(1)
        eta = self.coefs[:, 0] + self.coefs[:, 1:] @ np.asarray(x, dtype=float)
        full = np.concatenate([[0.0], eta])
        return np.exp(full - logsumexp(full))


def false_positive_probability(fp: FalsePositiveCoefficients, x: np.ndarray, pattern: int | None = None) -> float:
    """Probability q of emitting a false-positive pattern while absent or dead."""
    if len(fp.patterns) == 1 and pattern in (None, fp.patterns[0]):
        eta = fp.coefs[0, 0] + fp.coefs[0, 1:] @ np.asarray(x, dtype=float)
        return float(expit(eta))
    if pattern is None:
        raise ValueError("several false-positive patterns: say which one")
    if pattern not in fp.patterns:
        return 0.0
    return float(fp.probabilities(x)[1 + fp.patterns.index(pattern)])


@dataclass(frozen=True)
class EventRecording:
    """Probabilities that a life event leaves an administrative record.

    psi_e: emigration recorded on entering the emigration-recorded state
    psi_r: re-immigration recorded on entering the returned state
    phi_p: death recorded when dying while present
    phi_a: death recorded when dying abroad
    """

    psi_e: float = 1.0
    psi_r: float = 1.0
    phi_p: float = 1.0
    phi_a: float = 0.0

    def __post_init__(self):
        for k in ("psi_e", "psi_r", "phi_p", "phi_a"):
            v = getattr(self, k)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"event-recording probability {k}={v} outside [0, 1]")


def state_emission(role: str, category: ObservationCategory, present_prob: float,
                   fp_channel: float, recording: EventRecording, dead_false_positive: bool) -> float:
    """Pr(category | state) for one state, given its role.

    ``present_prob`` is the softmax probability of the category's register
    pattern; ``fp_channel`` is the absent-state channel probability of the
    category (q for a false-positive pattern, 1 - sum q for no observation,
    0 otherwise).
    """
    flag = category.flag
    nobs = 1.0 if category.is_no_observation else 0.0
    if role == PRESENT:
        return present_prob if flag == FLAG_NONE else 0.0
    if role == RETURNED:
        if flag == FLAG_REIMMIGRATION:
            return recording.psi_r * present_prob
        if flag == FLAG_NONE:
            return (1.0 - recording.psi_r) * present_prob
        return 0.0
    if role == PRESENT_DEATH:
        return recording.phi_p * (flag == FLAG_DEATH) + (1.0 - recording.phi_p) * nobs
    if role == ABROAD_EMIG:
        return recording.psi_e * (flag == FLAG_EMIGRATION) + (1.0 - recording.psi_e) * nobs
    if role == ABROAD_KNOWN:
        return nobs
    if role == ABROAD_UNKNOWN:
        return fp_channel
    if role == ABROAD_DEATH:
        return recording.phi_a * (flag == FLAG_DEATH) + (1.0 - recording.phi_a) * fp_channel
    if role == DEAD:
        return fp_channel if dead_false_positive else nobs
    raise ValueError(f"unknown role {role!r}")


def fp_channel_probability(fp: FalsePositiveCoefficients, x: np.ndarray,
                           category: ObservationCategory) -> float:
    if category.flag != FLAG_NONE:
        return 0.0
    probs = fp.probabilities(x)
    if category.pattern == 0:
        return float(probs[0])
    if category.pattern in fp.patterns:
        return float(probs[1 + fp.patterns.index(category.pattern)])
    return 0.0
