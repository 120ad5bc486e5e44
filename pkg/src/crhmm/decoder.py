"""Most probable latent trajectories and the quantities derived from them.

Viterbi runs in log space on mixture-weighted emissions: each record's
emission vector is the posterior-weighted average of its group-specific
emission vectors. Ties are resolved toward the lowest state id at the final
year and at every backtrack step, with scores within ``TIE_TOL`` of the
maximum treated as tied.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .covariates import CovariateScheme
from .emission import EmissionCoefficients, FLAG_NONE
from .errors import DecodingError, DomainError
from .model import ModelSpec, profile_tables
from .population import DEFAULT_PRESENT_ROLES, PopulationSeries, population_series, role_classes
from .records import Record, RecordBatch

TIE_TOL = 1e-9


@dataclass(frozen=True)
class DecodedTrajectory:
    index: int
    id: str
    entry_year: int
    state_ids: tuple[int, ...]  # 1-based, entry year to last year
    group: int                  # 1-based argmax of the posterior group weights
    log_score: float

    def years(self) -> range:
        return range(self.entry_year, self.entry_year + len(self.state_ids))


@dataclass
class Decoding:
    """Batch decoding result; states are 0-based with -1 before entry."""

    batch: RecordBatch
    states: np.ndarray
    omega: np.ndarray      # (G, n)
    log_score: np.ndarray  # (n,)

    @property
    def groups(self) -> np.ndarray:
        return np.argmax(self.omega, axis=0)

    def trajectory(self, i: int) -> DecodedTrajectory:
        b = self.batch
        t0 = int(b.entry[i])
        return DecodedTrajectory(i, b.ids[i], b.spec.first_year + t0,
                                 tuple(int(s) + 1 for s in self.states[i, t0:]),
                                 int(self.groups[i]) + 1, float(self.log_score[i]))

    def trajectories(self) -> list[DecodedTrajectory]:
        return [self.trajectory(i) for i in range(len(self.batch))]

    def population(self, present_roles=DEFAULT_PRESENT_ROLES, registered=None) -> PopulationSeries:
        return population_series(self.states, self.batch.spec, present_roles=present_roles,
                                 registered=registered)


def posterior_group_weights(batch: RecordBatch, flat) -> np.ndarray:
    """(G, n) posterior mixture weights omega_ig from the batched forward pass."""
    from .engine import Objective
    spec = batch.spec
    ll = Objective(batch).group_logliks(flat)
    lp = np.exp(profile_tables(spec, np.asarray(flat, dtype=float)).log_pi)
    with np.errstate(divide="ignore"):
        a = np.log(lp)[:, None] + ll
    top = a.max(0)
    bad = ~np.isfinite(top)
    if bad.any():
        i = int(np.argmax(bad))
        raise DecodingError(f"record {batch.ids[i]}: zero likelihood under every mixture group")
    w = np.exp(a - top)
    return w / w.sum(0)


def mixture_emissions(batch: RecordBatch, flat, omega: np.ndarray) -> np.ndarray:
    """(n, T, S) emission probabilities averaged over groups with weights omega."""
    spec = batch.spec
    tab = profile_tables(spec, np.asarray(flat, dtype=float))
    a, b, c, fp_col = batch.emission_design()
    prof, pat = batch.profile, batch.pattern
    soft = np.exp(tab.log_soft[:, prof, pat])                 # (G, n, T)
    wsoft = np.einsum("gn,gnt->nt", omega, soft)
    fpc = np.where(fp_col >= 0, np.take_along_axis(tab.fp[prof], np.maximum(fp_col, 0)[..., None], -1)[..., 0], 0.0)
    return a * wsoft[..., None] + b * fpc[..., None] + c


def _lowest_max(scores: np.ndarray, axis: int) -> np.ndarray:
    """Index of the first entry within TIE_TOL of the maximum along ``axis``."""
    top = scores.max(axis=axis, keepdims=True)
    return np.argmax(scores >= top - TIE_TOL, axis=axis)


def viterbi_batch(batch: RecordBatch, flat, omega: np.ndarray | None = None) -> Decoding:
    """Decode every record of the batch."""
    spec = batch.spec
    flat = np.asarray(flat, dtype=float)
    if omega is None:
        omega = posterior_group_weights(batch, flat)
    E = mixture_emissions(batch, flat, omega)
    tab = profile_tables(spec, flat)
    n, T, S = E.shape
    with np.errstate(divide="ignore"):
        logE = np.log(E)
        logG = np.log(tab.gamma)  # (P, S, S)
        log_delta = np.log(spec.state_space.initial())
    v = np.full((n, S), -np.inf)
    back = np.zeros((n, T, S), dtype=np.int64)
    for t in range(T):
        first = batch.entry == t
        cont = batch.entry < t
        if first.any():
            v[first] = log_delta + logE[first, t]
        if cont.any():
            cand = v[cont][:, :, None] + logG[batch.profile[cont, t - 1]]
            arg = _lowest_max(cand, axis=1)
            back[cont, t] = arg
            v[cont] = np.take_along_axis(cand, arg[:, None, :], 1)[:, 0] + logE[cont, t]
        on = batch.entry <= t
        dead = on & ~np.isfinite(v.max(1))
        if dead.any():
            i = int(np.argmax(dead))
            raise DecodingError(f"record {batch.ids[i]}: no state can produce the observation "
                                f"in year {spec.first_year + t}")
    states = np.full((n, T), -1, dtype=np.int64)
    states[:, T - 1] = _lowest_max(v, axis=1)
    score = v.max(1)
    for t in range(T - 1, 0, -1):
        cont = batch.entry < t
        states[cont, t - 1] = back[cont, t, states[cont, t]]
    return Decoding(batch, states, omega, score)


def viterbi_path(spec: ModelSpec, flat, record: Record, omega: Sequence[float] | None = None) -> DecodedTrajectory:
    """Most probable state sequence for one record."""
    batch = RecordBatch.from_records([record], spec)
    om = None if omega is None else np.asarray(omega, dtype=float).reshape(spec.G, 1)
    return viterbi_batch(batch, flat, om).trajectory(0)


def path_log_score(spec: ModelSpec, flat, record: Record, state_ids: Sequence[int],
                   omega: Sequence[float] | None = None) -> float:
    """log of delta * prod Gamma * prod mixture-weighted emission along a path of 1-based ids."""
    batch = RecordBatch.from_records([record], spec)
    flat = np.asarray(flat, dtype=float)
    om = posterior_group_weights(batch, flat) if omega is None else np.asarray(omega, dtype=float).reshape(spec.G, 1)
    E = mixture_emissions(batch, flat, om)[0]
    tab = profile_tables(spec, flat)
    t0 = int(batch.entry[0])
    path = [int(s) - 1 for s in state_ids]
    if len(path) != spec.n_years - t0:
        raise ValueError("path length must cover entry year to last year")
    with np.errstate(divide="ignore"):
        score = np.log(spec.state_space.initial()[path[0]]) + np.log(E[t0, path[0]])
        for k in range(1, len(path)):
            t = t0 + k
            score += np.log(tab.gamma[batch.profile[0, t - 1], path[k - 1], path[k]]) + np.log(E[t, path[k]])
    return float(score)


def decoded_population(decoding: Decoding, year: int, present_roles=DEFAULT_PRESENT_ROLES) -> float:
    from .population import population_size
    return population_size(decoding.states, decoding.batch.spec, year, present_roles=present_roles)


# ---------------------------------------------------------------------------
# observation-probability summaries


def marginal_register_probability(coeffs: EmissionCoefficients, group: int, x, k: int) -> float:
    """Probability that a present individual appears in register k."""
    K = coeffs.n_registers
    if not 0 <= k < K:
        raise DomainError(f"register index {k} outside 0..{K - 1}")
    p = np.exp(coeffs.log_probabilities(group, x))
    has = (np.arange(1 << K) >> k) & 1
    return float(p[has.astype(bool)].sum())


def no_observation_probability(coeffs: EmissionCoefficients, group: int, x) -> float:
    """Probability that a present individual appears in no register."""
    return float(np.exp(coeffs.log_probabilities(group, x))[0])


def conditional_register_probability(coeffs: EmissionCoefficients, group: int, scheme: CovariateScheme,
                                     k: int, dimension: str, category: str,
                                     profile_weights: Sequence[float] | None = None) -> float:
    """Register-k probability normalised within one covariate category.

    Sums pattern probabilities over the covariate profiles in the category,
    optionally weighted by profile frequencies, and divides by the summed
    probability of all patterns over the same profiles.
    """
    d = scheme.dimension(dimension)
    ci = d.index(category)
    di = [dd.name for dd in scheme.dimensions].index(dimension)
    P = scheme.n_profiles
    w = np.ones(P) if profile_weights is None else np.asarray(profile_weights, dtype=float)
    K = coeffs.n_registers
    has = ((np.arange(1 << K) >> k) & 1).astype(bool)
    X = scheme.design_matrix()
    num = den = 0.0
    for pid in range(P):
        if scheme.profile_cats(pid)[di] != ci or w[pid] <= 0:
            continue
        p = np.exp(coeffs.log_probabilities(group, X[pid]))
        num += w[pid] * p[has].sum()
        den += w[pid] * p.sum()
    if den <= 0:
        raise DomainError(f"no covariate profiles with {dimension}={category}")
    return float(num / den)


def mixture_marginal(pi, marginals) -> float:
    """sum_g pi_g m_g; with a scalar pi and two marginals, pi is the first group's share."""
    m = np.asarray(marginals, dtype=float)
    p = np.atleast_1d(np.asarray(pi, dtype=float))
    if p.size == 1 and m.size == 2:
        p = np.array([p[0], 1.0 - p[0]])
    if p.shape != m.shape:
        raise ValueError("need one mixing proportion per group marginal")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise DomainError("mixing proportions must be non-negative and sum to 1")
    return float(p @ m)


# ---------------------------------------------------------------------------
# reports


def uncertain_sightings(decoding: Decoding, present_roles=DEFAULT_PRESENT_ROLES) -> list[dict]:
    """Decoded present/absent shares for person-years seen only in a false-positive pattern.

    Rows are tabulated by covariate category (one block per dimension, using
    the category of the sighting year) and by the length of the run of
    consecutive such years the sighting belongs to.
    """
    b = decoding.batch
    spec = b.spec
    if not spec.fp_patterns:
        return []
    sighted = (b.codes >= 0) & (b.flag == FLAG_NONE) & np.isin(b.pattern, spec.fp_patterns)
    cls = role_classes(spec, present_roles)
    present = np.where(decoding.states >= 0, cls[np.maximum(decoding.states, 0)] == 0, False)
    run = np.zeros_like(b.codes)
    n, T = b.codes.shape
    for i, t in zip(*np.nonzero(sighted)):
        if t == 0 or not sighted[i, t - 1]:
            end = t
            while end + 1 < T and sighted[i, end + 1]:
                end += 1
            run[i, t:end + 1] = end - t + 1
    rows = []

    def add(group, label, mask):
        tot = int(mask.sum())
        if tot:
            pres = int((mask & present).sum())
            rows.append({"breakdown": group, "category": label, "person_years": tot,
                         "present_share": pres / tot, "absent_share": 1 - pres / tot})

    add("all", "all", sighted)
    cats = np.stack(np.unravel_index(b.profile, spec.scheme.shape), axis=-1)  # (n, T, D)
    for di, d in enumerate(spec.scheme.dimensions):
        for ci, c in enumerate(d.categories):
            add(d.name, c, sighted & (cats[..., di] == ci))
    for length in range(1, T + 1):
        label = str(length)
        add("run_length", label, sighted & (run == length))
    return rows


def assignment_stability(assignments: np.ndarray, threshold: float = 0.9) -> dict[str, float]:
    """Share of individuals assigned to their modal group in at least ``threshold`` of resamples.

    ``assignments`` is (R, n) with 0-based groups and -1 where an individual
    was not part of a resample.
    """
    A = np.asarray(assignments)
    counted = (A >= 0).sum(0)
    use = counted > 0
    if not use.any():
        return {"individuals": 0, "consistent_share": float("nan"), "inconsistent_share": float("nan")}
    G = int(A.max()) + 1
    counts = np.stack([(A == g).sum(0) for g in range(G)])
    agree = counts.max(0)[use] / counted[use]
    consistent = float(np.mean(agree >= threshold))
    return {"individuals": int(use.sum()), "consistent_share": consistent,
            "inconsistent_share": 1.0 - consistent}
