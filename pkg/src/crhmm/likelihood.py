"""Forward-algorithm likelihood, one record at a time.

This is the reference path: plain numpy, explicit loops over years, emission
vectors assembled state by state from their roles. Fitting uses the batched
engine in :mod:`crhmm.engine`; the two are checked against each other and
against brute-force path enumeration in the tests.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np
from scipy.special import expit, logsumexp

from .emission import (ObservationCategory, fp_channel_probability, state_emission)
from .errors import NumericError
from .model import ModelSpec, log_mixing
from .records import Record
from .statespace import DEREGISTRATION, EMIGRATION, EVENTS, REIMMIGRATION, SURVIVAL

log = logging.getLogger(__name__)

WORKERS_ENV = "CRHMM_WORKERS"


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


class RecordModel:
    """Parameter-dependent pieces for single-record evaluation, memoised per profile."""

    def __init__(self, spec: ModelSpec, params):
        self.spec = spec
        self.params = np.asarray(params, dtype=float)
        p = spec.unpack(self.params)
        self.life = p.life
        self.emis = spec.emission_coefficients(self.params)
        self.fp = spec.fp_coefficients(self.params)
        self.log_pi = log_mixing(p.mix)
        self._gamma: dict[int, np.ndarray] = {}
        self._soft: dict[tuple[int, int], np.ndarray] = {}

    def x(self, pid: int) -> np.ndarray:
        return self.spec.design[pid]

    def life_probabilities(self, pid: int) -> dict[str, float]:
        eta = self.life[:, 0] + self.life[:, 1:] @ self.x(pid)
        return dict(zip(EVENTS, expit(eta)))

    def transition(self, pid: int) -> np.ndarray:
        if pid not in self._gamma:
            eta = self.life[:, 0] + self.life[:, 1:] @ self.x(pid)
            idx = [EVENTS.index(e) for e in (SURVIVAL, EMIGRATION, REIMMIGRATION, DEREGISTRATION)]
            self._gamma[pid] = self.spec.state_space.transition(
                *expit(eta[idx]), complements=expit(-eta[idx]))
        return self._gamma[pid]

    def pattern_probabilities(self, group: int, pid: int) -> np.ndarray:
        key = (group, pid)
        if key not in self._soft:
            self._soft[key] = np.exp(self.emis.log_probabilities(group, self.x(pid)))
        return self._soft[key]

    def emission(self, group: int, pid: int, category: ObservationCategory) -> np.ndarray:
        """Pr(category | state) for every state."""
        spec = self.spec
        soft = self.pattern_probabilities(group, pid)[category.pattern]
        fpc = fp_channel_probability(self.fp, self.x(pid), category)
        return np.array([
            state_emission(role, category, soft, fpc, spec.recording,
                           spec.state_space.dead_false_positive)
            for role in spec.state_space.roles
        ])


def emission_vector(spec: ModelSpec, params, group: int, covariates: dict[str, str],
                    category: ObservationCategory) -> np.ndarray:
    """Pr(observed category | state) for all S states under mixture group ``group``."""
    pid = spec.scheme.profile_id(spec.scheme.resolve(covariates))
    return RecordModel(spec, params).emission(group, pid, category)


def _record_inputs(spec: ModelSpec, record: Record):
    years = list(record.years)
    pids = spec.scheme.year_profiles(record.covariates, record.entry_year, years)
    cats = [ObservationCategory.decode(c, spec.K) for c in record.codes]
    return pids, cats


def forward_loglik_individual(spec: ModelSpec, params, record: Record, group: int,
                              model: RecordModel | None = None) -> float:
    """log L_i for one mixture group, with per-step renormalisation."""
    model = model or RecordModel(spec, params)
    pids, cats = _record_inputs(spec, record)
    alpha = spec.state_space.initial() * model.emission(group, pids[0], cats[0])
    ll = 0.0
    for t in range(len(cats)):
        if t:
            alpha = (alpha @ model.transition(pids[t - 1])) * model.emission(group, pids[t], cats[t])
        c = alpha.sum()
        if not c > 0:
            log.warning("record %s: observation in year %d impossible under every state",
                        record.id, record.entry_year + t)
            return -math.inf
        ll += math.log(c)
        alpha = alpha / c
    return ll


def forward_likelihood_unscaled(spec: ModelSpec, params, record: Record, group: int) -> float:
    """Plain linear-space product of the forward recursion (small T only)."""
    model = RecordModel(spec, params)
    pids, cats = _record_inputs(spec, record)
    alpha = spec.state_space.initial() * model.emission(group, pids[0], cats[0])
    for t in range(1, len(cats)):
        alpha = (alpha @ model.transition(pids[t - 1])) * model.emission(group, pids[t], cats[t])
    return float(alpha.sum())


def group_logliks(spec: ModelSpec, params, record: Record, model: RecordModel | None = None) -> np.ndarray:
    model = model or RecordModel(spec, params)
    return np.array([forward_loglik_individual(spec, params, record, g, model)
                     for g in range(spec.G)])


def mixture_loglik_individual(spec: ModelSpec, params, record: Record,
                              model: RecordModel | None = None) -> float:
    """log sum_g pi_g L_i^(g)."""
    model = model or RecordModel(spec, params)
    lg = group_logliks(spec, params, record, model)
    if np.all(np.isneginf(lg)):
        return -math.inf
    return float(logsumexp(model.log_pi + lg))


def posterior_mixture_weights(spec: ModelSpec, params, record: Record,
                              model: RecordModel | None = None) -> np.ndarray:
    """omega_ig = pi_g L_i^(g) / sum_h pi_h L_i^(h)."""
    model = model or RecordModel(spec, params)
    lg = model.log_pi + group_logliks(spec, params, record, model)
    if np.all(np.isneginf(lg)):
        raise NumericError(f"record {record.id}: zero likelihood under every mixture group")
    return np.exp(lg - logsumexp(lg))


def record_logliks(spec: ModelSpec, params, records: Sequence[Record], workers: int | None = None) -> np.ndarray:
    """Mixture log-likelihood per record, computed in chunks across a thread pool."""
    workers = workers or default_workers()
    params = np.asarray(params, dtype=float)

    def run(chunk):
        model = RecordModel(spec, params)
        return [mixture_loglik_individual(spec, params, r, model) for r in chunk]

    if workers <= 1 or len(records) < 2 * workers:
        return np.array(run(records), dtype=float)
    chunks = [records[i::workers] for i in range(workers)]
    with ThreadPoolExecutor(workers) as pool:
        parts = list(pool.map(run, chunks))
    out = np.empty(len(records))
    for i, part in enumerate(parts):
        out[i::workers] = part
    return out


def weighted_sum(values: np.ndarray, weights: np.ndarray | None = None) -> float:
    """Exactly rounded sum of w_i * v_i; records with zero weight are skipped."""
    values = np.asarray(values, dtype=float)
    if weights is None:
        weights = np.ones_like(values)
    weights = np.asarray(weights, dtype=float)
    if weights.shape != values.shape:
        raise ValueError("weights must cover exactly the records")
    if np.any(weights < 0):
        raise ValueError("weights must be non-negative")
    use = weights > 0
    if np.any(np.isneginf(values[use])):
        return -math.inf
    return math.fsum(weights[use] * values[use])


def total_loglik(spec: ModelSpec, params, records: Sequence[Record], weights=None,
                 workers: int | None = None) -> float:
    """sum_i w_i log L_i; w_i = 1 when no weights are given."""
    return weighted_sum(record_logliks(spec, params, records, workers), weights)
