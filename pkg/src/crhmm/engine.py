"""Batched forward algorithm with analytic gradients.

The inner loops run in a compiled kernel over records: a scaled forward
pass per mixture group, then (for the gradient) a scaled backward pass
whose products give the derivative of each record's log-likelihood with
respect to its emission probabilities and transition entries. Those are
accumulated into per-profile tables and carried to the flat parameter
vector by the chain rule in :func:`table_gradient`.

Records are split into contiguous chunks, one per worker thread; partial
sums are combined in chunk order, so results depend only on the worker
count. Per-record log-likelihoods are summed with ``math.fsum``.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from typing import NamedTuple

import numba
import numpy as np
from scipy.special import logsumexp

from .model import TRANSITION_ORDER, ModelSpec, profile_tables
from .records import RecordBatch


@numba.njit(nogil=True, cache=True)
def _kernel(lo, hi, entry, prof, pat, fpcol, a, b, c, rows, cols, gam, soft, fpt, logpi, present,
            w, want_grad, out_ll, dgam, dsoft, dfpt, dlogpi):
    G = soft.shape[0]
    T = prof.shape[1]
    S = b.shape[0]
    nnz = rows.shape[0]
    alpha = np.zeros((G, T, S))
    pred = np.zeros((G, T, S))
    E = np.zeros((G, T, S))
    cst = np.ones((G, T))
    beta = np.zeros(S)
    nbeta = np.zeros(S)
    u = np.zeros(S)
    omega = np.zeros(G)
    for i in range(lo, hi):
        t0 = entry[i]
        for g in range(G):
            ll = 0.0
            for t in range(t0, T):
                p = prof[i, t]
                q = pat[i, t]
                col = fpcol[i, t]
                sg = soft[g, p, q]
                fq = fpt[p, col] if col >= 0 else 0.0
                for s in range(S):
                    E[g, t, s] = a[i, t, s] * sg + b[s] * fq + c[i, t, s]
                    pred[g, t, s] = 0.0
                if t == t0:
                    pred[g, t, present] = 1.0
                else:
                    pp = prof[i, t - 1]
                    for j in range(nnz):
                        pred[g, t, cols[j]] += alpha[g, t - 1, rows[j]] * gam[pp, j]
                ct = 0.0
                for s in range(S):
                    ct += pred[g, t, s] * E[g, t, s]
                if not ct > 0.0:
                    ll = -np.inf
                    break
                cst[g, t] = ct
                for s in range(S):
                    alpha[g, t, s] = pred[g, t, s] * E[g, t, s] / ct
                ll += np.log(ct)
            out_ll[g, i] = ll
        if not want_grad or w[i] <= 0.0:
            continue
        top = -np.inf
        for g in range(G):
            v = logpi[g] + out_ll[g, i]
            if v > top:
                top = v
        if top == -np.inf:
            continue
        tot = 0.0
        for g in range(G):
            omega[g] = np.exp(logpi[g] + out_ll[g, i] - top)
            tot += omega[g]
        for g in range(G):
            omega[g] /= tot
            dlogpi[g] += w[i] * omega[g]
        for g in range(G):
            scale = w[i] * omega[g]
            if scale == 0.0:
                continue
            for s in range(S):
                beta[s] = 1.0
            for t in range(T - 1, t0 - 1, -1):
                p = prof[i, t]
                q = pat[i, t]
                col = fpcol[i, t]
                ct = cst[g, t]
                ds = 0.0
                df = 0.0
                for s in range(S):
                    dE = scale * pred[g, t, s] * beta[s] / ct
                    ds += dE * a[i, t, s]
                    df += dE * b[s]
                dsoft[g, p, q] += ds
                if col >= 0:
                    dfpt[p, col] += df
                if t > t0:
                    pp = prof[i, t - 1]
                    for s in range(S):
                        u[s] = E[g, t, s] * beta[s] / ct
                        nbeta[s] = 0.0
                    for j in range(nnz):
                        dgam[pp, j] += scale * alpha[g, t - 1, rows[j]] * u[cols[j]]
                        nbeta[rows[j]] += gam[pp, j] * u[cols[j]]
                    for s in range(S):
                        beta[s] = nbeta[s]


class Tables(NamedTuple):
    """Per-profile quantities the kernel needs, plus what the chain rule reuses."""
    prob: np.ndarray      # (4, P) event probabilities, EVENTS order
    comp: np.ndarray      # (4, P) complements
    gam: np.ndarray       # (P, nnz) permitted transition entries
    soft: np.ndarray      # (G, P, J) pattern probabilities
    fpt: np.ndarray       # (P, M + 1) absent-state channel
    log_pi: np.ndarray    # (G,)


def tables(spec: ModelSpec, flat) -> Tables:
    t = profile_tables(spec, flat)
    rows, cols = np.nonzero(spec.state_space.permitted)
    return Tables(t.life, t.comp, np.ascontiguousarray(t.gamma[:, rows, cols]), np.exp(t.log_soft), t.fp, t.log_pi)


def table_gradient(spec: ModelSpec, flat, tab: Tables, dgam, dsoft, dfpt, dlogpi) -> np.ndarray:
    """Carry derivatives with respect to the per-profile tables back to the flat vector."""
    p = spec.unpack(flat)
    X = spec.design
    L = spec.layout
    rows, cols = np.nonzero(spec.state_space.permitted)
    ext = np.zeros(spec.n_params + 1)

    # transitions: every entry is multilinear in the probabilities and their
    # complements, so each partial derivative is the exact difference between
    # the matrices with that argument set to 1 and to 0
    args = np.stack([tab.prob[j] for j in TRANSITION_ORDER] + [tab.comp[j] for j in TRANSITION_ORDER])
    hi = np.repeat(args[None], 8, axis=0)
    lo = hi.copy()
    hi[np.arange(8), np.arange(8)] = 1.0
    lo[np.arange(8), np.arange(8)] = 0.0
    partial = (spec.state_space.transition(*hi[:, :4].transpose(1, 0, 2), complements=hi[:, 4:].transpose(1, 0, 2))
               - spec.state_space.transition(*lo[:, :4].transpose(1, 0, 2), complements=lo[:, 4:].transpose(1, 0, 2)))
    slopes = (partial[:, :, rows, cols] * dgam[None]).sum(-1)  # (8, P)
    dlife = np.zeros_like(np.asarray(p.life))
    for v, j in enumerate(TRANSITION_ORDER):
        deta = (slopes[v] - slopes[v + 4]) * tab.prob[j] * tab.comp[j]
        dlife[j, 0] = deta.sum()
        dlife[j, 1:] = deta @ X
    np.add.at(ext, L.life, dlife)

    # emission softmax
    dlogit = tab.soft * (dsoft - (tab.soft * dsoft).sum(-1, keepdims=True))  # (G, P, J)
    per_reg = dlogit @ spec.bits.astype(float)  # (G, P, K)
    np.add.at(ext, L.main, per_reg.sum(1))
    np.add.at(ext, L.regcov, np.einsum("gpk,pc->gkc", per_reg, X))
    if spec.pair_bits.shape[1]:
        np.add.at(ext, L.pair, dlogit.sum((0, 1)) @ spec.pair_bits)

    # absent-state channel
    if spec.M:
        dfe = tab.fpt * (dfpt - (tab.fpt * dfpt).sum(-1, keepdims=True))  # (P, M + 1)
        deta = dfe[:, 1:]
        dfp = np.concatenate([deta.sum(0)[:, None], deta.T @ X], axis=1)
        np.add.at(ext, L.fp, dfp)

    # mixing proportions
    if spec.G > 1:
        pi = np.exp(tab.log_pi)
        dmix = dlogpi - pi * dlogpi.sum()
        np.add.at(ext, L.mix, dmix[:-1])
    return ext[:-1]


class BatchArrays(NamedTuple):
    entry: np.ndarray
    prof: np.ndarray
    pat: np.ndarray
    fpcol: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray


def batch_arrays(batch: RecordBatch) -> BatchArrays:
    a, b, c, fp_col = batch.emission_design()
    return BatchArrays(np.ascontiguousarray(batch.entry, dtype=np.int64),
                       np.ascontiguousarray(batch.profile, dtype=np.int64),
                       np.ascontiguousarray(batch.pattern, dtype=np.int64),
                       np.ascontiguousarray(fp_col, dtype=np.int64),
                       np.ascontiguousarray(a), np.ascontiguousarray(b), np.ascontiguousarray(c))


def _chunks(n: int, workers: int) -> list[tuple[int, int]]:
    edges = np.linspace(0, n, max(1, min(workers, n)) + 1).astype(int)
    return [(int(edges[k]), int(edges[k + 1])) for k in range(len(edges) - 1)]


class Objective:
    """Weighted total log-likelihood of a batch and its gradient.

    Weights default to one per record. ``workers`` threads share the
    records in contiguous chunks.
    """

    def __init__(self, batch: RecordBatch, weights=None, workers: int | None = None):
        from .likelihood import default_workers
        self.batch = batch
        self.spec = batch.spec
        self.arrays = batch_arrays(batch)
        n = len(batch)
        w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
        if w.shape != (n,):
            raise ValueError("weights must cover exactly the records of the batch")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")
        self.weights = w
        self.workers = workers or default_workers()
        rows, cols = np.nonzero(self.spec.state_space.permitted)
        self._rows, self._cols = rows.astype(np.int64), cols.astype(np.int64)
        self.n_evals = 0

    def with_weights(self, weights) -> "Objective":
        other = object.__new__(Objective)
        other.__dict__.update(self.__dict__)
        w = np.asarray(weights, dtype=float)
        if w.shape != self.weights.shape or np.any(w < 0):
            raise ValueError("weights must be non-negative and cover the batch")
        other.weights, other.n_evals = w, 0
        return other

    def _run(self, flat, want_grad: bool):
        spec = self.spec
        flat = np.asarray(flat, dtype=float)
        tab = tables(spec, flat)
        n = len(self.batch)
        A = self.arrays
        out_ll = np.empty((spec.G, n))

        def job(span):
            lo, hi = span
            dgam = np.zeros_like(tab.gam)
            dsoft = np.zeros_like(tab.soft)
            dfpt = np.zeros_like(tab.fpt)
            dlogpi = np.zeros(spec.G)
            _kernel(lo, hi, A.entry, A.prof, A.pat, A.fpcol, A.a, A.b, A.c, self._rows, self._cols,
                    tab.gam, tab.soft, tab.fpt, tab.log_pi, spec.state_space.present_index,
                    self.weights, want_grad, out_ll, dgam, dsoft, dfpt, dlogpi)
            return dgam, dsoft, dfpt, dlogpi

        spans = _chunks(n, self.workers)
        if len(spans) == 1:
            parts = [job(spans[0])]
        else:
            with ThreadPoolExecutor(len(spans)) as pool:
                parts = list(pool.map(job, spans))
        return tab, out_ll, parts

    def _total(self, tab, out_ll) -> float:
        with np.errstate(divide="ignore", invalid="ignore"):
            per = logsumexp(tab.log_pi[:, None] + out_ll, axis=0)
        use = self.weights > 0
        if np.any(np.isneginf(per[use])) or np.any(np.isnan(per[use])):
            return -math.inf
        return math.fsum(self.weights[use] * per[use])

    def loglik(self, flat) -> float:
        self.n_evals += 1
        tab, out_ll, _ = self._run(flat, False)
        return self._total(tab, out_ll)

    def loglik_and_grad(self, flat) -> tuple[float, np.ndarray]:
        self.n_evals += 1
        tab, out_ll, parts = self._run(flat, True)
        total = self._total(tab, out_ll)
        if not math.isfinite(total):
            return total, np.zeros(self.spec.n_params)
        sums = [parts[0][k].copy() for k in range(4)]
        for part in parts[1:]:
            for k in range(4):
                sums[k] += part[k]
        return total, table_gradient(self.spec, flat, tab, *sums)

    def gradient(self, flat) -> np.ndarray:
        return self.loglik_and_grad(flat)[1]

    def group_logliks(self, flat) -> np.ndarray:
        """(G, n) per-group log-likelihoods."""
        _, out_ll, _ = self._run(flat, False)
        return out_ll

    def record_logliks(self, flat) -> np.ndarray:
        tab, out_ll, _ = self._run(flat, False)
        with np.errstate(divide="ignore"):
            return logsumexp(tab.log_pi[:, None] + out_ll, axis=0)


def batch_total_loglik(batch: RecordBatch, flat, weights=None, workers: int | None = None) -> float:
    return Objective(batch, weights, workers).loglik(flat)
