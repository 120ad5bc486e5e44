"""Bag of Little Bootstraps over weighted refits of small record subsets.

Each subset of b records is fitted once without weights. Every resample then
draws multiplicities for the subset from Multinomial(n; 1/b, ..., 1/b) and
refits the weighted likelihood, warm-started at the subset fit and
preconditioned by its covariance scaled by b/n. Derived quantities are
evaluated per resample, summarised per subset (mean, standard deviation,
2.5/97.5 percentiles) and averaged over subsets.

Resample results are appended to a JSON-lines log as they finish, so an
interrupted run resumes by skipping completed cells. Every random draw comes
from a ``SeedSequence`` keyed by (master seed, purpose, subset, resample), so
any cell can be reproduced on its own.
"""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .decoder import marginal_register_probability, mixture_marginal, viterbi_batch
from .engine import Objective
from .errors import BlbError, ConfigError, CRHMMError, DataError
from .estimator import FitOptions, FitResult, fit_mle, preconditioner, probability_summary
from .population import DEFAULT_PRESENT_ROLES, population_series, registered_series
from .records import RecordBatch
from .schema import SCHEMA_VERSION, check_version

log = logging.getLogger(__name__)

PARTITION = "partition"
WITHOUT_REPLACEMENT = "without_replacement"
MODES = (PARTITION, WITHOUT_REPLACEMENT)

# quantities evaluated on every resample
PARAMETERS = "parameters"
PROBABILITIES = "probabilities"
POPULATION = "population"
OVERCOVERAGE = "overcoverage"
MARGINALS = "marginals"
ASSIGNMENTS = "assignments"
DERIVED = (PARAMETERS, PROBABILITIES, POPULATION, OVERCOVERAGE, MARGINALS, ASSIGNMENTS)

MAX_FAILURE_SHARE = 0.2

# SeedSequence spawn keys per purpose
_KEY_SHUFFLE, _KEY_SUBSET, _KEY_RESAMPLE = 0, 1, 2


@dataclass(frozen=True)
class BlbPlan:
    """Subset layout and resample count.

    In partition mode ``b`` defaults to n // s and a full partition uses every
    record; a smaller ``b`` takes s disjoint blocks of exactly b records.
    Without replacement, ``b`` defaults to ceil(n ** gamma).
    """

    n: int
    s: int
    r: int
    b: int | None = None
    gamma: float | None = None
    mode: str = PARTITION
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown BLB mode {self.mode!r}; expected one of {MODES}")
        if self.n < 1 or self.s < 1 or self.r < 1:
            raise ConfigError("BLB needs n, s and r all >= 1")
        if self.gamma is not None and not 0.5 <= self.gamma <= 1.0:
            raise ConfigError(f"BLB gamma must lie in [0.5, 1], got {self.gamma}")
        b = self.b
        if b is None:
            if self.gamma is not None:
                b = math.ceil(self.n ** self.gamma)
            elif self.mode == PARTITION:
                b = self.n // self.s
            else:
                raise ConfigError("without-replacement mode needs b or gamma")
        if not 1 <= b <= self.n:
            raise ConfigError(f"BLB subset size b={b} must lie in 1..n={self.n}")
        if self.mode == PARTITION and self.s * b > self.n:
            raise ConfigError(f"partition mode needs s*b <= n (s={self.s}, b={b}, n={self.n})")
        object.__setattr__(self, "b", int(b))

    @property
    def full_partition(self) -> bool:
        return self.mode == PARTITION and self.b == self.n // self.s

    def to_dict(self) -> dict:
        return asdict(self)


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def make_subsets(plan: BlbPlan, n: int | None = None) -> list[np.ndarray]:
    """s sorted index arrays into 0..n-1."""
    n = plan.n if n is None else n
    if n != plan.n:
        raise ConfigError(f"BLB plan is for n={plan.n} records but the data has {n}")
    if plan.mode == PARTITION:
        perm = _rng(plan.seed, _KEY_SHUFFLE).permutation(n)
        if plan.full_partition:
            blocks = np.array_split(perm, plan.s)
        else:
            blocks = [perm[j * plan.b:(j + 1) * plan.b] for j in range(plan.s)]
    else:
        blocks = [_rng(plan.seed, _KEY_SUBSET, j).choice(n, plan.b, replace=False) for j in range(plan.s)]
    return [np.sort(blk) for blk in blocks]


def resample_weights(b: int, n: int, seed=None) -> np.ndarray:
    """Multiplicities of b records in a resample of size n."""
    if not 1 <= b <= n:
        raise ConfigError(f"resample needs 1 <= b <= n (b={b}, n={n})")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.multinomial(n, np.full(b, 1.0 / b))


def cell_weights(plan: BlbPlan, subset: int, resample: int, size: int | None = None) -> np.ndarray:
    """Resample weights for one (subset, resample) cell."""
    b = plan.b if size is None else size
    return resample_weights(b, plan.n, _rng(plan.seed, _KEY_RESAMPLE, subset, resample))


# ---------------------------------------------------------------------------
# derived quantities


def derived_quantities(batch: RecordBatch, flat, weights, requests: Sequence[str],
                       present_roles=DEFAULT_PRESENT_ROLES) -> dict[str, list]:
    """Evaluate the requested quantities for one weighted fit."""
    spec = batch.spec
    out: dict[str, list] = {}
    flat = np.asarray(flat, dtype=float)
    if PARAMETERS in requests:
        out[PARAMETERS] = [float(v) for v in flat]
    if PROBABILITIES in requests:
        out[PROBABILITIES] = [v["estimate"] for v in probability_summary(spec, flat).values()]
    if MARGINALS in requests:
        out[MARGINALS] = register_marginals(spec, flat)
    if {POPULATION, OVERCOVERAGE, ASSIGNMENTS} & set(requests):
        dec = viterbi_batch(batch, flat)
        pop = population_series(dec.states, spec, weights=weights, present_roles=present_roles).present
        if POPULATION in requests:
            out[POPULATION] = [float(v) for v in pop]
        if OVERCOVERAGE in requests:
            reg = registered_series(batch, weights)
            with np.errstate(divide="ignore", invalid="ignore"):
                oc = np.where(reg > 0, (1.0 - pop / reg) * 100.0, np.nan)
            out[OVERCOVERAGE] = [float(v) for v in oc]
        if ASSIGNMENTS in requests:
            out[ASSIGNMENTS] = [int(g) for g in dec.groups]
    return out


def register_marginals(spec, flat) -> list[float]:
    """Per-group and mixture register marginals at the baseline covariate profile."""
    coeffs = spec.emission_coefficients(flat)
    pi = spec.mixing_proportions(flat)
    x0 = np.zeros(spec.scheme.n_effects)
    out = []
    for k in range(spec.K):
        m = [marginal_register_probability(coeffs, g, x0, k) for g in range(spec.G)]
        out += m + [mixture_marginal(pi, m)]
    return [float(v) for v in out]


def derived_labels(spec, requests: Sequence[str]) -> dict[str, list[str]]:
    labels = {}
    years = [str(int(y)) for y in spec.years]
    if PARAMETERS in requests:
        labels[PARAMETERS] = list(spec.param_names)
    if PROBABILITIES in requests:
        labels[PROBABILITIES] = list(probability_summary(spec, np.zeros(spec.n_params)))
    if MARGINALS in requests:
        labels[MARGINALS] = [f"{reg}{tag}" for reg in spec.registers
                             for tag in [f"[g{g + 1}]" for g in range(spec.G)] + [""]]
    if POPULATION in requests:
        labels[POPULATION] = years
    if OVERCOVERAGE in requests:
        labels[OVERCOVERAGE] = years
    return labels


# ---------------------------------------------------------------------------
# results


@dataclass
class Interval:
    labels: list[str]
    estimate: np.ndarray
    se: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def to_dict(self) -> dict:
        def arr(a):
            return [None if not np.isfinite(v) else float(v) for v in a]
        return {"labels": list(self.labels), "estimate": arr(self.estimate), "se": arr(self.se),
                "lower": arr(self.lower), "upper": arr(self.upper)}

    @classmethod
    def from_dict(cls, doc: dict) -> "Interval":
        def arr(v):
            return np.array([np.nan if x is None else x for x in v], dtype=float)
        return cls(list(doc["labels"]), arr(doc["estimate"]), arr(doc["se"]), arr(doc["lower"]), arr(doc["upper"]))


def _mean(rows: Sequence[np.ndarray]) -> np.ndarray:
    """Element-wise correctly rounded mean, independent of row order."""
    stack = np.asarray(rows, dtype=float)
    return np.array([math.fsum(col) / len(col) for col in stack.T])


def _summaries(values: np.ndarray) -> tuple[np.ndarray, ...]:
    """Per-subset mean, SD, and 2.5/97.5 percentiles over resamples (rows)."""
    mean = _mean(values)
    sd = values.std(axis=0, ddof=1) if len(values) > 1 else np.zeros(values.shape[1])
    lo, hi = np.percentile(values, [2.5, 97.5], axis=0)
    return mean, sd, lo, hi


def aggregate(per_subset: Sequence[np.ndarray], labels: Sequence[str]) -> Interval:
    """Average per-subset summaries over subsets; each entry is an (r_ok, m) array."""
    parts = [_summaries(np.asarray(v, dtype=float)) for v in per_subset if len(v)]
    if not parts:
        raise BlbError("no successful resamples to aggregate")
    est, se, lo, hi = (_mean([p[k] for p in parts]) for k in range(4))
    return Interval(list(labels), est, se, lo, hi)


@dataclass
class BlbResult:
    plan: BlbPlan
    names: list[str]
    requests: list[str]
    cells: list[dict]                      # one entry per (subset, resample)
    subset_fits: dict[int, dict] = field(default_factory=dict)
    aggregated: dict[str, Interval] = field(default_factory=dict)

    def ok_cells(self, subset: int | None = None) -> list[dict]:
        return [c for c in self.cells if c["status"] == "ok" and (subset is None or c["subset"] == subset)]

    def failures(self) -> dict[int, int]:
        out = {j: 0 for j in range(self.plan.s)}
        for c in self.cells:
            if c["status"] != "ok":
                out[c["subset"]] += 1
        return out

    def values(self, quantity: str, subset: int) -> np.ndarray:
        cells = sorted(self.ok_cells(subset), key=lambda c: c["resample"])
        return np.array([c["derived"][quantity] for c in cells], dtype=float)

    def assignment_matrix(self, subsets: Sequence[np.ndarray]) -> np.ndarray:
        """(R, n) group per record and resample, -1 where the record is not in the subset."""
        cells = [c for c in self.ok_cells() if ASSIGNMENTS in c["derived"]]
        A = np.full((len(cells), self.plan.n), -1, dtype=np.int64)
        for row, c in enumerate(sorted(cells, key=lambda c: (c["subset"], c["resample"]))):
            A[row, subsets[c["subset"]]] = c["derived"][ASSIGNMENTS]
        return A

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "kind": "blb_result", "plan": self.plan.to_dict(),
                "names": list(self.names), "requests": list(self.requests),
                "n_ok": len(self.ok_cells()), "failures": {str(k): v for k, v in self.failures().items()},
                "aggregated": {k: v.to_dict() for k, v in self.aggregated.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def read_aggregate(path) -> tuple[BlbPlan, dict[str, Interval]]:
    """Load the aggregated intervals written by ``BlbResult.to_json``."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"BLB result file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"BLB result file {path} is not valid JSON: {exc}") from None
    check_version(doc, "BLB result", str(path))
    try:
        plan = BlbPlan(**doc["plan"])
        return plan, {k: Interval.from_dict(v) for k, v in doc["aggregated"].items()}
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed BLB result {path}: {exc}") from None


# ---------------------------------------------------------------------------
# log file


class BlbLog:
    """Append-only JSON-lines record of subset fits and resample cells."""

    def __init__(self, path, plan: BlbPlan, names: Sequence[str], requests: Sequence[str], resume: bool):
        self.path = Path(path)
        self.header = {"schema_version": SCHEMA_VERSION, "kind": "blb_log", "plan": plan.to_dict(),
                       "names": list(names), "requests": list(requests)}
        self.subset_fits: dict[int, dict] = {}
        self.cells: dict[tuple[int, int], dict] = {}
        if resume and self.path.exists():
            self._load()
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w") as fh:
                fh.write(json.dumps(self.header, sort_keys=True) + "\n")

    def _load(self):
        lines = self.path.read_text().splitlines(keepends=True)
        good = []
        for k, line in enumerate(lines):
            try:
                doc = json.loads(line)
                if not line.endswith("\n"):
                    raise ValueError("unterminated line")
            except ValueError:
                if k == len(lines) - 1:  # torn final write from an interrupted run
                    log.warning("dropping incomplete final line of %s", self.path)
                    break
                raise DataError(f"{self.path}:{k + 1}: corrupt BLB log line") from None
            if k == 0:
                check_version(doc, "BLB log", str(self.path))
                for key in ("plan", "names", "requests"):
                    if doc.get(key) != self.header[key]:
                        raise ConfigError(f"cannot resume {self.path}: its {key} differs from this run")
            elif doc.get("kind") == "subset_fit":
                self.subset_fits[doc["subset"]] = doc
            elif doc.get("kind") == "resample":
                self.cells[(doc["subset"], doc["resample"])] = doc
            good.append(line)
        if len(good) != len(lines):
            self.path.write_text("".join(good))

    def append(self, doc: dict):
        with open(self.path, "a") as fh:
            fh.write(json.dumps(doc, sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())


# ---------------------------------------------------------------------------
# driver


@dataclass(frozen=True)
class BlbOptions:
    fit: FitOptions = field(default_factory=FitOptions)
    requests: tuple[str, ...] = (PARAMETERS, PROBABILITIES, MARGINALS, POPULATION, OVERCOVERAGE)
    warm_start: bool = True
    workers: int = 1
    present_roles: frozenset = DEFAULT_PRESENT_ROLES

    def __post_init__(self):
        bad = [q for q in self.requests if q not in DERIVED]
        if bad:
            raise ConfigError(f"unknown BLB derived quantities {bad}; expected some of {DERIVED}")
        if self.workers < 1:
            raise ConfigError("BLB workers must be >= 1")


def _fit_cell(sub: RecordBatch, w: np.ndarray, init, L, options: BlbOptions) -> tuple[FitResult, dict]:
    fopts = replace(options.fit, standard_errors=False, n_starts=1 if options.warm_start else options.fit.n_starts)
    obj = Objective(sub, w, workers=1 if options.workers > 1 else None)
    fit = fit_mle(sub, w, init=init, options=fopts, objective=obj, precondition=L)
    return fit, derived_quantities(sub, fit.estimate, w, options.requests, options.present_roles)


def run_blb(plan: BlbPlan, batch: RecordBatch, options: BlbOptions | None = None, log_path=None,
            resume: bool = False, weights_fn: Callable[[int, int, int], np.ndarray] | None = None) -> BlbResult:
    """Fit every (subset, resample) cell and aggregate the derived quantities.

    ``weights_fn(subset, resample, size)`` overrides the multinomial weights,
    which is how a degenerate all-ones plan reproduces the subset MLE.
    """
    options = options or BlbOptions()
    spec = batch.spec
    requests = list(options.requests)
    subsets = make_subsets(plan, len(batch))
    names = list(spec.param_names)
    book = BlbLog(log_path, plan, names, requests, resume) if log_path is not None else None
    done_fits = book.subset_fits if book else {}
    done_cells = book.cells if book else {}
    cells: list[dict] = []
    fits: dict[int, dict] = {}
    limit = math.floor(MAX_FAILURE_SHARE * plan.r)

    for j, idx in enumerate(subsets):
        sub = batch.subset(idx)
        if j in done_fits:
            fdoc = done_fits[j]
        else:
            base = fit_mle(sub, options=options.fit)
            if not base.converged:
                log.warning("subset %d fit did not converge: %s", j, base.message)
            fdoc = {"kind": "subset_fit", "subset": j, "estimate": [float(v) for v in base.estimate],
                    "loglik": base.loglik, "converged": base.converged,
                    "covariance": None if base.covariance is None or not np.all(np.isfinite(base.covariance))
                    else [[float(v) for v in row] for row in base.covariance]}
            if book:
                book.append(fdoc)
        fits[j] = fdoc
        x_sub = np.asarray(fdoc["estimate"], dtype=float)
        L = None
        if options.warm_start and fdoc["covariance"] is not None:
            L = preconditioner(np.asarray(fdoc["covariance"], dtype=float), len(idx) / plan.n)
        init = x_sub if options.warm_start else None

        todo = [k for k in range(plan.r) if (j, k) not in done_cells]
        failed = sum(1 for k in range(plan.r) if (j, k) in done_cells and done_cells[(j, k)]["status"] != "ok")

        def job(k):
            w = weights_fn(j, k, len(idx)) if weights_fn else cell_weights(plan, j, k, len(idx))
            try:
                fit, derived = _fit_cell(sub, w, init, L, options)
            except (CRHMMError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
                return {"kind": "resample", "subset": j, "resample": k, "status": "failed", "error": str(exc)}
            doc = {"kind": "resample", "subset": j, "resample": k, "loglik": fit.loglik,
                   "converged": fit.converged, "iterations": fit.iterations, "derived": derived}
            ok = fit.converged and math.isfinite(fit.loglik)
            doc["status"] = "ok" if ok else "failed"
            if not ok:
                doc["error"] = f"fit did not converge: {fit.message}"
            return doc

        def consume(doc):
            nonlocal failed
            done_cells[(j, doc["resample"])] = doc
            if book:
                book.append(doc)
            if doc["status"] != "ok":
                failed += 1
                log.warning("subset %d resample %d failed: %s", j, doc["resample"], doc.get("error"))
                if failed > limit:
                    raise BlbError(f"subset {j}: {failed} of {plan.r} resample fits failed "
                                   f"(limit {MAX_FAILURE_SHARE:.0%}); last error: {doc.get('error')}")

        if failed > limit:
            raise BlbError(f"subset {j}: {failed} of {plan.r} resample fits failed (limit {MAX_FAILURE_SHARE:.0%})")
        if options.workers > 1 and len(todo) > 1:
            with ThreadPoolExecutor(options.workers) as pool:
                for doc in pool.map(job, todo):
                    consume(doc)
        else:
            for k in todo:
                consume(job(k))
        cells.extend(done_cells[(j, k)] for k in range(plan.r))

    result = BlbResult(plan, names, requests, cells, fits)
    result.aggregated = aggregate_cells(result, spec)
    return result


def aggregate_cells(result: BlbResult, spec) -> dict[str, Interval]:
    labels = derived_labels(spec, result.requests)
    return {q: aggregate([result.values(q, j) for j in range(result.plan.s)], lab)
            for q, lab in labels.items()}


def load_log(path, spec) -> BlbResult:
    """Rebuild a BlbResult, including its aggregate, from a per-resample log."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"BLB log {path} not found")
    lines = path.read_text().splitlines()
    if not lines:
        raise DataError(f"BLB log {path} is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError:
        raise DataError(f"{path}:1: BLB log header is not valid JSON") from None
    check_version(header, "BLB log", str(path))
    plan = BlbPlan(**header["plan"])
    book = BlbLog(path, plan, header["names"], header["requests"], resume=True)
    cells = [book.cells[key] for key in sorted(book.cells)]
    result = BlbResult(plan, list(header["names"]), list(header["requests"]), cells, book.subset_fits)
    if tuple(result.names) != spec.param_names:
        raise ConfigError(f"BLB log {path} was written for a different model")
    result.aggregated = aggregate_cells(result, spec)
    return result
