"""Maximum likelihood fitting with curvature-based standard errors.

The optimiser is scipy's L-BFGS-B on the negative total log-likelihood,
with exact gradients from the compiled forward-backward engine. Standard errors come from the
inverse of a central-difference Hessian, and constrained quantities
(event probabilities at the baseline profile, mixing proportions) get
delta-method standard errors on the probability scale.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logit

from .emission import FLAG_DEATH, FLAG_EMIGRATION, FLAG_REIMMIGRATION
from .engine import Objective
from .errors import ConfigError, DataError, NumericError
from .model import ModelSpec, log_mixing
from .records import RecordBatch
from .schema import SCHEMA_VERSION, check_version
from .statespace import DEREGISTRATION, EMIGRATION, EVENTS, REIMMIGRATION, SURVIVAL

log = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# finite differences


def numerical_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient with relative steps h * max(1, |x_i|)."""
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        step = h * max(1.0, abs(x[i]))
        up, dn = x.copy(), x.copy()
        up[i] += step
        dn[i] -= step
        fu, fd = f(up), f(dn)
        if not (math.isfinite(fu) and math.isfinite(fd)):
            raise NumericError(f"objective is not finite near coordinate {i}")
        g[i] = (fu - fd) / (2 * step)
    return g


def numerical_hessian(f: Callable, x, h: float = 1e-4, grad: Callable | None = None) -> np.ndarray:
    """Symmetrised central-difference Hessian.

    With ``grad`` the Hessian is built from differences of the gradient
    (2p gradient calls); otherwise from second differences of ``f``.
    """
    x = np.asarray(x, dtype=float)
    p = x.size
    steps = h * np.maximum(1.0, np.abs(x))
    H = np.empty((p, p))
    if grad is not None:
        for i in range(p):
            up, dn = x.copy(), x.copy()
            up[i] += steps[i]
            dn[i] -= steps[i]
            H[i] = (np.asarray(grad(up)) - np.asarray(grad(dn))) / (2 * steps[i])
    else:
        f0 = f(x)

        def at(i, si, j, sj):
            z = x.copy()
            z[i] += si * steps[i]
            z[j] += sj * steps[j]
            return f(z)

        for i in range(p):
            H[i, i] = (at(i, 1, i, 0) - 2 * f0 + at(i, -1, i, 0)) / steps[i] ** 2
            for j in range(i + 1, p):
                H[i, j] = H[j, i] = (at(i, 1, j, 1) - at(i, 1, j, -1) - at(i, -1, j, 1)
                                     + at(i, -1, j, -1)) / (4 * steps[i] * steps[j])
    if not np.all(np.isfinite(H)):
        bad = int(np.argwhere(~np.isfinite(H))[0, 0])
        raise NumericError(f"Hessian is not finite along coordinate {bad}")
    return 0.5 * (H + H.T)


@dataclass
class StandardErrors:
    se: np.ndarray           # nan where unavailable
    available: np.ndarray    # bool per parameter
    covariance: np.ndarray   # generalised inverse of the negative Hessian
    min_eigenvalue: float


def standard_errors_from_hessian(H: np.ndarray, rel_tol: float = 1e-10) -> StandardErrors:
    """SEs from the Hessian of a log-likelihood at a maximum.

    Directions with non-positive curvature are dropped from the inverse;
    parameters loading on them are flagged unavailable.
    """
    info = -np.asarray(H, dtype=float)
    vals, vecs = np.linalg.eigh(info)
    scale = max(np.abs(vals).max(), 1e-300)
    good = vals > rel_tol * scale
    cov = (vecs[:, good] / vals[good]) @ vecs[:, good].T
    load = (vecs[:, ~good] ** 2).sum(1)
    available = load < 1e-8
    se = np.where(available, np.sqrt(np.clip(np.diag(cov), 0, None)), np.nan)
    return StandardErrors(se, available, cov, float(vals.min()))


def hessian_standard_errors(f: Callable, x_hat, h: float = 1e-4, grad: Callable | None = None) -> StandardErrors:
    """sqrt(diag((-H)^-1)) at a local maximum of the log-likelihood ``f``."""
    return standard_errors_from_hessian(numerical_hessian(f, x_hat, h, grad))


def delta_method_se(transform: Callable[[np.ndarray], np.ndarray], x, cov, h: float = 1e-6) -> np.ndarray:
    """SEs of transform(x) given the covariance of x."""
    x = np.asarray(x, dtype=float)
    y0 = np.atleast_1d(np.asarray(transform(x), dtype=float))
    jac = np.empty((y0.size, x.size))
    for i in range(x.size):
        step = h * max(1.0, abs(x[i]))
        up, dn = x.copy(), x.copy()
        up[i] += step
        dn[i] -= step
        jac[:, i] = (np.atleast_1d(transform(up)) - np.atleast_1d(transform(dn))) / (2 * step)
    return np.sqrt(np.clip(np.einsum("ij,jk,ik->i", jac, cov, jac), 0, None))


# ---------------------------------------------------------------------------
# initialisation and label order


def crude_rates(batch: RecordBatch, weights=None) -> dict[str, float]:
    """Yearly event rates from recorded events, clipped away from 0 and 1."""
    w = np.ones(len(batch)) if weights is None else np.asarray(weights, dtype=float)
    f, obs = batch.flag, batch.codes >= 0
    T = batch.spec.n_years
    exposure = float(np.sum(w * np.maximum(T - 1 - batch.entry, 0)))
    count = {k: float(np.sum(w[:, None] * ((f == flag) & obs)))
             for k, flag in (("death", FLAG_DEATH), ("emig", FLAG_EMIGRATION), ("reimm", FLAG_REIMMIGRATION))}
    if exposure <= 0 or count["death"] + count["emig"] == 0:
        return {SURVIVAL: 0.98, EMIGRATION: 0.05, REIMMIGRATION: 0.2, DEREGISTRATION: 0.5}
    lam = 0.5
    return {
        SURVIVAL: float(np.clip(1 - count["death"] / exposure, 0.5, 0.999)),
        EMIGRATION: float(np.clip(count["emig"] / exposure / lam, 0.005, 0.5)),
        REIMMIGRATION: float(np.clip(count["reimm"] / max(count["emig"], 1.0), 0.01, 0.9)),
        DEREGISTRATION: lam,
    }


def default_init(batch: RecordBatch, weights=None, spread: float = 0.5) -> np.ndarray:
    """Starting values from crude rates and register frequencies.

    Life-event intercepts sit at the logit of crude recorded-event rates,
    register main effects at the logit of each register's observed share
    among unflagged person-years, and mixing proportions are uniform. The
    group-specific main effects are pushed apart by ``spread`` so the
    optimiser does not start on the symmetric saddle.
    """
    spec = batch.spec
    w = np.ones(len(batch)) if weights is None else np.asarray(weights, dtype=float)
    p = spec.unpack(np.zeros(spec.n_params))
    life = np.array(p.life)
    rates = crude_rates(batch, w)
    for event in spec.state_space.events:
        life[EVENTS.index(event), 0] = logit(rates[event])
    unflagged = (batch.codes >= 0) & (batch.flag == 0)
    tot = float(np.sum(w[:, None] * unflagged))
    main = np.zeros((spec.G, spec.K))
    for k in range(spec.K):
        seen = float(np.sum(w[:, None] * (unflagged & ((batch.pattern >> k) & 1).astype(bool))))
        share = np.clip(seen / tot, 0.02, 0.98) if tot > 0 else 0.5
        main[:, k] = logit(share)
    if spec.G > 1:
        offsets = spread * (1 - 2 * np.arange(spec.G) / (spec.G - 1))
        for k, reg in enumerate(spec.registers):
            if reg in spec.group_specific:
                main[:, k] += offsets
    fp = np.array(p.fp)
    fp[:, 0] = -2.0
    return spec.pack(p._replace(life=life, main=main, fp=fp))


def group_order_key(spec: ModelSpec, flat) -> np.ndarray:
    """Per group: baseline observation probability of the first group-specific register."""
    if spec.G == 1:
        return np.zeros(1)
    if not spec.group_specific:
        return np.exp(log_mixing(spec.unpack(flat).mix))
    k = spec.register_index(spec.group_specific[0])
    coeffs = spec.emission_coefficients(flat)
    x0 = np.zeros(spec.C)
    bit = spec.bits[:, k].astype(bool)
    return np.array([np.exp(coeffs.log_probabilities(g, x0))[bit].sum() for g in range(spec.G)])


def permute_groups(spec: ModelSpec, flat, order: Sequence[int]) -> np.ndarray:
    """Parameter vector with mixture groups relabelled so new group g is old order[g]."""
    order = np.asarray(order, dtype=int)
    p = spec.unpack(flat)
    log_pi = log_mixing(p.mix)[order]
    mix = (log_pi - log_pi[-1])[:-1]
    return spec.pack(p._replace(main=np.asarray(p.main)[order], regcov=np.asarray(p.regcov)[order], mix=mix))


def canonicalize_groups(spec: ModelSpec, flat) -> tuple[np.ndarray, np.ndarray]:
    """Order groups by descending key; returns (vector, order)."""
    key = group_order_key(spec, flat)
    order = np.argsort(-key, kind="stable")
    if np.array_equal(order, np.arange(spec.G)):
        return np.asarray(flat, dtype=float).copy(), order
    return permute_groups(spec, flat, order), order


# ---------------------------------------------------------------------------
# fitting


@dataclass(frozen=True)
class FitOptions:
    max_iter: int = 500
    gtol: float = 1e-5
    ftol: float = 1e-9
    n_starts: int = 3
    jitter: float = 0.5
    seed: int = 0
    standard_errors: bool = True
    hessian_step: float = 1e-4
    canonicalize: bool = True
    max_linesearch: int = 40

    def __post_init__(self):
        if self.max_iter < 1 or self.n_starts < 1:
            raise ConfigError("max_iter and n_starts must be >= 1")
        if not (self.gtol > 0 and self.ftol > 0 and self.hessian_step > 0):
            raise ConfigError("tolerances and the Hessian step must be positive")
        if self.jitter < 0:
            raise ConfigError("jitter must be non-negative")


@dataclass
class FitResult:
    names: list[str]
    estimate: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    standard_errors: np.ndarray | None = None
    se_available: np.ndarray | None = None
    covariance: np.ndarray | None = None
    init_loglik: float = float("nan")
    gradient_max: float = float("nan")
    n_evals: int = 0
    message: str = ""
    start_logliks: list[float] = field(default_factory=list)
    trace: list[float] = field(default_factory=list)
    probabilities: dict[str, dict[str, float]] = field(default_factory=dict)

    def named(self) -> dict[str, float]:
        return dict(zip(self.names, map(float, self.estimate)))

    def se_named(self) -> dict[str, float]:
        if self.standard_errors is None:
            return {}
        return dict(zip(self.names, map(float, self.standard_errors)))

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else [None if not np.isfinite(v) else float(v) for v in np.ravel(a)]
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "fit_result",
            "names": list(self.names),
            "estimate": arr(self.estimate),
            "standard_errors": arr(self.standard_errors),
            "se_available": None if self.se_available is None else [bool(v) for v in self.se_available],
            "covariance": None if self.covariance is None else [arr(row) for row in self.covariance],
            "loglik": self.loglik,
            "init_loglik": self.init_loglik,
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "gradient_max": self.gradient_max,
            "n_evals": int(self.n_evals),
            "message": self.message,
            "start_logliks": list(self.start_logliks),
            "trace": list(self.trace),
            "probabilities": self.probabilities,
        }

    @classmethod
    def from_dict(cls, doc: dict, source: str = "") -> "FitResult":
        check_version(doc, "fit result", source)
        try:
            def arr(v):
                return None if v is None else np.array([np.nan if x is None else x for x in v], dtype=float)
            cov = doc.get("covariance")
            return cls(
                names=list(doc["names"]), estimate=arr(doc["estimate"]), loglik=float(doc["loglik"]),
                converged=bool(doc["converged"]), iterations=int(doc["iterations"]),
                standard_errors=arr(doc.get("standard_errors")),
                se_available=None if doc.get("se_available") is None else np.array(doc["se_available"], dtype=bool),
                covariance=None if cov is None else np.array([arr(r) for r in cov]),
                init_loglik=float(doc.get("init_loglik", float("nan"))),
                gradient_max=float(doc.get("gradient_max", float("nan"))),
                n_evals=int(doc.get("n_evals", 0)), message=str(doc.get("message", "")),
                start_logliks=list(doc.get("start_logliks", [])), trace=list(doc.get("trace", [])),
                probabilities=dict(doc.get("probabilities", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed fit result{' in ' + source if source else ''}: {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str, source: str = "") -> "FitResult":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"fit result{' in ' + source if source else ''} is not valid JSON: {exc}") from None
        return cls.from_dict(doc, source)

    def check_names(self, spec: ModelSpec) -> None:
        if tuple(self.names) != spec.param_names:
            raise ConfigError("fit result parameters do not match the configured model")


def probability_summary(spec: ModelSpec, flat, cov=None) -> dict[str, dict[str, float]]:
    """Baseline event probabilities and mixing proportions, with delta-method SEs."""
    flat = np.asarray(flat, dtype=float)
    names = []
    idx = []
    for event in spec.state_space.events:
        names.append(f"{event}:baseline_probability")
        idx.append(spec.param_names.index(f"{event}:intercept"))
    idx = np.array(idx, dtype=int)

    def transform(x):
        pi = np.exp(log_mixing(spec.unpack(x).mix))
        return np.concatenate([expit(x[idx]), pi])

    names += [f"mixing:pi[g{g + 1}]" for g in range(spec.G)]
    est = transform(flat)
    se = None if cov is None else delta_method_se(transform, flat, np.nan_to_num(cov))
    return {n: {"estimate": float(v), "se": None if se is None else float(e)}
            for n, v, e in zip(names, est, se if se is not None else [None] * len(names))}


def _run_lbfgs(obj: Objective, x0: np.ndarray, options: FitOptions, precondition=None):
    """L-BFGS-B on -loglik, optionally in coordinates x = x0 + L z."""
    trace: list[float] = []
    evals = [0]
    Lm = None if precondition is None else np.asarray(precondition, dtype=float)

    def fun(z):
        evals[0] += 1
        x = z if Lm is None else x0 + Lm @ z
        v, g = obj.loglik_and_grad(x)
        if not (math.isfinite(v) and np.all(np.isfinite(g))):
            return 1e100, np.zeros_like(z)
        return -v, -(g if Lm is None else Lm.T @ g)

    def callback(intermediate_result):
        trace.append(-float(intermediate_result.fun))

    z0 = x0 if Lm is None else np.zeros(Lm.shape[1])
    res = minimize(fun, z0, jac=True, method="L-BFGS-B", callback=callback,
                   options={"maxiter": options.max_iter, "gtol": options.gtol, "ftol": options.ftol,
                            "maxls": options.max_linesearch, "maxcor": 20})
    x = res.x if Lm is None else x0 + Lm @ res.x
    return res, np.asarray(x, dtype=float), trace, evals[0]


def preconditioner(covariance: np.ndarray, scale: float = 1.0) -> np.ndarray | None:
    """Lower Cholesky factor of scale * covariance, or None when it is not positive definite."""
    cov = 0.5 * (np.asarray(covariance, dtype=float) + np.asarray(covariance, dtype=float).T) * scale
    if not np.all(np.isfinite(cov)):
        return None
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return None


def fit_mle(batch: RecordBatch, weights=None, init=None, options: FitOptions | None = None,
            objective: Objective | None = None, precondition=None) -> FitResult:
    """Maximise the weighted total log-likelihood over all free parameters.

    ``precondition`` is an optional square matrix L; the search then runs in
    coordinates z with x = init + L z, which with L the Cholesky factor of an
    approximate covariance makes warm-started refits converge in a few steps.
    """
    options = options or FitOptions()
    spec = batch.spec
    obj = objective if objective is not None else Objective(batch, weights)
    x0 = default_init(batch, obj.weights) if init is None else np.asarray(init, dtype=float)
    if x0.shape != (spec.n_params,) or not np.all(np.isfinite(x0)):
        raise NumericError("initial parameter vector must be finite with one entry per parameter")
    ll0 = obj.loglik(x0)
    if not math.isfinite(ll0):
        raise NumericError(f"log-likelihood at the initial point is not finite ({ll0})")

    rng = np.random.default_rng(options.seed)
    life_idx = np.concatenate([spec.block_indices(f"{e}:") for e in EVENTS]).astype(int)
    other = np.setdiff1d(np.arange(spec.n_params), life_idx)
    starts = [x0]
    for _ in range(options.n_starts - 1):
        z = x0.copy()
        z[other] += rng.normal(0.0, options.jitter, other.size)
        z[life_idx] += rng.normal(0.0, 0.1 * options.jitter, life_idx.size)
        starts.append(z)

    best = None
    start_lls = []
    total_evals = 1
    for z in starts:
        if not math.isfinite(obj.loglik(z)):
            start_lls.append(float("-inf"))
            continue
        res, xz, trace, n_ev = _run_lbfgs(obj, z, options, precondition)
        total_evals += n_ev + 1
        ll = -float(res.fun)
        start_lls.append(ll)
        if best is None or ll > best[2]:
            best = (res, xz, ll, trace)
    if best is None:
        raise NumericError("log-likelihood is not finite at any starting point")
    res, x, ll, trace = best
    if ll < ll0:  # never return a point worse than the initial one
        x, ll, trace = x0.copy(), ll0, [ll0]
    g = obj.gradient(x)
    gmax = float(np.max(np.abs(g)))
    converged = bool(res.success) or gmax < options.gtol
    if options.canonicalize and spec.G > 1:
        x, order = canonicalize_groups(spec, x)
        if not np.array_equal(order, np.arange(spec.G)):
            g = obj.gradient(x)
    result = FitResult(list(spec.param_names), x, ll, converged, int(res.nit),
                       init_loglik=ll0, gradient_max=gmax, n_evals=total_evals,
                       message=str(res.message), start_logliks=start_lls, trace=[ll0, *trace])
    if options.standard_errors:
        try:
            ses = hessian_standard_errors(obj.loglik, x, options.hessian_step, grad=obj.gradient)
            result.standard_errors, result.se_available, result.covariance = ses.se, ses.available, ses.covariance
            result.n_evals += 2 * spec.n_params
        except NumericError as exc:
            log.warning("standard errors unavailable: %s", exc)
    result.probabilities = probability_summary(spec, x, result.covariance)
    if not converged:
        log.warning("optimiser stopped without convergence: %s", res.message)
    return result
