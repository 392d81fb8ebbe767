"""EM with a log-linear patience model, bootstrap intervals and grouped fits.

Patience rate given covariates ``x``::

    theta(x) = exp(-(beta0 + beta' x)),   mean patience = exp(beta0 + beta' x)

so ``exp(beta_j)`` is the factor by which mean patience changes per unit of
covariate ``j``. The E-step and the ``(q, gamma)`` updates are those of the
scalar algorithm with ``theta`` replaced by ``theta_i``. The ``beta`` update
maximizes the expected complete-data log-likelihood

    Q(beta) = sum_i c1 (-s_i) + c2 (log theta_i - s_i) + c3 log(1 - e^{-s_i}),
    s_i = theta_i U_i,

which is concave in ``beta``; its gradient set to zero gives the estimating
equations

    sum_i (-X_ij) [c2 + log G_i (c1 + c2 - c3 G_i / (1 - G_i))] = 0,
    G_i = exp(-s_i),   X_i0 = 1.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, NamedTuple, Sequence

import numpy as np

from .baselines import UsabPolicy, method1, method2
from .core import Dataset, DataError, DegenerateDataError
from .em import (ClassWeights, EmFit, EmInit, NumericalError, _resolve_init, fit_em,
                 loglik_terms)

logger = logging.getLogger(__name__)

NEWTON_MAX_STEPS = 50
NEWTON_STEP_TOL = 1e-10
FLAT_STEP_TOL = 1e-6
QUADRATIC_EXIT = 1e-6


class CovTracePoint(NamedTuple):
    beta: tuple[float, ...]
    q: float
    gamma: float
    loglik: float


@dataclass(frozen=True)
class CovariateFit:
    """Fitted log-linear patience model; ``gamma`` is per minute."""

    beta0: float
    beta: np.ndarray
    gamma: float
    q: float
    covariate_names: tuple[str, ...]
    iterations: int
    converged: bool
    trace: tuple[CovTracePoint, ...]
    flags: tuple[str, ...] = ()
    final_weights: ClassWeights | None = None

    @property
    def multipliers(self) -> np.ndarray:
        """Mean-patience factor per unit of each covariate, ``exp(beta_j)``."""
        return np.exp(self.beta)

    @property
    def coefficients(self) -> np.ndarray:
        return np.concatenate([[self.beta0], self.beta])

    def linear_predictor(self, x: Any) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, len(self.beta))
        return self.beta0 + x @ self.beta

    def theta_at(self, x: Any) -> np.ndarray:
        """Patience rate per minute at covariate rows ``x``."""
        return np.exp(-self.linear_predictor(x))

    def mean_patience_at(self, x: Any) -> np.ndarray:
        """Mean patience in minutes at covariate rows ``x``."""
        return np.exp(self.linear_predictor(x))

    def params(self) -> dict[str, float]:
        out = {"beta0": self.beta0}
        out.update({f"beta_{nm}": float(b) for nm, b in zip(self.covariate_names, self.beta)})
        out.update({"gamma": self.gamma, "q": self.q})
        return out


class BetaSolution(NamedTuple):
    coefficients: np.ndarray
    converged: bool
    degenerate: bool
    residual: float
    steps: int


# ---------------------------------------------------------------------------
# Beta estimating equations
# ---------------------------------------------------------------------------


def design_matrix(dataset: Dataset) -> np.ndarray:
    x = dataset.covariates
    if x is None:
        return np.ones((dataset.n, 1))
    return np.column_stack([np.ones(dataset.n), x])


def check_rank(design: np.ndarray, names: Sequence[str]) -> None:
    """Raise naming the first covariate that is collinear with earlier columns."""
    labels = ["(intercept)", *names]
    kept: list[int] = []
    for j in range(design.shape[1]):
        trial = design[:, kept + [j]]
        if np.linalg.matrix_rank(trial) < len(kept) + 1:
            others = ", ".join(labels[i] for i in kept) or "nothing"
            raise DataError(f"design is rank deficient: column {labels[j]!r} is "
                            f"collinear with {others}")
        kept.append(j)


class _Surrogate:
    """Expected complete-data log-likelihood in ``beta`` and its derivatives.

    Transcendental terms are only evaluated on rows with ``c3 > 0``.
    """

    def __init__(self, design: np.ndarray, u: np.ndarray, c1: np.ndarray, c2: np.ndarray,
                 c3: np.ndarray, freq: np.ndarray | None) -> None:
        w = np.ones(u.size) if freq is None else freq
        self.design, self.u = design, u
        self.a = w * (c1 + c2)          # weight on -s
        self.b = w * c2                 # weight on -eta
        self.z = np.flatnonzero(c3 > 0)
        self.c3z = (w * c3)[self.z]

    def value(self, coef: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        eta = self.design @ coef
        s = np.exp(-eta) * self.u
        sz = s[self.z]
        em1 = -np.expm1(-sz)
        obj = -float(self.a @ s) - float(self.b @ eta) + float(self.c3z @ np.log(em1))
        return obj, s, em1

    def derivatives(self, s: np.ndarray, em1: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d1 = self.a * s - self.b
        d2 = -self.a * s
        sz = s[self.z]
        with np.errstate(invalid="ignore", divide="ignore"):
            h = sz * np.exp(-sz) / em1
            sh1 = h * (1.0 - sz / em1)
        tiny = sz < 1e-5
        if np.any(tiny):
            st = sz[tiny]
            h[tiny] = 1.0 - st / 2.0 + st * st / 12.0
            sh1[tiny] = -st / 2.0 + st * st / 6.0
        d1[self.z] -= self.c3z * h
        d2[self.z] += self.c3z * sh1
        return self.design.T @ d1, (self.design.T * d2) @ self.design


def beta_equations(dataset: Dataset, weights: ClassWeights, coefficients: Any) -> np.ndarray:
    """Left-hand sides of the ``k+1`` estimating equations."""
    design = design_matrix(dataset)
    coef = np.asarray(coefficients, dtype=float)
    eta = design @ coef
    log_g = -np.exp(-eta) * dataset.u
    g = np.exp(log_g)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(weights.c3 > 0, weights.c3 * g / (-np.expm1(log_g)), 0.0)
    inner = weights.c2 + log_g * (weights.c1 + weights.c2 - ratio)
    return -(design.T @ inner)


def solve_beta(dataset: Dataset, weights: ClassWeights, beta_init: Any = None) -> BetaSolution:
    """Solve the estimating equations by damped Newton iteration.

    The Hessian is the analytic second derivative of the concave surrogate.
    A step is halved until the surrogate does not decrease; if 50 damped
    steps do not converge, gradient ascent with backtracking takes over.
    """
    design = design_matrix(dataset)
    return _solve_beta_arrays(design, dataset.u, weights.c1, weights.c2, weights.c3,
                              beta_init, None)


def _solve_beta_arrays(design: np.ndarray, u: np.ndarray, c1: np.ndarray, c2: np.ndarray,
                       c3: np.ndarray, beta_init: Any, freq: np.ndarray | None) -> BetaSolution:
    p = design.shape[1]
    coef = np.zeros(p) if beta_init is None else np.array(beta_init, dtype=float)
    if float(np.sum(c2)) <= 0 and not np.any(c3 > 0):
        # Only served evidence: the likelihood keeps growing as theta -> 0.
        return BetaSolution(coef, False, True, math.nan, 0)
    sur = _Surrogate(design, u, c1, c2, c3, freq)
    obj, s, em1 = sur.value(coef)
    for step in range(1, NEWTON_MAX_STEPS + 1):
        grad, hess = sur.derivatives(s, em1)
        try:
            direction = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(direction)):
            break
        scale = max(1.0, float(np.max(np.abs(coef))))
        if float(np.max(np.abs(direction))) <= NEWTON_STEP_TOL * scale:
            return BetaSolution(coef, True, False, float(np.linalg.norm(grad)), step - 1)
        if float(grad @ direction) <= 0:
            break
        t = 1.0
        while t >= 1e-10:
            trial = coef + t * direction
            obj_t, s_t, em1_t = sur.value(trial)
            if obj_t >= obj:
                break
            t *= 0.5
        else:
            if float(np.max(np.abs(direction))) <= FLAT_STEP_TOL * scale:
                # The objective is flat to rounding: already at the optimum.
                return BetaSolution(coef, True, False, float(np.linalg.norm(grad)), step - 1)
            break
        flat = obj_t - obj <= 1e-13 * abs(obj)
        coef, obj, s, em1 = trial, obj_t, s_t, em1_t
        step_size = float(np.max(np.abs(t * direction)))
        if (t == 1.0 and step_size <= QUADRATIC_EXIT * scale) or (
                flat and step_size <= FLAT_STEP_TOL * scale):
            # A full Newton step this small leaves an error of order its square.
            return BetaSolution(coef, True, False, math.nan, step)
    return _gradient_ascent(sur, coef)


def _gradient_ascent(sur: _Surrogate, coef: np.ndarray, max_steps: int = 20000) -> BetaSolution:
    logger.info("Newton did not converge; switching to gradient ascent")
    obj, s, em1 = sur.value(coef)
    scale = max(1.0, float(np.sum(sur.a) + np.sum(sur.c3z)))
    t = 1.0
    for step in range(1, max_steps + 1):
        grad, _ = sur.derivatives(s, em1)
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= 1e-10 * scale:
            return BetaSolution(coef, True, False, gnorm, step)
        while t > 1e-300:
            trial = coef + t * grad
            obj_t, s_t, em1_t = sur.value(trial)
            if obj_t > obj:
                break
            t *= 0.5
        else:
            break
        coef, obj, s, em1 = trial, obj_t, s_t, em1_t
        t *= 2.0
    raise NumericalError("estimating equations for beta could not be solved")


# ---------------------------------------------------------------------------
# Algorithm
# ---------------------------------------------------------------------------


def fit_em_cov(dataset: Dataset, init: EmInit | str | None = None, epsilon: float = 1e-6,
               max_iter: int = 10000, seed: Any = None, beta_init: Any = None,
               record_trace: bool = True, keep_weights: bool = False) -> CovariateFit:
    """Fit ``(beta0, beta, q, gamma)`` by EM.

    Stops when ``|d theta(x_bar)| + |dq| + |dgamma| <= epsilon`` and
    ``max |d beta| <= epsilon``, with ``x_bar`` the covariate means.
    When ``beta_init`` is omitted the first Newton solve starts from
    ``beta0 = -log(theta)`` of the scalar fit and ``beta = 0``.
    """
    if dataset.n == 0:
        raise DegenerateDataError("dataset is empty")
    names = dataset.covariate_names
    design = design_matrix(dataset)
    check_rank(design, names)
    init = _resolve_init(init)
    if beta_init is None:
        base = fit_em(dataset, EmInit("all-sab"), epsilon, max_iter, record_trace=False,
                      keep_weights=False)
        if base.theta <= 0:
            flags = ("no_known_abandonment", "q_undefined")
            return CovariateFit(math.inf, np.zeros(len(names)), base.gamma, 0.0, names, 0, True,
                                (), flags)
        beta_init = np.zeros(design.shape[1])
        beta_init[0] = -math.log(base.theta)
    c3_start = init.resolve(dataset, seed)
    return _fit_em_cov_arrays(design, dataset.u, dataset.m, names, c3_start,
                              np.asarray(beta_init, dtype=float), epsilon, max_iter,
                              record_trace, keep_weights, None)


def _fit_em_cov_arrays(design: np.ndarray, u: np.ndarray, m: np.ndarray,
                       names: tuple[str, ...], c3_start: np.ndarray, beta_init: np.ndarray,
                       epsilon: float, max_iter: int, record_trace: bool, keep_weights: bool,
                       freq: np.ndarray | None) -> CovariateFit:
    n_total = float(u.size if freq is None else np.sum(freq))
    w = np.ones(u.size) if freq is None else freq
    is0, is2 = m == 0, m == 2
    c2 = is2.astype(float)
    n2 = float(np.sum(w[is2]))
    su = float(np.sum(w * u))
    if n2 == 0:
        return CovariateFit(math.inf, np.zeros(len(names)), n_total / su, 0.0, names, 0, True,
                            (), ("no_known_abandonment", "q_undefined"))
    gamma = (n_total - n2) / su
    x_bar = np.average(design, axis=0, weights=w)

    def m_step(c3: np.ndarray, start: np.ndarray) -> tuple[np.ndarray, float]:
        c1 = 1.0 - c2 - c3
        sol = _solve_beta_arrays(design, u, c1, c2, c3, start, freq)
        q = n2 / (n2 + float(np.sum(w * c3)))
        return sol.coefficients, q

    def loglik(coef: np.ndarray, q: float) -> float:
        if not record_trace:
            return math.nan
        return loglik_terms(u, m, np.exp(-(design @ coef)), q, gamma, False, freq)

    c3 = np.where(is0, c3_start, 0.0)
    coef, q = m_step(c3, beta_init)
    trace = [CovTracePoint(tuple(coef), q, gamma, loglik(coef, q))]
    theta_bar = math.exp(-float(x_bar @ coef))
    converged = False
    iterations = 0
    while iterations < max_iter:
        iterations += 1
        theta_i = np.exp(-(design @ coef))
        c3 = np.where(is0, -np.expm1(-theta_i * u), 0.0)
        new_coef, new_q = m_step(c3, coef)
        new_theta_bar = math.exp(-float(x_bar @ new_coef))
        scalar_change = abs(new_theta_bar - theta_bar) + abs(new_q - q)
        beta_change = float(np.max(np.abs(new_coef - coef)))
        coef, q, theta_bar = new_coef, new_q, new_theta_bar
        if record_trace:
            trace.append(CovTracePoint(tuple(coef), q, gamma, loglik(coef, q)))
        if scalar_change <= epsilon and beta_change <= epsilon:
            converged = True
            break
    if not converged:
        logger.warning("covariate EM did not converge in %d iterations", max_iter)
    weights = None
    if keep_weights:
        theta_i = np.exp(-(design @ coef))
        weights = ClassWeights(1.0 - c2 - np.where(is0, -np.expm1(-theta_i * u), 0.0), c2,
                               np.where(is0, -np.expm1(-theta_i * u), 0.0))
    if not record_trace:
        trace = trace[-1:]
    return CovariateFit(float(coef[0]), np.array(coef[1:]), gamma, q, names, iterations,
                        converged, tuple(trace), (), weights)


def fitted_theta(fit: CovariateFit, dataset: Dataset) -> np.ndarray:
    """Per-observation patience rates implied by ``fit`` on ``dataset``."""
    return np.exp(-(design_matrix(dataset) @ fit.coefficients))


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BootstrapCI:
    """Percentile intervals from ``resamples`` bootstrap refits."""

    point: dict[str, float]
    lower: dict[str, float]
    upper: dict[str, float]
    resamples: int
    seed: Any
    level: float
    n_failed: int
    unreliable: bool
    samples: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def covers(self, name: str, value: float) -> bool:
        return self.lower[name] <= value <= self.upper[name]

    def to_dict(self) -> dict[str, Any]:
        return {"level": self.level, "resamples": self.resamples, "seed": self.seed,
                "n_failed": self.n_failed, "unreliable": self.unreliable,
                "intervals": {k: [self.lower[k], self.upper[k]] for k in self.point}}


Fitter = Callable[[Dataset, np.ndarray, np.random.Generator], Mapping[str, float]]


class _EmFitter:
    """Scalar EM refit started from the full-sample posterior weights."""

    def __init__(self, epsilon: float, max_iter: int, full: EmFit) -> None:
        self.epsilon, self.max_iter = epsilon, max_iter
        self.c3 = None if full.final_weights is None else np.asarray(full.final_weights.c3)

    def __call__(self, dataset: Dataset, index: np.ndarray,
                 rng: np.random.Generator) -> Mapping[str, float]:
        init = EmInit.from_scores(self.c3[index]) if self.c3 is not None else EmInit()
        f = fit_em(dataset.take(index), init, self.epsilon, self.max_iter, seed=rng,
                   record_trace=False, keep_weights=False)
        if not f.converged:
            raise NumericalError("EM did not converge")
        return f.params()


class _CovFitter:
    """Covariate EM refit started from the full-sample weights and coefficients.

    A resample is represented by the multiplicity of each original row,
    which gives the same sums as the expanded resample.
    """

    def __init__(self, epsilon: float, max_iter: int, full: CovariateFit,
                 dataset: Dataset) -> None:
        self.epsilon, self.max_iter = epsilon, max_iter
        theta_full = fitted_theta(full, dataset)
        self.c3 = np.where(dataset.m == 0, -np.expm1(-theta_full * dataset.u), 0.0)
        self.start = full.coefficients
        self.design = design_matrix(dataset)

    def __call__(self, dataset: Dataset, index: np.ndarray,
                 rng: np.random.Generator) -> Mapping[str, float]:
        counts = np.bincount(index, minlength=dataset.n)
        rows = np.flatnonzero(counts)
        design = self.design[rows]
        check_rank(design, dataset.covariate_names)
        f = _fit_em_cov_arrays(design, dataset.u[rows], dataset.m[rows],
                               dataset.covariate_names, self.c3[rows], self.start,
                               self.epsilon, self.max_iter, False, False,
                               counts[rows].astype(float))
        if not f.converged or f.flags:
            raise NumericalError("covariate EM did not converge")
        return f.params()


class _PolicyFitter:
    """Closed-form method with the policy maps resampled alongside the data."""

    def __init__(self, method: str, policy: UsabPolicy) -> None:
        self.method, self.policy = method, policy

    def __call__(self, dataset: Dataset, index: np.ndarray,
                 rng: np.random.Generator) -> Mapping[str, float]:
        pol = self.policy
        if pol.labels is not None:
            pol = UsabPolicy(pol.kind, labels=pol.labels[index], threshold=pol.threshold)
        elif pol.scores is not None:
            pol = UsabPolicy(pol.kind, scores=pol.scores[index], threshold=pol.threshold)
        est = (method1 if self.method == "m1" else method2)(dataset.take(index), pol)
        return est.params()


def _bootstrap_task(args: tuple[Dataset, Fitter, Any, int]) -> tuple[int, dict[str, float] | None]:
    dataset, fitter, seed, b = args
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b,)))
    index = rng.integers(0, dataset.n, dataset.n)
    try:
        return b, dict(fitter(dataset, index, rng))
    except (NumericalError, DataError, ValueError, FloatingPointError) as exc:
        logger.debug("bootstrap resample %d failed: %s", b, exc)
        return b, None


def bootstrap_ci(dataset: Dataset, fitter: str | Fitter = "em", B: int = 500, seed: int = 0,
                 level: float = 0.95, epsilon: float = 1e-6, max_iter: int = 10000,
                 policy: UsabPolicy | str = "as_served", jobs: int = 1) -> BootstrapCI:
    """Nonparametric bootstrap with percentile intervals.

    ``fitter`` is ``"em"``, ``"em-cov"``, ``"m1"``, ``"m2"`` or a picklable
    callable ``(dataset, index, rng) -> {name: value}`` that fits
    ``dataset.take(index)``. Resample ``b`` draws from
    a stream derived from ``(seed, b)`` so the output does not depend on
    ``jobs``. Iterative fitters start each resample from the full-sample
    posterior weights; their fixed point does not depend on the start.
    """
    if B < 2:
        raise ValueError("need at least 2 resamples")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if isinstance(fitter, str):
        if fitter == "em":
            full: Any = fit_em(dataset, None, epsilon, max_iter, seed=seed, record_trace=False)
            point = full.params()
            fit_fn = _EmFitter(epsilon, max_iter, full)
        elif fitter == "em-cov":
            full = fit_em_cov(dataset, None, epsilon, max_iter, seed=seed, record_trace=False)
            point = full.params()
            fit_fn = _CovFitter(epsilon, max_iter, full, dataset)
        elif fitter in ("m1", "m2"):
            pol = UsabPolicy(policy) if isinstance(policy, str) else policy
            fit_fn = _PolicyFitter(fitter, pol)
            point = dict(fit_fn(dataset, np.arange(dataset.n), np.random.default_rng(seed)))
        else:
            raise ValueError(f"unknown fitter {fitter!r}")
    else:
        fit_fn = fitter
        point = dict(fit_fn(dataset, np.arange(dataset.n), np.random.default_rng(seed)))

    tasks = [(dataset, fit_fn, seed, b) for b in range(B)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_bootstrap_task, tasks, chunksize=max(1, B // (4 * jobs))))
    else:
        results = [_bootstrap_task(t) for t in tasks]
    results.sort(key=lambda r: r[0])
    good = [r for _, r in results if r is not None]
    n_failed = B - len(good)
    unreliable = n_failed > 0.1 * B
    if unreliable:
        warnings.warn(f"{n_failed} of {B} bootstrap fits failed; interval unreliable",
                      stacklevel=2)
    alpha = (1.0 - level) / 2.0
    samples, lower, upper = {}, {}, {}
    for name in point:
        vals = np.array([g[name] for g in good], dtype=float)
        samples[name] = vals
        if vals.size:
            lo, hi = np.quantile(vals, [alpha, 1.0 - alpha])
        else:
            lo = hi = math.nan
        lower[name], upper[name] = float(lo), float(hi)
    return BootstrapCI(point, lower, upper, B, seed, level, n_failed, unreliable, samples)


# ---------------------------------------------------------------------------
# Grouped fits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BucketFit:
    label: str
    low: float
    high: float
    n: int
    fit: EmFit
    ci: BootstrapCI | None

    @property
    def mean_patience(self) -> float:
        return self.fit.mean_patience


def bucket_labels(edges: Sequence[float]) -> list[tuple[str, float, float]]:
    """Half-open buckets ``(lo, hi]`` from sorted upper edges, plus a tail bucket."""
    edges = [float(e) for e in edges]
    if sorted(edges) != edges or len(set(edges)) != len(edges):
        raise ValueError("bucket edges must be strictly increasing")
    out = []
    lo = -math.inf
    for hi in edges:
        label = f"<={hi:g}" if lo == -math.inf else f"({lo:g},{hi:g}]"
        out.append((label, lo, hi))
        lo = hi
    out.append((f">{lo:g}", lo, math.inf))
    return out


def group_patience(dataset: Dataset, by: str, edges: Sequence[float], B: int = 500,
                   seed: int = 0, epsilon: float = 1e-6, max_iter: int = 10000,
                   jobs: int = 1) -> list[BucketFit]:
    """Scalar EM per bucket of covariate ``by`` (buckets ``(lo, hi]``).

    Empty buckets are skipped with a warning; ``B=0`` skips the intervals.
    """
    if by not in dataset.covariate_names:
        raise DataError(f"unknown covariate {by!r}")
    col = dataset.covariates[:, dataset.covariate_names.index(by)]
    out = []
    for label, lo, hi in bucket_labels(edges):
        idx = np.flatnonzero((col > lo) & (col <= hi))
        if idx.size == 0:
            warnings.warn(f"bucket {label} is empty; skipped", stacklevel=2)
            continue
        sub = dataset.take(idx)
        fit = fit_em(sub, None, epsilon, max_iter, seed=seed, record_trace=False)
        ci = bootstrap_ci(sub, "em", B, seed, epsilon=epsilon, max_iter=max_iter,
                          jobs=jobs) if B >= 2 else None
        out.append(BucketFit(label, lo, hi, int(idx.size), fit, ci))
    return out
