"""EM estimation of patience when some abandonment outcomes are missing.

Model: patience ``tau ~ exp(theta)``, virtual wait ``W ~ exp(gamma)`` and an
abandonment signal ``Y ~ Bernoulli(q)``, all independent. Observations with a
known outcome are served (``M=1``) or known abandonments (``M=2``); the rest
(``M=0``) are a mixture of silent abandoners and served customers with a
single exchange.

The E-step posterior and the closed-form M-step updates are

    c3 = 1{M=0} (1 - exp(-theta U)),   c2 = 1{M=2},   c1 = 1 - c2 - c3
    q      = sum c2 / sum (1 - c1)
    gamma  = sum (1 - c2) / sum U
    theta  : theta sum (c3-1) U + sum c2 + theta sum c3 U e^{-theta U}/(1-e^{-theta U}) = 0

All rates are per minute.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, NamedTuple, Sequence

import numpy as np
from scipy.optimize import brentq

from .core import Dataset, DegenerateDataError, rate_to_unit

logger = logging.getLogger(__name__)

THETA_BRACKET = (1e-12, 1e6)
SERIES_CUTOFF = 1e-5


class NumericalError(RuntimeError):
    """Raised when a numerical routine cannot produce a trustworthy answer."""


@dataclass(frozen=True)
class ClassWeights:
    """Per-observation posterior class weights (served, known ab., silent ab.)."""

    c1: np.ndarray
    c2: np.ndarray
    c3: np.ndarray

    @classmethod
    def from_c3(cls, dataset: Dataset, c3: np.ndarray) -> ClassWeights:
        c2 = (dataset.m == 2).astype(float)
        c3 = np.where(dataset.m == 0, np.asarray(c3, dtype=float), 0.0)
        c1 = 1.0 - c2 - c3
        for arr in (c1, c2, c3):
            arr.setflags(write=False)
        return cls(c1, c2, c3)


@dataclass(frozen=True)
class EmInit:
    """Initial silent-abandonment weights for the ``M=0`` observations.

    ``kind`` is one of ``random`` (uniform draws), ``all-sab`` (1),
    ``all-sr`` (0), ``half`` (a random half set to 1, the rest 0),
    ``constant`` (``value``) or ``scores`` (``scores`` array, one per
    observation; entries outside ``M=0`` are ignored).
    """

    kind: str = "random"
    value: float = 0.5
    scores: np.ndarray | None = None

    KINDS = ("random", "all-sab", "all-sr", "half", "constant", "scores")

    def __post_init__(self) -> None:
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown init {self.kind!r}; choose from {', '.join(self.KINDS)}")
        if not 0.0 <= self.value <= 1.0:
            raise ValueError("constant init must lie in [0, 1]")
        if self.kind == "scores":
            if self.scores is None:
                raise ValueError("scores init needs a score array")
            s = np.asarray(self.scores, dtype=float)
            if np.any(~np.isfinite(s) | (s < 0) | (s > 1)):
                raise ValueError("init scores must lie in [0, 1]")

    @classmethod
    def from_scores(cls, scores: Sequence[float] | np.ndarray) -> EmInit:
        return cls("scores", scores=np.asarray(scores, dtype=float))

    def resolve(self, dataset: Dataset, rng: np.random.Generator | int | None = None) -> np.ndarray:
        """Return the initial ``c3`` vector (zero outside ``M=0``)."""
        mask = dataset.m == 0
        n0 = int(mask.sum())
        pi = np.zeros(dataset.n)
        if self.kind == "random":
            pi[mask] = np.random.default_rng(rng).uniform(0.0, 1.0, n0)
        elif self.kind == "all-sab":
            pi[mask] = 1.0
        elif self.kind == "all-sr":
            pass
        elif self.kind == "half":
            chosen = np.random.default_rng(rng).permutation(n0)[: n0 // 2]
            vals = np.zeros(n0)
            vals[chosen] = 1.0
            pi[mask] = vals
        elif self.kind == "constant":
            pi[mask] = self.value
        else:
            s = np.asarray(self.scores, dtype=float).reshape(-1)
            if s.size != dataset.n:
                raise ValueError("init scores must have one entry per observation")
            pi[mask] = s[mask]
        return pi


class TracePoint(NamedTuple):
    theta: float
    q: float
    gamma: float
    loglik: float


@dataclass(frozen=True)
class EmFit:
    """Result of :func:`fit_em`. Rates are per minute."""

    theta: float
    gamma: float
    q: float
    iterations: int
    converged: bool
    trace: tuple[TracePoint, ...]
    final_weights: ClassWeights | None
    flags: tuple[str, ...] = ()
    unit: str = "minutes"

    @property
    def degenerate(self) -> bool:
        return bool(self.flags)

    @property
    def mean_patience(self) -> float:
        """Mean patience in minutes."""
        return math.inf if self.theta == 0 else 1.0 / self.theta

    def params(self) -> dict[str, float]:
        return {"theta": self.theta, "gamma": self.gamma, "q": self.q}

    def rates_in(self, unit: str | None = None) -> dict[str, float]:
        unit = unit or self.unit
        return {"theta": rate_to_unit(self.theta, unit),
                "gamma": rate_to_unit(self.gamma, unit), "q": self.q}


class QGammaStep(NamedTuple):
    q: float
    gamma: float
    q_defined: bool


class ThetaStep(NamedTuple):
    theta: float
    degenerate: bool


# ---------------------------------------------------------------------------
# Numerics
# ---------------------------------------------------------------------------


def x_over_expm1(x: np.ndarray) -> np.ndarray:
    """Evaluate ``x / (e^x - 1)`` for ``x >= 0`` without overflow or cancellation."""
    x = np.asarray(x, dtype=float)
    small = x < SERIES_CUTOFF
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        e = np.exp(-x)
        big = x * e / (-np.expm1(-x))
    series = 1.0 - x / 2.0 + x * x / 12.0
    return np.where(small, series, big)


def e_step(dataset: Dataset, theta: float) -> ClassWeights:
    """Posterior class weights given the current patience rate."""
    if not theta > 0:
        raise ValueError("theta must be positive")
    c3 = -np.expm1(-theta * dataset.u)
    return ClassWeights.from_c3(dataset, c3)


def m_step_qgamma(dataset: Dataset, weights: ClassWeights) -> QGammaStep:
    """Closed-form updates of the signalling probability and wait rate."""
    su = float(np.sum(dataset.u))
    if not su > 0:
        raise DegenerateDataError("sum of observed times is zero")
    gamma = float(np.sum(1.0 - weights.c2)) / su
    denom = float(np.sum(weights.c2) + np.sum(weights.c3))
    if denom <= 0:
        return QGammaStep(0.0, gamma, False)
    return QGammaStep(float(np.sum(weights.c2)) / denom, gamma, True)


def theta_equation(theta: float, u: np.ndarray, weights: ClassWeights) -> float:
    """Left-hand side of the patience-rate estimating equation."""
    a = float(np.sum((weights.c3 - 1.0) * u))
    s3 = float(np.sum(weights.c3 * x_over_expm1(theta * u)))
    return theta * a + float(np.sum(weights.c2)) + s3


def m_step_theta(dataset: Dataset, weights: ClassWeights,
                 theta0: float | None = None) -> ThetaStep:
    """Solve the patience-rate equation by bracketing and Brent's method.

    The left side is strictly decreasing in theta once any observation has
    ``c3 < 1``, so the positive root is unique. Without abandonment evidence
    (no ``c2`` or ``c3`` mass) the rate is 0 and flagged.
    """
    u = dataset.u
    c2_sum = float(np.sum(weights.c2))
    active = weights.c3 > 0
    if c2_sum <= 0 and not np.any(active):
        return ThetaStep(0.0, True)
    a = float(np.sum((weights.c3 - 1.0) * u))
    if a >= 0.0:
        # All mass on c3 = 1: g stays positive and only underflows to zero.
        raise NumericalError(_bracket_message(*THETA_BRACKET, math.inf, c2_sum))
    u3 = u[active]
    c3 = weights.c3[active]

    def g(theta: float) -> float:
        return theta * a + c2_sum + float(np.dot(c3, x_over_expm1(theta * u3)))

    return ThetaStep(_solve_decreasing(g, theta0), False)


def _bracket_message(lo: float, hi: float, g_lo: float, g_hi: float) -> str:
    return (f"could not bracket the patience-rate root in [{lo:g}, {hi:g}] per minute "
            f"(g(lo)={g_lo:g}, g(hi)={g_hi:g})")


# ---------------------------------------------------------------------------
# Likelihood
# ---------------------------------------------------------------------------


def observed_loglik(dataset: Dataset, theta: float, q: float, gamma: float,
                    coupled: bool = False) -> float:
    """Observed-data log-likelihood.

    By default an ``M=0`` observation contributes the marginal over its two
    branches, ``gamma e^{-gamma U} [e^{-theta U} + (1-q)(1-e^{-theta U})]``,
    and a served observation ``gamma e^{-gamma U} e^{-theta U}``.

    With ``coupled=True`` the served customer's silence is tied to the
    signal: a served customer with ``Y=0`` is recorded as ``M=0``. Served
    observations then carry a factor ``q`` and ``M=0`` observations contribute
    ``(1-q) gamma e^{-gamma U}``. This is the likelihood whose ``(theta, gamma)``
    part the EM updates above maximize exactly.

    ``theta`` may also be an array with one rate per observation.
    """
    return loglik_terms(dataset.u, dataset.m, theta, q, gamma, coupled)


def loglik_terms(u: np.ndarray, m: np.ndarray, theta: Any, q: float, gamma: float,
                 coupled: bool = False, freq: np.ndarray | None = None) -> float:
    """Array form of :func:`observed_loglik` with optional frequency weights."""
    theta = np.broadcast_to(np.asarray(theta, dtype=float), u.shape)
    if np.any(theta < 0) or gamma <= 0 or not 0.0 <= q <= 1.0:
        raise ValueError("need theta >= 0, gamma > 0 and q in [0, 1]")
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        log_q = math.log(q) if q > 0 else -math.inf
        log_1q = math.log1p(-q) if q < 1 else -math.inf
        x = theta * u
        ll = math.log(gamma) - gamma * u
        is1, is2, is0 = m == 1, m == 2, m == 0
        ll = np.where(is1, ll - x + (log_q if coupled else 0.0), ll)
        if np.any(is2):
            ll = np.where(is2, log_q + np.log(theta) - x - gamma * u, ll)
        if coupled:
            ll = np.where(is0, ll + log_1q, ll)
        else:
            silent = log_1q + np.log(-np.expm1(-x))
            ll = np.where(is0, ll + np.logaddexp(-x, silent), ll)
        total = float(np.sum(ll if freq is None else ll * freq))
    return total if not math.isnan(total) else -math.inf


# ---------------------------------------------------------------------------
# Algorithm
# ---------------------------------------------------------------------------


def _resolve_init(init: EmInit | str | None) -> EmInit:
    if init is None:
        return EmInit()
    if isinstance(init, str):
        return EmInit(init)
    return init


def fit_em(dataset: Dataset, init: EmInit | str | None = None, epsilon: float = 1e-6,
           max_iter: int = 10000, seed: Any = None, record_trace: bool = True,
           keep_weights: bool = True) -> EmFit:
    """Fit ``(theta, q, gamma)`` by alternating E- and M-steps.

    Iteration stops once ``|dtheta| + |dq| + |dgamma| <= epsilon`` (per-minute
    rates) or after ``max_iter`` E/M cycles. ``seed`` drives the random
    initial weights.

    Without known abandonments the iteration drifts to ``theta = 0``; that
    limit is returned directly, with ``q = 0`` and a flag.
    """
    if dataset.n == 0:
        raise DegenerateDataError("dataset is empty")
    if epsilon <= 0 or max_iter < 1:
        raise ValueError("need epsilon > 0 and max_iter >= 1")
    init = _resolve_init(init)
    u = dataset.u
    su = float(np.sum(u))
    m = dataset.m
    n2 = int(np.sum(m == 2))

    if n2 == 0:
        gamma = dataset.n / su
        flags = ("no_known_abandonment", "q_undefined")
        weights = ClassWeights.from_c3(dataset, np.zeros(dataset.n)) if keep_weights else None
        point = TracePoint(0.0, 0.0, gamma, _safe_loglik(dataset, 0.0, 0.0, gamma, record_trace))
        return EmFit(0.0, gamma, 0.0, 0, True, (point,) if record_trace else (), weights,
                     flags, dataset.unit)

    # gamma's update does not depend on the weights.
    gamma = (dataset.n - n2) / su
    mask0 = m == 0
    u0 = u[mask0]
    c2_sum = float(n2)
    u_known = float(np.sum(u[~mask0]))

    def update(c3_0: np.ndarray, theta_prev: float | None) -> tuple[float, float]:
        # Same equations as m_step_theta/m_step_qgamma, restricted to M=0 rows.
        a = float(np.dot(c3_0 - 1.0, u0)) - u_known

        def g(t: float) -> float:
            return t * a + c2_sum + float(np.dot(c3_0, x_over_expm1(t * u0)))

        theta = _solve_decreasing(g, theta_prev)
        return theta, c2_sum / (c2_sum + float(np.sum(c3_0)))

    c3_0 = init.resolve(dataset, seed)[mask0]
    theta, q = update(c3_0, None)
    trace = [TracePoint(theta, q, gamma, _safe_loglik(dataset, theta, q, gamma, record_trace))]
    converged = False
    iterations = 0
    while iterations < max_iter:
        iterations += 1
        c3_0 = -np.expm1(-theta * u0)
        theta_new, q_new = update(c3_0, theta)
        change = abs(theta_new - theta) + abs(q_new - q)
        theta, q = theta_new, q_new
        if record_trace:
            trace.append(TracePoint(theta, q, gamma, observed_loglik(dataset, theta, q, gamma)))
        if change <= epsilon:
            converged = True
            break
    if not converged:
        logger.warning("EM did not converge in %d iterations", max_iter)
    weights = None
    if keep_weights:
        weights = e_step(dataset, theta)
    if not record_trace:
        trace = [trace[-1]] if trace else []
    return EmFit(theta, gamma, q, iterations, converged, tuple(trace), weights, (), dataset.unit)


def _safe_loglik(dataset: Dataset, theta: float, q: float, gamma: float, wanted: bool) -> float:
    if not wanted:
        return math.nan
    return observed_loglik(dataset, theta, q, gamma)


def _solve_decreasing(g: Any, theta0: float | None) -> float:
    """Root of a decreasing function on the admissible theta range.

    The bracket starts at ``[1e-12, 1]`` (or around a warm start) and is
    widened by doubling/halving until the sign changes.
    """
    lo_limit, hi_limit = THETA_BRACKET
    if theta0 is not None and lo_limit < theta0 < hi_limit:
        lo, hi = theta0 / 2.0, theta0 * 2.0
    else:
        lo, hi = lo_limit, 1.0
    g_lo = g(lo)
    while g_lo < 0:
        if lo <= lo_limit:
            raise NumericalError(_bracket_message(lo_limit, hi, g_lo, g(hi)))
        hi, lo = lo, max(lo / 2.0, lo_limit)
        g_lo = g(lo)
    g_hi = g(hi)
    while g_hi > 0:
        if hi >= hi_limit:
            raise NumericalError(_bracket_message(lo, hi_limit, g_lo, g_hi))
        lo, g_lo = hi, g_hi
        hi = min(hi * 2.0, hi_limit)
        g_hi = g(hi)
    if g_lo == 0:
        return lo
    if g_hi == 0:
        return hi
    return float(brentq(g, lo, hi, xtol=1e-300, rtol=1e-13, maxiter=200))
