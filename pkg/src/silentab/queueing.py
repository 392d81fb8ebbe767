"""Erlang-A (M/M/n+M) steady state, staffing search and capacity-waste accounting.

Rates are per hour throughout this module and durations come out in hours
unless noted; :func:`capacity_waste` works with minutes because its inputs
are conversation durations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
from scipy.special import logsumexp

TAIL_TOL = 1e-12
MAX_STATES = 10_000_000
_BLOCK = 4096


class TruncationError(ValueError):
    """The chain needs more states than allowed."""


@dataclass(frozen=True)
class ErlangAInput:
    lam: float
    mu: float
    theta: float
    n: int

    def __post_init__(self) -> None:
        for name in ("lam", "mu", "theta"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive and finite")
        n = self.n
        if isinstance(n, float):
            if not math.isfinite(n):
                raise ValueError("n must be finite")
            n = int(round(n))
        if int(n) < 1:
            raise ValueError("n must be at least 1")
        object.__setattr__(self, "n", int(n))


@dataclass(frozen=True)
class ErlangAOutput:
    p_wait: float
    p_abandon: float
    mean_wait: float
    mean_queue: float
    occupancy: float
    n_states: int
    total_mass: float = 1.0

    def to_dict(self) -> dict[str, Any]:
        return {"p_wait": self.p_wait, "p_abandon": self.p_abandon,
                "mean_wait_hours": self.mean_wait, "mean_wait_minutes": self.mean_wait * 60.0,
                "mean_queue": self.mean_queue, "occupancy": self.occupancy,
                "n_states": self.n_states}


def _log_death_rates(start: int, stop: int, mu: float, theta: float, n: int) -> np.ndarray:
    j = np.arange(start, stop, dtype=float)
    rates = np.minimum(j, n) * mu + np.maximum(j - n, 0.0) * theta
    return np.log(rates)


def stationary_log_probs(inp: ErlangAInput, tail_tol: float = TAIL_TOL,
                         max_states: int = MAX_STATES) -> np.ndarray:
    """Unnormalized ``log pi_j`` for ``j = 0..J`` with neglected tail below ``tail_tol``."""
    log_lam = math.log(inp.lam)
    pieces = [np.zeros(1)]
    last = 0.0
    running_max = 0.0
    start = 1
    while True:
        stop = min(start + max(_BLOCK, inp.n), max_states + 1)
        block = last + np.cumsum(log_lam - _log_death_rates(start, stop, inp.mu, inp.theta, inp.n))
        pieces.append(block)
        running_max = max(running_max, float(block.max()))
        last = float(block[-1])
        j_last = stop - 1
        # Past the mode the ratio pi_{j+1}/pi_j = lam/d_{j+1} falls, so the
        # tail is at most pi_J r / (1 - r) with r taken at J+1.
        down = inp.n * inp.mu + max(j_last + 1 - inp.n, 0) * inp.theta \
            if j_last + 1 > inp.n else (j_last + 1) * inp.mu
        r = inp.lam / down
        if r < 1.0:
            log_tail = last + math.log(r) - math.log1p(-r)
            if log_tail - running_max < math.log(tail_tol) - 2.0 * math.log(j_last + 1):
                break
        if stop > max_states:
            raise TruncationError(
                f"truncation needs more than {max_states} states; rescale the time unit "
                "or raise max_states")
        start = stop
    return np.concatenate(pieces)


def erlang_a(inp: ErlangAInput | None = None, *, lam: float | None = None,
             mu: float | None = None, theta: float | None = None, n: int | None = None,
             tail_tol: float = TAIL_TOL, max_states: int = MAX_STATES) -> ErlangAOutput:
    """Steady-state measures of the Erlang-A birth-death chain.

    ``p_wait = P(j >= n)``, ``p_abandon = theta E[(j - n)+] / lam``,
    ``mean_wait = E[(j - n)+] / lam`` (Little's law) and
    ``occupancy = E[min(j, n)] / n``.
    """
    if inp is None:
        inp = ErlangAInput(lam, mu, theta, n)  # type: ignore[arg-type]
    logp = stationary_log_probs(inp, tail_tol, max_states)
    p = np.exp(logp - logsumexp(logp))
    j = np.arange(p.size, dtype=float)
    queue = np.maximum(j - inp.n, 0.0)
    p_wait = float(np.sum(p[inp.n:]))
    mean_queue = float(p @ queue)
    busy = float(p @ np.minimum(j, inp.n))
    p_ab = min(inp.theta * mean_queue / inp.lam, 1.0)
    return ErlangAOutput(min(p_wait, 1.0), p_ab, mean_queue / inp.lam, mean_queue,
                         busy / inp.n, int(p.size), float(p.sum()))


def erlang_c_wait(lam: float, mu: float, n: int) -> float:
    """Erlang-C probability of waiting (no abandonment); needs ``lam < n mu``."""
    a = lam / mu
    if a >= n:
        raise ValueError("Erlang-C needs lam < n * mu")
    # Erlang-B by the stable recursion, then the standard conversion.
    b = 1.0
    for k in range(1, n + 1):
        b = a * b / (k + a * b)
    rho = a / n
    return b / (1.0 - rho + rho * b)


# ---------------------------------------------------------------------------
# Staffing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StaffingResult:
    n: int
    metric: str
    target: float
    achieved: float
    output: ErlangAOutput
    probes: tuple[int, ...] = field(default=(), repr=False)

    def to_dict(self) -> dict[str, Any]:
        return {"n": self.n, "metric": self.metric, "target": self.target,
                "achieved": self.achieved, "probes": len(self.probes),
                "output": self.output.to_dict()}


def staffing_search(lam: float, mu: float, theta: float, *, max_abandon: float | None = None,
                    max_wait: float | None = None, max_n: int = 100_000) -> StaffingResult:
    """Smallest ``n`` whose ``p_abandon`` (or ``p_wait``) is at most the target.

    Doubles ``n`` until the target holds, then bisects between the last
    failing and first passing server counts.
    """
    if (max_abandon is None) == (max_wait is None):
        raise ValueError("give exactly one of max_abandon or max_wait")
    metric = "p_abandon" if max_abandon is not None else "p_wait"
    target = float(max_abandon if max_abandon is not None else max_wait)  # type: ignore[arg-type]
    if not 0.0 <= target <= 1.0:
        raise ValueError("target must lie in [0, 1]")
    cache: dict[int, ErlangAOutput] = {}
    probes: list[int] = []

    def evaluate(k: int) -> ErlangAOutput:
        if k not in cache:
            probes.append(k)
            cache[k] = erlang_a(ErlangAInput(lam, mu, theta, k))
        return cache[k]

    def ok(k: int) -> bool:
        return getattr(evaluate(k), metric) <= target

    if ok(1):
        hi = 1
    else:
        lo, hi = 1, 2
        while not ok(hi):
            if hi >= max_n:
                raise ValueError(f"target {metric} <= {target} unreachable at n={max_n}: "
                                 f"achieved {getattr(evaluate(hi), metric):.6g}")
            lo, hi = hi, min(2 * hi, max_n)
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if ok(mid):
                hi = mid
            else:
                lo = mid
    out = evaluate(hi)
    return StaffingResult(hi, metric, target, float(getattr(out, metric)), out, tuple(probes))


# ---------------------------------------------------------------------------
# Capacity waste
# ---------------------------------------------------------------------------

CLASSES = ("sab", "sr1", "sr")
# Reference inputs: class shares and (service, closure) minutes per class.
REFERENCE_SHARES = {"sab": 0.133, "sr1": 0.124, "sr": 0.743}
REFERENCE_DURATIONS = {"sab": (20.06, 113.64), "sr1": (53.67, 94.98), "sr": (48.57, 59.18)}
REFERENCE_WAGE = 35664.0
REFERENCE_WASTE = 0.153
REFERENCE_COST = 5457.0


def capacity_waste(shares: Mapping[str, float],
                   durations: Mapping[str, tuple[float, float]]) -> float:
    """Share of agent concurrency time spent on silent abandonment."""
    if set(shares) != set(CLASSES) or set(durations) != set(CLASSES):
        raise ValueError(f"shares and durations need exactly the classes {CLASSES}")
    vals = [float(shares[c]) for c in CLASSES]
    if any(v < 0 for v in vals) or abs(sum(vals) - 1.0) > 1e-9:
        raise ValueError("shares must be non-negative and sum to 1")
    weights = {}
    for c in CLASSES:
        svc, close = (float(x) for x in durations[c])
        if svc < 0 or close < 0:
            raise ValueError("durations must be non-negative")
        weights[c] = float(shares[c]) * (svc + close)
    total = sum(weights.values())
    if not total > 0:
        raise ValueError("all class time is zero")
    return weights["sab"] / total


def sab_cost(waste: float, annual_wage: float) -> float:
    """Yearly cost per agent of the wasted capacity."""
    if waste < 0 or annual_wage < 0:
        raise ValueError("inputs must be non-negative")
    return waste * annual_wage


# ---------------------------------------------------------------------------
# Scenario report
# ---------------------------------------------------------------------------

SCENARIO_LAMBDA = 594.79
SCENARIO_AGENTS = 134.69
SCENARIO_CONCURRENCY = 3.98
# Figures quoted for comparison only.
SCENARIO_QUOTED = {"p_wait_current": 0.99, "p_abandon_writing_allowed": 0.172, "p_abandon_no_writing": 0.467,
                   "extra_servers_needed": 22, "plus14_p_wait": 0.55, "plus14_p_abandon": 0.03,
                   "plus16_p_wait": 0.40, "plus16_p_abandon": 0.018}


def scenario_candidates() -> dict[str, tuple[float, float]]:
    """Candidate ``(mu, theta)`` per hour built from the reference durations."""
    svc_sr = REFERENCE_DURATIONS["sr"][0]
    cycle_sr = sum(REFERENCE_DURATIONS["sr"])
    theta_pat = 60.0 / 81.1
    return {
        "service_only": (60.0 / svc_sr, theta_pat),
        "service_plus_closure": (60.0 / cycle_sr, theta_pat),
    }


def scenario_report(extra_servers: tuple[int, ...] = (0, 14, 16, 22),
                    candidates: Mapping[str, tuple[float, float]] | None = None,
                    target_abandon: float = 0.03) -> dict[str, Any]:
    """Erlang-A figures for the large-scale scenario under candidate inputs.

    The effective server count is ``agents * concurrency`` rounded to an
    integer; the rounding is reported alongside.
    """
    raw_n = SCENARIO_AGENTS * SCENARIO_CONCURRENCY
    n0 = int(round(raw_n))
    cands = dict(candidates or scenario_candidates())
    rows = []
    for name, (mu, theta) in cands.items():
        for extra in extra_servers:
            out = erlang_a(ErlangAInput(SCENARIO_LAMBDA, mu, theta, n0 + extra))
            rows.append({"candidate": name, "mu_per_hour": mu, "theta_per_hour": theta,
                         "n": n0 + extra, "extra": extra, **out.to_dict()})
        try:
            need = staffing_search(SCENARIO_LAMBDA, mu, theta, max_abandon=target_abandon)
            rows.append({"candidate": name, "staffing_target_abandon": target_abandon,
                         "n_needed": need.n, "extra_needed": need.n - n0})
        except ValueError as exc:
            rows.append({"candidate": name, "staffing_error": str(exc)})
    return {"lambda_per_hour": SCENARIO_LAMBDA, "effective_servers_raw": raw_n,
            "effective_servers": n0, "quoted": dict(SCENARIO_QUOTED), "rows": rows}

