"""Closed-form benchmark estimators of patience and virtual-wait rates.

Both methods need every ``M=0`` observation resolved to an effective
``(Y, Delta)`` pair first; :class:`UsabPolicy` does that.

Method 1 (abandonment count over exposure)::

    theta = sum Y Delta / sum U,        gamma = sum (1 - Delta) / sum U

Method 2 (served customers as the complement)::

    theta = sum (1 - Delta) / sum U (1 - Delta) - (n - sum Y Delta) / sum U
    gamma = (n - sum Y Delta) / sum U
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from .core import Dataset, DegenerateDataError, rate_to_unit

DEFAULT_THRESHOLD = 0.47


@dataclass(frozen=True)
class UsabPolicy:
    """How the ambiguous ``M=0`` observations are resolved.

    ``as_served``: served (Y=0, Delta=0). ``as_abandoned``: explicit abandonment
    (Y=1, Delta=1). ``as_sab``: silent abandonment (Y=0, Delta=1).
    ``from_labels``: silent abandonment where ``labels`` is true, served
    otherwise. ``from_scores``: as ``from_labels`` with
    ``labels = scores >= threshold``.
    """

    kind: str
    labels: np.ndarray | None = None
    scores: np.ndarray | None = None
    threshold: float = DEFAULT_THRESHOLD

    KINDS = ("as_served", "as_abandoned", "as_sab", "from_labels", "from_scores")

    def __post_init__(self) -> None:
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown policy {self.kind!r}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        if self.kind == "from_labels" and self.labels is None:
            raise ValueError("from_labels needs a label array")
        if self.kind == "from_scores" and self.scores is None:
            raise ValueError("from_scores needs a score array")

    @classmethod
    def from_labels(cls, labels: Any) -> UsabPolicy:
        return cls("from_labels", labels=np.asarray(labels, dtype=bool))

    @classmethod
    def from_scores(cls, scores: Any, threshold: float = DEFAULT_THRESHOLD) -> UsabPolicy:
        return cls("from_scores", scores=np.asarray(scores, dtype=float), threshold=threshold)

    def sab_mask(self, dataset: Dataset) -> np.ndarray:
        """Which ``M=0`` observations are treated as silent abandonment."""
        mask0 = dataset.m == 0
        if self.kind in ("from_labels", "from_scores"):
            arr = self.labels if self.kind == "from_labels" else self.scores
            arr = np.asarray(arr).reshape(-1)
            if arr.size != dataset.n:
                raise ValueError("policy map must have one entry per observation")
            if self.kind == "from_labels":
                chosen = arr.astype(bool)
            else:
                scores = arr.astype(float)
                if np.any(mask0 & ~np.isfinite(scores)):
                    bad = int(np.flatnonzero(mask0 & ~np.isfinite(scores))[0])
                    raise ValueError(f"score map does not cover M=0 observation {bad}")
                chosen = scores >= self.threshold
            return mask0 & chosen
        if self.kind == "as_sab":
            return mask0
        return np.zeros(dataset.n, dtype=bool)

    def resolve(self, dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
        """Effective ``(Y, Delta)`` arrays after resolving ``M=0``."""
        y = dataset.y.copy()
        delta = (dataset.delta == 1).astype(bool)
        mask0 = dataset.m == 0
        if self.kind == "as_abandoned":
            y[mask0] = True
            delta[mask0] = True
        else:
            delta |= self.sab_mask(dataset)
        return y, delta


AS_SERVED = UsabPolicy("as_served")
AS_ABANDONED = UsabPolicy("as_abandoned")
AS_SAB = UsabPolicy("as_sab")


@dataclass(frozen=True)
class RateEstimate:
    """Closed-form estimate; rates are per minute."""

    theta: float
    gamma: float
    method: str
    policy: str
    degenerate: bool = False
    flags: tuple[str, ...] = ()

    @property
    def mean_patience(self) -> float:
        return math.inf if self.theta == 0 else 1.0 / self.theta

    def params(self) -> dict[str, float]:
        return {"theta": self.theta, "gamma": self.gamma}

    def rates_in(self, unit: str) -> dict[str, float]:
        return {"theta": rate_to_unit(self.theta, unit), "gamma": rate_to_unit(self.gamma, unit)}


def _policy(policy: UsabPolicy | str) -> UsabPolicy:
    return UsabPolicy(policy) if isinstance(policy, str) else policy


def method1(dataset: Dataset, policy: UsabPolicy | str = AS_SERVED) -> RateEstimate:
    """Abandonments per unit exposure; ``M=0`` treated as served or abandoned."""
    policy = _policy(policy)
    if policy.kind not in ("as_served", "as_abandoned"):
        raise ValueError("method1 accepts only the as_served and as_abandoned policies")
    if dataset.n == 0:
        raise DegenerateDataError("dataset is empty")
    y, delta = policy.resolve(dataset)
    su = float(np.sum(dataset.u))
    if not su > 0:
        raise DegenerateDataError("sum of observed times is zero")
    theta = float(np.sum(y & delta)) / su
    gamma = float(np.sum(~delta)) / su
    return RateEstimate(theta, gamma, "m1", policy.kind)


def method2(dataset: Dataset, policy: UsabPolicy | str = AS_SERVED) -> RateEstimate:
    """Served customers as the complement; negative patience rates clamp to 0."""
    policy = _policy(policy)
    if policy.kind == "as_abandoned":
        raise ValueError("method2 does not accept the as_abandoned policy")
    if dataset.n == 0:
        raise DegenerateDataError("dataset is empty")
    y, delta = policy.resolve(dataset)
    u = dataset.u
    su = float(np.sum(u))
    if not su > 0:
        raise DegenerateDataError("sum of observed times is zero")
    n_served = int(np.sum(~delta))
    su_served = float(np.sum(u[~delta]))
    not_known = dataset.n - int(np.sum(y & delta))
    gamma = not_known / su
    flags: tuple[str, ...] = ()
    if n_served == 0:
        # No served observations: the first term is absent.
        theta = -gamma
    elif not su_served > 0:
        raise DegenerateDataError("served observations have zero total time")
    else:
        theta = n_served / su_served - gamma
    if theta < 0:
        flags = ("theta_clamped",)
        theta = 0.0
    return RateEstimate(theta, gamma, "m2", policy.kind, bool(flags), flags)
