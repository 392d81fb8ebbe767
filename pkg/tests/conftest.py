"""Shared fixtures and independent oracles."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from silentab.core import Dataset

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_dataset(u, m, x=None, names=None, unit="minutes") -> Dataset:
    """Dataset from times and weight classes (0 uSab, 1 served, 2 Kab)."""
    m = np.asarray(m)
    y = m == 2
    delta = np.where(m == 2, 1, np.where(m == 1, 0, -1)).astype(np.int8)
    return Dataset(np.asarray(u, float), y, delta, x, names, unit)


def random_dataset(rng: np.random.Generator, n: int, theta: float = 0.07, gamma: float = 0.17,
                   q: float = 0.5) -> Dataset:
    """Coupled-model sample with per-minute rates; guarantees all three classes."""
    while True:
        tau = rng.exponential(1 / theta, n)
        w = rng.exponential(1 / gamma, n)
        y = rng.random(n) < q
        kab = (tau <= w) & y
        m = np.where(kab, 2, np.where(y, 1, 0))
        if len(set(m.tolist())) == 3:
            return make_dataset(np.where(kab, tau, w), m)


def fixed_point(ds: Dataset) -> tuple[float, float, float]:
    """Closed-form EM limit (theta, gamma, q), derived by substituting the E-step."""
    u, m = ds.u, ds.m
    n2 = np.sum(m == 2)
    theta = n2 / np.sum(u[m != 0])
    gamma = (ds.n - n2) / np.sum(u)
    q = n2 / (n2 + np.sum(1 - np.exp(-theta * u[m == 0])))
    return float(theta), float(gamma), float(q)


def product_loglik(ds: Dataset, theta: float, q: float, gamma: float,
                   coupled: bool = False) -> float:
    """Direct per-observation product form, written independently of the package."""
    total = 0.0
    for u, mm in zip(ds.u.tolist(), ds.m.tolist()):
        f_w = gamma * math.exp(-gamma * u)
        s_w = math.exp(-gamma * u)
        f_t = theta * math.exp(-theta * u)
        s_t = math.exp(-theta * u)
        if mm == 2:
            lik = q * f_t * s_w
        elif mm == 1:
            lik = f_w * s_t * (q if coupled else 1.0)
        elif coupled:
            lik = (1 - q) * f_w
        else:
            lik = f_w * s_t + (1 - q) * (1 - s_t) * f_w
        total += math.log(lik) if lik > 0 else -math.inf
    return total


def bisect(f, lo: float, hi: float, tol: float = 1e-10) -> float:
    """Plain bisection on a sign change; stops on a relative width ``tol``."""
    flo = f(lo)
    assert flo * f(hi) < 0
    while hi - lo > tol * max(abs(lo), abs(hi), 1e-300):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def assert_monotone(values, tol: float = 1e-9) -> None:
    diffs = np.diff(np.asarray(values, dtype=float))
    assert np.all(diffs >= -tol), f"log-likelihood fell by {-diffs.min():.3g}"


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


ACCEPTANCE: list[str] = []


def report(criterion: str, ok: bool, detail: str = "") -> None:
    """Record one acceptance line, print it, then assert."""
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}" + (f": {detail}" if detail else "")
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
