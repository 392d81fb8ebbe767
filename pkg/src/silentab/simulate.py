"""Synthetic data and the estimator-validation harness.

Each simulated customer draws patience ``tau ~ exp(theta)``, virtual wait
``W ~ exp(gamma)`` and signal ``Y ~ Bernoulli(q)``. If ``tau <= W`` the
customer abandons: known (``M=2``, ``U=tau``) when ``Y=1``, silent (``M=0``,
``U=W``) otherwise. Served customers (``U=W``) are recorded as ``M=0``
(one-exchange, Sr1) with probability ``p_sr1`` and as ``M=1`` otherwise.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .baselines import AS_ABANDONED, AS_SAB, AS_SERVED, UsabPolicy, method1, method2
from .core import Dataset, rate_from_unit, rate_to_unit
from .em import EmInit, fit_em

logger = logging.getLogger(__name__)

# Ground-truth class codes.
SR, SR1, KAB, SAB = 0, 1, 2, 3
CLASS_NAMES = {SR: "Sr", SR1: "Sr1", KAB: "Kab", SAB: "Sab"}

ESTIMATORS = ("EM", "M1-Sr", "M1-Ab", "M2-Sr", "M2-Sab", "M2-SVM")
SVM_SENSITIVITY = 0.85
SVM_SPECIFICITY = 0.76


@dataclass(frozen=True)
class SimConfig:
    """Generator parameters. ``theta`` and ``gamma`` are per ``unit``.

    ``sr1_coupled=True`` records a served customer as ``M=0`` exactly when
    its own signal draw is ``Y=0``, so that ``p_sr1 = 1 - q``.
    """

    theta: float
    gamma: float
    q: float
    n: int = 2000
    replications: int = 200
    p_sr1: float = 0.0
    seed: int = 0
    unit: str = "hours"
    sr1_coupled: bool = False

    def __post_init__(self) -> None:
        if not (self.theta > 0 and self.gamma > 0):
            raise ValueError("rates must be positive")
        if not (0.0 <= self.q <= 1.0 and 0.0 <= self.p_sr1 <= 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.n < 1 or self.replications < 1:
            raise ValueError("n and replications must be at least 1")

    @property
    def effective_p_sr1(self) -> float:
        return 1.0 - self.q if self.sr1_coupled else self.p_sr1

    @property
    def p_sab(self) -> float:
        return self.theta / (self.theta + self.gamma) * (1.0 - self.q)

    def label(self) -> str:
        return f"theta={self.theta:g},gamma={self.gamma:g},q={self.q:g}"


@dataclass(frozen=True)
class SimulatedSample:
    dataset: Dataset
    true_class: np.ndarray
    tau: np.ndarray
    w: np.ndarray

    @property
    def sab(self) -> np.ndarray:
        return self.true_class == SAB

    @property
    def sr1(self) -> np.ndarray:
        return self.true_class == SR1


def gen_dataset(config: SimConfig, rng: np.random.Generator | int | None = None) -> SimulatedSample:
    """Draw one sample of ``config.n`` observations (``u`` stored in minutes)."""
    rng = np.random.default_rng(config.seed if rng is None else rng)
    n = config.n
    theta = rate_from_unit(config.theta, config.unit)
    gamma = rate_from_unit(config.gamma, config.unit)
    tau = rng.exponential(1.0 / theta, n)
    w = rng.exponential(1.0 / gamma, n)
    y = rng.random(n) < config.q
    silent_draw = rng.random(n) < config.p_sr1
    abandon = tau <= w
    to_m0 = ~y if config.sr1_coupled else silent_draw

    cls = np.full(n, SR, dtype=np.int8)
    cls[abandon & y] = KAB
    cls[abandon & ~y] = SAB
    cls[~abandon & to_m0] = SR1
    u = np.where(cls == KAB, tau, w)
    delta = np.where(cls == KAB, 1, np.where((cls == SAB) | (cls == SR1), -1, 0)).astype(np.int8)
    ds = Dataset(u, cls == KAB, delta, unit="minutes").with_unit(config.unit)
    return SimulatedSample(ds, cls, tau, w)


def misclassified_labels(sample: SimulatedSample, rng: np.random.Generator,
                         sensitivity: float = SVM_SENSITIVITY,
                         specificity: float = SVM_SPECIFICITY) -> np.ndarray:
    """Noisy silent-abandonment labels for the ``M=0`` observations.

    Each true Sab is labelled Sab with probability ``sensitivity``; each Sr1
    is labelled Sr1 with probability ``specificity``; draws are independent.
    """
    draw = rng.random(sample.dataset.n)
    labels = np.zeros(sample.dataset.n, dtype=bool)
    labels[sample.sab] = draw[sample.sab] < sensitivity
    labels[sample.sr1] = draw[sample.sr1] >= specificity
    return labels


# ---------------------------------------------------------------------------
# Estimator registry
# ---------------------------------------------------------------------------


def run_estimators(sample: SimulatedSample, estimators: Sequence[str], rng: np.random.Generator,
                   fits_per_sample: int = 1, epsilon: float = 1e-6,
                   max_iter: int = 10000) -> dict[str, tuple[float, float, float]]:
    """Apply each named estimator; returns per-minute ``(theta, gamma, q)``.

    ``q`` is ``nan`` for the closed-form methods. With ``fits_per_sample > 1``
    the EM estimate is the average over that many random initializations.
    """
    ds = sample.dataset
    out: dict[str, tuple[float, float, float]] = {}
    for name in estimators:
        if name == "EM":
            fits = [fit_em(ds, EmInit("random"), epsilon, max_iter, seed=rng,
                           record_trace=False, keep_weights=False)
                    for _ in range(fits_per_sample)]
            out[name] = (float(np.mean([f.theta for f in fits])),
                         float(np.mean([f.gamma for f in fits])),
                         float(np.mean([f.q for f in fits])))
            continue
        if name == "M1-Sr":
            est = method1(ds, AS_SERVED)
        elif name == "M1-Ab":
            est = method1(ds, AS_ABANDONED)
        elif name == "M2-Sr":
            est = method2(ds, AS_SERVED)
        elif name == "M2-Sab":
            est = method2(ds, AS_SAB)
        elif name == "M2-SVM":
            est = method2(ds, UsabPolicy.from_labels(misclassified_labels(sample, rng)))
        else:
            raise ValueError(f"unknown estimator {name!r}")
        out[name] = (est.theta, est.gamma, math.nan)
    return out


# ---------------------------------------------------------------------------
# Accuracy benchmark
# ---------------------------------------------------------------------------


def table_ec3_grid(n: int = 2000, samples: int = 200, seed: int = 0,
                   sr1_coupled: bool = True) -> list[SimConfig]:
    """The 14 validation cells: q from 1.0 to 0.1 at (4, 10), then four lower gammas."""
    cells = [(4.0, 10.0, q) for q in (1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1)]
    cells += [(4.0, g, 0.1) for g in (9.0, 7.0, 5.0, 4.1)]
    return [SimConfig(t, g, q, n=n, replications=samples, seed=seed, unit="hours",
                      sr1_coupled=sr1_coupled) for t, g, q in cells]


@dataclass(frozen=True)
class ParamSummary:
    mean: float
    sd: float
    ci_low: float
    ci_high: float
    mse: float
    bias: float

    @classmethod
    def of(cls, values: np.ndarray, truth: float) -> ParamSummary:
        values = values[np.isfinite(values)]
        if values.size == 0:
            nan = math.nan
            return cls(nan, nan, nan, nan, nan, nan)
        mean = float(np.mean(values))
        sd = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
        half = 1.959963984540054 * sd / math.sqrt(values.size)
        return cls(mean, sd, mean - half, mean + half,
                   float(np.mean((values - truth) ** 2)), mean - truth)


@dataclass(frozen=True)
class BenchmarkRow:
    """Summary of one estimator on one grid cell; rates in ``config.unit``.

    The CI is a normal-approximation 95% interval for the mean estimate.
    """

    config: SimConfig
    estimator: str
    theta: ParamSummary
    gamma: ParamSummary
    q: ParamSummary
    p_sab: float
    n_ok: int
    n_failed: int

    def flat(self) -> dict[str, Any]:
        c = self.config
        row: dict[str, Any] = {"theta_true": c.theta, "gamma_true": c.gamma, "q_true": c.q,
                               "p_sab": round(self.p_sab, 6), "estimator": self.estimator,
                               "n": c.n, "samples": self.n_ok + self.n_failed,
                               "n_failed": self.n_failed}
        for pname in ("theta", "gamma", "q"):
            s: ParamSummary = getattr(self, pname)
            for key, val in asdict(s).items():
                row[f"{pname}_{key}"] = val
        return row


def _benchmark_task(args: tuple[SimConfig, int, int, tuple[str, ...], int, float, int]
                    ) -> tuple[int, int, dict[str, tuple[float, float, float]] | None, str]:
    config, cell, rep, estimators, fits, epsilon, max_iter = args
    ss = np.random.SeedSequence(config.seed, spawn_key=(cell, rep))
    data_rng, est_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    sample = gen_dataset(config, data_rng)
    out: dict[str, tuple[float, float, float]] = {}
    failures = []
    for name in estimators:
        try:
            out.update(run_estimators(sample, [name], est_rng, fits, epsilon, max_iter))
        except Exception as exc:  # recorded and excluded
            failures.append(f"{name}: {exc}")
            out[name] = (math.nan, math.nan, math.nan)
    return cell, rep, out, "; ".join(failures)


def _map(func: Callable[[Any], Any], tasks: list[Any], jobs: int) -> list[Any]:
    if jobs <= 1 or len(tasks) <= 1:
        return [func(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(func, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))


def run_accuracy_benchmark(grid: Sequence[SimConfig], estimators: Sequence[str] = ESTIMATORS,
                           samples: int | None = None, fits_per_sample: int = 1,
                           epsilon: float = 1e-6, max_iter: int = 10000,
                           jobs: int = 1) -> list[BenchmarkRow]:
    """Monte Carlo accuracy table.

    Every (cell, sample) pair gets its own RNG stream derived from
    ``(config.seed, cell, sample)``, so results do not depend on ``jobs``.
    """
    estimators = tuple(estimators)
    for name in estimators:
        if name not in ESTIMATORS:
            raise ValueError(f"unknown estimator {name!r}")
    tasks = []
    for cell, config in enumerate(grid):
        reps = samples if samples is not None else config.replications
        tasks.extend((config, cell, rep, estimators, fits_per_sample, epsilon, max_iter)
                     for rep in range(reps))
    results = _map(_benchmark_task, tasks, jobs)

    per_cell: dict[int, list[dict[str, tuple[float, float, float]]]] = {}
    for cell, _rep, out, failure in sorted(results, key=lambda r: (r[0], r[1])):
        if failure:
            logger.warning("cell %d: %s", cell, failure)
        per_cell.setdefault(cell, []).append(out)

    rows = []
    for cell, config in enumerate(grid):
        outs = per_cell.get(cell, [])
        scale = rate_to_unit(1.0, config.unit)
        for name in estimators:
            vals = np.array([o[name] for o in outs], dtype=float).reshape(-1, 3)
            ok = np.all(np.isfinite(vals[:, :2]), axis=1)
            th = vals[ok, 0] * scale
            ga = vals[ok, 1] * scale
            qq = vals[ok, 2]
            rows.append(BenchmarkRow(config, name, ParamSummary.of(th, config.theta),
                                     ParamSummary.of(ga, config.gamma),
                                     ParamSummary.of(qq, config.q), config.p_sab,
                                     int(ok.sum()), int((~ok).sum())))
    return rows


def write_benchmark_csv(rows: Iterable[BenchmarkRow], path: str | os.PathLike[str]) -> None:
    rows = list(rows)
    flat = [r.flat() for r in rows]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(flat[0]) if flat else [], lineterminator="\n")
        writer.writeheader()
        writer.writerows(flat)


def write_plot_data(rows: Iterable[BenchmarkRow], path: str | os.PathLike[str]) -> None:
    """MSE series per estimator against the silent-abandonment share."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["p_sab", "estimator", "mse_theta", "mse_gamma", "mse_q"])
        for r in rows:
            writer.writerow([repr(round(r.p_sab, 6)), r.estimator, repr(r.theta.mse),
                             repr(r.gamma.mse), "" if math.isnan(r.q.mse) else repr(r.q.mse)])


# ---------------------------------------------------------------------------
# Sensitivity to initialization
# ---------------------------------------------------------------------------

SENSITIVITY_VARIANTS = ("all-sab", "all-sr", "half", "classifier")


@dataclass(frozen=True)
class SensitivityResult:
    """Per-variant mean estimates (rates in ``config.unit``)."""

    config: SimConfig
    means: dict[str, dict[str, float]]
    per_sample: dict[str, np.ndarray]

    @property
    def theta_spread(self) -> float:
        vals = [m["theta"] for m in self.means.values()]
        return max(vals) - min(vals)


def _variant_init(variant: str, sample: SimulatedSample, rng: np.random.Generator,
                  sensitivity: float, specificity: float) -> EmInit:
    if variant == "classifier":
        labels = misclassified_labels(sample, rng, sensitivity, specificity)
        return EmInit.from_scores(labels.astype(float))
    return EmInit(variant)


def _sensitivity_task(args: tuple[SimConfig, int, tuple[str, ...], int, float, float, float]
                      ) -> tuple[int, np.ndarray]:
    config, rep, variants, fits, sens, spec, epsilon = args
    ss = np.random.SeedSequence(config.seed, spawn_key=(rep,))
    data_rng, est_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    sample = gen_dataset(config, data_rng)
    res = np.empty((len(variants), 3))
    for i, variant in enumerate(variants):
        fits_out = []
        for _ in range(fits):
            init = _variant_init(variant, sample, est_rng, sens, spec)
            fit = fit_em(sample.dataset, init, epsilon, seed=est_rng, record_trace=False,
                         keep_weights=False)
            fits_out.append((fit.theta, fit.gamma, fit.q))
        res[i] = np.mean(fits_out, axis=0)
    return rep, res


def run_sensitivity(config: SimConfig, variants: Sequence[str] = SENSITIVITY_VARIANTS,
                    samples: int | None = None, fits_per_sample: int = 1,
                    sensitivity: float = SVM_SENSITIVITY, specificity: float = SVM_SPECIFICITY,
                    epsilon: float = 1e-6, jobs: int = 1) -> SensitivityResult:
    """Fit every sample under each initialization variant."""
    variants = tuple(variants)
    for v in variants:
        if v != "classifier" and v not in EmInit.KINDS:
            raise ValueError(f"unknown init variant {v!r}")
    reps = samples if samples is not None else config.replications
    tasks = [(config, rep, variants, fits_per_sample, sensitivity, specificity, epsilon)
             for rep in range(reps)]
    results = sorted(_map(_sensitivity_task, tasks, jobs), key=lambda r: r[0])
    stack = np.stack([r[1] for r in results])  # (reps, variants, 3)
    scale = rate_to_unit(1.0, config.unit)
    means, per_sample = {}, {}
    for i, v in enumerate(variants):
        th, ga, qq = stack[:, i, 0] * scale, stack[:, i, 1] * scale, stack[:, i, 2]
        means[v] = {"theta": float(th.mean()), "gamma": float(ga.mean()), "q": float(qq.mean())}
        per_sample[v] = np.column_stack([th, ga, qq])
    return SensitivityResult(config, means, per_sample)


# ---------------------------------------------------------------------------
# Robustness by subsampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RobustnessResult:
    """Per-split fits against the full-data fit (rates per minute)."""

    full: tuple[float, float, float]
    splits: np.ndarray
    sizes: tuple[int, ...]

    @property
    def theta_sd(self) -> float:
        return float(np.std(self.splits[:, 0], ddof=1)) if len(self.sizes) > 1 else 0.0

    def max_theta_z(self) -> float:
        sd = self.theta_sd
        dev = np.abs(self.splits[:, 0] - self.full[0])
        return float(dev.max() / sd) if sd > 0 else 0.0


def run_robustness(dataset: Dataset, n_splits: int = 10, seed: Any = 0,
                   init: EmInit | str | None = None, epsilon: float = 1e-6) -> RobustnessResult:
    """Fit EM on the full data and on ``n_splits`` disjoint random parts."""
    if n_splits < 1:
        raise ValueError("n_splits must be at least 1")
    if dataset.n < n_splits:
        raise ValueError(f"cannot split {dataset.n} observations into {n_splits} parts")
    rng = np.random.default_rng(seed)
    init_seed = int(rng.integers(2**63))
    full = fit_em(dataset, init, epsilon, seed=init_seed, record_trace=False, keep_weights=False)
    parts = np.array_split(rng.permutation(dataset.n), n_splits)
    fits = []
    for part in parts:
        f = fit_em(dataset.take(np.sort(part)), init, epsilon, seed=init_seed,
                   record_trace=False, keep_weights=False)
        fits.append((f.theta, f.gamma, f.q))
    return RobustnessResult((full.theta, full.gamma, full.q), np.array(fits),
                            tuple(len(p) for p in parts))



# ---------------------------------------------------------------------------
# Covariate generator
# ---------------------------------------------------------------------------

# Log mean-patience (minutes) by words typed in queue: intercept, then the
# categories 2-10, 11-20, 21-30, 31-40, 41-50, 51+ (0 or 1 word is the base).
WORD_INTERCEPT = 3.613
WORD_EDGES = (1, 10, 20, 30, 40, 50)
WORD_EFFECTS = (0.756, 1.120, 1.357, 1.537, 1.654, 1.829)
BINARY_INTERCEPT = 3.44
BINARY_EFFECT = 1.05


def gen_covariate_dataset(covariates: np.ndarray, names: Sequence[str], beta0: float,
                          beta: Sequence[float], gamma: float, q: float,
                          rng: np.random.Generator | int | None = None,
                          design: np.ndarray | None = None) -> SimulatedSample:
    """Draw observations with ``E[tau] = exp(beta0 + z beta)`` minutes.

    ``z`` is ``design`` when given (for example category dummies of the
    stored covariates), else the covariates themselves. ``gamma`` is per
    minute. A customer who does not signal (prob ``1 - q``) is recorded as
    ``M=0`` whether served or abandoned.
    """
    rng = np.random.default_rng(rng)
    x = np.asarray(covariates, dtype=float)
    x = x.reshape(len(x), -1)
    z = x if design is None else np.asarray(design, dtype=float).reshape(len(x), -1)
    n = len(x)
    mean_pat = np.exp(beta0 + z @ np.asarray(beta, dtype=float))
    tau = rng.exponential(mean_pat)
    w = rng.exponential(1.0 / gamma, n)
    y = rng.random(n) < q
    abandon = tau <= w
    cls = np.full(n, SR, dtype=np.int8)
    cls[abandon & y] = KAB
    cls[abandon & ~y] = SAB
    cls[~abandon & ~y] = SR1
    u = np.where(cls == KAB, tau, w)
    delta = np.where(cls == KAB, 1, np.where(y, 0, -1)).astype(np.int8)
    ds = Dataset(u, cls == KAB, delta, x, list(names), unit="minutes")
    return SimulatedSample(ds, cls, tau, w)


def word_category_dummies(words: np.ndarray) -> np.ndarray:
    """Indicators for the six word-count categories above one word."""
    words = np.asarray(words, dtype=float)
    lows = (1,) + WORD_EDGES[1:]
    highs = WORD_EDGES[1:] + (np.inf,)
    return np.column_stack([(words > lo) & (words <= hi) for lo, hi in zip(lows, highs)]
                           ).astype(float)


def gen_words_dataset(n: int = 20000, gamma: float = 0.115, q: float = 0.5,
                      rng: np.random.Generator | int | None = None) -> SimulatedSample:
    """Queue word counts with category-level patience multipliers.

    Word counts are ``0`` or ``1`` with probability 0.4, else uniform on
    2..80. The stored covariate is the raw count ``queue_words``.
    """
    rng = np.random.default_rng(rng)
    few = rng.random(n) < 0.4
    words = np.where(few, rng.integers(0, 2, n), rng.integers(2, 81, n)).astype(float)
    return gen_covariate_dataset(words.reshape(-1, 1), ["queue_words"], WORD_INTERCEPT,
                                 WORD_EFFECTS, gamma, q, rng, design=word_category_dummies(words))


__all__ = [
    "SimConfig", "SimulatedSample", "gen_dataset", "misclassified_labels", "run_estimators",
    "table_ec3_grid", "ParamSummary", "BenchmarkRow", "run_accuracy_benchmark",
    "write_benchmark_csv", "write_plot_data", "SensitivityResult", "run_sensitivity",
    "RobustnessResult", "run_robustness", "ESTIMATORS", "SENSITIVITY_VARIANTS",
    "gen_covariate_dataset", "gen_words_dataset", "word_category_dummies",
]
