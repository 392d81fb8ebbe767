"""Conversation classifier tooling: features, ranking, scoring and thresholds.

Token columns are named ``party:token`` (for example ``agent:hello``);
columns prefixed ``meta:`` (or without a party) are metadata and are never
dropped by feature selection. Positive labels mean silent abandonment.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import re
import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .core import Dataset, DataError

logger = logging.getLogger(__name__)

METADATA_PARTY = "meta"
DEFAULT_THRESHOLD = 0.47
# Operating point reported for the reference classifier (threshold, TPR, TNR).
REFERENCE_OPERATING_POINT = {"threshold": 0.47, "sensitivity": 0.85, "specificity": 0.76}


# ---------------------------------------------------------------------------
# Feature matrices
# ---------------------------------------------------------------------------


def column_party(name: str) -> str:
    """Party tag of a column; metadata columns return ``"meta"``."""
    party, sep, _ = name.partition(":")
    return party if sep and party != METADATA_PARTY else METADATA_PARTY


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray
    columns: tuple[str, ...]
    labels: np.ndarray | None = None
    row_ids: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 2 or vals.shape[1] != len(self.columns):
            raise DataError("values must be a rows x columns matrix matching the column names")
        if len(set(self.columns)) != len(self.columns):
            raise DataError("column names must be unique")
        tokens = [j for j, c in enumerate(self.columns) if column_party(c) != METADATA_PARTY]
        if np.any(vals[:, tokens] < 0):
            raise DataError("token counts must be non-negative")
        if self.labels is not None and len(self.labels) != vals.shape[0]:
            raise DataError("label length must match the number of rows")
        if self.row_ids is not None and len(self.row_ids) != vals.shape[0]:
            raise DataError("row id length must match the number of rows")
        object.__setattr__(self, "values", vals)
        if self.labels is not None:
            object.__setattr__(self, "labels", np.asarray(self.labels, dtype=bool))

    @property
    def n_rows(self) -> int:
        return int(self.values.shape[0])

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    def subset(self, columns: Sequence[str]) -> FeatureMatrix:
        idx = [self.columns.index(c) for c in columns]
        return FeatureMatrix(self.values[:, idx], tuple(columns), self.labels, self.row_ids)

    def rows(self, index: Any) -> FeatureMatrix:
        idx = np.asarray(index, dtype=np.intp)
        ids = None if self.row_ids is None else tuple(self.row_ids[i] for i in idx)
        labels = None if self.labels is None else self.labels[idx]
        return FeatureMatrix(self.values[idx], self.columns, labels, ids)


TOKEN_RE = re.compile(r"[a-z0-9']+")


def load_stop_words(path: str | Path) -> frozenset[str]:
    """One stop word per line; blank lines and ``#`` comments ignored."""
    words = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip().lower()
            if line:
                words.add(line)
    return frozenset(words)


def tokenize(text: str, stop_words: Iterable[str] = ()) -> list[str]:
    stop = set(stop_words)
    return [t for t in TOKEN_RE.findall(text.lower()) if t not in stop]


def build_feature_matrix(messages: Iterable[tuple[str, str, str]],
                         metadata: Mapping[str, Mapping[str, float]] | None = None,
                         labels: Mapping[str, bool] | None = None,
                         stop_words: Iterable[str] = ()) -> FeatureMatrix:
    """Count tokens per ``(conversation_id, party, text)`` message.

    ``metadata`` adds ``meta:<name>`` columns per conversation, ``labels``
    attaches the class labels.
    """
    stop = frozenset(stop_words)
    counts: dict[str, Counter[str]] = {}
    for cid, party, text in messages:
        if ":" in party or party == METADATA_PARTY:
            raise DataError(f"invalid party tag {party!r}")
        bucket = counts.setdefault(cid, Counter())
        bucket.update(f"{party}:{tok}" for tok in tokenize(text, stop))
    metadata = metadata or {}
    ids = sorted(set(counts) | set(metadata))
    token_cols = sorted({c for cnt in counts.values() for c in cnt})
    meta_cols = sorted({f"{METADATA_PARTY}:{k}" for md in metadata.values() for k in md})
    cols = token_cols + meta_cols
    pos = {c: j for j, c in enumerate(cols)}
    values = np.zeros((len(ids), len(cols)))
    for i, cid in enumerate(ids):
        for c, v in counts.get(cid, {}).items():
            values[i, pos[c]] = v
        for k, v in metadata.get(cid, {}).items():
            values[i, pos[f"{METADATA_PARTY}:{k}"]] = v
    lab = None
    if labels is not None:
        missing = [cid for cid in ids if cid not in labels]
        if missing:
            raise DataError(f"no label for conversation(s): {', '.join(missing[:5])}")
        lab = np.array([bool(labels[cid]) for cid in ids])
    return FeatureMatrix(values, tuple(cols), lab, tuple(ids))


def read_feature_csv(path: str | Path, label_column: str = "label") -> FeatureMatrix:
    """Read ``conv_id,party:token,...,meta:...,label``; the label column is optional."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "conv_id":
            raise DataError("feature CSV must start with a conv_id column")
        has_label = label_column in header
        label_pos = header.index(label_column) if has_label else -1
        feat_pos = [j for j in range(1, len(header)) if j != label_pos]
        ids, rows, labels = [], [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                ids.append(rec[0])
                rows.append([float(rec[j]) for j in feat_pos])
                if has_label:
                    labels.append(rec[label_pos].strip().lower() in ("1", "true", "sab"))
            except (ValueError, IndexError) as exc:
                raise DataError(f"line {lineno}: {exc}") from None
    values = np.array(rows, dtype=float).reshape(len(ids), len(feat_pos))
    return FeatureMatrix(values, tuple(header[j] for j in feat_pos),
                         np.array(labels) if has_label else None, tuple(ids))


# ---------------------------------------------------------------------------
# Mutual information ranking
# ---------------------------------------------------------------------------


def mutual_information(feature: Any, labels: Any) -> float:
    """Plug-in mutual information (nats) between feature presence and label."""
    x = np.asarray(feature, dtype=float) > 0
    y = np.asarray(labels, dtype=bool)
    if x.size == 0 or x.size != y.size:
        raise ValueError("feature and labels must be nonempty and of equal length")
    n = x.size
    mi = 0.0
    for xv in (False, True):
        px = np.count_nonzero(x == xv) / n
        for yv in (False, True):
            joint = np.count_nonzero((x == xv) & (y == yv)) / n
            py = np.count_nonzero(y == yv) / n
            if joint > 0:
                mi += joint * math.log(joint / (px * py))
    return max(mi, 0.0)


def select_top_k(matrix: FeatureMatrix, k_per_party: int = 50) -> FeatureMatrix:
    """Keep the ``k`` most informative token columns per party plus all metadata.

    Ties in mutual information are broken by column name. The output
    order is canonical (metadata by name, then each party in name order by
    rank), so it does not depend on the input column order.
    """
    if matrix.labels is None:
        raise DataError("feature selection needs labels")
    if k_per_party < 0:
        raise ValueError("k_per_party must be non-negative")
    by_party: dict[str, list[tuple[float, str]]] = {}
    meta = []
    for j, name in enumerate(matrix.columns):
        party = column_party(name)
        if party == METADATA_PARTY:
            meta.append(name)
        else:
            mi = mutual_information(matrix.values[:, j], matrix.labels)
            by_party.setdefault(party, []).append((mi, name))
    keep = sorted(meta)
    for party in sorted(by_party):
        ranked = sorted(by_party[party], key=lambda t: (-t[0], t[1]))
        if len(ranked) < k_per_party:
            warnings.warn(f"party {party!r} has only {len(ranked)} token columns "
                          f"(k={k_per_party}); keeping all", stacklevel=2)
        elif 0 < k_per_party < len(ranked) and ranked[k_per_party - 1][0] == ranked[k_per_party][0]:
            logger.info("MI tie at rank %d for party %s: kept %s over %s", k_per_party, party,
                        ranked[k_per_party - 1][1], ranked[k_per_party][1])
        keep.extend(name for _, name in ranked[:k_per_party])
    return matrix.subset(keep)


# ---------------------------------------------------------------------------
# Scorer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScorerModel:
    """L2-regularized logistic model on standardized features."""

    columns: tuple[str, ...]
    center: np.ndarray
    scale: np.ndarray
    coef: np.ndarray
    intercept: float
    C: float
    iterations: int = 0

    def decision(self, values: np.ndarray) -> np.ndarray:
        z = (np.asarray(values, dtype=float) - self.center) / self.scale
        return z @ self.coef + self.intercept

    def score(self, features: FeatureMatrix | np.ndarray) -> np.ndarray:
        """Probability of silent abandonment per row."""
        if isinstance(features, FeatureMatrix):
            missing = [c for c in self.columns if c not in features.columns]
            if missing:
                raise DataError(f"features missing from input: {', '.join(missing[:5])}")
            values = features.subset(self.columns).values
        else:
            values = np.asarray(features, dtype=float).reshape(-1, len(self.columns))
        return expit(self.decision(values))

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "logistic-l2", "columns": list(self.columns),
                "center": self.center.tolist(), "scale": self.scale.tolist(),
                "coef": self.coef.tolist(), "intercept": self.intercept, "C": self.C,
                "iterations": self.iterations}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ScorerModel:
        if d.get("kind") != "logistic-l2":
            raise DataError("not a serialized logistic scorer")
        return cls(tuple(d["columns"]), np.array(d["center"], float), np.array(d["scale"], float),
                   np.array(d["coef"], float), float(d["intercept"]), float(d["C"]),
                   int(d.get("iterations", 0)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> ScorerModel:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def train_scorer(matrix: FeatureMatrix, C: float = 1.0, max_iter: int = 500,
                 seed: int = 0) -> ScorerModel:
    """Fit ``min 0.5 |w|^2 + C sum logloss`` by L-BFGS from a zero start.

    The fit is deterministic; ``seed`` is accepted for interface symmetry
    and recorded nowhere else. ``max_iter=0`` returns the zero model,
    which scores every row 0.5.
    """
    del seed
    if matrix.labels is None:
        raise DataError("training needs labels")
    y = matrix.labels.astype(float)
    if y.min() == y.max():
        raise DataError("training labels contain a single class")
    if C <= 0:
        raise ValueError("C must be positive")
    x = matrix.values
    center = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    z = (x - center) / scale
    p = z.shape[1]
    sign = 2.0 * y - 1.0

    def objective(params: np.ndarray) -> tuple[float, np.ndarray]:
        w, b = params[:p], params[p]
        margin = sign * (z @ w + b)
        loss = float(np.sum(np.logaddexp(0.0, -margin)))
        r = -sign * expit(-margin)
        grad = np.concatenate([w + C * (z.T @ r), [C * float(np.sum(r))]])
        return 0.5 * float(w @ w) + C * loss, grad

    params = np.zeros(p + 1)
    iterations = 0
    if max_iter > 0:
        res = minimize(objective, params, jac=True, method="L-BFGS-B",
                       options={"maxiter": max_iter, "gtol": 1e-8})
        params, iterations = res.x, int(res.nit)
    return ScorerModel(matrix.columns, center, scale, params[:p].copy(), float(params[p]), C,
                       iterations)


# ---------------------------------------------------------------------------
# ROC and thresholds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ThresholdReport:
    """ROC points ``(fpr, tpr, threshold)`` from ``(0, 0, inf)`` to ``(1, 1, min)``.

    A row is predicted positive when its score is ``>=`` the threshold.
    """

    roc: tuple[tuple[float, float, float], ...]
    auc: float
    youden_c: float
    youden_j: float
    youden_sensitivity: float
    youden_specificity: float
    f1_c: float
    f1_value: float
    error_rate: float
    f1_error_rate: float

    def to_dict(self) -> dict[str, Any]:
        out = {k: getattr(self, k) for k in ("auc", "youden_c", "youden_j", "youden_sensitivity",
                                             "youden_specificity", "f1_c", "f1_value",
                                             "error_rate", "f1_error_rate")}
        out["roc_points"] = len(self.roc)
        return out


def roc_and_thresholds(scores: Any, labels: Any) -> ThresholdReport:
    """Sweep distinct thresholds from high to low, grouping tied scores.

    Youden's index and F1 are maximized over the distinct score values;
    ties in the criterion go to the highest threshold.
    """
    s = np.asarray(scores, dtype=float).reshape(-1)
    y = np.asarray(labels, dtype=bool).reshape(-1)
    if s.size != y.size or s.size == 0:
        raise ValueError("scores and labels must be nonempty and of equal length")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    # Last index of each group of tied scores.
    ends = np.flatnonzero(np.diff(s_sorted) != 0)
    ends = np.append(ends, s.size - 1)
    tp = np.cumsum(y_sorted)[ends].astype(float)
    fp = (ends + 1 - tp).astype(float)
    thresholds = s_sorted[ends]
    tpr = tp / n_pos
    fpr = fp / n_neg
    fpr_all = np.concatenate([[0.0], fpr])
    tpr_all = np.concatenate([[0.0], tpr])
    auc = float(np.sum(np.diff(fpr_all) * (tpr_all[1:] + tpr_all[:-1]) / 2.0))

    j = tpr - fpr
    iy = int(np.argmax(j))
    fn = n_pos - tp
    f1 = 2 * tp / (2 * tp + fp + fn)
    i1 = int(np.argmax(f1))
    err = (fp + fn) / s.size
    roc = ((0.0, 0.0, math.inf),) + tuple(
        (float(a), float(b), float(c)) for a, b, c in zip(fpr, tpr, thresholds))
    return ThresholdReport(roc, auc, float(thresholds[iy]), float(j[iy]), float(tpr[iy]),
                           float(1.0 - fpr[iy]), float(thresholds[i1]), float(f1[i1]),
                           float(err[iy]), float(err[i1]))


def write_roc_csv(report: ThresholdReport, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["fpr", "tpr", "threshold"])
        for fpr, tpr, c in report.roc:
            writer.writerow([repr(fpr), repr(tpr), "inf" if math.isinf(c) else repr(c)])


# ---------------------------------------------------------------------------
# Scoring uSab observations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UsabScores:
    """Scores and hard labels for the ``M=0`` observations.

    Entries for other observations are ``nan`` / ``False``. ``errors``
    lists ``(row, message)`` for rows whose features were unusable.
    """

    scores: np.ndarray
    sab: np.ndarray
    threshold: float
    errors: tuple[tuple[int, str], ...] = ()


def classify_usab(dataset: Dataset, model: ScorerModel,
                  threshold: float = DEFAULT_THRESHOLD) -> UsabScores:
    """Score ``M=0`` observations from the dataset's covariates.

    Each model column maps to the dataset covariate of the same name. A
    row is labelled silent abandonment when its score is ``>= threshold``.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    names = dataset.covariate_names
    missing = [c for c in model.columns if c not in names]
    if missing:
        raise DataError(f"dataset lacks model feature(s): {', '.join(missing)}")
    x = dataset.covariates[:, [names.index(c) for c in model.columns]] if model.columns else \
        np.zeros((dataset.n, 0))
    mask0 = dataset.m == 0
    scores = np.full(dataset.n, math.nan)
    errors = []
    ok = mask0 & np.all(np.isfinite(x), axis=1)
    for row in np.flatnonzero(mask0 & ~ok):
        bad = [model.columns[j] for j in np.flatnonzero(~np.isfinite(x[row]))]
        errors.append((int(row), f"non-finite feature(s): {', '.join(bad)}"))
    if np.any(ok):
        scores[ok] = model.score(x[ok])
    sab = np.zeros(dataset.n, dtype=bool)
    sab[ok] = scores[ok] >= threshold
    return UsabScores(scores, sab, threshold, tuple(errors))


# ---------------------------------------------------------------------------
# Synthetic corpora
# ---------------------------------------------------------------------------


def synthetic_corpus(n: int = 400, vocab: int = 60, informative: int = 10,
                     separable: bool = False, seed: int = 0) -> FeatureMatrix:
    """Token-count matrix whose first ``informative`` agent tokens carry signal.

    With ``separable=True`` positive rows use tokens that never appear in
    negative rows, so the classes are linearly separable.
    """
    rng = np.random.default_rng(seed)
    labels = rng.random(n) < 0.5
    agent = rng.poisson(1.0, (n, vocab)).astype(float)
    customer = rng.poisson(1.0, (n, vocab)).astype(float)
    lift = rng.poisson(3.0, (n, informative)).astype(float)
    if separable:
        agent[:, :informative] = np.where(labels[:, None], lift + 1.0, 0.0)
    else:
        agent[:, :informative] += np.where(labels[:, None], lift, 0.0)
    queue_min = rng.exponential(np.where(labels, 12.0, 8.0))
    values = np.column_stack([agent, customer, queue_min])
    cols = tuple([f"agent:w{j:03d}" for j in range(vocab)]
                 + [f"customer:w{j:03d}" for j in range(vocab)] + ["meta:queue_minutes"])
    return FeatureMatrix(values, cols, labels, tuple(f"c{i:05d}" for i in range(n)))
