"""Domain types and event-log ingestion.

A customer's record is reduced to a censored triple ``(u, y, delta)``:

* ``u``     observed time in queue (stored in minutes),
* ``y``     whether the customer explicitly signalled abandonment,
* ``delta`` abandonment outcome, ``None`` when it cannot be told from metadata.

The combination determines the weight class ``M``: 2 for known
abandonment (Kab), 1 for served (Sr) and 0 for the ambiguous group (uSab)
in which silent abandoners (Sab) and one-exchange served customers (Sr1)
cannot be told apart.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import logging
import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MINUTES_PER_UNIT = {"minutes": 1.0, "hours": 60.0}
UNIT_ALIASES = {"min": "minutes", "minutes": "minutes", "m": "minutes",
                "hr": "hours", "hours": "hours", "h": "hours"}

# Codes used in Dataset.delta.
DELTA_MISSING = -1


class DataError(ValueError):
    """Raised for inputs that violate the data model."""


class DegenerateDataError(DataError):
    """Raised when an estimator's closed form is undefined for the data."""


def normalize_unit(unit: str) -> str:
    try:
        return UNIT_ALIASES[unit.lower()]
    except KeyError:
        raise DataError(f"unknown time unit {unit!r}; use minutes or hours") from None


def rate_to_unit(rate_per_minute: float, unit: str) -> float:
    """Convert a per-minute rate to a per-``unit`` rate."""
    return rate_per_minute * MINUTES_PER_UNIT[normalize_unit(unit)]


def rate_from_unit(rate: float, unit: str) -> float:
    """Convert a per-``unit`` rate to a per-minute rate."""
    return rate / MINUTES_PER_UNIT[normalize_unit(unit)]


# ---------------------------------------------------------------------------
# Event log
# ---------------------------------------------------------------------------


class EventKind(str, enum.Enum):
    ENTER_QUEUE = "enter_queue"
    CUSTOMER_MESSAGE = "customer_message"
    AGENT_MESSAGE = "agent_message"
    AGENT_ASSIGNED = "agent_assigned"
    CLOSE = "close"


class Closer(str, enum.Enum):
    CUSTOMER = "customer"
    AGENT = "agent"
    SYSTEM = "system"
    MANAGER = "manager"


@dataclass(frozen=True)
class ConversationEvent:
    """One record of the conversation event log.

    ``t`` is absolute time in integer epoch milliseconds.
    """

    conversation_id: str
    kind: EventKind
    t: int
    closer: Closer | None = None
    n_words: int | None = None
    n_chars: int | None = None

    def __post_init__(self) -> None:
        if (self.kind is EventKind.CLOSE) != (self.closer is not None):
            raise DataError("closer must be present exactly on close events")
        for name in ("n_words", "n_chars"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise DataError(f"{name} must be non-negative")

    @classmethod
    def from_mapping(cls, record: Mapping[str, Any]) -> ConversationEvent:
        missing = {"conversation_id", "kind", "t"} - set(record)
        if missing:
            raise DataError(f"missing field(s): {', '.join(sorted(missing))}")
        t = record["t"]
        if isinstance(t, bool) or not isinstance(t, int):
            raise DataError(f"t must be integer epoch milliseconds, got {t!r}")
        closer = record.get("closer")
        return cls(
            conversation_id=str(record["conversation_id"]),
            kind=EventKind(record["kind"]),
            t=t,
            closer=Closer(closer) if closer is not None else None,
            n_words=_optional_int(record.get("n_words"), "n_words"),
            n_chars=_optional_int(record.get("n_chars"), "n_chars"),
        )

    def to_mapping(self) -> dict[str, Any]:
        out: dict[str, Any] = {"conversation_id": self.conversation_id,
                               "kind": self.kind.value, "t": self.t}
        if self.closer is not None:
            out["closer"] = self.closer.value
        if self.n_words is not None:
            out["n_words"] = self.n_words
        if self.n_chars is not None:
            out["n_chars"] = self.n_chars
        return out


def _optional_int(value: Any, name: str) -> int | None:
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise DataError(f"{name} must be an integer, got {value!r}")
    return value


# ---------------------------------------------------------------------------
# Observations
# ---------------------------------------------------------------------------


class ClassValue(str, enum.Enum):
    SR = "Sr"
    KAB = "Kab"
    USAB = "uSab"


class SubLabel(str, enum.Enum):
    SR1 = "Sr1"
    SAB = "Sab"


@dataclass(frozen=True)
class ClassLabel:
    value: ClassValue
    sub: SubLabel | None = None

    def __post_init__(self) -> None:
        if self.sub is not None and self.value is not ClassValue.USAB:
            raise DataError("a sub-label is only meaningful for uSab")


@dataclass(frozen=True)
class ObservationTriple:
    """A single censored observation; ``u`` is in minutes."""

    u: float
    y: bool
    delta: bool | None
    covariates: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        _check_triple(self.u, self.y, self.delta)

    @property
    def weight_class(self) -> int:
        if self.delta is None:
            return 0
        return 2 if self.y else 1


def _check_triple(u: float, y: bool, delta: bool | None) -> None:
    if not (math.isfinite(u) and u > 0):
        raise DataError(f"u must be finite and positive, got {u!r}")
    if delta is None and y:
        raise DataError("an observation with y=1 must have delta=1")
    if delta is False and y:
        raise DataError("an observation with y=1 must have delta=1")
    if delta is True and not y:
        # Only Kab is ever observed with a known delta of 1.
        raise DataError("delta=1 without y=1 is not an observable combination")


class Dataset:
    """Immutable, ordered collection of observations held as arrays.

    Parameters
    ----------
    u : array_like
        Observed times, expressed in ``unit``. Stored internally in minutes.
    y : array_like of bool
        Explicit abandonment signal.
    delta : array_like
        Abandonment outcome: 1, 0, or missing (``None``, ``nan`` or -1).
    covariates : array_like, optional
        ``(n, k)`` covariate matrix.
    covariate_names : sequence of str, optional
        Column names; defaults to ``x1..xk``.
    unit : {"minutes", "hours"}
        Unit of the supplied ``u`` and the unit rates are reported in.
    """

    __slots__ = ("_u", "_y", "_delta", "_m", "_x", "_names", "_unit")

    def __init__(self, u: Any, y: Any, delta: Any, covariates: Any = None,
                 covariate_names: Sequence[str] | None = None,
                 unit: str = "minutes") -> None:
        unit = normalize_unit(unit)
        u_arr = np.asarray(u, dtype=float).reshape(-1) * MINUTES_PER_UNIT[unit]
        y_arr = np.asarray(y, dtype=bool).reshape(-1)
        d_arr = _delta_codes(delta)
        n = u_arr.size
        if y_arr.size != n or d_arr.size != n:
            raise DataError("u, y and delta must have the same length")
        if n and not (np.all(np.isfinite(u_arr)) and np.all(u_arr > 0)):
            bad = int(np.flatnonzero(~(np.isfinite(u_arr) & (u_arr > 0)))[0])
            raise DataError(f"u must be finite and positive (row {bad})")
        bad_combo = (y_arr & (d_arr != 1)) | (~y_arr & (d_arr == 1))
        if np.any(bad_combo):
            bad = int(np.flatnonzero(bad_combo)[0])
            raise DataError(f"invalid (y, delta) combination at row {bad}")

        if covariates is None:
            x = None
            names: tuple[str, ...] = tuple(covariate_names or ())
            if names:
                raise DataError("covariate_names given without covariates")
        else:
            x = np.asarray(covariates, dtype=float)
            if x.ndim == 1:
                x = x.reshape(-1, 1)
            if x.shape[0] != n:
                raise DataError("covariate rows must match observations")
            names = tuple(covariate_names) if covariate_names is not None else tuple(
                f"x{j + 1}" for j in range(x.shape[1]))
            if len(names) != x.shape[1]:
                raise DataError("covariate_names length must equal k")
            if len(set(names)) != len(names):
                raise DataError("covariate names must be unique")
            x = np.array(x, dtype=float)
            x.setflags(write=False)

        m = np.where(d_arr == DELTA_MISSING, 0, np.where(y_arr, 2, 1)).astype(np.int8)
        for arr in (u_arr, y_arr, d_arr, m):
            arr.setflags(write=False)
        self._u, self._y, self._delta, self._m = u_arr, y_arr, d_arr, m
        self._x, self._names, self._unit = x, names, unit

    # construction helpers ---------------------------------------------------

    @classmethod
    def from_triples(cls, triples: Iterable[ObservationTriple],
                     covariate_names: Sequence[str] | None = None,
                     unit: str = "minutes") -> Dataset:
        """Build from triples; their ``u`` is in minutes regardless of ``unit``."""
        triples = list(triples)
        u = np.array([t.u for t in triples], dtype=float)
        y = [t.y for t in triples]
        delta = [t.delta for t in triples]
        covs = [t.covariates for t in triples]
        if triples and all(c is not None for c in covs):
            x: Any = np.array(covs, dtype=float).reshape(len(triples), -1)
        elif any(c is not None for c in covs):
            raise DataError("either all or no observations carry covariates")
        else:
            x = None
        ds = cls(u, y, delta, x, covariate_names, "minutes")
        return ds.with_unit(unit)

    def with_unit(self, unit: str) -> Dataset:
        """Same observations, reported in another unit."""
        out = object.__new__(Dataset)
        out._u, out._y, out._delta, out._m = self._u, self._y, self._delta, self._m
        out._x, out._names, out._unit = self._x, self._names, normalize_unit(unit)
        return out

    def take(self, index: Any) -> Dataset:
        """Subset (or resample, with repeats) by integer index."""
        idx = np.asarray(index, dtype=np.intp)
        out = object.__new__(Dataset)
        out._u = _frozen(self._u[idx])
        out._y = _frozen(self._y[idx])
        out._delta = _frozen(self._delta[idx])
        out._m = _frozen(self._m[idx])
        out._x = None if self._x is None else _frozen(self._x[idx])
        out._names, out._unit = self._names, self._unit
        return out

    def with_covariates(self, covariates: Any,
                        covariate_names: Sequence[str] | None = None) -> Dataset:
        return Dataset(self._u, self._y, self.delta_values(), covariates,
                       covariate_names, "minutes").with_unit(self._unit)

    def select_covariates(self, names: Sequence[str]) -> Dataset:
        missing = [nm for nm in names if nm not in self._names]
        if missing:
            raise DataError(f"unknown covariate(s): {', '.join(missing)}")
        cols = [self._names.index(nm) for nm in names]
        x = None if not cols else self._x[:, cols]
        return Dataset(self._u, self._y, self.delta_values(), x,
                       list(names) if cols else None, "minutes").with_unit(self._unit)

    # accessors ----------------------------------------------------------------

    def __len__(self) -> int:
        return int(self._u.size)

    @property
    def n(self) -> int:
        return int(self._u.size)

    @property
    def u(self) -> np.ndarray:
        """Observed times in minutes."""
        return self._u

    @property
    def u_native(self) -> np.ndarray:
        """Observed times in the dataset's unit."""
        return self._u / MINUTES_PER_UNIT[self._unit]

    @property
    def y(self) -> np.ndarray:
        return self._y

    @property
    def delta(self) -> np.ndarray:
        """Delta codes: 1, 0, or -1 for missing."""
        return self._delta

    @property
    def m(self) -> np.ndarray:
        """Weight class M per observation."""
        return self._m

    @property
    def covariates(self) -> np.ndarray | None:
        return self._x

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return self._names

    @property
    def k(self) -> int:
        return len(self._names)

    @property
    def unit(self) -> str:
        return self._unit

    def delta_values(self) -> list[bool | None]:
        return [None if d == DELTA_MISSING else bool(d) for d in self._delta]

    def counts(self) -> dict[str, int]:
        return {"n": self.n, "sr": int(np.sum(self._m == 1)),
                "kab": int(np.sum(self._m == 2)), "usab": int(np.sum(self._m == 0))}

    @property
    def observations(self) -> tuple[ObservationTriple, ...]:
        return tuple(self)

    def __iter__(self) -> Iterator[ObservationTriple]:
        for i in range(self.n):
            d = self._delta[i]
            cov = None if self._x is None else tuple(float(v) for v in self._x[i])
            yield ObservationTriple(float(self._u[i]), bool(self._y[i]),
                                    None if d == DELTA_MISSING else bool(d), cov)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        same_x = (self._x is None and other._x is None) or (
            self._x is not None and other._x is not None
            and np.array_equal(self._x, other._x))
        return (np.array_equal(self._u, other._u) and np.array_equal(self._y, other._y)
                and np.array_equal(self._delta, other._delta) and same_x
                and self._names == other._names and self._unit == other._unit)

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        c = self.counts()
        return (f"Dataset(n={c['n']}, sr={c['sr']}, kab={c['kab']}, "
                f"usab={c['usab']}, k={self.k}, unit={self._unit!r})")

    def digest(self) -> str:
        """SHA-256 content hash of the observations (unit-independent)."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self._u).tobytes())
        h.update(np.ascontiguousarray(self._y).tobytes())
        h.update(np.ascontiguousarray(self._delta).tobytes())
        if self._x is not None:
            h.update(json.dumps(self._names).encode())
            h.update(np.ascontiguousarray(self._x).tobytes())
        return h.hexdigest()


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _delta_codes(delta: Any) -> np.ndarray:
    if isinstance(delta, np.ndarray) and delta.dtype.kind in "iu":
        codes = delta.astype(np.int8).reshape(-1)
    else:
        values = list(np.asarray(delta, dtype=object).reshape(-1))
        codes = np.empty(len(values), dtype=np.int8)
        for i, v in enumerate(values):
            if v is None or (isinstance(v, float) and math.isnan(v)):
                codes[i] = DELTA_MISSING
            else:
                codes[i] = DELTA_MISSING if int(v) == DELTA_MISSING else int(bool(v))
    if np.any((codes != 0) & (codes != 1) & (codes != DELTA_MISSING)):
        raise DataError("delta must be 0, 1 or missing")
    return codes.copy()


# ---------------------------------------------------------------------------
# Class derivation
# ---------------------------------------------------------------------------

QUEUE_COVARIATES = ("queue_words", "queue_chars")


@dataclass(frozen=True)
class DerivedConversation:
    conversation_id: str
    label: ClassLabel
    triple: ObservationTriple
    silent_throughout: bool = False


def derive_class(events: Sequence[ConversationEvent]) -> tuple[ClassLabel, ObservationTriple]:
    """Classify one conversation and build its observation triple.

    The triple carries two covariates, the customer's word and character
    counts written while waiting (see ``QUEUE_COVARIATES``).

    Raises
    ------
    DataError
        If the log is malformed or yields a non-positive observed time.
    """
    derived = _derive(events)
    return derived.label, derived.triple


def _derive(events: Sequence[ConversationEvent]) -> DerivedConversation:
    if not events:
        raise DataError("empty conversation")
    cid = events[0].conversation_id
    if any(e.conversation_id != cid for e in events):
        raise DataError("events belong to more than one conversation")
    ordered = sorted(events, key=lambda e: e.t)
    kinds = [e.kind for e in ordered]
    if kinds.count(EventKind.ENTER_QUEUE) != 1:
        raise DataError("conversation must have exactly one enter_queue event")
    if kinds.count(EventKind.CLOSE) > 1:
        raise DataError("conversation has more than one close event")
    if kinds.count(EventKind.AGENT_ASSIGNED) > 1:
        raise DataError("conversation has more than one agent_assigned event")

    enter_pos = kinds.index(EventKind.ENTER_QUEUE)
    enter = ordered[enter_pos]
    assign_pos = kinds.index(EventKind.AGENT_ASSIGNED) if EventKind.AGENT_ASSIGNED in kinds else None
    close_pos = kinds.index(EventKind.CLOSE) if EventKind.CLOSE in kinds else None

    customer_closed_first = (
        close_pos is not None
        and ordered[close_pos].closer is Closer.CUSTOMER
        and (assign_pos is None or close_pos < assign_pos)
    )
    end_of_queue = close_pos if customer_closed_first else assign_pos
    if end_of_queue is None:
        raise DataError("conversation was neither served nor closed by the customer")

    in_queue = [e for e in ordered[:end_of_queue] if e.kind is EventKind.CUSTOMER_MESSAGE]
    covs = (float(sum(e.n_words or 0 for e in in_queue)),
            float(sum(e.n_chars or 0 for e in in_queue)))
    u = (ordered[end_of_queue].t - enter.t) / 60000.0
    if not u > 0:
        raise DataError(f"non-positive observed time ({u} min)")

    if customer_closed_first:
        return DerivedConversation(cid, ClassLabel(ClassValue.KAB),
                                   ObservationTriple(u, True, True, covs))
    after = ordered[assign_pos + 1:]
    replied = any(e.kind is EventKind.CUSTOMER_MESSAGE for e in after)
    if replied:
        return DerivedConversation(cid, ClassLabel(ClassValue.SR),
                                   ObservationTriple(u, False, False, covs))
    silent = not any(e.kind is EventKind.CUSTOMER_MESSAGE for e in ordered)
    return DerivedConversation(cid, ClassLabel(ClassValue.USAB),
                               ObservationTriple(u, False, None, covs), silent)


@dataclass
class IngestReport:
    """Tally of what happened to every record and conversation."""

    conversations: int = 0
    accepted: int = 0
    parse_errors: list[tuple[int, str]] = field(default_factory=list)
    rejected: list[tuple[str, str]] = field(default_factory=list)
    silent_throughout: list[str] = field(default_factory=list)
    labels: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "conversations": self.conversations,
            "accepted": self.accepted,
            "parse_errors": [{"line": ln, "error": msg} for ln, msg in self.parse_errors],
            "rejected": [{"conversation_id": c, "reason": r} for c, r in self.rejected],
            "silent_throughout": list(self.silent_throughout),
        }


@dataclass(frozen=True)
class IngestResult:
    dataset: Dataset
    report: IngestReport
    conversation_ids: tuple[str, ...]


def build_dataset(records: Iterable[str | Mapping[str, Any] | ConversationEvent],
                  unit: str = "minutes") -> IngestResult:
    """Group an event stream by conversation and derive one triple each.

    ``records`` may be JSON lines, mappings or events. Unparsable records
    are reported with their 1-based line number; malformed conversations
    are counted in the rejection list.
    """
    report = IngestReport()
    groups: OrderedDict[str, list[ConversationEvent]] = OrderedDict()
    for lineno, rec in enumerate(records, start=1):
        try:
            if isinstance(rec, ConversationEvent):
                ev = rec
            elif isinstance(rec, str):
                if not rec.strip():
                    continue
                ev = ConversationEvent.from_mapping(json.loads(rec))
            else:
                ev = ConversationEvent.from_mapping(rec)
        except (ValueError, TypeError, KeyError) as exc:
            report.parse_errors.append((lineno, str(exc)))
            continue
        groups.setdefault(ev.conversation_id, []).append(ev)

    triples: list[ObservationTriple] = []
    ids: list[str] = []
    for cid, events in groups.items():
        report.conversations += 1
        try:
            derived = _derive(events)
        except DataError as exc:
            report.rejected.append((cid, str(exc)))
            continue
        triples.append(derived.triple)
        ids.append(cid)
        report.labels[cid] = derived.label.value.value
        if derived.silent_throughout:
            report.silent_throughout.append(cid)
    report.accepted = len(triples)

    if not triples:
        warnings.warn("event stream produced no observations", stacklevel=2)
        ds = Dataset(np.empty(0), np.empty(0, bool), np.empty(0, np.int8),
                     np.empty((0, len(QUEUE_COVARIATES))), QUEUE_COVARIATES).with_unit(unit)
    else:
        ds = Dataset.from_triples(triples, QUEUE_COVARIATES, unit=unit)
    if report.rejected:
        logger.info("rejected %d of %d conversations", len(report.rejected), report.conversations)
    return IngestResult(ds, report, tuple(ids))


def read_events_jsonl(path: str | Path, unit: str = "minutes") -> IngestResult:
    with open(path, encoding="utf-8") as fh:
        return build_dataset(fh, unit=unit)


# ---------------------------------------------------------------------------
# Triple CSV
# ---------------------------------------------------------------------------


def write_triples_csv(dataset: Dataset, path: str | Path | io.TextIOBase) -> None:
    """Write ``u,y,delta,x...`` with ``u`` in decimal minutes.

    Floats are written with ``repr`` so that reading back is exact.
    """
    header = ["u", "y", "delta", *dataset.covariate_names]
    own = not hasattr(path, "write")
    fh = open(path, "w", newline="", encoding="utf-8") if own else path
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        x = dataset.covariates
        for i in range(dataset.n):
            d = dataset.delta[i]
            row = [repr(float(dataset.u[i])), int(dataset.y[i]),
                   "NA" if d == DELTA_MISSING else int(d)]
            if x is not None:
                row.extend(repr(float(v)) for v in x[i])
            writer.writerow(row)
    finally:
        if own:
            fh.close()


def read_triples_csv(path: str | Path | io.TextIOBase, unit: str = "minutes",
                     covariates: Sequence[str] | None = None) -> Dataset:
    """Read a triple CSV. ``covariates`` selects columns (default: all extra)."""
    own = not hasattr(path, "read")
    fh = open(path, newline="", encoding="utf-8") if own else path
    try:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError("empty triple file") from None
        if header[:3] != ["u", "y", "delta"]:
            raise DataError("triple CSV header must start with u,y,delta")
        extra = header[3:]
        names = list(extra) if covariates is None else list(covariates)
        missing = [nm for nm in names if nm not in extra]
        if missing:
            raise DataError(f"covariate column(s) not in file: {', '.join(missing)}")
        cols = [3 + extra.index(nm) for nm in names]
        u, y, delta, rows = [], [], [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                u.append(float(rec[0]))
                y.append(_parse_bool(rec[1]))
                delta.append(None if rec[2].strip().upper() in ("NA", "") else _parse_bool(rec[2]))
                rows.append([float(rec[c]) for c in cols])
            except (ValueError, IndexError) as exc:
                raise DataError(f"line {lineno}: {exc}") from None
    finally:
        if own:
            fh.close()
    x = np.array(rows, dtype=float).reshape(len(u), len(cols)) if cols else None
    try:
        return Dataset(u, y, delta, x, names if cols else None, "minutes").with_unit(unit)
    except DataError as exc:
        raise DataError(f"invalid triple data: {exc}") from None


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true"):
        return True
    if t in ("0", "false"):
        return False
    raise ValueError(f"expected 0/1, got {text!r}")
