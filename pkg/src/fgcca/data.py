"""Sparse irregular longitudinal observations and their CSV format.

The on-disk format is long-format UTF-8 CSV with header
``subject_id,process_id,time,value``. An optional JSON sidecar may declare
process intervals and labels::

    {"intervals": {"1": [0, 10], "2": [0, 10]}, "labels": {"1": "albumin"}}
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DuplicateObservationError,
    ParseError,
    RangeError,
    SchemaError,
    ValidationError,
)

COLUMNS = ("subject_id", "process_id", "time", "value")


@dataclass(frozen=True, eq=False)
class SparseSample:
    """Observations of one process for one subject."""

    subject_id: str
    process_id: int
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.array(self.times, dtype=np.float64).reshape(-1)
        v = np.array(self.values, dtype=np.float64).reshape(-1)
        if t.shape != v.shape:
            raise ValidationError("times and values must have equal length")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise ValidationError(
                f"subject {self.subject_id}, process {self.process_id}: "
                "times must be strictly increasing"
            )
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
            raise ValidationError("times and values must be finite")
        t.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.times.size

    def __eq__(self, other):
        if not isinstance(other, SparseSample):
            return NotImplemented
        return (
            self.subject_id == other.subject_id
            and self.process_id == other.process_id
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True)
class Schema:
    """Declared process intervals and labels, usually read from a sidecar."""

    intervals: dict[int, tuple[float, float]] = field(default_factory=dict)
    labels: dict[int, str] = field(default_factory=dict)
    n_processes: int | None = None

    @classmethod
    def from_json(cls, path) -> "Schema":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        intervals = {int(k): (float(v[0]), float(v[1])) for k, v in raw.get("intervals", {}).items()}
        labels = {int(k): str(v) for k, v in raw.get("labels", {}).items()}
        for j, (a, b) in intervals.items():
            if not b > a:
                raise SchemaError(f"process {j}: interval [{a}, {b}] is empty")
        return cls(intervals, labels, raw.get("n_processes"))


class LongitudinalDataset:
    """Immutable collection of :class:`SparseSample` for ``N`` subjects and ``J`` processes.

    Subjects keep their first-appearance order; processes are numbered 1..J.
    """

    def __init__(
        self,
        samples: Iterable[SparseSample],
        J: int | None = None,
        intervals: dict[int, tuple[float, float]] | None = None,
        labels: dict[int, str] | None = None,
        subjects: Sequence[str] | None = None,
        require_all_processes: bool = True,
    ):
        self._samples: dict[tuple[str, int], SparseSample] = {}
        order: list[str] = []
        seen = set()
        for s in samples:
            key = (s.subject_id, s.process_id)
            if key in self._samples:
                raise DuplicateObservationError(
                    f"subject {s.subject_id}, process {s.process_id} appears twice"
                )
            self._samples[key] = s
            if s.subject_id not in seen:
                seen.add(s.subject_id)
                order.append(s.subject_id)
        if subjects is not None:
            extra = seen.difference(subjects)
            if extra:
                raise ValidationError(f"samples for undeclared subjects: {sorted(extra)[:5]}")
            order = list(dict.fromkeys(subjects))
        self.subjects: tuple[str, ...] = tuple(order)
        observed = {j for (_, j) in self._samples}
        declared = set(intervals or {})
        J = J if J is not None else max(observed | declared | {0})
        if J < 1:
            raise ValidationError("dataset has no processes")
        if any(j < 1 or j > J for j in observed | declared):
            raise ValidationError(f"process ids must lie in 1..{J}")
        self.J = int(J)
        self.labels = {j: (labels or {}).get(j, f"process_{j}") for j in range(1, self.J + 1)}

        self.intervals: dict[int, tuple[float, float]] = {}
        for j in range(1, self.J + 1):
            times = [s.times for (_, pj), s in self._samples.items() if pj == j and s.n]
            if intervals and j in intervals:
                a, b = intervals[j]
                for t in times:
                    if t[0] < a or t[-1] > b:
                        raise RangeError(f"process {j}: time outside declared interval [{a}, {b}]")
                self.intervals[j] = (float(a), float(b))
            elif times:
                allt = np.concatenate(times)
                self.intervals[j] = (float(allt.min()), float(allt.max()))
            else:
                self.intervals[j] = (math.nan, math.nan)
        if require_all_processes:
            for j in range(1, self.J + 1):
                if self.n_obs(j) == 0:
                    raise ValidationError(f"process {j} has no observation")

    @property
    def N(self) -> int:
        return len(self.subjects)

    def sample(self, subject_id: str, j: int) -> SparseSample:
        s = self._samples.get((subject_id, j))
        if s is None:
            return SparseSample(subject_id, j, np.empty(0), np.empty(0))
        return s

    def samples(self) -> list[SparseSample]:
        return [
            self._samples[(i, j)]
            for i in self.subjects
            for j in range(1, self.J + 1)
            if (i, j) in self._samples
        ]

    def n_obs(self, j: int) -> int:
        return sum(s.n for (_, pj), s in self._samples.items() if pj == j)

    def arrays(self, j: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pooled ``(subject_index, times, values)`` of process ``j``."""
        idx, ts, vs = [], [], []
        for k, i in enumerate(self.subjects):
            s = self._samples.get((i, j))
            if s is not None and s.n:
                idx.append(np.full(s.n, k))
                ts.append(s.times)
                vs.append(s.values)
        if not ts:
            return np.empty(0, dtype=int), np.empty(0), np.empty(0)
        return np.concatenate(idx), np.concatenate(ts), np.concatenate(vs)

    def subset(self, subjects: Sequence[str]) -> "LongitudinalDataset":
        keep = list(subjects)
        return LongitudinalDataset(
            [s for s in self.samples() if s.subject_id in set(keep)],
            J=self.J,
            intervals=self.intervals,
            labels=self.labels,
            subjects=keep,
            require_all_processes=False,
        )

    def __eq__(self, other):
        if not isinstance(other, LongitudinalDataset):
            return NotImplemented
        return (
            self.J == other.J
            and self.subjects == other.subjects
            and self.intervals == other.intervals
            and self.samples() == other.samples()
        )


def _parse_float(text: str, what: str, line: int) -> float:
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise ParseError(f"non-numeric {what} {text!r}", line=line) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite {what} {text!r}", line=line)
    return v


def load_csv(
    path,
    schema: Schema | None = None,
    require_all_processes: bool = True,
) -> LongitudinalDataset:
    """Read a long-format CSV into a :class:`LongitudinalDataset`.

    Rows may come in any order; times are sorted per subject and process.
    A repeated ``(subject, process, time)`` triple is rejected.
    """
    schema = schema or Schema()
    groups: dict[tuple[str, int], list[tuple[float, float, int]]] = {}
    order: list[str] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"missing column(s): {', '.join(missing)}")
        for line, row in enumerate(reader, start=2):
            sid = (row["subject_id"] or "").strip()
            if not sid:
                raise ParseError("empty subject_id", line=line)
            try:
                pid = int(row["process_id"])
            except (TypeError, ValueError):
                raise ParseError(f"non-integer process_id {row['process_id']!r}", line=line) from None
            if pid < 1:
                raise ParseError(f"process_id must be >= 1, got {pid}", line=line)
            t = _parse_float(row["time"], "time", line)
            v = _parse_float(row["value"], "value", line)
            if pid in schema.intervals:
                a, b = schema.intervals[pid]
                if not a <= t <= b:
                    raise RangeError(f"line {line}: time {t} outside interval [{a}, {b}] of process {pid}")
            if sid not in seen:
                seen.add(sid)
                order.append(sid)
            groups.setdefault((sid, pid), []).append((t, v, line))

    samples = []
    for (sid, pid), rows in groups.items():
        rows.sort(key=lambda r: r[0])
        for a, b in zip(rows, rows[1:]):
            if a[0] == b[0]:
                raise DuplicateObservationError(
                    f"line {b[2]}: duplicate observation (subject {sid}, process {pid}, "
                    f"time {b[0]}) first seen on line {a[2]}"
                )
        samples.append(SparseSample(sid, pid, [r[0] for r in rows], [r[1] for r in rows]))
    return LongitudinalDataset(
        samples,
        J=schema.n_processes,
        intervals=schema.intervals or None,
        labels=schema.labels or None,
        subjects=order,
        require_all_processes=require_all_processes,
    )


def write_csv(dataset: LongitudinalDataset, path) -> None:
    """Write ``dataset`` in the canonical long format (reloads identically)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for s in dataset.samples():
            for t, v in zip(s.times, s.values):
                w.writerow((s.subject_id, s.process_id, repr(float(t)), repr(float(v))))


def write_sidecar(dataset: LongitudinalDataset, path) -> None:
    payload = {
        "n_processes": dataset.J,
        "intervals": {str(j): list(ab) for j, ab in dataset.intervals.items()},
        "labels": {str(j): lab for j, lab in dataset.labels.items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)


def summarize(dataset: LongitudinalDataset) -> list[dict]:
    """Per-process observation counts and time ranges.

    Count statistics are over subjects with at least one observation of the
    process; a process nobody observed reports zeros.
    """
    out = []
    for j in range(1, dataset.J + 1):
        counts = np.array([dataset.sample(i, j).n for i in dataset.subjects], dtype=int)
        counts = counts[counts > 0]
        _, t, _ = dataset.arrays(j)
        row = {
            "process_id": j,
            "label": dataset.labels[j],
            "n_subjects": int(counts.size),
            "n_obs": int(counts.sum()),
            "min_n": int(counts.min()) if counts.size else 0,
            "median_n": float(np.median(counts)) if counts.size else 0.0,
            "max_n": int(counts.max()) if counts.size else 0,
            "time_min": float(t.min()) if t.size else None,
            "time_max": float(t.max()) if t.size else None,
        }
        out.append(row)
    return out
