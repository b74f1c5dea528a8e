"""Longitudinal trial data: storage, CSV round trip and the estimation view.

A dataset holds ``n`` participants observed on a regular grid of ``K`` time
points (``time = 0`` is baseline). Time-varying quantities are stored as
``(n, K)`` arrays; absent values are NaN and an explicit ``missing`` mask marks
visits whose outcome or confounders were not recorded.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


class DataError(ValueError):
    """Malformed input data."""


@dataclass(frozen=True)
class Observation:
    participant_id: str
    time: int
    y: float
    z: tuple[float, ...]
    b: float | None
    d: int | None
    c: int | None
    missing: bool


@dataclass(frozen=True)
class Participant:
    id: str
    arm: str
    x: tuple[float, ...]
    observations: tuple[Observation, ...]


def _id_key(pid: str):
    return (0, int(pid), "") if pid.lstrip("-").isdigit() else (1, 0, pid)


@dataclass(frozen=True, eq=False)
class LongitudinalDataset:
    """Participants x time points, sorted by participant id.

    ``b`` and ``d`` are NaN at baseline; ``c`` is ``None`` when true compliance
    is unknown (it is only available for simulated data).
    """

    ids: np.ndarray
    arm: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    b: np.ndarray
    d: np.ndarray
    c: np.ndarray | None = None
    missing: np.ndarray | None = None
    z_names: tuple[str, ...] = ("z",)
    x_names: tuple[str, ...] = ("x",)
    z_bounds: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        ids = np.asarray([str(i) for i in self.ids], dtype=object)
        order = sorted(range(ids.size), key=lambda k: _id_key(ids[k]))
        if len(set(ids)) != ids.size:
            raise DataError("participant ids are not unique")
        order = np.asarray(order, dtype=int)
        y = np.asarray(self.y, dtype=float)
        n, K = y.shape
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 2:
            z = z[:, :, None]
        x = np.asarray(self.x, dtype=float).reshape(n, -1)
        arrays = dict(
            ids=ids, arm=np.asarray([str(a) for a in self.arm], dtype=object), x=x, y=y, z=z,
            b=np.asarray(self.b, dtype=float), d=np.asarray(self.d, dtype=float),
        )
        if self.c is not None:
            arrays["c"] = np.asarray(self.c, dtype=float)
        miss = self.missing
        if miss is None:
            miss = np.isnan(y) | np.isnan(z).any(axis=2)
            miss[:, 1:] |= np.isnan(arrays["b"][:, 1:]) | np.isnan(arrays["d"][:, 1:])
        arrays["missing"] = np.asarray(miss, dtype=bool)
        for key, val in arrays.items():
            if val.shape[0] != n:
                raise DataError(f"{key} has {val.shape[0]} rows, expected {n}")
            if key in ("y", "b", "d", "c", "missing") and val.shape != (n, K):
                raise DataError(f"{key} must have shape {(n, K)}")
            object.__setattr__(self, key, val[order])
        if z.shape[2] != len(self.z_names) or x.shape[1] != len(self.x_names):
            raise DataError("column names do not match the data")
        d = self.d[:, 1:]
        if np.any(~np.isnan(d) & (d != 0) & (d != 1)):
            raise DataError("self-report d must be 0 or 1")
        if self.c is not None:
            c = self.c[:, 1:]
            if np.any(~np.isnan(c) & (c != 0) & (c != 1)):
                raise DataError("compliance c must be 0 or 1")
        object.__setattr__(self, "z_names", tuple(self.z_names))
        object.__setattr__(self, "x_names", tuple(self.x_names))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def K(self) -> int:
        return self.y.shape[1]

    @property
    def has_compliance(self) -> bool:
        return self.c is not None

    @property
    def arms(self) -> list[str]:
        return sorted(set(self.arm))

    def subset(self, rows) -> "LongitudinalDataset":
        """Participants at ``rows`` (an index array or boolean mask)."""
        rows = np.asarray(rows)
        return self._replace_rows(rows, self.ids[rows])

    def resample(self, rows) -> "LongitudinalDataset":
        """Participants at ``rows`` with repeats allowed; repeats get fresh ids."""
        rows = np.asarray(rows, dtype=int)
        return self._replace_rows(rows, np.arange(rows.size).astype(str))

    def _replace_rows(self, rows, ids) -> "LongitudinalDataset":
        return LongitudinalDataset(
            ids=ids, arm=self.arm[rows], x=self.x[rows], y=self.y[rows], z=self.z[rows],
            b=self.b[rows], d=self.d[rows], c=None if self.c is None else self.c[rows],
            missing=self.missing[rows], z_names=self.z_names, x_names=self.x_names,
            z_bounds=self.z_bounds,
        )

    def participant(self, i: int) -> Participant:
        pid = self.ids[i]
        obs = tuple(self._observation(i, j) for j in range(self.K))
        return Participant(pid, self.arm[i], tuple(self.x[i]), obs)

    def _observation(self, i: int, j: int) -> Observation:
        def opt(v):
            return None if np.isnan(v) else int(v)

        return Observation(
            participant_id=self.ids[i], time=j, y=float(self.y[i, j]),
            z=tuple(self.z[i, j]), b=None if np.isnan(self.b[i, j]) else float(self.b[i, j]),
            d=opt(self.d[i, j]), c=None if self.c is None else opt(self.c[i, j]),
            missing=bool(self.missing[i, j]),
        )

    def __iter__(self) -> Iterator[Participant]:
        return (self.participant(i) for i in range(self.n))

    def equals(self, other: "LongitudinalDataset") -> bool:
        """Field-by-field equality, treating NaN as equal to NaN."""
        if (self.z_names, self.x_names) != (other.z_names, other.x_names):
            return False
        if (self.c is None) != (other.c is None) or self.z_bounds != other.z_bounds:
            return False
        pairs = [(self.ids, other.ids), (self.arm, other.arm)]
        num = ["x", "y", "z", "b", "d", "missing"] + (["c"] if self.c is not None else [])
        return all(np.array_equal(a, b) for a, b in pairs) and all(
            getattr(self, k).shape == getattr(other, k).shape
            and np.array_equal(getattr(self, k), getattr(other, k), equal_nan=True)
            for k in num
        )


def mark_missing_noncompliant(ds: LongitudinalDataset) -> LongitudinalDataset:
    """Set ``d = 0`` wherever a post-baseline visit is missing."""
    d = ds.d.copy()
    d[:, 1:][ds.missing[:, 1:]] = 0.0
    return LongitudinalDataset(ds.ids, ds.arm, ds.x, ds.y, ds.z, ds.b, d, ds.c, ds.missing,
                               ds.z_names, ds.x_names, ds.z_bounds)


@dataclass(frozen=True, eq=False)
class EstimationView:
    """Transition pairs ``(j - 1, j)`` used to fit every conditional model.

    Only pairs whose current visit has ``d == 1`` and where neither visit is
    missing are kept. All arrays are aligned, one entry per pair.
    """

    dataset: LongitudinalDataset
    rows: np.ndarray
    time: np.ndarray

    def __len__(self) -> int:
        return self.rows.size

    @property
    def y(self):
        return self.dataset.y[self.rows, self.time]

    @property
    def z(self):
        return self.dataset.z[self.rows, self.time]

    @property
    def y_lag(self):
        return self.dataset.y[self.rows, self.time - 1]

    @property
    def z_lag(self):
        return self.dataset.z[self.rows, self.time - 1]

    @property
    def x(self):
        return self.dataset.x[self.rows]

    @property
    def b(self):
        return self.dataset.b[self.rows, self.time]

    @property
    def d(self):
        return self.dataset.d[self.rows, self.time]

    @property
    def c(self):
        if self.dataset.c is None:
            raise DataError("true compliance is not available (simulation only)")
        return self.dataset.c[self.rows, self.time]

    def take(self, idx) -> "EstimationView":
        return EstimationView(self.dataset, self.rows[idx], self.time[idx])

    def __iter__(self):
        ds = self.dataset
        for i, j in zip(self.rows, self.time):
            yield ds._observation(i, j), ds._observation(i, j - 1), ds.participant(i)


def estimation_view(ds: LongitudinalDataset, arm: str | None = None) -> EstimationView:
    """Self-reported compliant, non-missing transitions, optionally for one arm."""
    keep = np.zeros((ds.n, ds.K), dtype=bool)
    keep[:, 1:] = (ds.d[:, 1:] == 1) & ~ds.missing[:, 1:] & ~ds.missing[:, :-1]
    if arm is not None:
        keep &= (ds.arm == arm)[:, None]
    rows, time = np.nonzero(keep)
    return EstimationView(ds, rows, time)


# --- CSV ----------------------------------------------------------------------


@dataclass(frozen=True)
class Schema:
    """Column mapping for :func:`load_dataset`.

    ``categorical`` names X columns that are one-hot encoded (levels sorted
    lexicographically, first level dropped).
    """

    z: tuple[str, ...] = ("z",)
    x: tuple[str, ...] = ("x",)
    categorical: tuple[str, ...] = ()
    id: str = "id"
    time: str = "time"
    arm: str = "arm"
    y: str = "y"
    b: str = "b"
    d: str = "d"
    c: str | None = None

    @classmethod
    def from_header(cls, header: Sequence[str], categorical: Sequence[str] = ()) -> "Schema":
        """Infer Z/X columns from the canonical layout ``id,time,arm,y,<z>,<x>,b,d[,c]``.

        Columns between ``y`` and ``b`` whose name starts with ``z`` are Z, the
        rest are X.
        """
        header = list(header)
        for col in ("id", "time", "arm", "y", "b", "d"):
            if col not in header:
                raise DataError(f"missing required column {col!r}")
        middle = header[header.index("y") + 1: header.index("b")]
        z = tuple(c for c in middle if c.startswith("z"))
        x = tuple(c for c in middle if not c.startswith("z"))
        return cls(z=z, x=x, categorical=tuple(categorical), c="c" if "c" in header else None)


def _float(text: str, column: str, line: int) -> float:
    if text == "":
        return np.nan
    try:
        return float(text)
    except ValueError:
        raise DataError(f"line {line}: non-numeric value {text!r} in column {column!r}") from None


def load_dataset(path, schema: Schema | None = None, z_bounds=None) -> LongitudinalDataset:
    """Read a long-format CSV (one row per participant and time point).

    Rows absent for a (participant, time) pair on the grid become missing
    visits. Raises :class:`DataError` on a missing column, a non-numeric value
    in a numeric column or a duplicate ``(id, time)`` pair. ``z_bounds``
    declares per-confounder ``(lo, hi)`` support bounds, which CSV does not carry.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty file") from None
        rows = list(reader)
    header = [h.strip() for h in header]
    if schema is None:
        schema = Schema.from_header(header)
    required = [schema.id, schema.time, schema.arm, schema.y, *schema.z, *schema.x,
                schema.b, schema.d] + ([schema.c] if schema.c else [])
    for col in required:
        if col not in header:
            raise DataError(f"missing required column {col!r}")
    pos = {h: k for k, h in enumerate(header)}

    records: dict[str, dict[int, list[str]]] = {}
    for line, row in enumerate(rows, start=2):
        if not row:
            continue
        pid = row[pos[schema.id]].strip()
        t = _float(row[pos[schema.time]], schema.time, line)
        if np.isnan(t) or t != int(t) or t < 0:
            raise DataError(f"line {line}: invalid time {row[pos[schema.time]]!r}")
        per = records.setdefault(pid, {})
        if int(t) in per:
            raise DataError(f"duplicate (id, time) pair ({pid}, {int(t)})")
        per[int(t)] = (line, row)
    if not records:
        raise DataError("no data rows")
    K = 1 + max(max(per) for per in records.values())
    n = len(records)
    ids = list(records)
    q, numeric_x = len(schema.z), [c for c in schema.x if c not in schema.categorical]

    y = np.full((n, K), np.nan)
    z = np.full((n, K, q), np.nan)
    b = np.full((n, K), np.nan)
    d = np.full((n, K), np.nan)
    c = np.full((n, K), np.nan) if schema.c else None
    present = np.zeros((n, K), dtype=bool)
    arm, xnum, xcat = [], np.full((n, len(numeric_x)), np.nan), []
    for i, pid in enumerate(ids):
        arms, xs, cats = set(), set(), set()
        for t, (line, row) in records[pid].items():
            present[i, t] = True
            y[i, t] = _float(row[pos[schema.y]], schema.y, line)
            for k, col in enumerate(schema.z):
                z[i, t, k] = _float(row[pos[col]], col, line)
            b[i, t] = _float(row[pos[schema.b]], schema.b, line)
            d[i, t] = _float(row[pos[schema.d]], schema.d, line)
            if c is not None:
                c[i, t] = _float(row[pos[schema.c]], schema.c, line)
            arms.add(row[pos[schema.arm]])
            xs.add(tuple(_float(row[pos[col]], col, line) for col in numeric_x))
            cats.add(tuple(row[pos[col]] for col in schema.categorical))
        if len(arms) != 1 or len(xs) != 1 or len(cats) != 1:
            raise DataError(f"participant {pid}: arm and baseline covariates must be constant")
        arm.append(arms.pop())
        xnum[i] = xs.pop()
        xcat.append(cats.pop())

    x_cols, x_names = [xnum], list(numeric_x)
    for k, col in enumerate(schema.categorical):
        levels = sorted({cat[k] for cat in xcat})
        for level in levels[1:]:
            x_cols.append(np.array([[cat[k] == level] for cat in xcat], dtype=float))
            x_names.append(f"{col}[{level}]")
    x = np.hstack(x_cols) if x_cols else np.zeros((n, 0))
    if np.isnan(x).any():
        raise DataError("baseline covariates must not be missing")

    missing = ~present | np.isnan(y) | np.isnan(z).any(axis=2)
    missing[:, 1:] |= np.isnan(b[:, 1:]) | np.isnan(d[:, 1:])
    return LongitudinalDataset(ids=ids, arm=arm, x=x, y=y, z=z, b=b, d=d, c=c, missing=missing,
                               z_names=tuple(schema.z), x_names=tuple(x_names), z_bounds=z_bounds)


def _fmt(v: float) -> str:
    return "" if np.isnan(v) else repr(float(v))


def _fmt_int(v: float) -> str:
    return "" if np.isnan(v) else str(int(v))


def write_csv(ds: LongitudinalDataset, path) -> Path:
    """Write ``ds`` in the long CSV layout read by :func:`load_dataset`.

    Floats use the shortest repr that parses back exactly. Missing visits are
    written as rows with empty outcome/confounder cells.
    """
    path = Path(path)
    header = ["id", "time", "arm", "y", *ds.z_names, *ds.x_names, "b", "d"]
    if ds.c is not None:
        header.append("c")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(ds.n):
            xs = [_fmt(v) for v in ds.x[i]]
            for j in range(ds.K):
                row = [ds.ids[i], str(j), ds.arm[i], _fmt(ds.y[i, j]),
                       *(_fmt(v) for v in ds.z[i, j]), *xs, _fmt(ds.b[i, j]), _fmt_int(ds.d[i, j])]
                if ds.c is not None:
                    row.append(_fmt_int(ds.c[i, j]))
                w.writerow(row)
    return path
