"""Domain types, dataset validation, CSV I/O and the empirical quantile."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import FormatError, MissingTagsError, ValidationError

# tau * n within this relative distance of an integer is treated as that integer;
# the simplex solver uses the same band when it decides a slope is zero.
SLOPE_RTOL = 1e-10


@dataclass(frozen=True)
class Task:
    kind: str  # "regression" | "classification"
    n_classes: int | None = None

    def __post_init__(self):
        if self.kind not in ("regression", "classification"):
            raise ValidationError(f"unknown task kind {self.kind!r}")
        if self.kind == "classification" and (self.n_classes is None or self.n_classes < 1):
            raise ValidationError("classification task needs n_classes >= 1")

    @property
    def is_classification(self) -> bool:
        return self.kind == "classification"

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.n_classes is not None:
            d["n_classes"] = self.n_classes
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Task":
        return cls(d["kind"], d.get("n_classes"))


REGRESSION = Task("regression")


def classification(n_classes: int) -> Task:
    return Task("classification", int(n_classes))


@dataclass(frozen=True)
class LabeledExample:
    x: np.ndarray
    y: float
    z: int | None = None
    base_outputs: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-stored collection of labeled examples.

    ``X`` is (n, p), ``y`` is (n,), ``z`` optional (n,) ints, ``base`` optional
    (n, m) base-predictor outputs. ``base_len`` records how many base outputs
    each row actually carries (rows built from ragged examples are NaN padded).
    """

    X: np.ndarray
    y: np.ndarray
    task: Task = REGRESSION
    z: np.ndarray | None = None
    base: np.ndarray | None = None
    label_grid: np.ndarray | None = None
    base_len: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y =np.asarray(self.y, dtype=float).reshape(-1)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if X.shape[0] != y.shape[0]:
            raise ValidationError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
        if self.z is not None:
            z = np.asarray(self.z).reshape(-1)
            if z.shape[0] != y.shape[0]:
                raise ValidationError("z length differs from y")
            object.__setattr__(self, "z", z.astype(np.int64))
        if self.base is not None:
            b = np.asarray(self.base, dtype=float)
            if b.ndim == 1:
                b = b[:, None]
            if b.shape[0] != y.shape[0]:
                raise ValidationError("base outputs row count differs from y")
            object.__setattr__(self, "base", b)
            if self.base_len is None:
                object.__setattr__(self, "base_len", np.full(len(y), b.shape[1], dtype=np.int64))
        if self.label_grid is not None:
            object.__setattr__(self, "label_grid", np.asarray(self.label_grid, dtype=float))

    def __len__(self) -> int:
        return self.y.shape[0]

    def __getitem__(self, i: int) -> LabeledExample:
        y = self.y[i]
        if self.task.is_classification:
            y = int(y)
        base = None
        if self.base is not None:
            base = self.base[i, : self.base_len[i]]
        z = None if self.z is None else int(self.z[i])
        return LabeledExample(self.X[i], y, z, base)

    def __iter__(self) -> Iterator[LabeledExample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def examples(self) -> list[LabeledExample]:
        return list(self)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def base_arity(self) -> int:
        return 0 if self.base is None else self.base.shape[1]

    @property
    def labels(self) -> np.ndarray:
        """Labels as int64 for classification, float otherwise."""
        return self.y.astype(np.int64) if self.task.is_classification else self.y

    def require_z(self, what: str = "this operation") -> np.ndarray:
        if self.z is None:
            raise MissingTagsError(f"{what} needs latent-group tags (z) on every example")
        return self.z

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.X[idx],
            self.y[idx],
            self.task,
            None if self.z is None else self.z[idx],
            None if self.base is None else self.base[idx],
            self.label_grid,
            None if self.base_len is None else self.base_len[idx],
        )

    def column(self, name: str) -> np.ndarray:
        """Named column: ``x<j>``, ``y``, ``z`` or ``b<j>``."""
        if name == "y":
            return self.y
        if name == "z":
            return self.require_z(f"column 'z'").astype(float)
        m = re.fullmatch(r"([xb])(\d+)", name)
        if not m:
            raise ValidationError(f"unknown column {name!r}")
        j = int(m.group(2))
        arr = self.X if m.group(1) == "x" else self.base
        if arr is None or j >= arr.shape[1]:
            raise ValidationError(f"column {name!r} not present in dataset")
        return arr[:, j]

    @classmethod
    def from_examples(cls, examples: Sequence[LabeledExample], task: Task = REGRESSION,
                      label_grid=None) -> "Dataset":
        if len(examples) == 0:
            raise ValidationError("empty")
        X = np.array([np.asarray(e.x, dtype=float).reshape(-1) for e in examples])
        y = np.array([e.y for e in examples], dtype=float)
        has_z = [e.z is not None for e in examples]
        z = np.array([e.z for e in examples], dtype=np.int64) if all(has_z) else None
        base = base_len = None
        if any(e.base_outputs is not None for e in examples):
            lens = [0 if e.base_outputs is None else len(e.base_outputs) for e in examples]
            m = max(lens)
            base = np.full((len(examples), m), np.nan)
            for i, e in enumerate(examples):
                if e.base_outputs is not None:
                    base[i, : lens[i]] = e.base_outputs
            base_len = np.array(lens, dtype=np.int64)
        return cls(X, y, task, z, base, label_grid, base_len)


@dataclass(frozen=True, eq=False)
class BasisMatrix:
    values: np.ndarray
    column_names: tuple
    kind: str = "raw"  # "indicator" | "fractional" | "raw"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ValidationError("basis values must be a 2-d matrix")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "column_names", tuple(self.column_names))
        if len(self.column_names) != v.shape[1]:
            raise ValidationError("one column name per basis column required")
        if self.kind not in ("indicator", "fractional", "raw"):
            raise ValidationError(f"unknown basis kind {self.kind!r}")

    @property
    def shape(self):
        return self.values.shape

    def validate(self) -> None:
        """Check the calibration-time invariants; raises ValidationError."""
        v = self.values
        if not np.all(np.isfinite(v)):
            i = int(np.argwhere(~np.isfinite(v))[0, 0])
            raise ValidationError("non-finite basis entry", index=i)
        if self.kind == "indicator" and not np.all((v == 0.0) | (v == 1.0)):
            raise ValidationError("indicator basis entries must be 0 or 1")
        if self.kind == "fractional" and (v.min(initial=0.0) < 0.0 or v.max(initial=0.0) > 1.0):
            raise ValidationError("fractional basis entries must lie in [0, 1]")
        zero = np.flatnonzero(~np.any(v != 0.0, axis=0))
        if zero.size:
            names = [self.column_names[j] for j in zero]
            raise ValidationError(f"all-zero basis column(s) {names}: coordinate unidentifiable")


@dataclass(frozen=True, eq=False)
class QuantileModel:
    beta: np.ndarray
    alpha: float
    basis_descriptor: dict
    diagnostics: dict

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError(f"alpha must be in (0, 1), got {self.alpha}")
        beta = np.asarray(self.beta, dtype=float)
        if not np.all(np.isfinite(beta)):
            raise ValidationError("beta must be finite")
        object.__setattr__(self, "beta", beta)


@dataclass(frozen=True, eq=False)
class PredictionSet:
    """Exactly one of ``label_mask``, ``intervals`` or ``grid_mask`` is set."""

    label_mask: np.ndarray | None = None
    intervals: tuple | None = None
    grid_mask: np.ndarray | None = None

    def __post_init__(self):
        given = [a is not None for a in (self.label_mask, self.intervals, self.grid_mask)]
        if sum(given) != 1:
            raise ValidationError("prediction set needs exactly one representation")
        if self.label_mask is not None:
            object.__setattr__(self, "label_mask", np.asarray(self.label_mask, dtype=bool))
        if self.grid_mask is not None:
            object.__setattr__(self, "grid_mask", np.asarray(self.grid_mask, dtype=bool))
        if self.intervals is not None:
            ivs = tuple((float(a), float(b)) for a, b in self.intervals)
            for a, b in ivs:
                if not a <= b:
                    raise ValidationError(f"interval [{a}, {b}] is reversed")
            for (a0, b0), (a1, b1) in zip(ivs, ivs[1:]):
                if not b0 < a1:
                    raise ValidationError("intervals must be sorted and pairwise disjoint")
            object.__setattr__(self, "intervals", ivs)

    @property
    def kind(self) -> str:
        if self.label_mask is not None:
            return "labels"
        return "intervals" if self.intervals is not None else "grid"

    def contains(self, y, grid=None) -> bool:
        if self.label_mask is not None:
            return bool(self.label_mask[int(y)])
        if self.intervals is not None:
            return any(a <= y <= b for a, b in self.intervals)
        if grid is None:
            raise ValidationError("grid needed to test membership in a grid mask")
        j = int(np.argmin(np.abs(np.asarray(grid) - y)))
        return bool(self.grid_mask[j])

    def to_json(self) -> dict:
        if self.label_mask is not None:
            return {"labels": [int(k) for k in np.flatnonzero(self.label_mask)]}
        if self.intervals is not None:
            return {"intervals": [[a, b] for a, b in self.intervals]}
        return {"grid_mask": "".join("1" if b else "0" for b in self.grid_mask)}


def check_alpha(alpha) -> float:
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"alpha must be in (0, 1), got {alpha}")
    return alpha


def validate_dataset(dataset: Dataset, score_arity: int) -> None:
    """Raise ValidationError naming the first violated invariant."""
    n = len(dataset)
    if n == 0:
        raise ValidationError("empty")
    if not np.all(np.isfinite(dataset.X)):
        raise ValidationError("non-finite covariate", index=int(np.argwhere(~np.isfinite(dataset.X))[0, 0]))
    if not np.all(np.isfinite(dataset.y)):
        raise ValidationError("non-finite label", index=int(np.flatnonzero(~np.isfinite(dataset.y))[0]))
    if dataset.task.is_classification:
        y = dataset.y
        K = dataset.task.n_classes
        bad = np.flatnonzero((y != np.floor(y)) | (y < 0) | (y >= K))
        if bad.size:
            raise ValidationError(f"label outside [0, {K})", index=int(bad[0]))
    if dataset.label_grid is not None:
        g = dataset.label_grid
        if g.ndim != 1 or g.size < 1 or np.any(np.diff(g) <= 0):
            raise ValidationError("label_grid must be strictly increasing")
    lens = dataset.base_len if dataset.base is not None else np.zeros(n, dtype=np.int64)
    bad = np.flatnonzero(lens != score_arity)
    if bad.size:
        i = int(bad[0])
        raise ValidationError(f"base_outputs arity {int(lens[i])} != score arity {score_arity}", index=i)
    if dataset.base is not None and score_arity > 0:
        sub = dataset.base[:, :score_arity]
        if not np.all(np.isfinite(sub)):
            raise ValidationError("non-finite base output", index=int(np.argwhere(~np.isfinite(sub))[0, 0]))


def quantile_rank(n: int, tau: float) -> int:
    """1-based order statistic index ``ceil(tau * n)`` clamped to [1, n]."""
    if tau <= 0.0:
        return 1
    k = math.ceil(tau * n - SLOPE_RTOL * n)
    return min(max(k, 1), n)


def empirical_quantile(values, tau: float) -> float:
    """inf{x : #{v <= x} / n >= tau}; the ceil(tau*n)-th smallest value."""
    v = np.asarray(values, dtype=float).reshape(-1)
    if v.size == 0:
        raise ValidationError("empirical_quantile of an empty vector")
    if not 0.0 <= tau <= 1.0:
        raise ValidationError(f"tau must be in [0, 1], got {tau}")
    k = quantile_rank(v.size, tau)
    return float(np.partition(v, k - 1)[k - 1])


def default_grid(y, bins: int = 100):
    """Midpoints of ``bins`` equal-width bins over the label range, and the bin width."""
    lo, hi = float(np.min(y)), float(np.max(y))
    if hi <= lo:
        hi = lo + 1.0
    width = (hi - lo) / bins
    return lo + width * (np.arange(bins) + 0.5), width


def grid_width(grid) -> float:
    g = np.asarray(grid, dtype=float)
    if g.size < 2:
        return 1.0
    return float(np.mean(np.diff(g)))


# --------------------------------------------------------------------------
# CSV

_COL = re.compile(r"([xb])(\d+)")


def read_csv(path, task: Task | None = None) -> Dataset:
    """Read the ``x0..x{p-1}, y, [z], [b0..b{m-1}]`` CSV layout.

    Rows without a ``y`` value (empty cell) get NaN labels, which is allowed
    for prediction inputs. ``task`` defaults to regression.
    """
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror or exc}") from exc
    if not rows:
        raise FormatError(f"{path}: missing header row")
    header = [h.strip() for h in rows[0]]
    xs, bs = {}, {}
    yi = zi = None
    for j, name in enumerate(header):
        m = _COL.fullmatch(name)
        if m:
            (xs if m.group(1) == "x" else bs)[int(m.group(2))] = j
        elif name == "y":
            yi = j
        elif name == "z":
            zi = j
        else:
            raise FormatError(f"{path}: unexpected column {name!r}")
    for cols, prefix in ((xs, "x"), (bs, "b")):
        if sorted(cols) != list(range(len(cols))):
            raise FormatError(f"{path}: {prefix}-columns must be numbered 0..k-1 without gaps")
    body = [r for r in rows[1:] if any(c.strip() for c in r)]
    n = len(body)
    p, m = len(xs), len(bs)
    X = np.zeros((n, p))
    y = np.full(n, np.nan)
    z = np.zeros(n, dtype=np.int64) if zi is not None else None
    base = np.full((n, m), np.nan) if m else None
    base_len = np.zeros(n, dtype=np.int64) if m else None

    def num(cell, i, name):
        try:
            return float(cell)
        except ValueError:
            raise FormatError(f"{path}: row {i + 1} column {name}: not a number: {cell!r}") from None

    for i, row in enumerate(body):
        if len(row) != len(header):
            raise FormatError(f"{path}: row {i + 1} has {len(row)} fields, header has {len(header)}")
        for j, c in xs.items():
            X[i, j] = num(row[c], i, f"x{j}")
        if yi is not None and row[yi].strip():
            y[i] = num(row[yi], i, "y")
        if zi is not None:
            cell = row[zi].strip()
            try:
                z[i] = int(cell)
            except ValueError:
                raise FormatError(f"{path}: row {i + 1}: z must be an integer, got {cell!r}") from None
        for j, c in bs.items():
            cell = row[c].strip()
            if cell:
                base[i, j] = num(cell, i, f"b{j}")
        if m:
            present = [row[bs[j]].strip() != "" for j in range(m)]
            base_len[i] = sum(present) if all(present[: sum(present)]) else -1
    task = task or REGRESSION
    if task.is_classification:
        lab = y[np.isfinite(y)]
        if np.any(lab != np.floor(lab)) or np.any(lab < 0):
            raise FormatError(f"{path}: classification labels must be nonnegative integers")
    return Dataset(X, y, task, z, base, None, base_len)


def _fmt(v: float) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if np.isnan(v):
        return ""
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def write_csv(dataset: Dataset, path) -> None:
    p, m = dataset.n_features, dataset.base_arity
    header = [f"x{j}" for j in range(p)] + ["y"]
    if dataset.z is not None:
        header.append("z")
    header += [f"b{j}" for j in range(m)]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(dataset)):
            row = [_fmt(v) for v in dataset.X[i]]
            row.append(_fmt(dataset.y[i]))
            if dataset.z is not None:
                row.append(str(int(dataset.z[i])))
            if m:
                row += [_fmt(v) for v in dataset.base[i]]
            w.writerow(row)
