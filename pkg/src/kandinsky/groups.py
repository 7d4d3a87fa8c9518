"""Basis construction from group specifications.

A group is a conjunction of column predicates, e.g.
``{"name": "g0", "where": [{"col": "x0", "op": ">", "value": 0}]}``.
Columns are ``x<j>`` (covariates), ``y`` (label), ``b<j>`` (base outputs) and
``z`` (latent tag, only meaningful for fractional groups and evaluation).

Spec kinds:

``indicator``
    one 0/1 column per group (groups may overlap); an empty group list with
    the intercept gives the intercept-only basis.
``class_conditional``
    one column per label value.
``mondrian``
    like ``indicator`` but the groups must partition the calibration set.
``fractional``
    groups over ``z``; columns are estimated ``P[z in G | phi(x, y)]``.
``raw``
    the named columns themselves.

The intercept column, when present, is always last.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import BasisMatrix, Dataset
from .errors import MissingTagsError, ValidationError

_OPS = {
    ">": np.greater,
    ">=": np.greater_equal,
    "<": np.less,
    "<=": np.less_equal,
    "==": np.equal,
    "!=": np.not_equal,
}
_SET_OPS = ("in", "not_in")
KINDS = ("indicator", "class_conditional", "mondrian", "fractional", "raw")


@dataclass(frozen=True)
class Predicate:
    col: str
    op: str
    value: object

    def __post_init__(self):
        if self.op not in _OPS and self.op not in _SET_OPS:
            raise ValidationError(f"unknown predicate operator {self.op!r}")
        if self.op in _SET_OPS:
            if not isinstance(self.value, (list, tuple)):
                raise ValidationError(f"operator {self.op!r} needs a list value")
            object.__setattr__(self, "value", tuple(float(v) for v in self.value))
        else:
            object.__setattr__(self, "value", float(self.value))

    def evaluate(self, cols) -> np.ndarray:
        v = cols(self.col)
        if self.op in _SET_OPS:
            hit = np.isin(v, np.asarray(self.value))
            return hit if self.op == "in" else ~hit
        return _OPS[self.op](v, self.value)

    def to_dict(self) -> dict:
        value = list(self.value) if self.op in _SET_OPS else self.value
        return {"col": self.col, "op": self.op, "value": _jsonable(value)}


def _jsonable(v):
    if isinstance(v, list):
        return [_jsonable(a) for a in v]
    return int(v) if float(v).is_integer() else float(v)


@dataclass(frozen=True)
class Group:
    name: str
    where: tuple = ()

    def members(self, cols, n) -> np.ndarray:
        out = np.ones(n, dtype=bool)
        for p in self.where:
            out &= p.evaluate(cols)
        return out

    @property
    def uses(self) -> set:
        return {p.col for p in self.where}

    def to_dict(self) -> dict:
        return {"name": self.name, "where": [p.to_dict() for p in self.where]}

    @classmethod
    def from_dict(cls, d) -> "Group":
        try:
            where = tuple(Predicate(p["col"], p["op"], p["value"]) for p in d.get("where", []))
            return cls(str(d["name"]), where)
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed group descriptor {d!r}") from exc


@dataclass(frozen=True)
class EstimatorSpec:
    """``histogram`` (equal-width bins per coordinate of phi) or ``logistic``."""

    kind: str = "histogram"
    bins: object = 10
    learning_rate: float = 0.5
    iterations: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("histogram", "logistic"):
            raise ValidationError(f"unknown estimator {self.kind!r}")
        bins = self.bins if isinstance(self.bins, (list, tuple)) else [self.bins]
        if any(int(b) < 1 for b in bins):
            raise ValidationError("histogram bins must be >= 1")
        if isinstance(self.bins, list):
            object.__setattr__(self, "bins", tuple(int(b) for b in self.bins))
        if int(self.iterations) < 1:
            raise ValidationError("logistic iterations must be >= 1")
        if not self.learning_rate > 0:
            raise ValidationError("logistic learning_rate must be > 0")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "seed": self.seed}
        if self.kind == "histogram":
            d["bins"] = list(self.bins) if isinstance(self.bins, tuple) else self.bins
        else:
            d["learning_rate"] = self.learning_rate
            d["iterations"] = self.iterations
        return d

    @classmethod
    def from_dict(cls, d) -> "EstimatorSpec":
        keys = {"kind", "bins", "learning_rate", "iterations", "seed"}
        extra = set(d) - keys
        if extra:
            raise ValidationError(f"unknown estimator fields {sorted(extra)}")
        return cls(**d)


@dataclass(frozen=True)
class GroupSpec:
    kind: str
    groups: tuple = ()
    include_intercept: bool | None = None
    n_classes: int | None = None
    statistic: str = "XY"
    estimator: EstimatorSpec | None = None
    columns: tuple = ()
    fit_split: str = "calibration"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown group spec kind {self.kind!r}")
        object.__setattr__(self, "groups", tuple(self.groups))
        object.__setattr__(self, "columns", tuple(self.columns))
        if self.include_intercept is None:
            # partitions already span the constants
            partition = self.kind in ("mondrian", "class_conditional")
            object.__setattr__(self, "include_intercept", not partition)
        if self.kind == "fractional":
            if self.statistic not in ("XY", "FY"):
                raise ValidationError("fractional statistic must be 'XY' or 'FY'")
            if self.estimator is None:
                object.__setattr__(self, "estimator", EstimatorSpec())
            for g in self.groups:
                if g.uses - {"z"}:
                    raise ValidationError(f"fractional group {g.name!r} may only reference column z")
            if self.fit_split not in ("calibration", "separate"):
                raise ValidationError("fit_split must be 'calibration' or 'separate'")
        names = [g.name for g in self.groups]
        if len(set(names)) != len(names):
            raise ValidationError("group names must be unique")
        if self.kind in ("mondrian", "fractional") and not self.groups:
            raise ValidationError(f"{self.kind} spec needs at least one group")
        if self.kind == "raw" and not self.columns:
            raise ValidationError("raw spec needs at least one column")

    @property
    def depends_on_y(self) -> bool:
        if self.kind in ("class_conditional", "fractional"):
            return True
        if self.kind == "raw":
            return "y" in self.columns
        return any("y" in g.uses for g in self.groups)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "include_intercept": bool(self.include_intercept)}
        if self.groups:
            d["groups"] = [g.to_dict() for g in self.groups]
        if self.kind == "class_conditional" and self.n_classes is not None:
            d["n_classes"] = self.n_classes
        if self.kind == "fractional":
            d["statistic"] = self.statistic
            d["estimator"] = self.estimator.to_dict()
            d["fit_split"] = self.fit_split
        if self.kind == "raw":
            d["columns"] = list(self.columns)
        return d

    @classmethod
    def from_dict(cls, d) -> "GroupSpec":
        if not isinstance(d, dict) or "kind" not in d:
            raise ValidationError("group spec must be an object with a 'kind'")
        known = {"kind", "groups", "include_intercept", "n_classes", "statistic",
                 "estimator", "columns", "fit_split"}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown group spec fields {sorted(extra)}")
        est = d.get("estimator")
        return cls(
            kind=d["kind"],
            groups=tuple(Group.from_dict(g) for g in d.get("groups", [])),
            include_intercept=d.get("include_intercept"),
            n_classes=d.get("n_classes"),
            statistic=d.get("statistic", "XY"),
            estimator=None if est is None else EstimatorSpec.from_dict(est),
            columns=tuple(d.get("columns", ())),
            fit_split=d.get("fit_split", "calibration"),
        )


def intercept_only() -> GroupSpec:
    return GroupSpec("indicator", (), include_intercept=True)


# --------------------------------------------------------------------------
# column access


class _Columns:
    """Named-column lookup over row-aligned arrays."""

    def __init__(self, X, y, base=None, z=None):
        self.X = np.atleast_2d(np.asarray(X, dtype=float))
        self.y = np.asarray(y, dtype=float).reshape(-1)
        self.base = None if base is None else np.atleast_2d(np.asarray(base, dtype=float))
        self.z = None if z is None else np.asarray(z).reshape(-1)
        self.n = self.y.shape[0]

    def __call__(self, name):
        if name == "y":
            return self.y
        if name == "z":
            if self.z is None:
                raise MissingTagsError("group predicate on z needs latent tags")
            return self.z
        if len(name) > 1 and name[0] in "xb" and name[1:].isdigit():
            j = int(name[1:])
            arr = self.X if name[0] == "x" else self.base
            if arr is None or j >= arr.shape[1]:
                raise ValidationError(f"column {name!r} not available")
            return arr[:, j]
        raise ValidationError(f"unknown column {name!r}")

    @classmethod
    def of(cls, dataset: Dataset):
        return cls(dataset.X, dataset.y, dataset.base, dataset.z)


# --------------------------------------------------------------------------
# fractional estimators


@dataclass(frozen=True, eq=False)
class FractionalEstimator:
    """Maps phi(x, y) to estimated membership probabilities, one per group."""

    statistic: str
    groups: tuple
    estimator: EstimatorSpec
    params: dict = field(repr=False)
    global_rates: np.ndarray = field(repr=False)
    dropped: tuple = ()

    @property
    def names(self):
        return tuple(g.name for g in self.groups)

    def features(self, X, y, base) -> np.ndarray:
        y = np.asarray(y, dtype=float).reshape(-1, 1)
        if self.statistic == "XY":
            F = np.atleast_2d(np.asarray(X, dtype=float))
        else:
            if base is None:
                raise ValidationError("statistic FY needs base outputs")
            F = np.atleast_2d(np.asarray(base, dtype=float))
        if F.shape[0] != y.shape[0]:
            F = F.reshape(y.shape[0], -1)
        F = np.hstack([F, y])
        expect = self.params["n_features"]
        if F.shape[1] != expect:
            raise ValidationError(f"phi has {F.shape[1]} coordinates, estimator was fit on {expect}")
        return F

    def predict(self, X, y, base=None) -> np.ndarray:
        F = self.features(X, y, base)
        if self.estimator.kind == "histogram":
            P = self._predict_histogram(F)
        else:
            P = self._predict_logistic(F)
        return np.clip(P, 0.0, 1.0)

    def _predict_histogram(self, F):
        p = self.params
        cells = _cell_index(F, p["lo"], p["hi"], p["bins"])
        known = p["cells"]
        pos = np.searchsorted(known, cells)
        pos = np.minimum(pos, max(len(known) - 1, 0))
        hit = known[pos] == cells if len(known) else np.zeros(len(cells), dtype=bool)
        out = np.tile(self.global_rates, (len(cells), 1))
        out[hit] = p["rates"][pos[hit]]
        return out

    def _predict_logistic(self, F):
        p = self.params
        A = np.hstack([(F - p["mean"]) / p["scale"], np.ones((F.shape[0], 1))])
        return _softmax(A @ p["W"]) @ p["membership"]

    def to_dict(self) -> dict:
        p = self.params
        d = {
            "statistic": self.statistic,
            "groups": [g.to_dict() for g in self.groups],
            "estimator": self.estimator.to_dict(),
            "global_rates": self.global_rates.tolist(),
            "dropped": list(self.dropped),
            "n_features": p["n_features"],
        }
        if self.estimator.kind == "histogram":
            d.update(lo=p["lo"].tolist(), hi=p["hi"].tolist(), bins=p["bins"].tolist(),
                     cells=p["cells"].tolist(), rates=p["rates"].tolist())
        else:
            d.update(mean=p["mean"].tolist(), scale=p["scale"].tolist(), W=p["W"].tolist(),
                     membership=p["membership"].tolist(), classes=p["classes"].tolist())
        return d

    @classmethod
    def from_dict(cls, d) -> "FractionalEstimator":
        est = EstimatorSpec.from_dict(d["estimator"])
        p = {"n_features": int(d["n_features"])}
        if est.kind == "histogram":
            p.update(lo=np.array(d["lo"], float), hi=np.array(d["hi"], float),
                     bins=np.array(d["bins"], np.int64), cells=np.array(d["cells"], np.int64),
                     rates=np.array(d["rates"], float).reshape(-1, len(d["groups"])))
        else:
            p.update(mean=np.array(d["mean"], float), scale=np.array(d["scale"], float),
                     W=np.array(d["W"], float), membership=np.array(d["membership"], float),
                     classes=np.array(d["classes"], float))
        return cls(d["statistic"], tuple(Group.from_dict(g) for g in d["groups"]), est, p,
                   np.array(d["global_rates"], float), tuple(d.get("dropped", ())))


def _cell_index(F, lo, hi, bins):
    width = np.where(hi > lo, (hi - lo) / bins, 1.0)
    idx = np.floor((F - lo) / width).astype(np.int64)
    idx = np.clip(idx, 0, bins - 1)
    flat = np.zeros(F.shape[0], dtype=np.int64)
    for j in range(F.shape[1]):
        flat = flat * int(bins[j]) + idx[:, j]
    return flat


def _softmax(A):
    A = A - A.max(axis=1, keepdims=True)
    E = np.exp(A)
    return E / E.sum(axis=1, keepdims=True)


def fit_fractional_basis(dataset: Dataset, groups, statistic: str = "XY",
                         est: EstimatorSpec | None = None) -> FractionalEstimator:
    """Estimate ``P[z in G | phi]`` for each group ``G`` over the latent tag.

    Groups with no member on the fitting data are dropped with a warning.
    """
    est = est or EstimatorSpec()
    z = dataset.require_z("fractional basis fitting")
    cols = _Columns(dataset.X, dataset.y, dataset.base, z)
    groups = tuple(groups)
    member = np.column_stack([g.members(cols, len(dataset)) for g in groups]).astype(float)
    keep = member.sum(axis=0) > 0
    dropped = tuple(g.name for g, k in zip(groups, keep) if not k)
    if dropped:
        warnings.warn(f"fractional groups with no members on the fitting split dropped: {list(dropped)}",
                      stacklevel=2)
    if not keep.any():
        raise ValidationError("every fractional group is empty on the fitting split")
    groups = tuple(g for g, k in zip(groups, keep) if k)
    member = member[:, keep]
    rates = member.mean(axis=0)
    F = np.hstack([
        dataset.X if statistic == "XY" else _require_base(dataset.base),
        dataset.y.reshape(-1, 1),
    ])
    params = {"n_features": F.shape[1]}
    if est.kind == "histogram":
        bins = est.bins if isinstance(est.bins, tuple) else (int(est.bins),) * F.shape[1]
        if len(bins) != F.shape[1]:
            raise ValidationError(f"histogram needs {F.shape[1]} bin counts (one per phi coordinate), got {len(bins)}")
        bins = np.array(bins, dtype=np.int64)
        if math.prod(int(b) for b in bins) >= 2**62:
            raise ValidationError("histogram has too many cells")
        lo, hi = F.min(axis=0), F.max(axis=0)
        cells = _cell_index(F, lo, hi, bins)
        uniq, inv = np.unique(cells, return_inverse=True)
        counts = np.bincount(inv, minlength=len(uniq)).astype(float)
        sums = np.zeros((len(uniq), member.shape[1]))
        np.add.at(sums, inv, member)
        params.update(lo=lo, hi=hi, bins=bins, cells=uniq, rates=sums / counts[:, None])
    else:
        classes = np.unique(z).astype(float)
        zcols = _Columns(np.zeros((len(classes), 0)), np.zeros(len(classes)), None, classes)
        membership = np.column_stack([g.members(zcols, len(classes)) for g in groups]).astype(float)
        mean = F.mean(axis=0)
        scale = F.std(axis=0)
        scale[scale == 0] = 1.0
        A = np.hstack([(F - mean) / scale, np.ones((F.shape[0], 1))])
        Y = (z[:, None] == classes[None, :]).astype(float)
        rng = np.random.default_rng(est.seed)
        W = 0.01 * rng.standard_normal((A.shape[1], len(classes)))
        n = A.shape[0]
        for _ in range(int(est.iterations)):
            W -= est.learning_rate * (A.T @ (_softmax(A @ W) - Y)) / n
        params.update(mean=mean, scale=scale, W=W, membership=membership, classes=classes)
    return FractionalEstimator(statistic, groups, est, params, rates, dropped)


def _require_base(base):
    if base is None:
        raise ValidationError("statistic FY needs base outputs")
    return base


# --------------------------------------------------------------------------
# fitted basis recipes


@dataclass(frozen=True, eq=False)
class Basis:
    """A basis ready to evaluate ``Phi(x, y)`` on any rows."""

    spec: GroupSpec
    n_classes: int | None = None
    estimator: FractionalEstimator | None = None

    @property
    def kind(self) -> str:
        if self.spec.kind == "fractional":
            return "fractional"
        return "raw" if self.spec.kind == "raw" else "indicator"

    @property
    def depends_on_y(self) -> bool:
        return self.spec.depends_on_y

    @property
    def column_names(self) -> tuple:
        s = self.spec
        if s.kind == "class_conditional":
            names = [f"y=={k}" for k in range(self.n_classes)]
        elif s.kind == "fractional":
            names = list(self.estimator.names)
        elif s.kind == "raw":
            names = list(s.columns)
        else:
            names = [g.name for g in s.groups]
        if s.include_intercept:
            names.append("intercept")
        return tuple(names)

    @property
    def d(self) -> int:
        return len(self.column_names)

    def values(self, X, y, base=None, z=None) -> np.ndarray:
        cols = _Columns(X, y, base, z)
        n = cols.n
        s = self.spec
        if s.kind == "class_conditional":
            lab = cols.y
            parts = [(lab == k).astype(float) for k in range(self.n_classes)]
        elif s.kind == "fractional":
            P = self.estimator.predict(cols.X, cols.y, cols.base)
            parts = [P[:, j] for j in range(P.shape[1])]
        elif s.kind == "raw":
            parts = [np.asarray(cols(c), dtype=float) for c in s.columns]
        else:
            parts = [g.members(cols, n).astype(float) for g in s.groups]
        if s.include_intercept:
            parts.append(np.ones(n))
        if not parts:
            return np.zeros((n, 0))
        return np.column_stack(parts)

    def matrix(self, dataset: Dataset) -> BasisMatrix:
        return BasisMatrix(self.values(dataset.X, dataset.y, dataset.base, dataset.z),
                           self.column_names, self.kind)

    def cell_of(self, X, y, base=None) -> np.ndarray:
        """Partition cell per row (-1 if none) for partition specs."""
        V = self.values(X, y, base)
        if self.spec.include_intercept:
            V = V[:, :-1]
        one = V.sum(axis=1) == 1
        return np.where(one, np.argmax(V, axis=1), -1)

    def to_dict(self) -> dict:
        d = {"spec": self.spec.to_dict()}
        if self.n_classes is not None:
            d["n_classes"] = self.n_classes
        if self.estimator is not None:
            d["estimator"] = self.estimator.to_dict()
        return d

    @classmethod
    def from_dict(cls, d) -> "Basis":
        est = d.get("estimator")
        return cls(GroupSpec.from_dict(d["spec"]), d.get("n_classes"),
                   None if est is None else FractionalEstimator.from_dict(est))


def check_partition(spec: GroupSpec, dataset: Dataset) -> None:
    """Mondrian groups must be disjoint and exhaustive on ``dataset``."""
    cols = _Columns.of(dataset)
    M = np.column_stack([g.members(cols, len(dataset)) for g in spec.groups])
    counts = M.sum(axis=1)
    many = np.flatnonzero(counts > 1)
    if many.size:
        i = int(many[0])
        hit = [spec.groups[j].name for j in np.flatnonzero(M[i])]
        raise ValidationError(f"mondrian groups overlap: groups {hit} all contain the point", index=i)
    none = np.flatnonzero(counts == 0)
    if none.size:
        raise ValidationError("mondrian groups are not exhaustive: point in no group", index=int(none[0]))


def fit_basis(spec: GroupSpec, dataset: Dataset) -> Basis:
    """Validate ``spec`` against the fitting data and return the basis recipe."""
    n_classes = None
    if spec.kind == "class_conditional":
        n_classes = spec.n_classes or (dataset.task.n_classes if dataset.task.is_classification else None)
        if n_classes is None:
            raise ValidationError("class_conditional needs a classification task or n_classes")
    if spec.kind == "mondrian":
        check_partition(spec, dataset)
    estimator = None
    if spec.kind == "fractional":
        estimator = fit_fractional_basis(dataset, spec.groups, spec.statistic, spec.estimator)
    basis = Basis(spec, n_classes, estimator)
    if basis.d == 0:
        raise ValidationError("basis has no columns")
    # evaluate once so unknown columns fail at fit time
    cols = _Columns.of(dataset)
    for name in spec.columns:
        cols(name)
    for g in spec.groups:
        if spec.kind != "fractional":
            for c in g.uses:
                cols(c)
    return basis


def build_indicator_basis(spec: GroupSpec, dataset: Dataset) -> BasisMatrix:
    if spec.kind not in ("indicator", "class_conditional", "mondrian"):
        raise ValidationError(f"build_indicator_basis does not handle kind {spec.kind!r}")
    return fit_basis(spec, dataset).matrix(dataset)


def eval_basis(obj, x, y, base_outputs=None) -> np.ndarray:
    """``Phi(x, y)`` for one point from a Basis, GroupSpec or FractionalEstimator."""
    X = np.asarray(x, dtype=float).reshape(1, -1)
    b = None if base_outputs is None else np.asarray(base_outputs, dtype=float).reshape(1, -1)
    yv = np.array([float(y)])
    if isinstance(obj, FractionalEstimator):
        return obj.predict(X, yv, b)[0]
    if isinstance(obj, GroupSpec):
        if obj.kind == "fractional":
            raise ValidationError("a fractional spec must be fit before evaluation")
        if obj.kind == "class_conditional" and obj.n_classes is None:
            raise ValidationError("class_conditional spec needs n_classes to evaluate")
        obj = Basis(obj, obj.n_classes)
    return obj.values(X, yv, b)[0]
