"""Conformal calibration and prediction.

Every method reduces to a threshold function ``q(x, y)``; a label is in the
prediction set when its randomized score does not exceed the threshold,

    C(x; eps) = {y : S~(x, y, eps) <= q(x, y)},

with one noise draw per test point shared by all candidate labels.

* ``kandinsky``: ``q = Phi(x, y) @ beta`` from pinball-loss regression.
* ``split``: one empirical quantile of all scores.
* ``mondrian`` / ``class_conditional``: one quantile per partition cell.
* ``conservative``: the largest of the per-group quantiles, used globally.
* ``testtime_qr``: a fresh regression per test point and candidate label with
  the candidate included in the fit (:func:`testtime_qr_predict`).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import scores as sc
from .core import (
    Dataset,
    PredictionSet,
    QuantileModel,
    Task,
    check_alpha,
    default_grid,
    empirical_quantile,
    grid_width,
    validate_dataset,
)
from .errors import FormatError, ValidationError
from .groups import Basis, GroupSpec, fit_basis, intercept_only
from .pinball import INTERP_RTOL, fit_linear_quantile

MODEL_FORMAT = "kandinsky-model"
MODEL_VERSION = 1
METHODS = ("kandinsky", "split", "mondrian", "class_conditional", "conservative", "testtime_qr")
DEFAULT_TESTTIME_BUDGET = 10_000_000


@dataclass(frozen=True, eq=False)
class CalibratedPredictor:
    """A calibrated conformal predictor.

    Attributes
    ----------
    method : str
    alpha : float
    score : ScoreSpec
        With the jitter width resolved from the calibration scores.
    task : Task
    seed : int
    basis : Basis or None
        Basis recipe for ``kandinsky`` and the cell definition for
        ``mondrian``/``class_conditional``; the group list for
        ``conservative``.
    model : QuantileModel or None
        Regression coefficients for ``kandinsky``.
    thresholds : ndarray or None
        One per cell (partition methods) or a single entry (split,
        conservative).
    grid : ndarray or None
        Regression label grid (bin midpoints).
    """

    method: str
    alpha: float
    score: sc.ScoreSpec
    task: Task
    seed: int
    basis: Basis | None = None
    model: QuantileModel | None = None
    thresholds: np.ndarray | None = None
    grid: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def threshold_depends_on_y(self) -> bool:
        if self.method in ("split", "conservative"):
            return False
        return self.basis.depends_on_y

    @property
    def beta(self) -> np.ndarray:
        return self.model.beta

    def threshold(self, X, y, base=None) -> np.ndarray:
        """``q(x_i, y_i)`` for row-aligned inputs."""
        y = np.asarray(y, dtype=float).reshape(-1)
        n = y.shape[0]
        if self.method in ("split", "conservative"):
            return np.full(n, float(self.thresholds[0]))
        if self.method == "kandinsky":
            return self.basis.values(X, y, base) @ self.model.beta
        cells = self.basis.cell_of(X, y, base)
        bad = np.flatnonzero(cells < 0)
        if bad.size:
            raise ValidationError("point falls in no partition cell", index=int(bad[0]))
        return self.thresholds[cells]

    # ---------------------------------------------------------------- JSON

    def to_dict(self) -> dict:
        d = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "method": self.method,
            "alpha": self.alpha,
            "task": self.task.to_dict(),
            "score": self.score.to_dict(),
            "seed": self.seed,
            "basis": None if self.basis is None else self.basis.to_dict(),
        }
        if self.model is not None:
            d["beta"] = self.model.beta.tolist()
            d["column_names"] = list(self.basis.column_names)
        if self.thresholds is not None:
            d["thresholds"] = [float(t) for t in self.thresholds]
        if self.grid is not None:
            d["grid"] = [float(g) for g in self.grid]
        d["diagnostics"] = self.diagnostics
        d["config"] = self.config
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, d) -> "CalibratedPredictor":
        if d.get("format") != MODEL_FORMAT:
            raise FormatError("not a kandinsky model file")
        if d.get("version") != MODEL_VERSION:
            raise FormatError(f"unsupported model version {d.get('version')!r}")
        try:
            basis = None if d.get("basis") is None else Basis.from_dict(d["basis"])
            alpha = check_alpha(d["alpha"])
            model = None
            if "beta" in d:
                model = QuantileModel(np.array(d["beta"], float), alpha,
                                      d["basis"], d.get("diagnostics", {}))
            thresholds = None if "thresholds" not in d else np.array(d["thresholds"], float)
            grid = None if "grid" not in d else np.array(d["grid"], float)
            return cls(d["method"], alpha, sc.ScoreSpec.from_dict(d["score"]),
                       Task.from_dict(d["task"]), int(d["seed"]), basis, model, thresholds,
                       grid, d.get("diagnostics", {}), d.get("config", {}))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed model file: missing or bad field {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "CalibratedPredictor":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"model file is not valid JSON: {exc}") from exc
        return cls.from_dict(d)


# --------------------------------------------------------------------------
# calibration


def _prepare(dataset: Dataset, score_spec, alpha, seed):
    alpha = check_alpha(alpha)
    if isinstance(score_spec, str):
        score_spec = sc.parse_score(score_spec)
    score_spec.check_task(dataset.task)
    validate_dataset(dataset, score_spec.arity(dataset.task))
    spec, s, _ = sc.calibration_scores(score_spec, dataset, seed)
    return alpha, spec, s


def _grid_for(dataset: Dataset):
    if dataset.task.is_classification:
        return None
    if dataset.label_grid is not None:
        return dataset.label_grid
    return default_grid(dataset.y)[0]


def kandinsky_calibrate(dataset: Dataset, group_spec: GroupSpec, score_spec, alpha, seed: int,
                        *, backend=None) -> CalibratedPredictor:
    """Fit ``beta`` minimizing the mean pinball loss of the randomized scores."""
    alpha, spec, s = _prepare(dataset, score_spec, alpha, seed)
    fit_data, qr_idx = dataset, np.arange(len(dataset))
    if group_spec.kind == "fractional" and group_spec.fit_split == "separate":
        perm = sc.rng_for(seed, sc.SPLIT).permutation(len(dataset))
        half = len(dataset) // 2
        if half < 1:
            raise ValidationError("separate fitting split needs at least 2 examples")
        fit_data, qr_idx = dataset.subset(np.sort(perm[:half])), np.sort(perm[half:])
    basis = fit_basis(group_spec, fit_data)
    B = basis.matrix(dataset.subset(qr_idx) if len(qr_idx) != len(dataset) else dataset)
    B.validate()
    sol = fit_linear_quantile(B, s[qr_idx], alpha, jittered=spec.rng_required, backend=backend)
    diag = sol.diagnostics()
    diag["n"] = int(len(qr_idx))
    diag["d"] = basis.d
    if basis.estimator is not None and basis.estimator.dropped:
        diag["dropped_groups"] = list(basis.estimator.dropped)
    model = QuantileModel(sol.beta, alpha, basis.to_dict(), diag)
    return CalibratedPredictor("kandinsky", alpha, spec, dataset.task, int(seed), basis, model,
                               None, _grid_for(dataset), diag)


def quantile_level(n: int, alpha: float, adjusted: bool = False) -> float:
    """``1 - alpha`` or the finite-sample ``ceil((n + 1)(1 - alpha)) / n``."""
    if not adjusted:
        return 1.0 - alpha
    return math.ceil((n + 1) * (1.0 - alpha) - 1e-9) / n


def _quantile(values, alpha, adjusted):
    tau = quantile_level(len(values), alpha, adjusted)
    if tau > 1.0:
        return math.inf
    return empirical_quantile(values, tau)


def split_calibrate(dataset: Dataset, spec=None, score_spec="cqr", alpha=0.1, seed: int = 0,
                    *, adjusted: bool = False) -> CalibratedPredictor:
    alpha, sspec, s = _prepare(dataset, score_spec, alpha, seed)
    t = _quantile(s, alpha, adjusted)
    diag = {"n": len(s), "threshold": t, "adjusted": adjusted}
    return CalibratedPredictor("split", alpha, sspec, dataset.task, int(seed), None, None,
                               np.array([t]), _grid_for(dataset), diag)


def _cell_quantiles(basis: Basis, dataset, s, alpha, adjusted, overlapping=False):
    V = basis.values(dataset.X, dataset.y, dataset.base, dataset.z)
    names = list(basis.column_names)
    if basis.spec.include_intercept:
        V, names = V[:, :-1], names[:-1]
    out = []
    for j, name in enumerate(names):
        members = V[:, j] > 0
        if not members.any():
            kind = "group" if overlapping else "cell"
            raise ValidationError(f"empty {kind} {name!r}: no calibration example")
        out.append(_quantile(s[members], alpha, adjusted))
    return names, np.array(out)


def mondrian_calibrate(dataset: Dataset, spec: GroupSpec, score_spec="cqr", alpha=0.1,
                       seed: int = 0, *, adjusted: bool = False) -> CalibratedPredictor:
    if spec.kind not in ("mondrian", "class_conditional"):
        raise ValidationError("mondrian_calibrate needs a mondrian or class_conditional spec")
    alpha, sspec, s = _prepare(dataset, score_spec, alpha, seed)
    spec = GroupSpec.from_dict({**spec.to_dict(), "include_intercept": False})
    basis = fit_basis(spec, dataset)
    names, t = _cell_quantiles(basis, dataset, s, alpha, adjusted)
    method = "class_conditional" if spec.kind == "class_conditional" else "mondrian"
    diag = {"n": len(s), "cells": dict(zip(names, t.tolist())), "adjusted": adjusted}
    return CalibratedPredictor(method, alpha, sspec, dataset.task, int(seed), basis, None, t,
                               _grid_for(dataset), diag)


def class_conditional_calibrate(dataset: Dataset, spec=None, score_spec="aps", alpha=0.1,
                                seed: int = 0, *, adjusted: bool = False) -> CalibratedPredictor:
    spec = spec or GroupSpec("class_conditional")
    return mondrian_calibrate(dataset, spec, score_spec, alpha, seed, adjusted=adjusted)


def conservative_calibrate(dataset: Dataset, spec: GroupSpec, score_spec="cqr", alpha=0.1,
                           seed: int = 0, *, adjusted: bool = False) -> CalibratedPredictor:
    if spec.kind not in ("indicator", "mondrian", "class_conditional"):
        raise ValidationError("conservative_calibrate needs an indicator-type group spec")
    alpha, sspec, s = _prepare(dataset, score_spec, alpha, seed)
    basis = fit_basis(spec, dataset)
    names, t = _cell_quantiles(basis, dataset, s, alpha, adjusted, overlapping=True)
    top = float(np.max(t))
    diag = {"n": len(s), "groups": dict(zip(names, t.tolist())), "threshold": top,
            "adjusted": adjusted}
    return CalibratedPredictor("conservative", alpha, sspec, dataset.task, int(seed), basis, None,
                               np.array([top]), _grid_for(dataset), diag)


def calibrate(method: str, dataset: Dataset, group_spec: GroupSpec | None, score_spec, alpha,
              seed: int, *, adjusted: bool = False, backend=None) -> CalibratedPredictor:
    """Dispatch on ``method`` (one of :data:`METHODS` except ``testtime_qr``)."""
    if method == "kandinsky":
        return kandinsky_calibrate(dataset, group_spec or intercept_only(), score_spec, alpha, seed,
                                   backend=backend)
    if method == "split":
        return split_calibrate(dataset, None, score_spec, alpha, seed, adjusted=adjusted)
    if method == "mondrian":
        if group_spec is None:
            raise ValidationError("mondrian needs a group spec")
        return mondrian_calibrate(dataset, group_spec, score_spec, alpha, seed, adjusted=adjusted)
    if method == "class_conditional":
        return class_conditional_calibrate(dataset, None, score_spec, alpha, seed, adjusted=adjusted)
    if method == "conservative":
        if group_spec is None:
            raise ValidationError("conservative needs a group spec")
        return conservative_calibrate(dataset, group_spec, score_spec, alpha, seed, adjusted=adjusted)
    raise ValidationError(f"unknown calibration method {method!r}")


# --------------------------------------------------------------------------
# prediction


def draw_test_eps(seed: int, n: int) -> np.ndarray:
    """Per-test-point noise; row ``i`` depends only on ``(seed, i)``."""
    return sc.draw_eps(seed, sc.TEST, n)


def _check_inputs(pred: CalibratedPredictor, base, n):
    k = pred.score.arity(pred.task)
    b = None if base is None else np.asarray(base, dtype=float).reshape(n, -1)
    if b is None or b.shape[1] != k:
        got = 0 if b is None else b.shape[1]
        raise ValidationError(f"model score {pred.score.base.kind} needs {k} base outputs, got {got}")
    return b


def _level_shift(pred, eps):
    """Jitter added to the score, per row."""
    if pred.score.is_jittered:
        return pred.score.eta * (eps[:, 1] - 0.5)
    return np.zeros(eps.shape[0])


def classification_masks(pred: CalibratedPredictor, X, base, eps) -> np.ndarray:
    """(n, K) inclusion matrix of the Alg.-2 rule."""
    if not pred.task.is_classification:
        raise ValidationError("classification prediction on a regression model")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, K = X.shape[0], pred.task.n_classes
    b = _check_inputs(pred, base, n)
    labels = np.tile(np.arange(K, dtype=float), (n, 1))
    S = sc.scores(pred.score, b, labels, eps)
    Q = pred.threshold(np.repeat(X, K, axis=0), labels.reshape(-1), np.repeat(b, K, axis=0))
    return S <= Q.reshape(n, K)


def analytic_available(pred: CalibratedPredictor) -> bool:
    return (not pred.task.is_classification and not pred.threshold_depends_on_y
            and pred.score.base.kind in ("cqr", "abs_residual"))


def analytic_intervals(pred: CalibratedPredictor, X, base, eps):
    """Closed-form sublevel sets; ``(lo, hi)`` with ``lo > hi`` marking empty sets."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    b = _check_inputs(pred, base, n)
    q = pred.threshold(X, np.zeros(n), b)
    level = q - _level_shift(pred, eps)
    if pred.score.base.kind == "cqr":
        lo, hi = b[:, 0] - level, b[:, 1] + level
    else:
        lo, hi = b[:, 0] - level, b[:, 0] + level
    return lo, hi


def grid_masks(pred: CalibratedPredictor, X, base, eps, grid, chunk: int = 2_000_000) -> np.ndarray:
    """(n, G) inclusion of grid labels under the Alg.-2 rule."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    b = _check_inputs(pred, base, n)
    grid = np.asarray(grid, dtype=float)
    G = grid.size
    out = np.empty((n, G), dtype=bool)
    rows = max(1, chunk // max(G, 1))
    for a in range(0, n, rows):
        sl = slice(a, min(n, a + rows))
        m = sl.stop - sl.start
        labels = np.tile(grid, (m, 1))
        S = sc.scores(pred.score, b[sl], labels, eps[sl])
        if pred.threshold_depends_on_y:
            Q = pred.threshold(np.repeat(X[sl], G, axis=0), labels.reshape(-1),
                               np.repeat(b[sl], G, axis=0)).reshape(m, G)
        else:
            Q = pred.threshold(X[sl], np.zeros(m), b[sl])[:, None]
        out[sl] = S <= Q
    return out


def kandinsky_predict_classification(pred: CalibratedPredictor, x, base_outputs, eps) -> PredictionSet:
    """Prediction set for one test point; ``eps`` is its (2,) noise row."""
    e = np.asarray(eps, dtype=float).reshape(1, 2)
    return PredictionSet(label_mask=classification_masks(pred, x, base_outputs, e)[0])


def kandinsky_predict_regression(pred: CalibratedPredictor, x, base_outputs, grid=None,
                                 eps=None, analytic: bool = True) -> PredictionSet:
    """Interval when available in closed form, otherwise a grid mask."""
    e = np.asarray(eps if eps is not None else (0.5, 0.5), dtype=float).reshape(1, 2)
    if analytic and analytic_available(pred):
        lo, hi = analytic_intervals(pred, x, base_outputs, e)
        return PredictionSet(intervals=[] if lo[0] > hi[0] else [(lo[0], hi[0])])
    grid = pred.grid if grid is None else grid
    if grid is None:
        raise ValidationError("a label grid is required for this model")
    return PredictionSet(grid_mask=grid_masks(pred, x, base_outputs, e, grid)[0])


def predict_sets(pred: CalibratedPredictor, dataset: Dataset, seed: int | None = None,
                 analytic: bool = True, grid=None) -> list:
    """One prediction set per row of ``dataset`` (labels are ignored)."""
    seed = pred.seed if seed is None else seed
    eps = draw_test_eps(seed, len(dataset))
    if pred.task.is_classification:
        M = classification_masks(pred, dataset.X, dataset.base, eps)
        return [PredictionSet(label_mask=m) for m in M]
    if analytic and analytic_available(pred):
        lo, hi = analytic_intervals(pred, dataset.X, dataset.base, eps)
        return [PredictionSet(intervals=[] if a > b else [(a, b)]) for a, b in zip(lo, hi)]
    grid = grid if grid is not None else (dataset.label_grid if dataset.label_grid is not None else pred.grid)
    if grid is None:
        raise ValidationError("a label grid is required for this model")
    return [PredictionSet(grid_mask=m) for m in grid_masks(pred, dataset.X, dataset.base, eps, grid)]


def covered(pred: CalibratedPredictor, dataset: Dataset, eps) -> np.ndarray:
    """Membership of each row's true label, by the set's defining inequality."""
    b = _check_inputs(pred, dataset.base, len(dataset))
    s = sc.scores(pred.score, b, dataset.y, eps)
    return s <= pred.threshold(dataset.X, dataset.y, b)


# --------------------------------------------------------------------------
# test-time quantile regression


def testtime_qr_predict(calibration: Dataset | None, x, candidates, group_spec: GroupSpec,
                        score_spec, alpha, seed: int, *, base_outputs=None, task: Task | None = None,
                        test_index: int = 0, budget: int = DEFAULT_TESTTIME_BUDGET,
                        backend=None) -> PredictionSet:
    """Prediction set for one test point by augmented quantile regression.

    For each candidate label the test point (with that label) joins the
    calibration scores, the regression is re-solved on ``n + 1`` points, and
    the candidate is kept when its score is at most the fitted threshold at
    that point. Calibration noise is drawn once per call (keyed by
    ``test_index``); the test point's noise is row ``test_index`` of the test
    stream, shared by all candidates.
    """
    alpha = check_alpha(alpha)
    if isinstance(score_spec, str):
        score_spec = sc.parse_score(score_spec)
    task = task or (calibration.task if calibration is not None else None)
    if task is None:
        raise ValidationError("task unknown: pass a calibration dataset or task")
    score_spec.check_task(task)
    candidates = np.asarray(candidates, dtype=float).reshape(-1)
    if candidates.size == 0:
        raise ValidationError("testtime_qr needs a finite, nonempty candidate set")
    n = 0 if calibration is None else len(calibration)
    if candidates.size * max(n, 1) > budget:
        warnings.warn(f"test-time regression cost {candidates.size} x {n} exceeds budget {budget}",
                      RuntimeWarning, stacklevel=2)
    k = score_spec.arity(task)
    xb = None if base_outputs is None else np.asarray(base_outputs, dtype=float).reshape(1, -1)
    if xb is None or xb.shape[1] != k:
        raise ValidationError(f"score needs {k} base outputs for the test point")
    xr = np.asarray(x, dtype=float).reshape(1, -1)

    eps_new = draw_test_eps(seed, test_index + 1)[test_index : test_index + 1]
    if n:
        validate_dataset(calibration, k)
        eps_cal = sc.draw_eps(seed, sc.TESTTIME_CALIBRATION, n, test_index)
        raw = sc.base_scores(score_spec, calibration.base, calibration.y, eps_cal[:, 0])
        spec = score_spec.resolved(raw)
        s_cal = sc.scores(spec, calibration.base, calibration.y, eps_cal)
        basis = fit_basis(group_spec, calibration)
        P_cal = basis.values(calibration.X, calibration.y, calibration.base, calibration.z)
    else:
        spec = score_spec.resolved(np.zeros(0))
        s_cal = np.zeros(0)
        if group_spec.kind == "fractional":
            raise ValidationError("fractional basis cannot be fit without calibration data")
        n_classes = group_spec.n_classes or (task.n_classes if task.is_classification else None)
        basis = Basis(group_spec, n_classes)
        P_cal = np.zeros((0, basis.d))

    m = candidates.size
    S_new = sc.scores(spec, xb, candidates.reshape(1, m), eps_new)[0]
    P_new = basis.values(np.repeat(xr, m, axis=0), candidates, np.repeat(xb, m, axis=0))
    warm = None
    if n >= basis.d:
        try:
            warm = fit_linear_quantile(P_cal, s_cal, alpha, backend=backend).basis_rows
        except Exception:  # warm start is only an optimization
            warm = None
    keep = np.zeros(m, dtype=bool)
    for j in range(m):
        P = np.vstack([P_cal, P_new[j : j + 1]])
        s = np.append(s_cal, S_new[j])
        ws = warm if warm is not None and len(warm) == basis.d else None
        sol = fit_linear_quantile(P, s, alpha, warm_start=ws, backend=backend)
        q = float(P_new[j] @ sol.beta)
        keep[j] = S_new[j] <= q + INTERP_RTOL * (1.0 + abs(S_new[j]))
    if task.is_classification:
        mask = np.zeros(task.n_classes, dtype=bool)
        mask[candidates.astype(np.int64)] = keep
        return PredictionSet(label_mask=mask)
    return PredictionSet(grid_mask=keep)


def testtime_predict_sets(calibration: Dataset, test: Dataset, group_spec, score_spec, alpha, seed,
                          grid=None, backend=None) -> list:
    task = calibration.task
    if task.is_classification:
        candidates = np.arange(task.n_classes)
    else:
        grid = grid if grid is not None else test.label_grid
        if grid is None:
            raise ValidationError("test-time regression needs an explicit label grid")
        candidates = np.asarray(grid, dtype=float)
    return [
        testtime_qr_predict(calibration, test.X[i], candidates, group_spec, score_spec, alpha, seed,
                            base_outputs=test.base[i], task=task, test_index=i, backend=backend)
        for i in range(len(test))
    ]


def set_grid_width(pred: CalibratedPredictor) -> float:
    return grid_width(pred.grid) if pred.grid is not None else 1.0
