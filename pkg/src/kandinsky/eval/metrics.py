"""Coverage metrics: per-group miscoverage, coverage deviation, set size."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..core import PredictionSet
from ..errors import ValidationError


def miscoverage(covered, memberships: dict) -> dict:
    """Per-group miss rate ``sum 1{miss} 1{in G} / sum 1{in G}``.

    Groups with no members get ``{"miscoverage": None, "count": 0}``.
    """
    cov = np.asarray(covered, dtype=bool)
    out = {}
    for name, m in memberships.items():
        m = np.asarray(m, dtype=bool)
        c = int(m.sum())
        miss = int(np.sum(~cov & m))
        out[name] = {"miscoverage": miss / c if c else None, "count": c}
    return out


def _reporting(per_group: dict, min_group_count: int) -> list:
    return [v["miscoverage"] for v in per_group.values()
            if v["miscoverage"] is not None and v["count"] >= min_group_count]


def coverage_deviation(per_group: dict, alpha: float, min_group_count: int = 1) -> float:
    """Mean of ``|M - alpha|`` over groups with a defined miscoverage."""
    ms = _reporting(per_group, min_group_count)
    if not ms:
        raise ValidationError("no group has enough test members to report coverage")
    return float(np.mean(np.abs(np.array(ms) - alpha)))


def minmax_gap(per_group: dict, min_group_count: int = 1) -> float:
    ms = _reporting(per_group, min_group_count)
    if not ms:
        raise ValidationError("no group has enough test members to report coverage")
    return float(max(ms) - min(ms))


def set_size(pset: PredictionSet, grid=None, width: float | None = None) -> float:
    """Labels counted, grid bins times width, or total interval length."""
    if pset.label_mask is not None:
        return float(pset.label_mask.sum())
    if pset.intervals is not None:
        return float(sum(b - a for a, b in pset.intervals))
    if width is None:
        if grid is None:
            raise ValidationError("grid or bin width needed for a grid-mask size")
        g = np.asarray(grid, dtype=float)
        width = float(np.mean(np.diff(g))) if g.size > 1 else 1.0
    return float(pset.grid_mask.sum()) * width


def interval_grid_size(lo, hi, grid, width) -> np.ndarray:
    """Grid approximation of interval lengths: midpoints inside times width."""
    g = np.asarray(grid, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    inside = np.searchsorted(g, hi, side="right") - np.searchsorted(g, lo, side="left")
    return np.maximum(inside, 0) * width


def mc_band(alpha: float, m: int) -> float:
    """Two binomial standard errors of a miss rate over ``m`` evaluations."""
    return 2.0 * math.sqrt(alpha * (1.0 - alpha) / m) if m > 0 else math.inf


@dataclass(eq=False)
class CoverageReport:
    """Coverage of one predictor on one test set."""

    alpha: float
    per_group: dict
    cd: float
    minmax_gap: float
    marginal_miscoverage: float
    mean_set_size: float | None
    n_test: int
    trials: int = 1
    min_group_count: int = 1
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_coverage(cls, covered, memberships: dict, alpha: float, sizes=None,
                      min_group_count: int = 1, extra=None) -> "CoverageReport":
        cov = np.asarray(covered, dtype=bool)
        pg = miscoverage(cov, memberships)
        for v in pg.values():
            v["mc_band"] = mc_band(alpha, v["count"]) if v["count"] else None
        size = None if sizes is None else float(np.mean(sizes))
        return cls(alpha, pg, coverage_deviation(pg, alpha, min_group_count),
                   minmax_gap(pg, min_group_count), float(np.mean(~cov)), size, int(cov.size),
                   1, min_group_count, dict(extra or {}))

    def check(self, tol: float = 1e-12) -> None:
        for name, v in self.per_group.items():
            m = v["miscoverage"]
            if m is not None and not 0.0 <= m <= 1.0:
                raise ValidationError(f"miscoverage of {name} outside [0, 1]")
        cd = coverage_deviation(self.per_group, self.alpha, self.min_group_count)
        if abs(cd - self.cd) > tol:
            raise ValidationError("cd disagrees with its per-group table")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "per_group": self.per_group,
            "cd": self.cd,
            "minmax_gap": self.minmax_gap,
            "marginal_miscoverage": self.marginal_miscoverage,
            "marginal_mc_band": mc_band(self.alpha, self.n_test),
            "mean_set_size": self.mean_set_size,
            "n_test": self.n_test,
            "trials": self.trials,
            "min_group_count": self.min_group_count,
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
