"""Multi-trial experiment runner.

A config (plain dict, usually loaded from JSON) looks like::

    {
      "alpha": 0.1, "trials": 50, "seed": 0,
      "score": "jittered(cqr)",
      "data": {"source": "synth", "structure": "overlapping", "k": 5, ...}
              | {"source": "csv", "path": "data.csv", "task": {"kind": "regression"},
                 "calib_fraction": 0.5},
      "methods": [{"name": "kandinsky", "method": "kandinsky", "groups": {...}},
                  {"name": "split", "method": "split"}],
      "eval_groups": [...],          # defaults to the synthetic design's groups
      "n_calib": [2500, 40000],      # optional sweep over calibration sizes
      "grid_bins": 100, "set_size": true, "min_group_count": 1,
      "shift": {"tilt": "group", "group": 0, "B": 5}
    }

Every trial redraws (or reshuffles) the data from a per-trial seed, so the
report is a deterministic function of the config.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .. import scores as sc
from ..core import Dataset, Task, default_grid, read_csv
from ..errors import ValidationError
from ..groups import Group, GroupSpec, _Columns
from ..methods import (
    analytic_available,
    analytic_intervals,
    calibrate,
    classification_masks,
    covered,
    draw_test_eps,
    grid_masks,
    testtime_qr_predict,
)
from .metrics import CoverageReport, interval_grid_size, mc_band
from .shift import Tilt, normalizer, tilted_sample
from .synth import SynthConfig, synth_generate, synth_groups

REPORT_FORMAT = "kandinsky-report"
REPORT_VERSION = 1
_TOP_KEYS = {"alpha", "trials", "seed", "score", "data", "methods", "eval_groups", "n_calib",
             "grid_bins", "set_size", "min_group_count", "shift"}


def trial_seed(seed: int, t: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(t)]).generate_state(1)[0])


def normalize_config(config: dict) -> dict:
    """Fill defaults and validate; the result is what the report echoes."""
    extra = set(config) - _TOP_KEYS
    if extra:
        raise ValidationError(f"unknown experiment config fields {sorted(extra)}")
    c = copy.deepcopy(config)
    c.setdefault("alpha", 0.1)
    c.setdefault("trials", 1)
    c.setdefault("seed", 0)
    c.setdefault("grid_bins", 100)
    c.setdefault("set_size", True)
    c.setdefault("min_group_count", 1)
    c.setdefault("shift", None)
    if not 0 < float(c["alpha"]) < 1:
        raise ValidationError(f"alpha must be in (0, 1), got {c['alpha']}")
    if int(c["trials"]) < 1:
        raise ValidationError("trials must be >= 1")
    data = c.get("data")
    if not isinstance(data, dict) or data.get("source") not in ("synth", "csv"):
        raise ValidationError("config.data.source must be 'synth' or 'csv'")
    if data["source"] == "synth":
        synth = SynthConfig.from_dict({k: v for k, v in data.items() if k != "source"})
        c["data"] = {"source": "synth", **synth.to_dict()}
        c.setdefault("score", "jittered(aps)" if synth.task == "classification" else "jittered(cqr)")
        c.setdefault("n_calib", [synth.n_calib])
        if "eval_groups" not in c:
            c["eval_groups"] = [g.to_dict() for g in synth_groups(synth)]
    else:
        if "path" not in data:
            raise ValidationError("csv data needs a path")
        data.setdefault("task", {"kind": "regression"})
        data.setdefault("calib_fraction", 0.5)
        c.setdefault("score", "jittered(cqr)")
        c.setdefault("eval_groups", [])
        c.setdefault("n_calib", None)
    if isinstance(c["n_calib"], int):
        c["n_calib"] = [c["n_calib"]]
    methods = c.get("methods")
    if not methods:
        raise ValidationError("config.methods must list at least one method")
    names = []
    for m in methods:
        m.setdefault("name", m.get("method"))
        if m.get("method") not in ("kandinsky", "split", "mondrian", "class_conditional",
                                   "conservative", "testtime_qr"):
            raise ValidationError(f"unknown method {m.get('method')!r}")
        if m.get("groups") is not None:
            m["groups"] = GroupSpec.from_dict(m["groups"]).to_dict()
        m.setdefault("adjusted", False)
        names.append(m["name"])
    if len(set(names)) != len(names):
        raise ValidationError("method names must be unique")
    sc.parse_score(c["score"]) if isinstance(c["score"], str) else sc.ScoreSpec.from_dict(c["score"])
    [Group.from_dict(g) for g in c["eval_groups"]]
    return c


def _score(c):
    return sc.parse_score(c["score"]) if isinstance(c["score"], str) else sc.ScoreSpec.from_dict(c["score"])


def _data_for_trial(c, t, n_calib, pool=None):
    ts = trial_seed(c["seed"], t)
    data = c["data"]
    if data["source"] == "synth":
        synth = SynthConfig.from_dict({k: v for k, v in data.items() if k != "source"})
        synth = synth.replace(seed=ts, n_calib=n_calib)
        cal, test = synth_generate(synth)
        if c["shift"]:
            tilt = Tilt.from_dict(c["shift"], synth)
            test = tilted_sample(synth, tilt, synth.n_test, ts, normalizer(synth, tilt))
        return ts, cal, test
    perm = sc.rng_for(ts, sc.SPLIT).permutation(len(pool))
    m = n_calib or int(round(len(pool) * float(data["calib_fraction"])))
    if not 1 <= m < len(pool):
        raise ValidationError("calibration split must leave both parts nonempty")
    return ts, pool.subset(np.sort(perm[:m])), pool.subset(np.sort(perm[m:]))


def _memberships(groups, test: Dataset) -> dict:
    cols = _Columns.of(test)
    return {g.name: g.members(cols, len(test)) for g in groups}


def _set_sizes(pred, test, eps, grid, width):
    if pred.task.is_classification:
        return classification_masks(pred, test.X, test.base, eps).sum(axis=1).astype(float), None
    if analytic_available(pred):
        lo, hi = analytic_intervals(pred, test.X, test.base, eps)
        return interval_grid_size(lo, hi, grid, width), np.maximum(hi - lo, 0.0)
    return grid_masks(pred, test.X, test.base, eps, grid).sum(axis=1) * width, None


def _run_trial(args):
    c, t, n_calib, pool = args
    alpha = float(c["alpha"])
    score = _score(c)
    groups = [Group.from_dict(g) for g in c["eval_groups"]]
    ts, cal, test = _data_for_trial(c, t, n_calib, pool)
    eps = draw_test_eps(ts, len(test))
    member = _memberships(groups, test)
    grid, width = default_grid(cal.y, int(c["grid_bins"])) if not cal.task.is_classification else (None, 1.0)
    records = []
    for m in c["methods"]:
        spec = None if m.get("groups") is None else GroupSpec.from_dict(m["groups"])
        extra = {}
        if m["method"] == "testtime_qr":
            cand = np.arange(cal.task.n_classes) if cal.task.is_classification else grid
            sets = [testtime_qr_predict(cal, test.X[i], cand, spec, score, alpha, ts,
                                        base_outputs=test.base[i], task=cal.task, test_index=i)
                    for i in range(len(test))]
            if cal.task.is_classification:
                cov = np.array([s.label_mask[int(y)] for s, y in zip(sets, test.y)])
                sizes = np.array([s.label_mask.sum() for s in sets], dtype=float)
            else:
                j = np.abs(grid[None, :] - test.y[:, None]).argmin(axis=1)
                cov = np.array([s.grid_mask[k] for s, k in zip(sets, j)])
                sizes = np.array([s.grid_mask.sum() * width for s in sets])
            diag = {}
        else:
            pred = calibrate(m["method"], cal, spec, score, alpha, ts, adjusted=bool(m["adjusted"]))
            cov = covered(pred, test, eps)
            sizes = lengths = None
            if c["set_size"]:
                sizes, lengths = _set_sizes(pred, test, eps, grid, width)
                if lengths is not None:
                    extra["mean_interval_length"] = float(np.mean(lengths))
            diag = pred.diagnostics
        rep = CoverageReport.from_coverage(cov, member, alpha, sizes, int(c["min_group_count"]), extra) \
            if member else None
        records.append({
            "trial": t,
            "seed": ts,
            "method": m["name"],
            "n_calib": len(cal),
            "n_test": len(test),
            "marginal_miscoverage": float(np.mean(~cov)),
            "mean_set_size": None if sizes is None else float(np.mean(sizes)),
            "report": None if rep is None else rep.to_dict(),
            "diagnostics": _diag_summary(diag),
        })
    return records


def _diag_summary(diag: dict) -> dict:
    keep = ("objective", "interpolated_count", "max_subgradient_residual", "iterations", "rank",
            "rank_deficient", "n", "d", "threshold")
    return {k: diag[k] for k in keep if k in diag}


def _stats(values) -> dict:
    v = np.array([x for x in values if x is not None], dtype=float)
    if v.size == 0:
        return {"mean": None, "sd": None, "min": None, "max": None, "n": 0}
    return {"mean": float(v.mean()), "sd": float(v.std(ddof=1)) if v.size > 1 else 0.0,
            "min": float(v.min()), "max": float(v.max()), "n": int(v.size)}


@dataclass(eq=False)
class ExperimentReport:
    config: dict
    records: list
    summary: list = field(default_factory=list)
    timestamp: str | None = None

    def result(self, method: str, n_calib: int | None = None) -> dict:
        for s in self.summary:
            if s["method"] == method and (n_calib is None or s["n_calib"] == n_calib):
                return s
        raise KeyError((method, n_calib))

    def to_dict(self) -> dict:
        d = {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "config": self.config,
            "summary": self.summary,
            "trials": self.records,
        }
        if self.timestamp is not None:
            d["timestamp"] = self.timestamp
        return d

    def to_json(self) -> str:
        return json.dumps(_clean(self.to_dict()), indent=2, sort_keys=True, allow_nan=False) + "\n"

    def _rows(self):
        for s in self.summary:
            for g, v in s["per_group"].items():
                yield [s["method"], s["n_calib"], g, v["mean"], v["sd"], v["min"], v["max"],
                       v["count_mean"], v["mc_band"]]
            cd = s["cd"]
            yield [s["method"], s["n_calib"], "__cd__", cd["mean"], cd["sd"], cd["min"], cd["max"],
                   None, None]

    _HEADER = ["method", "n_calib", "group", "mean", "sd", "min", "max", "count_mean", "mc_band"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self._HEADER)
        for r in self._rows():
            w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in r])
        return buf.getvalue()

    def to_tsv(self) -> str:
        lines = ["# " + "\t".join(self._HEADER)]
        for r in self._rows():
            lines.append("\t".join("nan" if v is None else (repr(v) if isinstance(v, float) else str(v))
                                   for v in r))
        return "\n".join(lines) + "\n"


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clean(v) for v in obj]
    return obj


def _summarize(c, records) -> list:
    out = []
    keys = []
    for r in records:
        k = (r["method"], r["n_calib"])
        if k not in keys:
            keys.append(k)
    alpha = float(c["alpha"])
    for method, n in keys:
        rs = [r for r in records if r["method"] == method and r["n_calib"] == n]
        per_group = {}
        reps = [r["report"] for r in rs if r["report"] is not None]
        if reps:
            for g in reps[0]["per_group"]:
                ms = [rep["per_group"][g]["miscoverage"] for rep in reps]
                counts = [rep["per_group"][g]["count"] for rep in reps]
                st = _stats(ms)
                st["count_mean"] = float(np.mean(counts))
                total = int(np.sum(counts))
                st["mc_band"] = mc_band(alpha, total) if total else None
                per_group[g] = st
        out.append({
            "method": method,
            "n_calib": n,
            "trials": len(rs),
            "per_group": per_group,
            "cd": _stats([rep["cd"] for rep in reps]),
            "minmax_gap": _stats([rep["minmax_gap"] for rep in reps]),
            "marginal_miscoverage": _stats([r["marginal_miscoverage"] for r in rs]),
            "mean_set_size": _stats([r["mean_set_size"] for r in rs]),
        })
    return out


def run_experiment(config: dict, jobs: int = 1, timestamp: str | None = None) -> ExperimentReport:
    """Run every (trial, calibration size, method) combination and aggregate."""
    c = normalize_config(config)
    pool = None
    if c["data"]["source"] == "csv":
        d = c["data"]
        pool = read_csv(d["path"], Task.from_dict(d["task"]))
    sizes = c["n_calib"] or [None]
    work = [(c, t, n, pool) for n in sizes for t in range(int(c["trials"]))]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_trial, work))
    else:
        results = [_run_trial(w) for w in work]
    records = [r for rs in results for r in rs]
    return ExperimentReport(c, records, _summarize(c, records), timestamp)
