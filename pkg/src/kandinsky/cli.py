"""Command-line interface: ``kandinsky {calibrate,predict,evaluate,synth,experiment}``.

Every option may also come from ``--config FILE.json`` (keys are the long
option names with ``-`` replaced by ``_``); explicit flags win over the file.
The effective configuration is echoed into every artifact written.

Exit codes: 0 ok, 1 I/O or parse error, 2 validation error, 3 solver error,
4 internal invariant breach. Errors print one line to stderr::

    kandinsky: error {"code": 2, "kind": "validation", "message": "..."}
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
from pathlib import Path

import numpy as np

from .core import Dataset, Task, default_grid, read_csv, write_csv
from .errors import FormatError, KandinskyError, ValidationError
from .eval.experiment import run_experiment
from .eval.metrics import CoverageReport, mc_band
from .eval.synth import SynthConfig, synth_generate, synth_groups
from .groups import Group, GroupSpec, _Columns
from .methods import CalibratedPredictor, calibrate, predict_sets, testtime_predict_sets
from .scores import parse_score

PRED_FORMAT = "kandinsky-predictions"
PRED_VERSION = 1

# option name -> (default, type) for values that can come from --config
_DEFAULTS = {
    "calibrate": {"data": None, "method": "kandinsky", "alpha": 0.1, "groups": None,
                  "scores": "jittered(cqr)", "task": "regression", "n_classes": None,
                  "seed": None, "output": None, "grid_bins": 100, "adjusted": False},
    "predict": {"data": None, "model": None, "output": None, "method": "alg2", "calib": None,
                "grid": None, "seed": None},
    "evaluate": {"data": None, "predictions": None, "groups": None, "alpha": None,
                 "output": None, "csv": None, "tsv": None, "min_group_count": 1},
    "synth": {"structure": "overlapping", "k": 2, "p": 5, "noise": 0.3, "scales": None,
              "base": "oracle", "task": "regression", "n_classes": 4, "n_calib": 1000,
              "n_test": 1000, "base_alpha": 0.1, "design_seed": 0, "seed": None,
              "out_dir": None},
    "experiment": {"experiment": None, "output": None, "csv": None, "tsv": None,
                   "trials": None, "alpha": None, "seed": None, "jobs": 1},
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kandinsky", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file with option values; flags override it")
        sp.add_argument("--timestamp", choices=("on", "off"), default=None,
                        help="include a creation timestamp in outputs (default on)")

    c = sub.add_parser("calibrate", help="fit a conformal predictor on a calibration CSV")
    c.add_argument("data", nargs="?", help="calibration CSV")
    c.add_argument("--method", choices=("kandinsky", "split", "mondrian", "class_conditional",
                                        "conservative"))
    c.add_argument("--alpha", type=float)
    c.add_argument("--groups", help="group spec JSON file")
    c.add_argument("--scores", help="score: cqr, abs_residual, aps, jittered(<score>[,eta])")
    c.add_argument("--task", choices=("regression", "classification"))
    c.add_argument("--n-classes", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--grid-bins", type=int, help="regression grid bins (default 100)")
    c.add_argument("--adjusted", action="store_true", default=None,
                   help="baselines: use the (n+1)-adjusted quantile level")
    c.add_argument("-o", "--output", help="model JSON path")
    common(c)

    pr = sub.add_parser("predict", help="write one prediction set per test row (JSON lines)")
    pr.add_argument("data", nargs="?", help="test CSV (labels optional)")
    pr.add_argument("--model", help="model JSON from calibrate")
    pr.add_argument("--method", choices=("alg2", "testtime"),
                    help="alg2: fitted threshold; testtime: per-point augmented regression")
    pr.add_argument("--calib", help="calibration CSV (required for --method testtime)")
    pr.add_argument("--grid", help="label grid LO:HI:BINS (bin midpoints)")
    pr.add_argument("--seed", type=int)
    pr.add_argument("-o", "--output", help="predictions path (JSON lines)")
    common(pr)

    e = sub.add_parser("evaluate", help="coverage report for predictions on labeled data")
    e.add_argument("data", nargs="?", help="labeled test CSV")
    e.add_argument("--predictions", help="JSON-lines file from predict")
    e.add_argument("--groups", help="JSON list of evaluation groups (default: all rows)")
    e.add_argument("--alpha", type=float, help="target miscoverage (default: from predictions)")
    e.add_argument("--min-group-count", type=int)
    e.add_argument("-o", "--output", help="report JSON path")
    e.add_argument("--csv", help="optional flat CSV report")
    e.add_argument("--tsv", help="optional gnuplot-style TSV report")
    common(e)

    s = sub.add_parser("synth", help="write synthetic calibration/test CSVs")
    s.add_argument("--structure", choices=("overlapping", "mondrian", "fractional"))
    s.add_argument("--k", type=int)
    s.add_argument("--p", type=int)
    s.add_argument("--noise", type=float)
    s.add_argument("--scales", help="comma-separated noise scale factors")
    s.add_argument("--base", choices=("oracle", "linear"))
    s.add_argument("--task", choices=("regression", "classification"))
    s.add_argument("--n-classes", type=int)
    s.add_argument("--n-calib", type=int)
    s.add_argument("--n-test", type=int)
    s.add_argument("--base-alpha", type=float)
    s.add_argument("--design-seed", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out-dir", help="directory for calib.csv, test.csv, synth.json")
    common(s)

    x = sub.add_parser("experiment", help="run a multi-trial experiment from a JSON config")
    x.add_argument("experiment", nargs="?", help="experiment config JSON")
    x.add_argument("--trials", type=int)
    x.add_argument("--alpha", type=float)
    x.add_argument("--seed", type=int)
    x.add_argument("--jobs", type=int, help="parallel worker processes (default 1)")
    x.add_argument("-o", "--output", help="report JSON path")
    x.add_argument("--csv", help="optional flat CSV report")
    x.add_argument("--tsv", help="optional gnuplot-style TSV report")
    common(x)
    return p


def _load_json(path, what):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read {what} {path}: {exc.strerror or exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{what} {path} is not valid JSON: {exc}") from exc


def _effective(args) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cmd = args.command
    eff = {**_DEFAULTS[cmd], "timestamp": "on"}
    if args.config:
        cfg = _load_json(args.config, "config file")
        if not isinstance(cfg, dict):
            raise ValidationError("config file must hold a JSON object")
        unknown = set(cfg) - set(eff)
        if unknown:
            raise ValidationError(f"unknown config keys for {cmd}: {sorted(unknown)}")
        eff.update(cfg)
    for key in eff:
        v = getattr(args, key, None)
        if v is not None:
            eff[key] = v
    if eff["timestamp"] not in ("on", "off"):
        raise ValidationError("timestamp must be 'on' or 'off'")
    if eff.get("seed") is None and "seed" in eff:
        env = os.environ.get("KANDINSKY_SEED")
        if env is not None:
            try:
                eff["seed"] = int(env)
            except ValueError:
                raise ValidationError(f"KANDINSKY_SEED must be an integer, got {env!r}") from None
        elif cmd != "experiment":  # experiments keep the seed from their own config
            eff["seed"] = 0
    return eff


def _stamp(eff) -> str | None:
    if eff.get("timestamp") == "off":
        return None
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def _require(eff, key, what):
    if eff.get(key) in (None, ""):
        raise ValidationError(f"missing required {what} (--{key.replace('_', '-')})")
    return eff[key]


def _write(path, text):
    if path is None:
        sys.stdout.write(text)
        return
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _task(eff) -> Task:
    if eff["task"] == "classification":
        if not eff.get("n_classes"):
            raise ValidationError("classification needs --n-classes")
        return Task("classification", int(eff["n_classes"]))
    return Task("regression")


def _parse_grid(text):
    try:
        lo, hi, bins = text.split(":")
        lo, hi, bins = float(lo), float(hi), int(bins)
    except ValueError:
        raise ValidationError(f"--grid must be LO:HI:BINS, got {text!r}") from None
    if not (hi > lo and bins >= 1):
        raise ValidationError("--grid needs HI > LO and BINS >= 1")
    w = (hi - lo) / bins
    return lo + w * (np.arange(bins) + 0.5)


# --------------------------------------------------------------------------
# subcommands


def cmd_calibrate(eff) -> int:
    data = _require(eff, "data", "calibration CSV")
    out = _require(eff, "output", "output model path")
    alpha = float(eff["alpha"])
    if not 0 < alpha < 1:
        raise ValidationError(f"alpha must be in (0, 1), got {alpha}")
    task = _task(eff)
    ds = read_csv(data, task)
    if not task.is_classification and len(ds) and np.all(np.isfinite(ds.y)):
        grid = default_grid(ds.y, int(eff["grid_bins"]))[0]
        ds = Dataset(ds.X, ds.y, ds.task, ds.z, ds.base, grid, ds.base_len)
    spec = None
    if eff["groups"]:
        g = eff["groups"]
        spec = GroupSpec.from_dict(g if isinstance(g, dict) else _load_json(g, "group spec"))
    score = parse_score(eff["scores"])
    pred = calibrate(eff["method"], ds, spec, score, alpha, int(eff["seed"]),
                     adjusted=bool(eff["adjusted"]))
    echo = {k: v for k, v in eff.items() if k != "timestamp"}
    stamp = _stamp(eff)
    pred = CalibratedPredictor(pred.method, pred.alpha, pred.score, pred.task, pred.seed, pred.basis,
                               pred.model, pred.thresholds, pred.grid, pred.diagnostics,
                               {"effective": echo, **({"timestamp": stamp} if stamp else {})})
    _write(out, pred.to_json())
    d = pred.diagnostics
    summary = {k: d[k] for k in ("objective", "interpolated_count", "max_subgradient_residual",
                                 "rank_deficient", "threshold", "cells", "groups", "n") if k in d}
    print(json.dumps({"model": str(out), "method": pred.method, **summary}, sort_keys=True))
    return 0


def _set_json(i, ps, grid):
    row = {"row": i, **ps.to_json()}
    if ps.grid_mask is not None:
        row["size"] = float(ps.grid_mask.sum()) * (float(np.mean(np.diff(grid))) if len(grid) > 1 else 1.0)
    elif ps.intervals is not None:
        row["size"] = float(sum(b - a for a, b in ps.intervals))
    else:
        row["size"] = int(ps.label_mask.sum())
    return row


def cmd_predict(eff) -> int:
    data = _require(eff, "data", "test CSV")
    model_path = _require(eff, "model", "model file")
    try:
        text = Path(model_path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read model {model_path}: {exc.strerror or exc}") from exc
    pred = CalibratedPredictor.from_json(text)
    test = read_csv(data, pred.task)
    k = pred.score.arity(pred.task)
    if test.base_arity != k:
        raise ValidationError(f"model score {pred.score.base.kind} needs {k} base outputs; "
                              f"test data has {test.base_arity}")
    seed = int(eff["seed"]) if eff.get("seed") is not None else pred.seed
    grid = _parse_grid(eff["grid"]) if eff.get("grid") else None
    if eff["method"] == "testtime":
        if pred.method != "kandinsky":
            raise ValidationError("--method testtime needs a kandinsky model (for its basis and score)")
        if not pred.task.is_classification and grid is None:
            raise ValidationError("--method testtime on regression needs an explicit --grid")
        calib = read_csv(_require(eff, "calib", "calibration CSV"), pred.task)
        spec = pred.basis.spec
        sets = testtime_predict_sets(calib, test, spec, pred.score, pred.alpha, seed, grid)
    else:
        sets = predict_sets(pred, test, seed, grid=grid)
    used_grid = grid if grid is not None else pred.grid
    header = {"format": PRED_FORMAT, "version": PRED_VERSION, "alpha": pred.alpha,
              "method": pred.method, "mode": eff["method"], "seed": seed,
              "task": pred.task.to_dict(),
              "grid": None if used_grid is None else [float(g) for g in used_grid],
              "config": {k: v for k, v in eff.items() if k != "timestamp"}}
    stamp = _stamp(eff)
    if stamp:
        header["timestamp"] = stamp
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(_set_json(i, s, used_grid), sort_keys=True) for i, s in enumerate(sets)]
    _write(eff.get("output"), "\n".join(lines) + "\n")
    return 0


def _read_predictions(path):
    try:
        raw = Path(path).read_text().splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read predictions {path}: {exc.strerror or exc}") from exc
    try:
        rows = [json.loads(line) for line in raw if line.strip()]
    except json.JSONDecodeError as exc:
        raise FormatError(f"predictions file {path} has a malformed line: {exc}") from exc
    if not rows or rows[0].get("format") != PRED_FORMAT:
        raise FormatError(f"{path} is not a predictions file (missing header line)")
    return rows[0], rows[1:]


def _contains(row, y, grid):
    if "labels" in row:
        return int(y) in set(row["labels"])
    if "intervals" in row:
        return any(a <= y <= b for a, b in row["intervals"])
    if "grid_mask" in row:
        if grid is None:
            raise FormatError("grid-mask predictions need the grid in the header")
        j = int(np.argmin(np.abs(np.asarray(grid) - y)))
        return row["grid_mask"][j] == "1"
    raise FormatError(f"prediction row {row.get('row')} has no set")


def cmd_evaluate(eff) -> int:
    header, rows = _read_predictions(_require(eff, "predictions", "predictions file"))
    task = Task.from_dict(header["task"])
    test = read_csv(_require(eff, "data", "labeled test CSV"), task)
    if len(rows) != len(test):
        raise ValidationError(f"{len(rows)} predictions but {len(test)} test rows")
    if not np.all(np.isfinite(test.y)):
        raise ValidationError("evaluation needs a label on every row",
                              index=int(np.flatnonzero(~np.isfinite(test.y))[0]))
    alpha = float(eff["alpha"] if eff.get("alpha") is not None else header["alpha"])
    cov = np.array([_contains(r, y, header.get("grid")) for r, y in zip(rows, test.y)])
    if eff.get("groups"):
        g = eff["groups"]
        g = g if isinstance(g, list) else _load_json(g, "group list")
        if isinstance(g, dict):
            g = g.get("groups", [])
        groups = [Group.from_dict(x) for x in g]
    else:
        groups = [Group("all", ())]
    cols = _Columns.of(test)
    member = {gr.name: gr.members(cols, len(test)) for gr in groups}
    sizes = np.array([r.get("size", np.nan) for r in rows], dtype=float)
    rep = CoverageReport.from_coverage(cov, member, alpha, sizes, int(eff["min_group_count"]))
    out = {"format": "kandinsky-report", "version": 1,
           "config": {k: v for k, v in eff.items() if k != "timestamp"},
           "report": rep.to_dict()}
    stamp = _stamp(eff)
    if stamp:
        out["timestamp"] = stamp
    _write(eff.get("output"), json.dumps(out, indent=2, sort_keys=True) + "\n")
    flat = [["group", "miscoverage", "count", "mc_band"]]
    for name, v in rep.per_group.items():
        flat.append([name, v["miscoverage"], v["count"], v["mc_band"]])
    flat.append(["__cd__", rep.cd, rep.n_test, mc_band(alpha, rep.n_test)])
    if eff.get("csv"):
        _write(eff["csv"], "\n".join(",".join("" if c is None else str(c) for c in r) for r in flat) + "\n")
    if eff.get("tsv"):
        body = ["# " + "\t".join(flat[0])] + ["\t".join("nan" if c is None else str(c) for c in r)
                                              for r in flat[1:]]
        _write(eff["tsv"], "\n".join(body) + "\n")
    return 0


def cmd_synth(eff) -> int:
    out_dir = Path(_require(eff, "out_dir", "output directory"))
    scales = eff.get("scales")
    if isinstance(scales, str):
        try:
            scales = [float(v) for v in scales.split(",")]
        except ValueError:
            raise ValidationError(f"--scales must be comma-separated numbers, got {scales!r}") from None
    cfg = SynthConfig(n_calib=int(eff["n_calib"]), n_test=int(eff["n_test"]), p=int(eff["p"]),
                      structure=eff["structure"], k=int(eff["k"]), noise=float(eff["noise"]),
                      scales=scales, base=eff["base"], task=eff["task"],
                      n_classes=int(eff["n_classes"]), base_alpha=float(eff["base_alpha"]),
                      seed=int(eff["seed"]), design_seed=int(eff["design_seed"]))
    cal, test = synth_generate(cfg)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise FormatError(f"cannot create {out_dir}: {exc.strerror or exc}") from exc
    write_csv(cal, out_dir / "calib.csv")
    write_csv(test, out_dir / "test.csv")
    meta = {"synth": cfg.to_dict(), "groups": [g.to_dict() for g in synth_groups(cfg)],
            "config": {k: v for k, v in eff.items() if k != "timestamp"}}
    stamp = _stamp(eff)
    if stamp:
        meta["timestamp"] = stamp
    _write(out_dir / "synth.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_experiment(eff) -> int:
    exp = eff["experiment"]
    if exp is None:
        raise ValidationError("missing experiment config (positional argument)")
    config = exp if isinstance(exp, dict) else _load_json(exp, "experiment config")
    for key in ("trials", "alpha", "seed"):
        if eff.get(key) is not None:
            config[key] = eff[key]
    report = run_experiment(config, jobs=max(1, int(eff["jobs"])), timestamp=_stamp(eff))
    _write(eff.get("output"), report.to_json())
    if eff.get("csv"):
        _write(eff["csv"], report.to_csv())
    if eff.get("tsv"):
        _write(eff["tsv"], report.to_tsv())
    return 0


def _fail(code, kind, message) -> int:
    msg = " ".join(str(message).split())
    sys.stderr.write("kandinsky: error " + json.dumps({"code": code, "kind": kind, "message": msg}) + "\n")
    return code


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        eff = _effective(args)
        if args.command == "calibrate":
            return cmd_calibrate(eff)
        if args.command == "predict":
            return cmd_predict(eff)
        if args.command == "evaluate":
            return cmd_evaluate(eff)
        if args.command == "synth":
            return cmd_synth(eff)
        return cmd_experiment(eff)
    except KandinskyError as exc:
        return _fail(exc.exit_code, exc.kind, exc)
    except OSError as exc:
        return _fail(1, "io", exc)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
