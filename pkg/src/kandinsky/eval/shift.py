"""Coverage under a tilted test distribution.

Test points are drawn from ``dP_T = w dP`` by rejection: propose from the
design, accept with probability ``w(x, y) / B``. The tilt is normalized on a
pilot batch so that its mean under the design is one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import scores as sc
from ..core import Dataset
from ..errors import ValidationError
from ..groups import Group, _Columns
from ..methods import calibrate, covered, draw_test_eps
from .synth import SynthConfig, sample, synth_groups

_PILOT = 200_000
_PROPOSE = 16
_CAL = 21
_UNSHIFTED = 22


@dataclass(frozen=True)
class Tilt:
    """``w proportional to intercept + sum_j weights[j] * 1{in groups[j]}``."""

    groups: tuple = ()
    weights: tuple = ()
    intercept: float = 0.0
    bound: float = 5.0

    def __post_init__(self):
        if len(self.groups) != len(self.weights):
            raise ValidationError("tilt needs one weight per group")
        if not self.bound > 0:
            raise ValidationError("tilt envelope B must be > 0")
        if self.intercept < 0 or any(w < 0 for w in self.weights):
            raise ValidationError("tilt weights must be nonnegative")

    @classmethod
    def identity(cls, bound: float = 1.0) -> "Tilt":
        return cls((), (), 1.0, bound)

    @classmethod
    def group(cls, g: Group, bound: float = 5.0) -> "Tilt":
        return cls((g,), (1.0,), 0.0, bound)

    def raw(self, data) -> np.ndarray:
        cols = _Columns.of(data)
        w = np.full(len(data), float(self.intercept))
        for g, a in zip(self.groups, self.weights):
            w += a * g.members(cols, len(data))
        return w

    def to_dict(self) -> dict:
        return {"groups": [g.to_dict() for g in self.groups], "weights": list(self.weights),
                "intercept": self.intercept, "B": self.bound}

    @classmethod
    def from_dict(cls, d, config: SynthConfig | None = None) -> "Tilt":
        kind = d.get("tilt")
        bound = float(d.get("B", 5.0))
        if kind == "identity":
            return cls.identity(bound)
        if kind == "group":
            g = d.get("group", 0)
            if isinstance(g, int):
                if config is None:
                    raise ValidationError("group tilt by index needs a synth design")
                g = synth_groups(config)[g]
            else:
                g = Group.from_dict(g)
            return cls.group(g, bound)
        return cls(tuple(Group.from_dict(g) for g in d.get("groups", [])),
                   tuple(float(w) for w in d.get("weights", [])), float(d.get("intercept", 0.0)), bound)


def normalizer(config: SynthConfig, tilt: Tilt) -> float:
    pilot = sample(config, _PILOT, sc.rng_for(config.design_seed, sc.SHIFT, 0))
    m = float(np.mean(tilt.raw(pilot)))
    if not m > 0:
        raise ValidationError("tilt has zero mass under the design")
    return m


def tilted_sample(config: SynthConfig, tilt: Tilt, n: int, seed: int, norm: float | None = None):
    """``n`` draws from the tilted distribution by rejection sampling."""
    norm = normalizer(config, tilt) if norm is None else norm
    rng = sc.rng_for(seed, sc.SHIFT, 1)
    parts, have = [], 0
    while have < n:
        batch = sample(config, max(n * _PROPOSE // 4, 1000), rng)
        w = tilt.raw(batch) / norm
        if np.any(w > tilt.bound * (1 + 1e-12)):
            raise ValidationError(f"tilt envelope violated: weight {float(w.max()):.4g} > B={tilt.bound}")
        keep = np.flatnonzero(rng.random(len(batch)) * tilt.bound < w)
        parts.append(batch.subset(keep))
        have += keep.size
    X = np.vstack([p.X for p in parts])[:n]
    y = np.concatenate([p.y for p in parts])[:n]
    z = None if parts[0].z is None else np.concatenate([p.z for p in parts])[:n]
    base = np.vstack([p.base for p in parts])[:n]
    return Dataset(X, y, parts[0].task, z, base)


def shift_harness(config: SynthConfig, tilt: Tilt, group_spec, score_spec, alpha: float,
                  n_test: int, trials: int, seed: int = 0, method: str = "kandinsky") -> dict:
    """Per-trial coverage under the tilt and, as a control, under the design.

    The predictor is calibrated on untilted data each trial; both test sets
    are fresh independent draws.
    """
    norm = normalizer(config, tilt)
    shifted, unshifted = [], []
    for t in range(trials):
        ts = int(np.random.SeedSequence([seed, t]).generate_state(1)[0])
        cal = sample(config, config.n_calib, sc.rng_for(ts, _CAL))
        pred = calibrate(method, cal, group_spec, score_spec, alpha, ts)
        test_t = tilted_sample(config, tilt, n_test, ts, norm)
        test_d = sample(config, n_test, sc.rng_for(ts, _UNSHIFTED))
        shifted.append(float(np.mean(covered(pred, test_t, draw_test_eps(ts, n_test)))))
        unshifted.append(float(np.mean(covered(pred, test_d, sc.draw_eps(ts, _UNSHIFTED, n_test)))))
    shifted, unshifted = np.array(shifted), np.array(unshifted)
    diff = shifted - unshifted
    return {
        "tilt": tilt.to_dict(),
        "normalizer": norm,
        "shifted_coverage": shifted.tolist(),
        "unshifted_coverage": unshifted.tolist(),
        "mean_shifted": float(shifted.mean()),
        "mean_unshifted": float(unshifted.mean()),
        "mc_se_shifted": math.sqrt(alpha * (1 - alpha) / (n_test * trials)),
        "paired_se": float(diff.std(ddof=1) / math.sqrt(trials)) if trials > 1 else math.inf,
    }
