"""Non-conformity scores and their randomized (jittered) versions.

Every randomized evaluation takes its uniforms from a counter-based Philox
stream keyed by ``(seed, stream tag, ...)``. Row ``i`` of a draw of shape
``(n, 2)`` depends only on the key and ``i``, so an example's noise does not
change when more rows are requested. Column 0 feeds the APS tie-break and
column 1 the jitter.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .core import Dataset, Task
from .errors import ValidationError

# stream tags
CALIBRATION = 1
TEST = 2
TESTTIME_CALIBRATION = 3
SYNTH = 4
SHIFT = 5
SPLIT = 6

DEFAULT_JITTER_RATIO = 1e-6
_BASE_KINDS = ("abs_residual", "cqr", "aps")


def rng_for(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, *key)``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) for k in key]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def draw_eps(seed: int, tag: int, n: int, *key: int) -> np.ndarray:
    """``(n, 2)`` Uniform[0, 1) noise for ``n`` examples."""
    return rng_for(seed, tag, *key).random((n, 2))


@dataclass(frozen=True)
class ScoreSpec:
    """A score function: ``abs_residual``, ``cqr``, ``aps`` or ``jittered``.

    ``jittered`` wraps ``inner`` and adds ``eta * (eps - 0.5)``. ``eta=None``
    means "resolve from the calibration scores" (``1e-6`` times their
    standard deviation); calibration stores the resolved value.
    """

    kind: str
    inner: "ScoreSpec | None" = None
    eta: float | None = None

    def __post_init__(self):
        if self.kind == "jittered":
            if self.inner is None or self.inner.kind == "jittered":
                raise ValidationError("jittered needs a non-jittered inner score")
            if self.eta is not None and not self.eta > 0:
                raise ValidationError(f"jitter eta must be > 0, got {self.eta}")
        elif self.kind not in _BASE_KINDS:
            raise ValidationError(f"unknown score kind {self.kind!r}")

    @property
    def base(self) -> "ScoreSpec":
        return self.inner if self.kind == "jittered" else self

    @property
    def is_jittered(self) -> bool:
        return self.kind == "jittered"

    @property
    def rng_required(self) -> bool:
        return self.is_jittered or self.base.kind == "aps"

    def arity(self, task: Task) -> int:
        k = self.base.kind
        if k == "abs_residual":
            return 1
        if k == "cqr":
            return 2
        return int(task.n_classes)

    def check_task(self, task: Task) -> None:
        k = self.base.kind
        if k == "aps" and not task.is_classification:
            raise ValidationError("aps score requires a classification task")
        if k in ("abs_residual", "cqr") and task.is_classification:
            raise ValidationError(f"{k} score requires a regression task")

    def resolved(self, calibration_scores) -> "ScoreSpec":
        if not self.is_jittered or self.eta is not None:
            return self
        s = np.asarray(calibration_scores, dtype=float)
        scale = float(np.std(s)) if s.size > 1 else 0.0
        if not scale > 0:
            scale = 1.0 + float(np.max(np.abs(s), initial=0.0))
        return ScoreSpec("jittered", self.inner, DEFAULT_JITTER_RATIO * scale)

    def to_dict(self) -> dict:
        if self.is_jittered:
            return {"kind": "jittered", "inner": self.inner.to_dict(), "eta": self.eta}
        return {"kind": self.kind}

    @classmethod
    def from_dict(cls, d) -> "ScoreSpec":
        if isinstance(d, str):
            return parse_score(d)
        if d.get("kind") == "jittered":
            return cls("jittered", cls.from_dict(d["inner"]), d.get("eta"))
        return cls(d["kind"])


def parse_score(text: str) -> ScoreSpec:
    """``cqr``, ``aps``, ``abs_residual``, ``jittered(cqr)`` or ``jittered(cqr,1e-6)``."""
    text = text.strip()
    m = re.fullmatch(r"jittered\(\s*(\w+)\s*(?:,\s*([^)\s]+)\s*)?\)", text)
    if m:
        eta = None
        if m.group(2) is not None:
            try:
                eta = float(m.group(2))
            except ValueError:
                raise ValidationError(f"bad jitter width in {text!r}") from None
        return ScoreSpec("jittered", ScoreSpec(m.group(1)), eta)
    return ScoreSpec(text)


# --------------------------------------------------------------------------
# scalar scores

def _arity(base_outputs, k, name):
    b = np.asarray(base_outputs, dtype=float).reshape(-1)
    if b.size != k:
        raise ValidationError(f"{name} needs {k} base output(s), got {b.size}")
    return b


def abs_residual(base_outputs, y) -> float:
    (f,) = _arity(base_outputs, 1, "abs_residual")
    return abs(float(y) - f)


def cqr_score(base_outputs, y) -> float:
    lo, hi = _arity(base_outputs, 2, "cqr")
    return max(float(y) - hi, lo - float(y))


def _check_probs(P):
    if np.any(P < 0) or np.any(np.abs(P.sum(axis=-1) - 1.0) > 1e-6):
        raise ValidationError("class probabilities must be nonnegative and sum to 1")


def aps_score(probs, label, eps) -> float:
    p = np.asarray(probs, dtype=float).reshape(-1)
    _check_probs(p)
    label = int(label)
    if not 0 <= label < p.size:
        raise ValidationError(f"label {label} outside [0, {p.size})")
    if not 0.0 <= eps <= 1.0:
        raise ValidationError(f"eps must be in [0, 1], got {eps}")
    # labels ranked ahead: larger probability, or equal probability and lower index
    ahead = (p > p[label]) | ((p == p[label]) & (np.arange(p.size) < label))
    return float(np.sum(p[ahead]) + eps * p[label])


def jittered(inner_score, eps, eta):
    if not eta > 0:
        raise ValidationError(f"jitter eta must be > 0, got {eta}")
    if np.ndim(eps) or np.ndim(inner_score):
        return np.asarray(inner_score, dtype=float) + eta * (np.asarray(eps, dtype=float) - 0.5)
    return float(inner_score) + eta * (float(eps) - 0.5)


# --------------------------------------------------------------------------
# batch evaluation

def base_scores(spec: ScoreSpec, base: np.ndarray, y, eps_aps=None) -> np.ndarray:
    """Unjittered scores of labels ``y`` (shape (n,) or (n, m)) for each row."""
    kind = spec.base.kind
    y = np.asarray(y, dtype=float)
    col = (lambda j: base[:, j]) if y.ndim == 1 else (lambda j: base[:, j][:, None])
    if kind == "abs_residual":
        return np.abs(y - col(0))
    if kind == "cqr":
        return np.maximum(y - col(1), col(0) - y)
    all_labels = aps_all_labels(base, eps_aps)
    idx = y.astype(np.int64)
    if y.ndim == 1:
        return all_labels[np.arange(len(idx)), idx]
    return np.take_along_axis(all_labels, idx, axis=1)


def aps_all_labels(P, eps, backend=None) -> np.ndarray:
    P = np.ascontiguousarray(P, dtype=float)
    _check_probs(P)
    eps = np.ascontiguousarray(eps, dtype=float)
    return _kernels.kernels(backend)["aps_all_labels"](P, eps)


def scores(spec: ScoreSpec, base: np.ndarray, y, eps: np.ndarray) -> np.ndarray:
    """Randomized scores ``S~(x_i, y, eps_i)``; ``eps`` has shape (n, 2).

    ``y`` is either one label per row (shape (n,)) or a candidate matrix of
    shape (n, m) sharing each row's noise.
    """
    s = base_scores(spec, base, y, eps[:, 0])
    if spec.is_jittered:
        if spec.eta is None:
            raise ValidationError("jitter width unresolved; calibrate first")
        shift = spec.eta * (eps[:, 1] - 0.5)
        s = s + (shift if s.ndim == 1 else shift[:, None])
    return s


def calibration_scores(spec: ScoreSpec, dataset: Dataset, seed: int, tag: int = CALIBRATION,
                       key: tuple = ()):
    """Resolve this score spec against ``dataset`` and return ``(spec, scores, eps)``."""
    spec.check_task(dataset.task)
    eps = draw_eps(seed, tag, len(dataset), *key)
    raw = base_scores(spec, dataset.base, dataset.y, eps[:, 0])
    spec = spec.resolved(raw)
    return spec, scores(spec, dataset.base, dataset.y, eps), eps
