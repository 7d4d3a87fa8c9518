"""Synthetic data with group-dependent noise.

Regression: ``y = x @ theta + sigma(x) * e`` with ``e ~ N(0, 1)``. The noise
scale is the product of per-group factors, so groups differ only in spread.

``overlapping(k)``
    ``x ~ N(0, I_p)``; group ``j`` is ``{x_j > 0}`` and multiplies sigma by
    ``scales[j]`` (default: 4 for group 0, 1 otherwise).
``mondrian(k)``
    ``x ~ N(0, I_p)``; ``x0`` cut at the ``j/k`` normal quantiles into ``k``
    equally likely cells, cell ``j`` having sigma ``scales[j]``.
``fractional(k, noise)``
    ``x0`` uniform on ``{0, .., k + 1}`` (the other coordinates normal) with
    sigma ``scales[x0]``. The latent tag ``z`` equals ``x0`` with probability
    ``1 - noise`` and is uniform otherwise. The ``k`` evaluation groups are
    ``{z in {j, j + 1}}``, so ``P[z in G | x, y] = P[z in G | x0]``.

Base outputs are a CQR band. ``base="oracle"`` gives the true conditional
``base_alpha/2`` and ``1 - base_alpha/2`` quantiles; ``base="linear"`` gives
an ordinary least-squares fit plus/minus one constant half-width fitted on a
separate training sample, which ignores the heteroskedasticity.

Classification: ``P[y | x] = softmax(x @ W / temperature(x))`` where the
temperature is the same product of group factors; ``base="oracle"`` emits the
true probabilities and ``base="linear"`` a multinomial logistic fit that
ignores the temperature.

Distribution parameters (``theta``, ``W``, the linear base predictor) depend
only on ``design_seed``; ``seed`` drives the samples.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from statistics import NormalDist

import numpy as np

from .. import scores as sc
from ..core import Dataset, Task, empirical_quantile
from ..errors import ValidationError
from ..groups import Group, Predicate

STRUCTURES = ("overlapping", "mondrian", "fractional")
_DESIGN = 11
_TRAIN = 12
_CALIB = 13
_TESTDATA = 14


@dataclass(frozen=True)
class SynthConfig:
    n_calib: int = 1000
    n_test: int = 1000
    p: int = 5
    structure: str = "overlapping"
    k: int = 2
    noise: float = 0.3
    scales: tuple | None = None
    base: str = "oracle"
    task: str = "regression"
    n_classes: int = 4
    base_alpha: float = 0.1
    n_train: int = 5000
    seed: int = 0
    design_seed: int = 0

    def __post_init__(self):
        if self.n_calib < 1 or self.n_test < 1 or self.n_train < 2:
            raise ValidationError("synth sizes must be >= 1")
        if self.structure not in STRUCTURES:
            raise ValidationError(f"unknown synth structure {self.structure!r}")
        if self.k < 1:
            raise ValidationError("synth k must be >= 1")
        if self.structure == "overlapping" and self.p < self.k:
            raise ValidationError("overlapping(k) needs p >= k")
        if self.p < 1:
            raise ValidationError("p must be >= 1")
        if self.base not in ("oracle", "linear"):
            raise ValidationError(f"unknown base predictor {self.base!r}")
        if self.task not in ("regression", "classification"):
            raise ValidationError(f"unknown task {self.task!r}")
        if self.task == "classification" and self.n_classes < 2:
            raise ValidationError("classification synth needs n_classes >= 2")
        if self.structure == "fractional" and not 0.0 <= self.noise <= 1.0:
            raise ValidationError("fractional noise must be in [0, 1]")
        if not 0.0 < self.base_alpha < 1.0:
            raise ValidationError("base_alpha must be in (0, 1)")
        if self.scales is not None:
            s = tuple(float(v) for v in self.scales)
            if any(not v > 0 for v in s):
                raise ValidationError("noise scales must be > 0")
            object.__setattr__(self, "scales", s)

    @property
    def levels(self) -> int:
        return self.k + 2

    @property
    def scale_vector(self) -> np.ndarray:
        n = self.levels if self.structure == "fractional" else self.k
        if self.scales is None:
            if self.structure == "overlapping":
                default = [4.0] + [1.0] * (n - 1)
            elif self.structure == "mondrian":
                default = [1.0] * n
            else:
                default = list(np.linspace(1.0, 4.0, n))
            return np.array(default)
        out = np.ones(n)
        m = min(n, len(self.scales))
        out[:m] = self.scales[:m]
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = None if self.scales is None else list(self.scales)
        return d

    @classmethod
    def from_dict(cls, d) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown synth fields {sorted(extra)}")
        d = dict(d)
        if d.get("scales") is not None:
            d["scales"] = tuple(d["scales"])
        return cls(**d)

    def replace(self, **kw) -> "SynthConfig":
        return SynthConfig.from_dict({**self.to_dict(), **kw})


def _cuts(k):
    nd = NormalDist()
    return [nd.inv_cdf(j / k) for j in range(1, k)]


def synth_groups(config: SynthConfig) -> list:
    """Evaluation groups implied by the design."""
    if config.structure == "overlapping":
        return [Group(f"x{j}>0", (Predicate(f"x{j}", ">", 0.0),)) for j in range(config.k)]
    if config.structure == "mondrian":
        cuts = _cuts(config.k)
        out = []
        for j in range(config.k):
            where = []
            if j > 0:
                where.append(Predicate("x0", ">=", cuts[j - 1]))
            if j < config.k - 1:
                where.append(Predicate("x0", "<", cuts[j]))
            out.append(Group(f"cell{j}", tuple(where)))
        return out
    return [Group(f"z{j}{j + 1}", (Predicate("z", "in", [j, j + 1]),)) for j in range(config.k)]


class _Design:
    def __init__(self, config: SynthConfig):
        self.c = config
        rng = sc.rng_for(config.design_seed, _DESIGN)
        p = config.p
        self.theta = rng.standard_normal(p) / np.sqrt(p)
        self.W = rng.standard_normal((p, config.n_classes)) * 1.5 / np.sqrt(p)
        self.scale = config.scale_vector
        self.cuts = np.array(_cuts(config.k)) if config.structure == "mondrian" else None
        self.linear = None
        if config.base == "linear":
            self.linear = self._fit_linear(sc.rng_for(config.design_seed, _TRAIN))

    def covariates(self, rng, n):
        c = self.c
        X = rng.standard_normal((n, c.p))
        z = None
        if c.structure == "fractional":
            L = c.levels
            x0 = rng.integers(0, L, n)
            X[:, 0] = x0
            flip = rng.random(n) < c.noise
            z = np.where(flip, rng.integers(0, L, n), x0)
        return X, z

    def sigma(self, X):
        c = self.c
        if c.structure == "overlapping":
            pos = X[:, : c.k] > 0
            return np.prod(np.where(pos, self.scale[None, :], 1.0), axis=1)
        if c.structure == "mondrian":
            return self.scale[np.searchsorted(self.cuts, X[:, 0], side="right")]
        return self.scale[X[:, 0].astype(np.int64)]

    def probs(self, X):
        logits = (X @ self.W) / self.sigma(X)[:, None]
        logits -= logits.max(axis=1, keepdims=True)
        E = np.exp(logits)
        return E / E.sum(axis=1, keepdims=True)

    def labels(self, rng, X):
        if self.c.task == "regression":
            return X @ self.theta + self.sigma(X) * rng.standard_normal(X.shape[0])
        P = self.probs(X)
        u = rng.random(X.shape[0])
        y = (P.cumsum(axis=1) < u[:, None]).sum(axis=1)
        return np.minimum(y, self.c.n_classes - 1).astype(float)

    def _fit_linear(self, rng):
        c = self.c
        X, _ = self.covariates(rng, c.n_train)
        y = self.labels(rng, X)
        A = np.column_stack([X, np.ones(len(X))])
        if c.task == "regression":
            coef, *_ = np.linalg.lstsq(A, y, rcond=None)
            half = empirical_quantile(np.abs(y - A @ coef), 1.0 - c.base_alpha)
            return {"coef": coef, "half": half}
        Y = np.eye(c.n_classes)[y.astype(np.int64)]
        W = np.zeros((A.shape[1], c.n_classes))
        for _ in range(300):
            L = A @ W
            L -= L.max(axis=1, keepdims=True)
            P = np.exp(L)
            P /= P.sum(axis=1, keepdims=True)
            W -= 0.5 * A.T @ (P - Y) / len(y)
        return {"W": W}

    def base(self, X):
        c = self.c
        if c.task == "regression":
            if self.linear is None:
                nd = NormalDist()
                mu, s = X @ self.theta, self.sigma(X)
                lo = mu + s * nd.inv_cdf(c.base_alpha / 2)
                hi = mu + s * nd.inv_cdf(1 - c.base_alpha / 2)
                return np.column_stack([lo, hi])
            A = np.column_stack([X, np.ones(len(X))])
            f = A @ self.linear["coef"]
            h = self.linear["half"]
            return np.column_stack([f - h, f + h])
        if self.linear is None:
            return self.probs(X)
        L = np.column_stack([X, np.ones(len(X))]) @ self.linear["W"]
        L -= L.max(axis=1, keepdims=True)
        P = np.exp(L)
        return P / P.sum(axis=1, keepdims=True)

    def task(self) -> Task:
        if self.c.task == "regression":
            return Task("regression")
        return Task("classification", self.c.n_classes)

    def sample(self, rng, n) -> Dataset:
        X, z = self.covariates(rng, n)
        y = self.labels(rng, X)
        return Dataset(X, y, self.task(), z, self.base(X))


_DESIGNS: dict = {}


def design(config: SynthConfig) -> _Design:
    key = json.dumps({k: v for k, v in config.to_dict().items()
                      if k not in ("seed", "n_calib", "n_test")}, sort_keys=True)
    d = _DESIGNS.get(key)
    if d is None:
        d = _DESIGNS[key] = _Design(config)
    return d


def sample(config: SynthConfig, n: int, rng) -> Dataset:
    """``n`` fresh draws from the (untilted) design."""
    return design(config).sample(rng, n)


def synth_generate(config: SynthConfig) -> tuple:
    """Independent calibration and test datasets for ``config.seed``."""
    d = design(config)
    calib = d.sample(sc.rng_for(config.seed, _CALIB), config.n_calib)
    test = d.sample(sc.rng_for(config.seed, _TESTDATA), config.n_test)
    return calib, test
