"""Exact linear quantile regression under the pinball loss.

The problem ``min_beta sum_i rho(s_i - phi_i @ beta)`` is the linear program

    minimize   sum_i (1 - alpha) u_i + alpha v_i
    subject to u_i - v_i = s_i - phi_i @ beta,   u, v >= 0,

and its vertices are the "elemental" fits that interpolate ``d`` rows. The
solver walks those vertices with basis exchanges. Every move follows an edge
of the feasible region and goes to the exact minimizer along it (a weighted
median of the breakpoints), so the objective never increases.

Among optimal solutions the lexicographically smallest ``beta`` is returned.
For an intercept-only basis that is the smallest minimizer, i.e. the
``ceil((1 - alpha) n)``-th order statistic.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .core import SLOPE_RTOL, BasisMatrix, check_alpha, quantile_rank
from .errors import (
    DegenerateInterpolationError,
    InvariantError,
    SolverError,
    UnboundedError,
    ValidationError,
)

INTERP_RTOL = 1e-8
_ZERO_RTOL = 1e-11
_TIE_RTOL = 1e-13
_REFRESH_EVERY = 64
_MAX_EDGE_SUBSETS = 200_000


def pinball_loss(theta, s, alpha):
    """(1 - alpha)(s - theta) if s >= theta else alpha (theta - s)."""
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"alpha must be in (0, 1), got {alpha}")
    u = np.asarray(s, dtype=float) - np.asarray(theta, dtype=float)
    out = np.where(u >= 0.0, (1.0 - alpha) * u, -alpha * u)
    return float(out) if out.ndim == 0 else out


def interpolation_tol(scores):
    return INTERP_RTOL * (1.0 + np.abs(scores))


@dataclass(frozen=True, eq=False)
class OptimalityReport:
    residual: np.ndarray
    interpolated_count: int
    ok: bool
    interpolated_indices: np.ndarray = field(repr=False, default=None)


@dataclass(frozen=True, eq=False)
class QrSolution:
    beta: np.ndarray
    objective: float
    interpolated_indices: np.ndarray
    subgradient_residual: np.ndarray
    basis_rows: np.ndarray
    iterations: int = 0
    rank: int = 0
    dropped_columns: tuple = ()

    @property
    def interpolated_count(self) -> int:
        return int(self.interpolated_indices.size)

    @property
    def rank_deficient(self) -> bool:
        return bool(self.dropped_columns)

    def diagnostics(self) -> dict:
        return {
            "objective": float(self.objective),
            "interpolated_count": self.interpolated_count,
            "max_subgradient_residual": float(np.max(np.abs(self.subgradient_residual), initial=0.0)),
            "iterations": int(self.iterations),
            "rank": int(self.rank),
            "rank_deficient": self.rank_deficient,
            "dropped_columns": [int(j) for j in self.dropped_columns],
        }


def _as_matrix(basis):
    Phi = basis.values if isinstance(basis, BasisMatrix) else np.asarray(basis, dtype=float)
    if Phi.ndim == 1:
        Phi = Phi[:, None]
    return Phi


def check_optimality(basis, scores, alpha, beta, tol=1e-9, interp_rtol=INTERP_RTOL) -> OptimalityReport:
    """Subgradient certificate for ``beta``.

    ``residual_j = (1/n) sum_i phi_ij (alpha - 1{s_i > phi_i @ beta})``; the fit
    is optimal when every ``|residual_j|`` is covered by the slack
    ``(1/n) sum_{i interpolated} |phi_ij|`` that interpolated rows can absorb.
    """
    Phi = _as_matrix(basis)
    s = np.asarray(scores, dtype=float).reshape(-1)
    beta = np.asarray(beta, dtype=float).reshape(-1)
    if Phi.shape[0] != s.shape[0] or Phi.shape[1] != beta.shape[0]:
        raise ValidationError(
            f"dimension mismatch: basis {Phi.shape}, scores {s.shape}, beta {beta.shape}"
        )
    n = s.shape[0]
    q = Phi @ beta
    interp = np.abs(q - s) <= interp_rtol * (1.0 + np.abs(s))
    gamma = alpha - (s > q)
    residual = Phi.T @ gamma / n
    slack = np.abs(Phi[interp]).sum(axis=0) / n
    scale = max(1.0, float(np.max(np.abs(Phi), initial=0.0)))
    ok = bool(np.all(np.abs(residual) <= slack + tol * scale))
    return OptimalityReport(residual, int(interp.sum()), ok, np.flatnonzero(interp))


def _independent_columns(Phi):
    """Greedy column subset of full rank, in column order."""
    keep = []
    for j in range(Phi.shape[1]):
        trial = keep + [j]
        if np.linalg.matrix_rank(Phi[:, trial]) == len(trial):
            keep.append(j)
    return keep


def _initial_rows(P, s, alpha):
    """Pick d independent rows whose scores sit near the marginal quantile."""
    n, d = P.shape
    k = quantile_rank(n, 1.0 - alpha)
    q0 = np.partition(s, k - 1)[k - 1]
    order = np.argsort(np.abs(s - q0), kind="stable")
    # duplicate rows cannot add rank; visit each distinct row once
    _, first = np.unique(P[order], axis=0, return_index=True)
    candidates = order[np.sort(first)]
    chosen = []
    Q = np.zeros((d, 0))
    for i in candidates:
        row = P[i]
        norm = np.linalg.norm(row)
        if norm == 0.0:
            continue
        res = row - Q @ (Q.T @ row)
        rn = np.linalg.norm(res)
        if rn > 1e-8 * norm:
            chosen.append(int(i))
            Q = np.column_stack([Q, res / rn])
            if len(chosen) == d:
                break
    if len(chosen) < d:
        raise SolverError("could not find d linearly independent rows")
    return np.array(chosen, dtype=np.int64)


def _null_vector(rows):
    """Unit vector spanning the null space of a (d-1, d) matrix of rank d-1."""
    d = rows.shape[1]
    if rows.shape[0] == 0:
        return np.ones(1) if d == 1 else None
    _, sv, vt = np.linalg.svd(rows)
    if sv.size < d - 1 or sv[-1] <= 1e-10 * max(sv[0], 1e-300):
        return None
    return vt[-1]


def _lex_negative(v, tol):
    for x in v:
        if x < -tol:
            return True
        if x > tol:
            return False
    return False


class _Simplex:
    def __init__(self, P, s, alpha, backend=None):
        self.P = np.ascontiguousarray(P)
        self.s = np.ascontiguousarray(s)
        self.alpha = alpha
        self.n, self.d = P.shape
        self.k = _kernels.kernels(backend)
        self.ztol = _ZERO_RTOL * (1.0 + np.abs(self.s))
        self.iterations = 0

    # basis bookkeeping -----------------------------------------------------

    def set_basis(self, H):
        self.H = np.array(H, dtype=np.int64)
        self.basic = np.zeros(self.n, dtype=np.bool_)
        self.basic[self.H] = True
        self.refactor()

    def refactor(self):
        B = self.P[self.H]
        try:
            self.Binv = np.linalg.inv(B)
            self.beta = np.linalg.solve(B, self.s[self.H])
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"singular basis {self.H.tolist()}") from exc
        self.G = np.ascontiguousarray(self.P @ self.Binv)
        self.r = self.s - self.P @ self.beta
        self.r[self.H] = 0.0

    def move(self, direction, g, t, enter):
        """Step ``t`` along ``direction`` (with ``g = P @ direction``)."""
        self.beta = self.beta + t * direction
        self.r -= t * g
        self.r[enter] = 0.0

    def exchange(self, k, enter):
        self.basic[self.H[k]] = False
        self.basic[enter] = True
        self.H[k] = enter
        self.k["pivot"](self.G, self.Binv, enter, k)

    # main loop -------------------------------------------------------------

    def solve(self, max_iter):
        a = self.alpha
        lex = False
        since_refresh = 0
        while True:
            self.iterations += 1
            if self.iterations > max_iter:
                raise SolverError(f"no convergence after {max_iter} basis exchanges")
            if since_refresh >= _REFRESH_EVERY:
                self.refactor()
                since_refresh = 0
            A, zp, zn, gabs, nzero = self.k["slope_terms"](self.r, self.G, self.basic, a, self.ztol)
            d_plus = A + a + (1.0 - a) * zn + a * zp
            d_minus = -A + (1.0 - a) + (1.0 - a) * zp + a * zn
            tol = SLOPE_RTOL * (gabs + 1.0)
            step = None
            if not lex:
                cand = np.concatenate([d_plus, d_minus])
                j = int(np.argmin(cand / np.concatenate([tol, tol])))
                if cand[j] < -tol[j % self.d]:
                    k, sigma = j % self.d, (1.0 if j < self.d else -1.0)
                    step = (k, sigma, cand[j])
            else:
                step = self._lex_basis_step(d_plus, d_minus, tol)
            if step is not None:
                k, sigma, slope0 = step
                g = self.G[:, k]
                enter, t = self.k["line_search"](self.r, g, sigma, self.basic, self.ztol, slope0)
                if enter < 0:
                    raise UnboundedError("pinball objective unbounded along a basis edge")
                self.move(sigma * self.Binv[:, k], sigma * g, t, enter)
                self.exchange(k, enter)
                since_refresh += 1
                continue
            if nzero:
                # degenerate vertex: basis directions do not cover every edge
                if self._degenerate_step(lex):
                    since_refresh = 0
                    continue
            # certify against a freshly factored basis before finishing a phase
            if since_refresh:
                self.refactor()
                since_refresh = 0
                continue
            if not lex:
                lex = True
                continue
            return

    def _lex_basis_step(self, d_plus, d_minus, tol):
        vtol = 1e-12
        best = None
        for k in range(self.d):
            col = self.Binv[:, k]
            scale = vtol * max(1.0, float(np.max(np.abs(col))))
            for sigma, slope in ((1.0, d_plus[k]), (-1.0, d_minus[k])):
                if abs(slope) <= tol[k] and _lex_negative(sigma * col, scale):
                    v = sigma * col / max(np.max(np.abs(col)), 1e-300)
                    if best is None or _lex_less(v, best[3]):
                        best = (k, sigma, slope, v)
        return None if best is None else best[:3]

    def _degenerate_step(self, lex):
        """Enumerate the edges at a degenerate vertex and take an improving one."""
        a = self.alpha
        zero = np.abs(self.r) <= self.ztol
        zero |= self.basic
        I = np.flatnonzero(zero)
        N = ~zero
        w = np.where(self.r > 0, a - 1.0, a)
        w[~N] = 0.0
        c0 = self.P.T @ w
        # group tied rows by hyperplane normal direction
        normals, wp, wm, reps = [], [], [], []
        lookup = {}
        for i in I:
            row = self.P[i]
            m = np.max(np.abs(row))
            if m == 0.0:
                continue
            lead = row[np.flatnonzero(np.abs(row) > 1e-12 * m)[0]]
            unit = row / abs(lead) * np.sign(lead)
            key = tuple(np.round(unit, 10))
            c = abs(lead) * np.sign(lead)  # row = c * unit, c may be negative
            up = a * c if c > 0 else (1.0 - a) * -c
            dn = (1.0 - a) * c if c > 0 else a * -c
            if key in lookup:
                j = lookup[key]
                wp[j] += up
                wm[j] += dn
            else:
                lookup[key] = len(normals)
                normals.append(unit)
                wp.append(up)
                wm.append(dn)
                reps.append(int(i))
        U = np.array(normals)
        wp = np.array(wp)
        wm = np.array(wm)
        u = U.shape[0]
        d = self.d
        if math.comb(u, d - 1) > _MAX_EDGE_SUBSETS:
            raise SolverError(
                f"degenerate vertex with {u} distinct tied hyperplanes; edge enumeration too large"
            )
        scale = SLOPE_RTOL * (np.abs(self.P).sum() / max(d, 1) + 1.0)
        best = None
        for J in itertools.combinations(range(u), d - 1):
            v = _null_vector(U[list(J)])
            if v is None:
                continue
            for sv in (v, -v):
                proj = U @ sv
                slope = float(c0 @ sv + wp @ np.maximum(proj, 0.0) + wm @ np.maximum(-proj, 0.0))
                if not lex:
                    if slope < -scale and (best is None or slope < best[0]):
                        best = (slope, sv, J)
                elif abs(slope) <= scale and _lex_negative(sv, 1e-12):
                    if best is None or _lex_less(sv, best[1]):
                        best = (slope, sv, J)
        if best is None:
            return False
        slope, v, J = best
        g = self.P @ v
        mask = zero.copy()
        enter, t = self.k["line_search"](self.r, g, 1.0, mask, self.ztol, slope)
        if enter < 0:
            raise UnboundedError("pinball objective unbounded along a degenerate edge")
        self.move(v, g, t, enter)
        self.set_basis([reps[j] for j in J] + [int(enter)])
        return True


def _lex_less(u, v, tol=1e-12):
    for a, b in zip(u, v):
        if a < b - tol:
            return True
        if a > b + tol:
            return False
    return False


def fit_linear_quantile(basis, scores, alpha, *, jittered=False, warm_start=None,
                        backend=None, max_iter=None, certify=True) -> QrSolution:
    """Minimize the mean pinball loss of ``scores`` over the span of ``basis``.

    Parameters
    ----------
    basis : BasisMatrix or array of shape (n, d)
    scores : array of shape (n,)
    alpha : float in (0, 1); the fit targets the (1 - alpha)-quantile.
    jittered : bool
        Scores carry continuous noise, so at most ``d`` rows may interpolate.
        A violation raises :class:`DegenerateInterpolationError`.
    warm_start : sequence of row indices, optional
        Initial simplex basis (e.g. ``basis_rows`` of a related fit).
    certify : bool
        Run :func:`check_optimality` and raise :class:`InvariantError` if the
        certificate fails.
    """
    alpha = check_alpha(alpha)
    Phi = _as_matrix(basis)
    s = np.asarray(scores, dtype=float).reshape(-1)
    n, d_full = Phi.shape
    if n < 1:
        raise ValidationError("fit_linear_quantile needs at least one score")
    if s.shape[0] != n:
        raise ValidationError(f"dimension mismatch: basis has {n} rows, scores has {s.shape[0]}")
    if not (np.all(np.isfinite(Phi)) and np.all(np.isfinite(s))):
        raise ValidationError("basis and scores must be finite")

    cols = _independent_columns(Phi)
    dropped = tuple(j for j in range(d_full) if j not in cols)
    beta = np.zeros(d_full)
    iterations = 0
    H = np.zeros(0, dtype=np.int64)
    if cols:
        P = Phi[:, cols]
        solver = _Simplex(P, s, alpha, backend)
        H0 = None
        if warm_start is not None:
            H0 = np.asarray(warm_start, dtype=np.int64)
            ok = H0.shape == (len(cols),) and np.all((H0 >= 0) & (H0 < n)) and len(set(H0.tolist())) == len(cols)
            if ok:
                B = P[H0]
                ok = np.linalg.matrix_rank(B) == len(cols)
            if not ok:
                H0 = None
        if H0 is None:
            H0 = _initial_rows(P, s, alpha)
        solver.set_basis(H0)
        solver.solve(max_iter or (20 * n + 200))
        beta[cols] = solver.beta
        iterations = solver.iterations
        H = solver.H.copy()

    r = s - Phi @ beta
    objective = _kernels.kernels(backend)["pinball_sum"](r, alpha) / n
    report = check_optimality(Phi, s, alpha, beta)
    if certify and not report.ok:
        raise InvariantError(
            f"optimality certificate failed: residual {report.residual.tolist()}"
        )
    interpolated = report.interpolated_indices
    if jittered:
        # jitter gaps can be far below the diagnostic tolerance, so count
        # the basis rows (exact by construction) plus roundoff-level ties
        on_fit = np.abs(r) <= _TIE_RTOL * (1.0 + np.abs(s))
        on_fit[H] = True
        interpolated = np.flatnonzero(on_fit)
        if interpolated.size > d_full:
            raise DegenerateInterpolationError(interpolated, d_full)
    return QrSolution(
        beta=beta,
        objective=float(objective),
        interpolated_indices=interpolated,
        subgradient_residual=report.residual,
        basis_rows=H,
        iterations=iterations,
        rank=len(cols),
        dropped_columns=dropped,
    )
