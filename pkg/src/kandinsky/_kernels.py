"""Hot inner loops of the simplex solver and the APS score.

Every kernel exists twice: an ``@njit`` loop version and a vectorized numpy
version. ``KANDINSKY_BACKEND=numpy`` (or a missing numba install) selects the
numpy path; the default is numba. Both paths must agree to floating-point
roundoff, which ``tests/test_kernels.py`` checks.
"""

import os

import numpy as np

try:
    import numba
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False


def _requested_backend():
    name = os.environ.get("KANDINSKY_BACKEND", "numba").strip().lower()
    if name not in ("numba", "numpy"):
        raise ValueError(f"KANDINSKY_BACKEND must be 'numba' or 'numpy', got {name!r}")
    if name == "numba" and not HAS_NUMBA:
        return "numpy"
    return name


# --------------------------------------------------------------------------
# numpy implementations

def slope_terms_np(r, G, basic, alpha, rtol):
    """Per-direction slope ingredients at a vertex.

    Returns ``(A, zpos, zneg, gabs, nzero)`` where ``A[k]`` sums the signed
    pinball weights of nonbasic rows against column ``k`` of ``G``,
    ``zpos``/``zneg`` collect the positive/negative parts of ``G`` over
    nonbasic rows sitting on the hyperplane (|r| <= rtol) and ``gabs[k]`` is
    the column's absolute sum (the scale for slope tolerances).
    """
    nb = ~basic
    pos = nb & (r > rtol)
    neg = nb & (r < -rtol)
    zero = nb & ~pos & ~neg
    w = np.where(pos, alpha - 1.0, np.where(neg, alpha, 0.0))
    A = G.T @ w
    gabs = np.abs(G).sum(axis=0)
    nzero = int(np.count_nonzero(zero))
    if nzero:
        Gz = G[zero]
        zpos = np.maximum(Gz, 0.0).sum(axis=0)
        zneg = np.maximum(-Gz, 0.0).sum(axis=0)
    else:
        zpos = np.zeros(G.shape[1])
        zneg = np.zeros(G.shape[1])
    return A, zpos, zneg, gabs, nzero


def line_search_np(r, g, sigma, basic, rtol, slope0):
    """Exact minimizer of the piecewise-linear objective along one edge.

    Moving by ``t`` changes residuals as ``r - t * sigma * g``. Breakpoints
    are visited in increasing ``t`` (ties by row index); each adds ``|g_i|``
    to the slope. Returns ``(i, t)`` for the row whose breakpoint first makes
    the slope nonnegative, or ``(-1, inf)`` when no such row exists.
    """
    sg = sigma * g
    cand = (~basic) & (np.abs(r) > rtol) & (r * sg > 0.0)
    idx = np.flatnonzero(cand)
    if idx.size == 0:
        return -1, np.inf
    t = r[idx] / sg[idx]
    order = np.argsort(t, kind="stable")
    cum = slope0 + np.cumsum(np.abs(g[idx[order]]))
    hit = np.flatnonzero(cum >= 0.0)
    if hit.size == 0:
        return -1, np.inf
    j = order[hit[0]]
    return int(idx[j]), float(t[j])


def pivot_np(G, Binv, i, k):
    """Basis exchange in place: row ``i`` enters at basis position ``k``."""
    piv = G[i, k]
    coef = G[i].copy()
    coef[k] = 0.0
    gk = G[:, k] / piv
    G -= np.outer(gk, coef)
    G[:, k] = gk
    bk = Binv[:, k] / piv
    Binv -= np.outer(bk, coef)
    Binv[:, k] = bk


def pinball_sum_np(r, alpha):
    return float(np.sum(np.maximum((1.0 - alpha) * r, -alpha * r)))


def aps_all_labels_np(P, eps):
    """APS scores of every label for every row.

    Labels are ranked by descending probability, ties broken by ascending
    class index. The score of a label is the mass of strictly higher-ranked
    labels plus ``eps`` times its own probability.
    """
    n, K = P.shape
    order = np.argsort(-P, axis=1, kind="stable")
    sp = np.take_along_axis(P, order, axis=1)
    before = np.zeros_like(sp)
    before[:, 1:] = np.cumsum(sp[:, :-1], axis=1)
    out = np.empty_like(P)
    np.put_along_axis(out, order, before, axis=1)
    return out + eps[:, None] * P


# --------------------------------------------------------------------------
# numba implementations

if HAS_NUMBA:
    _jit = numba.njit(cache=True, nogil=True)

    @_jit
    def slope_terms_nb(r, G, basic, alpha, rtol):
        n, d = G.shape
        A = np.zeros(d)
        zpos = np.zeros(d)
        zneg = np.zeros(d)
        gabs = np.zeros(d)
        nzero = 0
        for i in range(n):
            for k in range(d):
                gabs[k] += abs(G[i, k])
            if basic[i]:
                continue
            ri = r[i]
            if ri > rtol[i]:
                w = alpha - 1.0
            elif ri < -rtol[i]:
                w = alpha
            else:
                nzero += 1
                for k in range(d):
                    gik = G[i, k]
                    if gik > 0.0:
                        zpos[k] += gik
                    else:
                        zneg[k] -= gik
                continue
            for k in range(d):
                A[k] += w * G[i, k]
        return A, zpos, zneg, gabs, nzero

    @_jit
    def line_search_nb(r, g, sigma, basic, rtol, slope0):
        n = r.shape[0]
        idx = np.empty(n, dtype=np.int64)
        t = np.empty(n)
        m = 0
        for i in range(n):
            if basic[i] or abs(r[i]) <= rtol[i]:
                continue
            sg = sigma * g[i]
            if r[i] * sg > 0.0:
                idx[m] = i
                t[m] = r[i] / sg
                m += 1
        if m == 0:
            return -1, np.inf
        tt = t[:m]
        ii = idx[:m]
        order = np.argsort(tt, kind="mergesort")
        cum = slope0
        for j in range(m):
            o = order[j]
            cum += abs(g[ii[o]])
            if cum >= 0.0:
                return ii[o], tt[o]
        return -1, np.inf

    @_jit
    def pivot_nb(G, Binv, i, k):
        n, d = G.shape
        piv = G[i, k]
        coef = G[i].copy()
        coef[k] = 0.0
        for a in range(n):
            gk = G[a, k] / piv
            for j in range(d):
                if j != k:
                    G[a, j] -= gk * coef[j]
            G[a, k] = gk
        for a in range(Binv.shape[0]):
            bk = Binv[a, k] / piv
            for j in range(d):
                if j != k:
                    Binv[a, j] -= bk * coef[j]
            Binv[a, k] = bk

    @_jit
    def pinball_sum_nb(r, alpha):
        total = 0.0
        for i in range(r.shape[0]):
            ri = r[i]
            if ri >= 0.0:
                total += (1.0 - alpha) * ri
            else:
                total -= alpha * ri
        return total

    @_jit
    def aps_all_labels_nb(P, eps):
        n, K = P.shape
        out = np.empty_like(P)
        for a in range(n):
            order = np.argsort(-P[a], kind="mergesort")
            acc = 0.0
            for j in range(K):
                c = order[j]
                out[a, c] = acc + eps[a] * P[a, c]
                acc += P[a, c]
        return out


NUMPY_KERNELS = {
    "slope_terms": slope_terms_np,
    "line_search": line_search_np,
    "pivot": pivot_np,
    "pinball_sum": pinball_sum_np,
    "aps_all_labels": aps_all_labels_np,
}

if HAS_NUMBA:
    NUMBA_KERNELS = {
        "slope_terms": slope_terms_nb,
        "line_search": line_search_nb,
        "pivot": pivot_nb,
        "pinball_sum": pinball_sum_nb,
        "aps_all_labels": aps_all_labels_nb,
    }
else:  # pragma: no cover
    NUMBA_KERNELS = dict(NUMPY_KERNELS)

BACKEND = _requested_backend()


def kernels(backend=None):
    """Kernel table for ``backend`` (default: the one chosen at import)."""
    name = backend or BACKEND
    return NUMBA_KERNELS if name == "numba" else NUMPY_KERNELS
