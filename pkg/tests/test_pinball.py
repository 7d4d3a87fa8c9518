import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from kandinsky.core import empirical_quantile
from kandinsky.errors import DegenerateInterpolationError, ValidationError
from kandinsky.pinball import check_optimality, fit_linear_quantile, pinball_loss
from kandinsky._kernels import HAS_NUMBA
from oracles import brute_force_qr, mean_pinball

BACKENDS = ["numpy"] + (["numba"] if HAS_NUMBA else [])


class TestPinballLoss:
    def test_below(self):
        assert pinball_loss(0.0, 1.0, 0.1) == pytest.approx(0.9)

    def test_above(self):
        assert pinball_loss(1.0, 0.0, 0.1) == pytest.approx(0.1)

    @pytest.mark.parametrize("alpha", [0.05, 0.5, 0.9])
    def test_zero_at_equality(self, alpha):
        assert pinball_loss(3.7, 3.7, alpha) == 0.0

    @given(st.floats(-100, 100), st.floats(-100, 100), st.floats(0.01, 0.99))
    def test_nonnegative(self, theta, s, alpha):
        assert pinball_loss(theta, s, alpha) >= 0.0


@pytest.mark.parametrize("backend", BACKENDS)
class TestFit:
    def test_constant_basis_one_to_ten(self, backend):
        s = np.arange(1.0, 11.0)
        sol = fit_linear_quantile(np.ones((10, 1)), s, 0.1, backend=backend)
        # oracle: brute-force scan over theta in the scores
        objs = [np.mean(pinball_loss(t, s, 0.1)) for t in s]
        best = min(objs)
        assert s[objs.index(best)] == 9.0
        assert sol.beta[0] == 9.0
        assert sol.objective == pytest.approx(best, rel=1e-12)

    def test_all_equal(self, backend):
        sol = fit_linear_quantile(np.ones((7, 1)), np.full(7, 2.5), 0.2, backend=backend)
        assert sol.beta[0] == 2.5 and sol.objective == 0.0

    def test_disjoint_groups_give_medians(self, backend):
        rng = np.random.default_rng(3)
        s = rng.normal(size=20)
        Phi = np.zeros((20, 2))
        Phi[:10, 0] = 1
        Phi[10:, 1] = 1
        sol = fit_linear_quantile(Phi, s, 0.5, backend=backend)
        assert sol.beta[0] == empirical_quantile(s[:10], 0.5)
        assert sol.beta[1] == empirical_quantile(s[10:], 0.5)

    def test_objective_recomputed(self, backend):
        rng = np.random.default_rng(4)
        Phi = np.column_stack([rng.normal(size=40), np.ones(40)])
        s = rng.normal(size=40)
        sol = fit_linear_quantile(Phi, s, 0.2, backend=backend)
        assert sol.objective == pytest.approx(mean_pinball(Phi, s, 0.2, sol.beta), rel=1e-9)

    def test_jittered_interpolation_bound(self, backend):
        rng = np.random.default_rng(5)
        n = 500
        Phi = np.column_stack([rng.random(n) < 0.5, rng.random(n) < 0.3, np.ones(n)]).astype(float)
        s = rng.normal(size=n) + 1e-6 * (rng.random(n) - 0.5)
        sol = fit_linear_quantile(Phi, s, 0.1, jittered=True, backend=backend)
        assert sol.interpolated_count <= 3

    def test_tied_scores_trip_jitter_check(self, backend):
        s = np.array([0.0, 0.0, 0.0, 1.0, 2.0])
        with pytest.raises(DegenerateInterpolationError):
            fit_linear_quantile(np.ones((5, 1)), s, 0.5, jittered=True, backend=backend)

    def test_rank_deficient_column_dropped(self, backend):
        rng = np.random.default_rng(6)
        a = (rng.random(30) < 0.5).astype(float)
        Phi = np.column_stack([a, 1 - a, np.ones(30)])
        sol = fit_linear_quantile(Phi, rng.normal(size=30), 0.1, backend=backend)
        assert sol.rank_deficient and sol.dropped_columns == (2,) and sol.beta[2] == 0.0

    def test_warm_start_same_answer(self, backend):
        rng = np.random.default_rng(7)
        Phi = np.column_stack([rng.normal(size=60), np.ones(60)])
        s = rng.normal(size=60)
        cold = fit_linear_quantile(Phi, s, 0.1, backend=backend)
        warm = fit_linear_quantile(Phi, s, 0.1, warm_start=[0, 1], backend=backend)
        assert warm.objective == pytest.approx(cold.objective, rel=1e-12, abs=1e-15)


class TestValidation:
    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            fit_linear_quantile(np.ones((3, 1)), np.ones(4), 0.1)

    def test_alpha_range(self):
        with pytest.raises(ValidationError):
            fit_linear_quantile(np.ones((3, 1)), np.ones(3), 0.0)

    def test_nonfinite(self):
        with pytest.raises(ValidationError):
            fit_linear_quantile(np.ones((2, 1)), [1.0, np.inf], 0.1)


class TestCheckOptimality:
    def test_solver_output_certified(self):
        rng = np.random.default_rng(8)
        Phi = np.column_stack([rng.random(50) < 0.5, np.ones(50)]).astype(float)
        s = rng.normal(size=50)
        sol = fit_linear_quantile(Phi, s, 0.1)
        assert check_optimality(Phi, s, 0.1, sol.beta).ok

    def test_perturbed_beta_fails(self):
        s = np.linspace(0, 1, 30)
        sol = fit_linear_quantile(np.ones((30, 1)), s, 0.1)
        rep = check_optimality(np.ones((30, 1)), s, 0.1, sol.beta + 1.0)
        assert not rep.ok
        # everything sits below the raised threshold: residual is exactly alpha
        assert rep.residual[0] == pytest.approx(0.1)

    def test_full_interpolation(self):
        rep = check_optimality(np.ones((6, 1)), np.zeros(6), 0.3, np.zeros(1))
        assert rep.ok and rep.interpolated_count == 6


# ---------------------------------------------------------------- properties


@st.composite
def small_instance(draw, max_n=12, max_d=2):
    d = draw(st.integers(1, max_d))
    n = draw(st.integers(d, max_n))
    seed = draw(st.integers(0, 2**31))
    alpha = draw(st.sampled_from([0.1, 0.2, 0.5, 0.75, 0.9]))
    rng = np.random.default_rng(seed)
    if d == 1:
        Phi = np.ones((n, 1))
    else:
        Phi = np.column_stack([np.round(rng.normal(size=n), 3), np.ones(n)])
    s = np.round(rng.normal(size=n), 3)
    return Phi, s, alpha


@given(small_instance(), st.sampled_from(BACKENDS))
def test_matches_vertex_enumeration(inst, backend):
    Phi, s, alpha = inst
    assume(np.linalg.matrix_rank(Phi) == Phi.shape[1])
    best, _ = brute_force_qr(Phi, s, alpha)
    sol = fit_linear_quantile(Phi, s, alpha, backend=backend)
    assert abs(sol.objective - best) <= 1e-9 * max(1.0, abs(best))


@given(small_instance(max_d=1), st.sampled_from(BACKENDS))
def test_lexicographic_tie_break(inst, backend):
    Phi, s, alpha = inst
    _, lex = brute_force_qr(Phi, s, alpha)
    sol = fit_linear_quantile(Phi, s, alpha, backend=backend)
    np.testing.assert_allclose(sol.beta, lex, atol=1e-9)


@given(small_instance(max_n=25), st.floats(0.1, 10.0))
def test_scale_equivariance(inst, c):
    Phi, s, alpha = inst
    assume(np.linalg.matrix_rank(Phi) == Phi.shape[1])
    a = fit_linear_quantile(Phi, s, alpha)
    b = fit_linear_quantile(Phi, c * s, alpha)
    assert b.objective == pytest.approx(c * a.objective, rel=1e-8, abs=1e-12)


@given(small_instance(max_n=25), st.floats(-5, 5), st.floats(-5, 5))
def test_shift_equivariance(inst, g0, g1):
    Phi, s, alpha = inst
    assume(np.linalg.matrix_rank(Phi) == Phi.shape[1])
    gamma = np.array([g0, g1][: Phi.shape[1]])
    a = fit_linear_quantile(Phi, s, alpha)
    b = fit_linear_quantile(Phi, s + Phi @ gamma, alpha)
    assert b.objective == pytest.approx(a.objective, rel=1e-8, abs=1e-9)


@given(st.integers(0, 2**31), st.integers(2, 5), st.sampled_from([0.1, 0.25, 0.5]))
def test_mondrian_separation(seed, k, alpha):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(k, 80))
    cells = np.concatenate([np.arange(k), rng.integers(0, k, n - k)])
    Phi = np.eye(k)[cells]
    s = rng.normal(size=n)
    sol = fit_linear_quantile(Phi, s, alpha)
    for j in range(k):
        assert sol.beta[j] == empirical_quantile(s[cells == j], 1 - alpha)


@given(st.integers(0, 2**31), st.sampled_from([0.05, 0.1, 0.3]))
def test_certificate_and_coverage_bounds(seed, alpha):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(20, 200))
    Phi = np.column_stack([rng.random(n) < 0.5, rng.random(n) < 0.5, np.ones(n)]).astype(float)
    s = rng.standard_normal(n)
    sol = fit_linear_quantile(Phi, s, alpha, jittered=True)
    assert check_optimality(Phi, s, alpha, sol.beta).ok
    # fraction strictly above the fit lies within d/n of alpha
    above = np.mean(s > Phi @ sol.beta + 1e-12)
    assert alpha - 3 / n - 1e-12 <= above <= alpha + 1e-12
