import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kandinsky import scores as sc
from kandinsky.core import Dataset, classification
from kandinsky.errors import ValidationError
from kandinsky._kernels import HAS_NUMBA

BACKENDS = ["numpy"] + (["numba"] if HAS_NUMBA else [])


class TestAbsResidual:
    def test_difference(self):
        assert sc.abs_residual([2.0], 5.0) == 3.0

    def test_perfect(self):
        assert sc.abs_residual([1.5], 1.5) == 0.0

    def test_sign_symmetry(self):
        assert sc.abs_residual([-1.0], -4.0) == 3.0

    def test_arity(self):
        with pytest.raises(ValidationError):
            sc.abs_residual([1.0, 2.0], 0.0)


class TestCqr:
    def test_inside_band(self):
        # oracle: max(y - hi, lo - y) = max(0.5 - 1, 0 - 0.5)
        assert max(0.5 - 1.0, 0.0 - 0.5) == -0.5
        assert sc.cqr_score([0.0, 1.0], 0.5) == -0.5

    def test_above_band(self):
        assert sc.cqr_score([0.0, 1.0], 2.0) == 1.0

    def test_degenerate_band(self):
        assert sc.cqr_score([3.0, 3.0], 3.0) == 0.0


class TestAps:
    def test_top_label(self):
        assert sc.aps_score([0.7, 0.2, 0.1], 0, 0.5) == pytest.approx(0.35)

    def test_last_label(self):
        assert sc.aps_score([0.7, 0.2, 0.1], 2, 1.0) == pytest.approx(1.0)

    def test_single_class(self):
        assert sc.aps_score([1.0], 0, 0.0) == 0.0

    def test_tie_order_by_index(self):
        assert sc.aps_score([0.5, 0.5], 0, 1.0) == pytest.approx(0.5)
        assert sc.aps_score([0.5, 0.5], 1, 1.0) == pytest.approx(1.0)

    def test_bad_probs(self):
        with pytest.raises(ValidationError):
            sc.aps_score([0.5, 0.6], 0, 0.5)

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_batch_matches_scalar(self, backend):
        rng = np.random.default_rng(0)
        P = rng.dirichlet(np.ones(5), size=40)
        P[3] = [0.2] * 5
        eps = rng.random(40)
        A = sc.aps_all_labels(P, eps, backend=backend)
        for i in range(40):
            for k in range(5):
                assert A[i, k] == pytest.approx(sc.aps_score(P[i], k, eps[i]), abs=1e-14)


class TestJittered:
    def test_centered(self):
        assert sc.jittered(1.0, 0.5, 0.01) == 1.0

    def test_top(self):
        assert sc.jittered(1.0, 1.0, 0.01) == pytest.approx(1.005)

    def test_ties_broken(self):
        eps = sc.draw_eps(0, sc.CALIBRATION, 2)[:, 1]
        a, b = sc.jittered(np.array([1.0, 1.0]), eps, 1e-6)
        assert a != b

    def test_eta_positive(self):
        with pytest.raises(ValidationError):
            sc.jittered(1.0, 0.5, 0.0)


class TestScoreSpec:
    @pytest.mark.parametrize("text", ["cqr", "aps", "abs_residual", "jittered(cqr)", "jittered(aps,0.001)"])
    def test_parse_roundtrip(self, text):
        spec = sc.parse_score(text)
        assert sc.ScoreSpec.from_dict(spec.to_dict()) == spec

    def test_unknown(self):
        with pytest.raises(ValidationError):
            sc.parse_score("hinge")

    def test_nested_jitter_rejected(self):
        with pytest.raises(ValidationError):
            sc.ScoreSpec("jittered", sc.parse_score("jittered(cqr)"))

    def test_task_checks(self):
        with pytest.raises(ValidationError):
            sc.parse_score("aps").check_task(sc.Task("regression"))
        with pytest.raises(ValidationError):
            sc.parse_score("cqr").check_task(classification(3))

    def test_arity(self):
        assert sc.parse_score("jittered(cqr)").arity(sc.Task("regression")) == 2
        assert sc.parse_score("aps").arity(classification(4)) == 4

    def test_resolved_eta(self):
        spec = sc.parse_score("jittered(cqr)").resolved(np.array([0.0, 2.0]))
        assert spec.eta == pytest.approx(1e-6)


class TestBatch:
    def test_eps_stream_prefix_stable(self):
        a = sc.draw_eps(3, sc.TEST, 5)
        b = sc.draw_eps(3, sc.TEST, 50)
        np.testing.assert_array_equal(a, b[:5])

    def test_streams_differ(self):
        assert not np.array_equal(sc.draw_eps(3, sc.TEST, 5), sc.draw_eps(3, sc.CALIBRATION, 5))

    def test_scores_match_scalar(self):
        rng = np.random.default_rng(1)
        base = np.sort(rng.normal(size=(20, 2)), axis=1)
        y = rng.normal(size=20)
        eps = rng.random((20, 2))
        spec = sc.ScoreSpec("jittered", sc.ScoreSpec("cqr"), 0.01)
        got = sc.scores(spec, base, y, eps)
        want = [sc.jittered(sc.cqr_score(base[i], y[i]), eps[i, 1], 0.01) for i in range(20)]
        np.testing.assert_allclose(got, want, atol=1e-15)

    def test_candidate_matrix_shares_noise(self):
        base = np.array([[0.0, 1.0], [2.0, 3.0]])
        eps = np.array([[0.1, 0.9], [0.2, 0.3]])
        spec = sc.ScoreSpec("jittered", sc.ScoreSpec("cqr"), 0.5)
        cand = np.array([[0.0, 5.0], [0.0, 5.0]])
        M = sc.scores(spec, base, cand, eps)
        for j in range(2):
            np.testing.assert_allclose(M[:, j], sc.scores(spec, base, cand[:, j], eps))

    def test_calibration_scores_resolve_eta(self):
        rng = np.random.default_rng(2)
        ds = Dataset(rng.normal(size=(30, 1)), rng.normal(size=30), base=np.tile([-1.0, 1.0], (30, 1)))
        spec, s, eps = sc.calibration_scores(sc.parse_score("jittered(cqr)"), ds, seed=4)
        assert spec.eta == pytest.approx(1e-6 * np.std(np.maximum(ds.y - 1, -1 - ds.y)))
        assert s.shape == (30,) and eps.shape == (30, 2)


@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=8), st.floats(0.0, 1.0))
def test_aps_range_and_monotone_in_eps(weights, eps):
    p = np.array(weights) / np.sum(weights)
    for k in range(p.size):
        v = sc.aps_score(p, k, eps)
        assert -1e-12 <= v <= 1 + 1e-12
        assert sc.aps_score(p, k, 1.0) >= v - 1e-12


@given(st.floats(-10, 10), st.floats(0, 5), st.floats(-20, 20))
def test_cqr_sublevel_set_is_band(lo, width, y):
    hi = lo + width
    level = 0.3
    inside = sc.cqr_score([lo, hi], y) <= level
    assert inside == (lo - level <= y <= hi + level)
