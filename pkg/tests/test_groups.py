import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kandinsky.core import Dataset, classification
from kandinsky.errors import MissingTagsError, ValidationError
from kandinsky.groups import (
    Basis,
    EstimatorSpec,
    FractionalEstimator,
    Group,
    GroupSpec,
    Predicate,
    build_indicator_basis,
    eval_basis,
    fit_basis,
    fit_fractional_basis,
    intercept_only,
)


def gt(col, v, name=None):
    return Group(name or f"{col}>{v}", (Predicate(col, ">", v),))


def le(col, v, name=None):
    return Group(name or f"{col}<={v}", (Predicate(col, "<=", v),))


class TestIndicator:
    def test_overlapping_membership(self):
        ds = Dataset(np.array([[1.0, 1.0]]), [0.0])
        spec = GroupSpec("indicator", (gt("x0", 0), gt("x1", 0)), include_intercept=False)
        np.testing.assert_array_equal(build_indicator_basis(spec, ds).values, [[1.0, 1.0]])

    def test_class_conditional_one_hot(self):
        ds = Dataset(np.zeros((3, 1)), [0, 1, 2], classification(3), base=np.full((3, 3), 1 / 3))
        B = build_indicator_basis(GroupSpec("class_conditional"), ds)
        np.testing.assert_array_equal(B.values[1], [0, 1, 0])
        assert B.column_names == ("y==0", "y==1", "y==2")

    def test_mondrian_overlap_names_point(self):
        ds = Dataset(np.array([[-1.0], [0.5], [2.0]]), [0.0, 0.0, 0.0])
        spec = GroupSpec("mondrian", (gt("x0", 0), le("x0", 1)))
        with pytest.raises(ValidationError) as err:
            build_indicator_basis(spec, ds)
        assert err.value.index == 1

    def test_mondrian_not_exhaustive(self):
        ds = Dataset(np.array([[-1.0], [2.0]]), [0.0, 0.0])
        with pytest.raises(ValidationError, match="exhaustive"):
            fit_basis(GroupSpec("mondrian", (gt("x0", 0),)), ds)

    def test_eval_point_in_middle_group(self):
        spec = GroupSpec("indicator", (gt("x0", 5), gt("x1", 0), gt("x2", 5)), include_intercept=False)
        np.testing.assert_array_equal(eval_basis(spec, [0.0, 1.0, 0.0], 0.0), [0, 1, 0])

    def test_intercept_last(self):
        spec = GroupSpec("indicator", (gt("x0", 0),))
        for x in ([-1.0], [1.0]):
            assert eval_basis(spec, x, 0.0)[-1] == 1.0

    def test_intercept_defaults(self):
        assert GroupSpec("indicator").include_intercept
        assert not GroupSpec("mondrian", (gt("x0", 0),)).include_intercept
        assert not GroupSpec("class_conditional").include_intercept

    def test_label_predicate(self):
        spec = GroupSpec("indicator", (Group("y01", (Predicate("y", "in", [0, 1]),)),))
        assert spec.depends_on_y
        np.testing.assert_array_equal(eval_basis(spec, [0.0], 1), [1, 1])
        np.testing.assert_array_equal(eval_basis(spec, [0.0], 2), [0, 1])

    def test_unknown_column(self):
        ds = Dataset(np.zeros((2, 1)), [0.0, 1.0])
        with pytest.raises(ValidationError):
            fit_basis(GroupSpec("indicator", (gt("x3", 0),)), ds)

    def test_z_without_tags(self):
        ds = Dataset(np.zeros((2, 1)), [0.0, 1.0])
        with pytest.raises(MissingTagsError):
            fit_basis(GroupSpec("fractional", (Group("z0", (Predicate("z", "==", 0),)),)), ds)

    def test_bad_operator(self):
        with pytest.raises(ValidationError):
            Predicate("x0", "~", 1)

    def test_spec_roundtrip(self):
        spec = GroupSpec("fractional", (Group("z01", (Predicate("z", "in", [0, 1]),)),),
                         estimator=EstimatorSpec("histogram", [3, 2]))
        assert GroupSpec.from_dict(spec.to_dict()) == spec


def _zdata(n, rng, noise=0.0):
    x0 = rng.integers(0, 2, n).astype(float)
    z = np.where(rng.random(n) < noise, rng.integers(0, 2, n), x0).astype(int)
    return Dataset(np.column_stack([x0, rng.normal(size=n)]), rng.normal(size=n), z=z)


class TestFractional:
    def test_pure_cells(self):
        rng = np.random.default_rng(0)
        ds = _zdata(400, rng)
        est = fit_fractional_basis(ds, [Group("z1", (Predicate("z", "==", 1),))], "XY",
                                   EstimatorSpec("histogram", [2, 1, 1]))
        P = est.predict(ds.X, ds.y)[:, 0]
        # oracle: direct tabulation, z equals x0 exactly
        np.testing.assert_array_equal(P, ds.X[:, 0])

    def test_independent_tag_gives_marginal_rate(self):
        rng = np.random.default_rng(1)
        n = 20000
        X = rng.normal(size=(n, 1))
        z = (rng.random(n) < 0.3).astype(int)
        ds = Dataset(X, rng.normal(size=n), z=z)
        est = fit_fractional_basis(ds, [Group("z1", (Predicate("z", "==", 1),))], "XY",
                                   EstimatorSpec("histogram", [4, 1]))
        P = est.predict(X, ds.y)[:, 0]
        # each of 4 cells has >= ~2000 points: 4 standard errors of a 0.3 rate
        assert np.max(np.abs(P - 0.3)) < 4 * np.sqrt(0.21 / 2000)

    def test_all_covering_group(self):
        rng = np.random.default_rng(2)
        ds = _zdata(100, rng, noise=0.5)
        est = fit_fractional_basis(ds, [Group("all", (Predicate("z", "in", [0, 1]),))])
        np.testing.assert_array_equal(est.predict(ds.X, ds.y)[:, 0], 1.0)

    def test_unseen_cell_falls_back_to_global_rate(self):
        rng = np.random.default_rng(3)
        ds = _zdata(200, rng, noise=0.3)
        g = Group("z1", (Predicate("z", "==", 1),))
        est = fit_fractional_basis(ds, [g], "XY", EstimatorSpec("histogram", [4, 1, 1]))
        # x0 only takes 0 and 1, so the cell holding x0 = 0.6 is empty
        P = eval_basis(est, [0.6, 0.0], 0.0)
        rate = np.mean(ds.z == 1)
        assert P[0] == pytest.approx(rate)

    def test_logistic_probabilities(self):
        rng = np.random.default_rng(4)
        ds = _zdata(2000, rng, noise=0.2)
        est = fit_fractional_basis(ds, [Group("z1", (Predicate("z", "==", 1),))], "XY",
                                   EstimatorSpec("logistic", iterations=300))
        P = est.predict(ds.X, ds.y)[:, 0]
        assert np.all((0 <= P) & (P <= 1))
        # true P[z=1 | x0] is 0.1 or 0.9
        assert abs(P[ds.X[:, 0] == 1].mean() - 0.9) < 0.05
        assert abs(P[ds.X[:, 0] == 0].mean() - 0.1) < 0.05

    def test_estimator_roundtrip(self):
        rng = np.random.default_rng(5)
        ds = _zdata(300, rng, noise=0.3)
        spec = GroupSpec("fractional", (Group("z1", (Predicate("z", "==", 1),)),),
                         estimator=EstimatorSpec("histogram", [2, 2, 2]))
        basis = fit_basis(spec, ds)
        back = Basis.from_dict(basis.to_dict())
        np.testing.assert_array_equal(back.values(ds.X, ds.y), basis.values(ds.X, ds.y))
        assert isinstance(back.estimator, FractionalEstimator)

    def test_empty_group_dropped(self):
        rng = np.random.default_rng(6)
        ds = _zdata(100, rng)
        groups = [Group("z1", (Predicate("z", "==", 1),)), Group("z7", (Predicate("z", "==", 7),))]
        with pytest.warns(UserWarning):
            est = fit_fractional_basis(ds, groups)
        assert est.dropped == ("z7",)


@given(st.integers(0, 2**31), st.integers(1, 4))
def test_intercept_only_is_constant(seed, p):
    rng = np.random.default_rng(seed)
    ds = Dataset(rng.normal(size=(10, p)), rng.normal(size=10))
    V = fit_basis(intercept_only(), ds).matrix(ds).values
    np.testing.assert_array_equal(V, np.ones((10, 1)))


@given(st.integers(0, 2**31), st.integers(2, 5))
def test_partition_rows_sum_to_one(seed, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=50)
    cuts = np.sort(rng.normal(size=k - 1))
    groups = []
    for j in range(k):
        where = []
        if j > 0:
            where.append(Predicate("x0", ">", cuts[j - 1]))
        if j < k - 1:
            where.append(Predicate("x0", "<=", cuts[j]))
        groups.append(Group(f"c{j}", tuple(where)))
    ds = Dataset(x[:, None], np.zeros(50))
    V = fit_basis(GroupSpec("mondrian", tuple(groups)), ds).values(ds.X, ds.y)
    np.testing.assert_array_equal(V.sum(axis=1), 1.0)


@given(st.integers(0, 2**31), st.integers(2, 5), st.sampled_from(["histogram", "logistic"]))
def test_fractional_partition_sums_to_one(seed, levels, kind):
    rng = np.random.default_rng(seed)
    n = 300
    x0 = rng.integers(0, levels, n)
    z = np.where(rng.random(n) < 0.3, rng.integers(0, levels, n), x0)
    ds = Dataset(np.column_stack([x0, rng.normal(size=n)]), rng.normal(size=n), z=z)
    groups = [Group(f"z{j}", (Predicate("z", "==", j),)) for j in range(levels)]
    est = EstimatorSpec(kind, [levels, 2, 2], iterations=50)
    with np.errstate(all="ignore"):
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fitted = fit_fractional_basis(ds, groups, "XY", est)
    P = fitted.predict(ds.X, ds.y)
    assert np.all((P >= 0) & (P <= 1))
    if len(fitted.names) == levels:
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-6)
