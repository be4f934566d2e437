import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metaobject.core import ConfigError, ValidationError
from metaobject.ocsvm import (MARGIN_TOL, CascadeResult, KernelSpec, OcsvmModel, cascade_screen, decision_value,
                              primal_objective, relative_duality_gap, removal_count, train_ocsvm)

from oracles import reference_ocsvm_dual


def _data(seed, l=50, d=2):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((l, d)) + 2.0


def _check_kkt(model: OcsvmModel, l):
    C = 1.0 / (model.nu * l)
    assert np.all(model.alphas >= 0) and np.all(model.alphas <= C + 1e-15)
    assert abs(model.alphas.sum() - 1.0) < 1e-12


def test_two_identical_points():
    X = np.array([[1.0, 2.0], [1.0, 2.0]])
    m = train_ocsvm(X, nu=0.5, kernel=KernelSpec("linear"))
    np.testing.assert_allclose(m.alphas, [0.5, 0.5])
    assert abs(decision_value(m, X[0])) < 1e-12


def test_rbf_matches_reference_qp():
    X = _data(0)
    kern = KernelSpec("rbf", gamma=1.0)
    m = train_ocsvm(X, nu=0.2, kernel=kern)
    _, f_ref = reference_ocsvm_dual(kern(X, X), 0.2)
    assert abs(m.dual_objective() - f_ref) <= 1e-4 * abs(f_ref)
    _check_kkt(m, 50)


@pytest.mark.parametrize("seed", range(5))
def test_linear_matches_reference_qp(seed):
    X = _data(seed, d=8)
    m = train_ocsvm(X, nu=0.15)
    _, f_ref = reference_ocsvm_dual(X @ X.T, 0.15)
    assert abs(m.dual_objective() - f_ref) <= 1e-4 * abs(f_ref)
    assert relative_duality_gap(m, X) < 1e-4


@pytest.mark.parametrize("seed", range(6))
def test_nu_property(seed):
    X = _data(seed, l=80, d=4)
    for nu in (0.1, 0.3, 0.5):
        m = train_ocsvm(X, nu=nu, kernel=KernelSpec("rbf"))
        f = m.decision_function(X)
        assert np.mean(f < -MARGIN_TOL) <= nu + 1 / 80
        assert len(m.alphas) / 80 >= nu - 1 / 80


def test_config_errors():
    with pytest.raises(ConfigError):
        train_ocsvm(np.ones((1, 2)))
    with pytest.raises(ConfigError):
        train_ocsvm(np.ones((5, 2)), nu=0.1)
    with pytest.raises(ConfigError):
        train_ocsvm(np.ones((5, 2)), nu=1.5)


def test_dimension_mismatch():
    m = train_ocsvm(_data(1), nu=0.5)
    with pytest.raises(ValidationError):
        m.decision_function(np.ones((3, 5)))


def test_far_point_rbf_goes_to_minus_rho():
    X = _data(2)
    m = train_ocsvm(X, nu=0.2, kernel=KernelSpec("rbf", gamma=1.0))
    radius = np.abs(X).max()
    far = np.full(2, 100 * radius)
    assert abs(decision_value(m, far) + m.rho) < 1e-6


def test_symmetric_1d():
    X = np.array([[-1.0], [1.0]])
    m = train_ocsvm(X, nu=1.0, kernel=KernelSpec("linear"))
    np.testing.assert_allclose(m.alphas, [0.5, 0.5])
    for x in np.linspace(-3, 3, 13):
        a, b = decision_value(m, np.array([x])), decision_value(m, np.array([-x]))
        assert abs(a - b) < 1e-9 or np.sign(a) == np.sign(b)


def test_primal_ge_minus_dual():
    X = _data(3, d=8)
    m = train_ocsvm(X, nu=0.2)
    assert primal_objective(m, X) >= -m.dual_objective() - 1e-9


def test_model_round_trip():
    m = train_ocsvm(_data(4), nu=0.3, kernel=KernelSpec("rbf"))
    back = OcsvmModel.from_dict(m.to_dict())
    X = _data(9)
    np.testing.assert_array_equal(back.decision_function(X), m.decision_function(X))


def test_cascade_counts_and_nesting():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((100, 8)) + 1.0
    ids = rng.permutation(1000)[:100]
    res = cascade_screen(ids, X, stages=3, per_stage_fraction=0.15)
    assert [len(r) for r in res.removed_per_stage] == [15, 12, 10]
    assert len(res.kept) == 63
    removed = np.concatenate(res.removed_per_stage)
    assert len(np.intersect1d(removed, res.kept)) == 0
    assert set(removed) | set(res.kept) == set(ids)
    assert not res.stopped_early


def test_cascade_tie_break_smaller_id_first():
    X = np.ones((20, 3))
    ids = np.arange(100, 120)[::-1]
    res = cascade_screen(ids, X, stages=1, per_stage_fraction=0.15, nu=0.5)
    np.testing.assert_array_equal(res.removed_per_stage[0], [100, 101, 102])


def test_cascade_removes_planted_outliers():
    rng = np.random.default_rng(5)
    d = 16
    center = np.ones(d) / np.sqrt(d)
    inl = center + 0.05 * rng.standard_normal((180, d))
    out = rng.standard_normal((20, d))
    X = np.vstack([inl, out])
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    ids = np.arange(200)
    res = cascade_screen(ids, X)
    removed = np.concatenate(res.removed_per_stage)
    assert np.isin(np.arange(180, 200), removed).mean() >= 0.8


def test_cascade_stops_early():
    X = np.random.default_rng(0).standard_normal((4, 2))
    res = cascade_screen(np.arange(4), X, stages=3, per_stage_fraction=0.5, nu=0.5)
    assert res.stopped_early and any("stopped early" in f for f in res.flags)
    back = CascadeResult.from_dict(res.to_dict())
    np.testing.assert_array_equal(back.kept, res.kept)


@given(st.integers(1, 1000), st.floats(0.01, 0.99))
def test_removal_count_is_floor(n, f):
    k = removal_count(n, f)
    assert 0 <= k <= n
    assert k == int(np.floor(f * n + 1e-9))


def test_deterministic():
    X = _data(6, d=8)
    a, b = train_ocsvm(X), train_ocsvm(X)
    np.testing.assert_array_equal(a.alphas, b.alphas)
    assert a.rho == b.rho
