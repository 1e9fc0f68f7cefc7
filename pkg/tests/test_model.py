import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldr_expand.model import (
    DRO,
    NORMAL,
    ModelError,
    RiskConfig,
    StageIndex,
    UncertaintyModel,
    bonferroni_split,
    build_stage_indexer,
    cholesky,
    realize_parameters,
)
from ldr_expand.instances import load_instance
from ldr_expand.model import safety_factor


def test_truncation_matrices_are_identity_blocks():
    idx = build_stage_indexer([1, 2])
    assert np.array_equal(idx.matrix(0), [[1, 0, 0]])
    assert np.array_equal(idx.matrix(1), np.eye(3))


def test_desk4_stage_dimensions():
    idx = build_stage_indexer([1, 3, 3, 3, 3])
    assert idx.total == 13
    assert idx.dims == (1, 4, 7, 10, 13)


@pytest.mark.parametrize("sizes", [(2, 1), (0, 3), (1, 0), ()])
def test_bad_stage_sizes_rejected(sizes):
    with pytest.raises(ModelError):
        StageIndex(sizes)


@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.data())
def test_truncation_is_leading_slice(tail, data):
    idx = StageIndex((1, *tail))
    xi = np.array(data.draw(st.lists(st.floats(-5, 5), min_size=idx.total, max_size=idx.total)))
    for t in range(idx.stages):
        assert np.array_equal(idx.truncate(xi, t), idx.matrix(t) @ xi)


def _tiny_model(cov=None):
    idx = StageIndex((1, 1))
    load = [[[100.0]], [[100.0, 20.0]]]
    zero = [[[0.0]], [[0.0, 0.0]]]
    factors = {
        "capex_generation": zero,
        "capex_energy": zero,
        "capex_power": zero,
        "peak_load": load,
        "fuel_existing": zero,
        "fuel_candidate": zero,
        "emission_cap": [[[50.0]], [[40.0, -5.0]]],
    }
    return UncertaintyModel(idx, factors, np.diag([0.0, 0.25]) if cov is None else cov)


def test_realize_linear_map():
    u = _tiny_model()
    p = realize_parameters(u, [1.0, 1.5])
    assert p.peak_load[1][0] == pytest.approx(130.0)
    assert p.peak_load[0][0] == 100.0
    assert p.emission_cap[1] == pytest.approx(32.5)


def test_realize_baseline_is_first_column_sum():
    u = _tiny_model()
    p = realize_parameters(u, u.mean)
    assert p.peak_load[1][0] == 120.0


@pytest.mark.parametrize("xi", [[0.9, 1.0], [1.0], [1.0, 1.0, 1.0]])
def test_realize_rejects_bad_scenarios(xi):
    with pytest.raises(ModelError):
        realize_parameters(_tiny_model(), xi)


@given(st.floats(0, 1), st.floats(-3, 3), st.floats(-3, 3))
def test_realize_is_affine(a, x1, x2):
    u = _tiny_model()
    p1 = realize_parameters(u, [1.0, x1])
    p2 = realize_parameters(u, [1.0, x2])
    pm = realize_parameters(u, [1.0, a * x1 + (1 - a) * x2])
    assert pm.peak_load[1][0] == pytest.approx(a * p1.peak_load[1][0] + (1 - a) * p2.peak_load[1][0], abs=1e-9)


def test_cholesky_identity():
    assert np.allclose(cholesky(np.eye(3)), np.eye(3))


def test_cholesky_singular_diagonal():
    assert np.allclose(cholesky(np.diag([0.0, 0.25])), np.diag([0.0, 0.5]))


def test_cholesky_reproduces_correlated_matrix():
    cov = np.array([[2.0, 1.0], [1.0, 2.0]])
    L = cholesky(cov)
    assert np.linalg.norm(L @ L.T - cov) <= 1e-10 * np.linalg.norm(cov)


def test_cholesky_singular_correlated_falls_back():
    v = np.array([1.0, 2.0, -1.0])
    cov = np.outer(v, v)
    L = cholesky(cov)
    assert np.linalg.norm(L @ L.T - cov) <= 1e-10 * np.linalg.norm(cov)


def test_cholesky_rejects_asymmetric_and_indefinite():
    with pytest.raises(ModelError, match="symmetric"):
        cholesky([[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(ModelError, match="eigenvalue"):
        cholesky([[1.0, 2.0], [2.0, 1.0]])


@settings(max_examples=50)
@given(st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_cholesky_property(n, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, rng.integers(1, n + 1)))
    cov = A @ A.T
    L = cholesky(cov)
    assert np.linalg.norm(L @ L.T - cov) <= 1e-9 * max(1.0, np.linalg.norm(cov))


def test_second_moment_consistent():
    u = _tiny_model()
    assert np.array_equal(u.second_moment - np.outer(u.mean, u.mean), u.covariance)


def test_constant_coordinate_must_be_deterministic():
    with pytest.raises(ModelError):
        _tiny_model(np.diag([0.1, 0.25]))


def test_safety_factor_dro_values():
    assert safety_factor(0.2, DRO) == pytest.approx(2.0, rel=1e-15)
    assert safety_factor(0.05, DRO) == pytest.approx(np.sqrt(19.0), rel=1e-15)


def test_safety_factor_normal_against_mpmath():
    mpmath.mp.dps = 40
    # inverse of the Normal CDF through the complementary error function
    ref = float(mpmath.sqrt(2) * mpmath.erfinv(1 - 2 * mpmath.mpf("0.05")))
    assert safety_factor(0.05, NORMAL) == pytest.approx(ref, rel=1e-12)
    assert ref == pytest.approx(1.6449, abs=1e-4)


@pytest.mark.parametrize("eps", [0.0, 0.5, 0.7, -0.1])
def test_safety_factor_range(eps):
    with pytest.raises(ModelError):
        safety_factor(eps, DRO)


@given(st.floats(1e-6, 0.499))
def test_dro_dominates_normal(eps):
    assert safety_factor(eps, DRO) > safety_factor(eps, NORMAL)


def test_bonferroni():
    assert bonferroni_split(0.06, 3) == pytest.approx(0.02)
    assert bonferroni_split(0.125, 1) == 0.125
    parts = [bonferroni_split(0.04, 28)] * 28
    assert sum(parts) == pytest.approx(0.04, rel=1e-14)


def test_risk_split_per_family():
    s = load_instance("desk4").system
    r = RiskConfig(flow=0.2, storage=0.28, direct_individual=False).individual(s)
    assert r["flow"] == pytest.approx(0.2 / s.lines)
    assert r["storage"] == pytest.approx(0.28 / (7 * s.nodes))


def test_risk_rejects_bad_mode():
    with pytest.raises(ModelError):
        RiskConfig(mode="chebyshev")
