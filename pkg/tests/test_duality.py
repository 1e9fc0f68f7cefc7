import cvxpy as cp
import numpy as np
import pytest

from ldr_expand.deterministic import solve_deterministic
from ldr_expand.duality import (
    NEGATIVE_GAP,
    canonicalize,
    dual_violations,
    monotone_violations,
    primal_violations,
    solve_dual_compact,
    solve_gap,
    solve_primal_compact,
    standard_form_from_arrays,
    suboptimality_bound,
    SweepCell,
)
from ldr_expand.instances import load_instance
from ldr_expand.model import DRO, NORMAL, ModelError, StageIndex, UncertaintyModel, baseline_parameters, safety_factor

from helpers import one_node


def _zero_cov(inst):
    return inst.with_covariance(np.zeros_like(inst.uncertainty.covariance))


@pytest.mark.parametrize("name", ["micro3", "desk4_reduced"])
def test_zero_covariance_strong_duality(name):
    inst = _zero_cov(load_instance(name))
    det = solve_deterministic(inst.system, baseline_parameters(inst.uncertainty)).objective
    run = solve_gap(inst.system, inst.uncertainty, 0.05, DRO)
    assert run.report.primal == pytest.approx(det, rel=1e-6)
    assert abs(run.report.absolute) <= 1e-6 * (1 + run.report.primal)


def test_one_node_round_trip():
    inst = one_node(stages=2, availability=0.8)
    det = solve_deterministic(inst.system, baseline_parameters(inst.uncertainty)).objective
    f = canonicalize(inst.system, inst.uncertainty, 0.1)
    assert solve_primal_compact(f, inst.uncertainty, DRO).objective == pytest.approx(det, rel=1e-6)


def test_maps_cover_every_row_and_decision(micro3):
    f = canonicalize(micro3.system, micro3.uncertainty, 0.1)
    for t in range(f.stages):
        counts = sum(seg.count for seg in f.segments if seg.stage == t)
        assert counts == f.m(t)
        names = {f.row_name(t, r) for r in range(f.m(t))}
        assert len(names) == f.m(t)
    names = {f.variable_name(0, i) for i in range(f.n_x)}
    assert len(names) == f.n_x


def test_dimensions_stable(desk4):
    a = canonicalize(desk4.system, desk4.uncertainty, 0.05).dimensions()
    b = canonicalize(desk4.system, desk4.uncertainty, 0.05).dimensions()
    assert a == b
    assert a["stages"] == 5


def test_probability_range(micro3):
    with pytest.raises(ModelError):
        canonicalize(micro3.system, micro3.uncertainty, 0.5)


def test_suboptimality_bound():
    r = suboptimality_bound(526.3, 525.7)
    assert r.absolute == pytest.approx(0.6)
    assert r.percent == pytest.approx(0.114, abs=1e-3)
    assert r.flag == ""
    assert suboptimality_bound(100.0, 100.0 + 1e-5).flag == ""
    assert suboptimality_bound(100.0, 101.0).flag == NEGATIVE_GAP


def test_monotone_violations_detects_drop():
    cells = [
        SweepCell("normal", 0.1, 0.1, suboptimality_bound(10, 9), 0),
        SweepCell("normal", 0.2, 0.1, suboptimality_bound(10, 9.5), 0),
    ]
    assert monotone_violations(cells, 1e-6) == [("normal", "sigma2", 0.1, 0.1, 0.2)]


# Hand-built two-stage instance with one decision per stage:
#   min E[x1 + (2 + 0.5 xi_1) x2]
#   s.t. x1 >= 1,  x1 + x2 >= 1 + xi_1,  x2 <= 5,  x >= 0
A = [[np.array([[1.0]]), None], [np.array([[1.0], [0.0]]), np.array([[1.0], [-1.0]])]]
B = [np.array([[1.0]]), np.array([[1.0, 1.0], [-5.0, 0.0]])]
C = [np.array([[1.0]]), np.array([[2.0, 0.5]])]


def _hand_model(var=0.09):
    idx = StageIndex((1, 1))
    zero = [[[0.0]], [[0.0, 0.0]]]
    factors = {k: zero for k in ("capex_generation", "capex_energy", "capex_power", "peak_load", "fuel_existing", "fuel_candidate", "emission_cap")}
    return UncertaintyModel(idx, factors, np.diag([0.0, var]))


def _hand_dual(u, eps, mode):
    """The dual rule problem written out row by row."""
    k = safety_factor(eps, mode)
    s = np.sqrt(u.covariance[1, 1])
    M = u.second_moment
    L0 = cp.Variable((1, 1))
    L1 = cp.Variable((2, 2))

    def chance(a):  # affine row a @ (1, xi_1) nonnegative with probability 1 - eps
        return k * cp.abs(s * a[1]) <= a[0] + a[1]

    cons = [L0[0, 0] >= 0, chance(L1[0]), chance(L1[1])]
    # reduced cost of x2: c2 - (lambda1_0 - lambda1_1)
    cons.append(chance(np.array([2.0, 0.5]) - L1[0] + L1[1]))
    # reduced cost of x1 reaches stage 2 through row 0 of stage 2
    cons.append(chance(np.array([1.0, 0.0]) - cp.hstack([L0[0, 0], 0.0]) - L1[0]))
    obj = L0[0, 0] * 1.0 + cp.trace(M @ B[1].T @ L1)
    prob = cp.Problem(cp.Maximize(obj), cons)
    prob.solve(solver=cp.CLARABEL)
    return prob.value, [L0.value, L1.value]


@pytest.mark.parametrize("mode, eps", [(DRO, 0.1), (NORMAL, 0.05)])
def test_dual_matches_hand_transcription(mode, eps):
    u = _hand_model()
    f = standard_form_from_arrays(A, B, C, eps=eps)
    dual = solve_dual_compact(f, u, mode)
    value, lambdas = _hand_dual(u, eps, mode)
    assert dual.objective == pytest.approx(value, rel=1e-6, abs=1e-7)
    # each side's optimum satisfies the other side's rows
    assert max(dual_violations(f, u, mode, lambdas).values()) <= 1e-6
    assert max(dual_violations(f, u, mode, dual.lambdas).values()) <= 1e-6
    primal = solve_primal_compact(f, u, mode)
    assert primal.objective >= dual.objective - 1e-6 * (1 + abs(primal.objective))
    assert max(primal_violations(f, u, mode, primal.rules).values()) <= 1e-6


def test_hand_instance_zero_variance_closed_form():
    # demand 2 is cheapest from x1 at unit cost: x1 = 2, x2 = 0
    u = _hand_model(0.0)
    f = standard_form_from_arrays(A, B, C, eps=0.1)
    p = solve_primal_compact(f, u, DRO).objective
    d = solve_dual_compact(f, u, DRO).objective
    assert p == pytest.approx(2.0, rel=1e-7)
    assert d == pytest.approx(2.0, rel=1e-7)


def test_micro3_weak_duality_and_substitution(micro3):
    run = solve_gap(micro3.system, micro3.uncertainty, 0.1, DRO)
    assert run.report.absolute >= -1e-6 * (1 + run.report.primal)
    assert max(dual_violations(run.form, micro3.uncertainty, DRO, run.dual.lambdas).values()) <= 1e-6
    assert max(primal_violations(run.form, micro3.uncertainty, DRO, run.primal.rules).values()) <= 1e-6


def test_compact_primal_at_least_deterministic(micro3):
    det = solve_deterministic(micro3.system, baseline_parameters(micro3.uncertainty)).objective
    f = canonicalize(micro3.system, micro3.uncertainty, 0.1)
    assert solve_primal_compact(f, micro3.uncertainty, DRO).objective >= det * (1 - 1e-8)
