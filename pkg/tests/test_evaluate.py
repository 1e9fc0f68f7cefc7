import math

import numpy as np
import pytest

from ldr_expand.deterministic import solve_deterministic
from ldr_expand.evaluate import (
    DISTRIBUTIONS,
    RealizedPlan,
    build_report,
    evaluate_policy,
    out_of_sample_cost,
    rule_violation_rates,
    sample_xi,
    simulate,
    standardized_draws,
)
from ldr_expand.ldr import LdrPolicy, plan_values, policy_from_values
from ldr_expand.model import ModelError, baseline_parameters
from ldr_expand.structure import build_structure

from helpers import one_node


def test_uniform_support():
    from ldr_expand.instances import load_instance

    u = load_instance("micro3").uncertainty
    xi = sample_xi("uniform", u, 20000, 1)[:, 1]
    r = math.sqrt(0.75)
    assert xi.min() >= 1 - r and xi.max() <= 1 + r
    assert xi.min() == pytest.approx(1 - r, abs=1e-3)
    assert xi.max() == pytest.approx(1 + r, abs=1e-3)


def test_laplace_scale():
    z = 0.5 * standardized_draws("laplace", np.random.default_rng(0), 10**6)
    # mean absolute deviation of a Laplace law equals its scale
    assert np.abs(z).mean() == pytest.approx(0.5 / math.sqrt(2), rel=0.01)


@pytest.mark.parametrize("dist", DISTRIBUTIONS)
def test_moments_match(dist, desk4):
    u = desk4.uncertainty
    xi = sample_xi(dist, u, 10**5, 5)
    assert np.all(xi[:, 0] == 1.0)
    cov = np.cov(xi, rowvar=False)
    assert np.linalg.norm(cov - u.covariance) <= 0.02 * np.linalg.norm(u.covariance)
    assert np.abs(xi.mean(axis=0) - 1.0).max() < 0.01


def test_bad_sampling_arguments(micro3):
    with pytest.raises(ModelError):
        sample_xi("cauchy", micro3.uncertainty, 10, 0)
    with pytest.raises(ModelError):
        sample_xi("normal", micro3.uncertainty, 0, 0)


def _micro_policy(micro3, value):
    st = build_structure(micro3.system, micro3.uncertainty)
    rules = [np.zeros((st.n_x, st.index.dim(t))) for t in range(st.stages)]
    rules[1][st.var("invest_gen")[0]] = value
    return LdrPolicy(st, rules, 0.0)


def test_evaluate_linear_rule(micro3):
    pol = _micro_policy(micro3, [100.0, 20.0])
    plan = evaluate_policy(pol, np.array([1.0, 1.5]))
    assert plan.invest_gen[1, 0] == pytest.approx(130.0)
    nominal = evaluate_policy(pol, np.ones(2))
    assert nominal.invest_gen[1, 0] == pytest.approx(120.0)


def test_negative_investments_clipped(micro3):
    pol = _micro_policy(micro3, [1.0, 2.0])
    plan = evaluate_policy(pol, np.array([1.0, -1.0]))
    assert plan.invest_gen[1, 0] == 0.0
    assert plan.clipped == 1


def test_deterministic_policy_constant(micro3):
    det = solve_deterministic(micro3.system, baseline_parameters(micro3.uncertainty))
    st = build_structure(micro3.system, micro3.uncertainty)
    pol = policy_from_values(st, plan_values(st, det))
    a = evaluate_policy(pol, np.array([1.0, 0.3]))
    b = evaluate_policy(pol, np.array([1.0, 1.9]))
    assert np.array_equal(a.invest_gen, b.invest_gen)
    assert np.array_equal(a.invest_energy, b.invest_energy)


def _plan(cap):
    z = np.zeros((1, 0))
    return RealizedPlan(np.array([[cap]]), z, z, [], 0)


def test_shed_arithmetic():
    inst = one_node()
    out = out_of_sample_cost(inst.system, inst.uncertainty, _plan(8.0), np.ones(1), penalty=9000.0)
    assert out.shed_energy == pytest.approx(2.0, abs=1e-6)
    assert out.shed_cost == pytest.approx(18000.0, rel=1e-6)
    # 8 units at capex 5 and O&M 1, fuel 0.5 on 8 units of energy
    assert out.cost == pytest.approx(18000.0 + 48.0 + 4.0, rel=1e-6)


def test_no_shed_with_enough_capacity():
    inst = one_node()
    out = out_of_sample_cost(inst.system, inst.uncertainty, _plan(12.0), np.ones(1))
    assert out.shed_energy == pytest.approx(0.0, abs=1e-7)


def test_negative_plan_rejected():
    inst = one_node()
    with pytest.raises(ModelError):
        out_of_sample_cost(inst.system, inst.uncertainty, _plan(-1.0), np.ones(1))


def test_single_baseline_scenario_reproduces_plan_cost():
    inst = one_node(stages=2, availability=0.8, existing=3.0)
    det = solve_deterministic(inst.system, baseline_parameters(inst.uncertainty))
    st = build_structure(inst.system, inst.uncertainty)
    pol = policy_from_values(st, plan_values(st, det), det.objective)
    sm = simulate("det", pol, np.ones((1, inst.uncertainty.size)))
    rep = build_report({"det": pol}, [sm], seed=0)
    assert rep.rows[0].mean_cost == pytest.approx(det.objective, rel=1e-7)
    assert rep.rows[0].shed_frequency == 0.0


@pytest.fixture(scope="module")
def micro_samples(micro3, micro3_dro):
    st = micro3_dro.structure
    det = solve_deterministic(micro3.system, baseline_parameters(micro3.uncertainty))
    det_pol = policy_from_values(st, plan_values(st, det), det.objective)
    xi = sample_xi("normal", micro3.uncertainty, 60, 4)
    plans = {"det": det_pol, "dro": micro3_dro}
    return plans, xi, [simulate(k, p, xi, "normal") for k, p in plans.items()]


def test_report_metrics(micro_samples):
    plans, xi, samples = micro_samples
    rep = build_report(plans, samples, seed=4, reference="det")
    det, dro = rep.rows
    assert det.gen_dissimilarity == 0.0 and det.storage_dissimilarity == 0.0
    assert det.std_generation == det.std_energy == det.std_power == 0.0
    assert dro.std_generation > 0.0
    for r in rep.rows:
        assert 0.0 <= r.shed_frequency <= 100.0 and r.shed_magnitude >= 0.0
    counts = {}
    for plan, dist, t, lo, hi, c in rep.histograms:
        counts[(plan, t)] = counts.get((plan, t), 0) + c
    assert set(counts.values()) == {xi.shape[0]}


def test_report_order_independent(micro_samples):
    plans, xi, samples = micro_samples
    rep = build_report(plans, samples, seed=4)
    perm = np.random.default_rng(0).permutation(xi.shape[0])
    shuffled = []
    for sm in samples:
        shuffled.append(type(sm)(sm.name, sm.dist, sm.cost[perm], sm.shed[perm], sm.emissions[perm], sm.clipped))
    rep2 = build_report(plans, shuffled, seed=4)
    assert [r.mean_cost for r in rep.rows] == [r.mean_cost for r in rep2.rows]


def test_simulation_reproducible(micro3, micro3_dro):
    a = simulate("dro", micro3_dro, sample_xi("logistic", micro3.uncertainty, 10, 9))
    b = simulate("dro", micro3_dro, sample_xi("logistic", micro3.uncertainty, 10, 9))
    assert np.array_equal(a.cost, b.cost)


def test_rule_violation_rates_zero_for_deterministic(micro3):
    det = solve_deterministic(micro3.system, baseline_parameters(micro3.uncertainty))
    st = build_structure(micro3.system, micro3.uncertainty)
    pol = policy_from_values(st, plan_values(st, det))
    rates = rule_violation_rates(pol, np.ones((3, micro3.uncertainty.size)))
    assert max(rates.values()) == 0.0
