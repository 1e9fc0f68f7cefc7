"""Acceptance criteria on the bundled instances.

Every test records one PASS/FAIL line (printed in the session summary) before
asserting, so a red criterion still reports what was measured.
"""

import itertools
import math
import time

import numpy as np
import pytest
import scipy.sparse as sp

from ldr_expand.cli import main
from ldr_expand.conic import ProgramBuilder, solve
from ldr_expand.deterministic import solve_deterministic
from ldr_expand.duality import gap_sweep, monotone_violations, solve_gap
from ldr_expand.evaluate import DISTRIBUTIONS, SHED_TOLERANCE, rule_violation_rates, sample_xi, simulate
from ldr_expand.instances import load_instance, parse_instance
from ldr_expand.ldr import (
    INVESTMENTS,
    RuleRows,
    VarianceConfig,
    investment_variance,
    reformulate_double_sided,
    solve_primal_ldr,
)
from ldr_expand.model import StageIndex, UncertaintyModel, baseline_parameters
from ldr_expand.structure import build_structure
from ldr_expand.worstcase import box_from_samples, lower_level_recourse, rule_cost, solve_saa, worst_case_search

from chebyshev_oracle import worst_case_outside
from helpers import bundled_doc, record


def test_criterion_1_zero_covariance(desk4):
    n = desk4.uncertainty.size
    inst = desk4.with_covariance(np.zeros((n, n)))
    start = time.perf_counter()
    lp = solve_deterministic(inst.system, baseline_parameters(inst.uncertainty)).objective
    ldr = solve_primal_ldr(inst).objective
    gap = solve_gap(inst.system, inst.uncertainty, 0.05, "dro").report
    seconds = time.perf_counter() - start
    rel = abs(ldr - lp) / lp
    ok = rel <= 1e-6 and abs(gap.absolute) <= 1e-6 * (1.0 + gap.primal) and seconds <= 10.0
    record(1, ok, f"|P-LP|/LP={rel:.2e} gap={gap.absolute:.2e} (limit {1e-6 * (1 + gap.primal):.2e}) time={seconds:.1f}s")
    assert ok


def test_criterion_2_sandwich(micro3):
    start = time.perf_counter()
    s, u = micro3.system, micro3.uncertainty
    var = u.covariance[1, 1]
    a = math.sqrt(1.5 * var)  # three equally likely points with the model variance
    support = np.array([[1.0, 1.0 - a], [1.0, 1.0], [1.0, 1.0 + a]])
    assert np.allclose(support[:, 1].var(), var)
    run = solve_gap(s, u, 0.10, "dro")
    saa = solve_saa(s, u, support).objective
    seconds = time.perf_counter() - start
    lo, hi = run.report.dual, run.report.primal
    ok = lo - 1e-6 <= saa <= hi + 1e-6 and seconds <= 30.0
    record(2, ok, f"D={lo:.6f} <= J*={saa:.6f} <= P={hi:.6f} time={seconds:.1f}s")
    assert ok


def test_criterion_3_gap_sweep(desk4):
    start = time.perf_counter()
    cells = gap_sweep(
        desk4.system, desk4.uncertainty, [0.05, 0.10, 0.15, 0.20, 0.25], [0.10, 0.05, 0.025], ["normal", "dro"]
    )
    seconds = time.perf_counter() - start
    scale = max(abs(c.report.primal) for c in cells)
    bad = monotone_violations(cells, 1e-6 * scale)
    negative = [c for c in cells if c.report.absolute < -1e-6 * scale]
    ok = not bad and not negative and seconds <= 300.0
    gaps = " ".join(f"{c.report.absolute:.1f}" for c in cells)
    record(3, ok, f"{len(cells)} cells, monotone violations={len(bad)}, negative={len(negative)}, time={seconds:.0f}s (limit 300s); gaps {gaps}")
    assert not bad and not negative
    assert seconds <= 300.0


def test_criterion_4_risk_cost(desk4, desk4_structure):
    levels = [0.20, 0.10, 0.05, 0.01, 0.001]
    dro, normal = [], []
    for eps in levels:
        dro.append(solve_primal_ldr(desk4.with_risk(mode="dro", emission=eps), structure=desk4_structure).objective)
        normal.append(solve_primal_ldr(desk4.with_risk(mode="normal", emission=eps), structure=desk4_structure).objective)
    rising = all(b >= a - 1e-8 * abs(a) for a, b in zip(dro, dro[1:]))
    above = all(d >= n - 1e-8 * abs(n) for d, n in zip(dro, normal))
    ok = rising and above
    pairs = " ".join(f"{100 * (1 - e):g}%:{d:.2f}/{n:.2f}" for e, d, n in zip(levels, dro, normal))
    record(4, ok, f"DRO nondecreasing={rising}, DRO>=NORMAL={above}; dro/normal {pairs}")
    assert ok


def test_criterion_5_violation_frequency(desk4, desk4_dro):
    eps = desk4.risk.individual(desk4.system)
    start = time.perf_counter()
    worst = {}
    ok = True
    for k, dist in enumerate(DISTRIBUTIONS):
        xi = sample_xi(dist, desk4.uncertainty, 10**4, 100 + k)
        for family, rate in rule_violation_rates(desk4_dro, xi).items():
            limit = eps[family] + 3.0 * math.sqrt(eps[family] * (1 - eps[family]) / 1e4)
            worst[family] = max(worst.get(family, 0.0), rate)
            ok = ok and rate <= limit
    seconds = time.perf_counter() - start
    ok = ok and seconds <= 120.0
    rates = " ".join(f"{f}={worst[f]:.4f}/{eps[f]:g}" for f in sorted(worst))
    record(5, ok, f"worst rate/eps over {','.join(DISTRIBUTIONS)}: {rates}; time={seconds:.1f}s")
    assert ok


def test_criterion_6_variance_control(desk4, desk4_structure):
    inst = desk4.with_risk(mode="dro")
    results = []
    for alpha in (math.inf, 0.10, 0.001):
        pol = solve_primal_ldr(inst, VarianceConfig.uniform(alpha), structure=desk4_structure)
        std = sum(float(v.sum()) for v in pol.investment_std().values())
        results.append((alpha, pol, std))
    stds = [r[2] for r in results]
    costs = [r[1].objective for r in results]
    decreasing = all(b < a for a, b in zip(stds, stds[1:]))
    rising = all(b >= a - 1e-8 * abs(a) for a, b in zip(costs, costs[1:]))
    tight = results[-1][1]
    u = desk4_structure.uncertainty
    capped = True
    for name, _ in INVESTMENTS:
        for t in range(tight.stages):
            X = tight.block(name, t)
            mean = X.sum(axis=1)
            capped = capped and bool(np.all(investment_variance(X, u, t) <= 0.001 * mean + 1e-6))
    ok = decreasing and rising and capped
    record(6, ok, f"std sums {' > '.join(f'{v:.4f}' for v in stds)}; costs {' <= '.join(f'{c:.3f}' for c in costs)}; alpha=0.1% caps hold={capped}")
    assert ok


def test_criterion_7_trace_vs_monte_carlo(desk4, desk4_dro):
    st, u, pol = desk4_dro.structure, desk4.uncertainty, desk4_dro
    xi = sample_xi("normal", u, 10**5, 77)
    exact = pol.expected_investment_cost()
    spend = np.zeros((xi.shape[0], pol.stages))
    worst_std = 0.0
    for t, X in enumerate(pol.rules):
        d = X.shape[1]
        for name, fam in (("invest_gen", "capex_generation"), ("invest_energy", "capex_energy"), ("invest_power", "capex_power")):
            Y = X[st.var(name)]
            price = xi[:, :d] @ u.factors[fam][t].T
            amount = xi[:, :d] @ Y.T
            spend[:, t] += np.einsum("si,si->s", price, amount)
            model = investment_variance(Y, u, t)
            sample = amount.std(axis=0)
            live = model > 1e-9 * max(1.0, model.max(initial=0.0))
            if live.any():
                worst_std = max(worst_std, float(np.max(np.abs(sample[live] / model[live] - 1.0))))
            assert np.all(sample[~live] <= 1e-9 * max(1.0, abs(Y).max()))
    mc = spend.mean(axis=0)
    material = np.abs(exact) > 1e-3 * np.abs(exact).sum()
    rel = np.abs(mc - exact)[material] / np.abs(exact)[material]
    total = abs(mc.sum() - exact.sum()) / abs(exact.sum())
    ok = float(rel.max()) <= 0.01 and total <= 0.01 and worst_std <= 0.01
    record(7, ok, f"investment cost rel err per stage max={rel.max():.2e} total={total:.2e}; std rel err max={worst_std:.2e}")
    assert ok


def test_criterion_8_shedding_order(desk4, desk4_structure, desk4_det_policy, desk4_normal, desk4_dro):
    xi = sample_xi("normal", desk4.uncertainty, 1000, 2024)
    freq = {}
    for name, pol in (("det", desk4_det_policy), ("normal", desk4_normal), ("dro", desk4_dro)):
        freq[name] = float((simulate(name, pol, xi, "normal").shed > SHED_TOLERANCE).mean())
    # supply adequacy hinges on the generation-capacity rows
    eps = desk4.risk.individual(desk4.system)["generation"]
    level = eps + 3.0 * math.sqrt(eps * (1 - eps) / 1000)
    ok = freq["det"] >= freq["normal"] >= freq["dro"] and freq["dro"] <= level
    record(8, ok, f"shed frequency det={freq['det']:.3f} normal={freq['normal']:.3f} dro={freq['dro']:.3f}; dro limit {level:.4f}")
    assert ok


def _scalar_model():
    zero = [[[0.0]], [[0.0, 0.0]]]
    names = ("capex_generation", "capex_energy", "capex_power", "peak_load", "fuel_existing", "fuel_candidate", "emission_cap")
    return UncertaintyModel(StageIndex((1, 1)), {k: zero for k in names}, np.diag([0.0, 1.0]))


def _soc_verdict(u, mean, std, lower, upper, eps):
    b = ProgramBuilder()
    g = RuleRows(sp.csr_matrix((2, 0)), np.array([[mean - std, std]]))
    W = u.stage_scale(1) if std > 0 else np.zeros((2, 0))
    reformulate_double_sided(b, g, W, lower, upper, eps, "row")
    return solve(b.build()).optimal


def test_criterion_9_double_sided_oracle():
    rng = np.random.default_rng(909)
    u = _scalar_model()
    agree = total = skipped = 0
    mismatches = []
    while total < 100:
        mid, half = rng.uniform(-5, 5), rng.uniform(0.5, 5)
        eps = rng.uniform(0.01, 0.45)
        mean = mid + half * rng.uniform(-1.2, 1.2)
        std = half * rng.uniform(0.0, 1.0)
        lower, upper = mid - half, mid + half
        p = worst_case_outside(mean, std, lower, upper)
        if abs(p - eps) <= 1e-6:
            skipped += 1
            continue
        total += 1
        if _soc_verdict(u, mean, std, lower, upper, eps) == (p <= eps):
            agree += 1
        else:
            mismatches.append((round(mean, 4), round(std, 4), round(lower, 4), round(upper, 4), round(eps, 4), round(p, 6)))
    ok = agree == total
    record(9, ok, f"verdict agreement {agree}/{total} (boundary draws skipped: {skipped}) {mismatches[:3]}")
    assert ok


def test_criterion_10_worst_case_vertex():
    inst = load_instance("desk4_reduced")
    s, u = inst.system, inst.uncertainty
    st = build_structure(s, u)
    pol = solve_primal_ldr(inst.with_risk(mode="dro"), structure=st)
    saa = solve_saa(s, u, sample_xi("normal", u, 50, 0), structure=st)
    lo, hi = box_from_samples(u, 1000, seed=0)
    res = worst_case_search(pol, saa.x1, lo, hi, budget=2000, restarts=3, seed=0)
    first = saa.first_stage_cost() + st.cost_constant
    exhaustive = -math.inf
    for corner in itertools.product((0, 1), repeat=u.size - 1):
        xi = np.concatenate([[1.0], np.where(corner, hi[1:], lo[1:])])
        exhaustive = max(exhaustive, rule_cost(pol, xi) - first - lower_level_recourse(st, saa.x1, xi).cost)
    matches = abs(res.loss - exhaustive) <= 1e-9 * max(1.0, abs(exhaustive))

    doc = bundled_doc("desk4_reduced")
    n = u.size
    doc["uncertainty"]["covariance"] = np.zeros((n, n)).tolist()
    flat = parse_instance(doc)
    fst = build_structure(flat.system, flat.uncertainty)
    fpol = solve_primal_ldr(flat, structure=fst)
    fsaa = solve_saa(flat.system, flat.uncertainty, np.ones((1, n)), structure=fst)
    flo, fhi = box_from_samples(flat.uncertainty, 1000, seed=0)
    zero = worst_case_search(fpol, fsaa.x1, flo, fhi, budget=50).loss
    zero_ok = abs(zero) <= 1e-6 * fsaa.objective

    ok = res.is_vertex and matches and zero_ok
    record(
        10,
        ok,
        f"search loss={res.loss:.3f} ({res.method}, vertex={res.is_vertex}) exhaustive vertex max={exhaustive:.3f} "
        f"certificate={res.certificate_loss:.3f}; zero-width loss={zero:.2e}",
    )
    assert zero_ok
    assert res.vertex_loss == pytest.approx(exhaustive, rel=1e-9)
    assert res.is_vertex and matches


def test_criterion_11_reproducible_csv(tmp_path):
    runs = [
        ["plan", "ldr", "micro3"],
        ["gap", "micro3", "--eps", "0.1", "--sigma2", "0.05"],
        ["evaluate", "micro3", "--samples", "200", "--seed", "5", "--dist", "normal", "uniform", "logistic", "laplace"],
        ["worstcase", "desk4_reduced", "--budget", "100", "--restarts", "1", "--scenarios", "10", "--seed", "5"],
    ]
    same, compared = True, 0
    for k, args in enumerate(runs):
        a, b = tmp_path / f"{k}a", tmp_path / f"{k}b"
        assert main(args + ["--out", str(a)]) == 0
        assert main(args + ["--out", str(b)]) == 0
        for path in sorted(a.glob("*.csv")):
            compared += 1
            same = same and path.read_bytes() == (b / path.name).read_bytes()
    rep_a, rep_b = tmp_path / "ra", tmp_path / "rb"
    for out in (rep_a, rep_b):
        assert main(["report", str(tmp_path / "0a"), str(tmp_path / "2a"), "--seed", "1", "--samples", "200", "--out", str(out)]) == 0
    for path in sorted(rep_a.glob("*.csv")):
        compared += 1
        same = same and path.read_bytes() == (rep_b / path.name).read_bytes()
    record(11, same, f"{compared} CSV files compared across two runs, identical={same}")
    assert same
