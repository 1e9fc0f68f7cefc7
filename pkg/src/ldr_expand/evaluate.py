"""Monte Carlo stress tests of plans: sampling, realized decisions and re-dispatch.

A plan is any :class:`LdrPolicy` (a deterministic plan is wrapped as constant
rules).  For every scenario the investment rules are realized, negative values
are clipped to zero and an operations LP with fixed capacities and priced load
shedding is solved at the realized parameters.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .conic import ProgramBuilder, SolverSettings, solve
from .deterministic import Capacity, PlanningError, add_operations
from .ldr import INVESTMENTS, LdrPolicy
from .model import ModelError, SystemData, UncertaintyModel, baseline_parameters, realize_parameters

log = logging.getLogger(__name__)

DISTRIBUTIONS = ("normal", "uniform", "logistic", "laplace")


def standardized_draws(dist: str, rng: np.random.Generator, shape) -> np.ndarray:
    """Zero-mean, unit-variance i.i.d. draws of one family."""
    if dist == "normal":
        return rng.standard_normal(shape)
    if dist == "uniform":
        r = math.sqrt(3.0)
        return rng.uniform(-r, r, shape)
    if dist == "logistic":
        return rng.logistic(0.0, math.sqrt(3.0) / math.pi, shape)
    if dist == "laplace":
        return rng.laplace(0.0, 1.0 / math.sqrt(2.0), shape)
    raise ModelError(f"unknown distribution {dist!r}; expected one of {', '.join(DISTRIBUTIONS)}")


def sample_xi(dist: str, u: UncertaintyModel, count: int, seed: int) -> np.ndarray:
    """``count`` scenarios with mean 1 and covariance ``u.covariance``."""
    if count < 1:
        raise ModelError(f"scenario count must be at least 1, got {count}")
    rng = np.random.default_rng(seed)
    z = standardized_draws(dist, rng, (count, u.size))
    xi = 1.0 + z @ u.chol.T
    xi[:, 0] = 1.0
    return xi


@dataclass
class RealizedPlan:
    invest_gen: np.ndarray  # (T, C)
    invest_energy: np.ndarray  # (T, K)
    invest_power: np.ndarray  # (T, K)
    decisions: list  # per stage realized decision vector, unclipped
    clipped: int = 0


def evaluate_policy(policy: LdrPolicy, xi) -> RealizedPlan:
    """Linear evaluation of every rule; negative investments are clipped to zero."""
    values = policy.realize(xi)
    st = policy.structure
    inv, clipped = {}, 0
    for name, _ in INVESTMENTS:
        raw = np.array([v[st.var(name)] for v in values])
        neg = raw < 0.0
        clipped += int(neg.sum())
        inv[name] = np.where(neg, 0.0, raw)
    if clipped:
        log.debug("clipped %d negative realized investments", clipped)
    return RealizedPlan(inv["invest_gen"], inv["invest_energy"], inv["invest_power"], values, clipped)


@dataclass
class OutOfSample:
    cost: float
    investment: float
    om: float
    fuel: float
    shed_cost: float
    shed_energy: float  # GWh
    emissions: np.ndarray  # per stage


def out_of_sample_cost(
    s: SystemData,
    u: UncertaintyModel,
    plan: RealizedPlan,
    xi,
    penalty: float | None = None,
    realized_prices: bool = True,
    settings: SolverSettings | None = None,
) -> OutOfSample:
    """Re-dispatch at the realized parameters with the plan's capacities fixed.

    Load can be shed at ``penalty`` per unit of energy (the instance default when
    ``None``).  Investment spending uses realized capital prices unless
    ``realized_prices`` is off, in which case baseline prices are used.
    """
    gen, energy, power = plan.invest_gen, plan.invest_energy, plan.invest_power
    for name, arr in (("generation", gen), ("energy", energy), ("power", power)):
        if np.any(arr < 0.0):
            raise ModelError(f"realized {name} investments must be nonnegative")
    params = realize_parameters(u, np.asarray(xi, dtype=float))
    prices = params if realized_prices else baseline_parameters(u)
    penalty = s.shed_penalty if penalty is None else float(penalty)
    if penalty < 0.0:
        raise ModelError("shed penalty must be nonnegative")

    b = ProgramBuilder()
    ops = add_operations(
        b,
        s,
        params,
        Capacity(np.cumsum(gen, axis=0)),
        Capacity(np.cumsum(energy, axis=0)),
        Capacity(np.cumsum(power, axis=0)),
        shed=True,
        emission_cap=False,
    )
    weight = np.asarray(s.horizon_weight)
    if penalty != s.shed_penalty:
        # add_operations prices shedding at the instance value; move it to ``penalty``
        for t in range(s.stages):
            for w in range(s.horizons):
                b.add_objective(ops.shed[t, w], weight[w] * (penalty - s.shed_penalty))
    sol = solve(b.build(), settings)
    if not sol.optimal:
        raise PlanningError(f"operations re-dispatch failed: {sol.status.value} {sol.message}", sol)
    x = sol.x
    p, y, ls = x[ops.gen_existing], x[ops.gen_candidate], x[ops.shed]

    investment = math.fsum(
        float(prices.capex_generation[t] @ gen[t] + prices.capex_energy[t] @ energy[t] + prices.capex_power[t] @ power[t])
        for t in range(s.stages)
    )
    cum_g, cum_e, cum_p = np.cumsum(gen, axis=0), np.cumsum(energy, axis=0), np.cumsum(power, axis=0)
    om = math.fsum(
        [
            float(np.sum(s.existing_om * s.existing_capacity)),
            float(np.sum(s.candidate_om * cum_g)),
            float(np.sum(s.storage_energy_om * cum_e)),
            float(np.sum(s.storage_power_om * cum_p)),
        ]
    )
    fuel = math.fsum(
        float(np.einsum("w,whg,g->", weight, p[t], params.fuel_existing[t]) + np.einsum("w,whc,c->", weight, y[t], params.fuel_candidate[t]))
        for t in range(s.stages)
    )
    shed_energy = float(np.einsum("w,twhn->", weight, ls))
    shed_cost = penalty * shed_energy
    emissions = np.einsum("w,twhg,g->t", weight, p, s.existing_emission) + np.einsum("w,twhc,c->t", weight, y, s.candidate_emission)
    return OutOfSample(math.fsum([investment, om, fuel, shed_cost]), investment, om, fuel, shed_cost, shed_energy, emissions)


SHED_TOLERANCE = 1e-6  # GWh; smaller shed volumes are solver noise


@dataclass
class PlanSamples:
    """Per-scenario outcomes of one plan under one distribution."""

    name: str
    dist: str
    cost: np.ndarray
    shed: np.ndarray
    emissions: np.ndarray  # (scenarios, T)
    clipped: int
    rule_emissions: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))


def simulate(
    name: str,
    policy: LdrPolicy,
    scenarios: np.ndarray,
    dist: str = "",
    penalty: float | None = None,
    realized_prices: bool = True,
    settings: SolverSettings | None = None,
) -> PlanSamples:
    st = policy.structure
    s, u = st.system, st.uncertainty
    cost, shed, emis, clipped = [], [], [], 0
    for xi in scenarios:
        plan = evaluate_policy(policy, xi)
        clipped += plan.clipped
        out = out_of_sample_cost(s, u, plan, xi, penalty, realized_prices, settings)
        cost.append(out.cost)
        shed.append(out.shed_energy)
        emis.append(out.emissions)
    return PlanSamples(name, dist, np.array(cost), np.array(shed), np.array(emis).reshape(len(scenarios), s.stages), clipped)


@dataclass
class ReportRow:
    plan: str
    dist: str
    scenarios: int
    seed: int
    mean_cost: float
    shed_frequency: float  # percent of scenarios
    shed_magnitude: float  # mean GWh over shedding scenarios
    gen_dissimilarity: float  # GW
    storage_dissimilarity: float  # GWh
    std_generation: float
    std_energy: float
    std_power: float
    clip_rate: float


@dataclass
class EvaluationReport:
    rows: list
    histograms: list  # (plan, dist, stage, bin_lo, bin_hi, count)
    seed: int


def _first_stage(policy: LdrPolicy, name: str) -> np.ndarray:
    return policy.block(name, 0).sum(axis=-1)


def build_report(plans: dict, samples: list, seed: int, reference: str | None = None, bins: int = 20) -> EvaluationReport:
    """Aggregate per-plan, per-distribution samples into report rows and histograms.

    ``plans`` maps names to policies; first-stage dissimilarity is measured against
    ``reference`` (the first plan by default).
    """
    if not samples:
        raise ModelError("a report needs at least one simulated plan")
    reference = reference or next(iter(plans))
    ref = plans[reference]
    rows = []
    for sm in samples:
        policy = plans[sm.name]
        n = sm.cost.size
        if n < 1:
            raise ModelError("a report needs at least one scenario")
        shedding = sm.shed > SHED_TOLERANCE
        std = policy.investment_std()
        decisions = sum(policy.structure.var(name).size for name, _ in INVESTMENTS) * policy.stages
        rows.append(
            ReportRow(
                plan=sm.name,
                dist=sm.dist,
                scenarios=n,
                seed=seed,
                mean_cost=math.fsum(sm.cost) / n,
                shed_frequency=100.0 * float(shedding.sum()) / n,
                shed_magnitude=math.fsum(sm.shed[shedding]) / int(shedding.sum()) if shedding.any() else 0.0,
                gen_dissimilarity=float(np.abs(_first_stage(ref, "invest_gen") - _first_stage(policy, "invest_gen")).sum()),
                storage_dissimilarity=float(np.abs(_first_stage(ref, "invest_energy") - _first_stage(policy, "invest_energy")).sum()),
                std_generation=math.fsum(std["invest_gen"].ravel()),
                std_energy=math.fsum(std["invest_energy"].ravel()),
                std_power=math.fsum(std["invest_power"].ravel()),
                clip_rate=sm.clipped / (n * decisions) if decisions else 0.0,
            )
        )
    return EvaluationReport(rows, emission_histograms(samples, bins), seed)


def emission_histograms(samples: list, bins: int = 20) -> list:
    """Per-stage emission histograms on bin edges shared by all plans."""
    out = []
    if not samples:
        return out
    T = samples[0].emissions.shape[1]
    for t in range(T):
        values = np.concatenate([sm.emissions[:, t] for sm in samples])
        lo, hi = float(values.min()), float(values.max())
        if hi <= lo:
            hi = lo + 1.0
        edges = np.linspace(lo, hi, bins + 1)
        for sm in samples:
            counts, _ = np.histogram(sm.emissions[:, t], bins=edges)
            for k, c in enumerate(counts):
                out.append((sm.name, sm.dist, t, float(edges[k]), float(edges[k + 1]), int(c)))
    return out


def rule_violation_rates(policy: LdrPolicy, scenarios: np.ndarray, tol: float = 1e-7) -> dict:
    """Fraction of scenarios in which each constraint row of the policy's rules is
    violated, reported as the worst row per family.

    Rows are evaluated on the rules themselves (no clipping or re-dispatch), which
    is what the chance constraints promise.
    """
    st = policy.structure
    rates = {}
    values = np.stack([np.concatenate(policy.realize(xi)) for xi in scenarios])  # (S, T*n_x)
    for block in st.rows:
        if block.equality:
            continue
        t, d = block.stage, block.offset.shape[1]
        lhs = scenarios[:, :d] @ block.offset.T
        for tau, A in block.terms.items():
            lhs = lhs + values[:, tau * st.n_x : (tau + 1) * st.n_x] @ A.T
        finite = lambda v: np.where(np.isfinite(v), np.abs(v), 0.0)  # noqa: E731
        scale = np.maximum(1.0, np.maximum(finite(block.lower), finite(block.upper)))
        bad = (lhs < block.lower - tol * scale) | (lhs > block.upper + tol * scale)
        worst = float(bad.mean(axis=0).max()) if bad.size else 0.0
        rates[block.family] = max(rates.get(block.family, 0.0), worst)
    return rates
