"""Deterministic multi-stage expansion LP and its operations-only variant.

The operations block is shared by the planning LP (capacities are cumulative
investment variables) and by out-of-sample re-optimization (capacities are fixed
numbers, load shedding allowed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .conic import EQ, GE, LE, ConicProgram, ProgramBuilder, SolverSettings, Solution, Status, solve
from .model import StageParameters, SystemData


class PlanningError(RuntimeError):
    def __init__(self, message: str, solution: Solution | None = None):
        super().__init__(message)
        self.solution = solution


class _Triplets:
    def __init__(self):
        self.r, self.c, self.v = [], [], []
        self.n_rows = 0

    def add(self, rows, cols, vals):
        rows, cols = np.broadcast_arrays(np.asarray(rows), np.asarray(cols))
        vals = np.broadcast_to(np.asarray(vals, dtype=float), rows.shape)
        self.r.append(rows.ravel())
        self.c.append(cols.ravel())
        self.v.append(vals.ravel())

    def matrix(self, n_rows, n_cols):
        if not self.r:
            return sp.coo_matrix((n_rows, n_cols))
        return sp.coo_matrix(
            (np.concatenate(self.v), (np.concatenate(self.r), np.concatenate(self.c))), shape=(n_rows, n_cols)
        )


@dataclass
class Capacity:
    """Available capacity per stage and unit: ``constant + matrix @ x``.

    ``matrix`` is a list (per stage) of sparse ``(units, n_vars)`` maps or ``None``.
    """

    constant: np.ndarray  # (T, units)
    matrix: list | None = None

    def terms(self, t: int, n_vars: int):
        if self.matrix is None:
            return sp.csr_matrix((self.constant.shape[1], n_vars))
        m = sp.csr_matrix(self.matrix[t])
        return sp.csr_matrix((m.data, m.indices, m.indptr), shape=(m.shape[0], n_vars))


@dataclass
class OperationsVars:
    gen_existing: np.ndarray  # (T, W, H, G)
    gen_candidate: np.ndarray  # (T, W, H, C)
    state: np.ndarray  # (T, W, H, K)
    charge: np.ndarray
    discharge: np.ndarray
    shed: np.ndarray | None  # (T, W, H, N)


def add_operations(
    b: ProgramBuilder,
    s: SystemData,
    params: StageParameters,
    candidate_cap: Capacity,
    energy_cap: Capacity,
    power_cap: Capacity,
    shed: bool = False,
    emission_cap: bool = True,
    stages=None,
) -> OperationsVars:
    """Dispatch variables, operating constraints and fuel/shed costs for every slot."""
    T, W, H = s.stages, s.horizons, s.hours
    G, C, K, N, E = s.n_existing, s.n_candidate, s.n_storage, s.nodes, s.lines
    stages = range(T) if stages is None else stages
    p = b.add_variables("gen_existing", (T, W, H, G), lower=0.0)
    y = b.add_variables("gen_candidate", (T, W, H, C), lower=0.0)
    soc = b.add_variables("state", (T, W, H, K), lower=0.0)
    ch = b.add_variables("charge", (T, W, H, K), lower=0.0)
    dis = b.add_variables("discharge", (T, W, H, K), lower=0.0)
    ls = b.add_variables("shed", (T, W, H, N), lower=0.0) if shed else None
    n = b.n_vars
    weight = np.asarray(s.horizon_weight)

    for t in stages:
        fuel_e = np.asarray(params.fuel_existing[t])
        fuel_c = np.asarray(params.fuel_candidate[t])
        for w in range(W):
            b.add_objective(p[t, w], weight[w] * np.broadcast_to(fuel_e, (H, G)))
            b.add_objective(y[t, w], weight[w] * np.broadcast_to(fuel_c, (H, C)))
            if shed:
                b.add_objective(ls[t, w], weight[w] * s.shed_penalty)

    slots = [(t, w, h) for t in stages for w in range(W) for h in range(H)]
    S = len(slots)
    ts = np.array([x[0] for x in slots])
    ws = np.array([x[1] for x in slots])
    hs = np.array([x[2] for x in slots])
    rows = np.arange(S)
    demand = np.array([s.load_profile[t, w, h] * np.asarray(params.peak_load[t]) for t, w, h in slots]).reshape(S, N)

    # system balance
    bal = _Triplets()
    bal.add(rows[:, None], p[ts, ws, hs], 1.0)
    bal.add(rows[:, None], y[ts, ws, hs], 1.0)
    bal.add(rows[:, None], dis[ts, ws, hs], 1.0)
    bal.add(rows[:, None], ch[ts, ws, hs], -1.0)
    if shed:
        bal.add(rows[:, None], ls[ts, ws, hs], 1.0)
    b.add_rows(bal.matrix(S, n), EQ, demand.sum(axis=1), "balance")

    # line flows: ptdf @ (injection - demand)
    if E:
        F = np.asarray(s.ptdf)
        flow = _Triplets()
        for unit_idx, var, sign in (
            (s.existing_node, p, 1.0),
            (s.candidate_node, y, 1.0),
            (s.storage_node, dis, 1.0),
            (s.storage_node, ch, -1.0),
        ):
            coef = sign * F[:, unit_idx]  # (E, units)
            flow.add(rows[:, None, None] * E + np.arange(E)[None, :, None], var[ts, ws, hs][:, None, :], coef[None])
        if shed:
            flow.add(rows[:, None, None] * E + np.arange(E)[None, :, None], ls[ts, ws, hs][:, None, :], F[None])
        fm = flow.matrix(S * E, n)
        base = (demand @ F.T).ravel()
        limit = np.tile(s.line_limit, S)
        b.add_rows(fm, LE, base + limit, "flow")
        b.add_rows(fm, GE, base - limit, "flow")

    # existing generation limits
    cap_e = s.existing_capacity[ts] * s.existing_availability[ts, ws, hs]
    b.add_rows(_select(p[ts, ws, hs].ravel(), n), LE, cap_e.ravel(), "generation")

    # candidate generation limits: y <= k * capacity
    if C:
        k = s.candidate_availability[ts, ws, hs].ravel()
        m = _select(y[ts, ws, hs].ravel(), n) - sp.diags(k) @ _stacked(candidate_cap, ts, n)
        b.add_rows(m, LE, k * candidate_cap.constant[ts].ravel(), "generation")

    # ramping (hours after the first)
    later = hs > 0
    if later.any() and G:
        sel = np.flatnonzero(later)
        unit_rows = _Triplets()
        rr = (np.arange(sel.size)[:, None] * G + np.arange(G)[None, :])
        unit_rows.add(rr, p[ts[sel], ws[sel], hs[sel]], 1.0)
        unit_rows.add(rr, p[ts[sel], ws[sel], hs[sel] - 1], -1.0)
        um = unit_rows.matrix(sel.size * G, n)
        cap = s.existing_capacity[ts[sel]]
        b.add_rows(um, LE, (s.existing_ramp_up * cap).ravel(), "ramping")
        b.add_rows(um, GE, (-s.existing_ramp_down * cap).ravel(), "ramping")
    if later.any() and C:
        sel = np.flatnonzero(later)
        d = _select(y[ts[sel], ws[sel], hs[sel]].ravel(), n) - _select(y[ts[sel], ws[sel], hs[sel] - 1].ravel(), n)
        capm = _stacked(candidate_cap, ts[sel], n)
        const = candidate_cap.constant[ts[sel]]
        up, down = np.tile(s.candidate_ramp_up, sel.size), np.tile(s.candidate_ramp_down, sel.size)
        b.add_rows(d - sp.diags(up) @ capm, LE, (s.candidate_ramp_up * const).ravel(), "ramping")
        b.add_rows(d + sp.diags(down) @ capm, GE, (-s.candidate_ramp_down * const).ravel(), "ramping")

    # storage state recursion and limits
    if K:
        rec = _Triplets()
        rr = rows[:, None] * K + np.arange(K)[None, :]
        rec.add(rr, soc[ts, ws, hs], 1.0)
        rec.add(rr, ch[ts, ws, hs], -s.charge_efficiency[None, :])
        rec.add(rr, dis[ts, ws, hs], 1.0 / s.discharge_efficiency[None, :])
        prev = np.flatnonzero(hs > 0)
        rec.add(rr[prev], soc[ts[prev], ws[prev], hs[prev] - 1], -1.0)
        b.add_rows(rec.matrix(S * K, n), EQ, 0.0, "storage")

        for var, cap, extra in ((soc, energy_cap, None), (ch, power_cap, None), (dis, power_cap, None), (ch, power_cap, dis)):
            m = _select(var[ts, ws, hs].ravel(), n) - _stacked(cap, ts, n)
            if extra is not None:
                m = m + _select(extra[ts, ws, hs].ravel(), n)
            b.add_rows(m, LE, cap.constant[ts].ravel(), "storage")

    # annual emissions per stage
    if emission_cap:
        for t in stages:
            em = _Triplets()
            for w in range(W):
                em.add(0, p[t, w], weight[w] * s.existing_emission[None, :])
                em.add(0, y[t, w], weight[w] * s.candidate_emission[None, :])
            b.add_rows(em.matrix(1, n), LE, [params.emission_cap[t]], "emission")

    return OperationsVars(p, y, soc, ch, dis, ls)


def _stacked(cap: Capacity, ts, n) -> sp.csr_matrix:
    """Capacity maps of the stages ``ts`` stacked slot by slot."""
    units = cap.constant.shape[1]
    if cap.matrix is None:
        return sp.csr_matrix((len(ts) * units, n))
    per = [cap.terms(t, n) for t in range(cap.constant.shape[0])]
    return sp.vstack([per[t] for t in ts], format="csr")


def _select(idx, n) -> sp.csr_matrix:
    idx = np.asarray(idx, dtype=int).ravel()
    return sp.csr_matrix((np.ones(idx.size), (np.arange(idx.size), idx)), shape=(idx.size, n))


def _cumulative(inv: np.ndarray, n: int) -> list:
    """Per-stage sparse maps summing investment variables up to that stage."""
    out = []
    for t in range(inv.shape[0]):
        m = sum(_select(inv[tau], n) for tau in range(t + 1))
        out.append(sp.csr_matrix(m))
    return out


@dataclass
class ExpansionVars:
    gen: np.ndarray  # (T, C)
    energy: np.ndarray  # (T, K)
    power: np.ndarray  # (T, K)
    ops: OperationsVars


def build_deterministic(s: SystemData, params: StageParameters) -> tuple[ConicProgram, ExpansionVars]:
    """Planning LP at fixed parameter values (typically the realization at ``xi = 1``)."""
    T, C, K = s.stages, s.n_candidate, s.n_storage
    b = ProgramBuilder()
    inv_g = b.add_variables("invest_gen", (T, C), lower=0.0)
    inv_s = b.add_variables("invest_energy", (T, K), lower=0.0)
    inv_p = b.add_variables("invest_power", (T, K), lower=0.0)
    n_inv = b.n_vars

    for t in range(T):
        b.add_objective(inv_g[t], params.capex_generation[t])
        b.add_objective(inv_s[t], params.capex_energy[t])
        b.add_objective(inv_p[t], params.capex_power[t])
        for tau in range(t + 1):
            b.add_objective(inv_g[tau], s.candidate_om[t])
            b.add_objective(inv_s[tau], s.storage_energy_om[t])
            b.add_objective(inv_p[tau], s.storage_power_om[t])
    b.add_objective_constant(float(np.sum(s.existing_om * s.existing_capacity)))

    cap_g = Capacity(np.zeros((T, C)), _cumulative(inv_g, n_inv))
    cap_s = Capacity(np.zeros((T, K)), _cumulative(inv_s, n_inv))
    cap_p = Capacity(np.zeros((T, K)), _cumulative(inv_p, n_inv))
    ops = add_operations(b, s, params, cap_g, cap_s, cap_p)

    n = b.n_vars
    b.add_rows(_select(inv_g.ravel(), n), LE, s.candidate_max.ravel(), "investment")
    b.add_rows(_select(inv_s.ravel(), n), LE, s.storage_energy_max.ravel(), "investment")
    b.add_rows(_select(inv_p.ravel(), n), LE, s.storage_power_max.ravel(), "investment")
    for t in range(T):
        if not np.isfinite(s.budget[t]):
            continue
        terms = {}
        for idx, price in ((inv_g[t], params.capex_generation[t]), (inv_s[t], params.capex_energy[t]), (inv_p[t], params.capex_power[t])):
            terms.update(zip(idx.tolist(), np.asarray(price, dtype=float).tolist()))
        b.add_row(terms, LE, float(s.budget[t]), "budget")
    return b.build(), ExpansionVars(inv_g, inv_s, inv_p, ops)


@dataclass
class DeterministicPlan:
    invest_gen: np.ndarray
    invest_energy: np.ndarray
    invest_power: np.ndarray
    gen_existing: np.ndarray
    gen_candidate: np.ndarray
    state: np.ndarray
    charge: np.ndarray
    discharge: np.ndarray
    investment_cost: float
    om_cost: float
    fuel_cost: float
    objective: float
    solution: Solution

    @property
    def total_cost(self) -> float:
        return self.investment_cost + self.om_cost + self.fuel_cost


def cost_breakdown(s: SystemData, params: StageParameters, gen, energy, power, p, y) -> tuple[float, float, float]:
    """(investment, O&M, fuel) cost of a plan at the given parameter values."""
    T = s.stages
    invest = sum(
        float(params.capex_generation[t] @ gen[t] + params.capex_energy[t] @ energy[t] + params.capex_power[t] @ power[t])
        for t in range(T)
    )
    cum_g, cum_s, cum_p = np.cumsum(gen, axis=0), np.cumsum(energy, axis=0), np.cumsum(power, axis=0)
    om = float(np.sum(s.existing_om * s.existing_capacity))
    om += float(np.sum(s.candidate_om * cum_g) + np.sum(s.storage_energy_om * cum_s) + np.sum(s.storage_power_om * cum_p))
    w = np.asarray(s.horizon_weight)
    fuel = 0.0
    for t in range(T):
        fuel += float(np.einsum("w,whg,g->", w, p[t], params.fuel_existing[t]))
        fuel += float(np.einsum("w,whc,c->", w, y[t], params.fuel_candidate[t]))
    return invest, om, fuel


def solve_deterministic(s: SystemData, params: StageParameters, settings: SolverSettings | None = None) -> DeterministicPlan:
    program, v = build_deterministic(s, params)
    sol = solve(program, settings)
    if sol.status is not Status.OPTIMAL:
        detail = f" (families: {', '.join(sol.infeasible_tags)})" if sol.infeasible_tags else ""
        raise PlanningError(f"deterministic plan not solved: {sol.status.value}{detail} {sol.message}", sol)
    x = sol.x
    gen, energy, power = x[v.gen], x[v.energy], x[v.power]
    p, y = x[v.ops.gen_existing], x[v.ops.gen_candidate]
    inv, om, fuel = cost_breakdown(s, params, gen, energy, power, p, y)
    return DeterministicPlan(
        invest_gen=gen,
        invest_energy=energy,
        invest_power=power,
        gen_existing=p,
        gen_candidate=y,
        state=x[v.ops.state],
        charge=x[v.ops.charge],
        discharge=x[v.ops.discharge],
        investment_cost=inv,
        om_cost=om,
        fuel_cost=fuel,
        objective=sol.objective,
        solution=sol,
    )
