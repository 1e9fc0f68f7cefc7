"""Stage-structured description of the stochastic planning model.

Every stage owns the same vector of decisions (its investments and all of its
operating-slot dispatch).  Constraints are stored as row blocks

    lower <= sum_tau A[tau] @ x_tau(xi) + offset @ xi^t <= upper

with constant bounds, so uncertain loads and emission caps live in ``offset``.
Costs are per-stage matrices ``C_t`` with the stage-t cost of decision ``i`` equal
to ``C_t[i] @ xi^t``.  The full chance-constrained build, the canonical form used
for dualization and the scenario programs all read this one description.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .model import StageIndex, SystemData, UncertaintyModel

FAMILIES = ("balance", "flow", "generation", "ramping", "storage", "emission", "investment")


@dataclass
class RowBlock:
    family: str
    name: str
    stage: int
    shape: tuple
    terms: dict  # stage tau -> csr (m, n_x)
    offset: np.ndarray  # (m, dim(stage))
    lower: np.ndarray  # (m,)
    upper: np.ndarray  # (m,)
    equality: bool = False
    sign_lower: bool = False  # lower bound only restates nonnegativity of one variable

    @property
    def m(self) -> int:
        return int(np.prod(self.shape))


@dataclass
class BudgetRow:
    stage: int
    price: np.ndarray  # (n_x, dim(stage)), nonzero on investment decisions only
    bound: float


@dataclass
class PlanningStructure:
    system: SystemData
    uncertainty: UncertaintyModel
    layout: dict  # name -> (start, shape)
    n_x: int
    rows: list = field(default_factory=list)
    cost: list = field(default_factory=list)  # per stage (n_x, dim(t))
    cost_constant: float = 0.0
    budget: list = field(default_factory=list)

    @property
    def index(self) -> StageIndex:
        return self.uncertainty.index

    @property
    def stages(self) -> int:
        return self.index.stages

    def var(self, name: str) -> np.ndarray:
        start, shape = self.layout[name]
        return start + np.arange(int(np.prod(shape))).reshape(shape)

    def variable_name(self, i: int) -> str:
        for name, (start, shape) in self.layout.items():
            size = int(np.prod(shape))
            if start <= i < start + size:
                return f"{name}{[int(k) for k in np.unravel_index(i - start, shape)]}"
        raise IndexError(i)

    def rows_of(self, family: str) -> list:
        return [r for r in self.rows if r.family == family]

    def uncertain_costs(self) -> bool:
        return any(np.any(c[:, 1:] != 0.0) for c in self.cost)


class _Rows:
    """Triplet accumulator for one row block, split by the stage of the variables."""

    def __init__(self, m: int, n_x: int):
        self.m, self.n_x = m, n_x
        self.parts: dict[int, list] = {}

    def add(self, tau, rows, cols, vals):
        rows, cols = np.broadcast_arrays(np.asarray(rows), np.asarray(cols))
        vals = np.broadcast_to(np.asarray(vals, dtype=float), rows.shape)
        self.parts.setdefault(tau, []).append((rows.ravel(), cols.ravel(), vals.ravel()))

    def terms(self) -> dict:
        out = {}
        for tau, chunks in sorted(self.parts.items()):
            r = np.concatenate([c[0] for c in chunks])
            c = np.concatenate([c[1] for c in chunks])
            v = np.concatenate([c[2] for c in chunks])
            out[tau] = sp.csr_matrix((v, (r, c)), shape=(self.m, self.n_x))
        return out


def build_structure(s: SystemData, u: UncertaintyModel) -> PlanningStructure:
    T, W, H = s.stages, s.horizons, s.hours
    G, C, K, N, E = s.n_existing, s.n_candidate, s.n_storage, s.nodes, s.lines
    layout, start = {}, 0
    for name, shape in (
        ("invest_gen", (C,)),
        ("invest_energy", (K,)),
        ("invest_power", (K,)),
        ("gen_existing", (W, H, G)),
        ("gen_candidate", (W, H, C)),
        ("state", (W, H, K)),
        ("charge", (W, H, K)),
        ("discharge", (W, H, K)),
    ):
        layout[name] = (start, shape)
        start += int(np.prod(shape))
    st = PlanningStructure(s, u, layout, start)
    n_x = st.n_x
    ig, ie, ip = st.var("invest_gen"), st.var("invest_energy"), st.var("invest_power")
    p, y = st.var("gen_existing"), st.var("gen_candidate")
    soc, ch, dis = st.var("state"), st.var("charge"), st.var("discharge")
    weight = np.asarray(s.horizon_weight)
    F = np.asarray(s.ptdf)
    fac = u.factors

    for t in range(T):
        d = u.index.dim(t)
        zeros = lambda m: np.zeros((m, d))  # noqa: E731
        load = s.load_profile[t][..., None] * np.asarray(fac["peak_load"][t])[None, None]  # (W, H, N, d)

        def block(family, name, shape, rows, offset=None, lower=0.0, upper=np.inf, equality=False, sign_lower=False):
            m = int(np.prod(shape))
            st.rows.append(
                RowBlock(
                    family,
                    name,
                    t,
                    tuple(shape),
                    rows.terms(),
                    zeros(m) if offset is None else np.asarray(offset, dtype=float).reshape(m, d),
                    np.broadcast_to(np.asarray(lower, dtype=float), shape).ravel().copy(),
                    np.broadcast_to(np.asarray(upper, dtype=float), shape).ravel().copy(),
                    equality,
                    sign_lower,
                )
            )

        def cumulative(rows, r_idx, var, coef):
            for tau in range(t + 1):
                rows.add(tau, r_idx, var, coef)

        slot = np.arange(W * H).reshape(W, H)

        # balance for every realization
        bal = _Rows(W * H, n_x)
        bal.add(t, slot[..., None], p, 1.0)
        bal.add(t, slot[..., None], y, 1.0)
        bal.add(t, slot[..., None], dis, 1.0)
        bal.add(t, slot[..., None], ch, -1.0)
        block("balance", "balance", (W, H), bal, -load.sum(axis=2), 0.0, 0.0, equality=True)

        if E:
            fr = _Rows(W * H * E, n_x)
            ridx = (slot[..., None] * E + np.arange(E))[..., None]  # (W, H, E, 1)
            for var, nodes, sign in ((p, s.existing_node, 1.0), (y, s.candidate_node, 1.0), (dis, s.storage_node, 1.0), (ch, s.storage_node, -1.0)):
                if var.shape[-1]:
                    fr.add(t, ridx, var[:, :, None, :], sign * F[:, nodes][None, None])
            offset = -np.einsum("en,whnd->whed", F, load)
            block("flow", "flow", (W, H, E), fr, offset, -s.line_limit, s.line_limit)

        if G:
            r = _Rows(W * H * G, n_x)
            r.add(t, np.arange(W * H * G), p.ravel(), 1.0)
            cap = s.existing_availability[t] * s.existing_capacity[t]
            block("generation", "existing_generation", (W, H, G), r, None, 0.0, cap, sign_lower=True)
        if C:
            r = _Rows(W * H * C, n_x)
            r.add(t, np.arange(W * H * C), y.ravel(), 1.0)
            block("generation", "candidate_generation_min", (W, H, C), r, sign_lower=True)
            r = _Rows(W * H * C, n_x)
            rid = np.arange(W * H * C).reshape(W, H, C)
            r.add(t, rid, y, -1.0)
            cumulative(r, rid, np.broadcast_to(ig, (W, H, C)), s.candidate_availability[t])
            block("generation", "candidate_generation_max", (W, H, C), r)

        if H > 1 and G:
            r = _Rows(W * (H - 1) * G, n_x)
            rid = np.arange(W * (H - 1) * G).reshape(W, H - 1, G)
            r.add(t, rid, p[:, 1:], 1.0)
            r.add(t, rid, p[:, :-1], -1.0)
            cap = s.existing_capacity[t]
            block("ramping", "existing_ramping", (W, H - 1, G), r, None, -s.existing_ramp_down * cap, s.existing_ramp_up * cap)
        if H > 1 and C:
            rid = np.arange(W * (H - 1) * C).reshape(W, H - 1, C)
            r = _Rows(rid.size, n_x)
            r.add(t, rid, y[:, 1:], -1.0)
            r.add(t, rid, y[:, :-1], 1.0)
            cumulative(r, rid, np.broadcast_to(ig, rid.shape), s.candidate_ramp_up)
            block("ramping", "candidate_ramping_up", rid.shape, r)
            r = _Rows(rid.size, n_x)
            r.add(t, rid, y[:, 1:], 1.0)
            r.add(t, rid, y[:, :-1], -1.0)
            cumulative(r, rid, np.broadcast_to(ig, rid.shape), s.candidate_ramp_down)
            block("ramping", "candidate_ramping_down", rid.shape, r)

        if K:
            rid = np.arange(W * H * K).reshape(W, H, K)
            r = _Rows(rid.size, n_x)
            r.add(t, rid, soc, 1.0)
            r.add(t, rid[:, 1:], soc[:, :-1], -1.0)
            r.add(t, rid, ch, -s.charge_efficiency)
            r.add(t, rid, dis, 1.0 / s.discharge_efficiency)
            block("storage", "storage_recursion", (W, H, K), r, None, 0.0, 0.0, equality=True)
            for name, var, cap, extra in (
                ("state", soc, ie, None),
                ("charge", ch, ip, None),
                ("discharge", dis, ip, None),
                ("charge_discharge", ch, ip, dis),
            ):
                if extra is None:
                    r = _Rows(rid.size, n_x)
                    r.add(t, rid, var, 1.0)
                    block("storage", f"{name}_min", (W, H, K), r, sign_lower=True)
                r = _Rows(rid.size, n_x)
                r.add(t, rid, var, -1.0)
                if extra is not None:
                    r.add(t, rid, extra, -1.0)
                cumulative(r, rid, np.broadcast_to(cap, rid.shape), 1.0)
                block("storage", f"{name}_max", (W, H, K), r)

        r = _Rows(1, n_x)
        for w in range(W):
            r.add(t, 0, p[w], -weight[w] * s.existing_emission)
            r.add(t, 0, y[w], -weight[w] * s.candidate_emission)
        block("emission", "emission", (1,), r, np.asarray(fac["emission_cap"][t]).reshape(1, d))

        for name, var, limit in (
            ("invest_gen", ig, s.candidate_max[t]),
            ("invest_energy", ie, s.storage_energy_max[t]),
            ("invest_power", ip, s.storage_power_max[t]),
        ):
            if var.size:
                r = _Rows(var.size, n_x)
                r.add(t, np.arange(var.size), var, 1.0)
                block("investment", name, var.shape, r, None, 0.0, limit, sign_lower=True)

        # costs: capex at the realized price, O&M on every later stage, fuel
        cost = np.zeros((n_x, d))
        cost[ig] = fac["capex_generation"][t]
        cost[ie] = fac["capex_energy"][t]
        cost[ip] = fac["capex_power"][t]
        cost[ig, 0] += s.candidate_om[t:].sum(axis=0)
        cost[ie, 0] += s.storage_energy_om[t:].sum(axis=0)
        cost[ip, 0] += s.storage_power_om[t:].sum(axis=0)
        cost[p] = weight[:, None, None, None] * np.asarray(fac["fuel_existing"][t])[None, None]
        cost[y] = weight[:, None, None, None] * np.asarray(fac["fuel_candidate"][t])[None, None]
        st.cost.append(cost)

        if np.isfinite(s.budget[t]):
            price = np.zeros((n_x, d))
            price[ig] = fac["capex_generation"][t]
            price[ie] = fac["capex_energy"][t]
            price[ip] = fac["capex_power"][t]
            st.budget.append(BudgetRow(t, price, float(s.budget[t])))

    st.cost_constant = float(np.sum(s.existing_om * s.existing_capacity))
    return st


def realize_row(block: RowBlock, xi) -> np.ndarray:
    """Constant part ``offset @ xi^t`` of a row block at one scenario."""
    return block.offset @ np.asarray(xi)[: block.offset.shape[1]]


def realize_cost(st: PlanningStructure, t: int, xi) -> np.ndarray:
    c = st.cost[t]
    return c @ np.asarray(xi)[: c.shape[1]]
