"""Linear decision rules and the chance-constrained SOCP built on them.

A decision ``x_t(xi)`` of stage ``t`` is ``X_t @ xi[:dim(t)]``.  Rows of affine
functions of ``xi`` are handled in batches (:class:`RuleRows`): for ``m`` rows at
stage ``t`` the coefficient vector of row ``r`` is ``M[r*d:(r+1)*d] @ v + c[r]``
where ``v`` are the program variables.  For a row ``g``, ``mean = g @ 1`` and the
standard deviation is ``norm(W_t.T @ g)`` with ``W_t = stage_scale(t)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .conic import EQ, GE, LE, ConicProgram, ProgramBuilder, SolverSettings, Solution, Status, solve
from .deterministic import PlanningError
from .model import DRO, Instance, ModelError, UncertaintyModel, bonferroni_split, safety_factor  # noqa: F401
from .structure import PlanningStructure, RowBlock, build_structure


@dataclass
class RuleRows:
    """A batch of affine rows ``g_r(xi) = (M_r v + c_r) @ xi[:d]``."""

    M: sp.csr_matrix  # (m * d, n_vars)
    c: np.ndarray  # (m, d)

    @property
    def m(self) -> int:
        return self.c.shape[0]

    @property
    def d(self) -> int:
        return self.c.shape[1]

    def pad(self, n_vars: int) -> "RuleRows":
        M = sp.csr_matrix((self.M.data, self.M.indices, self.M.indptr), shape=(self.M.shape[0], n_vars))
        return RuleRows(M, self.c)

    def scaled(self, factor: float) -> "RuleRows":
        return RuleRows(self.M * factor, self.c * factor)

    def shifted(self, level) -> "RuleRows":
        """Subtract a constant ``level`` (per row) from every realization."""
        c = self.c.copy()
        c[:, 0] -= np.broadcast_to(np.asarray(level, dtype=float), (self.m,))
        return RuleRows(self.M, c)

    def subset(self, rows) -> "RuleRows":
        rows = np.asarray(rows, dtype=int)
        flat = (rows[:, None] * self.d + np.arange(self.d)).ravel()
        return RuleRows(self.M[flat], self.c[rows])

    def mean(self) -> tuple[sp.csr_matrix, np.ndarray]:
        op = sp.kron(sp.identity(self.m, format="csr"), np.ones((1, self.d)), format="csr")
        return sp.csr_matrix(op @ self.M), self.c.sum(axis=1)

    def spread(self, W: np.ndarray) -> tuple[sp.csr_matrix, np.ndarray]:
        """Rows of ``W.T @ g_r`` stacked row by row (``m * r`` rows)."""
        op = sp.kron(sp.identity(self.m, format="csr"), sp.csr_matrix(W.T), format="csr")
        return sp.csr_matrix(op @ self.M), (self.c @ W).ravel()


def lift(block: RowBlock, bases: list, cols: list, n_vars: int) -> RuleRows:
    """Express a row block in terms of rule coefficients.

    The stage-tau rule has coefficients on the columns ``cols[tau]`` of ``xi``; they
    enter the same columns of a stage-t row (``tau <= t``).  ``cols[t]`` must hold
    the constant column and every coordinate with positive variance.
    """
    d = block.offset.shape[1]
    rows, cols_out, vals = [], [], []
    for tau, A in block.terms.items():
        A = A.tocoo()
        live = cols[tau]
        j = np.arange(live.size)
        rows.append((A.row[:, None] * d + live).ravel())
        cols_out.append((bases[tau] + A.col[:, None] * live.size + j).ravel())
        vals.append(np.repeat(A.data, live.size))
    if rows:
        M = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols_out))), shape=(block.m * d, n_vars)
        )
    else:
        M = sp.csr_matrix((block.m * d, n_vars))
    # coordinates without variance equal 1, so their constants join column 0
    c = np.zeros_like(block.offset, dtype=float)
    live = cols[block.stage]
    c[:, live] = block.offset[:, live]
    c[:, 0] += block.offset.sum(axis=1) - block.offset[:, live].sum(axis=1)
    return RuleRows(M, c)


def expected_objective_terms(u: UncertaintyModel, costs: list) -> list:
    """Coefficients of ``E[c_t(xi)^T X_t xi]``: for stage costs ``C_t`` this is
    ``C_t @ second_moment[:d, :d]``, one array of shape ``X_t`` per stage."""
    out = []
    for t, C in enumerate(costs):
        C = np.atleast_2d(np.asarray(C, dtype=float))
        d = u.index.dim(t)
        if C.shape[1] != d:
            raise ModelError(f"stage {t} cost has {C.shape[1]} columns, expected {d}")
        out.append(C @ u.stage_moment(t))
    return out


def expected_product(u: UncertaintyModel, t: int, C, X) -> float:
    """``E[(C xi)^T (X xi)]`` for stage-t matrices with matching row counts."""
    return float(np.sum((np.asarray(C) @ u.stage_moment(t)) * np.asarray(X)))


def enforce_equalities_for_all_xi(b: ProgramBuilder, g: RuleRows, tag: str, level=0.0) -> None:
    """``g(xi) == level`` for every realization, imposed column by column."""
    g = g.shifted(level).pad(b.n_vars)
    b.add_rows(g.M, EQ, -g.c.ravel(), tag)


def reformulate_single_sided(b: ProgramBuilder, g: RuleRows, W: np.ndarray, eps: float, mode: str, tag: str) -> None:
    """``P[g(xi) >= 0] >= 1 - eps`` as ``kappa * ||W.T g|| <= g @ 1``."""
    kappa = safety_factor(eps, mode)
    g = g.pad(b.n_vars)
    head, head_const = g.mean()
    if W.shape[1] == 0:
        b.add_rows(head, GE, -head_const, tag)
        return
    body, body_const = g.spread(W)
    b.add_cones(head, head_const, kappa * body, kappa * body_const, tag)


def reformulate_double_sided(b: ProgramBuilder, g: RuleRows, W: np.ndarray, lower, upper, eps: float, tag: str):
    """Exact moment-robust ``P[lower <= g(xi) <= upper] >= 1 - eps``.

    Emits per row one cone ``||(W.T g, z)|| <= sqrt(eps) * (half - x)``, the two
    rows ``|g @ 1 - mid| <= z + x`` and the bounds ``0 <= x <= half``, ``z >= 0``.
    Returns the auxiliary ``(x, z)`` index arrays (empty without random columns).
    """
    if not 0.0 < eps < 0.5:
        raise ModelError(f"violation probability must lie in (0, 0.5), got {eps}")
    m = g.m
    lower = np.broadcast_to(np.asarray(lower, dtype=float), (m,))
    upper = np.broadcast_to(np.asarray(upper, dtype=float), (m,))
    if np.any(upper <= lower):
        raise ModelError(f"{tag}: double-sided rows need upper > lower")
    half = (upper - lower) / 2.0
    mid = (upper + lower) / 2.0
    if W.shape[1] == 0:
        g = g.pad(b.n_vars)
        head, head_const = g.mean()
        b.add_rows(head, GE, lower - head_const, tag)
        b.add_rows(head, LE, upper - head_const, tag)
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    x = b.add_variables(f"{tag}.x", (m,), lower=0.0, upper=half)
    z = b.add_variables(f"{tag}.z", (m,), lower=0.0)
    n = b.n_vars
    g = g.pad(n)
    r = W.shape[1]
    root = np.sqrt(eps)
    sel_x = sp.csr_matrix((np.ones(m), (np.arange(m), x)), shape=(m, n))
    sel_z = sp.csr_matrix((np.ones(m), (np.arange(m), z)), shape=(m, n))
    ext = np.vstack([W.T, np.zeros((1, W.shape[0]))])
    op = sp.kron(sp.identity(m, format="csr"), sp.csr_matrix(ext), format="csr")
    body = sp.csr_matrix(op @ g.M)
    z_rows = np.arange(m) * (r + 1) + r
    body = body + sp.csr_matrix((np.ones(m), (z_rows, z)), shape=(m * (r + 1), n))
    body_const = np.hstack([g.c @ W, np.zeros((m, 1))]).ravel()
    b.add_cones(-root * sel_x, root * half, body, body_const, tag)
    head, head_const = g.mean()
    b.add_rows(head - sel_x - sel_z, LE, mid - head_const, tag)
    b.add_rows(-head - sel_x - sel_z, LE, head_const - mid, tag)
    return x, z


def add_chance_rows(b: ProgramBuilder, g: RuleRows, W, lower, upper, eps: float, mode: str, tag: str):
    """Dispatch one batch of rows with constant bounds to the right reformulation.

    Rows with ``lower == upper`` become equalities for every realization; in
    NORMAL mode a double-sided row is split into two single-sided rows.
    """
    lower = np.broadcast_to(np.asarray(lower, dtype=float), (g.m,))
    upper = np.broadcast_to(np.asarray(upper, dtype=float), (g.m,))
    aux = {}
    fixed = np.flatnonzero(lower == upper)
    if fixed.size:
        enforce_equalities_for_all_xi(b, g.subset(fixed), tag, lower[fixed])
    both = np.flatnonzero(np.isfinite(lower) & np.isfinite(upper) & (lower < upper))
    lo_only = np.flatnonzero(np.isfinite(lower) & ~np.isfinite(upper))
    hi_only = np.flatnonzero(~np.isfinite(lower) & np.isfinite(upper))
    if both.size and mode == DRO:
        aux["x"], aux["z"] = reformulate_double_sided(b, g.subset(both), W, lower[both], upper[both], eps, tag)
        aux["rows"] = both
    elif both.size:
        lo_only = np.union1d(lo_only, both)
        hi_only = np.union1d(hi_only, both)
    if lo_only.size:
        reformulate_single_sided(b, g.subset(lo_only).shifted(lower[lo_only]), W, eps, mode, tag)
    if hi_only.size:
        reformulate_single_sided(b, g.subset(hi_only).shifted(upper[hi_only]).scaled(-1.0), W, eps, mode, tag)
    return aux


def investment_variance(Y: np.ndarray, u: UncertaintyModel, t: int) -> np.ndarray:
    """Standard deviation of every row of the stage-t rule ``Y`` (rows x dim(t))."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    factor = u.chol[: u.index.dim(t)]
    return np.linalg.norm(Y @ factor, axis=1)


@dataclass(frozen=True)
class VarianceConfig:
    """Per-unit caps ``std <= alpha * mean`` on investment rules; ``inf`` drops the row."""

    generation: object = np.inf
    energy: object = np.inf
    power: object = np.inf

    def __post_init__(self):
        for label in ("generation", "energy", "power"):
            value = np.asarray(getattr(self, label), dtype=float)
            if np.isnan(value).any() or (value < 0).any():
                raise ModelError(f"variance cap {label} must be nonnegative")

    @classmethod
    def uniform(cls, alpha: float) -> "VarianceConfig":
        return cls(alpha, alpha, alpha)

    def caps(self, label: str, units: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(getattr(self, label), dtype=float), (units,))


INVESTMENTS = (("invest_gen", "generation"), ("invest_energy", "energy"), ("invest_power", "power"))


def _add_variance_rows(b, layout: "RuleLayout", variance: VarianceConfig):
    st = layout.structure
    u = st.uncertainty
    for t in range(st.stages):
        W = u.stage_scale(t)
        if W.shape[1] == 0:
            continue
        d, live = u.index.dim(t), layout.cols[t]
        for name, label in INVESTMENTS:
            idx = st.var(name)
            alpha = variance.caps(label, idx.size)
            for i, a in zip(idx, alpha):
                if not np.isfinite(a):
                    continue
                var = layout.bases[t] + i * live.size + np.arange(live.size)
                M = sp.csr_matrix((np.ones(live.size), (live, var)), shape=(d, b.n_vars))
                g = RuleRows(M, np.zeros((1, d)))
                body, _ = g.spread(W)
                head, _ = g.mean()
                if a == 0.0:
                    b.add_rows(body, EQ, 0.0, "variance")
                else:
                    b.add_cones(a * head, 0.0, body, 0.0, "variance")


@dataclass
class RuleLayout:
    """Where each stage's rule coefficients live in the program variable vector."""

    structure: PlanningStructure
    bases: list
    cols: list
    aux: dict = field(default_factory=dict)

    def rules(self, x: np.ndarray) -> list:
        st = self.structure
        out = []
        for t, (b, live) in enumerate(zip(self.bases, self.cols)):
            X = np.zeros((st.n_x, st.index.dim(t)))
            X[:, live] = x[b : b + st.n_x * live.size].reshape(st.n_x, live.size)
            out.append(X)
        return out

    def stage_indices(self, t: int, rows=None) -> np.ndarray:
        """Program indices of rule coefficients, shape (rows, live columns)."""
        rows = np.arange(self.structure.n_x) if rows is None else np.asarray(rows)
        live = self.cols[t]
        return self.bases[t] + rows[..., None] * live.size + np.arange(live.size)


def add_rule_variables(b: ProgramBuilder, st: PlanningStructure) -> RuleLayout:
    bases, cols = [], []
    for t in range(st.stages):
        live = st.uncertainty.live_columns(t)
        bases.append(b.n_vars)
        cols.append(live)
        b.add_variables(f"rule[{t}]", (st.n_x, live.size))
    return RuleLayout(st, bases, cols)


def add_expected_objective(b: ProgramBuilder, layout: RuleLayout) -> None:
    st = layout.structure
    for t, coef in enumerate(expected_objective_terms(st.uncertainty, st.cost)):
        b.add_objective(layout.stage_indices(t), coef[:, layout.cols[t]])
    b.add_objective_constant(st.cost_constant)


def add_expected_budget(b: ProgramBuilder, layout: RuleLayout) -> None:
    st = layout.structure
    u = st.uncertainty
    for row in st.budget:
        coef = (row.price @ u.stage_moment(row.stage))[:, layout.cols[row.stage]].ravel()
        idx = layout.stage_indices(row.stage).ravel()
        nz = np.flatnonzero(coef)
        b.add_row(dict(zip(idx[nz].tolist(), coef[nz].tolist())), LE, row.bound, "budget")


def build_primal_ldr(
    inst: Instance,
    variance: VarianceConfig | None = None,
    budget: bool = True,
    structure: PlanningStructure | None = None,
) -> tuple[ConicProgram, RuleLayout]:
    """Chance-constrained expansion SOCP over linear decision rules."""
    st = structure or build_structure(inst.system, inst.uncertainty)
    u, risk = st.uncertainty, inst.risk
    eps = risk.individual(inst.system)
    b = ProgramBuilder()
    layout = add_rule_variables(b, st)
    add_expected_objective(b, layout)
    scales = [u.stage_scale(t) for t in range(st.stages)]
    for block in st.rows:
        g = lift(block, layout.bases, layout.cols, b.n_vars)
        tag = block.family
        if block.equality:
            enforce_equalities_for_all_xi(b, g, tag, block.lower)
            continue
        aux = add_chance_rows(b, g, scales[block.stage], block.lower, block.upper, eps[block.family], risk.mode, tag)
        if aux.get("x") is not None and len(aux["x"]):
            layout.aux[(block.name, block.stage)] = aux
    if budget:
        add_expected_budget(b, layout)
    if variance is not None:
        _add_variance_rows(b, layout, variance)
    return b.build(), layout


@dataclass
class LdrPolicy:
    """Optimized rule matrices ``X_t`` (decisions x dim(t)) in structure order."""

    structure: PlanningStructure
    rules: list
    objective: float
    mode: str = DRO
    aux: dict = field(default_factory=dict)
    solution: Solution | None = None

    @property
    def stages(self) -> int:
        return len(self.rules)

    def block(self, name: str, t: int) -> np.ndarray:
        """Rule coefficients of a named decision block at stage t, shape (*block, dim(t))."""
        idx = self.structure.var(name)
        return self.rules[t][idx]

    def realize(self, xi) -> list:
        xi = np.asarray(xi, dtype=float)
        return [X @ xi[: X.shape[1]] for X in self.rules]

    def nominal(self) -> list:
        return [X.sum(axis=1) for X in self.rules]

    def investments(self, xi=None) -> dict:
        """Realized (or nominal) per-stage investments as ``(T, units)`` arrays."""
        values = self.nominal() if xi is None else self.realize(xi)
        st = self.structure
        return {name: np.array([v[st.var(name)] for v in values]) for name, _ in INVESTMENTS}

    def investment_std(self) -> dict:
        """Per-stage, per-unit standard deviation of every investment rule."""
        u = self.structure.uncertainty
        return {
            name: np.array([investment_variance(self.block(name, t), u, t) for t in range(self.stages)])
            for name, _ in INVESTMENTS
        }

    def expected_costs(self) -> dict:
        """Expected (investment, O&M, fuel) split of the objective."""
        st = self.structure
        s, u = st.system, st.uncertainty
        inv = om = fuel = 0.0
        om += st.cost_constant
        names = {"invest_gen": "capex_generation", "invest_energy": "capex_energy", "invest_power": "capex_power"}
        for t, X in enumerate(self.rules):
            for name, fam in names.items():
                idx = st.var(name)
                inv += expected_product(u, t, u.factors[fam][t], X[idx])
            mean = X.sum(axis=1)
            om += float(s.candidate_om[t:].sum(axis=0) @ mean[st.var("invest_gen")])
            om += float(s.storage_energy_om[t:].sum(axis=0) @ mean[st.var("invest_energy")])
            om += float(s.storage_power_om[t:].sum(axis=0) @ mean[st.var("invest_power")])
            for name in ("gen_existing", "gen_candidate"):
                idx = st.var(name)
                fuel += expected_product(u, t, st.cost[t][idx].reshape(-1, X.shape[1]), X[idx].reshape(-1, X.shape[1]))
        return {"investment": inv, "om": om, "fuel": fuel}

    def expected_investment_cost(self) -> np.ndarray:
        """Per-stage expected investment spending from the second-moment terms."""
        st = self.structure
        u = st.uncertainty
        out = []
        for t, X in enumerate(self.rules):
            total = 0.0
            for name, fam in (("invest_gen", "capex_generation"), ("invest_energy", "capex_energy"), ("invest_power", "capex_power")):
                total += expected_product(u, t, u.factors[fam][t], X[st.var(name)])
            out.append(total)
        return np.array(out)


def solve_primal_ldr(
    inst: Instance,
    variance: VarianceConfig | None = None,
    budget: bool = True,
    settings: SolverSettings | None = None,
    structure: PlanningStructure | None = None,
) -> LdrPolicy:
    program, layout = build_primal_ldr(inst, variance, budget, structure)
    sol = solve(program, settings)
    if sol.status is not Status.OPTIMAL:
        detail = f" (infeasible families: {', '.join(sol.infeasible_tags)})" if sol.infeasible_tags else ""
        raise PlanningError(f"LDR plan not solved: {sol.status.value}{detail} {sol.message}".rstrip(), sol)
    aux = {key: {"x": sol.x[v["x"]], "z": sol.x[v["z"]]} for key, v in layout.aux.items()}
    return LdrPolicy(layout.structure, layout.rules(sol.x), sol.objective, inst.risk.mode, aux, sol)


def policy_from_values(st: PlanningStructure, values: list, objective: float = float("nan")) -> LdrPolicy:
    """Wrap fixed per-stage decisions (e.g. a deterministic plan) as constant rules."""
    rules = []
    for t, v in enumerate(values):
        X = np.zeros((st.n_x, st.index.dim(t)))
        X[:, 0] = v
        rules.append(X)
    return LdrPolicy(st, rules, objective, mode="fixed")


def plan_values(st: PlanningStructure, plan) -> list:
    """Per-stage decision vectors of a deterministic plan in structure order."""
    out = []
    for t in range(st.stages):
        v = np.zeros(st.n_x)
        v[st.var("invest_gen")] = plan.invest_gen[t]
        v[st.var("invest_energy")] = plan.invest_energy[t]
        v[st.var("invest_power")] = plan.invest_power[t]
        v[st.var("gen_existing")] = plan.gen_existing[t]
        v[st.var("gen_candidate")] = plan.gen_candidate[t]
        v[st.var("state")] = plan.state[t]
        v[st.var("charge")] = plan.charge[t]
        v[st.var("discharge")] = plan.discharge[t]
        out.append(v)
    return out


def policy_to_dict(policy: LdrPolicy) -> dict:
    st = policy.structure
    stages = []
    for t, X in enumerate(policy.rules):
        stages.append({name: X[st.var(name)].tolist() for name in st.layout})
    return {
        "format": "ldr-policy v1",
        "instance": st.system.name,
        "mode": policy.mode,
        "objective": policy.objective,
        "stage_dims": list(st.index.dims),
        "stages": stages,
    }


def policy_from_dict(doc: dict, st: PlanningStructure) -> LdrPolicy:
    if doc.get("format") != "ldr-policy v1":
        raise ModelError("not an ldr-policy v1 document")
    if list(doc["stage_dims"]) != list(st.index.dims):
        raise ModelError("policy stage dimensions do not match the instance")
    rules = []
    for t, stage in enumerate(doc["stages"]):
        X = np.zeros((st.n_x, st.index.dim(t)))
        for name in st.layout:
            X[st.var(name)] = np.asarray(stage[name], dtype=float)
        rules.append(X)
    return LdrPolicy(st, rules, float(doc["objective"]), doc.get("mode", DRO))


def save_policy(policy: LdrPolicy, path) -> None:
    with open(path, "w") as fh:
        json.dump(policy_to_dict(policy), fh)
        fh.write("\n")

