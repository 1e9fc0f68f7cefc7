"""Two-stage scenario program and the worst-case loss search against it.

The loss of a rule-based policy at a scenario ``xi`` is its cost there minus the
cost of the scenario program's first stage plus the least-cost recourse at ``xi``.
With the policy cost read off the rules (linear in ``xi`` when prices are fixed)
and the recourse value convex in ``xi``, the loss is concave; its exact maximum
over a box is one LP in ``(xi, recourse)``, which serves as a certificate for the
vertex and coordinate searches.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .conic import EQ, GE, LE, ProgramBuilder, SolverSettings, solve
from .deterministic import PlanningError
from .evaluate import sample_xi
from .ldr import LdrPolicy
from .model import ModelError, SystemData, UncertaintyModel
from .structure import PlanningStructure, build_structure

UNSUPPORTED_UNCERTAINTY = "UNSUPPORTED_UNCERTAINTY"
PRICE_FAMILIES = ("capex_generation", "capex_energy", "capex_power", "fuel_existing", "fuel_candidate")
VERTEX_LIMIT = 12


class UnsupportedUncertainty(ModelError):
    code = UNSUPPORTED_UNCERTAINTY


def _require_two_stage(st: PlanningStructure):
    if st.stages != 2:
        raise ModelError(f"the scenario program needs exactly two stages, got {st.stages}")
    random_prices = [f for f in PRICE_FAMILIES if f in st.uncertainty.uncertain_families()]
    if random_prices:
        raise UnsupportedUncertainty(f"{UNSUPPORTED_UNCERTAINTY}: uncertain cost factors {', '.join(random_prices)}")


def _selector(cols, n_x: int, n: int) -> sp.csr_matrix:
    cols = np.asarray(cols, dtype=int).ravel()
    return sp.csr_matrix((np.ones(n_x), (np.arange(n_x), cols)), shape=(n_x, n))


def add_stage_rows(
    b: ProgramBuilder,
    st: PlanningStructure,
    t: int,
    xi,
    cols: dict,
    fixed: dict | None = None,
    shed=None,
    xi_vars: dict | None = None,
) -> None:
    """Stage-t rows at scenario ``xi``.

    ``cols[tau]`` holds program indices of the stage-tau decisions, ``fixed[tau]``
    known decision values, ``shed`` the (W, H, N) indices of nodal shedding and
    ``xi_vars`` maps coordinates of ``xi`` to program variables.
    """
    fixed = fixed or {}
    xi_vars = xi_vars or {}
    xi = np.asarray(xi, dtype=float)
    s = st.system
    for block in st.rows:
        if block.stage != t:
            continue
        n = b.n_vars
        d = block.offset.shape[1]
        M = sp.csr_matrix((block.m, n))
        const = block.offset @ xi[:d]
        for tau, A in block.terms.items():
            if tau in cols:
                M = M + A @ _selector(cols[tau], st.n_x, n)
            elif tau in fixed:
                const = const + A @ fixed[tau]
            else:
                raise ModelError(f"stage {tau} decisions are neither variables nor fixed")
        for j, var in xi_vars.items():
            if j < d and np.any(block.offset[:, j]):
                M = M + sp.csr_matrix((block.offset[:, j], (np.arange(block.m), np.full(block.m, var))), shape=(block.m, n))
                const = const - block.offset[:, j] * xi[j]
        if shed is not None and block.name in ("balance", "flow"):
            W, H, N = shed.shape
            if block.name == "balance":
                rows = np.repeat(np.arange(W * H), N)
                M = M + sp.csr_matrix((np.ones(rows.size), (rows, shed.ravel())), shape=(block.m, n))
            else:
                F = np.asarray(s.ptdf)
                E = F.shape[0]
                r = (np.arange(W * H)[:, None, None] * E + np.arange(E)[None, :, None]) * np.ones((1, 1, N), dtype=int)
                c = np.broadcast_to(shed.reshape(W * H, 1, N), r.shape)
                v = np.broadcast_to(F[None], r.shape)
                M = M + sp.csr_matrix((v.ravel(), (r.ravel(), c.ravel())), shape=(block.m, n))
        tag = block.family
        if block.equality:
            b.add_rows(M, EQ, block.lower - const, tag)
            continue
        lo, hi = np.isfinite(block.lower), np.isfinite(block.upper)
        if lo.any():
            b.add_rows(M[np.flatnonzero(lo)], GE, (block.lower - const)[lo], tag)
        if hi.any():
            b.add_rows(M[np.flatnonzero(hi)], LE, (block.upper - const)[hi], tag)
    for row in st.budget:
        if row.stage == t:
            price = row.price @ xi[: row.price.shape[1]]
            idx = np.asarray(cols[t])
            nz = np.flatnonzero(price)
            b.add_row(dict(zip(idx[nz].tolist(), price[nz].tolist())), LE, row.bound, "budget")


def stage_cost(st: PlanningStructure, t: int, xi) -> np.ndarray:
    C = st.cost[t]
    return C @ np.asarray(xi, dtype=float)[: C.shape[1]]


@dataclass
class SaaInstance:
    structure: PlanningStructure
    scenarios: np.ndarray
    x1: np.ndarray  # shared first-stage decisions
    x2: np.ndarray  # (scenarios, n_x)
    objective: float
    solution: object = None

    def first_stage_cost(self) -> float:
        return float(stage_cost(self.structure, 0, np.ones(self.structure.index.dim(0))) @ self.x1)


def build_saa(s: SystemData, u: UncertaintyModel, scenarios, structure: PlanningStructure | None = None):
    """Extensive form with shared first stage and one recourse copy per scenario."""
    st = structure or build_structure(s, u)
    _require_two_stage(st)
    scenarios = np.atleast_2d(np.asarray(scenarios, dtype=float))
    if scenarios.shape[1] != u.size or np.any(scenarios[:, 0] != 1.0):
        raise ModelError(f"scenarios must have {u.size} coordinates with the first equal to 1")
    omega = scenarios.shape[0]
    b = ProgramBuilder()
    x1 = b.add_variables("first_stage", (st.n_x,))
    x2 = b.add_variables("recourse", (omega, st.n_x))
    ones = np.ones(u.size)
    b.add_objective(x1, stage_cost(st, 0, ones))
    b.add_objective_constant(st.cost_constant)
    add_stage_rows(b, st, 0, ones, {0: x1})
    for k, xi in enumerate(scenarios):
        b.add_objective(x2[k], stage_cost(st, 1, xi) / omega)
        add_stage_rows(b, st, 1, xi, {0: x1, 1: x2[k]})
    return b.build(), (st, x1, x2)


def solve_saa(s: SystemData, u: UncertaintyModel, scenarios, settings: SolverSettings | None = None, structure=None) -> SaaInstance:
    program, (st, x1, x2) = build_saa(s, u, scenarios, structure)
    sol = solve(program, settings)
    if not sol.optimal:
        raise PlanningError(f"scenario program not solved: {sol.status.value} {sol.message}", sol)
    return SaaInstance(st, np.atleast_2d(scenarios), sol.x[x1], sol.x[x2], sol.objective, sol)


@dataclass
class Recourse:
    x2: np.ndarray
    shed: np.ndarray  # (W, H, N) GW per slot
    cost: float  # stage-two cost including shedding


def _shed_cost(b: ProgramBuilder, s: SystemData, shed, penalty: float):
    weight = np.asarray(s.horizon_weight)
    for w in range(s.horizons):
        b.add_objective(shed[w], weight[w] * penalty)


def lower_level_recourse(st: PlanningStructure, x1, xi, penalty: float | None = None, settings=None) -> Recourse:
    """Least-cost second stage at ``xi`` with the first stage fixed; shedding keeps it feasible."""
    s = st.system
    penalty = s.shed_penalty if penalty is None else float(penalty)
    b = ProgramBuilder()
    x2 = b.add_variables("recourse", (st.n_x,))
    shed = b.add_variables("shed", (s.horizons, s.hours, s.nodes), lower=0.0)
    b.add_objective(x2, stage_cost(st, 1, xi))
    _shed_cost(b, s, shed, penalty)
    add_stage_rows(b, st, 1, xi, {1: x2}, {0: np.asarray(x1, dtype=float)}, shed)
    sol = solve(b.build(), settings)
    if not sol.optimal:
        raise PlanningError(f"recourse problem not solved: {sol.status.value} {sol.message}", sol)
    return Recourse(sol.x[x2], sol.x[shed], sol.objective)


def rule_cost(policy: LdrPolicy, xi) -> float:
    """Cost of the policy's own decisions at ``xi``."""
    st = policy.structure
    xi = np.asarray(xi, dtype=float)
    total = st.cost_constant
    for t, X in enumerate(policy.rules):
        d = X.shape[1]
        total += float(stage_cost(st, t, xi) @ (X @ xi[:d]))
    return total


def reoptimized_cost(policy: LdrPolicy, xi, penalty: float | None = None, settings=None) -> float:
    """Policy cost with its investments realized and its operations re-dispatched."""
    st = policy.structure
    s = st.system
    penalty = s.shed_penalty if penalty is None else float(penalty)
    values = policy.realize(xi)
    inv = np.concatenate([st.var(n) for n in ("invest_gen", "invest_energy", "invest_power")])
    ops = np.setdiff1d(np.arange(st.n_x), inv)
    b = ProgramBuilder()
    x = b.add_variables("operations", (2, ops.size))
    shed = b.add_variables("shed", (2, s.horizons, s.hours, s.nodes), lower=0.0)
    full = []
    for t in range(2):
        cols = np.zeros(st.n_x, dtype=int)
        cols[ops] = x[t]
        full.append(cols)
    total = st.cost_constant
    for t in range(2):
        c = stage_cost(st, t, xi)
        realized = np.clip(values[t][inv], 0.0, None)
        total += float(c[inv] @ realized)
        b.add_objective(x[t], c[ops])
        _shed_cost(b, s, shed[t], penalty)
    # investments enter as fixed values through a bound-pinned copy
    pinned = b.add_variables("investments", (2, inv.size))
    for t in range(2):
        realized = np.clip(values[t][inv], 0.0, None)
        b.add_rows(_selector(pinned[t], inv.size, b.n_vars), EQ, realized, "investment")
        full[t][inv] = pinned[t]
    for t in range(2):
        add_stage_rows(b, st, t, xi, {tau: full[tau] for tau in range(t + 1)}, shed=shed[t])
    sol = solve(b.build(), settings)
    if not sol.optimal:
        raise PlanningError(f"policy re-dispatch not solved: {sol.status.value} {sol.message}", sol)
    return total + sol.objective


def box_from_samples(u: UncertaintyModel, count: int = 1000, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate min and max over Normal draws."""
    xi = sample_xi("normal", u, count, seed)
    return xi.min(axis=0), xi.max(axis=0)


@dataclass
class WorstCaseResult:
    xi: np.ndarray
    loss: float
    lower: np.ndarray
    upper: np.ndarray
    at_lower: np.ndarray
    at_upper: np.ndarray
    is_vertex: bool
    method: str
    vertex_xi: np.ndarray | None = None
    vertex_loss: float = float("nan")
    certificate_xi: np.ndarray | None = None
    certificate_loss: float = float("nan")
    evaluations: int = 0
    budget_exhausted: bool = False
    anchor_loss: float = float("nan")
    history: list = field(default_factory=list)


class LossOracle:
    """Counts and caches loss evaluations against a fixed first stage."""

    def __init__(self, policy: LdrPolicy, x1, ldr_cost: str = "rule", penalty=None, settings=None, budget: int = 10_000):
        if ldr_cost not in ("rule", "reoptimize"):
            raise ModelError(f"ldr_cost must be 'rule' or 'reoptimize', got {ldr_cost!r}")
        self.policy, self.x1 = policy, np.asarray(x1, dtype=float)
        self.st = policy.structure
        self.ldr_cost, self.penalty, self.settings = ldr_cost, penalty, settings
        self.budget, self.count = budget, 0
        self.cache: dict = {}
        self.first = float(stage_cost(self.st, 0, np.ones(self.st.index.dim(0))) @ self.x1) + self.st.cost_constant

    @property
    def exhausted(self) -> bool:
        return self.count >= self.budget

    def __call__(self, xi) -> float:
        key = tuple(np.round(np.asarray(xi, dtype=float), 12))
        if key in self.cache:
            return self.cache[key]
        self.count += 1
        xi = np.asarray(xi, dtype=float)
        if self.ldr_cost == "rule":
            ldr = rule_cost(self.policy, xi)
        else:
            ldr = reoptimized_cost(self.policy, xi, self.penalty, self.settings)
        rec = lower_level_recourse(self.st, self.x1, xi, self.penalty, self.settings)
        value = ldr - (self.first + rec.cost)
        self.cache[key] = value
        return value


def _active(lower, upper) -> np.ndarray:
    return np.flatnonzero(upper - lower > 0.0)


def enumerate_vertices(oracle: LossOracle, lower, upper):
    """Exhaustive maximum over the box corners (active coordinates only)."""
    active = _active(lower, upper)
    if active.size > VERTEX_LIMIT:
        raise ModelError(f"{active.size} uncertain coordinates exceed the vertex limit {VERTEX_LIMIT}")
    best_xi, best = None, -math.inf
    for corner in itertools.product((0, 1), repeat=active.size):
        xi = lower.copy()
        pick = np.asarray(corner, dtype=bool)
        xi[active[pick]] = upper[active[pick]]
        val = oracle(xi)
        if val > best:
            best_xi, best = xi, val
    return best_xi, best


def _golden(f, a: float, b: float, tol: float, limit) -> tuple[float, float]:
    """Maximize a unimodal function on [a, b]; endpoints are always compared."""
    phi = (math.sqrt(5.0) - 1.0) / 2.0
    fa, fb = f(a), f(b)
    best = (a, fa) if fa >= fb else (b, fb)
    c, d = b - phi * (b - a), a + phi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol and not limit():
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = f(d)
    for x, fx in ((c, fc), (d, fd)):
        if fx > best[1]:
            best = (x, fx)
    return best


def coordinate_ascent(oracle: LossOracle, start, lower, upper, sweeps: int = 20, rel_tol: float = 1e-6):
    xi = np.clip(np.asarray(start, dtype=float), lower, upper)
    val = oracle(xi)
    active = _active(lower, upper)
    for _ in range(sweeps):
        before = val
        for j in active:
            def f(v, j=j):
                trial = xi.copy()
                trial[j] = v
                return oracle(trial)

            width = upper[j] - lower[j]
            v, fv = _golden(f, lower[j], upper[j], rel_tol * width, lambda: oracle.exhausted)
            if fv > val:
                xi[j], val = v, fv
            if oracle.exhausted:
                return xi, val
        if val - before <= rel_tol * max(1.0, abs(val)):
            break
    return xi, val


def exact_worst_case(oracle: LossOracle, lower, upper, settings=None):
    """Joint LP over the scenario and the recourse; valid for rule-evaluated cost."""
    if oracle.ldr_cost != "rule":
        raise ModelError("the joint program needs the rule-evaluated policy cost")
    st, s = oracle.st, oracle.st.system
    penalty = s.shed_penalty if oracle.penalty is None else float(oracle.penalty)
    active = _active(lower, upper)
    base = lower.copy()
    base[active] = 1.0
    b = ProgramBuilder()
    x2 = b.add_variables("recourse", (st.n_x,))
    shed = b.add_variables("shed", (s.horizons, s.hours, s.nodes), lower=0.0)
    xv = b.add_variables("scenario", (active.size,), lower=lower[active], upper=upper[active])
    b.add_objective(x2, stage_cost(st, 1, base))
    _shed_cost(b, s, shed, penalty)
    # minus the policy cost, whose slope in xi_j is sum_t c_t . X_t[:, j]
    slope = np.zeros(st.uncertainty.size)
    for t, X in enumerate(oracle.policy.rules):
        slope[: X.shape[1]] += stage_cost(st, t, base) @ X
    b.add_objective(xv, -slope[active])
    add_stage_rows(b, st, 1, base, {1: x2}, {0: oracle.x1}, shed, dict(zip(active.tolist(), xv.tolist())))
    sol = solve(b.build(), settings)
    if not sol.optimal:
        raise PlanningError(f"joint worst-case program not solved: {sol.status.value} {sol.message}", sol)
    xi = base.copy()
    xi[active] = np.clip(sol.x[xv], lower[active], upper[active])
    return xi, oracle(xi)


def worst_case_search(
    policy: LdrPolicy,
    x1,
    lower,
    upper,
    budget: int = 2000,
    ldr_cost: str = "rule",
    restarts: int = 3,
    seed: int = 0,
    penalty: float | None = None,
    settings: SolverSettings | None = None,
    exact: bool = True,
) -> WorstCaseResult:
    """Largest loss over the box: corners when few coordinates are uncertain, then
    multi-start coordinate ascent, then (rule cost only) the joint LP certificate."""
    lower, upper = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
    if lower.shape != upper.shape or np.any(lower > upper) or not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
        raise ModelError("the search box needs finite bounds with lower <= upper")
    oracle = LossOracle(policy, x1, ldr_cost, penalty, settings, budget)
    active = _active(lower, upper)
    anchor = np.clip(np.ones_like(lower), lower, upper)
    candidates = [("anchor", anchor, oracle(anchor))]
    vertex_xi, vertex_loss = None, float("nan")
    if active.size <= VERTEX_LIMIT:
        vertex_xi, vertex_loss = enumerate_vertices(oracle, lower, upper)
        candidates.append(("vertex", vertex_xi, vertex_loss))
    starts = [anchor] + ([vertex_xi] if vertex_xi is not None else [])
    rng = np.random.default_rng(seed)
    for _ in range(restarts):
        starts.append(lower + rng.random(lower.size) * (upper - lower))
    for x0 in starts:
        if oracle.exhausted:
            break
        xi, val = coordinate_ascent(oracle, x0, lower, upper)
        candidates.append(("ascent", xi, val))
    cert_xi, cert_loss = None, float("nan")
    if exact and ldr_cost == "rule" and active.size:
        cert_xi, cert_loss = exact_worst_case(oracle, lower, upper, settings)
        candidates.append(("certificate", cert_xi, cert_loss))
    # prefer earlier (simpler) candidates on ties
    k = max(range(len(candidates)), key=lambda i: (candidates[i][2], -i))
    method, xi, loss = candidates[k]
    width = upper - lower
    at_lo = (xi - lower) <= 1e-9 * np.maximum(1.0, width)
    at_hi = (upper - xi) <= 1e-9 * np.maximum(1.0, width)
    at_lo[width == 0] = at_hi[width == 0] = True
    return WorstCaseResult(
        xi=xi,
        loss=loss,
        lower=lower,
        upper=upper,
        at_lower=at_lo,
        at_upper=at_hi,
        is_vertex=bool(np.all(at_lo | at_hi)),
        method=method,
        vertex_xi=vertex_xi,
        vertex_loss=vertex_loss,
        certificate_xi=cert_xi,
        certificate_loss=cert_loss,
        evaluations=oracle.count,
        budget_exhausted=oracle.exhausted,
        anchor_loss=candidates[0][2],
        history=[(m, float(v)) for m, _, v in candidates],
    )
