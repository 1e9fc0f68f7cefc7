"""Stagewise standard form, its mechanical dual and the rule-based bound pair.

Standard form rows of stage ``t`` read ``sum_tau A_t[tau] x_tau(xi) - B_t xi^t >= 0``
(or ``== 0`` for equalities) with every decision nonnegative.  The dual assigns a
rule ``Lambda_t xi^t`` to every row; inequality duals are nonnegative, equality
duals are free, and each primal decision gives one reduced-cost row
``c_t - sum_{tau >= t} A_tau[t]^T lambda_tau >= 0``.  All nonnegativity
requirements on both sides hold with the stage probability ``eps_t`` through the
same safety-factor cone, which keeps weak duality intact for factors >= 1.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .conic import ConicProgram, ProgramBuilder, SolverSettings, solve
from .deterministic import PlanningError
from .ldr import enforce_equalities_for_all_xi, lift, reformulate_single_sided
from .model import ModelError, SystemData, UncertaintyModel, safety_factor
from .structure import PlanningStructure, RowBlock, build_structure

NEGATIVE_GAP = "NEGATIVE_GAP"
GAP_TOLERANCE = 1e-6


@dataclass
class RowSegment:
    """A run of standard-form rows taken from one named constraint block."""

    name: str
    family: str
    side: str  # lower, upper, equality or budget
    stage: int
    start: int
    count: int
    shape: tuple = ()


@dataclass
class StagewiseStandardForm:
    n_x: int
    A: list  # per stage {tau: csr (m_t, n_x)}
    B: list  # per stage (m_t, dim(t))
    equality: list  # per stage bool (m_t,)
    C: list  # per stage (n_x, dim(t))
    eps: list  # per stage violation probability
    constant: float = 0.0
    segments: list = field(default_factory=list)
    structure: PlanningStructure | None = None

    @property
    def stages(self) -> int:
        return len(self.B)

    def m(self, t: int) -> int:
        return self.B[t].shape[0]

    def dim(self, t: int) -> int:
        return self.B[t].shape[1]

    def row_name(self, t: int, r: int) -> str:
        for seg in self.segments:
            if seg.stage == t and seg.start <= r < seg.start + seg.count:
                pos = r - seg.start
                where = list(np.unravel_index(pos, seg.shape)) if seg.shape else [pos]
                return f"{seg.name}.{seg.side}[{t}]{where}"
        raise IndexError((t, r))

    def variable_name(self, t: int, i: int) -> str:
        if self.structure is not None:
            return f"{self.structure.variable_name(i)}[{t}]"
        return f"x[{t}][{i}]"

    def dimensions(self) -> dict:
        return {
            "stages": self.stages,
            "decisions_per_stage": self.n_x,
            "rows": [self.m(t) for t in range(self.stages)],
            "equalities": [int(e.sum()) for e in self.equality],
            "nonzeros": [int(sum(A.nnz for A in self.A[t].values())) for t in range(self.stages)],
        }


def _sign_columns(block: RowBlock) -> np.ndarray:
    A = block.terms[block.stage].tocsr()
    if set(block.terms) != {block.stage} or np.any(np.diff(A.indptr) != 1) or np.any(A.data != 1.0):
        raise ModelError(f"{block.name} is flagged as a sign row but is not a unit selector")
    return A.indices


def canonicalize(s: SystemData, u: UncertaintyModel, eps_hat: float, structure: PlanningStructure | None = None):
    """Rewrite the planning model as ``A x >= B xi`` rows with one probability per stage.

    Ranges become two rows, rows that only restate ``x >= 0`` are dropped (the sign
    is part of the form), and budget rows use baseline capital prices since a
    product of a random price and a random rule is not affine in ``xi``.
    """
    if not 0.0 < eps_hat < 0.5:
        raise ModelError(f"stage violation probability must lie in (0, 0.5), got {eps_hat}")
    st = structure or build_structure(s, u)
    T, n_x = st.stages, st.n_x
    pieces = [[] for _ in range(T)]
    covered = [np.zeros(n_x, dtype=bool) for _ in range(T)]

    def add(t, block_name, family, side, shape, terms, B, eq):
        pieces[t].append((block_name, family, side, tuple(shape), terms, B, eq))

    for block in st.rows:
        t, d = block.stage, block.offset.shape[1]
        e0 = np.zeros(d)
        e0[0] = 1.0
        if block.equality:
            add(t, block.name, block.family, "equality", block.shape, block.terms, block.lower[:, None] * e0 - block.offset, True)
            continue
        lo, hi = np.isfinite(block.lower), np.isfinite(block.upper)
        if block.sign_lower:
            covered[t][_sign_columns(block)] = True
        elif lo.any():
            rows = np.flatnonzero(lo)
            add(t, block.name, block.family, "lower", (rows.size,) if not lo.all() else block.shape,
                {tau: A[rows] for tau, A in block.terms.items()}, block.lower[rows, None] * e0 - block.offset[rows], False)
        if hi.any():
            rows = np.flatnonzero(hi)
            add(t, block.name, block.family, "upper", (rows.size,) if not hi.all() else block.shape,
                {tau: -A[rows] for tau, A in block.terms.items()}, block.offset[rows] - block.upper[rows, None] * e0, False)
    for row in st.budget:
        t, d = row.stage, st.index.dim(row.stage)
        price = row.price.sum(axis=1)
        B = np.zeros((1, d))
        B[0, 0] = -row.bound
        add(t, "budget", "investment", "budget", (1,), {t: sp.csr_matrix(-price[None, :])}, B, False)

    for t in range(T):
        missing = np.flatnonzero(~covered[t])
        if missing.size:
            raise ModelError(f"decision {st.variable_name(int(missing[0]))} of stage {t} has no sign row")

    A_out, B_out, eq_out, segments = [], [], [], []
    for t in range(T):
        start = 0
        mats = {tau: [] for tau in range(t + 1)}
        Bs, eqs = [], []
        for name, family, side, shape, terms, B, eq in pieces[t]:
            m = B.shape[0]
            for tau in range(t + 1):
                mats[tau].append(terms[tau].tocsr() if tau in terms else sp.csr_matrix((m, n_x)))
            Bs.append(B)
            eqs.append(np.full(m, eq))
            segments.append(RowSegment(name, family, side, t, start, m, shape))
            start += m
        A_out.append({tau: sp.vstack(v, format="csr") for tau, v in mats.items() if any(x.nnz for x in v)})
        B_out.append(np.vstack(Bs))
        eq_out.append(np.concatenate(eqs))
    return StagewiseStandardForm(
        n_x, A_out, B_out, eq_out, [c.copy() for c in st.cost], [float(eps_hat)] * T, st.cost_constant, segments, st
    )


@dataclass
class RuleBlocks:
    """Program position of one rule matrix per stage (rows x live columns)."""

    bases: list
    cols: list
    rows: list
    dims: list

    def indices(self, t: int) -> np.ndarray:
        live = self.cols[t]
        return self.bases[t] + np.arange(self.rows[t])[:, None] * live.size + np.arange(live.size)

    def matrices(self, x: np.ndarray) -> list:
        out = []
        for t in range(len(self.bases)):
            M = np.zeros((self.rows[t], self.dims[t]))
            M[:, self.cols[t]] = x[self.indices(t)]
            out.append(M)
        return out


def _add_rules(b: ProgramBuilder, u: UncertaintyModel, rows: list, label: str) -> RuleBlocks:
    bases, cols, dims = [], [], []
    for t, m in enumerate(rows):
        live = u.live_columns(t)
        bases.append(b.n_vars)
        cols.append(live)
        dims.append(u.index.dim(t))
        b.add_variables(f"{label}[{t}]", (m, live.size))
    return RuleBlocks(bases, cols, list(rows), dims)


def _check(f: StagewiseStandardForm, u: UncertaintyModel):
    if f.stages != u.index.stages:
        raise ModelError(f"standard form has {f.stages} stages, uncertainty has {u.index.stages}")
    for t in range(f.stages):
        if f.dim(t) != u.index.dim(t) or f.C[t].shape != (f.n_x, u.index.dim(t)):
            raise ModelError(f"stage {t} data does not match dimension {u.index.dim(t)}")


def _unit_block(name: str, t: int, m: int, d: int) -> RowBlock:
    return RowBlock("sign", name, t, (m,), {t: sp.identity(m, format="csr")}, np.zeros((m, d)), np.zeros(m), np.full(m, np.inf))


def _segment_rows(f: StagewiseStandardForm, t: int) -> list:
    """(family tag, rows) pairs of stage t in segment order."""
    return [(seg.family, np.arange(seg.start, seg.start + seg.count)) for seg in f.segments if seg.stage == t]


def build_primal_ldr_compact(f: StagewiseStandardForm, u: UncertaintyModel, mode: str):
    """Expected-cost minimization over rules with every row a single-sided chance row."""
    _check(f, u)
    b = ProgramBuilder()
    rules = _add_rules(b, u, [f.n_x] * f.stages, "rule")
    for t in range(f.stages):
        coef = f.C[t] @ u.stage_moment(t)
        b.add_objective(rules.indices(t), coef[:, rules.cols[t]])
    b.add_objective_constant(f.constant)
    for t in range(f.stages):
        W, eps = u.stage_scale(t), f.eps[t]
        m = f.m(t)
        block = RowBlock("standard", "rows", t, (m,), f.A[t], -f.B[t], np.zeros(m), np.full(m, np.inf))
        g = lift(block, rules.bases, rules.cols, b.n_vars)
        segments = _segment_rows(f, t) or [("rows", np.arange(m))]
        for tag, rows in segments:
            eq = f.equality[t][rows]
            if eq.any():
                enforce_equalities_for_all_xi(b, g.subset(rows[eq]), tag)
            if (~eq).any():
                reformulate_single_sided(b, g.subset(rows[~eq]), W, eps, mode, tag)
        sign = lift(_unit_block("sign", t, f.n_x, f.dim(t)), rules.bases, rules.cols, b.n_vars)
        reformulate_single_sided(b, sign, W, eps, mode, "sign")
    return b.build(), rules


def _last_stage(f: StagewiseStandardForm, t: int) -> np.ndarray:
    """Last stage whose rows involve each stage-t decision."""
    last = np.full(f.n_x, t)
    for tau in range(t + 1, f.stages):
        A = f.A[tau].get(t)
        if A is not None and A.nnz:
            used = np.flatnonzero(np.diff(A.tocsc().indptr))
            last[used] = tau
    return last


def reduced_cost_blocks(f: StagewiseStandardForm, t: int) -> list:
    """Reduced-cost rows ``c_t - sum_tau A_tau[t]^T lambda_tau`` of stage-t decisions,
    grouped by the last stage they reach; returns ``(decisions, RowBlock)`` pairs."""
    last = _last_stage(f, t)
    out = []
    for L in np.unique(last):
        idx = np.flatnonzero(last == L)
        terms = {}
        for tau in range(t, L + 1):
            A = f.A[tau].get(t)
            if A is not None:
                terms[tau] = sp.csr_matrix(-A[:, idx].T)
        offset = np.zeros((idx.size, f.dim(int(L))))
        offset[:, : f.dim(t)] = f.C[t][idx]
        out.append((idx, RowBlock("reduced_cost", f"reduced_cost[{t}]", int(L), (idx.size,), terms, offset, np.zeros(idx.size), np.full(idx.size, np.inf))))
    return out


def build_dual_ldr_compact(f: StagewiseStandardForm, u: UncertaintyModel, mode: str):
    """Expected dual value maximization over rules, posed as a minimization of its negative."""
    _check(f, u)
    b = ProgramBuilder()
    duals = _add_rules(b, u, [f.m(t) for t in range(f.stages)], "dual")
    for t in range(f.stages):
        coef = f.B[t] @ u.stage_moment(t)
        b.add_objective(duals.indices(t), -coef[:, duals.cols[t]])
    b.add_objective_constant(-f.constant)
    for t in range(f.stages):
        ineq = np.flatnonzero(~f.equality[t])
        if ineq.size:
            sign = lift(_unit_block("dual_sign", t, f.m(t), f.dim(t)), duals.bases, duals.cols, b.n_vars)
            reformulate_single_sided(b, sign.subset(ineq), u.stage_scale(t), f.eps[t], mode, "dual_sign")
        for _, block in reduced_cost_blocks(f, t):
            g = lift(block, duals.bases, duals.cols, b.n_vars)
            reformulate_single_sided(b, g, u.stage_scale(block.stage), f.eps[t], mode, "reduced_cost")
    return b.build(), duals


@dataclass
class DualPolicy:
    lambdas: list  # per stage (m_t, dim(t))
    objective: float
    form: StagewiseStandardForm
    solution: object = None

    def equality_duals(self, t: int) -> np.ndarray:
        return self.lambdas[t][self.form.equality[t]]


@dataclass
class PrimalBound:
    rules: list  # per stage (n_x, dim(t))
    objective: float
    solution: object = None


def _solve(program: ConicProgram, settings, what: str):
    sol = solve(program, settings)
    if not sol.optimal:
        raise PlanningError(f"{what}: {sol.status.value} ({sol.message})", sol)
    return sol


def solve_primal_compact(f, u, mode, settings: SolverSettings | None = None) -> PrimalBound:
    program, rules = build_primal_ldr_compact(f, u, mode)
    sol = _solve(program, settings, "primal rule bound")
    return PrimalBound(rules.matrices(sol.x), sol.objective, sol)


def solve_dual_compact(f, u, mode, settings: SolverSettings | None = None) -> DualPolicy:
    program, duals = build_dual_ldr_compact(f, u, mode)
    sol = _solve(program, settings, "dual rule bound")
    return DualPolicy(duals.matrices(sol.x), -sol.objective, f, sol)


def _spread_violation(G: np.ndarray, u: UncertaintyModel, kappa: float) -> np.ndarray:
    """``kappa * std - mean`` of affine rows ``G @ xi`` (positive means violated)."""
    d = G.shape[1]
    W = u.chol[:d]
    return kappa * np.linalg.norm(G @ W, axis=1) - G.sum(axis=1)


def dual_violations(f: StagewiseStandardForm, u: UncertaintyModel, mode: str, lambdas: list) -> dict:
    """Worst violation of the dual rows by direct substitution of ``lambdas``."""
    out = {"dual_sign": 0.0, "reduced_cost": 0.0}
    for t in range(f.stages):
        kappa = safety_factor(f.eps[t], mode)
        L = lambdas[t][~f.equality[t]]
        if L.size:
            out["dual_sign"] = max(out["dual_sign"], float(_spread_violation(L, u, kappa).max()))
        for idx, block in reduced_cost_blocks(f, t):
            G = block.offset.copy()
            for tau, A in block.terms.items():
                G[:, : f.dim(tau)] += A @ lambdas[tau]
            out["reduced_cost"] = max(out["reduced_cost"], float(_spread_violation(G, u, kappa).max()))
    return out


def primal_violations(f: StagewiseStandardForm, u: UncertaintyModel, mode: str, rules: list) -> dict:
    out = {"rows": 0.0, "equality": 0.0, "sign": 0.0}
    for t in range(f.stages):
        kappa = safety_factor(f.eps[t], mode)
        G = -f.B[t].copy()
        for tau, A in f.A[t].items():
            G[:, : f.dim(tau)] += A @ rules[tau]
        eq = f.equality[t]
        if eq.any():
            # equalities must hold for every realization the distribution can produce
            live = u.live_columns(t)
            dead = np.setdiff1d(np.arange(f.dim(t)), live)
            H = G[eq].copy()
            H[:, 0] += H[:, dead].sum(axis=1)
            out["equality"] = max(out["equality"], float(np.abs(H[:, live]).max()))
        if (~eq).any():
            out["rows"] = max(out["rows"], float(_spread_violation(G[~eq], u, kappa).max()))
        out["sign"] = max(out["sign"], float(_spread_violation(rules[t], u, kappa).max()))
    return out


@dataclass
class GapReport:
    primal: float
    dual: float
    absolute: float
    percent: float
    flag: str = ""


def suboptimality_bound(primal: float, dual: float) -> GapReport:
    gap = primal - dual
    percent = gap / primal * 100.0 if primal != 0.0 else float("nan")
    flag = NEGATIVE_GAP if gap < -GAP_TOLERANCE * (1.0 + abs(primal)) else ""
    return GapReport(primal, dual, gap, percent, flag)


@dataclass
class GapRun:
    report: GapReport
    primal: PrimalBound
    dual: DualPolicy
    form: StagewiseStandardForm
    mode: str
    eps: float
    seconds: float


def solve_gap(
    s: SystemData,
    u: UncertaintyModel,
    eps_hat: float,
    mode: str,
    settings: SolverSettings | None = None,
    structure: PlanningStructure | None = None,
) -> GapRun:
    start = time.perf_counter()
    f = canonicalize(s, u, eps_hat, structure)
    primal = solve_primal_compact(f, u, mode, settings)
    dual = solve_dual_compact(f, u, mode, settings)
    report = suboptimality_bound(primal.objective, dual.objective)
    return GapRun(report, primal, dual, f, mode, eps_hat, time.perf_counter() - start)


def standard_form_from_arrays(A, B, C, equality=None, eps=0.05, constant=0.0) -> StagewiseStandardForm:
    """Assemble a small standard form from dense arrays, ``A[t][tau]`` per stage pair."""
    T = len(B)
    B = [np.atleast_2d(np.asarray(x, dtype=float)) for x in B]
    C = [np.atleast_2d(np.asarray(x, dtype=float)) for x in C]
    n_x = C[0].shape[0]
    mats = [{tau: sp.csr_matrix(np.asarray(A[t][tau], dtype=float)) for tau in range(t + 1) if A[t][tau] is not None} for t in range(T)]
    if equality is None:
        equality = [np.zeros(B[t].shape[0], dtype=bool) for t in range(T)]
    equality = [np.asarray(e, dtype=bool) for e in equality]
    segments = [RowSegment("rows", "rows", "lower", t, 0, B[t].shape[0], (B[t].shape[0],)) for t in range(T)]
    eps = list(np.broadcast_to(np.asarray(eps, dtype=float), (T,)))
    return StagewiseStandardForm(n_x, mats, B, equality, C, eps, float(constant), segments)


def isotropic_covariance(u: UncertaintyModel, sigma2: float) -> np.ndarray:
    """Covariance ``sigma2 * I`` on every uncertain coordinate, zero on the constant."""
    n = u.index.total
    cov = np.eye(n) * float(sigma2)
    cov[0, 0] = 0.0
    return cov


@dataclass
class SweepCell:
    mode: str
    sigma2: float
    eps: float
    report: GapReport
    seconds: float


def gap_sweep(s: SystemData, u: UncertaintyModel, sigma2s, eps_values, modes, settings=None, log=None) -> list:
    """Primal and dual bounds on a grid of variance, probability and mode."""
    cells = []
    for mode in modes:
        for sigma2 in sigma2s:
            uu = u.with_covariance(isotropic_covariance(u, sigma2))
            st = build_structure(s, uu)
            for eps in eps_values:
                run = solve_gap(s, uu, eps, mode, settings, st)
                cells.append(SweepCell(mode, float(sigma2), float(eps), run.report, run.seconds))
                if log:
                    log(cells[-1])
    return cells


def monotone_violations(cells: list, tol: float) -> list:
    """Neighbouring grid cells whose gap decreases as variance grows or probability shrinks."""
    bad = []
    by_key = {(c.mode, c.sigma2, c.eps): c.report.absolute for c in cells}
    modes = sorted({c.mode for c in cells})
    sig = sorted({c.sigma2 for c in cells})
    eps = sorted({c.eps for c in cells}, reverse=True)
    for m in modes:
        for e in eps:
            for a, b in zip(sig, sig[1:]):
                if by_key[(m, b, e)] < by_key[(m, a, e)] - tol:
                    bad.append((m, "sigma2", e, a, b))
        for sg in sig:
            for a, b in zip(eps, eps[1:]):
                if by_key[(m, sg, b)] < by_key[(m, sg, a)] - tol:
                    bad.append((m, "eps", sg, a, b))
    return bad
