"""Solver-agnostic LP/SOCP representation and the solve boundary.

A program is ``min c'x + c0`` subject to

* equality rows ``a'x == b``,
* inequality rows ``a'x >= b`` or ``a'x <= b``,
* second-order cone blocks ``||U x + u0|| <= v'x + v0``,
* variable bounds ``lb <= x <= ub``.

Programs are assembled with :class:`ProgramBuilder` and are immutable afterwards.
Rows keep insertion order and each row's entries are sorted by variable index, so
the same build sequence always yields the same arrays and the same text dump.
"""

from __future__ import annotations

import enum
import os
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

GE = ">="
LE = "<="
EQ = "=="
HEADER = "conic-program v1"


class Status(str, enum.Enum):
    OPTIMAL = "OPTIMAL"
    INFEASIBLE = "INFEASIBLE"
    UNBOUNDED = "UNBOUNDED"
    NUMERICAL_FAILURE = "NUMERICAL_FAILURE"


class ProgramParseError(ValueError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


@dataclass(frozen=True)
class SolverSettings:
    feasibility: float = 1e-8
    gap: float = 1e-8
    max_iter: int = 200
    verbose: bool = False

    @classmethod
    def from_env(cls) -> "SolverSettings":
        """Defaults overridden by ``LDR_EXPAND_TOL`` and ``LDR_EXPAND_MAX_ITER``."""
        kwargs = {}
        tol = os.environ.get("LDR_EXPAND_TOL")
        if tol:
            kwargs["feasibility"] = kwargs["gap"] = float(tol)
        iters = os.environ.get("LDR_EXPAND_MAX_ITER")
        if iters:
            kwargs["max_iter"] = int(iters)
        return cls(**kwargs)


@dataclass(frozen=True)
class VariableBlock:
    name: str
    start: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=int)) if self.shape else 1

    def indices(self) -> np.ndarray:
        return np.arange(self.start, self.start + self.size).reshape(self.shape)


@dataclass(frozen=True)
class ConicProgram:
    blocks: tuple[VariableBlock, ...]
    objective: np.ndarray
    constant: float
    lower: np.ndarray
    upper: np.ndarray
    eq_matrix: sp.csr_matrix
    eq_rhs: np.ndarray
    eq_tags: np.ndarray
    ineq_matrix: sp.csr_matrix
    ineq_sense: np.ndarray  # +1 for >=, -1 for <=
    ineq_rhs: np.ndarray
    ineq_tags: np.ndarray
    cone_matrix: sp.csr_matrix
    cone_const: np.ndarray
    cone_offset: np.ndarray
    cone_dims: np.ndarray
    cone_tags: np.ndarray
    tags: tuple[str, ...]

    @property
    def n_vars(self) -> int:
        return self.objective.size

    def block(self, name: str) -> VariableBlock:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def variable_name(self, j: int) -> str:
        for b in self.blocks:
            if b.start <= j < b.start + b.size:
                pos = np.unravel_index(j - b.start, b.shape) if b.shape else ()
                return f"{b.name}[{','.join(str(int(p)) for p in pos)}]"
        raise IndexError(j)


def dimensions(p: ConicProgram) -> tuple[int, int, int]:
    """(variables, linear rows, cone blocks)."""
    return p.n_vars, p.eq_matrix.shape[0] + p.ineq_matrix.shape[0], p.cone_dims.size


def _as_coo(matrix, n_cols: int) -> sp.coo_matrix:
    m = sp.coo_matrix(matrix)
    if m.shape[1] > n_cols:
        raise ValueError(f"matrix references {m.shape[1]} variables, only {n_cols} declared")
    return sp.coo_matrix((m.data, (m.row, m.col)), shape=(m.shape[0], n_cols))


class ProgramBuilder:
    def __init__(self):
        self._blocks: list[VariableBlock] = []
        self._n = 0
        self._obj: list[tuple[np.ndarray, np.ndarray]] = []
        self._constant = 0.0
        self._lower: list[np.ndarray] = []
        self._upper: list[np.ndarray] = []
        self._tags: dict[str, int] = {}
        self._eq = _RowStore()
        self._ineq = _RowStore()
        self._cone = _RowStore()
        self._ineq_sense: list[np.ndarray] = []
        self._cone_dims: list[np.ndarray] = []
        self._cone_tags: list[np.ndarray] = []

    @property
    def n_vars(self) -> int:
        return self._n

    def tag(self, name: str) -> int:
        return self._tags.setdefault(name, len(self._tags))

    def add_variables(self, name: str, shape=(), lower=-np.inf, upper=np.inf) -> np.ndarray:
        shape = tuple(int(s) for s in np.atleast_1d(shape)) if np.ndim(shape) or shape != () else ()
        block = VariableBlock(name, self._n, shape)
        size = block.size
        self._blocks.append(block)
        self._lower.append(np.broadcast_to(np.asarray(lower, dtype=float), shape).ravel().copy())
        self._upper.append(np.broadcast_to(np.asarray(upper, dtype=float), shape).ravel().copy())
        self._n += size
        return block.indices()

    def add_objective(self, idx, coef) -> None:
        idx = np.asarray(idx, dtype=int)
        coef = np.broadcast_to(np.asarray(coef, dtype=float), idx.shape).ravel()
        idx = idx.ravel()
        self._obj.append((idx, coef.copy()))

    def add_objective_constant(self, value: float) -> None:
        self._constant += float(value)

    def add_row(self, terms: dict, sense: str, rhs: float, tag: str = "row") -> None:
        """Add a single linear row from ``{variable: coefficient}``."""
        cols = np.fromiter(terms.keys(), dtype=int, count=len(terms))
        vals = np.fromiter(terms.values(), dtype=float, count=len(terms))
        m = sp.coo_matrix((vals, (np.zeros_like(cols), cols)), shape=(1, self._n))
        self.add_rows(m, sense, [rhs], tag)

    def add_rows(self, matrix, sense: str, rhs, tag: str = "rows") -> None:
        m = _as_coo(matrix, self._n)
        rhs = np.broadcast_to(np.asarray(rhs, dtype=float), (m.shape[0],))
        tag_id = self.tag(tag)
        if sense == EQ:
            self._eq.append(m, rhs, tag_id)
        elif sense in (GE, LE):
            self._ineq.append(m, rhs, tag_id)
            self._ineq_sense.append(np.full(m.shape[0], 1 if sense == GE else -1, dtype=np.int8))
        else:
            raise ValueError(f"unknown sense {sense!r}")

    def add_cones(self, head, head_const, body, body_const, tag: str = "cone") -> None:
        """Add ``m`` cones ``||body_k x + body_const_k|| <= head_k x + head_const_k``.

        ``head`` has ``m`` rows; ``body`` has ``m * d`` rows ordered cone by cone.
        """
        head = _as_coo(head, self._n).tocsr()
        m = head.shape[0]
        if m == 0:
            return
        body = _as_coo(body, self._n).tocsr()
        if body.shape[0] % m:
            raise ValueError("cone body rows must be a multiple of the cone count")
        d = body.shape[0] // m
        head_const = np.broadcast_to(np.asarray(head_const, dtype=float), (m,))
        body_const = np.broadcast_to(np.asarray(body_const, dtype=float), (m * d,))
        stacked = sp.vstack([head, body], format="csr")
        order = np.empty(m * (d + 1), dtype=int)
        grid = np.arange(m * (d + 1)).reshape(m, d + 1)
        order[grid[:, 0]] = np.arange(m)
        order[grid[:, 1:].ravel()] = m + np.arange(m * d)
        stacked = stacked[order]
        consts = np.concatenate([head_const, body_const])[order]
        tag_id = self.tag(tag)
        self._cone.append(stacked.tocoo(), consts, tag_id)
        self._cone_dims.append(np.full(m, d + 1, dtype=int))
        self._cone_tags.append(np.full(m, tag_id, dtype=int))

    def add_cone(self, head: dict, head_const: float, body: list, body_const, tag: str = "cone") -> None:
        """Single cone from ``{var: coef}`` dictionaries."""
        def row(terms):
            cols = np.fromiter(terms.keys(), dtype=int, count=len(terms))
            vals = np.fromiter(terms.values(), dtype=float, count=len(terms))
            return sp.coo_matrix((vals, (np.zeros_like(cols), cols)), shape=(1, self._n))

        body_rows = [row(b) for b in body]
        body_matrix = sp.vstack(body_rows) if body_rows else sp.coo_matrix((0, self._n))
        self.add_cones(row(head), [head_const], body_matrix, body_const, tag)

    def build(self) -> ConicProgram:
        n = self._n
        obj = np.zeros(n)
        for idx, coef in self._obj:
            np.add.at(obj, idx, coef)
        lower = np.concatenate(self._lower) if self._lower else np.zeros(0)
        upper = np.concatenate(self._upper) if self._upper else np.zeros(0)
        eq_m, eq_b, eq_t = self._eq.finish(n)
        in_m, in_b, in_t = self._ineq.finish(n)
        co_m, co_b, _ = self._cone.finish(n)
        dims = np.concatenate(self._cone_dims) if self._cone_dims else np.zeros(0, dtype=int)
        offsets = np.concatenate([[0], np.cumsum(dims)[:-1]]).astype(int) if dims.size else np.zeros(0, dtype=int)
        sense = np.concatenate(self._ineq_sense) if self._ineq_sense else np.zeros(0, dtype=np.int8)
        cone_tags = np.concatenate(self._cone_tags) if self._cone_tags else np.zeros(0, dtype=int)
        arrays = [obj, lower, upper, eq_b, eq_t, in_b, in_t, sense, co_b, offsets, dims, cone_tags]
        for a in arrays:
            a.setflags(write=False)
        return ConicProgram(
            blocks=tuple(self._blocks),
            objective=obj,
            constant=self._constant,
            lower=lower,
            upper=upper,
            eq_matrix=eq_m,
            eq_rhs=eq_b,
            eq_tags=eq_t,
            ineq_matrix=in_m,
            ineq_sense=sense,
            ineq_rhs=in_b,
            ineq_tags=in_t,
            cone_matrix=co_m,
            cone_const=co_b,
            cone_offset=offsets,
            cone_dims=dims,
            cone_tags=cone_tags,
            tags=tuple(self._tags),
        )


class _RowStore:
    def __init__(self):
        self.rows, self.cols, self.vals, self.rhs, self.tags = [], [], [], [], []
        self.count = 0

    def append(self, m: sp.coo_matrix, rhs, tag_id: int):
        self.rows.append(m.row.astype(np.int64) + self.count)
        self.cols.append(m.col.astype(np.int64))
        self.vals.append(m.data.astype(float))
        self.rhs.append(np.asarray(rhs, dtype=float).copy())
        self.tags.append(np.full(m.shape[0], tag_id, dtype=int))
        self.count += m.shape[0]

    def finish(self, n: int):
        if not self.rows:
            return sp.csr_matrix((0, n)), np.zeros(0), np.zeros(0, dtype=int)
        m = sp.csr_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=(self.count, n),
        )
        m.sum_duplicates()
        m.eliminate_zeros()
        m.sort_indices()
        return m, np.concatenate(self.rhs), np.concatenate(self.tags)


@dataclass
class Solution:
    status: Status
    x: np.ndarray
    objective: float
    eq_duals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ineq_duals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cone_duals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    iterations: int = 0
    solve_time: float = 0.0
    residual: float = float("nan")
    gap: float = float("nan")
    message: str = ""
    infeasible_tags: tuple[str, ...] = ()

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL

    def value(self, idx) -> np.ndarray:
        return self.x[np.asarray(idx, dtype=int)]


FEASIBILITY_CONTRACT = 1e-6
GAP_CONTRACT = 1e-7


def _row_scale(matrix: sp.csr_matrix, rhs: np.ndarray) -> np.ndarray:
    """Per-row normalizer: the largest absolute coefficient or constant, at least 1."""
    if matrix.shape[0] == 0:
        return np.ones(0)
    coef = np.zeros(matrix.shape[0])
    if matrix.nnz:
        coef = abs(matrix).max(axis=1).toarray().ravel()
    return np.maximum(1.0, np.maximum(coef, np.abs(rhs)))


def residuals(p: ConicProgram, x: np.ndarray) -> dict:
    """Worst scaled violation per constraint class."""
    out = {"eq": 0.0, "ineq": 0.0, "cone": 0.0, "bounds": 0.0}
    if p.eq_matrix.shape[0]:
        r = np.abs(p.eq_matrix @ x - p.eq_rhs) / _row_scale(p.eq_matrix, p.eq_rhs)
        out["eq"] = float(r.max())
    if p.ineq_matrix.shape[0]:
        slack = p.ineq_sense * (p.ineq_matrix @ x - p.ineq_rhs)
        out["ineq"] = float(np.maximum(0.0, -slack / _row_scale(p.ineq_matrix, p.ineq_rhs)).max())
    if p.cone_dims.size:
        vals = p.cone_matrix @ x + p.cone_const
        scale = np.maximum.reduceat(_row_scale(p.cone_matrix, p.cone_const), p.cone_offset)
        heads = vals[p.cone_offset]
        sq = np.add.reduceat(vals**2, p.cone_offset) - heads**2
        body = np.sqrt(np.maximum(sq, 0.0))
        out["cone"] = max(0.0, float(((body - heads) / scale).max()))
    if x.size:
        viol = np.maximum(p.lower - x, x - p.upper)
        viol = viol[np.isfinite(viol)]
        out["bounds"] = max(0.0, float(viol.max())) if viol.size else 0.0
    return out


def solve(p: ConicProgram, settings: SolverSettings | None = None) -> Solution:
    import clarabel

    settings = settings or SolverSettings.from_env()
    n = p.n_vars
    blocks_a, blocks_b, cones = [], [], []
    scales = {}

    if p.eq_matrix.shape[0]:
        s = 1.0 / _row_scale(p.eq_matrix, p.eq_rhs)
        scales["eq"] = s
        blocks_a.append(sp.diags(s) @ p.eq_matrix)
        blocks_b.append(s * p.eq_rhs)
        cones.append(clarabel.ZeroConeT(p.eq_matrix.shape[0]))

    lin_rows, lin_rhs = [], []
    if p.ineq_matrix.shape[0]:
        s = 1.0 / _row_scale(p.ineq_matrix, p.ineq_rhs)
        scales["ineq"] = s
        sign = -p.ineq_sense.astype(float) * s
        lin_rows.append(sp.diags(sign) @ p.ineq_matrix)
        lin_rhs.append(sign * p.ineq_rhs)
    lo = np.flatnonzero(np.isfinite(p.lower))
    hi = np.flatnonzero(np.isfinite(p.upper))
    if lo.size:
        lin_rows.append(sp.csr_matrix((-np.ones(lo.size), (np.arange(lo.size), lo)), shape=(lo.size, n)))
        lin_rhs.append(-p.lower[lo])
    if hi.size:
        lin_rows.append(sp.csr_matrix((np.ones(hi.size), (np.arange(hi.size), hi)), shape=(hi.size, n)))
        lin_rhs.append(p.upper[hi])
    n_lin = sum(r.shape[0] for r in lin_rows)
    if n_lin:
        blocks_a.extend(lin_rows)
        blocks_b.extend(lin_rhs)
        cones.append(clarabel.NonnegativeConeT(n_lin))

    if p.cone_dims.size:
        const = p.cone_const
        row_scale = _row_scale(p.cone_matrix, const)
        per_cone = np.maximum.reduceat(row_scale, p.cone_offset)
        s = np.repeat(1.0 / per_cone, p.cone_dims)
        scales["cone"] = s
        blocks_a.append(-(sp.diags(s) @ p.cone_matrix))
        blocks_b.append(s * const)
        cones.extend(clarabel.SecondOrderConeT(int(d)) for d in p.cone_dims)

    if blocks_a:
        A = sp.vstack(blocks_a, format="csc")
        b = np.concatenate(blocks_b)
    else:
        A = sp.csc_matrix((0, n))
        b = np.zeros(0)
    P = sp.csc_matrix((n, n))

    opts = clarabel.DefaultSettings()
    opts.verbose = settings.verbose
    opts.tol_feas = settings.feasibility
    opts.tol_gap_rel = settings.gap
    opts.tol_gap_abs = settings.gap
    opts.max_iter = settings.max_iter
    opts.max_threads = 1
    opts.presolve_enable = False

    start = time.perf_counter()
    if n == 0:
        # only constant rows are left: check them directly
        worst = max(residuals(p, np.zeros(0)).values())
        if worst > FEASIBILITY_CONTRACT:
            return Solution(Status.INFEASIBLE, np.zeros(0), float("nan"), residual=worst, message="constant rows violated")
        return Solution(Status.OPTIMAL, np.zeros(0), p.constant, solve_time=0.0, residual=worst, gap=0.0)
    solver = clarabel.DefaultSolver(P, np.asarray(p.objective, dtype=float), A, b, cones, opts)
    result = solver.solve()
    elapsed = time.perf_counter() - start

    status_name = str(result.status).split(".")[-1]
    x = np.asarray(result.x, dtype=float)
    z = np.asarray(result.z, dtype=float)
    iters = int(result.iterations)

    n_eq = p.eq_matrix.shape[0]
    n_in = p.ineq_matrix.shape[0]
    z_eq = z[:n_eq]
    z_in = z[n_eq : n_eq + n_in]
    z_cone = z[n_eq + n_lin :]
    eq_duals = -scales["eq"] * z_eq if n_eq else np.zeros(0)
    ineq_duals = scales["ineq"] * z_in * p.ineq_sense if n_in else np.zeros(0)
    cone_duals = scales["cone"] * z_cone if p.cone_dims.size else np.zeros(0)

    if status_name in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        return Solution(
            Status.INFEASIBLE, x, float("nan"), eq_duals, ineq_duals, cone_duals, iters, elapsed,
            message=status_name, infeasible_tags=_certificate_tags(p, eq_duals, ineq_duals, cone_duals),
        )
    if status_name in ("DualInfeasible", "AlmostDualInfeasible"):
        return Solution(Status.UNBOUNDED, x, float("-inf"), iterations=iters, solve_time=elapsed, message=status_name)

    objective = float(p.objective @ x + p.constant)
    res = residuals(p, x)
    worst = max(res.values()) if res else 0.0
    primal = float(result.obj_val)
    dual = float(result.obj_val_dual)
    gap = abs(primal - dual) / max(1.0, abs(primal))
    if status_name in ("Solved", "AlmostSolved") and worst <= FEASIBILITY_CONTRACT and gap <= GAP_CONTRACT:
        return Solution(Status.OPTIMAL, x, objective, eq_duals, ineq_duals, cone_duals, iters, elapsed, worst, gap, status_name)
    if status_name in ("InsufficientProgress", "MaxIterations") and worst <= FEASIBILITY_CONTRACT:
        # a stalled iterate still counts when its own dual certificate meets the contract
        q = np.asarray(p.objective, dtype=float)
        dual_res = float(np.abs(A.T @ z + q).max() / max(1.0, np.abs(q).max()))
        dual = float(-b @ z)
        gap = abs(primal - dual) / max(1.0, abs(primal))
        if dual_res <= FEASIBILITY_CONTRACT and gap <= GAP_CONTRACT:
            return Solution(Status.OPTIMAL, x, objective, eq_duals, ineq_duals, cone_duals, iters, elapsed, worst, gap, status_name)
    message = f"solver status {status_name}; worst scaled residual {worst:.2e} ({res}); relative gap {gap:.2e}"
    return Solution(Status.NUMERICAL_FAILURE, x, objective, eq_duals, ineq_duals, cone_duals, iters, elapsed, worst, gap, message)


def _certificate_tags(p: ConicProgram, eq_duals, ineq_duals, cone_duals) -> tuple[str, ...]:
    """Constraint families carrying weight in an infeasibility certificate."""
    weight = np.zeros(len(p.tags))
    if eq_duals.size:
        np.add.at(weight, p.eq_tags, np.abs(eq_duals))
    if ineq_duals.size:
        np.add.at(weight, p.ineq_tags, np.abs(ineq_duals))
    if cone_duals.size:
        per_cone = np.add.reduceat(np.abs(cone_duals), p.cone_offset) if p.cone_offset.size else np.zeros(0)
        np.add.at(weight, p.cone_tags, per_cone)
    if not weight.size or weight.max() <= 0:
        return ()
    keep = np.flatnonzero(weight > 1e-6 * weight.max())
    keep = keep[np.argsort(-weight[keep], kind="stable")]
    return tuple(p.tags[i] for i in keep)


def _fmt(value: float) -> str:
    return repr(float(value))


def serialize(p: ConicProgram) -> str:
    """Canonical line-oriented text form.

    Grammar (one record per line, fields separated by single spaces)::

        conic-program v1
        var <name> <start> <dim>x<dim>...      variable block ("-" for a scalar)
        bound <j> <lower> <upper>              only for non-free variables
        objective <constant> [<j>:<coef> ...]
        tag <k> <name>
        eq <tag> <rhs> [<j>:<coef> ...]
        ge|le <tag> <rhs> [<j>:<coef> ...]
        cone <tag> <dim>                       followed by <dim> row records
        row <const> [<j>:<coef> ...]

    An empty program serializes to an empty string.
    """
    if p.n_vars == 0 and not p.tags and p.constant == 0.0:
        return ""
    out = [HEADER]
    for b in p.blocks:
        shape = "x".join(str(d) for d in b.shape) if b.shape else "-"
        out.append(f"var {b.name} {b.start} {shape}")
    for j in range(p.n_vars):
        if np.isfinite(p.lower[j]) or np.isfinite(p.upper[j]):
            out.append(f"bound {j} {_fmt(p.lower[j])} {_fmt(p.upper[j])}")
    nz = np.flatnonzero(p.objective)
    out.append(" ".join(["objective", _fmt(p.constant)] + [f"{j}:{_fmt(p.objective[j])}" for j in nz]))
    for k, name in enumerate(p.tags):
        out.append(f"tag {k} {name}")

    def terms(matrix, i):
        lo, hi = matrix.indptr[i], matrix.indptr[i + 1]
        return [f"{j}:{_fmt(v)}" for j, v in zip(matrix.indices[lo:hi], matrix.data[lo:hi])]

    for i in range(p.eq_matrix.shape[0]):
        out.append(" ".join(["eq", str(p.eq_tags[i]), _fmt(p.eq_rhs[i])] + terms(p.eq_matrix, i)))
    for i in range(p.ineq_matrix.shape[0]):
        kind = "ge" if p.ineq_sense[i] > 0 else "le"
        out.append(" ".join([kind, str(p.ineq_tags[i]), _fmt(p.ineq_rhs[i])] + terms(p.ineq_matrix, i)))
    for c, (off, d) in enumerate(zip(p.cone_offset, p.cone_dims)):
        out.append(f"cone {p.cone_tags[c]} {d}")
        for r in range(off, off + d):
            out.append(" ".join(["row", _fmt(p.cone_const[r])] + terms(p.cone_matrix, r)))
    return "\n".join(out) + "\n"


def deserialize(text: str) -> ConicProgram:
    lines = text.splitlines()
    if not any(line.strip() for line in lines):
        return ProgramBuilder().build()
    if lines[0].strip() != HEADER:
        raise ProgramParseError(f"expected header {HEADER!r}", 1, 1)

    blocks, bounds, tags = [], {}, []
    constant, objective = 0.0, {}
    eq, ineq, cones = [], [], []
    pending = None  # (tag, dim, rows)

    def number(tok, lineno, col, cast=float):
        try:
            return cast(tok)
        except ValueError:
            raise ProgramParseError(f"invalid number {tok!r}", lineno, col) from None

    def parse_terms(tokens, lineno, start_col):
        out = {}
        col = start_col
        for tok in tokens:
            if ":" not in tok:
                raise ProgramParseError(f"expected <index>:<coef>, got {tok!r}", lineno, col)
            j, v = tok.split(":", 1)
            out[number(j, lineno, col, int)] = number(v, lineno, col + len(j) + 1)
            col += len(tok) + 1
        return out

    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        tokens = line.split(" ")
        cols = np.cumsum([0] + [len(t) + 1 for t in tokens]) + 1
        kind = tokens[0]
        if pending is not None and kind != "row":
            raise ProgramParseError(f"cone expects {pending[1]} row records", lineno, 1)
        if kind == "var" and len(tokens) == 4:
            shape = () if tokens[3] == "-" else tuple(number(d, lineno, cols[3], int) for d in tokens[3].split("x"))
            blocks.append(VariableBlock(tokens[1], number(tokens[2], lineno, cols[2], int), shape))
        elif kind == "bound" and len(tokens) == 4:
            bounds[number(tokens[1], lineno, cols[1], int)] = (
                number(tokens[2], lineno, cols[2]),
                number(tokens[3], lineno, cols[3]),
            )
        elif kind == "objective" and len(tokens) >= 2:
            constant = number(tokens[1], lineno, cols[1])
            objective = parse_terms(tokens[2:], lineno, cols[2] if len(tokens) > 2 else 0)
        elif kind == "tag" and len(tokens) >= 3:
            if number(tokens[1], lineno, cols[1], int) != len(tags):
                raise ProgramParseError("tags must be numbered consecutively", lineno, cols[1])
            tags.append(" ".join(tokens[2:]))
        elif kind in ("eq", "ge", "le") and len(tokens) >= 3:
            record = (
                number(tokens[1], lineno, cols[1], int),
                number(tokens[2], lineno, cols[2]),
                parse_terms(tokens[3:], lineno, cols[3] if len(tokens) > 3 else 0),
            )
            (eq if kind == "eq" else ineq).append(record if kind == "eq" else (kind, *record))
        elif kind == "cone" and len(tokens) == 3:
            pending = (number(tokens[1], lineno, cols[1], int), number(tokens[2], lineno, cols[2], int), [])
        elif kind == "row" and pending is not None and len(tokens) >= 2:
            pending[2].append((number(tokens[1], lineno, cols[1]), parse_terms(tokens[2:], lineno, cols[2] if len(tokens) > 2 else 0)))
            if len(pending[2]) == pending[1]:
                cones.append(pending)
                pending = None
        else:
            raise ProgramParseError(f"unrecognized record {kind!r}", lineno, 1)
    if pending is not None:
        raise ProgramParseError("truncated cone block", len(lines), 1)

    builder = ProgramBuilder()
    for b in blocks:
        if b.start != builder.n_vars:
            raise ProgramParseError(f"variable block {b.name} starts at {b.start}, expected {builder.n_vars}", 1, 1)
        builder.add_variables(b.name, b.shape)
    n = builder.n_vars
    for j in bounds:
        if not 0 <= j < n:
            raise ProgramParseError(f"bound on undeclared variable {j}", 1, 1)
    lower = np.full(n, -np.inf)
    upper = np.full(n, np.inf)
    for j, (lo, hi) in bounds.items():
        lower[j], upper[j] = lo, hi
    builder._lower = [lower]
    builder._upper = [upper]
    for name in tags:
        builder.tag(name)
    names = list(tags)

    def check(terms):
        for j in terms:
            if not 0 <= j < n:
                raise ProgramParseError(f"reference to undeclared variable {j}", 1, 1)
        return terms

    if objective:
        check(objective)
        builder.add_objective(list(objective), list(objective.values()))
    builder.add_objective_constant(constant)
    for record in eq + ineq + cones:
        tag = record[1] if isinstance(record[0], str) else record[0]
        if not 0 <= tag < len(names):
            raise ProgramParseError(f"undeclared tag {tag}", 1, 1)
    for tag, rhs, terms in eq:
        builder.add_row(check(terms), EQ, rhs, names[tag])
    for kind, tag, rhs, terms in ineq:
        builder.add_row(check(terms), GE if kind == "ge" else LE, rhs, names[tag])
    for tag, dim, rows in cones:
        head_const, head = rows[0]
        builder.add_cone(check(head), head_const, [check(r[1]) for r in rows[1:]], [r[0] for r in rows[1:]], names[tag])
    return builder.build()
