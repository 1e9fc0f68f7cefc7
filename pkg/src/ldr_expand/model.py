"""Planning data, stage indexing of the uncertainty vector and parameter realization.

Uncertain parameters are linear in the scenario vector ``xi`` whose first entry is
the constant 1.  Stage ``t`` only sees the leading ``dim(t)`` entries of ``xi``.
Stages are 0-based throughout the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.stats import norm

DRO = "dro"
NORMAL = "normal"
MODES = (DRO, NORMAL)

CLIP_THRESHOLD = 1e-10


class ModelError(ValueError):
    """Raised for inconsistent planning data."""


@dataclass(frozen=True)
class StageIndex:
    """Truncation structure: stage t observes ``xi[:dim(t)]``."""

    sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if not sizes:
            raise ModelError("at least one stage is required")
        if sizes[0] != 1:
            raise ModelError(f"first stage must reveal exactly one (constant) coordinate, got {sizes[0]}")
        if any(s < 1 for s in sizes):
            raise ModelError(f"stage sizes must be positive, got {sizes}")
        object.__setattr__(self, "sizes", sizes)

    @property
    def stages(self) -> int:
        return len(self.sizes)

    @property
    def total(self) -> int:
        return int(sum(self.sizes))

    @cached_property
    def dims(self) -> tuple[int, ...]:
        return tuple(int(d) for d in np.cumsum(self.sizes))

    def dim(self, t: int) -> int:
        return self.dims[t]

    def truncate(self, xi: np.ndarray, t: int) -> np.ndarray:
        return np.asarray(xi)[..., : self.dims[t]]

    def matrix(self, t: int) -> np.ndarray:
        """Dense truncation matrix, only used for display and tests."""
        out = np.zeros((self.dims[t], self.total))
        out[:, : self.dims[t]] = np.eye(self.dims[t])
        return out


def build_stage_indexer(sizes) -> StageIndex:
    return StageIndex(tuple(sizes))


def cholesky(cov, threshold: float = CLIP_THRESHOLD) -> np.ndarray:
    """Factor ``L`` with ``L @ L.T == cov`` for a PSD, possibly singular, covariance.

    Coordinates with (near) zero variance get zero rows and columns.  The remaining
    block is factored by Cholesky when it is positive definite, otherwise by an
    eigenvalue-clipped square root.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ModelError(f"covariance must be square, got shape {cov.shape}")
    scale = max(np.linalg.norm(cov), 1.0)
    if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12 * scale):
        raise ModelError("covariance is not symmetric")
    n = cov.shape[0]
    if n == 0:
        return cov.copy()
    eig = np.linalg.eigvalsh(cov)
    if eig[0] < -1e-8 * scale:
        raise ModelError(f"covariance is not PSD: smallest eigenvalue {eig[0]:.3e}")

    factor = np.zeros_like(cov)
    diag = np.diag(cov)
    live = np.flatnonzero(diag > threshold * scale)
    if live.size == 0:
        return factor
    block = cov[np.ix_(live, live)]
    try:
        sub = np.linalg.cholesky(block)
    except np.linalg.LinAlgError:
        sub = None
    if sub is not None and np.linalg.norm(sub @ sub.T - block) <= 1e-10 * np.linalg.norm(block):
        factor[np.ix_(live, live)] = sub
        return factor
    w, v = np.linalg.eigh(cov)
    w = np.where(w > threshold * scale, w, 0.0)
    return v * np.sqrt(w)


def safety_factor(eps: float, mode: str) -> float:
    """Multiplier of the standard deviation in a single-sided chance constraint."""
    if not 0.0 < eps < 0.5:
        raise ModelError(f"violation probability must lie in (0, 0.5), got {eps}")
    if mode == DRO:
        return float(np.sqrt((1.0 - eps) / eps))
    if mode == NORMAL:
        return float(norm.ppf(1.0 - eps))
    raise ModelError(f"unknown mode {mode!r}")


def _array(value, shape, name, nonneg=True):
    arr = np.asarray(value, dtype=float)
    if arr.shape != shape:
        raise ModelError(f"{name}: expected shape {shape}, got {arr.shape}")
    if np.isnan(arr).any():
        raise ModelError(f"{name}: contains NaN")
    if nonneg and (arr < 0).any():
        raise ModelError(f"{name}: must be nonnegative")
    return arr


@dataclass(frozen=True)
class SystemData:
    """Deterministic physical and economic data of a planning instance.

    Units are attached to nodes through the ``*_node`` index arrays.  Time-indexed
    arrays use shape ``(T, ...)``; capacity factors use ``(T, W, H, units)``.
    """

    stages: int
    horizons: int
    hours: int
    nodes: int
    ptdf: np.ndarray
    line_limit: np.ndarray
    horizon_weight: np.ndarray
    existing_node: np.ndarray
    existing_capacity: np.ndarray
    existing_om: np.ndarray
    existing_emission: np.ndarray
    existing_ramp_up: np.ndarray
    existing_ramp_down: np.ndarray
    existing_availability: np.ndarray
    candidate_node: np.ndarray
    candidate_om: np.ndarray
    candidate_emission: np.ndarray
    candidate_ramp_up: np.ndarray
    candidate_ramp_down: np.ndarray
    candidate_availability: np.ndarray
    candidate_max: np.ndarray
    storage_node: np.ndarray
    storage_energy_om: np.ndarray
    storage_power_om: np.ndarray
    charge_efficiency: np.ndarray
    discharge_efficiency: np.ndarray
    storage_energy_max: np.ndarray
    storage_power_max: np.ndarray
    load_profile: np.ndarray
    budget: np.ndarray
    annual_hours: float = 8760.0
    shed_penalty: float = 9000.0
    name: str = "instance"

    def __post_init__(self):
        T, W, H, N = self.stages, self.horizons, self.hours, self.nodes
        for label, value in (("stages", T), ("horizons", W), ("hours", H), ("nodes", N)):
            if int(value) < 1:
                raise ModelError(f"{label} must be at least 1")
        ptdf = np.asarray(self.ptdf, dtype=float)
        if ptdf.ndim != 2 or ptdf.shape[1] != N:
            raise ModelError(f"ptdf: expected shape (lines, {N}), got {ptdf.shape}")
        E = ptdf.shape[0]
        G = len(np.atleast_1d(self.existing_node))
        C = len(np.atleast_1d(self.candidate_node))
        K = len(np.atleast_1d(self.storage_node))
        fix = {
            "ptdf": ptdf,
            "line_limit": _array(self.line_limit, (E,), "line_limit"),
            "horizon_weight": _array(self.horizon_weight, (W,), "horizon_weight"),
            "existing_capacity": _array(self.existing_capacity, (T, G), "existing_capacity"),
            "existing_om": _array(self.existing_om, (T, G), "existing_om"),
            "existing_emission": _array(self.existing_emission, (G,), "existing_emission"),
            "existing_ramp_up": _array(self.existing_ramp_up, (G,), "existing_ramp_up"),
            "existing_ramp_down": _array(self.existing_ramp_down, (G,), "existing_ramp_down"),
            "existing_availability": _array(self.existing_availability, (T, W, H, G), "existing_availability"),
            "candidate_om": _array(self.candidate_om, (T, C), "candidate_om"),
            "candidate_emission": _array(self.candidate_emission, (C,), "candidate_emission"),
            "candidate_ramp_up": _array(self.candidate_ramp_up, (C,), "candidate_ramp_up"),
            "candidate_ramp_down": _array(self.candidate_ramp_down, (C,), "candidate_ramp_down"),
            "candidate_availability": _array(self.candidate_availability, (T, W, H, C), "candidate_availability"),
            "candidate_max": _array(self.candidate_max, (T, C), "candidate_max"),
            "storage_energy_om": _array(self.storage_energy_om, (T, K), "storage_energy_om"),
            "storage_power_om": _array(self.storage_power_om, (T, K), "storage_power_om"),
            "charge_efficiency": _array(self.charge_efficiency, (K,), "charge_efficiency"),
            "discharge_efficiency": _array(self.discharge_efficiency, (K,), "discharge_efficiency"),
            "storage_energy_max": _array(self.storage_energy_max, (T, K), "storage_energy_max"),
            "storage_power_max": _array(self.storage_power_max, (T, K), "storage_power_max"),
            "load_profile": _array(self.load_profile, (T, W, H, N), "load_profile"),
            "budget": _array(self.budget, (T,), "budget"),
        }
        for label in ("existing_node", "candidate_node", "storage_node"):
            idx = np.atleast_1d(np.asarray(getattr(self, label), dtype=int))
            if idx.size and (idx.min() < 0 or idx.max() >= N):
                raise ModelError(f"{label}: node index out of range")
            fix[label] = idx
        for label in ("existing_availability", "candidate_availability", "load_profile"):
            if (fix[label] > 1.0).any():
                raise ModelError(f"{label}: capacity factors must lie in [0, 1]")
        for label in ("charge_efficiency", "discharge_efficiency"):
            eff = fix[label]
            if ((eff <= 0.0) | (eff > 1.0)).any():
                raise ModelError(f"{label}: efficiencies must lie in (0, 1]")
        total = float(np.sum(fix["horizon_weight"]) * H)
        if abs(total - self.annual_hours) > 1e-6 * self.annual_hours:
            raise ModelError(
                f"horizon weights times hours give {total}, expected annual_hours={self.annual_hours}"
            )
        if self.shed_penalty < 0:
            raise ModelError("shed_penalty must be nonnegative")
        for key, value in fix.items():
            value.setflags(write=False)
            object.__setattr__(self, key, value)

    @property
    def lines(self) -> int:
        return self.ptdf.shape[0]

    @property
    def n_existing(self) -> int:
        return len(self.existing_node)

    @property
    def n_candidate(self) -> int:
        return len(self.candidate_node)

    @property
    def n_storage(self) -> int:
        return len(self.storage_node)

    def incidence(self, kind: str) -> np.ndarray:
        """Node-by-unit incidence matrix for ``existing``, ``candidate`` or ``storage``."""
        idx = getattr(self, f"{kind}_node")
        out = np.zeros((self.nodes, len(idx)))
        out[idx, np.arange(len(idx))] = 1.0
        return out

    def slots(self):
        """All (stage, horizon, hour) triples in build order."""
        for t in range(self.stages):
            for w in range(self.horizons):
                for h in range(self.hours):
                    yield t, w, h


# uncertain parameter families: (attribute, unit count attribute on SystemData)
FACTOR_FAMILIES = {
    "capex_generation": "n_candidate",
    "capex_energy": "n_storage",
    "capex_power": "n_storage",
    "peak_load": "nodes",
    "fuel_existing": "n_existing",
    "fuel_candidate": "n_candidate",
    "emission_cap": None,
}


@dataclass(frozen=True)
class UncertaintyModel:
    """Stage-structured factor matrices plus the first two moments of ``xi``.

    ``factors[name][t]`` has shape ``(rows, dim(t))``; the emission cap factor has a
    single row.  The mean of ``xi`` is the all-ones vector.
    """

    index: StageIndex
    factors: dict
    covariance: np.ndarray

    def __post_init__(self):
        n = self.index.total
        cov = np.asarray(self.covariance, dtype=float)
        if cov.shape != (n, n):
            raise ModelError(f"covariance: expected shape {(n, n)}, got {cov.shape}")
        if np.any(cov[0] != 0.0) or np.any(cov[:, 0] != 0.0):
            raise ModelError("covariance: the constant first coordinate must have zero variance and covariance")
        factor = cholesky(cov)
        cov.setflags(write=False)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "_chol", factor)
        clean = {}
        for name in FACTOR_FAMILIES:
            if name not in self.factors:
                raise ModelError(f"missing factor family {name!r}")
            mats = self.factors[name]
            if len(mats) != self.index.stages:
                raise ModelError(f"{name}: expected {self.index.stages} stage matrices, got {len(mats)}")
            stage_mats = []
            for t, mat in enumerate(mats):
                arr = np.atleast_2d(np.asarray(mat, dtype=float))
                if arr.shape[1] != self.index.dim(t):
                    raise ModelError(f"{name}[{t}]: expected {self.index.dim(t)} columns, got {arr.shape[1]}")
                arr.setflags(write=False)
                stage_mats.append(arr)
            rows = {a.shape[0] for a in stage_mats}
            if len(rows) != 1:
                raise ModelError(f"{name}: row count varies across stages")
            clean[name] = tuple(stage_mats)
        unknown = set(self.factors) - set(FACTOR_FAMILIES)
        if unknown:
            raise ModelError(f"unknown factor families {sorted(unknown)}")
        object.__setattr__(self, "factors", clean)

    @property
    def size(self) -> int:
        return self.index.total

    @property
    def mean(self) -> np.ndarray:
        return np.ones(self.size)

    @property
    def chol(self) -> np.ndarray:
        return self._chol

    @property
    def second_moment(self) -> np.ndarray:
        return self.covariance + np.outer(self.mean, self.mean)

    def stage_scale(self, t: int) -> np.ndarray:
        """Rows ``:dim(t)`` of the factor with all-zero columns dropped.

        For a stage-t affine row with coefficients ``g`` (length ``dim(t)``) the
        standard deviation is ``norm(stage_scale(t).T @ g)``.
        """
        block = self._chol[: self.index.dim(t)]
        keep = np.flatnonzero(np.abs(block).max(axis=0) > 0.0) if block.size else []
        return block[:, keep]

    def live_columns(self, t: int) -> np.ndarray:
        """The constant coordinate plus every stage-t coordinate with positive variance.

        Zero-variance coordinates equal 1 almost surely, so rule coefficients on
        them duplicate the constant column and are left out of the programs.
        """
        rows = self._chol[: self.index.dim(t)]
        live = np.abs(rows).max(axis=1) > 0.0 if rows.size else np.zeros(0, dtype=bool)
        live[0] = True
        return np.flatnonzero(live)

    def stage_moment(self, t: int) -> np.ndarray:
        d = self.index.dim(t)
        return self.second_moment[:d, :d]

    def with_covariance(self, covariance) -> "UncertaintyModel":
        return UncertaintyModel(self.index, {k: list(v) for k, v in self.factors.items()}, covariance)

    def uncertain_families(self) -> list[str]:
        """Families with a nonzero coefficient on some random coordinate."""
        out = []
        for name, mats in self.factors.items():
            if any(np.any(m[:, 1:] != 0) for m in mats):
                out.append(name)
        return out

    def check_against(self, system: SystemData) -> None:
        for name, attr in FACTOR_FAMILIES.items():
            rows = 1 if attr is None else getattr(system, attr)
            got = self.factors[name][0].shape[0]
            if got != rows:
                raise ModelError(f"{name}: expected {rows} rows, got {got}")
        if self.index.stages != system.stages:
            raise ModelError(f"uncertainty has {self.index.stages} stages, system has {system.stages}")


@dataclass(frozen=True)
class StageParameters:
    """Realized uncertain parameters; each field is a list over stages."""

    capex_generation: list
    capex_energy: list
    capex_power: list
    peak_load: list
    fuel_existing: list
    fuel_candidate: list
    emission_cap: list


def realize_parameters(u: UncertaintyModel, xi) -> StageParameters:
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (u.size,):
        raise ModelError(f"scenario must have length {u.size}, got shape {xi.shape}")
    if xi[0] != 1.0:
        raise ModelError(f"first scenario coordinate must equal 1, got {xi[0]}")
    out = {}
    for name, mats in u.factors.items():
        values = [m @ u.index.truncate(xi, t) for t, m in enumerate(mats)]
        if name == "emission_cap":
            values = [float(v[0]) for v in values]
        out[name] = values
    return StageParameters(**out)


def baseline_parameters(u: UncertaintyModel) -> StageParameters:
    return realize_parameters(u, u.mean)


@dataclass(frozen=True)
class RiskConfig:
    """Joint violation probabilities and their Bonferroni split into individual rows.

    With ``direct_individual`` the ``flow``, ``generation``, ``ramping``, ``storage``
    and ``investment`` values are the per-row probabilities themselves.
    """

    flow: float = 0.125
    generation: float = 0.01
    ramping: float = 0.01
    storage: float = 0.04
    emission: float = 0.2
    investment: float = 0.05
    mode: str = DRO
    direct_individual: bool = True
    _individual: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ModelError(f"mode must be one of {MODES}, got {self.mode!r}")
        for label in ("flow", "generation", "ramping", "storage", "emission", "investment"):
            value = getattr(self, label)
            if not 0.0 < value < 1.0:
                raise ModelError(f"{label} violation probability must lie in (0, 1), got {value}")

    def individual(self, system: SystemData) -> dict:
        """Per-row violation probabilities for every constraint family."""
        if self.direct_individual:
            out = {
                "flow": self.flow,
                "generation": self.generation,
                "ramping": self.ramping,
                "storage": self.storage,
                "investment": self.investment,
            }
        else:
            N = system.nodes
            out = {
                "flow": bonferroni_split(self.flow, max(system.lines, 1)),
                "generation": bonferroni_split(self.generation, 3 * N),
                "ramping": bonferroni_split(self.ramping, 3 * N),
                "storage": bonferroni_split(self.storage, 7 * N),
                "investment": bonferroni_split(self.investment, 3 * N),
            }
        out["emission"] = self.emission
        for label, value in out.items():
            if not 0.0 < value < 0.5:
                raise ModelError(f"individual {label} violation probability {value} outside (0, 0.5)")
        return out

    def replace(self, **changes) -> "RiskConfig":
        values = {
            k: getattr(self, k)
            for k in ("flow", "generation", "ramping", "storage", "emission", "investment", "mode", "direct_individual")
        }
        values.update(changes)
        return RiskConfig(**values)


def bonferroni_split(eps: float, rows: int) -> float:
    if rows < 1:
        raise ModelError("row count must be at least 1")
    return eps / rows


@dataclass(frozen=True)
class Instance:
    system: SystemData
    uncertainty: UncertaintyModel
    risk: RiskConfig

    def __post_init__(self):
        self.uncertainty.check_against(self.system)

    def with_covariance(self, covariance) -> "Instance":
        return Instance(self.system, self.uncertainty.with_covariance(covariance), self.risk)

    def with_risk(self, **changes) -> "Instance":
        return Instance(self.system, self.uncertainty, self.risk.replace(**changes))
