"""JSON instance ingestion and export.

The document has three sections, ``system``, ``uncertainty`` and ``risk``; the
bundled ``desk4.json`` is the reference example and ``docs/instance_schema.md``
lists every field.  Arrays indexed by stage may omit the leading stage axis, in
which case they are repeated for every stage.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np

from .model import (
    FACTOR_FAMILIES,
    Instance,
    ModelError,
    RiskConfig,
    StageIndex,
    SystemData,
    UncertaintyModel,
)

BUNDLED = ("desk4", "desk4_reduced", "micro3")


class InstanceError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid instance:\n  " + "\n  ".join(self.errors))


class _Reader:
    def __init__(self):
        self.errors: list[str] = []

    def get(self, doc, path: str, default=...):
        node = doc
        for key in path.split("."):
            if not isinstance(node, dict) or key not in node:
                if default is ...:
                    self.errors.append(f"{path}: missing")
                    return None
                return default
            node = node[key]
        return node

    def array(self, doc, path, shape, stage_axis=False, default=..., allow_null=False):
        raw = self.get(doc, path, default)
        if raw is None:
            return None
        try:
            if allow_null:
                raw = _nulls_to_inf(raw)
            arr = np.asarray(raw, dtype=float)
        except (TypeError, ValueError):
            self.errors.append(f"{path}: not a numeric array")
            return None
        if stage_axis and arr.shape == shape[1:]:
            arr = np.broadcast_to(arr, shape).copy()
        if arr.size == 0 and int(np.prod(shape)) == 0:
            arr = arr.reshape(shape)
        if arr.shape != shape:
            self.errors.append(f"{path}: expected shape {shape}, got {arr.shape}")
            return None
        return arr

    def integer(self, doc, path, default=...):
        raw = self.get(doc, path, default)
        if raw is None:
            return None
        if isinstance(raw, bool) or not isinstance(raw, (int, float)) or int(raw) != raw:
            self.errors.append(f"{path}: expected an integer, got {raw!r}")
            return None
        return int(raw)


def _nulls_to_inf(raw):
    if raw is None:
        return np.inf
    if isinstance(raw, list):
        return [_nulls_to_inf(r) for r in raw]
    return raw


def _inf_to_null(value):
    if isinstance(value, list):
        return [_inf_to_null(v) for v in value]
    if isinstance(value, float) and np.isinf(value):
        return None
    return value


def parse_instance(doc: dict) -> Instance:
    """Validate a decoded JSON document; every problem is reported with its path."""
    r = _Reader()
    if not isinstance(doc, dict):
        raise InstanceError(["<root>: expected an object"])
    T = r.integer(doc, "system.stages")
    W = r.integer(doc, "system.horizons")
    H = r.integer(doc, "system.hours")
    N = r.integer(doc, "system.nodes")
    if r.errors:
        raise InstanceError(r.errors)
    units = {}
    for kind in ("existing", "candidate", "storage"):
        node = r.get(doc, f"system.{kind}.node")
        units[kind] = len(node) if isinstance(node, list) else 0
    G, C, K = units["existing"], units["candidate"], units["storage"]
    ptdf = r.get(doc, "system.network.ptdf")
    E = len(ptdf) if isinstance(ptdf, list) else 0

    sysargs = {
        "stages": T,
        "horizons": W,
        "hours": H,
        "nodes": N,
        "name": str(doc.get("name", "instance")),
        "annual_hours": float(r.get(doc, "system.annual_hours", 8760.0)),
        "shed_penalty": float(r.get(doc, "system.shed_penalty", 9000.0)),
        "ptdf": r.array(doc, "system.network.ptdf", (E, N)),
        "line_limit": r.array(doc, "system.network.line_limit", (E,)),
        "horizon_weight": r.array(doc, "system.horizon_weight", (W,)),
        "load_profile": r.array(doc, "system.load_profile", (T, W, H, N), stage_axis=True),
        "budget": r.array(doc, "system.budget", (T,), allow_null=True, default=[None] * T),
    }
    layout = {
        "existing": {
            "node": None,
            "capacity": ((T, G), True),
            "om": ((T, G), True),
            "emission": ((G,), False),
            "ramp_up": ((G,), False),
            "ramp_down": ((G,), False),
            "availability": ((T, W, H, G), True),
        },
        "candidate": {
            "node": None,
            "om": ((T, C), True),
            "emission": ((C,), False),
            "ramp_up": ((C,), False),
            "ramp_down": ((C,), False),
            "availability": ((T, W, H, C), True),
            "max": ((T, C), True),
        },
        "storage": {
            "node": None,
            "energy_om": ((T, K), True),
            "power_om": ((T, K), True),
            "charge_efficiency": ((K,), False),
            "discharge_efficiency": ((K,), False),
            "energy_max": ((T, K), True),
            "power_max": ((T, K), True),
        },
    }
    rename = {"max": "candidate_max", "energy_max": "storage_energy_max", "power_max": "storage_power_max",
              "energy_om": "storage_energy_om", "power_om": "storage_power_om",
              "charge_efficiency": "charge_efficiency", "discharge_efficiency": "discharge_efficiency"}
    for kind, fields in layout.items():
        for key, shape in fields.items():
            path = f"system.{kind}.{key}"
            target = rename.get(key, f"{kind}_{key}")
            if kind == "storage" and key == "node":
                target = "storage_node"
            if shape is None:
                raw = r.get(doc, path)
                if raw is not None and not all(isinstance(v, int) and not isinstance(v, bool) for v in raw):
                    r.errors.append(f"{path}: expected a list of integer node indices")
                sysargs[target] = raw
            else:
                sysargs[target] = r.array(doc, path, shape[0], stage_axis=shape[1])

    sizes = r.get(doc, "uncertainty.stage_sizes")
    factors_raw = r.get(doc, "uncertainty.factors")
    cov_raw = r.get(doc, "uncertainty.covariance")
    if r.errors:
        raise InstanceError(r.errors)

    try:
        system = SystemData(**sysargs)
    except ModelError as exc:
        raise InstanceError([f"system: {exc}"]) from None

    try:
        index = StageIndex(tuple(sizes))
    except (ModelError, TypeError) as exc:
        raise InstanceError([f"uncertainty.stage_sizes: {exc}"]) from None
    n = index.total
    if isinstance(cov_raw, dict) and "diagonal" in cov_raw:
        diag = r.array(cov_raw, "diagonal", (n,))
        cov = np.diag(diag) if diag is not None else None
        if diag is None:
            r.errors[-1] = "uncertainty.covariance." + r.errors[-1]
    else:
        cov = r.array(doc, "uncertainty.covariance", (n, n))
    rows = {name: (1 if attr is None else getattr(system, attr)) for name, attr in FACTOR_FAMILIES.items()}
    factors = {}
    if not isinstance(factors_raw, dict):
        r.errors.append("uncertainty.factors: expected an object")
    else:
        for name in sorted(set(factors_raw) - set(FACTOR_FAMILIES)):
            r.errors.append(f"uncertainty.factors.{name}: unknown factor family")
        for name in FACTOR_FAMILIES:
            mats = factors_raw.get(name)
            if not isinstance(mats, list) or len(mats) != T:
                r.errors.append(f"uncertainty.factors.{name}: expected a list of {T} stage matrices")
                continue
            stage_mats = []
            for t, m in enumerate(mats):
                arr = r.array({"m": m}, "m", (rows[name], index.dim(t)))
                if arr is None:
                    r.errors[-1] = f"uncertainty.factors.{name}[{t}]" + r.errors[-1][1:]
                stage_mats.append(arr)
            factors[name] = stage_mats
    if r.errors:
        raise InstanceError(r.errors)
    try:
        uncertainty = UncertaintyModel(index, factors, cov)
    except ModelError as exc:
        raise InstanceError([f"uncertainty.covariance: {exc}" if "covariance" in str(exc) else f"uncertainty: {exc}"]) from None

    risk_doc = doc.get("risk", {})
    allowed = {"flow", "generation", "ramping", "storage", "emission", "investment", "mode", "direct_individual"}
    unknown = sorted(set(risk_doc) - allowed)
    if unknown:
        raise InstanceError([f"risk.{k}: unknown field" for k in unknown])
    try:
        risk = RiskConfig(**risk_doc)
        risk.individual(system)
    except (ModelError, TypeError) as exc:
        raise InstanceError([f"risk: {exc}"]) from None
    try:
        return Instance(system, uncertainty, risk)
    except ModelError as exc:
        raise InstanceError([f"uncertainty.factors: {exc}"]) from None


def load_instance(path) -> Instance:
    """Load an instance from a file path or a bundled instance name."""
    text = _read(path)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InstanceError([f"<json>: line {exc.lineno}, column {exc.colno}: {exc.msg}"]) from None
    return parse_instance(doc)


def _read(path) -> str:
    p = Path(path)
    if p.exists():
        return p.read_text()
    name = str(path)
    if name in BUNDLED:
        return resources.files("ldr_expand").joinpath("data", f"{name}.json").read_text()
    raise InstanceError([f"<path>: no such file or bundled instance: {path}"])


def instance_to_dict(inst: Instance) -> dict:
    s, u, k = inst.system, inst.uncertainty, inst.risk

    def lst(a):
        return _inf_to_null(np.asarray(a, dtype=float).tolist())

    return {
        "name": s.name,
        "system": {
            "stages": s.stages,
            "horizons": s.horizons,
            "hours": s.hours,
            "nodes": s.nodes,
            "annual_hours": s.annual_hours,
            "shed_penalty": s.shed_penalty,
            "horizon_weight": lst(s.horizon_weight),
            "network": {"ptdf": lst(s.ptdf), "line_limit": lst(s.line_limit)},
            "existing": {
                "node": s.existing_node.tolist(),
                "capacity": lst(s.existing_capacity),
                "om": lst(s.existing_om),
                "emission": lst(s.existing_emission),
                "ramp_up": lst(s.existing_ramp_up),
                "ramp_down": lst(s.existing_ramp_down),
                "availability": lst(s.existing_availability),
            },
            "candidate": {
                "node": s.candidate_node.tolist(),
                "om": lst(s.candidate_om),
                "emission": lst(s.candidate_emission),
                "ramp_up": lst(s.candidate_ramp_up),
                "ramp_down": lst(s.candidate_ramp_down),
                "availability": lst(s.candidate_availability),
                "max": lst(s.candidate_max),
            },
            "storage": {
                "node": s.storage_node.tolist(),
                "energy_om": lst(s.storage_energy_om),
                "power_om": lst(s.storage_power_om),
                "charge_efficiency": lst(s.charge_efficiency),
                "discharge_efficiency": lst(s.discharge_efficiency),
                "energy_max": lst(s.storage_energy_max),
                "power_max": lst(s.storage_power_max),
            },
            "load_profile": lst(s.load_profile),
            "budget": lst(s.budget),
        },
        "uncertainty": {
            "stage_sizes": list(u.index.sizes),
            "covariance": lst(u.covariance),
            "factors": {name: [lst(m) for m in mats] for name, mats in u.factors.items()},
        },
        "risk": {
            "flow": k.flow,
            "generation": k.generation,
            "ramping": k.ramping,
            "storage": k.storage,
            "emission": k.emission,
            "investment": k.investment,
            "mode": k.mode,
            "direct_individual": k.direct_individual,
        },
    }
