"""Small hand-built instances shared by the tests."""

import copy

import numpy as np

from ldr_expand.instances import load_instance, parse_instance

# one summary line per acceptance criterion, printed at the end of the session
ACCEPTANCE = []


def record(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def fixed(values_by_stage, sizes):
    dims = np.cumsum(sizes)
    out = []
    for t, d in enumerate(dims):
        v = np.atleast_1d(np.asarray(values_by_stage[t], dtype=float))
        m = np.zeros((v.size, d))
        m[:, 0] = v
        out.append(m.tolist())
    return out


def one_node_doc(
    stages=1,
    demand=10.0,
    capex=5.0,
    om=1.0,
    fuel=0.5,
    availability=1.0,
    existing=0.0,
    existing_fuel=0.1,
    emission=0.0,
    cap=1e6,
    hours=1,
    weight=1.0,
    cand_max=100.0,
    storage=False,
):
    """One node, one candidate unit, one existing unit, no lines.

    The load profile is 1 in every hour so the demand equals ``demand``.
    """
    T, W, H = stages, 1, hours
    sizes = [1] * T
    K = 1 if storage else 0
    return {
        "name": "one_node",
        "system": {
            "stages": T,
            "horizons": W,
            "hours": H,
            "nodes": 1,
            "annual_hours": weight * H,
            "shed_penalty": 9.0,
            "horizon_weight": [weight],
            "network": {"ptdf": [], "line_limit": []},
            "existing": {
                "node": [0],
                "capacity": [[existing]] * T,
                "om": [0.0],
                "emission": [emission],
                "ramp_up": [1.0],
                "ramp_down": [1.0],
                "availability": np.ones((W, H, 1)).tolist(),
            },
            "candidate": {
                "node": [0],
                "om": [om],
                "emission": [emission],
                "ramp_up": [1.0],
                "ramp_down": [1.0],
                "availability": np.full((W, H, 1), availability).tolist(),
                "max": [cand_max],
            },
            "storage": {
                "node": [0] * K,
                "energy_om": [0.1] * K,
                "power_om": [0.1] * K,
                "charge_efficiency": [0.9] * K,
                "discharge_efficiency": [0.9] * K,
                "energy_max": [10.0] * K,
                "power_max": [10.0] * K,
            },
            "load_profile": np.ones((W, H, 1)).tolist(),
            "budget": [None] * T,
        },
        "uncertainty": {
            "stage_sizes": sizes,
            "covariance": np.zeros((T, T)).tolist(),
            "factors": {
                "capex_generation": fixed([[capex]] * T, sizes),
                "capex_energy": fixed([[1.0] * K] * T, sizes),
                "capex_power": fixed([[1.0] * K] * T, sizes),
                "peak_load": fixed([[demand]] * T, sizes),
                "fuel_existing": fixed([[existing_fuel]] * T, sizes),
                "fuel_candidate": fixed([[fuel]] * T, sizes),
                "emission_cap": fixed([[cap]] * T, sizes),
            },
        },
        "risk": {"mode": "dro"},
    }


def one_node(**kw):
    return parse_instance(one_node_doc(**kw))


def bundled_doc(name):
    from ldr_expand.instances import instance_to_dict

    return copy.deepcopy(instance_to_dict(load_instance(name)))
