"""Regenerate the bundled JSON instances under src/ldr_expand/data/.

Units: GW, GWh, M$ (so fuel costs are M$/GWh = k$/MWh), Mt CO2.
"""

import json
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "ldr_expand" / "data"


def ring_ptdf(nodes: int, lines: list[tuple[int, int]], slack: int = 0) -> np.ndarray:
    """PTDF of a network with unit reactances."""
    E = len(lines)
    A = np.zeros((E, nodes))
    for e, (i, j) in enumerate(lines):
        A[e, i], A[e, j] = 1.0, -1.0
    B = A.T @ A
    keep = [n for n in range(nodes) if n != slack]
    X = np.zeros((nodes, nodes))
    X[np.ix_(keep, keep)] = np.linalg.inv(B[np.ix_(keep, keep)])
    return np.round(A @ X, 10)


def factor(first: np.ndarray, deltas: np.ndarray, sizes, slot: int) -> list:
    """Stage matrices: column 0 holds the first-stage value, coordinate ``slot`` of
    every later stage carries that stage's additive change."""
    first = np.atleast_1d(np.asarray(first, dtype=float))
    mats = []
    dims = np.cumsum(sizes)
    for t, d in enumerate(dims):
        m = np.zeros((first.size, d))
        m[:, 0] = first
        for j in range(1, t + 1):
            start = dims[j - 1]
            m[:, start + slot] = deltas
        mats.append(np.round(m, 10).tolist())
    return mats


def fixed(values_by_stage, sizes) -> list:
    dims = np.cumsum(sizes)
    out = []
    for t, d in enumerate(dims):
        v = np.atleast_1d(np.asarray(values_by_stage[t], dtype=float))
        m = np.zeros((v.size, d))
        m[:, 0] = v
        out.append(m.tolist())
    return out


def load_shapes(W, H, N):
    summer = np.array([0.62, 0.56, 0.72, 0.90, 1.00, 0.82])
    winter = np.array([0.74, 0.66, 0.76, 0.84, 0.92, 0.86])
    base = np.stack([summer, winter])[:W, :H]
    tilt = np.array([1.0, 0.97, 1.0, 0.95])[:N]
    return np.clip(base[:, :, None] * tilt[None, None, :], 0.0, 1.0)


def desk4():
    T, W, H, N = 5, 2, 6, 4
    sizes = [1, 3, 3, 3, 3]
    lines = [(0, 1), (1, 2), (2, 3), (3, 0)]
    ptdf = ring_ptdf(N, lines)

    peak = np.array([18.0, 14.0, 16.0, 12.0])
    retire = np.array([1.0, 0.9, 0.8, 0.7, 0.6])
    exist_cap = np.array([22.0, 16.0, 18.0, 12.0])

    solar = np.array([[0.0, 0.35, 0.85, 0.70, 0.25, 0.0], [0.0, 0.20, 0.60, 0.50, 0.10, 0.0]])
    wind = np.array([[0.40, 0.35, 0.25, 0.30, 0.40, 0.50], [0.55, 0.50, 0.40, 0.45, 0.50, 0.60]])
    cand_avail = np.zeros((W, H, 4))
    cand_avail[:, :, 0] = 0.93
    cand_avail[:, :, 1] = solar
    cand_avail[:, :, 2] = wind
    cand_avail[:, :, 3] = 0.90

    capex_first = np.array([95.0, 70.0, 110.0, 300.0])
    capex_delta = np.array([-1.0, -5.0, -4.0, -10.0])
    fuel_exist_first = np.array([0.022, 0.032, 0.030, 0.024])
    fuel_exist_delta = 0.1 * fuel_exist_first
    fuel_cand_first = np.array([0.028, 0.0, 0.0, 0.008])
    fuel_cand_delta = 0.1 * fuel_cand_first
    caps = [150.0, 125.0, 100.0, 75.0, 50.0]

    doc = {
        "name": "desk4",
        "units": {"power": "GW", "energy": "GWh", "money": "M$", "emissions": "Mt"},
        "system": {
            "stages": T,
            "horizons": W,
            "hours": H,
            "nodes": N,
            "annual_hours": 8760.0,
            "shed_penalty": 9.0,
            "horizon_weight": [8760.0 / (W * H)] * W,
            "network": {"ptdf": ptdf.tolist(), "line_limit": [9.0, 9.0, 9.0, 9.0]},
            "existing": {
                "node": [0, 1, 2, 3],
                "capacity": np.round(np.outer(retire, exist_cap), 10).tolist(),
                "om": [20.0, 14.0, 14.0, 20.0],
                "emission": [0.00095, 0.00045, 0.00050, 0.00090],
                "ramp_up": [0.3, 0.6, 0.6, 0.3],
                "ramp_down": [0.3, 0.6, 0.6, 0.3],
                "availability": np.full((W, H, 4), 0.92).tolist(),
            },
            "candidate": {
                "node": [0, 1, 2, 3],
                "om": [12.0, 8.0, 20.0, 60.0],
                "emission": [0.00037, 0.0, 0.0, 0.0],
                "ramp_up": [0.7, 1.0, 1.0, 0.3],
                "ramp_down": [0.7, 1.0, 1.0, 0.3],
                "availability": cand_avail.tolist(),
                "max": [30.0, 40.0, 40.0, 10.0],
            },
            "storage": {
                "node": [1, 3],
                "energy_om": [1.0, 1.0],
                "power_om": [3.0, 3.0],
                "charge_efficiency": [0.92] * 2,
                "discharge_efficiency": [0.92] * 2,
                "energy_max": [200.0] * 2,
                "power_max": [40.0] * 2,
            },
            "load_profile": load_shapes(W, H, N).tolist(),
            "budget": [8000.0] * T,
        },
        "uncertainty": {
            "stage_sizes": sizes,
            "covariance": {"diagonal": [0.0] + [0.25] * 12},
            "factors": {
                "capex_generation": factor(capex_first, capex_delta, sizes, 0),
                "capex_energy": factor([20.0] * 2, [-1.6] * 2, sizes, 0),
                "capex_power": factor([30.0] * 2, [-2.0] * 2, sizes, 0),
                "peak_load": factor(peak, 0.08 * peak, sizes, 2),
                "fuel_existing": factor(fuel_exist_first, fuel_exist_delta, sizes, 1),
                "fuel_candidate": factor(fuel_cand_first, fuel_cand_delta, sizes, 1),
                "emission_cap": fixed(caps, sizes),
            },
        },
        "risk": {
            "flow": 0.125,
            "generation": 0.01,
            "ramping": 0.01,
            "storage": 0.04,
            "emission": 0.2,
            "investment": 0.05,
            "mode": "dro",
            "direct_individual": True,
        },
    }
    return doc


def desk4_reduced():
    """Two stages, stage-2 peak-load uncertainty per zone, no storage expansion."""
    doc = desk4()
    sysd = doc["system"]
    T = 2
    keep = [0, 4]
    sysd["stages"] = T
    ex = sysd["existing"]
    ex["capacity"] = [ex["capacity"][t] for t in keep]
    cand = sysd["candidate"]
    sto = sysd["storage"]
    sto["energy_max"] = [0.0] * 2
    sto["power_max"] = [0.0] * 2
    sysd["budget"] = [None, None]
    sizes = [1, 4]
    peak = np.array([18.0, 14.0, 16.0, 12.0])
    growth = 0.32 * peak
    load = [np.c_[peak].tolist(), np.c_[peak, np.diag(growth)].tolist()]
    capex = np.array([95.0, 70.0, 110.0, 300.0])
    doc["name"] = "desk4_reduced"
    doc["uncertainty"] = {
        "stage_sizes": sizes,
        "covariance": {"diagonal": [0.0] + [0.25] * 4},
        "factors": {
            "capex_generation": fixed([capex, capex - 20.0], sizes),
            "capex_energy": fixed([[20.0] * 2, [14.0] * 2], sizes),
            "capex_power": fixed([[30.0] * 2, [22.0] * 2], sizes),
            "peak_load": load,
            "fuel_existing": fixed([[0.022, 0.032, 0.030, 0.024]] * 2, sizes),
            "fuel_candidate": fixed([[0.028, 0.0, 0.0, 0.008]] * 2, sizes),
            "emission_cap": fixed([150.0, 75.0], sizes),
        },
    }
    return doc


def micro3():
    """Three nodes, two stages, one load coordinate: small enough for exhaustive checks."""
    T, W, H, N = 2, 1, 3, 3
    sizes = [1, 1]
    lines = [(0, 1), (1, 2)]
    ptdf = ring_ptdf(N, lines)
    peak = np.array([6.0, 4.0, 5.0])
    doc = {
        "name": "micro3",
        "units": {"power": "GW", "energy": "GWh", "money": "M$", "emissions": "Mt"},
        "system": {
            "stages": T,
            "horizons": W,
            "hours": H,
            "nodes": N,
            "annual_hours": 8760.0,
            "shed_penalty": 9.0,
            "horizon_weight": [8760.0 / 3],
            "network": {"ptdf": ptdf.tolist(), "line_limit": [6.0, 6.0]},
            "existing": {
                "node": [0, 2],
                "capacity": [[9.0, 5.0], [7.0, 4.0]],
                "om": [20.0, 14.0],
                "emission": [0.0009, 0.0005],
                "ramp_up": [0.4, 0.7],
                "ramp_down": [0.4, 0.7],
                "availability": np.full((W, H, 2), 0.95).tolist(),
            },
            "candidate": {
                "node": [1, 2],
                "om": [12.0, 10.0],
                "emission": [0.00037, 0.0],
                "ramp_up": [0.8, 1.0],
                "ramp_down": [0.8, 1.0],
                "availability": [[[0.93, 0.3], [0.93, 0.8], [0.93, 0.1]]],
                "max": [8.0, 10.0],
            },
            "storage": {
                "node": [1],
                "energy_om": [1.0],
                "power_om": [3.0],
                "charge_efficiency": [0.9],
                "discharge_efficiency": [0.9],
                "energy_max": [20.0],
                "power_max": [5.0],
            },
            "load_profile": [[[0.7, 0.7, 0.7], [1.0, 0.95, 1.0], [0.8, 0.8, 0.75]]],
            "budget": [None, None],
        },
        "uncertainty": {
            "stage_sizes": sizes,
            "covariance": [[0.0, 0.0], [0.0, 0.25]],
            "factors": {
                "capex_generation": fixed([[90.0, 70.0], [85.0, 60.0]], sizes),
                "capex_energy": fixed([[20.0], [16.0]], sizes),
                "capex_power": fixed([[30.0], [26.0]], sizes),
                "peak_load": [np.c_[peak].tolist(), np.c_[peak, 0.2 * peak].tolist()],
                "fuel_existing": fixed([[0.022, 0.030]] * 2, sizes),
                "fuel_candidate": fixed([[0.028, 0.0]] * 2, sizes),
                "emission_cap": fixed([60.0, 45.0], sizes),
            },
        },
        "risk": {
            "flow": 0.2,
            "generation": 0.05,
            "ramping": 0.05,
            "storage": 0.1,
            "emission": 0.2,
            "investment": 0.1,
            "mode": "dro",
            "direct_individual": True,
        },
    }
    return doc


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for name, build in (("desk4", desk4), ("desk4_reduced", desk4_reduced), ("micro3", micro3)):
        path = OUT / f"{name}.json"
        path.write_text(json.dumps(build(), indent=1) + "\n")
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
