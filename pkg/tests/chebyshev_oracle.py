"""Brute-force worst-case probability of leaving an interval under mean/std information.

The candidate distributions live on a fixed 1-D grid; the largest outside mass is
a small LP over the grid weights.  The interval end points count as outside: mass
just beyond an end point is a limit of such grid distributions.
"""

import numpy as np
from scipy.optimize import linprog


def worst_case_outside(mean, std, lower, upper, inside_points=20001):
    half, mid = (upper - lower) / 2.0, (upper + lower) / 2.0
    mu, sd = (mean - mid) / half, std / half
    if sd == 0.0:
        return float(not -1.0 < mu < 1.0)
    inside = np.linspace(-1.0, 1.0, inside_points)[1:-1]
    far = 1.0 + np.geomspace(1e-9, 1e4, 400)
    local = mu + sd * np.linspace(-60.0, 60.0, 2401)
    grid = np.unique(np.concatenate([inside, far, -far, [-1.0, 1.0, mu], local]))
    outside = (grid <= -1.0) | (grid >= 1.0)
    A = np.vstack([np.ones_like(grid), grid, grid**2])
    rhs = np.array([1.0, mu, mu**2 + sd**2])
    res = linprog(-outside.astype(float), A_eq=A, b_eq=rhs, bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"oracle LP failed: {res.message}")
    return float(-res.fun)
