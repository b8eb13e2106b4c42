"""Defender-to-attacker matching on payoff costs."""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import robust_breach


def hungarian(costs) -> tuple[np.ndarray, float]:
    """Minimum-cost perfect matching of a square matrix.

    Returns ``(assignment, total)`` with ``assignment[i]`` the column given to
    row ``i``. Among equal-cost matchings the lexicographically smallest
    assignment vector is returned.
    """
    c = np.asarray(costs, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix must be finite")
    n = c.shape[0]
    if n == 0:
        return np.zeros(0, dtype=int), 0.0
    rows, cols = linear_sum_assignment(c)
    best = float(c[rows, cols].sum())
    tol = 1e-9 * max(1.0, float(np.abs(c).max()) * n)

    # fix rows one at a time to the smallest column that keeps the optimum reachable
    assign = np.full(n, -1, dtype=int)
    free_rows = list(range(n))
    free_cols = list(range(n))
    fixed = 0.0
    for i in range(n):
        free_rows.remove(i)
        for j in sorted(free_cols):
            rest_cols = [q for q in free_cols if q != j]
            rest = 0.0
            if free_rows:
                sub = c[np.ix_(free_rows, rest_cols)]
                r, q = linear_sum_assignment(sub)
                rest = float(sub[r, q].sum())
            if fixed + c[i, j] + rest <= best + tol:
                assign[i] = j
                fixed += c[i, j]
                free_cols.remove(j)
                break
    return assign, float(c[np.arange(n), assign].sum())


def pair_cost(defender_pos, defender_speed: float, attacker_pos, attacker_speed: float, radius: float = 1.0) -> float:
    """Optimal-play time advantage of the attacker against this defender, in seconds."""
    v = attacker_speed / defender_speed
    _, p = robust_breach(defender_pos, attacker_pos, v, radius)
    # payoff is in defender-distance units; divide by speed to get time
    return p / defender_speed


def build_cost_matrix(defenders, attackers, radius: float = 1.0) -> np.ndarray:
    """Cost ``(i, j)`` = payoff of attacker ``j`` against defender ``i`` at ``j``'s optimal breach.

    ``defenders`` / ``attackers`` are sequences of ``(position, speed)`` pairs.
    Higher cost is worse for the defender.
    """
    if len(defenders) != len(attackers):
        raise ValueError("equal numbers of living defenders and attackers required")
    n = len(defenders)
    out = np.empty((n, n))
    for i, (dp, ds) in enumerate(defenders):
        for j, (ap, as_) in enumerate(attackers):
            out[i, j] = pair_cost(dp, ds, ap, as_, radius)
    return out
