"""One-on-one perimeter game on a hemisphere: payoff, breach-point solvers, winning regions.

Conventions: the defender moves at unit speed, the attacker at speed ratio ``v``
(attacker / defender), so times are distances in defender units. Points are
plain ``numpy`` arrays of shape ``(3,)``. Angles are radians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0
_AXIS_EPS = 1e-9
_ORIGIN_EPS = 1e-12


def _as_point(p, name: str = "point") -> np.ndarray:
    arr = np.asarray(p, dtype=float).reshape(3)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite, got {arr}")
    return arr


def payoff(defender, attacker, breach, v: float) -> float:
    """Temporal payoff ``tau_D - tau_A``. Positive means the attacker wins."""
    if not (v > 0 and math.isfinite(v)):
        raise ValueError(f"speed ratio must be positive and finite, got {v}")
    d = _as_point(defender, "defender")
    a = _as_point(attacker, "attacker")
    b = _as_point(breach, "breach")
    return float(np.linalg.norm(d - b) - np.linalg.norm(a - b) / v)


def payoff_many(defender: np.ndarray, attacker: np.ndarray, breaches: np.ndarray, v: float) -> np.ndarray:
    """Vectorised payoff over an ``(m, 3)`` array of breach points."""
    return np.linalg.norm(breaches - defender, axis=-1) - np.linalg.norm(breaches - attacker, axis=-1) / v


def cartesian_to_spherical(p) -> tuple[float, float, float]:
    """Return ``(psi, phi, r)``: azimuth in [0, 2pi), polar angle from +z, radius."""
    x, y, z = _as_point(p)
    r = math.sqrt(x * x + y * y + z * z)
    psi = math.atan2(y, x) % (2.0 * math.pi)
    phi = math.acos(max(-1.0, min(1.0, z / r))) if r > 0 else 0.0
    return psi, phi, r


def spherical_to_cartesian(psi: float, phi: float, r: float) -> np.ndarray:
    return np.array([r * math.sin(phi) * math.cos(psi), r * math.sin(phi) * math.sin(psi), r * math.cos(phi)])


@dataclass(frozen=True)
class EngagementInstance:
    defender: np.ndarray
    attacker: np.ndarray
    v: float
    radius: float = 1.0
    hemisphere: bool = True  # False: full-sphere game, no z >= 0 constraint

    def __post_init__(self):
        object.__setattr__(self, "defender", _as_point(self.defender, "defender"))
        object.__setattr__(self, "attacker", _as_point(self.attacker, "attacker"))
        if not (self.v > 0 and math.isfinite(self.v)):
            raise ValueError(f"speed ratio must be positive, got {self.v}")
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if np.linalg.norm(self.defender) >= self.radius:
            raise ValueError("defender must start inside the hemisphere")
        if np.linalg.norm(self.attacker) <= self.radius:
            raise ValueError("attacker must start outside the hemisphere")
        if self.hemisphere and (self.defender[2] < 0 or self.attacker[2] < 0):
            raise ValueError("agents must satisfy z >= 0")


@dataclass(frozen=True)
class CanonicalInstance:
    """Planar reduction: defender at ``(a, 0, 0)``, attacker at ``(x0, s, 0)``.

    ``rotation`` maps canonical coordinates back to the world frame
    (``world = rotation @ canonical``).
    """

    a: float
    r_A: float
    phi_A_prime: float
    x0: float
    s: float
    rotation: np.ndarray
    degenerate: str | None = None  # None, "origin" or "axis"

    def to_world(self, p) -> np.ndarray:
        return self.rotation @ np.asarray(p, dtype=float)

    def to_canonical(self, p) -> np.ndarray:
        return self.rotation.T @ np.asarray(p, dtype=float)

    def planar_point(self, theta: float, radius: float) -> np.ndarray:
        return radius * (math.cos(theta) * self.rotation[:, 0] + math.sin(theta) * self.rotation[:, 1])


def _perpendicular_up(ex: np.ndarray) -> np.ndarray:
    """Unit vector orthogonal to ``ex`` with the largest possible z component."""
    up = np.array([0.0, 0.0, 1.0])
    w = up - (up @ ex) * ex
    n = np.linalg.norm(w)
    if n < 1e-9:
        w = np.array([1.0, 0.0, 0.0]) - ex[0] * ex
        n = np.linalg.norm(w)
    return w / n


def canonicalize(instance: EngagementInstance) -> CanonicalInstance:
    """Rotate so the defender sits on +x and the attacker in the upper xy half-plane."""
    D, A = instance.defender, instance.attacker
    a = float(np.linalg.norm(D))
    r_A = float(np.linalg.norm(A))
    degenerate = None
    if a < _ORIGIN_EPS:
        degenerate = "origin"
        ex = A / r_A
        a = 0.0
    else:
        ex = D / a
    x0 = float(A @ ex)
    perp = A - x0 * ex
    s = float(np.linalg.norm(perp))
    if s > _AXIS_EPS * max(1.0, r_A):
        ey = perp / s
    else:
        degenerate = degenerate or "axis"
        ey = _perpendicular_up(ex)
        s = 0.0
    ez = np.cross(ex, ey)
    rotation = np.column_stack([ex, ey, ez])
    return CanonicalInstance(
        a=a, r_A=r_A, phi_A_prime=math.atan2(s, x0), x0=x0, s=s, rotation=rotation, degenerate=degenerate
    )


def planar_payoff(theta, a: float, r_A: float, phi: float, v: float, radius: float = 1.0):
    """Payoff of the breach point at planar angle ``theta`` (law of cosines form)."""
    theta = np.asarray(theta, dtype=float)
    t_d = np.sqrt(np.maximum(a * a + radius * radius - 2 * a * radius * np.cos(theta), 0.0))
    t_a = np.sqrt(np.maximum(r_A * r_A + radius * radius - 2 * r_A * radius * np.cos(theta - phi), 0.0)) / v
    return t_d - t_a


def fixed_point_residual(theta: float, beta: float, a: float, r_A: float, phi: float, v: float, radius: float = 1.0):
    """Absolute violations of the two stationarity equations at ``(theta, beta)``.

    An arccos argument outside [-1, 1] counts its excess as violation.
    """
    arg_t = radius * math.cos(beta) / r_A
    g = phi - beta + math.acos(max(-1.0, min(1.0, arg_t)))
    r1 = abs(theta - g) + max(0.0, abs(arg_t) - 1.0)
    d_d = math.sqrt(max(a * a + radius * radius - 2 * a * radius * math.cos(theta), 0.0))
    if d_d == 0.0:
        return r1, float("inf")
    arg_b = a * v * math.sin(theta) / d_d
    h = math.acos(max(-1.0, min(1.0, arg_b)))
    r2 = abs(beta - h) + max(0.0, abs(arg_b) - 1.0)
    return r1, r2


@dataclass(frozen=True)
class BreachSolution:
    theta_star: float
    beta_star: float
    breach_world: np.ndarray
    tau_A: float
    tau_D: float
    payoff: float
    residual: float
    iterations: int
    converged: bool
    method: str = "fixed_point"
    clamped: bool = False
    canonical: CanonicalInstance | None = field(default=None, repr=False, compare=False)


def golden_section_max(f, lo: float, hi: float, tol: float = 1e-10, max_iter: int = 200) -> float:
    """Maximise a unimodal scalar ``f`` on ``[lo, hi]``."""
    c = hi - INV_PHI * (hi - lo)
    d = lo + INV_PHI * (hi - lo)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if hi - lo <= tol:
            break
        if fc > fd:
            hi, d, fd = d, c, fc
            c = hi - INV_PHI * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + INV_PHI * (hi - lo)
            fd = f(d)
    x = 0.5 * (lo + hi)
    # endpoints can win on monotone stretches (e.g. optimum exactly at a bracket end)
    best = max((f(lo), lo), (f(x), x), (f(hi), hi))
    return best[1]


def _finish(instance, canon, theta, beta, residual, iterations, converged, method):
    R, v = instance.radius, instance.v
    breach = canon.planar_point(theta, R)
    clamped = False
    if instance.hemisphere and breach[2] < -1e-12:
        breach = equator_breach(instance)
        clamped = True
    if instance.hemisphere and breach[2] < 0:
        breach[2] = 0.0
    tau_d = float(np.linalg.norm(instance.defender - breach))
    tau_a = float(np.linalg.norm(instance.attacker - breach) / v)
    return BreachSolution(
        theta_star=float(theta),
        beta_star=float(beta),
        breach_world=breach,
        tau_A=tau_a,
        tau_D=tau_d,
        payoff=tau_d - tau_a,
        residual=float(residual),
        iterations=iterations,
        converged=converged,
        method=method,
        clamped=clamped,
        canonical=canon,
    )


def equator_breach(instance: EngagementInstance, grid_n: int = 720) -> np.ndarray:
    """Best breach point on the equator circle ``z = 0`` (active hemisphere constraint)."""
    D, A, v, R = instance.defender, instance.attacker, instance.v, instance.radius
    psi = np.linspace(0.0, 2 * math.pi, grid_n, endpoint=False)
    ring = R * np.column_stack([np.cos(psi), np.sin(psi), np.zeros_like(psi)])
    i = int(np.argmax(payoff_many(D, A, ring, v)))
    step = 2 * math.pi / grid_n

    def f(t):
        return float(payoff_many(D, A, R * np.array([math.cos(t), math.sin(t), 0.0]), v))

    t = golden_section_max(f, psi[i] - step, psi[i] + step)
    return R * np.array([math.cos(t), math.sin(t), 0.0])


def _degenerate_solution(instance, canon):
    R = instance.radius
    if canon.degenerate == "origin":
        # every boundary point is equidistant for the defender: minimise attacker distance
        theta, beta = 0.0, math.pi / 2
    else:
        theta = 0.0 if canon.x0 >= 0 else math.pi
        beta = math.pi / 2
    res = fixed_point_residual(theta, beta, canon.a, canon.r_A, canon.phi_A_prime, instance.v, R)
    return _finish(instance, canon, theta, beta, max(res) if np.isfinite(max(res)) else 0.0, 0, True, "degenerate")


def solve_breach_fixed_point(
    instance: EngagementInstance,
    tol: float = 1e-10,
    max_iter: int = 200,
    damping: float = 0.5,
) -> BreachSolution:
    """Optimal breach point by damped iteration of the planar stationarity system.

    ``converged`` is False when the residual is still above ``tol`` after
    ``max_iter`` sweeps; the best iterate is returned and callers are expected
    to fall back to :func:`solve_breach_grid`.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    canon = canonicalize(instance)
    if canon.degenerate is not None:
        return _degenerate_solution(instance, canon)
    a, r_A, phi, v, R = canon.a, canon.r_A, canon.phi_A_prime, instance.v, instance.radius

    theta, beta = phi, math.pi / 4
    best = (float("inf"), theta, beta)
    it = 0
    for it in range(1, max_iter + 1):
        g = phi - beta + math.acos(max(-1.0, min(1.0, R * math.cos(beta) / r_A)))
        theta = (1.0 - damping) * theta + damping * g
        d_d = math.sqrt(max(a * a + R * R - 2 * a * R * math.cos(theta), 1e-300))
        beta = math.acos(max(-1.0, min(1.0, a * v * math.sin(theta) / d_d)))
        res = max(fixed_point_residual(theta, beta, a, r_A, phi, v, R))
        if res < best[0]:
            best = (res, theta, beta)
        if res < tol:
            break
    res, theta, beta = best
    return _finish(instance, canon, theta, beta, res, it, res < tol, "fixed_point")


def solve_breach_grid(instance: EngagementInstance, grid_n: int = 2048) -> BreachSolution:
    """Dense evaluation of the planar payoff, refined by golden-section search.

    Serves as the independent reference for the fixed-point solver.
    """
    if grid_n < 64:
        raise ValueError("grid_n must be at least 64")
    canon = canonicalize(instance)
    a, r_A, phi, v, R = canon.a, canon.r_A, canon.phi_A_prime, instance.v, instance.radius
    thetas = np.linspace(0.0, math.pi, grid_n)
    values = planar_payoff(thetas, a, r_A, phi, v, R)
    i = int(np.argmax(values))
    lo, hi = thetas[max(i - 1, 0)], thetas[min(i + 1, grid_n - 1)]
    theta = golden_section_max(lambda t: float(planar_payoff(t, a, r_A, phi, v, R)), lo, hi, tol=1e-10)
    d_d = math.sqrt(max(a * a + R * R - 2 * a * R * math.cos(theta), 1e-300))
    beta = math.acos(max(-1.0, min(1.0, a * v * math.sin(theta) / d_d)))
    res = max(fixed_point_residual(theta, beta, a, r_A, phi, v, R)) if canon.degenerate is None else 0.0
    return _finish(instance, canon, theta, beta, res, grid_n, True, "grid")


def solve_breach(instance: EngagementInstance, tol: float = 1e-10, max_iter: int = 200) -> BreachSolution:
    """Fixed-point solve with the grid oracle as fallback."""
    sol = solve_breach_fixed_point(instance, tol=tol, max_iter=max_iter)
    if sol.converged:
        return sol
    return solve_breach_grid(instance)


def optimal_payoff(defender, attacker, v: float, radius: float = 1.0, hemisphere: bool = True) -> float:
    return solve_breach(EngagementInstance(defender, attacker, v, radius, hemisphere)).payoff


# --- winning regions -------------------------------------------------------


def zero_payoff_radius(defender, direction, v: float, radius: float = 1.0, hemisphere: bool = True, xtol: float = 1e-14) -> float:
    """Distance along ``direction`` (from the origin) where the optimal payoff vanishes.

    The optimal payoff strictly decreases along any outward ray, so the root is unique.
    """
    D = _as_point(defender, "defender")
    u = _as_point(direction, "direction")
    u = u / np.linalg.norm(u)

    def f(r):
        return solve_breach(EngagementInstance(D, r * u, v, radius, hemisphere)).payoff

    lo = radius * (1.0 + 1e-9)
    hi = radius + v * (np.linalg.norm(D) + radius) + 1.0
    f_lo, f_hi = f(lo), f(hi)
    if not (f_lo > 0 > f_hi):
        raise ValueError("no sign change along this direction")
    return float(brentq(f, lo, hi, xtol=xtol, rtol=4 * np.finfo(float).eps, maxiter=200))


@dataclass
class SurfaceSample:
    theta: float
    rho: float
    point: np.ndarray
    payoff: float


@dataclass
class SurfaceResult:
    points: list[SurfaceSample]
    omitted: list[tuple[float, float]]


def _defender_axes(D: np.ndarray):
    a = np.linalg.norm(D)
    ex = D / a if a > _ORIGIN_EPS else np.array([1.0, 0.0, 0.0])
    e1 = _perpendicular_up(ex)
    e2 = np.cross(ex, e1)
    return ex, e1, e2


def zero_payoff_curve(defender, v: float, theta_samples: int = 180, radius: float = 1.0, rho: float = 0.0) -> SurfaceResult:
    """Planar zero-payoff curve around the defender axis over ``theta`` in [0, 2pi).

    The full-sphere game is used (no hemisphere constraint), which is what
    makes the curve symmetric under revolution about the defender axis.
    """
    D = _as_point(defender, "defender")
    ex, e1, e2 = _defender_axes(D)
    perp = math.cos(rho) * e1 + math.sin(rho) * e2
    out, omitted = [], []
    for theta in np.linspace(0.0, 2 * math.pi, theta_samples, endpoint=False):
        u = math.cos(theta) * ex + math.sin(theta) * perp
        try:
            r = zero_payoff_radius(D, u, v, radius, hemisphere=False)
        except ValueError:
            omitted.append((float(theta), rho))
            continue
        p = r * u
        out.append(SurfaceSample(float(theta), rho, p, optimal_payoff(D, p, v, radius, hemisphere=False)))
    return SurfaceResult(out, omitted)


def zero_payoff_surface(
    defender,
    v: float,
    theta_samples: int = 60,
    radial_tol: float = 1e-6,
    radius: float = 1.0,
    revolve_samples: int = 24,
) -> SurfaceResult:
    """Attacker starting positions with zero optimal payoff, restricted to ``z >= 0``.

    Directions are generated by revolving the planar angle ``theta`` about the
    defender axis; along each direction the radius is found by root-finding
    with the hemisphere-constrained breach solver. Samples whose payoff misses
    ``radial_tol`` or whose bracket fails are listed in ``omitted``.
    """
    D = _as_point(defender, "defender")
    if np.linalg.norm(D) >= radius or D[2] < 0:
        raise ValueError("defender must be inside the hemisphere")
    ex, e1, e2 = _defender_axes(D)
    out, omitted = [], []
    for rho in np.linspace(0.0, math.pi, revolve_samples, endpoint=False):
        perp = math.cos(rho) * e1 + math.sin(rho) * e2
        for theta in np.linspace(0.0, 2 * math.pi, theta_samples, endpoint=False):
            u = math.cos(theta) * ex + math.sin(theta) * perp
            if u[2] < 0:
                continue
            u[2] = max(u[2], 0.0)
            try:
                r = zero_payoff_radius(D, u, v, radius)
            except ValueError:
                omitted.append((float(theta), float(rho)))
                continue
            p = r * u
            p_val = optimal_payoff(D, p, v, radius)
            if abs(p_val) >= radial_tol:
                omitted.append((float(theta), float(rho)))
                continue
            out.append(SurfaceSample(float(theta), float(rho), p, p_val))
    return SurfaceResult(out, omitted)


def write_surface_csv(samples: list[SurfaceSample], path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theta", "rho", "x", "y", "z", "payoff"])
        for s in samples:
            w.writerow([repr(s.theta), repr(s.rho)] + [repr(float(c)) for c in s.point] + [repr(float(s.payoff))])


# --- 1v1 rollouts ----------------------------------------------------------


@dataclass
class OneVsOneOutcome:
    breach_star: np.ndarray
    attacker_target: np.ndarray
    defender_waypoints: list[np.ndarray]
    t_attacker: float
    t_defender: float
    payoff: float
    steps: int
    attacker_path: np.ndarray
    defender_path: np.ndarray
    max_breach_drift: float


def line_sphere_exit(inside, outside, radius: float = 1.0) -> np.ndarray:
    """Point where the segment from an interior point to an exterior point crosses the sphere."""
    p = np.asarray(inside, dtype=float)
    d = np.asarray(outside, dtype=float) - p
    a2 = d @ d
    b = 2 * p @ d
    c = p @ p - radius * radius
    t = (-b + math.sqrt(b * b - 4 * a2 * c)) / (2 * a2)
    return p + t * d


def deviate_breach(instance: EngagementInstance, breach: np.ndarray, angle: float) -> np.ndarray:
    """Move ``breach`` along the boundary by ``angle`` in the direction that lengthens the attacker's path."""
    R = instance.radius
    n = breach / np.linalg.norm(breach)
    grad = breach - instance.attacker
    grad = grad / np.linalg.norm(grad)
    t = grad - (grad @ n) * n
    if abs(breach[2]) < 1e-9:
        t[2] = 0.0  # stay on the equator when the hemisphere constraint is active
    if np.linalg.norm(t) < 1e-12:
        t = _perpendicular_up(n)
        if abs(breach[2]) < 1e-9:
            t = np.cross(np.array([0.0, 0.0, 1.0]), n)
    t = t / np.linalg.norm(t)
    out = R * (math.cos(angle) * n + math.sin(angle) * t)
    out[2] = max(out[2], 0.0)
    return R * out / np.linalg.norm(out)


def _walk(start, waypoints, speed, dt, n_steps):
    """Constant-speed piecewise-linear motion sampled every ``dt``; exact arrival time."""
    pts = [np.asarray(start, dtype=float)] + [np.asarray(w, dtype=float) for w in waypoints]
    seg = np.array([np.linalg.norm(pts[k + 1] - pts[k]) for k in range(len(pts) - 1)])
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    path = np.empty((n_steps + 1, 3))
    for k in range(n_steps + 1):
        s = min(speed * k * dt, total)
        j = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg) - 1)
        frac = 0.0 if seg[j] == 0 else (s - cum[j]) / seg[j]
        path[k] = pts[j] + frac * (pts[j + 1] - pts[j])
    return path, total / speed


def simulate_1v1(
    instance: EngagementInstance,
    defender_optimal: bool = True,
    attacker_optimal: bool = True,
    deviation: float = 0.1,
    dt: float = 0.01,
    check_invariance: bool = False,
) -> OneVsOneOutcome:
    """Roll out one engagement under one of the three strategy settings.

    The attacker flies straight to its breach point (optimal, or moved by
    ``deviation`` radians along the boundary). The defender flies straight to
    the attacker's breach point when optimal; otherwise it first heads to where
    the defender-attacker line leaves the hemisphere and only then to the
    breach point. Times are exact arrival times of the sampled motion.
    """
    if dt <= 0 or deviation < 0:
        raise ValueError("dt must be positive and deviation non-negative")
    sol = solve_breach(instance)
    b_star = sol.breach_world
    target = b_star if attacker_optimal else deviate_breach(instance, b_star, deviation)
    if defender_optimal:
        d_way = [target]
    else:
        d_way = [line_sphere_exit(instance.defender, instance.attacker, instance.radius), target]

    t_a_exact = np.linalg.norm(instance.attacker - target) / instance.v
    d_len = sum(
        np.linalg.norm(w - p) for p, w in zip([instance.defender] + d_way[:-1], d_way)
    )
    n_steps = int(math.ceil(max(t_a_exact, d_len) / dt)) + 1
    a_path, t_a = _walk(instance.attacker, [target], instance.v, dt, n_steps)
    d_path, t_d = _walk(instance.defender, d_way, 1.0, dt, n_steps)

    drift = 0.0
    if check_invariance and defender_optimal and attacker_optimal:
        t_end = min(t_a, t_d)
        for k in range(1, n_steps):
            if k * dt >= 0.9 * t_end:
                break
            if k % max(1, n_steps // 20):
                continue
            moved = EngagementInstance(d_path[k], a_path[k], instance.v, instance.radius)
            drift = max(drift, float(np.linalg.norm(solve_breach(moved).breach_world - b_star)))

    return OneVsOneOutcome(
        breach_star=b_star,
        attacker_target=target,
        defender_waypoints=d_way,
        t_attacker=float(t_a),
        t_defender=float(t_d),
        payoff=float(t_d - t_a),
        steps=n_steps,
        attacker_path=a_path,
        defender_path=d_path,
        max_breach_drift=drift,
    )


def random_instance(rng: np.random.Generator, v: float | None = None, radius: float = 1.0) -> EngagementInstance:
    """Uniform defender in ``0.9 R`` ball (z >= 0), attacker in the ``[1.2R, 2.5R]`` shell."""
    while True:
        d = rng.uniform(-0.9, 0.9, 3) * radius
        d[2] = abs(d[2])
        if np.linalg.norm(d) < 0.9 * radius:
            break
    u = rng.normal(size=3)
    u[2] = abs(u[2])
    u /= np.linalg.norm(u)
    a = u * rng.uniform(1.2, 2.5) * radius
    if v is None:
        v = float(rng.uniform(0.5, 1.5))
    return EngagementInstance(d, a, v, radius)


def fibonacci_hemisphere(n: int, radius: float = 1.0) -> np.ndarray:
    """Roughly uniform points on the upper hemisphere (z >= 0)."""
    k = np.arange(n) + 0.5
    z = 1.0 - k / n
    rho = np.sqrt(1.0 - z * z)
    ang = math.pi * (3.0 - math.sqrt(5.0)) * k
    return radius * np.column_stack([rho * np.cos(ang), rho * np.sin(ang), z])


_HEMI_GRID: dict[int, np.ndarray] = {}


def robust_breach(defender, attacker, v: float, radius: float = 1.0) -> tuple[np.ndarray, float]:
    """Breach point and payoff for any configuration the simulator can produce.

    Uses the exact solver when the instance is valid; otherwise (defender
    outside, attacker already inside) falls back to sampling the hemisphere.
    """
    D = np.asarray(defender, dtype=float)
    A = np.asarray(attacker, dtype=float)
    try:
        sol = solve_breach(EngagementInstance(D, A, v, radius))
        return sol.breach_world, sol.payoff
    except ValueError:
        pass
    grid = _HEMI_GRID.get(4096)
    if grid is None:
        grid = _HEMI_GRID.setdefault(4096, fibonacci_hemisphere(4096))
    pts = grid * radius
    vals = payoff_many(D, A, pts, v)
    i = int(np.argmax(vals))
    return pts[i].copy(), float(vals[i])


def zero_payoff_instance(rng: np.random.Generator, v: float, radius: float = 1.0, max_tries: int = 100) -> EngagementInstance:
    """Random defender with the attacker moved along its ray onto the zero-payoff surface."""
    for _ in range(max_tries):
        inst = random_instance(rng, v=v, radius=radius)
        u = inst.attacker / np.linalg.norm(inst.attacker)
        try:
            r = zero_payoff_radius(inst.defender, u, v, radius)
        except ValueError:
            continue
        return EngagementInstance(inst.defender, r * u, v, radius)
    raise ValueError("could not place an attacker on the zero-payoff surface")


def advance_toward_breach(instance: EngagementInstance, breach, fraction: float) -> EngagementInstance:
    """Both agents moved ``fraction`` of the way along their straight paths to ``breach``."""
    b = np.asarray(breach, dtype=float)
    D = instance.defender + fraction * (b - instance.defender)
    A = instance.attacker + fraction * (b - instance.attacker)
    return EngagementInstance(D, A, instance.v, instance.radius, instance.hemisphere)
