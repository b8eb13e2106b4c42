"""Heterogeneous point-mass dynamics, wind field and heading control."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

TWO_PI = 2.0 * math.pi
HALF_PI = 0.5 * math.pi
N_TYPES = 16


class Family(str, Enum):
    MISSILE_RATE = "missile-rate"  # action scales yaw/pitch angular velocity
    ANGLE_ACCELERATION = "angle-acceleration"  # action increments yaw/pitch rates
    DIRECT_ANGLE = "direct-angle"  # action sets yaw/pitch directly


FAMILY_INDEX = {Family.MISSILE_RATE: 0, Family.ANGLE_ACCELERATION: 1, Family.DIRECT_ANGLE: 2}


@dataclass(frozen=True)
class WindModel:
    shear_coefficient: float
    base_direction: tuple[float, float, float]
    sigma: float
    drag_coefficient: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        d = np.asarray(self.base_direction, dtype=float)
        n = np.linalg.norm(d)
        if n > 0:
            object.__setattr__(self, "base_direction", tuple(float(x) for x in d / n))

    def scaled(self, factor: float) -> "WindModel":
        return replace(
            self,
            shear_coefficient=self.shear_coefficient * factor,
            sigma=self.sigma * factor,
            drag_coefficient=self.drag_coefficient * factor,
        )


WIND_PROFILES = (
    WindModel(shear_coefficient=0.05, base_direction=(1.0, 0.0, 0.0), sigma=0.01, drag_coefficient=0.02),
    WindModel(shear_coefficient=0.08, base_direction=(0.6, 0.8, 0.0), sigma=0.02, drag_coefficient=0.04),
)


@dataclass(frozen=True)
class DynamicsSpec:
    type_id: int
    family: Family
    max_speed: float
    max_turn_rate: float  # rad/s; direct-angle ignores it
    wind_profile_id: int
    max_turn_accel: float = 0.0  # rad/s^2, angle-acceleration only

    def __post_init__(self):
        if self.max_speed <= 0:
            raise ValueError("max_speed must be positive")


def _build_table() -> tuple[DynamicsSpec, ...]:
    rows = []
    speeds = (1.0, 1.25)
    for turn in (2.0, 4.0):  # base missile variants, then the faster-turning ones
        for speed in speeds:
            for wind in (0, 1):
                rows.append((Family.MISSILE_RATE, speed, turn, wind, 0.0))
    for speed in speeds:
        for wind in (0, 1):
            rows.append((Family.ANGLE_ACCELERATION, speed, 3.0, wind, 8.0))
    for speed in speeds:
        for wind in (0, 1):
            rows.append((Family.DIRECT_ANGLE, speed, 0.0, wind, 0.0))
    return tuple(DynamicsSpec(i, f, s, t, w, acc) for i, (f, s, t, w, acc) in enumerate(rows))


TYPE_TABLE = _build_table()
assert len(TYPE_TABLE) == N_TYPES

# families interleaved so that small teams are still heterogeneous
ROUND_ROBIN_ORDER = (0, 8, 12, 5, 11, 15, 2, 9, 13, 7, 10, 14, 1, 3, 4, 6)


def dynamics_for_slot(slot: int, speed_scale: float = 1.0) -> DynamicsSpec:
    spec = TYPE_TABLE[ROUND_ROBIN_ORDER[slot % N_TYPES]]
    return replace(spec, max_speed=spec.max_speed * speed_scale)


@dataclass
class AgentState:
    position: np.ndarray
    velocity: np.ndarray
    yaw: float
    pitch: float
    dynamics: DynamicsSpec
    role: str = "defender"
    alive: bool = True
    yaw_rate: float = 0.0
    pitch_rate: float = 0.0

    def copy(self) -> "AgentState":
        return replace(self, position=self.position.copy(), velocity=self.velocity.copy())

    @property
    def heading(self) -> np.ndarray:
        return heading_vector(self.yaw, self.pitch)


def heading_vector(yaw: float, pitch: float) -> np.ndarray:
    cp = math.cos(pitch)
    return np.array([cp * math.cos(yaw), cp * math.sin(yaw), math.sin(pitch)])


def angles_of(direction) -> tuple[float, float]:
    """``(yaw, pitch)`` of a direction; yaw in [0, 2pi), pitch in [-pi/2, pi/2]."""
    d = np.asarray(direction, dtype=float)
    n = np.linalg.norm(d)
    if n == 0:
        return 0.0, 0.0
    d = d / n
    return math.atan2(d[1], d[0]) % TWO_PI, math.asin(max(-1.0, min(1.0, d[2])))


def wrap_pi(x: float) -> float:
    return (x + math.pi) % TWO_PI - math.pi


def deterministic_wind(position, velocity, model: WindModel) -> np.ndarray:
    """Systematic wind: linear height shear along the base direction minus velocity drag."""
    height = max(float(position[2]), 0.0)
    return model.shear_coefficient * height * np.asarray(model.base_direction) - model.drag_coefficient * np.asarray(velocity)


def wind_at(agent: AgentState, model: WindModel, rng: np.random.Generator) -> np.ndarray:
    w = deterministic_wind(agent.position, agent.velocity, model)
    if model.sigma > 0:
        w = w + rng.normal(0.0, model.sigma, 3)
    return w


def integrate(agent: AgentState, action, wind, dt: float) -> AgentState:
    """Advance one step: heading update per family, then ``v' = v + w + a dt``, then position.

    The acceleration term brings the airspeed vector to the commanded heading at
    full speed (cancelling last step's wind), so ground velocity is airspeed
    plus the current wind. Pitch is clamped to [-pi/2, pi/2], yaw wrapped.
    """
    u = np.clip(np.asarray(action, dtype=float).reshape(2), -1.0, 1.0)
    spec = agent.dynamics
    yaw, pitch = agent.yaw, agent.pitch
    yaw_rate, pitch_rate = agent.yaw_rate, agent.pitch_rate
    if spec.family is Family.MISSILE_RATE:
        yaw_rate, pitch_rate = u[0] * spec.max_turn_rate, u[1] * spec.max_turn_rate
        yaw += yaw_rate * dt
        pitch += pitch_rate * dt
    elif spec.family is Family.ANGLE_ACCELERATION:
        lim = spec.max_turn_rate
        yaw_rate = float(np.clip(yaw_rate + u[0] * spec.max_turn_accel * dt, -lim, lim))
        pitch_rate = float(np.clip(pitch_rate + u[1] * spec.max_turn_accel * dt, -lim, lim))
        yaw += yaw_rate * dt
        pitch += pitch_rate * dt
    else:
        yaw = math.pi * u[0]
        pitch = HALF_PI * u[1]
    if pitch > HALF_PI or pitch < -HALF_PI:
        pitch = max(-HALF_PI, min(HALF_PI, pitch))
        pitch_rate = 0.0 if spec.family is Family.ANGLE_ACCELERATION else pitch_rate
    yaw %= TWO_PI

    air = spec.max_speed * heading_vector(yaw, pitch)
    accel = (air - agent.velocity) / dt
    velocity = agent.velocity + np.asarray(wind, dtype=float) + accel * dt
    position = agent.position + velocity * dt
    if position[2] < 0.0:
        position[2] = 0.0
    return replace(
        agent,
        position=position,
        velocity=velocity,
        yaw=yaw,
        pitch=pitch,
        yaw_rate=float(yaw_rate),
        pitch_rate=float(pitch_rate),
    )


def compensate_heading(desired_dir, wind, airspeed: float) -> np.ndarray:
    """Heading whose airspeed vector plus ``wind`` points along ``desired_dir``."""
    g = np.asarray(desired_dir, dtype=float)
    g = g / np.linalg.norm(g)
    w = np.asarray(wind, dtype=float)
    w_perp = w - (w @ g) * g
    cross2 = (w_perp @ w_perp) / (airspeed * airspeed)
    if cross2 >= 1.0:
        return g
    h = -w_perp / airspeed + math.sqrt(1.0 - cross2) * g
    return h / np.linalg.norm(h)


def steer_action(agent: AgentState, direction, dt: float) -> np.ndarray:
    """Normalised action that turns ``agent`` toward ``direction`` as fast as its family allows."""
    yaw_d, pitch_d = angles_of(direction)
    spec = agent.dynamics
    if spec.family is Family.DIRECT_ANGLE:
        return np.array([wrap_pi(yaw_d) / math.pi, pitch_d / HALF_PI])
    e_yaw = wrap_pi(yaw_d - agent.yaw)
    e_pitch = pitch_d - agent.pitch
    if spec.family is Family.MISSILE_RATE:
        step = spec.max_turn_rate * dt
        return np.clip(np.array([e_yaw / step, e_pitch / step]), -1.0, 1.0)
    # angle-acceleration: rate that could still be braked to zero at the target angle
    out = []
    for err, rate in ((e_yaw, agent.yaw_rate), (e_pitch, agent.pitch_rate)):
        want = math.copysign(min(spec.max_turn_rate, math.sqrt(2.0 * spec.max_turn_accel * abs(err)), abs(err) / dt), err)
        out.append((want - rate) / (spec.max_turn_accel * dt))
    return np.clip(np.array(out), -1.0, 1.0)


def action_for_angles(yaw: float, pitch: float) -> np.ndarray:
    """Direct-angle action that reproduces ``(yaw, pitch)``."""
    return np.array([wrap_pi(yaw) / math.pi, pitch / HALF_PI])
