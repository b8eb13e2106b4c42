"""Multi-agent perimeter-defense simulator.

Defenders are controlled externally (one 2-vector action each); attackers fly
the scripted Nash strategy toward their optimal breach point. Defender ``i``
sees its own state, its teammates and its assigned attacker.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import assignment
from .config import ConfigError, GameConfig
from .dynamics import (
    N_TYPES,
    WIND_PROFILES,
    AgentState,
    angles_of,
    compensate_heading,
    deterministic_wind,
    dynamics_for_slot,
    heading_vector,
    integrate,
    steer_action,
    wind_at,
)
from .geometry import robust_breach

log = logging.getLogger(__name__)

SELF_DIM = 9
BLOCK = 3


def observation_dim(n_defenders: int) -> int:
    return SELF_DIM + BLOCK * (n_defenders - 1) + BLOCK


def state_dim(n_defenders: int, n_attackers: int) -> int:
    return observation_dim(n_defenders) + BLOCK * n_attackers


@dataclass
class EpisodeStats:
    captures: int = 0
    breaches: int = 0
    collisions: int = 0  # defender pairs closer than d_safe, counted per step
    steps: int = 0
    ignored_actions: int = 0


@dataclass
class WorldState:
    defenders: list[AgentState]
    attackers: list[AgentState]
    config: GameConfig
    step_index: int = 0
    defender_done: np.ndarray = None
    attacker_done: np.ndarray = None
    assignment: np.ndarray = None  # defender index -> attacker index (-1 if none)
    attacker_targets: np.ndarray = None  # current breach point of each attacker
    stats: EpisodeStats = field(default_factory=EpisodeStats)
    attacker_outcome: list = None  # None, "captured" or "breached"

    def __post_init__(self):
        n, m = len(self.defenders), len(self.attackers)
        if self.defender_done is None:
            self.defender_done = np.zeros(n, dtype=bool)
        if self.attacker_done is None:
            self.attacker_done = np.zeros(m, dtype=bool)
        if self.assignment is None:
            self.assignment = np.full(n, -1, dtype=int)
        if self.attacker_targets is None:
            self.attacker_targets = np.zeros((m, 3))
        if self.attacker_outcome is None:
            self.attacker_outcome = [None] * m

    @property
    def all_done(self) -> bool:
        return bool(self.defender_done.all() and self.attacker_done.all())

    def copy(self) -> "WorldState":
        return WorldState(
            defenders=[a.copy() for a in self.defenders],
            attackers=[a.copy() for a in self.attackers],
            config=self.config,
            step_index=self.step_index,
            defender_done=self.defender_done.copy(),
            attacker_done=self.attacker_done.copy(),
            assignment=self.assignment.copy(),
            attacker_targets=self.attacker_targets.copy(),
            stats=EpisodeStats(**vars(self.stats)),
            attacker_outcome=list(self.attacker_outcome),
        )

    def target_distance(self, i: int) -> float:
        j = self.assignment[i]
        if j < 0:
            return 0.0
        return float(np.linalg.norm(self.defenders[i].position - self.attackers[j].position))


@dataclass
class RewardTerms:
    total: float
    task: float
    guide: float
    collide: float


@dataclass
class StepResult:
    observations: np.ndarray  # (n_defenders, obs_dim)
    states: np.ndarray  # (n_defenders, state_dim), critic input
    rewards: np.ndarray  # (n_defenders,)
    terms: list[RewardTerms]
    dones: np.ndarray  # per defender, after this step
    terminal: np.ndarray  # done because of capture/breach, not the horizon
    info: dict


# --- geometry helpers ----------------------------------------------------------


def body_frame(yaw: float, pitch: float) -> np.ndarray:
    """Rows are the body axes (forward, left, up) expressed in the world frame."""
    cy, sy, cp, sp = math.cos(yaw), math.sin(yaw), math.cos(pitch), math.sin(pitch)
    return np.array([[cp * cy, cp * sy, sp], [-sy, cy, 0.0], [-sp * cy, -sp * sy, cp]])


def relative_polar(agent: AgentState, point) -> tuple[float, float, float]:
    """Distance, relative pitch and relative yaw of ``point`` seen from ``agent``'s body frame."""
    rel = np.asarray(point, dtype=float) - agent.position
    d = float(np.linalg.norm(rel))
    if d == 0.0:
        return 0.0, 0.0, 0.0
    b = body_frame(agent.yaw, agent.pitch) @ rel
    return d, math.atan2(b[2], math.hypot(b[0], b[1])), math.atan2(b[1], b[0])


# --- reset / assignment -------------------------------------------------------


def _sample_ball(rng, r_max):
    while True:
        p = rng.uniform(-r_max, r_max, 3)
        p[2] = abs(p[2])
        if np.linalg.norm(p) < r_max:
            return p


def _sample_shell(rng, r_min, r_max):
    while True:
        p = rng.uniform(-r_max, r_max, 3)
        p[2] = abs(p[2])
        if r_min <= np.linalg.norm(p) <= r_max:
            return p


def reset(config: GameConfig, rng: np.random.Generator) -> WorldState:
    """Fresh episode: defenders inside, attackers in an outer shell, all pairwise >= d_safe apart."""
    R = config.R
    placed: list[np.ndarray] = []

    def place(sampler):
        for _ in range(config.max_spawn_tries):
            p = sampler()
            if all(np.linalg.norm(p - q) >= config.d_safe for q in placed):
                placed.append(p)
                return p
        raise ConfigError("d_safe", f"could not place agents after {config.max_spawn_tries} tries")

    defenders = []
    for i in range(config.n_defenders):
        p = place(lambda: _sample_ball(rng, config.defender_radius_max * R))
        spec = dynamics_for_slot(i, config.defender_speed_scale)
        yaw = float(rng.uniform(0.0, 2 * math.pi))
        defenders.append(AgentState(p, spec.max_speed * heading_vector(yaw, 0.0), yaw, 0.0, spec, "defender"))
    attackers = []
    for j in range(config.n_attackers):
        p = place(lambda: _sample_shell(rng, config.attacker_radius_min * R, config.attacker_radius_max * R))
        spec = dynamics_for_slot(config.n_defenders + j, config.attacker_speed_scale)
        yaw, pitch = angles_of(-p)
        attackers.append(AgentState(p, spec.max_speed * heading_vector(yaw, pitch), yaw, pitch, spec, "attacker"))
    world = WorldState(defenders, attackers, config)
    reassign(world)
    update_attacker_targets(world)
    return world


def world_cost_matrix(world: WorldState) -> tuple[np.ndarray, list[int], list[int]]:
    """Payoff-time costs between living defenders (rows) and living attackers (columns).

    Counts normally match; if a single step removed unequal numbers the matrix
    is padded with zero-cost dummies, whose indices are reported as -1.
    """
    d_idx = [i for i, done in enumerate(world.defender_done) if not done]
    a_idx = [j for j, done in enumerate(world.attacker_done) if not done]
    R = world.config.R
    m = max(len(d_idx), len(a_idx))
    costs = np.zeros((m, m))
    for r, i in enumerate(d_idx):
        d = world.defenders[i]
        for c, j in enumerate(a_idx):
            a = world.attackers[j]
            costs[r, c] = assignment.pair_cost(d.position, d.dynamics.max_speed, a.position, a.dynamics.max_speed, R)
    d_idx = d_idx + [-1] * (m - len(d_idx))
    a_idx = a_idx + [-1] * (m - len(a_idx))
    return costs, d_idx, a_idx


def reassign(world: WorldState) -> None:
    """Hungarian matching over the living agents."""
    world.assignment[:] = -1
    if world.defender_done.all() or world.attacker_done.all():
        return
    costs, d_idx, a_idx = world_cost_matrix(world)
    perm, _ = assignment.hungarian(costs)
    for r, c in enumerate(perm):
        if d_idx[r] >= 0:
            world.assignment[d_idx[r]] = a_idx[c]


# --- attackers -----------------------------------------------------------------


def attacker_opponent(world: WorldState, j: int) -> int:
    """Assigned defender if alive, else the nearest living defender, else -1."""
    hits = np.nonzero(world.assignment == j)[0]
    for i in hits:
        if not world.defender_done[i]:
            return int(i)
    alive = [i for i, d in enumerate(world.defender_done) if not d]
    if not alive:
        return -1
    pos = world.attackers[j].position
    return min(alive, key=lambda i: np.linalg.norm(world.defenders[i].position - pos))


def attacker_breach_point(world: WorldState, j: int) -> np.ndarray:
    att = world.attackers[j]
    R = world.config.R
    i = attacker_opponent(world, j)
    if i < 0:
        p = att.position.copy()
        p[2] = max(p[2], 0.0)
        return R * p / np.linalg.norm(p)
    d = world.defenders[i]
    v = att.dynamics.max_speed / d.dynamics.max_speed
    b, _ = robust_breach(d.position, att.position, v, R)
    return b


def update_attacker_targets(world: WorldState) -> None:
    for j in range(len(world.attackers)):
        if not world.attacker_done[j]:
            world.attacker_targets[j] = attacker_breach_point(world, j)


def attacker_policy(world: WorldState, j: int, compensate_wind: bool = True) -> np.ndarray:
    """Steer attacker ``j`` toward its optimal breach point, correcting for the known wind."""
    att = world.attackers[j]
    target = world.attacker_targets[j]
    direction = target - att.position
    if np.linalg.norm(direction) < 1e-12:
        return np.zeros(2)
    if compensate_wind:
        wind = world.config.wind_scale * deterministic_wind(att.position, att.velocity, WIND_PROFILES[att.dynamics.wind_profile_id])
        direction = compensate_heading(direction, wind, att.dynamics.max_speed)
    return steer_action(att, direction, world.config.dt)


# --- observations ------------------------------------------------------------


def observe(world: WorldState, i: int) -> np.ndarray:
    """Self (9) + teammates (3 each, index order) + assigned attacker (3)."""
    n = len(world.defenders)
    out = np.zeros(observation_dim(n))
    me = world.defenders[i]
    out[0:3] = me.position
    out[3] = me.yaw
    out[4] = me.pitch
    out[5:8] = me.velocity
    out[8] = me.dynamics.type_id / N_TYPES
    k = SELF_DIM
    for j in range(n):
        if j == i:
            continue
        if not world.defender_done[j]:
            out[k : k + 3] = relative_polar(me, world.defenders[j].position)
        k += BLOCK
    a = world.assignment[i]
    if a >= 0 and not world.attacker_done[a]:
        out[k : k + 3] = relative_polar(me, world.attackers[a].position)
    return out


def global_state(world: WorldState, i: int) -> np.ndarray:
    """Critic input for defender ``i``: its observation plus every attacker's offset (zeros once resolved)."""
    obs = observe(world, i)
    extra = np.zeros(BLOCK * len(world.attackers))
    me = world.defenders[i].position
    for j, att in enumerate(world.attackers):
        if not world.attacker_done[j]:
            extra[BLOCK * j : BLOCK * j + 3] = att.position - me
    return np.concatenate([obs, extra])


def all_observations(world: WorldState) -> np.ndarray:
    n = len(world.defenders)
    return np.stack([observe(world, i) for i in range(n)])


def all_states(world: WorldState) -> np.ndarray:
    n, m = len(world.defenders), len(world.attackers)
    return np.stack([global_state(world, i) for i in range(n)]).reshape(n, state_dim(n, m))


# --- rewards -------------------------------------------------------------------


def reward(prev: WorldState, nxt: WorldState, i: int, captured_target: bool = False) -> RewardTerms:
    """Per-step reward of defender ``i`` from the pair of worlds around one step.

    The target is the attacker assigned in ``prev``. ``captured_target`` marks a
    capture of that attacker inside the step (closest approach below the
    threshold), which the end-of-step distance alone can miss.
    """
    cfg = prev.config
    j = prev.assignment[i]
    task = cfg.alpha1
    guide = 0.0
    if j >= 0:
        d_prev = float(np.linalg.norm(prev.defenders[i].position - prev.attackers[j].position))
        d_next = float(np.linalg.norm(nxt.defenders[i].position - nxt.attackers[j].position))
        if captured_target or d_next < cfg.interception_threshold:
            task += cfg.alpha2
        guide = cfg.alpha3 * (d_prev - d_next)
    hits = 0
    for q in range(len(prev.defenders)):
        if q == i or prev.defender_done[q]:
            continue
        if np.linalg.norm(nxt.defenders[i].position - nxt.defenders[q].position) < cfg.d_safe:
            hits += 1
    collide = cfg.alpha4 * hits
    return RewardTerms(task + guide + collide, task, guide, collide)


def _closest_approach(p0, p1, q0, q1) -> float:
    """Minimum distance between two points moving linearly over the unit interval."""
    r0 = p0 - q0
    dr = (p1 - q1) - r0
    den = dr @ dr
    t = 0.0 if den == 0 else min(1.0, max(0.0, -(r0 @ dr) / den))
    return float(np.linalg.norm(r0 + t * dr))


# --- step ------------------------------------------------------------------------


def step(world: WorldState, joint_actions, rng: np.random.Generator) -> tuple[WorldState, StepResult]:
    """Advance the world by one ``dt``; returns the new world and the defenders' step result.

    Actions for finished defenders are ignored (counted in ``stats.ignored_actions``).
    """
    cfg = world.config
    acts = np.asarray(joint_actions, dtype=float).reshape(len(world.defenders), 2)
    nxt = world.copy()
    nxt.step_index += 1
    nxt.stats.steps += 1

    for i, agent in enumerate(world.defenders):
        if world.defender_done[i]:
            if np.any(acts[i] != 0):
                nxt.stats.ignored_actions += 1
            continue
        w = cfg.wind_scale * wind_at(agent, WIND_PROFILES[agent.dynamics.wind_profile_id], rng)
        nxt.defenders[i] = integrate(agent, acts[i], w, cfg.dt)
    for j, agent in enumerate(world.attackers):
        if world.attacker_done[j]:
            continue
        a = attacker_policy(world, j)
        w = cfg.wind_scale * wind_at(agent, WIND_PROFILES[agent.dynamics.wind_profile_id], rng)
        nxt.attackers[j] = integrate(agent, a, w, cfg.dt)

    events = {"captures": [], "breaches": [], "collisions": []}
    # captures: closest approach within the step, each agent used at most once
    pairs = []
    for i in range(len(world.defenders)):
        if world.defender_done[i]:
            continue
        for j in range(len(world.attackers)):
            if world.attacker_done[j]:
                continue
            d = _closest_approach(world.defenders[i].position, nxt.defenders[i].position, world.attackers[j].position, nxt.attackers[j].position)
            if d < cfg.epsilon:
                pairs.append((d, i, j))
    captured_by = {}
    for d, i, j in sorted(pairs):
        if i in captured_by.values() or j in captured_by:
            continue
        captured_by[j] = i
    for j, i in sorted(captured_by.items()):
        nxt.attacker_done[j] = True
        nxt.defender_done[i] = True
        nxt.attacker_outcome[j] = "captured"
        nxt.stats.captures += 1
        events["captures"].append((i, j))

    R = cfg.R
    for j in range(len(world.attackers)):
        if world.attacker_done[j] or nxt.attacker_done[j]:
            continue
        if np.linalg.norm(nxt.attackers[j].position) <= R + cfg.delta:
            nxt.attacker_done[j] = True
            nxt.attacker_outcome[j] = "breached"
            nxt.stats.breaches += 1
            events["breaches"].append(j)
            for i in np.nonzero(world.assignment == j)[0]:
                nxt.defender_done[i] = True

    alive_prev = [i for i in range(len(world.defenders)) if not world.defender_done[i]]
    for x in range(len(alive_prev)):
        for y in range(x + 1, len(alive_prev)):
            a, b = alive_prev[x], alive_prev[y]
            if np.linalg.norm(nxt.defenders[a].position - nxt.defenders[b].position) < cfg.d_safe:
                nxt.stats.collisions += 1
                events["collisions"].append((a, b))

    n = len(world.defenders)
    rewards = np.zeros(n)
    terms = [RewardTerms(0.0, 0.0, 0.0, 0.0) for _ in range(n)]
    for i in alive_prev:
        j = world.assignment[i]
        terms[i] = reward(world, nxt, i, captured_target=captured_by.get(j) == i if j >= 0 else False)
        rewards[i] = terms[i].total

    terminal = nxt.defender_done.copy()
    if nxt.attacker_done.all():
        nxt.defender_done[:] = True
        terminal[:] = True
    if nxt.step_index >= cfg.horizon:
        nxt.defender_done[:] = True
        nxt.attacker_done[:] = True

    if (nxt.defender_done != world.defender_done).any() or (nxt.attacker_done != world.attacker_done).any():
        reassign(nxt)
    update_attacker_targets(nxt)

    # a defender whose assigned attacker is gone with nobody left to chase is finished
    for i in range(n):
        if not nxt.defender_done[i] and nxt.assignment[i] < 0:
            nxt.defender_done[i] = True

    result = StepResult(
        observations=all_observations(nxt),
        states=all_states(nxt),
        rewards=rewards,
        terms=terms,
        dones=nxt.defender_done.copy(),
        terminal=terminal,
        info={"events": events, "alive_before": np.array([not d for d in world.defender_done])},
    )
    return nxt, result


# --- convenience wrapper -----------------------------------------------------


class PerimeterEnv:
    """Holds a world and its random stream; ``reset`` / ``step`` mirror the functional API."""

    def __init__(self, config: GameConfig, seed: int | None = None):
        self.config = config
        self.rng = np.random.default_rng(config.seed if seed is None else seed)
        self.world: WorldState | None = None
        self.trace: list[dict] | None = None

    @property
    def n(self) -> int:
        return self.config.n_defenders

    def reset(self, seed: int | None = None, record: bool = False):
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.world = reset(self.config, self.rng)
        self.trace = [] if record else None
        return all_observations(self.world), all_states(self.world)

    def step(self, actions) -> StepResult:
        prev = self.world
        self.world, res = step(prev, actions, self.rng)
        if self.trace is not None:
            self.trace.append(trace_record(prev, self.world, actions, res))
        return res

    @property
    def alive(self) -> np.ndarray:
        return ~self.world.defender_done


def trace_record(prev: WorldState, nxt: WorldState, actions, res: StepResult) -> dict:
    return {
        "step": nxt.step_index,
        "defenders": [a.position.tolist() for a in nxt.defenders],
        "attackers": [a.position.tolist() for a in nxt.attackers],
        "actions": np.asarray(actions, dtype=float).tolist(),
        "alive_before": res.info["alive_before"].tolist(),
        "rewards": res.rewards.tolist(),
        "terms": [[t.task, t.guide, t.collide] for t in res.terms],
        "captures": [list(map(int, c)) for c in res.info["events"]["captures"]],
        "breaches": [int(b) for b in res.info["events"]["breaches"]],
        "collisions": [list(map(int, c)) for c in res.info["events"]["collisions"]],
        "done": bool(nxt.defender_done.all()),
    }


def write_trace(records: list[dict], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def read_trace(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
