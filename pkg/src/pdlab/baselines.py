"""Comparison policies: scripted rule-based defense and two learned baselines.

The learned baselines reuse the EMFAC trainer with the relevant machinery
switched off, so environment, buffer, seeds and metrics are shared.
"""

from __future__ import annotations

import math
from enum import Enum

import numpy as np

from .config import TrainConfig, replace_config
from .dynamics import steer_action
from .engine import WorldState


class BaselineKind(str, Enum):
    RULE = "rule"
    INDEPENDENT_AC = "iac"
    PLAIN_MEAN_FIELD = "mf"


AVOID_FACTOR = 1.5


def rule_target(world: WorldState, i: int) -> np.ndarray:
    """Where rule-based defender ``i`` heads: its attacker's breach point."""
    j = world.assignment[i]
    if j < 0:
        return world.defenders[i].position.copy()
    return world.attacker_targets[j]


def rule_based_policy(world: WorldState, i: int, rng: np.random.Generator) -> np.ndarray:
    """Fly straight at the assigned attacker's breach point, ignoring wind.

    When a teammate is closer than ``1.5 * d_safe`` the heading is replaced by a
    random horizontal direction for this step.
    """
    me = world.defenders[i]
    cfg = world.config
    for q, other in enumerate(world.defenders):
        if q == i or world.defender_done[q]:
            continue
        if np.linalg.norm(other.position - me.position) < AVOID_FACTOR * cfg.d_safe:
            ang = rng.uniform(0.0, 2.0 * math.pi)
            return steer_action(me, np.array([math.cos(ang), math.sin(ang), 0.0]), cfg.dt)
    target = rule_target(world, i)
    direction = target - me.position
    if np.linalg.norm(direction) < 1e-12:
        return np.zeros(2)
    return steer_action(me, direction, cfg.dt)


def rule_based_actions(world: WorldState, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros((len(world.defenders), 2))
    for i in range(len(world.defenders)):
        if not world.defender_done[i]:
            out[i] = rule_based_policy(world, i, rng)
    return out


def independent_ac_config(train: TrainConfig) -> TrainConfig:
    """Per-agent actor-critic on raw (o_i, a_i): no encoder, no mean field, no attention."""
    return replace_config(train, algo="iac", embedded_mean_field=False, state_attention=False, action_attention=False)


def plain_mean_field_config(train: TrainConfig) -> TrainConfig:
    """Mean field over raw actions grouped by dynamics family, no attention."""
    return replace_config(train, algo="mf", embedded_mean_field=False, state_attention=False, action_attention=False)


def independent_ac(game, train: TrainConfig, **kwargs):
    from .emfac import train as run

    return run(game, independent_ac_config(train), **kwargs)


def plain_mean_field(game, train: TrainConfig, **kwargs):
    from .emfac import train as run

    return run(game, plain_mean_field_config(train), **kwargs)
