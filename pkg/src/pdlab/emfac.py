"""Embedded mean-field actor-critic with agent-level attention.

Pieces, bottom-up:

* ``refine_attention`` / ``mean_field_action`` / ``weighted_state``: the
  attention and aggregation rules, written for arbitrary leading batch axes.
* ``RepresentationNets``: shared action encoder ``E_a``, state decoder ``D_s``,
  attention net ``f_att`` and reward decoder ``D_R``, trained on auxiliary
  next-state and reward prediction.
* ``Learner``: per-agent actors and critics (no parameter sharing) with target
  copies and TD3-style target smoothing.
* ``train`` / ``evaluate``: the environment loop, learning curves and checkpoints.

Ablation switches in ``TrainConfig`` (``state_attention``, ``action_attention``,
``embedded_mean_field``) and the ``iac`` / ``mf`` algorithms all run through the
same code, so only the flagged computation differs.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import engine
from .config import GameConfig, TrainConfig
from .dynamics import FAMILY_INDEX, N_TYPES, dynamics_for_slot
from .neural import Adam, Mlp, huber, load_checkpoint, masked_softmax, mse, save_checkpoint, soft_update

log = logging.getLogger(__name__)

ACTION_DIM = 2
N_FAMILIES = 3
CURVE_FIELDS = ("step", "mean_reward", "success_rate", "collision_rate", "L1", "L2", "critic_loss")
EVAL_SEED_TAG = 7


class DivergenceError(RuntimeError):
    """A loss or parameter became non-finite during training."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# --- attention and aggregation ------------------------------------------------------


@dataclass
class AttentionWeights:
    raw: np.ndarray  # softmax over all valid entries
    refined: np.ndarray  # renormalized over the selected entries, zero elsewhere
    selected: np.ndarray  # boolean mask

    @property
    def selected_indices(self) -> list[int]:
        return [int(k) for k in np.flatnonzero(self.selected)]


def support_size(k: float, n: int, available: int, min_one: bool = True) -> int:
    s = int(math.floor(k * n + 1e-9))
    if min_one:
        s = max(1, s)
    return min(available, s)


def refine_attention(logits, k: float, n: int | None = None, mask=None, min_one: bool = True) -> AttentionWeights:
    """Keep the top ``floor(k n)`` logits (at least one), softmax over those only.

    ``n`` defaults to ``len(logits) + 1`` (agents including self). Ties go to
    the lower index. ``mask`` marks valid entries (e.g. living teammates); the
    support never exceeds the number of valid entries.
    """
    z = np.asarray(logits, dtype=float)
    if not 0.0 <= k <= 1.0:
        raise ValueError("k must lie in [0, 1]")
    width = z.shape[-1]
    n = width + 1 if n is None else n
    valid = np.ones(z.shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
    keyed = np.where(valid, z, -np.inf)
    order = np.argsort(-keyed, axis=-1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(width), axis=-1)
    s = int(math.floor(k * n + 1e-9))
    if min_one:
        s = max(1, s)
    support = np.minimum(valid.sum(axis=-1, keepdims=True), s)
    selected = (rank < support) & valid
    return AttentionWeights(masked_softmax(z, valid), masked_softmax(z, selected), selected)


def mean_field_action(high_actions, weights=None, mask=None):
    """``(1/N_i) sum_j w_j a_j`` over the neighborhood; plain mean when ``weights`` is None.

    ``high_actions`` has shape ``(..., N, d)``; ``weights`` and ``mask`` ``(..., N)``.
    Returns ``(ma, empty)`` where ``empty`` flags neighborhoods with no members
    (their ``ma`` is zero).
    """
    h = np.asarray(high_actions, dtype=float)
    valid = np.ones(h.shape[:-1], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    w = valid.astype(float) if weights is None else np.asarray(weights, dtype=float) * valid
    count = valid.sum(axis=-1)
    denom = np.maximum(count, 1)[..., None]
    ma = np.einsum("...n,...nd->...d", w, h) / denom
    return ma, count == 0


def weighted_state(state, weights, n_agents: int | None = None, offset: int = engine.SELF_DIM):
    """Scale each teammate's 3-block of the state by its weight; everything else unchanged."""
    s = np.asarray(state, dtype=float)
    w = np.asarray(weights, dtype=float)
    n_other = w.shape[-1] if n_agents is None else n_agents - 1
    if w.shape[-1] != n_other or s.shape[-1] < offset + engine.BLOCK * n_other:
        raise ValueError(f"state of length {s.shape[-1]} has no room for {w.shape[-1]} teammate blocks")
    out = s.copy()
    end = offset + engine.BLOCK * n_other
    blocks = out[..., offset:end].reshape(*s.shape[:-1], n_other, engine.BLOCK)
    out[..., offset:end] = (blocks * w[..., None]).reshape(*s.shape[:-1], -1)
    return out


def _weighted_state_grad(grad_out, state, n_other: int, offset: int = engine.SELF_DIM):
    """Gradient of ``weighted_state`` with respect to the weights."""
    end = offset + engine.BLOCK * n_other
    g = grad_out[..., offset:end].reshape(*grad_out.shape[:-1], n_other, engine.BLOCK)
    s = state[..., offset:end].reshape(*state.shape[:-1], n_other, engine.BLOCK)
    return (g * s).sum(axis=-1)


def _softmax_grad(w, grad_w):
    return w * (grad_w - np.sum(grad_w * w, axis=-1, keepdims=True))


def one_hot_types(types) -> np.ndarray:
    t = np.asarray(types, dtype=int)
    out = np.zeros(t.shape + (N_TYPES,))
    np.put_along_axis(out, t[..., None], 1.0, axis=-1)
    return out


def others_index(n: int) -> np.ndarray:
    """Row ``i`` lists the teammates of ``i`` in index order."""
    if n == 1:
        return np.zeros((1, 0), dtype=int)
    return np.array([[j for j in range(n) if j != i] for i in range(n)])


# --- replay ------------------------------------------------------------------------


class ReplayBuffer:
    """FIFO ring buffer of joint transitions with uniform sampling."""

    KEYS = ("s", "o", "a", "t", "r", "s2", "o2", "alive", "alive2", "done")

    def __init__(self, capacity: int, n: int, obs_dim: int, state_dim: int, batch_size: int = 256):
        self.capacity = int(capacity)
        self.batch_size = int(batch_size)
        self.size = 0
        self.ptr = 0
        c = self.capacity
        self.data = {
            "s": np.zeros((c, n, state_dim)),
            "o": np.zeros((c, n, obs_dim)),
            "a": np.zeros((c, n, ACTION_DIM)),
            "t": np.zeros((c, n), dtype=int),
            "r": np.zeros((c, n)),
            "s2": np.zeros((c, n, state_dim)),
            "o2": np.zeros((c, n, obs_dim)),
            "alive": np.zeros((c, n), dtype=bool),
            "alive2": np.zeros((c, n), dtype=bool),
            "done": np.zeros((c, n)),
        }
        self.inserted = 0  # total ever added; position of an entry is its insertion id mod capacity

    def __len__(self) -> int:
        return self.size

    def add(self, **tr) -> None:
        for k in self.KEYS:
            self.data[k][self.ptr] = tr[k]
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.inserted += 1

    def sample(self, rng: np.random.Generator, batch_size: int | None = None) -> dict:
        b = self.batch_size if batch_size is None else batch_size
        if self.size < max(b, self.batch_size):
            raise ValueError(f"buffer holds {self.size} transitions; need {max(b, self.batch_size)} before sampling")
        idx = rng.integers(0, self.size, b)
        return {k: v[idx] for k, v in self.data.items()}

    def all(self) -> dict:
        return {k: v[: self.size] for k, v in self.data.items()}


# --- networks ------------------------------------------------------------------------


class RepresentationNets:
    """Shared auxiliary networks.

    ``E_a``: (action, one-hot type) -> high-level action (tanh).
    ``D_s``: (own high action, mean-field high action, state) -> next state,
    predicted as the current state plus the network output so the action-driven
    part of the change is not swamped by the state itself.
    ``f_att``: state -> one logit per teammate.
    ``D_R``: (attention-weighted state, action) -> reward.
    """

    def __init__(self, n: int, state_dim: int, high_action_dim: int, hidden, rng: np.random.Generator, lr: float = 1e-3):
        H = high_action_dim
        hidden = list(hidden)
        self.n = n
        self.state_dim = state_dim
        self.high_action_dim = H
        self.E_a = Mlp([ACTION_DIM + N_TYPES, *hidden, H], "tanh", rng)
        self.D_s = Mlp([2 * H + state_dim, *hidden, state_dim], "identity", rng)
        self.f_att = Mlp([state_dim, *hidden, max(n - 1, 1)], "identity", rng)
        self.D_R = Mlp([state_dim + ACTION_DIM, *hidden, 1], "identity", rng)
        self.opt_state = Adam(lr)  # E_a + D_s
        self.opt_reward = Adam(lr)  # f_att + D_R
        self.others = others_index(n)

    def nets(self) -> dict[str, Mlp]:
        return {"E_a": self.E_a, "D_s": self.D_s, "f_att": self.f_att, "D_R": self.D_R}

    def encode_actions(self, actions, types) -> np.ndarray:
        """Apply ``E_a`` to every (action, type) pair; output has a trailing ``high_action_dim`` axis."""
        a = np.asarray(actions, dtype=float)
        x = np.concatenate([a, one_hot_types(types)], axis=-1)
        flat = x.reshape(-1, x.shape[-1])
        return self.E_a(flat).reshape(*a.shape[:-1], self.high_action_dim)

    def attention_logits(self, states) -> np.ndarray:
        s = np.asarray(states, dtype=float)
        return self.f_att(s.reshape(-1, s.shape[-1])).reshape(*s.shape[:-1], self.f_att.out_dim)

    def neighbor_mask(self, alive) -> np.ndarray:
        """``(B, n, n-1)``: teammate ``k`` of agent ``i`` is alive."""
        return np.asarray(alive, dtype=bool)[:, self.others]

    def predict_next_state(self, states, actions, types, alive) -> np.ndarray:
        """``s + D_s(a_hat_i, ma_i, s_i)`` with the uniform mean field over living teammates."""
        h = self.encode_actions(actions, types)
        ma = mean_field_action(h[:, self.others], mask=self.neighbor_mask(alive))[0]
        s = np.asarray(states, dtype=float)
        x = np.concatenate([h, ma, s], axis=-1)
        return s + self.D_s(x.reshape(-1, x.shape[-1])).reshape(s.shape)

    # L1: next-state prediction through the uniform mean field of embedded actions
    def state_loss(self, batch, backward: bool = False):
        s, a, t, s2 = batch["s"], batch["a"], batch["t"], batch["s2"]
        alive = batch["alive"]
        B, n = alive.shape
        H = self.high_action_dim
        enc_in = np.concatenate([a, one_hot_types(t)], axis=-1).reshape(B * n, -1)
        h_flat, cache_e = self.E_a.forward(enc_in)
        h = h_flat.reshape(B, n, H)
        nmask = self.neighbor_mask(alive)
        count = np.maximum(nmask.sum(-1), 1)  # (B, n)
        ma, _ = mean_field_action(h[:, self.others], mask=nmask)  # (B, n, H)
        x = np.concatenate([h, ma, s], axis=-1).reshape(B * n, -1)
        delta, cache_d = self.D_s.forward(x)
        pred = s.reshape(B * n, -1) + delta
        valid = alive.reshape(-1)
        if not valid.any():
            return 0.0, None
        loss, g_valid = huber(pred[valid], s2.reshape(B * n, -1)[valid])
        if not backward:
            return loss, None
        g = np.zeros_like(pred)
        g[valid] = g_valid
        gd, gx = self.D_s.backward(cache_d, g)
        gx = gx.reshape(B, n, -1)
        gh = gx[..., :H].copy()
        gma = gx[..., H : 2 * H] / count[..., None]
        for i in range(n):
            for kk, j in enumerate(self.others[i]):
                gh[:, j] += gma[:, i] * nmask[:, i, kk, None]
        ge, _ = self.E_a.backward(cache_e, gh.reshape(B * n, H))
        return loss, ge + gd

    # L2: reward prediction through softmax attention over teammates
    def reward_loss(self, batch, backward: bool = False):
        s, a, r = batch["s"], batch["a"], batch["r"]
        alive = batch["alive"]
        B, n = alive.shape
        sd = s.shape[-1]
        nmask = self.neighbor_mask(alive)
        z, cache_f = self.f_att.forward(s.reshape(B * n, sd))
        z = z.reshape(B, n, -1)
        if n == 1:
            w = np.zeros((B, 1, 0))
            s_hat = s
        else:
            w = masked_softmax(z, nmask)
            s_hat = weighted_state(s, w)
        x = np.concatenate([s_hat, a], axis=-1).reshape(B * n, -1)
        pred, cache_r = self.D_R.forward(x)
        valid = alive.reshape(-1)
        if not valid.any():
            return 0.0, None
        loss, g_valid = mse(pred[valid, 0], r.reshape(-1)[valid])
        if not backward:
            return loss, None
        g = np.zeros_like(pred)
        g[valid, 0] = g_valid
        gr, gx = self.D_R.backward(cache_r, g)
        if n == 1:
            gz = np.zeros((B * n, 1))
        else:
            gs_hat = gx[:, :sd].reshape(B, n, sd)
            gw = _weighted_state_grad(gs_hat, s, n - 1)
            gz = _softmax_grad(w, gw).reshape(B * n, -1)
        gf, _ = self.f_att.backward(cache_f, gz)
        return loss, gf + gr

    def train_step(self, batch) -> tuple[float, float]:
        """One Adam step on (E_a, D_s) for L1 and one on (f_att, D_R) for L2; returns the pre-step losses."""
        l1, g1 = self.state_loss(batch, backward=True)
        if g1 is not None:
            self.opt_state.step(self.E_a.params() + self.D_s.params(), g1)
        l2, g2 = self.reward_loss(batch, backward=True)
        if g2 is not None and self.n > 1:
            self.opt_reward.step(self.f_att.params() + self.D_R.params(), g2)
        elif g2 is not None:
            self.opt_reward.step(self.D_R.params(), g2[len(self.f_att.params()) :])
        return l1, l2


def train_representation(rep: RepresentationNets, batch) -> tuple[float, float]:
    return rep.train_step(batch)


# --- learner -------------------------------------------------------------------------


@dataclass
class CriticInputs:
    """Everything the critic of each agent sees, for introspection and tests."""

    x: np.ndarray  # (B, n, critic_in)
    state_weights: np.ndarray  # (B, n, n-1) multipliers applied to teammate blocks
    action_weights: np.ndarray  # (B, n, n-1) weights inside the mean-field sum
    a_hat: np.ndarray  # (B, n, d) own (embedded or raw) action
    ma: np.ndarray  # (B, n, d_ma)
    s_hat: np.ndarray  # (B, n, sd) or observations for independent learners


class Learner:
    """Per-agent actors and critics plus the shared representation nets."""

    def __init__(self, n: int, obs_dim: int, state_dim: int, types, cfg: TrainConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.n = n
        self.obs_dim = obs_dim
        self.state_dim = state_dim
        self.types = np.asarray(types, dtype=int)
        self.families = np.array([FAMILY_INDEX[dynamics_for_slot(i).family] for i in range(n)])
        self.independent = cfg.algo == "iac"
        self.raw_family_mf = cfg.algo == "mf" or not cfg.embedded_mean_field
        self.state_attention = cfg.state_attention and cfg.algo not in ("iac", "mf")
        self.action_attention = cfg.action_attention and cfg.algo not in ("iac", "mf")
        self.uses_encoder = not self.independent and not self.raw_family_mf
        self.uses_attention = self.state_attention or self.action_attention
        self.others = others_index(n)
        hidden = cfg.hidden_sizes
        self.rep = RepresentationNets(n, state_dim, cfg.high_action_dim, hidden, rng, cfg.representation_lr)
        H = cfg.high_action_dim
        if self.independent:
            cin = obs_dim + ACTION_DIM
        elif self.raw_family_mf:
            cin = state_dim + ACTION_DIM + ACTION_DIM * N_FAMILIES
        else:
            cin = state_dim + 2 * H
        self.critic_in = cin
        self.actors = [Mlp([obs_dim, *hidden, ACTION_DIM], "tanh", rng) for _ in range(n)]
        self.critics = [Mlp([cin, *hidden, 1], "identity", rng) for _ in range(n)]
        self.actor_targets = [a.copy() for a in self.actors]
        self.critic_targets = [c.copy() for c in self.critics]
        self.actor_opts = [Adam(cfg.actor_lr) for _ in range(n)]
        self.critic_opts = [Adam(cfg.critic_lr) for _ in range(n)]
        self.representation_frozen = False
        self.updates = 0

    # acting
    def act(self, obs, alive=None) -> np.ndarray:
        out = np.zeros((self.n, ACTION_DIM))
        for i in range(self.n):
            if alive is None or alive[i]:
                out[i] = self.actors[i](obs[i])
        return out

    def target_actions(self, o, rng: np.random.Generator | None) -> np.ndarray:
        out = np.stack([self.actor_targets[i](o[:, i]) for i in range(self.n)], axis=1)
        if rng is not None and self.cfg.policy_noise > 0:
            noise = np.clip(rng.normal(0.0, self.cfg.policy_noise, out.shape), -self.cfg.noise_clip, self.cfg.noise_clip)
            out = np.clip(out + noise, -1.0, 1.0)
        return out

    # critic inputs
    def critic_inputs(self, s, o, a, alive) -> CriticInputs:
        """Assemble ``(s_hat_i, a_hat_i, ma_i)`` for every agent with the frozen representation."""
        B, n = alive.shape
        if self.independent:
            x = np.concatenate([o, a], axis=-1)
            ones = np.ones((B, n, max(n - 1, 0)))
            return CriticInputs(x, ones, ones, a, np.zeros((B, n, 0)), o)
        nmask = self.rep.neighbor_mask(alive)
        if self.uses_attention and n > 1:
            logits = self.rep.attention_logits(s)
            refined = refine_attention(logits, self.cfg.k, n, nmask, self.cfg.min_one_selected).refined
        else:
            refined = nmask.astype(float)
        sw = refined if self.state_attention else np.ones((B, n, max(n - 1, 0)))
        aw = refined if self.action_attention else nmask.astype(float)
        s_hat = weighted_state(s, sw) if n > 1 else s
        if self.raw_family_mf:
            a_hat = a
            parts = []
            for f in range(N_FAMILIES):
                fam = (self.families[self.others] == f)[None]  # (1, n, n-1)
                parts.append(mean_field_action(a[:, self.others], aw * fam, nmask)[0])
            ma = np.concatenate(parts, axis=-1)
        else:
            a_hat = self.rep.encode_actions(a, np.broadcast_to(self.types, (B, n)))
            ma = mean_field_action(a_hat[:, self.others], aw, nmask)[0]
        x = np.concatenate([s_hat, a_hat, ma], axis=-1)
        return CriticInputs(x, sw, aw, a_hat, ma, s_hat)

    def critic_target(self, batch, rng: np.random.Generator | None) -> np.ndarray:
        """``y_i = r_i + gamma (1 - done_i) Q'_i(s_hat', E_a(pi'(o') + noise), ma')`` for all agents."""
        a2 = self.target_actions(batch["o2"], rng)
        ci = self.critic_inputs(batch["s2"], batch["o2"], a2, batch["alive2"])
        q2 = np.stack([self.critic_targets[i](ci.x[:, i])[:, 0] for i in range(self.n)], axis=1)
        return batch["r"] + self.cfg.gamma * (1.0 - batch["done"]) * q2

    def update_critic(self, batch, rng: np.random.Generator | None, y=None, ci: CriticInputs | None = None) -> float:
        if y is None:
            y = self.critic_target(batch, rng)
        if ci is None:
            ci = self.critic_inputs(batch["s"], batch["o"], batch["a"], batch["alive"])
        losses = []
        for i in range(self.n):
            rows = batch["alive"][:, i]
            if not rows.any():
                continue
            q, cache = self.critics[i].forward(ci.x[rows, i])
            loss, g = mse(q[:, 0], y[rows, i])
            grads, _ = self.critics[i].backward(cache, g[:, None])
            self.critic_opts[i].step(self.critics[i].params(), grads)
            losses.append(loss)
        return float(np.mean(losses)) if losses else 0.0

    def actor_grad(self, i: int, batch, ci: CriticInputs | None = None):
        """Objective ``mean Q_i`` and the actor gradient for ascending it (returned as a descent gradient)."""
        if ci is None:
            ci = self.critic_inputs(batch["s"], batch["o"], batch["a"], batch["alive"])
        rows = batch["alive"][:, i]
        o = batch["o"][rows, i]
        a, cache_a = self.actors[i].forward(o)
        if self.independent:
            x = np.concatenate([o, a], axis=-1)
            lo = self.obs_dim
        elif self.raw_family_mf:
            x = np.concatenate([ci.s_hat[rows, i], a, ci.ma[rows, i]], axis=-1)
            lo = self.state_dim
        else:
            enc_in = np.concatenate([a, one_hot_types(np.full(len(o), self.types[i]))], axis=-1)
            a_hat, cache_e = self.rep.E_a.forward(enc_in)
            x = np.concatenate([ci.s_hat[rows, i], a_hat, ci.ma[rows, i]], axis=-1)
            lo = self.state_dim
        q, cache_q = self.critics[i].forward(x)
        m = max(len(o), 1)
        _, gx = self.critics[i].backward(cache_q, -np.ones_like(q) / m)
        if self.uses_encoder:
            _, g_enc = self.rep.E_a.backward(cache_e, gx[:, lo : lo + self.cfg.high_action_dim])
            ga = g_enc[:, :ACTION_DIM]
        else:
            ga = gx[:, lo : lo + ACTION_DIM]
        grads, _ = self.actors[i].backward(cache_a, ga)
        return float(q.mean()) if len(o) else 0.0, grads

    def update_actor(self, batch, ci: CriticInputs | None = None) -> float:
        if ci is None:
            ci = self.critic_inputs(batch["s"], batch["o"], batch["a"], batch["alive"])
        objs = []
        for i in range(self.n):
            if not batch["alive"][:, i].any():
                continue
            obj, grads = self.actor_grad(i, batch, ci)
            self.actor_opts[i].step(self.actors[i].params(), grads)
            objs.append(obj)
        return float(np.mean(objs)) if objs else 0.0

    def soft_update_targets(self) -> None:
        for i in range(self.n):
            soft_update(self.critic_targets[i], self.critics[i], self.cfg.tau_critic)
            soft_update(self.actor_targets[i], self.actors[i], self.cfg.tau_actor)

    def needs_representation(self) -> bool:
        return self.uses_encoder or self.uses_attention

    def update(self, batch, rng: np.random.Generator) -> dict:
        """One Algorithm-1 iteration on a sampled batch."""
        out = {"L1": math.nan, "L2": math.nan}
        if self.needs_representation() and not self.representation_frozen:
            out["L1"], out["L2"] = self.rep.train_step(batch)
        # representation nets do not change below, so one assembly serves both updates
        ci = self.critic_inputs(batch["s"], batch["o"], batch["a"], batch["alive"])
        out["critic_loss"] = self.update_critic(batch, rng, ci=ci)
        self.updates += 1
        if self.updates % self.cfg.policy_delay == 0:
            out["actor_objective"] = self.update_actor(batch, ci)
            self.soft_update_targets()
        return out

    # persistence
    def nets(self) -> dict[str, Mlp]:
        d = dict(self.rep.nets())
        for i in range(self.n):
            d[f"actor_{i}"] = self.actors[i]
            d[f"critic_{i}"] = self.critics[i]
            d[f"actor_target_{i}"] = self.actor_targets[i]
            d[f"critic_target_{i}"] = self.critic_targets[i]
        return d

    def all_finite(self) -> bool:
        return all(net.all_finite() for net in self.nets().values())

    def optimizers(self) -> dict[str, Adam]:
        d = {"rep_state": self.rep.opt_state, "rep_reward": self.rep.opt_reward}
        for i in range(self.n):
            d[f"actor_{i}"] = self.actor_opts[i]
            d[f"critic_{i}"] = self.critic_opts[i]
        return d

    def load_nets(self, nets: dict[str, Mlp]) -> None:
        mine = self.nets()
        for name, net in nets.items():
            if name not in mine:
                continue
            for dst, src in zip(mine[name].params(), net.params()):
                if dst.shape != src.shape:
                    raise ValueError(f"{name}: checkpoint shape {src.shape} does not match {dst.shape}")
                dst[...] = src


# --- evaluation ----------------------------------------------------------------------


def eval_seed(game: GameConfig, episode: int) -> list[int]:
    """Evaluation episodes depend only on the game seed and the episode index (matched across algorithms)."""
    return [game.seed, EVAL_SEED_TAG, episode]


def learned_policy(learner: Learner):
    def policy(world, obs, rng):
        return learner.act(obs, ~world.defender_done)

    return policy


def rule_policy():
    from .baselines import rule_based_actions

    def policy(world, obs, rng):
        return rule_based_actions(world, rng)

    return policy


def run_episode(policy, game: GameConfig, seed, record: bool = False):
    """One episode; returns ``(per-agent reward sums, final world, trace or None)``."""
    env = engine.PerimeterEnv(game)
    env.rng = np.random.default_rng(seed)
    policy_rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), 1])
    obs, _ = env.reset(record=record)
    totals = np.zeros(game.n_defenders)
    while not env.world.defender_done.all():
        res = env.step(policy(env.world, obs, policy_rng))
        totals += res.rewards
        obs = res.observations
    return totals, env.world, env.trace


def evaluate(policy, game: GameConfig, episodes: int, trace_dir=None) -> dict:
    """Noise-free evaluation: mean per-agent episode reward, success and collision rates."""
    rewards, successes, collisions = [], [], []
    for e in range(episodes):
        totals, world, trace = run_episode(policy, game, eval_seed(game, e), record=trace_dir is not None)
        rewards.append(float(totals.mean()))
        successes.append(world.stats.captures / game.n_attackers)
        pairs = game.n_defenders * (game.n_defenders - 1) / 2
        collisions.append(world.stats.collisions / (max(world.stats.steps, 1) * pairs) if pairs else 0.0)
        if trace_dir is not None:
            engine.write_trace(trace, Path(trace_dir) / f"episode_{e:04d}.jsonl")
    return {
        "episodes": episodes,
        "mean_reward": float(np.mean(rewards)),
        "success_rate": float(np.mean(successes)),
        "collision_rate": float(np.mean(collisions)),
        "episode_rewards": rewards,
    }


def metrics_from_traces(traces: list[list[dict]], n_defenders: int, n_attackers: int) -> dict:
    """Recompute ``evaluate``'s metrics from exported JSON-lines traces."""
    rewards, successes, collisions = [], [], []
    pairs = n_defenders * (n_defenders - 1) / 2
    for records in traces:
        totals = np.zeros(n_defenders)
        caps = cols = 0
        for rec in records:
            totals += np.asarray(rec["rewards"])
            caps += len(rec["captures"])
            cols += len(rec["collisions"])
        rewards.append(float(totals.mean()))
        successes.append(caps / n_attackers)
        collisions.append(cols / (max(len(records), 1) * pairs) if pairs else 0.0)
    return {
        "episodes": len(traces),
        "mean_reward": float(np.mean(rewards)),
        "success_rate": float(np.mean(successes)),
        "collision_rate": float(np.mean(collisions)),
        "episode_rewards": rewards,
    }


# --- training loop -------------------------------------------------------------------


@dataclass
class TrainResult:
    curve: list[dict]
    learner: Learner | None
    initial: dict
    final: dict
    steps: int
    seconds: float
    files: list[str] = field(default_factory=list)


def _fmt(x) -> str:
    return repr(float(x)) if not isinstance(x, str) else x


def write_curve_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_FIELDS)
        for r in rows:
            w.writerow([int(r["step"])] + [_fmt(r[k]) for k in CURVE_FIELDS[1:]])


def read_curve_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def run_metadata(game: GameConfig, cfg: TrainConfig, **extra) -> dict:
    d = {"game": asdict(game), "train": asdict(cfg)}
    d["train"]["hidden_sizes"] = list(cfg.hidden_sizes)
    d.update(extra)
    return d


def _rng_state(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state)


def _set_rng_state(rng: np.random.Generator, state) -> None:
    rng.bit_generator.state = json.loads(str(state))


def save_training_state(path, learner: Learner, step: int, rngs: dict, curve: list[dict]) -> None:
    extra = {"step": step, "curve": json.dumps(curve), "frozen": int(learner.representation_frozen), "updates": learner.updates}
    for name, rng in rngs.items():
        extra[f"rng_{name}"] = _rng_state(rng)
    for name, opt in learner.optimizers().items():
        for k, v in opt.state_dict().items():
            extra[f"opt_{name}/{k}"] = v
    save_checkpoint(path, learner.nets(), extra)


def load_training_state(path, learner: Learner, rngs: dict) -> tuple[int, list[dict]]:
    nets, extra = load_checkpoint(path)
    learner.load_nets(nets)
    learner.representation_frozen = bool(int(extra["frozen"]))
    learner.updates = int(extra["updates"])
    for name, opt in learner.optimizers().items():
        prefix = f"opt_{name}/"
        sub = {k[len(prefix) :]: v for k, v in extra.items() if k.startswith(prefix)}
        if sub:
            opt.load_state_dict(sub)
    for name, rng in rngs.items():
        if f"rng_{name}" in extra:
            _set_rng_state(rng, extra[f"rng_{name}"])
    return int(extra["step"]), json.loads(str(extra["curve"]))


def load_learner(path, game: GameConfig, cfg: TrainConfig) -> Learner:
    learner = make_learner(game, cfg)
    nets, _ = load_checkpoint(path)
    learner.load_nets(nets)
    return learner


def make_learner(game: GameConfig, cfg: TrainConfig) -> Learner:
    n = game.n_defenders
    od = engine.observation_dim(n)
    sd = od if cfg.paradigm == "dtde" else engine.state_dim(n, game.n_attackers)
    types = [dynamics_for_slot(i).type_id for i in range(n)]
    return Learner(n, od, sd, types, cfg, np.random.default_rng([cfg.seed, 1]))


def _check_finite(learner: Learner, stats: dict, step: int, out_dir) -> None:
    bad = [k for k, v in stats.items() if isinstance(v, float) and not math.isnan(v) and not math.isfinite(v)]
    if bad or not learner.all_finite():
        diag = {"step": step, "losses": {k: float(v) for k, v in stats.items()}, "non_finite": bad or ["parameters"]}
        if out_dir is not None:
            with open(Path(out_dir) / "divergence.json", "w") as fh:
                json.dump(diag, fh, indent=2)
        raise DivergenceError(f"non-finite values at step {step}: {diag['non_finite']}", diag)


def train(
    game: GameConfig,
    cfg: TrainConfig,
    out_dir=None,
    resume=None,
    eval_episodes: int | None = None,
    progress=None,
) -> TrainResult:
    """Run Algorithm 1 (or a baseline variant) and return the learning curve.

    With ``out_dir`` set, writes ``curve.csv``, ``checkpoint.npz`` (refreshed at
    each evaluation) and ``run.json``. ``resume`` is a checkpoint path to
    continue from; the replay buffer restarts empty.
    """
    t0 = time.perf_counter()
    episodes = cfg.eval_episodes if eval_episodes is None else eval_episodes
    out = Path(out_dir) if out_dir is not None else None
    files: list[str] = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        meta = run_metadata(game, cfg)
        with open(out / "run.json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
        files.append("run.json")

    if cfg.algo == "rule":
        metrics = evaluate(rule_policy(), game, episodes)
        row = {"step": 0, **{k: metrics[k] for k in CURVE_FIELDS[1:4]}, "L1": math.nan, "L2": math.nan, "critic_loss": math.nan}
        if out is not None:
            write_curve_csv([row], out / "curve.csv")
            files.append("curve.csv")
        return TrainResult([row], None, metrics, metrics, 0, time.perf_counter() - t0, files)

    learner = make_learner(game, cfg)
    n = game.n_defenders
    dtde = cfg.paradigm == "dtde"
    buffer = ReplayBuffer(min(cfg.buffer_size, max(cfg.total_steps, cfg.batch_size)), n, learner.obs_dim, learner.state_dim, cfg.batch_size)
    rngs = {
        "env": np.random.default_rng([game.seed, cfg.seed, 2]),
        "explore": np.random.default_rng([cfg.seed, 3]),
        "sample": np.random.default_rng([cfg.seed, 4]),
    }
    env = engine.PerimeterEnv(game)
    env.rng = rngs["env"]
    freeze_step = int(cfg.freeze_fraction * cfg.total_steps)

    curve: list[dict] = []
    step = 0
    if resume is not None:
        step, curve = load_training_state(resume, learner, rngs)
        env.rng = rngs["env"]
    initial = None
    acc = {"L1": [], "L2": [], "critic_loss": []}

    def do_eval(at_step):
        metrics = evaluate(learned_policy(learner), game, episodes)
        row = {"step": at_step, **{k: metrics[k] for k in CURVE_FIELDS[1:4]}}
        for k, vals in acc.items():
            good = [v for v in vals if not math.isnan(v)]
            row[k] = float(np.mean(good)) if good else math.nan
            vals.clear()
        curve.append(row)
        if progress is not None:
            progress(row)
        if out is not None:
            write_curve_csv(curve, out / "curve.csv")
            save_training_state(out / "checkpoint.npz", learner, at_step, rngs, curve)
        return metrics

    if not curve:
        initial = do_eval(0)
    else:
        initial = {k: curve[0][k] for k in CURVE_FIELDS[1:4]}

    obs, states = env.reset()
    if dtde:
        states = obs
    while step < cfg.total_steps:
        alive = ~env.world.defender_done
        if step < cfg.warmup_steps and resume is None:
            actions = rngs["explore"].uniform(-1.0, 1.0, (n, ACTION_DIM))
        else:
            actions = learner.act(obs, alive)
            actions = np.clip(actions + rngs["explore"].normal(0.0, cfg.expl_noise, actions.shape), -1.0, 1.0)
        actions[~alive] = 0.0
        res = env.step(actions)
        obs2, states2 = res.observations, (res.observations if dtde else res.states)
        buffer.add(
            s=states, o=obs, a=actions, t=learner.types, r=res.rewards, s2=states2, o2=obs2,
            alive=alive, alive2=~res.dones, done=res.dones.astype(float),
        )
        obs, states = obs2, states2
        step += 1
        if env.world.defender_done.all():
            obs, states = env.reset()
            if dtde:
                states = obs

        if step >= freeze_step and not learner.representation_frozen:
            learner.representation_frozen = True
        if len(buffer) >= cfg.batch_size and step >= min(cfg.warmup_steps, cfg.total_steps) and step % cfg.update_every == 0:
            stats = learner.update(buffer.sample(rngs["sample"]), rngs["sample"])
            _check_finite(learner, stats, step, out)
            for k in acc:
                acc[k].append(stats[k])
        if step % cfg.eval_every == 0 and step < cfg.total_steps:
            do_eval(step)
    final = do_eval(step)
    if out is not None:
        files += ["curve.csv", "checkpoint.npz"]
    return TrainResult(curve, learner, initial, final, step, time.perf_counter() - t0, files)
