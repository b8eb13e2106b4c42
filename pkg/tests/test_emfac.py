import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdlab import emfac, engine
from pdlab.config import GameConfig, TrainConfig
from pdlab.emfac import (
    DivergenceError,
    RepresentationNets,
    ReplayBuffer,
    make_learner,
    mean_field_action,
    refine_attention,
    support_size,
    weighted_state,
)
from pdlab.neural import Mlp

TINY = dict(hidden_sizes=(16,), batch_size=32, warmup_steps=64, total_steps=200, eval_every=100, eval_episodes=2)


def tiny(**kw):
    return TrainConfig(**{**TINY, **kw})


def random_batch(rng, n=3, B=12, game=None):
    game = game or GameConfig(n_defenders=n, n_attackers=n)
    od, sd = engine.observation_dim(n), engine.state_dim(n, n)
    alive = rng.random((B, n)) > 0.2
    return {
        "s": rng.normal(size=(B, n, sd)),
        "o": rng.normal(size=(B, n, od)),
        "a": rng.uniform(-1, 1, (B, n, 2)),
        "t": np.broadcast_to(np.arange(n) * 5 % 16, (B, n)).copy(),
        "r": rng.normal(size=(B, n)),
        "s2": rng.normal(size=(B, n, sd)),
        "o2": rng.normal(size=(B, n, od)),
        "alive": alive,
        "alive2": alive & (rng.random((B, n)) > 0.2),
        "done": (rng.random((B, n)) > 0.7).astype(float),
    }


# --- attention refinement ----------------------------------------------------------------


def test_refine_keeps_top_half_of_five():
    w = refine_attention(np.log([0.5, 0.1, 0.3, 0.05]), k=0.5, n=5)
    assert w.selected_indices == [0, 2]
    assert w.refined[0] == pytest.approx(0.625)
    assert w.refined[2] == pytest.approx(0.375)
    assert w.refined.sum() == pytest.approx(1.0)


def test_refine_support_rounds_down_with_float_guard():
    # 0.6 * 5 is 2.9999999999999996 in floating point
    w = refine_attention(np.zeros(4), k=0.6, n=5)
    assert w.selected.sum() == 3
    assert support_size(0.6, 5, 4) == 3


def test_refine_min_one_and_k_zero():
    assert refine_attention(np.array([1.0, 2.0]), k=0.1, n=3).selected_indices == [1]
    w = refine_attention(np.array([1.0, 2.0]), k=0.0, n=3, min_one=False)
    assert not w.selected.any() and np.all(w.refined == 0.0)


def test_refine_full_support_equals_softmax():
    z = np.array([0.3, -1.0, 2.0])
    w = refine_attention(z, k=1.0, n=4)
    assert np.allclose(w.refined, np.exp(z) / np.exp(z).sum())


def test_refine_ties_go_to_lower_index():
    assert refine_attention(np.zeros(4), k=0.4, n=5).selected_indices == [0, 1]


def test_refine_respects_mask():
    w = refine_attention(np.array([5.0, 1.0, 0.0]), k=1.0, n=4, mask=np.array([False, True, True]))
    assert w.selected_indices == [1, 2]
    assert w.refined[0] == 0.0


def test_refine_rejects_bad_k():
    with pytest.raises(ValueError):
        refine_attention(np.zeros(2), k=1.5)


# --- aggregation ------------------------------------------------------------------


def test_mean_field_matches_loop(rng):
    h = rng.normal(size=(4, 3))
    w = rng.random(4)
    mask = np.array([True, False, True, True])
    ma, empty = mean_field_action(h, w, mask)
    ref = sum(w[j] * h[j] for j in range(4) if mask[j]) / 3
    assert np.allclose(ma, ref) and not empty


def test_mean_field_uniform_weights_give_plain_mean(rng):
    h = rng.normal(size=(5, 2))
    assert np.allclose(mean_field_action(h)[0], h.mean(axis=0))


def test_mean_field_empty_neighbourhood():
    ma, empty = mean_field_action(np.ones((2, 3)), mask=np.zeros(2, dtype=bool))
    assert empty and np.all(ma == 0.0)


def test_weighted_state_scales_only_teammate_blocks(rng):
    s = rng.normal(size=engine.state_dim(3, 3))
    w = np.array([0.25, 2.0])
    out = weighted_state(s, w)
    k = engine.SELF_DIM
    assert np.array_equal(out[:k], s[:k])
    assert np.allclose(out[k : k + 3], 0.25 * s[k : k + 3])
    assert np.allclose(out[k + 3 : k + 6], 2.0 * s[k + 3 : k + 6])
    assert np.array_equal(out[k + 6 :], s[k + 6 :])


def test_weighted_state_shape_check():
    with pytest.raises(ValueError):
        weighted_state(np.zeros(10), np.ones(2))


# --- replay --------------------------------------------------------------------------


def fill(buf, n, count, start=0):
    for k in range(start, start + count):
        buf.add(s=np.full((n, 4), k), o=np.zeros((n, 3)), a=np.zeros((n, 2)), t=np.zeros(n), r=np.full(n, k),
                s2=np.zeros((n, 4)), o2=np.zeros((n, 3)), alive=np.ones(n), alive2=np.ones(n), done=np.zeros(n))


def test_replay_fifo_eviction():
    buf = ReplayBuffer(5, 2, 3, 4, batch_size=2)
    fill(buf, 2, 8)
    assert len(buf) == 5
    assert sorted(buf.all()["r"][:, 0]) == [3, 4, 5, 6, 7]


def test_replay_refuses_small_sample(rng):
    buf = ReplayBuffer(10, 2, 3, 4, batch_size=4)
    fill(buf, 2, 3)
    with pytest.raises(ValueError):
        buf.sample(rng)
    fill(buf, 2, 1, start=3)
    assert buf.sample(rng)["s"].shape == (4, 2, 4)


# --- representation losses ---------------------------------------------------------------


def numeric_grads(loss_fn, params, h=1e-6):
    out = []
    for p in params:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = loss_fn()
            p[idx] = old - h
            down = loss_fn()
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


@pytest.mark.parametrize("which", ["state", "reward"])
def test_representation_gradients_match_finite_differences(which, rng):
    n = 3
    sd = engine.state_dim(n, n)
    rep = RepresentationNets(n, sd, 2, (5,), rng)
    batch = random_batch(rng, n, B=6)
    batch["s2"] *= 0.05  # keep most Huber residuals on the quadratic side
    if which == "state":
        fn, params = rep.state_loss, rep.E_a.params() + rep.D_s.params()
    else:
        fn, params = rep.reward_loss, rep.f_att.params() + rep.D_R.params()
    _, grads = fn(batch, backward=True)
    num = numeric_grads(lambda: fn(batch)[0], params)
    for a, b in zip(grads, num):
        assert np.allclose(a, b, atol=1e-6, rtol=1e-4)


def test_representation_losses_decrease_on_fixed_batch(rng):
    n = 3
    rep = RepresentationNets(n, engine.state_dim(n, n), 4, (32,), rng, lr=3e-3)
    batch = random_batch(rng, n, B=32)
    batch["s2"] = 0.5 * batch["s"] + 0.1 * batch["a"][..., :1]
    l1_0, l2_0 = rep.train_step(batch)
    for _ in range(400):
        l1, l2 = rep.train_step(batch)
    assert l1 < 0.1 * l1_0
    assert l2 < 0.5 * l2_0


def test_state_decoder_overfits_real_transitions():
    game = GameConfig()
    env = engine.PerimeterEnv(game)
    env.rng = np.random.default_rng(3)
    rng = np.random.default_rng(4)
    n = game.n_defenders
    rows = {k: [] for k in ("s", "a", "s2", "alive")}
    obs, states = env.reset()
    while len(rows["s"]) < 64:
        alive = ~env.world.defender_done
        a = rng.uniform(-1, 1, (n, 2))
        res = env.step(a)
        for k, v in zip(rows, (states, a, res.states, alive)):
            rows[k].append(v)
        states = res.states
        if env.world.defender_done.all():
            obs, states = env.reset()
    batch = {k: np.array(v) for k, v in rows.items()}
    batch["t"] = np.broadcast_to(make_learner(game, TrainConfig()).types, batch["alive"].shape)
    batch["r"] = np.zeros(batch["alive"].shape)
    rep = RepresentationNets(n, batch["s"].shape[-1], 4, (64, 64), np.random.default_rng(0), lr=3e-3)
    initial = rep.state_loss(batch)[0]
    for _ in range(1500):
        rep.train_step(batch)
    assert rep.state_loss(batch)[0] < 0.1 * initial
    pred = rep.predict_next_state(batch["s"], batch["a"], batch["t"], batch["alive"])
    residual = np.abs(pred - batch["s2"])[batch["alive"]]
    assert np.mean(residual) < 0.1 * np.mean(np.abs(batch["s2"] - batch["s"])[batch["alive"]])


# --- learner ------------------------------------------------------------------------------


def test_critic_target_recomputed_by_hand(rng):
    game = GameConfig()
    learner = make_learner(game, tiny())
    batch = random_batch(rng)
    y = learner.critic_target(batch, None)
    a2 = np.stack([learner.actor_targets[i](batch["o2"][:, i]) for i in range(3)], axis=1)
    ci = learner.critic_inputs(batch["s2"], batch["o2"], a2, batch["alive2"])
    for b in range(len(y)):
        for i in range(3):
            q = learner.critic_targets[i](ci.x[b, i])[0]
            assert y[b, i] == pytest.approx(batch["r"][b, i] + 0.99 * (1 - batch["done"][b, i]) * q, abs=1e-12)


def test_terminal_or_zero_discount_target_is_reward(rng):
    learner = make_learner(GameConfig(), tiny(gamma=1e-300))
    batch = random_batch(rng)
    assert np.allclose(learner.critic_target(batch, rng), batch["r"], atol=1e-12)
    learner = make_learner(GameConfig(), tiny())
    batch["done"][:] = 1.0
    assert np.array_equal(learner.critic_target(batch, rng), batch["r"])


def test_actor_climbs_fixed_critic_to_its_peak():
    # critic Q = -|a_0 - 0.7| - |a_1 + 0.2| built by hand on top of independent (o, a) inputs
    game = GameConfig(n_defenders=1, n_attackers=1)
    learner = make_learner(game, tiny(algo="iac", actor_lr=1e-2))
    od = learner.obs_dim
    critic = Mlp([od + 2, 4, 1])
    W = np.zeros((od + 2, 4))
    W[od, 0], W[od, 1], W[od + 1, 2], W[od + 1, 3] = 1.0, -1.0, 1.0, -1.0
    critic.weights = [W, np.zeros((4, 1)) - 1.0]
    critic.biases = [np.array([-0.7, 0.7, 0.2, -0.2]), np.zeros(1)]
    learner.critics[0] = critic
    rng = np.random.default_rng(0)
    batch = {"s": np.zeros((16, 1, learner.state_dim)), "o": rng.normal(size=(16, 1, od)) * 0.1, "a": np.zeros((16, 1, 2)),
             "alive": np.ones((16, 1), dtype=bool)}
    for _ in range(1500):
        learner.update_actor(batch)
    out = learner.actors[0](batch["o"][:, 0])
    assert np.all(np.abs(out[:, 0] - 0.7) < 0.01)
    assert np.all(np.abs(out[:, 1] + 0.2) < 0.01)


def test_update_changes_only_expected_networks(rng):
    learner = make_learner(GameConfig(), tiny(policy_delay=2))
    before = {k: [p.copy() for p in v.params()] for k, v in learner.nets().items()}
    learner.update(random_batch(rng), rng)
    changed = {k for k, v in learner.nets().items() if any(not np.array_equal(a, b) for a, b in zip(v.params(), before[k]))}
    assert changed == {"E_a", "D_s", "f_att", "D_R", "critic_0", "critic_1", "critic_2"}
    learner.update(random_batch(rng), rng)
    changed = {k for k, v in learner.nets().items() if any(not np.array_equal(a, b) for a, b in zip(v.params(), before[k]))}
    assert {"actor_0", "actor_target_0", "critic_target_0"} <= changed


def test_frozen_representation_is_untouched(rng):
    learner = make_learner(GameConfig(), tiny())
    learner.representation_frozen = True
    ref = {k: [p.copy() for p in v.params()] for k, v in learner.rep.nets().items()}
    for _ in range(3):
        out = learner.update(random_batch(rng), rng)
    assert math.isnan(out["L1"])
    for k, v in learner.rep.nets().items():
        assert all(np.array_equal(a, b) for a, b in zip(v.params(), ref[k]))


# --- ablation switches -------------------------------------------------------------------


def critic_inputs_for(rng, **kw):
    learner = make_learner(GameConfig(), tiny(**kw))
    batch = random_batch(rng)
    batch["alive"][:] = True
    return learner, batch, learner.critic_inputs(batch["s"], batch["o"], batch["a"], batch["alive"])


def test_full_variant_uses_refined_attention(rng):
    _, _, ci = critic_inputs_for(rng)
    # k = 0.3 of 3 agents keeps a single teammate
    assert np.all(np.sort(ci.state_weights, axis=-1) == [0.0, 1.0])
    assert np.array_equal(ci.state_weights, ci.action_weights)


def test_without_state_attention(rng):
    _, _, ci = critic_inputs_for(rng, state_attention=False)
    assert np.all(ci.state_weights == 1.0)
    assert not np.all(ci.action_weights == 1.0)


def test_without_action_attention(rng):
    _, _, ci = critic_inputs_for(rng, action_attention=False)
    assert np.all(ci.action_weights == 1.0)
    assert not np.all(ci.state_weights == 1.0)


def test_without_embedded_mean_field_uses_raw_actions(rng):
    learner, batch, ci = critic_inputs_for(rng, embedded_mean_field=False)
    assert np.array_equal(ci.a_hat, batch["a"])
    assert ci.ma.shape[-1] == 2 * emfac.N_FAMILIES


def test_k_zero_zeroes_teammate_blocks(rng):
    _, batch, ci = critic_inputs_for(rng, k=0.0, min_one_selected=False)
    k = engine.SELF_DIM
    assert np.all(ci.state_weights == 0.0)
    assert np.all(ci.s_hat[..., k : k + 6] == 0.0)
    assert np.all(ci.ma == 0.0)
    assert np.array_equal(ci.s_hat[..., :k], batch["s"][..., :k])


# --- evaluation and training -----------------------------------------------------------------


def test_trace_metrics_match_evaluate(tmp_path):
    game = GameConfig()
    direct = emfac.evaluate(emfac.rule_policy(), game, 4, trace_dir=tmp_path)
    traces = [engine.read_trace(p) for p in sorted(tmp_path.glob("episode_*.jsonl"))]
    again = emfac.metrics_from_traces(traces, game.n_defenders, game.n_attackers)
    for key in ("mean_reward", "success_rate", "collision_rate"):
        assert again[key] == pytest.approx(direct[key], abs=1e-9)


def test_evaluation_is_seeded():
    game = GameConfig()
    assert emfac.evaluate(emfac.rule_policy(), game, 3) == emfac.evaluate(emfac.rule_policy(), game, 3)


def test_seeded_training_reproduces_curve(tmp_path):
    a = emfac.train(GameConfig(), tiny(), tmp_path / "a")
    b = emfac.train(GameConfig(), tiny(), tmp_path / "b")
    assert (tmp_path / "a" / "curve.csv").read_bytes() == (tmp_path / "b" / "curve.csv").read_bytes()
    assert json.dumps(a.curve) == json.dumps(b.curve)
    c = emfac.train(GameConfig(), tiny(seed=1))
    assert c.curve[-1]["critic_loss"] != a.curve[-1]["critic_loss"]


def test_training_outputs_and_resume(tmp_path):
    res = emfac.train(GameConfig(), tiny(), tmp_path)
    assert {"run.json", "curve.csv", "checkpoint.npz"} <= {p.name for p in tmp_path.iterdir()}
    rows = emfac.read_curve_csv(tmp_path / "curve.csv")
    assert [r["step"] for r in rows] == [0, 100, 200]
    assert rows[-1]["mean_reward"] == res.final["mean_reward"]
    more = emfac.train(GameConfig(), tiny(total_steps=300), tmp_path / "more", resume=tmp_path / "checkpoint.npz")
    assert [r["step"] for r in more.curve] == [0, 100, 200, 300]
    assert json.dumps(more.curve[:3]) == json.dumps(res.curve)


def test_divergence_is_reported(tmp_path):
    learner = make_learner(GameConfig(), tiny())
    learner.actors[1].weights[0][0, 0] = np.nan
    with pytest.raises(DivergenceError):
        emfac._check_finite(learner, {"critic_loss": 0.1}, 5, tmp_path)
    diag = json.loads((tmp_path / "divergence.json").read_text())
    assert diag["step"] == 5
    with pytest.raises(DivergenceError):
        emfac._check_finite(make_learner(GameConfig(), tiny()), {"critic_loss": math.inf}, 6, None)


def test_rule_algo_only_evaluates():
    res = emfac.train(GameConfig(), tiny(algo="rule"))
    assert res.learner is None and res.steps == 0
    assert len(res.curve) == 1


@settings(max_examples=200, deadline=None)
@given(
    logits=st.lists(st.floats(-20, 20, allow_nan=False), min_size=1, max_size=40),
    k=st.sampled_from([round(0.1 * i, 1) for i in range(11)]),
)
def test_refine_properties(logits, k):
    z = np.array(logits)
    n = len(z)
    w = refine_attention(z, k, n)
    s = max(1, math.floor(k * n + 1e-9))
    assert w.selected.sum() == s
    assert np.all(w.refined >= 0) and w.refined.sum() == pytest.approx(1.0)
    assert np.all(w.refined[~w.selected] == 0.0)
    # every selected logit is at least as large as every dropped one
    if s < n:
        assert z[w.selected].min() >= z[~w.selected].max()
