from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import numeric_grad, rel_error
from safecor.cmdp import StepRecord, Trajectory, constraint_limit, discounted_sum
from safecor.cor import CorParams, CorScorer, DemoSet
from safecor.envs import ChainCmdpConfig, PointGoalMini, PointGoalMiniConfig
from safecor.nets import GaussianPolicy, ValueNet, flatten
from safecor.trainer import (LagrangeState, Learner, TrainerConfig, annotate_advantages, build_batch,
                             collect_rollouts, combine_advantages, compute_gae, estimate_constraint_cost,
                             lagrange_step, lagrange_update, lagrangian_grad, lagrangian_objective,
                             ppo_lagrangian_update, read_metrics_csv, surrogate_grad, train)

SMALL_ENV = PointGoalMiniConfig(horizon=50, n_hazards=3)
SMALL = TrainerConfig(steps_per_batch=100, minibatch_size=50, total_steps=300, hidden_dim=8, epochs_per_batch=3)


def gae_oracle(rewards, values, bootstrap, gamma, lam):
    T = len(rewards)
    v = list(values) + [bootstrap]
    adv = np.zeros(T)
    for t in range(T):
        for k in range(t, T):
            delta = rewards[k] + gamma * v[k + 1] - v[k]
            adv[t] += (gamma * lam) ** (k - t) * delta
    return adv


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), gamma=st.floats(0.5, 0.999), lam=st.floats(0, 1))
def test_gae_matches_double_loop(seed, gamma, lam):
    r = np.random.default_rng(seed)
    rew, val, boot = r.normal(size=20), r.normal(size=20), float(r.normal())
    adv, targets = compute_gae(rew, val, boot, gamma, lam)
    assert np.allclose(adv, gae_oracle(rew, val, boot, gamma, lam), rtol=0, atol=1e-10)
    assert np.array_equal(targets, adv + val)


def test_gae_identities(rng):
    rew = rng.normal(size=30)
    adv, _ = compute_gae(rew, np.zeros(30), 0.0, 0.99, 1.0)
    to_go = np.array([discounted_sum(rew[t:], 0.99) for t in range(30)])
    assert np.allclose(adv, to_go, rtol=0, atol=1e-12)
    assert np.array_equal(compute_gae(np.zeros(5), np.zeros(5), 0.0, 0.9, 0.9)[0], np.zeros(5))
    with pytest.raises(ValueError):
        compute_gae([1.0, np.nan], [0.0, 0.0], 0.0, 0.9, 0.9)
    with pytest.raises(ValueError):
        compute_gae([1.0], [0.0, 0.0], 0.0, 0.9, 0.9)


def test_truncated_episode_bootstraps_value():
    adv, _ = compute_gae([0.0], [0.0], 5.0, 0.9, 1.0)
    assert adv[0] == pytest.approx(4.5)


def test_lagrange_examples():
    limit = constraint_limit(PointGoalMini().spec)
    assert lagrange_step(LagrangeState(0.7), limit, limit, 0.05).multiplier == 0.7
    assert lagrange_step(LagrangeState(0.0), limit - 1, limit, 0.05).multiplier == 0.0
    state = LagrangeState(0.0)
    for k in range(1, 11):
        state = lagrange_step(state, limit + 2.0, limit, 0.05)
        assert state.multiplier == pytest.approx(0.05 * 2.0 * k, abs=1e-12)
    assert state.running_cost == pytest.approx((limit + 2.0) * (1 - 0.9 ** 10), rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(nu=st.floats(0, 100), c=st.floats(-100, 100), lr=st.floats(0, 1))
def test_multiplier_stays_nonnegative(nu, c, lr):
    assert lagrange_step(LagrangeState(nu), c, 2.5, lr).multiplier >= 0.0


def toy_batch(rng, n=10, obs=3, act=2):
    pol = GaussianPolicy(obs, act, hidden_dim=6, rng=rng)
    for p in pol.net.params:
        p += 0.2 * rng.standard_normal(p.shape)
    S, A = rng.normal(size=(n, obs)), rng.normal(size=(n, act))
    old = pol.log_prob(S, A) + rng.normal(size=n) * 0.1
    return pol, S, A, old, rng.normal(size=n), rng.normal(size=n)


def test_lagrangian_gradient_finite_difference():
    worst = 0.0
    for k in range(100):
        r = np.random.default_rng(500 + k)
        pol, S, A, old, ra, ca = toy_batch(r)
        nu = float(r.uniform(0, 3))
        bs, ba = r.normal(size=(4, 3)), r.normal(size=(4, 2))
        _, grads = lagrangian_grad(pol, S, A, old, ra, ca, nu, 0.2, bs, ba, 0.1)
        num = numeric_grad(lambda: lagrangian_objective(pol, S, A, old, ra, ca, nu, 0.2, bs, ba, 0.1), pol.params)
        worst = max(worst, rel_error(flatten(grads), num))
    assert worst < 1e-4


def test_zero_multiplier_reduces_to_reward_surrogate(rng):
    pol, S, A, old, ra, ca = toy_batch(rng)
    v1, g1 = lagrangian_grad(pol, S, A, old, ra, ca, 0.0, 0.2)
    v2, g2 = surrogate_grad(pol, S, A, old, combine_advantages(ra, np.zeros_like(ca), 0.0), 0.2)
    assert v1 == v2
    assert all(np.array_equal(a, b) for a, b in zip(g1, g2))


def test_combine_advantages():
    ra, ca = np.array([1.0, 3.0]), np.array([2.0, -2.0])
    out = combine_advantages(ra, ca, 1.0)
    assert np.allclose(out, ((np.array([-1.0, 1.0]) * 2 / (2 + 1e-8)) / 2 - ca / 2), atol=1e-12)


def frozen_batch(seed, scorer=None, channels=(False, False), cor_params=CorParams()):
    r = np.random.default_rng(seed)
    pol = GaussianPolicy(SMALL_ENV.obs_dim, 2, 8, r)
    rv, cv = ValueNet(SMALL_ENV.obs_dim, 8, r), ValueNet(SMALL_ENV.obs_dim, 8, r)
    batch = collect_rollouts(pol, SMALL_ENV, 100, np.random.default_rng(seed + 1), [seed, seed + 1],
                             scorer, cor_params, channels, rv, cv)
    return pol, rv, cv, batch


def test_zero_advantages_leave_policy_unchanged():
    pol, rv, cv, batch = frozen_batch(0)
    annotate_advantages(batch, 0.99, 0.95)
    batch.reward_adv = np.zeros(batch.size)
    batch.cost_adv = np.zeros(batch.size)
    cfg = replace(SMALL, lagrange_init=0.0)
    learner = Learner.create(SMALL_ENV.obs_dim, 2, cfg, np.random.default_rng(0))
    learner.policy = pol
    from safecor.nets import Adam
    learner.policy_opt = Adam(pol.params, cfg.learning_rate)
    before = flatten(pol.params)
    ppo_lagrangian_update(batch, learner, LagrangeState(0.5), cfg, np.random.default_rng(1))
    assert np.array_equal(flatten(pol.params), before)


def test_kl_guard_holds_every_update():
    cfg = replace(SMALL, learning_rate=3e-2, epochs_per_batch=10, minibatch_size=20)
    r = np.random.default_rng(0)
    learner = Learner.create(SMALL_ENV.obs_dim, 2, cfg, r)
    for b in range(5):
        batch = collect_rollouts(learner.policy, SMALL_ENV, 100, r, [2 * b, 2 * b + 1],
                                 reward_value=learner.reward_value, cost_value=learner.cost_value)
        annotate_advantages(batch, 0.99, 0.95)
        old_mean, _ = learner.policy.forward(batch.states)
        old_log_std = learner.policy.log_std.copy()
        stats = ppo_lagrangian_update(batch, learner, LagrangeState(), cfg, r)
        measured = learner.policy.kl_from(batch.states, old_mean, old_log_std)
        assert measured <= 2 * cfg.max_kl
        assert stats.kl == pytest.approx(measured, abs=1e-15)


def test_collect_rollouts_identity_and_determinism():
    _, _, _, a = frozen_batch(3)
    _, _, _, b = frozen_batch(3)
    assert np.array_equal(a.shaped_rewards, a.rewards) and np.array_equal(a.shaped_costs, a.costs)
    for name in ("states", "actions", "rewards", "costs", "log_probs", "reward_values"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert a.size == 100 and len(a.trajectories) == 2
    assert a.cv == sum(1 for t in a.trajectories for s in t.steps if s.cost > 0)


def test_collect_rejects_mismatched_demos():
    scorer = CorScorer(DemoSet(np.zeros((2, 3))), DemoSet(np.ones((2, 3))))
    pol = GaussianPolicy(SMALL_ENV.obs_dim, 2, 4)
    with pytest.raises(ValueError, match="dimension"):
        collect_rollouts(pol, SMALL_ENV, 50, np.random.default_rng(0), [0], scorer)


def test_cost_shaping_monotone_in_lambda_c():
    r = np.random.default_rng(4)
    env = PointGoalMini(SMALL_ENV)
    obs = [env.reset(s) for s in range(20)]
    scorer = CorScorer(DemoSet(np.array(obs[:10])), DemoSet(np.array(obs[10:])))
    pol = GaussianPolicy(SMALL_ENV.obs_dim, 2, 8, r)
    base = collect_rollouts(pol, SMALL_ENV, 100, np.random.default_rng(1), [5, 6], scorer)
    spec = env.spec
    gaps = []
    for lc in (0.0, 0.01, 0.1, 1.0):
        batch = build_batch(pol, base.trajectories, scorer, CorParams(3.0, 0.1, lc), (True, True))
        gaps.append(estimate_constraint_cost(batch, spec.gamma) - constraint_limit(spec))
        nu = lagrange_update(LagrangeState(1.0), batch, spec, TrainerConfig()).multiplier
        assert nu >= 0.0
    assert all(b >= a for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] > gaps[0]


def test_train_zero_steps(tmp_path):
    res = train(replace(SMALL, total_steps=0), SMALL_ENV, out_dir=tmp_path)
    assert res.rows == []
    assert read_metrics_csv(res.metrics_path) == []
    assert res.checkpoint.is_file()


def test_train_is_deterministic(tmp_path):
    a = train(SMALL, SMALL_ENV, out_dir=tmp_path / "a")
    b = train(SMALL, SMALL_ENV, out_dir=tmp_path / "b")
    c = train(replace(SMALL, seed=1), SMALL_ENV, out_dir=tmp_path / "c")
    assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
    assert a.metrics_path.read_bytes() != c.metrics_path.read_bytes()


def test_metrics_log_consistency(tmp_path):
    res = train(replace(SMALL, total_steps=500), SMALL_ENV, out_dir=tmp_path)
    rows = read_metrics_csv(res.metrics_path)
    assert len(rows) == 5
    assert [r["steps"] for r in rows] == [100, 200, 300, 400, 500]
    totals = [r["total_cv"] for r in rows]
    assert totals == list(np.cumsum([r["cv"] for r in rows]))
    assert all(0.0 <= r["cost_rate"] <= 1.0 and r["multiplier"] >= 0 for r in rows)
    assert all(np.isnan(r["cor_mean"]) for r in rows)


def demo_sets():
    env = PointGoalMini(SMALL_ENV)
    obs = np.array([env.reset(s) for s in range(40)])
    return DemoSet(obs[:20], "reward_expert"), DemoSet(obs[20:], "safe_expert")


def test_overlay_purity(tmp_path):
    rs, ss = demo_sets()
    cfg = replace(SMALL, total_steps=400)
    off = train(cfg, SMALL_ENV, rs, ss, out_dir=tmp_path / "off")
    zero = train(replace(cfg, ablation_mode="both", cor=CorParams(3.0, 0.0, 0.0)), SMALL_ENV, rs, ss,
                 out_dir=tmp_path / "zero")
    plain = train(cfg, SMALL_ENV, out_dir=tmp_path / "plain")
    assert off.metrics_path.read_bytes() == zero.metrics_path.read_bytes()
    assert off.checkpoint.read_bytes() == zero.checkpoint.read_bytes() == plain.checkpoint.read_bytes()
    shaped = train(replace(cfg, ablation_mode="both"), SMALL_ENV, rs, ss, out_dir=tmp_path / "shaped")
    assert shaped.checkpoint.read_bytes() != off.checkpoint.read_bytes()


def test_shaping_requires_demos():
    with pytest.raises(ValueError, match="demonstration"):
        train(replace(SMALL, ablation_mode="rew_only"), SMALL_ENV)


def test_expert_modes(tmp_path):
    res = train(replace(SMALL, expert_mode="reward_expert", lagrange_init=3.0), SMALL_ENV)
    assert all(r["multiplier"] == 0.0 for r in res.rows)
    rs, ss = demo_sets()
    safe = train(replace(SMALL, expert_mode="safe_expert", ablation_mode="both"), SMALL_ENV, rs, ss)
    assert all(np.isnan(r["cor_mean"]) for r in safe.rows)


def test_bc_loglik_mode_runs():
    env = PointGoalMini(SMALL_ENV)
    obs = np.array([env.reset(s) for s in range(10)])
    pairs = DemoSet(np.hstack([obs, np.zeros((10, 2))]), "other")
    rs, ss = demo_sets()
    res = train(replace(SMALL, ablation_mode="bc_loglik"), SMALL_ENV, rs, ss, pairs)
    assert len(res.rows) == 3
    with pytest.raises(ValueError, match="pairs"):
        train(replace(SMALL, ablation_mode="bc_loglik"), SMALL_ENV, rs, ss)


def test_training_error_names_batch(monkeypatch):
    import safecor.trainer as tr

    def boom(*a, **k):
        raise FloatingPointError("non-finite policy objective")
    monkeypatch.setattr(tr, "ppo_lagrangian_update", boom)
    with pytest.raises(RuntimeError, match="batch 0"):
        train(SMALL, SMALL_ENV)


def test_chain_training_runs():
    cfg = replace(SMALL, gamma=0.9, expert_mode="reward_expert", total_steps=200)
    res = train(cfg, ChainCmdpConfig(horizon=100))
    assert len(res.rows) == 2
