"""Clipped-surrogate Lagrangian policy gradient on CoR-shaped channels."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .cmdp import CmdpSpec, Trajectory, constraint_limit, discounted_sum
from .cor import CorParams, CorScorer, DemoSet, shape_channels
from .envs import make_env
from .nets import Adam, GaussianPolicy, ValueNet, save_checkpoint

log = logging.getLogger(__name__)

ABLATION_MODES = ("off", "rew_only", "cost_only", "both", "bc_loglik")
EXPERT_MODES = ("agent", "reward_expert", "safe_expert")
COST_ESTIMATORS = ("episode", "visitation")
METRICS_HEADER = ("batch", "steps", "avg_reward_return", "avg_cost_return", "cost_rate",
                  "cv", "total_cv", "multiplier", "kl", "cor_mean")


@dataclass(frozen=True)
class TrainerConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_ratio: float = 0.2
    max_kl: float = 0.001
    learning_rate: float = 3e-4
    value_learning_rate: float = 1e-3
    lagrange_lr: float = 0.05
    lagrange_init: float = 0.0
    epochs_per_batch: int = 10
    steps_per_batch: int = 4000
    minibatch_size: int = 1000
    total_steps: int = 200_000
    hidden_dim: int = 64  # 256 / 512 in the full-scale setting
    log_std_init: float = -0.5
    cor: CorParams = field(default_factory=CorParams)
    ablation_mode: str = "off"
    bc_coef: float = 0.1
    expert_mode: str = "agent"
    safe_expert_d: float = 0.005
    cost_estimator: str = "episode"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.clip_ratio < 1.0:
            raise ValueError("clip_ratio must lie in (0, 1)")
        if not self.max_kl > 0:
            raise ValueError("max_kl must be positive")
        if not 0.0 < self.gamma < 1.0 or not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gamma must lie in (0, 1) and gae_lambda in [0, 1]")
        if self.ablation_mode not in ABLATION_MODES:
            raise ValueError(f"ablation_mode must be one of {ABLATION_MODES}")
        if self.expert_mode not in EXPERT_MODES:
            raise ValueError(f"expert_mode must be one of {EXPERT_MODES}")
        if self.cost_estimator not in COST_ESTIMATORS:
            raise ValueError(f"cost_estimator must be one of {COST_ESTIMATORS}")
        if self.steps_per_batch < 1 or self.minibatch_size < 1 or self.epochs_per_batch < 1:
            raise ValueError("steps_per_batch, minibatch_size and epochs_per_batch must be positive")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")

    @property
    def shaping_channels(self) -> tuple[bool, bool]:
        if self.expert_mode != "agent":
            return False, False
        return {"rew_only": (True, False), "cost_only": (False, True),
                "both": (True, True)}.get(self.ablation_mode, (False, False))


@dataclass
class LagrangeState:
    multiplier: float = 0.0
    running_cost: float = 0.0

    def __post_init__(self):
        if self.multiplier < 0:
            raise ValueError("Lagrange multiplier must be nonnegative")


@dataclass
class RolloutBatch:
    trajectories: list[Trajectory]
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    cors: Optional[np.ndarray]
    shaped_rewards: np.ndarray
    shaped_costs: np.ndarray
    log_probs: np.ndarray
    bounds: list[tuple[int, int]]
    reward_values: Optional[np.ndarray] = None
    cost_values: Optional[np.ndarray] = None
    reward_adv: Optional[np.ndarray] = None
    cost_adv: Optional[np.ndarray] = None
    reward_targets: Optional[np.ndarray] = None
    cost_targets: Optional[np.ndarray] = None
    final_reward_values: Optional[np.ndarray] = None
    final_cost_values: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.states.shape[0]

    @property
    def cv(self) -> int:
        return int(np.count_nonzero(self.costs > 0))


@dataclass
class UpdateStats:
    kl: float
    policy_steps: int
    stopped_early: bool
    reward_value_loss: float
    cost_value_loss: float


def episode_seed(*key: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


def collect_rollouts(
    policy: GaussianPolicy,
    env_config,
    steps_per_batch: int,
    rng: np.random.Generator,
    seeds,
    scorer: Optional[CorScorer] = None,
    cor_params: CorParams = CorParams(),
    channels: tuple[bool, bool] = (False, False),
    reward_value: Optional[ValueNet] = None,
    cost_value: Optional[ValueNet] = None,
    deterministic: bool = False,
) -> RolloutBatch:
    """Run complete episodes in lockstep until at least ``steps_per_batch`` steps.

    ``seeds`` is a sequence with one reset seed per episode (its length decides
    the episode count) or a callable ``i -> seed``.
    """
    envs = [make_env(env_config)]
    horizon = envs[0].spec.horizon
    n_env = max(1, math.ceil(steps_per_batch / horizon))
    if callable(seeds):
        seeds = [seeds(i) for i in range(n_env)]
    elif len(seeds) < n_env:
        raise ValueError(f"need {n_env} episode seeds, got {len(seeds)}")
    envs += [make_env(env_config) for _ in range(n_env - 1)]
    if scorer is not None and scorer.dim != envs[0].obs_dim:
        raise ValueError(f"demo set dimension {scorer.dim} does not match observation dimension {envs[0].obs_dim}")
    obs = np.stack([env.reset(int(s)) for env, s in zip(envs, seeds)])
    records: list[list] = [[] for _ in envs]
    active = list(range(n_env))
    while active:
        S = obs[active]
        if deterministic:
            A, _ = policy.forward(S)
        else:
            A, _ = policy.sample(S, rng)
        still = []
        for row, i in enumerate(active):
            rec = envs[i].step(A[row])
            # keep the unclipped sample for the likelihood ratio
            rec = replace(rec, action=A[row].copy())
            records[i].append(rec)
            if rec.terminal or rec.truncated:
                continue
            obs[i] = envs[i].observation()
            still.append(i)
        active = still
    trajs = [Trajectory(recs, seed=int(s), final_state=env.observation())
             for recs, s, env in zip(records, seeds, envs)]
    return build_batch(policy, trajs, scorer, cor_params, channels, reward_value, cost_value)


def build_batch(policy, trajs, scorer=None, cor_params=CorParams(), channels=(False, False),
                reward_value=None, cost_value=None) -> RolloutBatch:
    bounds, start = [], 0
    for t in trajs:
        bounds.append((start, start + len(t)))
        start += len(t)
    states = np.concatenate([t.states for t in trajs])
    actions = np.concatenate([t.actions for t in trajs])
    rewards = np.concatenate([t.rewards for t in trajs])
    costs = np.concatenate([t.costs for t in trajs])
    cors = None
    if scorer is not None:
        cors = scorer(states)
        trajs = [t.with_cors(cors[a:b]) for t, (a, b) in zip(trajs, bounds)]
        shaped_r, shaped_c = shape_channels(rewards, costs, cors, cor_params, *channels)
    else:
        if any(channels):
            raise ValueError("CoR shaping requested but no demonstration sets were given")
        shaped_r, shaped_c = rewards.copy(), costs.copy()
    batch = RolloutBatch(trajs, states, actions, rewards, costs, cors, shaped_r, shaped_c,
                         policy.log_prob(states, actions), bounds)
    if reward_value is not None and cost_value is not None:
        finals = np.stack([t.final_state for t in trajs])
        batch.reward_values = reward_value.forward(states)
        batch.cost_values = cost_value.forward(states)
        batch.final_reward_values = reward_value.forward(finals)
        batch.final_cost_values = cost_value.forward(finals)
    return batch


def compute_gae(rewards, values, bootstrap: float, gamma: float, gae_lambda: float):
    """Generalized advantage estimates and value targets for one episode.

    ``bootstrap`` is the value after the last step: the value estimate on
    truncation, 0 on a terminal state.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if rewards.shape != values.shape:
        raise ValueError(f"rewards and values lengths differ: {rewards.shape} vs {values.shape}")
    if not (np.all(np.isfinite(rewards)) and np.all(np.isfinite(values)) and math.isfinite(bootstrap)):
        raise ValueError("compute_gae: non-finite input")
    next_values = np.append(values[1:], bootstrap)
    deltas = rewards + gamma * next_values - values
    adv = np.empty_like(deltas)
    acc = 0.0
    decay = gamma * gae_lambda
    for t in range(deltas.size - 1, -1, -1):
        acc = deltas[t] + decay * acc
        adv[t] = acc
    return adv, adv + values


def annotate_advantages(batch: RolloutBatch, gamma: float, gae_lambda: float) -> None:
    if batch.reward_values is None:
        raise ValueError("value estimates must be annotated before advantages")
    n = batch.size
    ra, ca, rt, ct = (np.empty(n) for _ in range(4))
    for k, ((a, b), traj) in enumerate(zip(batch.bounds, batch.trajectories)):
        boot_r = 0.0 if traj.terminal else batch.final_reward_values[k]
        boot_c = 0.0 if traj.terminal else batch.final_cost_values[k]
        ra[a:b], rt[a:b] = compute_gae(batch.shaped_rewards[a:b], batch.reward_values[a:b], boot_r, gamma, gae_lambda)
        ca[a:b], ct[a:b] = compute_gae(batch.shaped_costs[a:b], batch.cost_values[a:b], boot_c, gamma, gae_lambda)
    batch.reward_adv, batch.cost_adv, batch.reward_targets, batch.cost_targets = ra, ca, rt, ct


# -- policy objective ---------------------------------------------------------

def combine_advantages(reward_adv, cost_adv, multiplier: float, normalize: bool = True):
    """(A_r - ν·A_c) / (1 + ν), with the reward advantages standardized."""
    ra = np.asarray(reward_adv, dtype=float)
    if normalize and ra.size > 1:
        ra = (ra - ra.mean()) / (ra.std() + 1e-8)
    return (ra - multiplier * np.asarray(cost_adv, dtype=float)) / (1.0 + multiplier)


def surrogate_objective(policy, S, A, old_logp, adv, clip_ratio: float) -> float:
    ratio = np.exp(policy.log_prob(S, A) - old_logp)
    clipped = np.clip(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio)
    return float(np.mean(np.minimum(ratio * adv, clipped * adv)))


def surrogate_grad(policy, S, A, old_logp, adv, clip_ratio: float):
    """Clipped surrogate and its gradient with respect to ``policy.params``."""
    logp = policy.log_prob(S, A)
    ratio = np.exp(logp - old_logp)
    clipped = np.clip(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio)
    unclipped_term, clipped_term = ratio * adv, clipped * adv
    active = unclipped_term <= clipped_term
    value = float(np.mean(np.where(active, unclipped_term, clipped_term)))
    weights = np.where(active, unclipped_term, 0.0) / len(adv)
    _, grads = policy.log_prob_backward(S, A, weights)
    return value, grads


def lagrangian_objective(policy, S, A, old_logp, reward_adv, cost_adv, multiplier, clip_ratio,
                         bc_states=None, bc_actions=None, bc_coef: float = 0.0) -> float:
    adv = combine_advantages(reward_adv, cost_adv, multiplier)
    value = surrogate_objective(policy, S, A, old_logp, adv, clip_ratio)
    if bc_states is not None and bc_coef:
        value += bc_coef * float(np.mean(policy.log_prob(bc_states, bc_actions)))
    return value


def lagrangian_grad(policy, S, A, old_logp, reward_adv, cost_adv, multiplier, clip_ratio,
                    bc_states=None, bc_actions=None, bc_coef: float = 0.0):
    adv = combine_advantages(reward_adv, cost_adv, multiplier)
    value, grads = surrogate_grad(policy, S, A, old_logp, adv, clip_ratio)
    if bc_states is not None and bc_coef:
        w = np.full(len(bc_states), bc_coef / len(bc_states))
        logp, bc_grads = policy.log_prob_backward(bc_states, bc_actions, w)
        value += bc_coef * float(np.mean(logp))
        grads = [g + h for g, h in zip(grads, bc_grads)]
    return value, grads


@dataclass
class Learner:
    """Networks plus their optimizers; owned by one training run."""

    policy: GaussianPolicy
    reward_value: ValueNet
    cost_value: ValueNet
    policy_opt: Adam = None
    reward_opt: Adam = None
    cost_opt: Adam = None

    @classmethod
    def create(cls, obs_dim: int, act_dim: int, config: TrainerConfig, rng: np.random.Generator):
        policy = GaussianPolicy(obs_dim, act_dim, config.hidden_dim, rng, config.log_std_init)
        rv = ValueNet(obs_dim, config.hidden_dim, rng)
        cv = ValueNet(obs_dim, config.hidden_dim, rng)
        return cls(policy, rv, cv,
                   Adam(policy.params, config.learning_rate),
                   Adam(rv.params, config.value_learning_rate),
                   Adam(cv.params, config.value_learning_rate))


def ppo_lagrangian_update(batch: RolloutBatch, learner: Learner, lagrange: LagrangeState,
                          config: TrainerConfig, rng: np.random.Generator,
                          expert_pairs: Optional[tuple[np.ndarray, np.ndarray]] = None) -> UpdateStats:
    if batch.reward_adv is None:
        raise ValueError("batch must carry advantages before the policy update")
    policy = learner.policy
    S, A, old_logp = batch.states, batch.actions, batch.log_probs
    adv = combine_advantages(batch.reward_adv, batch.cost_adv, lagrange.multiplier)
    old_mean, _ = policy.forward(S)
    old_log_std = policy.log_std.copy()
    use_bc = config.ablation_mode == "bc_loglik" and config.expert_mode == "agent"
    if use_bc and expert_pairs is None:
        raise ValueError("bc_loglik ablation needs reward-expert state-action pairs")

    n, mb = batch.size, min(config.minibatch_size, batch.size)
    kl, steps, stopped = 0.0, 0, False
    for _ in range(config.epochs_per_batch):
        perm = rng.permutation(n)
        for start in range(0, n, mb):
            idx = perm[start:start + mb]
            value, grads = surrogate_grad(policy, S[idx], A[idx], old_logp[idx], adv[idx], config.clip_ratio)
            if use_bc:
                pick = rng.choice(len(expert_pairs[0]), size=min(mb, len(expert_pairs[0])), replace=False)
                bs, ba = expert_pairs[0][pick], expert_pairs[1][pick]
                w = np.full(len(pick), config.bc_coef / len(pick))
                logp, bc_grads = policy.log_prob_backward(bs, ba, w)
                value += config.bc_coef * float(np.mean(logp))
                grads = [g + h for g, h in zip(grads, bc_grads)]
            if not math.isfinite(value):
                raise FloatingPointError("non-finite policy objective")
            snap = learner.policy_opt.snapshot()
            learner.policy_opt.step([-g for g in grads])
            policy.project()
            new_kl = policy.kl_from(S, old_mean, old_log_std)
            if new_kl > 2.0 * config.max_kl:
                learner.policy_opt.restore(snap)
                stopped = True
                break
            kl, steps = new_kl, steps + 1
            if new_kl > config.max_kl:
                stopped = True
                break
        if stopped:
            break

    losses = []
    for net, opt, targets in ((learner.reward_value, learner.reward_opt, batch.reward_targets),
                              (learner.cost_value, learner.cost_opt, batch.cost_targets)):
        loss = 0.0
        for _ in range(config.epochs_per_batch):
            perm = rng.permutation(n)
            for start in range(0, n, mb):
                idx = perm[start:start + mb]
                loss, grads = net.mse_and_grad(S[idx], targets[idx])
                if not math.isfinite(loss):
                    raise FloatingPointError("non-finite value loss")
                opt.step(grads)
        losses.append(loss)
    return UpdateStats(kl, steps, stopped, losses[0], losses[1])


# -- constraint handling ------------------------------------------------------

def estimate_constraint_cost(batch: RolloutBatch, gamma: float, estimator: str = "episode") -> float:
    """Ĉ, the discounted shaped-cost return estimate compared against d/(1-γ).

    ``episode`` averages the per-episode return from the initial state;
    ``visitation`` averages the cost return targets over every visited state.
    """
    if estimator == "episode":
        return float(np.mean([discounted_sum(batch.shaped_costs[a:b], gamma) for a, b in batch.bounds]))
    if estimator == "visitation":
        if batch.cost_targets is None:
            raise ValueError("visitation estimator needs cost return targets")
        return float(np.mean(batch.cost_targets))
    raise ValueError(f"unknown estimator {estimator!r}")


def lagrange_update(lagrange: LagrangeState, batch: RolloutBatch, spec: CmdpSpec,
                    config: TrainerConfig) -> LagrangeState:
    c_hat = estimate_constraint_cost(batch, spec.gamma, config.cost_estimator)
    return lagrange_step(lagrange, c_hat, constraint_limit(spec), config.lagrange_lr)


def lagrange_step(lagrange: LagrangeState, c_hat: float, limit: float, lr: float) -> LagrangeState:
    multiplier = max(0.0, lagrange.multiplier + lr * (c_hat - limit))
    running = 0.9 * lagrange.running_cost + 0.1 * c_hat
    return LagrangeState(multiplier, running)


# -- training loop ------------------------------------------------------------

@dataclass
class TrainResult:
    learner: Learner
    lagrange: LagrangeState
    rows: list[dict]
    checkpoint: Optional[Path] = None
    metrics_path: Optional[Path] = None


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in METRICS_HEADER])


def read_metrics_csv(path) -> list[dict]:
    """Parse a metrics log; malformed lines raise ``ValueError`` naming the line."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRICS_HEADER:
            raise ValueError(f"{path}:1: unexpected header {header}")
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(METRICS_HEADER):
                raise ValueError(f"{path}:{lineno}: expected {len(METRICS_HEADER)} fields, got {len(rec)}")
            try:
                row = {k: float(v) for k, v in zip(METRICS_HEADER, rec)}
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            for k in ("batch", "steps", "cv", "total_cv"):
                row[k] = int(row[k])
            rows.append(row)
    return rows


def train(config: TrainerConfig, env_config, reward_set: Optional[DemoSet] = None,
          safe_set: Optional[DemoSet] = None, expert_pairs: Optional[DemoSet] = None,
          out_dir=None, feature_mask=None, standardize: bool = False) -> TrainResult:
    """Collect, estimate advantages, update multiplier and networks; repeat.

    Demo sets are ignored outside ``expert_mode='agent'``. When present they
    are always scored (``cor_mean`` column) and only enter the reward/cost
    channels according to ``ablation_mode``.
    """
    probe = make_env(env_config)
    spec = probe.spec
    if spec.gamma != config.gamma:
        spec = replace(spec, gamma=config.gamma)
    if config.expert_mode == "safe_expert":
        spec = replace(spec, threshold_d=config.safe_expert_d)

    scorer = None
    if config.expert_mode == "agent" and reward_set is not None and safe_set is not None:
        scorer = CorScorer(reward_set, safe_set, config.cor, feature_mask, standardize)
        if scorer.dim != spec.obs_dim:
            raise ValueError(f"demo set dimension {scorer.dim} does not match observation dimension {spec.obs_dim}")
    channels = config.shaping_channels
    if any(channels) and scorer is None:
        raise ValueError(f"ablation_mode={config.ablation_mode!r} needs reward and safe demonstration sets")
    pairs = None
    if config.ablation_mode == "bc_loglik" and config.expert_mode == "agent":
        if expert_pairs is None:
            raise ValueError("bc_loglik ablation needs reward-expert state-action pairs")
        if expert_pairs.dim != spec.obs_dim + spec.act_dim:
            raise ValueError("expert pair dimension does not match obs_dim + act_dim")
        pairs = (expert_pairs.states[:, :spec.obs_dim], expert_pairs.states[:, spec.obs_dim:])

    init_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    act_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    upd_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    learner = Learner.create(spec.obs_dim, spec.act_dim, config, init_rng)
    lagrange = LagrangeState(config.lagrange_init if config.expert_mode != "reward_expert" else 0.0)

    rows: list[dict] = []
    steps, total_cv, b = 0, 0, 0
    while steps < config.total_steps:
        try:
            batch = collect_rollouts(learner.policy, env_config, config.steps_per_batch, act_rng,
                                     lambda i, b=b: episode_seed(config.seed, b, i), scorer, config.cor,
                                     channels, learner.reward_value, learner.cost_value)
            annotate_advantages(batch, config.gamma, config.gae_lambda)
            if config.expert_mode != "reward_expert":
                lagrange = lagrange_update(lagrange, batch, spec, config)
            stats = ppo_lagrangian_update(batch, learner, lagrange, config, upd_rng, pairs)
        except Exception as exc:
            raise RuntimeError(f"training failed at batch {b}: {exc}") from exc
        steps += batch.size
        total_cv += batch.cv
        n_ep = len(batch.trajectories)
        rows.append({
            "batch": b,
            "steps": steps,
            "avg_reward_return": float(np.sum(batch.rewards)) / n_ep,
            "avg_cost_return": float(np.sum(batch.costs)) / n_ep,
            "cost_rate": float(np.sum(batch.costs)) / batch.size,
            "cv": batch.cv,
            "total_cv": total_cv,
            "multiplier": lagrange.multiplier,
            "kl": stats.kl,
            "cor_mean": float(np.mean(batch.cors)) if batch.cors is not None else float("nan"),
        })
        log.debug("batch %d steps %d reward %.3f cost %.3f nu %.3f kl %.2e", b, steps,
                  rows[-1]["avg_reward_return"], rows[-1]["avg_cost_return"], lagrange.multiplier, stats.kl)
        b += 1

    result = TrainResult(learner, lagrange, rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.checkpoint = out / "checkpoint.txt"
        result.metrics_path = out / "metrics.csv"
        save_checkpoint(result.checkpoint, learner.policy, learner.reward_value, learner.cost_value)
        write_metrics_csv(result.metrics_path, rows)
    return result
