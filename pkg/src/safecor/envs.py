"""Built-in constrained environments.

``PointGoalMini`` is a point mass in a square arena that chases randomly
placed goals while avoiding circular hazards. ``ChainCMDP`` is a tiny
tabular chain with a closed-form evaluation, used as an oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cmdp import CmdpSpec, StepRecord

_SPAWN_KEEPOUT = 0.2
_MAX_TRIES = 10_000


class EpisodeFinished(RuntimeError):
    """Raised when ``step`` is called on a terminal or truncated episode."""


@dataclass(frozen=True)
class PointGoalMiniConfig:
    arena_half_width: float = 2.0
    n_hazards: int = 8
    hazard_radius: float = 0.35
    goal_radius: float = 0.3
    max_speed: float = 1.0
    horizon: int = 1000
    threshold_d: float = 0.025
    gamma: float = 0.99
    dt: float = 0.1
    goal_bonus: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.hazard_radius <= 0 or self.goal_radius <= 0:
            raise ValueError("hazard_radius and goal_radius must be positive")
        if self.arena_half_width <= 0 or self.max_speed <= 0 or self.dt <= 0:
            raise ValueError("arena_half_width, max_speed and dt must be positive")
        if self.n_hazards < 0:
            raise ValueError("n_hazards must be >= 0")

    @property
    def obs_dim(self) -> int:
        return 4 + 2 * self.n_hazards


class PointGoalMini:
    """Point-mass goal task with hazard zones.

    Observation layout: ``[goal - agent (2), velocity (2), hazard_i - agent (2 each)]``.
    The action is a 2-D acceleration command clipped to ``[-1, 1]^2``. Reaching a
    goal pays ``goal_bonus`` and re-spawns the goal; the episode only ends by
    truncation at ``horizon``.
    """

    act_dim = 2

    def __init__(self, config: PointGoalMiniConfig = PointGoalMiniConfig()):
        self.config = config
        self.obs_dim = config.obs_dim
        self.action_low = -np.ones(2)
        self.action_high = np.ones(2)
        self.spec = CmdpSpec(config.gamma, config.threshold_d, config.horizon, self.obs_dim, 2)
        self._rng: Optional[np.random.Generator] = None
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)
        self.goal = np.zeros(2)
        self.hazards = np.zeros((config.n_hazards, 2))
        self.t = 0
        self.done = True
        self._goal_dist = 0.0

    # -- sampling ---------------------------------------------------------
    def _uniform_point(self) -> np.ndarray:
        w = self.config.arena_half_width * 0.9
        return self._rng.uniform(-w, w, size=2)

    def _sample_goal(self) -> np.ndarray:
        cfg = self.config
        for _ in range(_MAX_TRIES):
            g = self._uniform_point()
            if np.hypot(*(g - self.pos)) <= cfg.goal_radius + _SPAWN_KEEPOUT:
                continue
            if cfg.n_hazards and np.min(np.hypot(*(self.hazards - g).T)) <= cfg.hazard_radius + cfg.goal_radius:
                continue
            return g
        raise RuntimeError("could not place a goal; arena too crowded")

    def reset(self, seed: int) -> np.ndarray:
        cfg = self.config
        self._rng = np.random.default_rng(seed)
        self.pos = self._uniform_point()
        self.vel = np.zeros(2)
        hazards = []
        tries = 0
        while len(hazards) < cfg.n_hazards:
            tries += 1
            if tries > _MAX_TRIES:
                raise RuntimeError("could not place hazards away from the spawn point")
            h = self._uniform_point()
            if np.hypot(*(h - self.pos)) > cfg.hazard_radius + _SPAWN_KEEPOUT:
                hazards.append(h)
        self.hazards = np.array(hazards, dtype=float).reshape(cfg.n_hazards, 2)
        self.goal = self._sample_goal()
        self._goal_dist = self._distance_to_goal()
        self.t = 0
        self.done = False
        return self.observation()

    def set_state(self, pos, vel, goal, hazards) -> np.ndarray:
        """Place the simulator in an explicit state (tests, scripted rollouts)."""
        if self._rng is None:
            self._rng = np.random.default_rng(self.config.seed)
        self.pos = np.array(pos, dtype=float)
        self.vel = np.array(vel, dtype=float)
        self.goal = np.array(goal, dtype=float)
        self.hazards = np.array(hazards, dtype=float).reshape(self.config.n_hazards, 2)
        self._goal_dist = self._distance_to_goal()
        self.t = 0
        self.done = False
        return self.observation()

    # -- dynamics ---------------------------------------------------------
    def _distance_to_goal(self) -> float:
        # distance to the goal boundary; zero exactly when the goal is reached
        return max(0.0, math.hypot(*(self.goal - self.pos)) - self.config.goal_radius)

    def in_hazard(self) -> bool:
        if self.config.n_hazards == 0:
            return False
        d = np.hypot(*(self.hazards - self.pos).T)
        return bool(np.min(d) <= self.config.hazard_radius)

    def observation(self) -> np.ndarray:
        return np.concatenate([self.goal - self.pos, self.vel, (self.hazards - self.pos).ravel()])

    def step(self, action) -> StepRecord:
        if self.done:
            raise EpisodeFinished("step() called after the episode ended; call reset()")
        cfg = self.config
        state = self.observation()
        a = np.clip(np.asarray(action, dtype=float).reshape(2), -1.0, 1.0)
        vel = self.vel + cfg.dt * a
        speed = math.hypot(vel[0], vel[1])
        if speed > cfg.max_speed:
            vel = vel * (cfg.max_speed / speed)
        pos = self.pos + cfg.dt * vel
        w = cfg.arena_half_width
        hit = np.abs(pos) > w
        pos = np.clip(pos, -w, w)
        vel[hit] = 0.0
        self.pos, self.vel = pos, vel

        new_dist = self._distance_to_goal()
        reward = self._goal_dist - new_dist
        if new_dist == 0.0:
            reward += cfg.goal_bonus
            self.goal = self._sample_goal()
            new_dist = self._distance_to_goal()
        self._goal_dist = new_dist
        cost = 1.0 if self.in_hazard() else 0.0

        self.t += 1
        truncated = self.t >= cfg.horizon
        self.done = truncated
        return StepRecord(state, a, float(reward), cost, truncated=truncated)


@dataclass(frozen=True)
class ChainCmdpConfig:
    """Left/right chain; reward and cost depend on the current state only."""

    n_states: int = 5
    slip_prob: float = 0.1
    gamma: float = 0.9
    rewards: tuple = (0.0, 0.0, 0.0, 0.0, 1.0)
    costs: tuple = (0.0, 0.0, 1.0, 0.0, 0.0)
    horizon: int = 100
    threshold_d: float = 0.1
    start_state: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.n_states < 1:
            raise ValueError("n_states must be >= 1")
        if not 0.0 <= self.slip_prob < 1.0:
            raise ValueError("slip_prob must lie in [0, 1)")
        if len(self.rewards) != self.n_states or len(self.costs) != self.n_states:
            raise ValueError("reward and cost tables must have n_states entries")
        if not 0 <= self.start_state < self.n_states:
            raise ValueError("start_state out of range")

    def transition_matrix(self) -> np.ndarray:
        """P[s, a, s'] with a=0 moving left and a=1 moving right."""
        n = self.n_states
        P = np.zeros((n, 2, n))
        for s in range(n):
            left, right = max(s - 1, 0), min(s + 1, n - 1)
            P[s, 0, left] += 1.0 - self.slip_prob
            P[s, 0, right] += self.slip_prob
            P[s, 1, right] += 1.0 - self.slip_prob
            P[s, 1, left] += self.slip_prob
        return P


class ChainCMDP:
    """Environment wrapper around :class:`ChainCmdpConfig`.

    Observations are one-hot state vectors; a 1-D continuous action selects
    ``right`` when nonnegative and ``left`` otherwise.
    """

    act_dim = 1

    def __init__(self, config: ChainCmdpConfig = ChainCmdpConfig()):
        self.config = config
        self.obs_dim = config.n_states
        self.action_low = -np.ones(1)
        self.action_high = np.ones(1)
        self.spec = CmdpSpec(config.gamma, config.threshold_d, config.horizon, self.obs_dim, 1)
        self._rng: Optional[np.random.Generator] = None
        self.s = config.start_state
        self.t = 0
        self.done = True

    def reset(self, seed: int) -> np.ndarray:
        self._rng = np.random.default_rng(seed)
        self.s = self.config.start_state
        self.t = 0
        self.done = False
        return self.observation()

    def observation(self) -> np.ndarray:
        obs = np.zeros(self.obs_dim)
        obs[self.s] = 1.0
        return obs

    def step(self, action) -> StepRecord:
        if self.done:
            raise EpisodeFinished("step() called after the episode ended; call reset()")
        cfg = self.config
        state = self.observation()
        a = np.clip(np.asarray(action, dtype=float).reshape(1), -1.0, 1.0)
        move = 1 if a[0] >= 0.0 else -1
        if self._rng.random() < cfg.slip_prob:
            move = -move
        reward, cost = float(cfg.rewards[self.s]), float(cfg.costs[self.s])
        self.s = min(max(self.s + move, 0), cfg.n_states - 1)
        self.t += 1
        truncated = self.t >= cfg.horizon
        self.done = truncated
        return StepRecord(state, a, reward, cost, truncated=truncated)


def make_env(config):
    if isinstance(config, PointGoalMiniConfig):
        return PointGoalMini(config)
    if isinstance(config, ChainCmdpConfig):
        return ChainCMDP(config)
    raise TypeError(f"unknown environment config {type(config).__name__}")


def exact_policy_evaluation(chain: ChainCmdpConfig, policy) -> tuple[float, float]:
    """Solve v = r_pi + gamma P_pi v for the reward and cost channels.

    ``policy`` is an ``(n_states, 2)`` array of action probabilities
    (column 0 = left, column 1 = right). Returns the start-state values.
    """
    pi = np.asarray(policy, dtype=float)
    n = chain.n_states
    if pi.shape != (n, 2):
        raise ValueError(f"policy must have shape ({n}, 2), got {pi.shape}")
    if np.any(pi < 0) or not np.allclose(pi.sum(axis=1), 1.0):
        raise ValueError("policy rows must be probability distributions")
    P_pi = np.einsum("sa,sat->st", pi, chain.transition_matrix())
    A = np.eye(n) - chain.gamma * P_pi
    if np.linalg.cond(A) > 1e12:
        raise np.linalg.LinAlgError("Bellman system is numerically singular")
    r = np.asarray(chain.rewards, dtype=float)
    c = np.asarray(chain.costs, dtype=float)
    v = np.linalg.solve(A, np.stack([r, c], axis=1))
    return float(v[chain.start_state, 0]), float(v[chain.start_state, 1])


def optimal_chain_value(chain: ChainCmdpConfig, tol: float = 1e-12) -> tuple[float, np.ndarray]:
    """Unconstrained optimal start-state value and greedy policy (policy iteration)."""
    P = chain.transition_matrix()
    r = np.asarray(chain.rewards, dtype=float)
    n = chain.n_states
    actions = np.ones(n, dtype=int)
    while True:
        pi = np.eye(2)[actions]
        P_pi = np.einsum("sa,sat->st", pi, P)
        v = np.linalg.solve(np.eye(n) - chain.gamma * P_pi, r)
        q = r[:, None] + chain.gamma * P @ v
        best = np.where(q[:, 1] >= q[:, 0] - tol, 1, 0)
        if np.array_equal(best, actions):
            return float(v[chain.start_state]), np.eye(2)[actions]
        actions = best
