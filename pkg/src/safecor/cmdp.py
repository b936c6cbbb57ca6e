"""Constrained MDP primitives: step records, trajectories and discounted sums."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np


def _check_finite(xs: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(xs)):
        bad = int(np.flatnonzero(~np.isfinite(np.ravel(xs)))[0])
        raise ValueError(f"{what}: non-finite value (NaN/Inf) at flat index {bad}")


@dataclass(frozen=True)
class CmdpSpec:
    gamma: float
    threshold_d: float
    horizon: int
    obs_dim: int
    act_dim: int

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.threshold_d < 0:
            raise ValueError(f"threshold_d must be >= 0, got {self.threshold_d}")
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if self.obs_dim < 1 or self.act_dim < 1:
            raise ValueError("obs_dim and act_dim must be positive")


@dataclass(frozen=True)
class StepRecord:
    """One environment transition. ``state`` is the observation the action was taken in."""

    state: np.ndarray
    action: np.ndarray
    reward: float
    cost: float
    cor: Optional[float] = None
    terminal: bool = False
    truncated: bool = False

    def __post_init__(self):
        if not self.cost >= 0:
            raise ValueError(f"cost must be nonnegative, got {self.cost}")


@dataclass
class Trajectory:
    steps: list[StepRecord]
    seed: int = 0
    # observation after the last step, used for value bootstrapping on truncation
    final_state: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if not self.steps:
            raise ValueError("trajectory must contain at least one step")
        for i, st in enumerate(self.steps[:-1]):
            if st.terminal or st.truncated:
                raise ValueError(f"step {i} is flagged terminal/truncated but is not the last step")

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def states(self) -> np.ndarray:
        return np.stack([st.state for st in self.steps])

    @property
    def actions(self) -> np.ndarray:
        return np.stack([st.action for st in self.steps])

    @property
    def rewards(self) -> np.ndarray:
        return np.array([st.reward for st in self.steps], dtype=float)

    @property
    def costs(self) -> np.ndarray:
        return np.array([st.cost for st in self.steps], dtype=float)

    @property
    def cors(self) -> np.ndarray:
        if any(st.cor is None for st in self.steps):
            raise ValueError("trajectory is missing CoR annotations")
        return np.array([st.cor for st in self.steps], dtype=float)

    @property
    def terminal(self) -> bool:
        return self.steps[-1].terminal

    @property
    def truncated(self) -> bool:
        return self.steps[-1].truncated

    def with_cors(self, cors: Sequence[float]) -> "Trajectory":
        if len(cors) != len(self.steps):
            raise ValueError(f"got {len(cors)} CoR values for {len(self.steps)} steps")
        steps = [replace(st, cor=float(c)) for st, c in zip(self.steps, cors)]
        return Trajectory(steps, seed=self.seed, final_state=self.final_state)


def discounted_sum(xs: Sequence[float], gamma: float) -> float:
    """Return sum_t gamma**t * xs[t]; zero for an empty sequence."""
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    xs = np.asarray(xs, dtype=float)
    if xs.size == 0:
        return 0.0
    _check_finite(xs, "discounted_sum")
    powers = gamma ** np.arange(xs.size, dtype=float)
    return float(np.dot(powers, xs))


def trajectory_returns(traj: Trajectory, spec: CmdpSpec) -> tuple[float, float]:
    """Discounted (reward, cost) returns of one trajectory."""
    if len(traj) > spec.horizon:
        raise ValueError(f"trajectory has {len(traj)} steps, horizon is {spec.horizon}")
    for i, st in enumerate(traj.steps):
        if np.shape(st.state) != (spec.obs_dim,):
            raise ValueError(
                f"step {i}: state dimension {np.shape(st.state)} does not match obs_dim={spec.obs_dim}"
            )
    return discounted_sum(traj.rewards, spec.gamma), discounted_sum(traj.costs, spec.gamma)


def constraint_limit(spec: CmdpSpec) -> float:
    """Bound on the discounted cost return: d / (1 - gamma)."""
    return spec.threshold_d / (1.0 - spec.gamma)
