"""Demonstration sets and the constraint reward (CoR).

The RMS distance from a state to a demonstration set only depends on the
set's mean and second moment, so a :class:`DemoSet` keeps those and answers
distance queries in O(dim).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .cmdp import Trajectory

LABELS = ("reward_expert", "safe_expert", "other")
_TINY = np.finfo(float).tiny
_ONE_MINUS = np.nextafter(1.0, 0.0)


@dataclass(frozen=True)
class CorParams:
    alpha: float = 3.0
    lambda_r: float = 0.1
    lambda_c: float = 0.01

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.lambda_r < 0 or self.lambda_c < 0:
            raise ValueError("lambda_r and lambda_c must be nonnegative")


class DemoSet:
    """Immutable demonstration state set with sufficient statistics."""

    def __init__(self, states, label: str = "other"):
        states = np.array(states, dtype=float, ndmin=2)
        if states.ndim != 2 or states.shape[0] == 0:
            raise ValueError("a demonstration set needs at least one state")
        if not np.all(np.isfinite(states)):
            raise ValueError("demonstration states must be finite")
        if label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {label!r}")
        states.setflags(write=False)
        self.states = states
        self.label = label
        self.count = states.shape[0]
        self.dim = states.shape[1]
        self.mean = states.mean(axis=0)
        self.mean_sq_norm = float(np.mean(np.einsum("ij,ij->i", states, states)))
        centered = states - self.mean
        # mean squared distance to the centroid; Δ² = ‖s - μ‖² + spread
        self.spread = float(np.mean(np.einsum("ij,ij->i", centered, centered)))

    def __repr__(self):
        return f"DemoSet(label={self.label!r}, count={self.count}, dim={self.dim})"

    def squared_distances(self, S) -> np.ndarray:
        S = np.asarray(S, dtype=float)
        if S.shape[-1] != self.dim:
            raise ValueError(f"state dimension {S.shape[-1]} does not match demo set dimension {self.dim}")
        diff = S - self.mean
        return np.maximum(0.0, np.einsum("...i,...i->...", diff, diff) + self.spread)


def set_distance(s, demo: DemoSet) -> float:
    """RMS Euclidean distance from ``s`` to every state of ``demo``."""
    s = np.asarray(s, dtype=float)
    if s.ndim != 1:
        raise ValueError("set_distance expects a single state vector")
    return float(np.sqrt(demo.squared_distances(s)))


def set_distances(S, demo: DemoSet) -> np.ndarray:
    return np.sqrt(demo.squared_distances(np.atleast_2d(S)))


def cor_log_weight(delta, alpha: float):
    """log of (1 + Δ/α)^(-(α+1)/2)."""
    return -0.5 * (alpha + 1.0) * np.log1p(np.asarray(delta, dtype=float) / alpha)


def cor_from_distances(delta_a, delta_b, alpha: float):
    # fA / (fA + fB) written as a logistic in log space for stability
    z = cor_log_weight(delta_b, alpha) - cor_log_weight(delta_a, alpha)
    with np.errstate(over="ignore"):
        out = 1.0 / (1.0 + np.exp(z))
    # keep the value strictly inside (0, 1) when one weight saturates
    return np.clip(out, _TINY, _ONE_MINUS)


def cor(s, reward_set: DemoSet, safe_set: DemoSet, params: CorParams = CorParams()) -> float:
    """Relative closeness of ``s`` to ``reward_set`` versus ``safe_set``, in (0, 1)."""
    return float(cor_from_distances(set_distance(s, reward_set), set_distance(s, safe_set), params.alpha))


def cor_batch(S, reward_set: DemoSet, safe_set: DemoSet, params: CorParams = CorParams()) -> np.ndarray:
    return cor_from_distances(set_distances(S, reward_set), set_distances(S, safe_set), params.alpha)


class CorScorer:
    """Batched CoR evaluation with an optional feature mask and standardization.

    Standardization divides every kept feature by its standard deviation over
    the pooled demonstration states.
    """

    def __init__(
        self,
        reward_set: DemoSet,
        safe_set: DemoSet,
        params: CorParams = CorParams(),
        feature_mask: Optional[Sequence[int]] = None,
        standardize: bool = False,
    ):
        if reward_set.dim != safe_set.dim:
            raise ValueError(f"demo set dimensions differ: {reward_set.dim} vs {safe_set.dim}")
        self.dim = reward_set.dim
        self.params = params
        self.mask = None if feature_mask is None else np.asarray(feature_mask, dtype=int)
        if self.mask is not None and (self.mask.min() < 0 or self.mask.max() >= self.dim):
            raise ValueError("feature mask index out of range")
        ra, sa = self._project(reward_set.states), self._project(safe_set.states)
        self.scale = None
        if standardize:
            sd = np.vstack([ra, sa]).std(axis=0)
            self.scale = np.where(sd > 0, sd, 1.0)
            ra, sa = ra / self.scale, sa / self.scale
        if self.mask is None and self.scale is None:
            self.reward_set, self.safe_set = reward_set, safe_set
        else:
            self.reward_set = DemoSet(ra, reward_set.label)
            self.safe_set = DemoSet(sa, safe_set.label)

    def _project(self, S):
        return S if self.mask is None else S[..., self.mask]

    def __call__(self, S) -> np.ndarray:
        S = np.atleast_2d(np.asarray(S, dtype=float))
        if S.shape[-1] != self.dim:
            raise ValueError(f"state dimension {S.shape[-1]} does not match demo set dimension {self.dim}")
        X = self._project(S)
        if self.scale is not None:
            X = X / self.scale
        return cor_batch(X, self.reward_set, self.safe_set, self.params)


def annotate_cor(traj: Trajectory, reward_set: DemoSet, safe_set: DemoSet, params: CorParams = CorParams()) -> Trajectory:
    """Return a copy of ``traj`` with per-step CoR values filled in."""
    return traj.with_cors(cor_batch(traj.states, reward_set, safe_set, params))


def augment(traj: Trajectory, params: CorParams, reward_channel: bool = True, cost_channel: bool = True):
    """Shaped (rewards, costs): r + λ_r·CoR and c + λ_c·CoR per step."""
    cors = traj.cors
    return shape_channels(traj.rewards, traj.costs, cors, params, reward_channel, cost_channel)


def shape_channels(rewards, costs, cors, params: CorParams, reward_channel=True, cost_channel=True):
    lr = params.lambda_r if reward_channel else 0.0
    lc = params.lambda_c if cost_channel else 0.0
    return rewards + lr * cors, costs + lc * cors


def build_demo_set(
    trajectories: Iterable[Trajectory],
    label: str,
    max_states: Optional[int] = None,
    seed: int = 0,
) -> DemoSet:
    """Pool trajectory states into a demo set, uniformly subsampled to ``max_states``."""
    blocks = [t.states for t in trajectories]
    if not blocks:
        raise ValueError("no demonstration states")
    states = np.concatenate(blocks, axis=0)
    if max_states is not None and states.shape[0] > max_states:
        idx = np.sort(np.random.default_rng(seed).choice(states.shape[0], size=max_states, replace=False))
        states = states[idx]
    return DemoSet(states, label)


def save_demo_set(path, demo: DemoSet) -> None:
    lines = [f"dim={demo.dim} count={demo.count} label={demo.label}"]
    lines += [" ".join(f"{x:.17g}" for x in row) for row in demo.states]
    Path(path).write_text("\n".join(lines) + "\n", newline="\n")


def load_demo_set(path) -> DemoSet:
    text = Path(path).read_text().splitlines()
    if not text:
        raise ValueError(f"{path}: empty demonstration file")
    try:
        header = dict(tok.split("=", 1) for tok in text[0].split())
        dim, count, label = int(header["dim"]), int(header["count"]), header["label"]
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{path}:1: malformed header {text[0]!r}") from exc
    rows = [ln for ln in text[1:] if ln.strip()]
    if len(rows) != count:
        raise ValueError(f"{path}: header declares count={count} but file has {len(rows)} states")
    states = np.empty((count, dim))
    for i, ln in enumerate(rows):
        vals = ln.split()
        if len(vals) != dim:
            raise ValueError(f"{path}:{i + 2}: expected {dim} values, got {len(vals)}")
        states[i] = [float(v) for v in vals]
    return DemoSet(states, label)
