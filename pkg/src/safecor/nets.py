"""Two-hidden-layer ReLU networks with hand-written backpropagation.

Parameters are plain lists of float64 arrays so that the optimizer,
checkpointing and finite-difference checks can treat every network the
same way.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Optional

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_LOG_2PI = math.log(2.0 * math.pi)


def orthogonal(shape, rng: np.random.Generator, gain: float = 1.0) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class Mlp:
    """``in -> hidden -> hidden -> out`` with ReLU activations; weights stored as (in, out)."""

    def __init__(self, in_dim: int, out_dim: int, hidden_dim: int = 64,
                 rng: Optional[np.random.Generator] = None, out_gain: float = 1.0):
        self.sizes = (in_dim, hidden_dim, hidden_dim, out_dim)
        self.hidden_dim = hidden_dim
        self.params: list[np.ndarray] = []
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            if rng is None:
                W = np.zeros((a, b))
            else:
                W = orthogonal((a, b), rng, out_gain if i == 2 else 1.0)
            self.params += [W, np.zeros(b)]

    def forward(self, X, keep: bool = False):
        X = np.asarray(X, dtype=float)
        acts = [X]
        h = X
        for i in range(3):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            z = h @ W + b
            if not np.all(np.isfinite(z)):
                raise FloatingPointError(f"non-finite pre-activation in layer {i}")
            h = np.maximum(z, 0.0) if i < 2 else z
            acts.append(h)
        return (h, acts) if keep else h

    def backward(self, acts, grad_out) -> list[np.ndarray]:
        grads: list[np.ndarray] = [None] * 6
        g = grad_out
        for i in (2, 1, 0):
            if i < 2:
                g = g * (acts[i + 1] > 0.0)
            h_in = acts[i]
            grads[2 * i] = h_in.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = g @ self.params[2 * i].T
            if not np.all(np.isfinite(grads[2 * i])):
                raise FloatingPointError(f"non-finite gradient in layer {i}")
        return grads


class GaussianPolicy:
    """Diagonal Gaussian policy with a state-independent log standard deviation."""

    def __init__(self, obs_dim: int, act_dim: int, hidden_dim: int = 64,
                 rng: Optional[np.random.Generator] = None, log_std_init: float = -0.5):
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.net = Mlp(obs_dim, act_dim, hidden_dim, rng, out_gain=0.01)
        self.log_std = np.full(act_dim, float(np.clip(log_std_init, LOG_STD_MIN, LOG_STD_MAX)))

    @property
    def params(self) -> list[np.ndarray]:
        return self.net.params + [self.log_std]

    def project(self) -> None:
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)

    def forward(self, S):
        """Return (mean, std); ``mean`` has one row per state."""
        if not np.all(np.isfinite(self.log_std)):
            raise FloatingPointError("non-finite log_std")
        S = np.asarray(S, dtype=float)
        mean = self.net.forward(S)
        return mean, np.exp(self.log_std)

    def log_prob(self, S, A) -> np.ndarray:
        mean, std = self.forward(np.atleast_2d(S))
        z = (np.atleast_2d(A) - mean) / std
        return -0.5 * np.sum(z * z, axis=-1) - np.sum(self.log_std) - 0.5 * self.act_dim * _LOG_2PI

    def sample(self, S, rng: np.random.Generator):
        """Sample one action per state row; returns (actions, log_probs)."""
        mean, std = self.forward(np.atleast_2d(S))
        eps = rng.standard_normal(mean.shape)
        A = mean + std * eps
        logp = -0.5 * np.sum(eps * eps, axis=-1) - np.sum(self.log_std) - 0.5 * self.act_dim * _LOG_2PI
        return A, logp

    def log_prob_backward(self, S, A, weights):
        """Gradient of ``sum_i weights[i] * log pi(A[i] | S[i])``; returns (log_probs, grads)."""
        S, A = np.atleast_2d(S), np.atleast_2d(A)
        mean, acts = self.net.forward(S, keep=True)
        std = np.exp(self.log_std)
        diff = A - mean
        z = diff / std
        logp = -0.5 * np.sum(z * z, axis=-1) - np.sum(self.log_std) - 0.5 * self.act_dim * _LOG_2PI
        w = np.asarray(weights, dtype=float).reshape(-1, 1)
        g_mean = w * diff / (std * std)
        grads = self.net.backward(acts, g_mean)
        grads.append(np.sum(w * (z * z - 1.0), axis=0))
        return logp, grads

    def log_prob_and_grad(self, s, a):
        logp, grads = self.log_prob_backward(np.atleast_2d(s), np.atleast_2d(a), [1.0])
        return float(logp[0]), grads

    def kl_from(self, S, old_mean, old_log_std) -> float:
        """Mean over states of KL(current || old)."""
        mean, std = self.forward(S)
        old_std = np.exp(old_log_std)
        kl = (old_log_std - self.log_std) + (std ** 2 + (mean - old_mean) ** 2) / (2.0 * old_std ** 2) - 0.5
        return float(np.mean(np.sum(kl, axis=-1)))


class ValueNet:
    """Scalar state-value head."""

    def __init__(self, obs_dim: int, hidden_dim: int = 64, rng: Optional[np.random.Generator] = None):
        self.obs_dim = obs_dim
        self.net = Mlp(obs_dim, 1, hidden_dim, rng, out_gain=1.0)

    @property
    def params(self) -> list[np.ndarray]:
        return self.net.params

    def forward(self, S) -> np.ndarray:
        return self.net.forward(np.atleast_2d(S))[:, 0]

    def forward_and_grad(self, s):
        out, acts = self.net.forward(np.atleast_2d(s), keep=True)
        return float(out[0, 0]), self.net.backward(acts, np.ones((1, 1)))

    def mse_and_grad(self, S, targets):
        """0.5 * mean squared error against ``targets`` and its gradient."""
        out, acts = self.net.forward(np.atleast_2d(S), keep=True)
        err = out[:, 0] - np.asarray(targets, dtype=float)
        n = err.shape[0]
        grads = self.net.backward(acts, (err / n)[:, None])
        return 0.5 * float(np.mean(err * err)), grads


def flatten(params) -> np.ndarray:
    return np.concatenate([np.ravel(p) for p in params])


def assign_flat(params, flat) -> None:
    flat = np.asarray(flat, dtype=float)
    i = 0
    for p in params:
        p[...] = flat[i:i + p.size].reshape(p.shape)
        i += p.size
    if i != flat.size:
        raise ValueError(f"flat vector has {flat.size} entries, parameters need {i}")


class Adam:
    """Adaptive-moment optimizer that minimizes; parameters are updated in place."""

    def __init__(self, params, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        for p in self.params:
            if not np.all(np.isfinite(p)):
                raise FloatingPointError("optimizer step produced non-finite parameters")

    def snapshot(self):
        return ([p.copy() for p in self.params], [m.copy() for m in self.m],
                [v.copy() for v in self.v], self.t)

    def restore(self, snap) -> None:
        ps, ms, vs, t = snap
        for dst, src in zip(self.params, ps):
            dst[...] = src
        for dst, src in zip(self.m, ms):
            dst[...] = src
        for dst, src in zip(self.v, vs):
            dst[...] = src
        self.t = t


# -- checkpoints ------------------------------------------------------------

_MAGIC = "safecor-checkpoint 1"
_PARAM_NAMES = ("W0", "b0", "W1", "b1", "W2", "b2")


def _named_params(policy: GaussianPolicy, reward_value: ValueNet, cost_value: ValueNet):
    named = [(f"policy.{n}", p) for n, p in zip(_PARAM_NAMES, policy.net.params)]
    named.append(("policy.log_std", policy.log_std))
    named += [(f"reward_value.{n}", p) for n, p in zip(_PARAM_NAMES, reward_value.params)]
    named += [(f"cost_value.{n}", p) for n, p in zip(_PARAM_NAMES, cost_value.params)]
    return named


def save_checkpoint(path, policy: GaussianPolicy, reward_value: ValueNet, cost_value: ValueNet) -> None:
    named = _named_params(policy, reward_value, cost_value)
    lines = [
        _MAGIC,
        f"obs_dim={policy.obs_dim} act_dim={policy.act_dim} hidden_dim={policy.net.hidden_dim} "
        f"log_std_min={LOG_STD_MIN:.17g} log_std_max={LOG_STD_MAX:.17g}",
    ]
    lines += [f"{name} " + " ".join(str(d) for d in p.shape) for name, p in named]
    flat = flatten([p for _, p in named])
    lines.append(f"params {flat.size}")
    lines += [f"{x:.17g}" for x in flat]
    Path(path).write_text("\n".join(lines) + "\n", newline="\n")


def load_checkpoint(path):
    """Return (policy, reward_value, cost_value) restored from ``path``."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != _MAGIC:
        raise ValueError(f"{path}: not a safecor checkpoint")
    try:
        header = dict(tok.split("=", 1) for tok in lines[1].split())
        obs_dim, act_dim, hidden = int(header["obs_dim"]), int(header["act_dim"]), int(header["hidden_dim"])
    except (KeyError, ValueError, IndexError) as exc:
        raise ValueError(f"{path}:2: malformed header") from exc
    policy = GaussianPolicy(obs_dim, act_dim, hidden)
    rv, cv = ValueNet(obs_dim, hidden), ValueNet(obs_dim, hidden)
    named = _named_params(policy, rv, cv)
    for i, (name, p) in enumerate(named):
        toks = lines[2 + i].split()
        if toks[0] != name or tuple(int(t) for t in toks[1:]) != p.shape:
            raise ValueError(f"{path}:{3 + i}: expected {name} with shape {p.shape}, got {lines[2 + i]!r}")
    k = 2 + len(named)
    count = int(lines[k].split()[1])
    values = np.array([float(x) for x in lines[k + 1:k + 1 + count]])
    if values.size != count:
        raise ValueError(f"{path}: truncated parameter list")
    assign_flat([p for _, p in named], values)
    return policy, rv, cv
