"""Run configuration: a flat key/value JSON document with dotted keys.

Nested objects are accepted and flattened (``{"cor": {"alpha": 3}}`` is the
same as ``{"cor.alpha": 3}``). Unknown keys are rejected.
"""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path
from typing import Any, Iterable, Optional

from .cor import CorParams
from .envs import ChainCmdpConfig, PointGoalMiniConfig
from .trainer import TrainerConfig

VARIANTS = ("baseline", "rew_only", "cost_only", "both", "bc_loglik")
VARIANT_MODES = {"baseline": "off", "rew_only": "rew_only", "cost_only": "cost_only",
                 "both": "both", "bc_loglik": "bc_loglik"}

DEFAULTS: dict[str, Any] = {
    "env.name": "point_goal_mini",
    "env.arena_half_width": 2.0,
    "env.n_hazards": 8,
    "env.hazard_radius": 0.35,
    "env.goal_radius": 0.3,
    "env.max_speed": 1.0,
    "env.dt": 0.1,
    "env.goal_bonus": 1.0,
    "env.horizon": 1000,
    "env.threshold_d": 0.025,
    "env.gamma": 0.99,
    "chain.n_states": 5,
    "chain.slip_prob": 0.1,
    "chain.rewards": [0.0, 0.0, 0.0, 0.0, 1.0],
    "chain.costs": [0.0, 0.0, 1.0, 0.0, 0.0],
    "trainer.gae_lambda": 0.95,
    "trainer.clip_ratio": 0.2,
    "trainer.max_kl": 0.001,
    "trainer.learning_rate": 3e-4,
    "trainer.value_learning_rate": 1e-3,
    "trainer.lagrange_lr": 0.05,
    "trainer.lagrange_init": 0.0,
    "trainer.epochs_per_batch": 10,
    "trainer.steps_per_batch": 4000,
    "trainer.minibatch_size": 1000,
    "trainer.total_steps": 200_000,
    "trainer.hidden_dim": 64,
    "trainer.log_std_init": -0.5,
    "trainer.bc_coef": 0.1,
    "trainer.safe_expert_d": 0.005,
    "trainer.cost_estimator": "episode",
    "cor.alpha": 3.0,
    "cor.lambda_r": 0.1,
    "cor.lambda_c": 0.01,
    "cor.max_states": 20_000,
    "cor.standardize": False,
    "cor.feature_mask": None,
    "demos.reward_path": "",
    "demos.safe_path": "",
    "demos.pairs_path": "",
    "demos.episodes": 5,
    "demos.deterministic": True,
    "experts.total_steps": 200_000,
    "experts.seed": 0,
    "pipeline.variants": ["baseline", "both"],
    "seeds": [0, 1, 2],
    "out_dir": "runs",
    "eval_episodes": 20,
    "eval.deterministic": True,
    "score.l_c": 5.0,
}

_NULLABLE_LIST = {"cor.feature_mask"}


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


def _flatten(doc: dict, prefix: str = "") -> dict:
    flat = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(_flatten(v, key + "."))
        else:
            flat[key] = v
    return flat


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if key in _NULLABLE_LIST:
        if value is None:
            return None
        if not isinstance(value, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in value):
            raise ConfigError(f"{key}: expected null or a list of integers, got {value!r}")
        return list(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return list(value)
    raise ConfigError(f"{key}: unsupported value {value!r}")


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


class RunConfig:
    """Validated flat configuration plus typed views for each module."""

    def __init__(self, values: Optional[dict] = None, base_dir: Optional[Path] = None):
        self.values = dict(DEFAULTS)
        self.base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
        for k, v in _flatten(values or {}).items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown configuration key {k!r}")
            self.values[k] = _coerce(k, v)
        self._validate()

    def __getitem__(self, key: str):
        return self.values[key]

    def with_overrides(self, overrides: Iterable[str]) -> "RunConfig":
        vals = dict(self.values)
        for text in overrides:
            k, v = parse_override(text)
            if k not in DEFAULTS:
                raise ConfigError(f"unknown configuration key {k!r}")
            vals[k] = v
        return RunConfig(vals, self.base_dir)

    def updated(self, **changes) -> "RunConfig":
        vals = dict(self.values)
        vals.update({k.replace("__", "."): v for k, v in changes.items()})
        return RunConfig(vals, self.base_dir)

    def _validate(self) -> None:
        v = self.values
        if v["env.name"] not in ("point_goal_mini", "chain"):
            raise ConfigError(f"env.name must be 'point_goal_mini' or 'chain', got {v['env.name']!r}")
        if not v["seeds"] or not all(isinstance(s, int) and not isinstance(s, bool) for s in v["seeds"]):
            raise ConfigError("seeds must be a nonempty list of integers")
        for name in v["pipeline.variants"]:
            if name not in VARIANTS:
                raise ConfigError(f"unknown variant {name!r}; choose from {VARIANTS}")
        for key in ("demos.reward_path", "demos.safe_path", "demos.pairs_path"):
            if v[key] and not self.resolve(v[key]).is_file():
                raise ConfigError(f"{key}: file {v[key]!r} does not exist")
        if v["eval_episodes"] < 1 or v["demos.episodes"] < 1:
            raise ConfigError("eval_episodes and demos.episodes must be >= 1")
        if v["score.l_c"] < 0:
            raise ConfigError("score.l_c must be >= 0")
        try:
            self.env_config()
            self.trainer_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def env_config(self):
        v = self.values
        if v["env.name"] == "chain":
            return ChainCmdpConfig(
                n_states=v["chain.n_states"], slip_prob=v["chain.slip_prob"], gamma=v["env.gamma"],
                rewards=tuple(float(x) for x in v["chain.rewards"]),
                costs=tuple(float(x) for x in v["chain.costs"]),
                horizon=v["env.horizon"], threshold_d=v["env.threshold_d"])
        return PointGoalMiniConfig(
            arena_half_width=v["env.arena_half_width"], n_hazards=v["env.n_hazards"],
            hazard_radius=v["env.hazard_radius"], goal_radius=v["env.goal_radius"],
            max_speed=v["env.max_speed"], horizon=v["env.horizon"], threshold_d=v["env.threshold_d"],
            gamma=v["env.gamma"], dt=v["env.dt"], goal_bonus=v["env.goal_bonus"])

    def cor_params(self) -> CorParams:
        v = self.values
        return CorParams(v["cor.alpha"], v["cor.lambda_r"], v["cor.lambda_c"])

    def trainer_config(self, **changes) -> TrainerConfig:
        v = self.values
        cfg = TrainerConfig(
            gamma=v["env.gamma"],
            cor=self.cor_params(),
            **{k.split(".", 1)[1]: val for k, val in v.items() if k.startswith("trainer.")},
        )
        return replace(cfg, **changes) if changes else cfg

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.values, indent=2, sort_keys=True) + "\n", newline="\n")


def load_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        p = Path(path)
        try:
            doc = json.loads(p.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        cfg = RunConfig(doc, p.parent)
    return cfg.with_overrides(overrides) if overrides else cfg
