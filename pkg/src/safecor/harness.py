"""Experiment orchestration: evaluation, the expert pipeline and the ablation grid."""

from __future__ import annotations

import csv
import logging
import statistics
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import VARIANT_MODES, VARIANTS, RunConfig
from .cor import DemoSet, build_demo_set, load_demo_set, save_demo_set
from .envs import make_env
from .nets import GaussianPolicy, load_checkpoint
from .plots import emit_plots
from .trainer import collect_rollouts, episode_seed, read_metrics_csv, train

log = logging.getLogger(__name__)

_EVAL_STREAM = 7919
_DEMO_STREAM = 104729


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


@dataclass(frozen=True)
class ScoreParams:
    l_c: float = 5.0

    def __post_init__(self):
        if self.l_c < 0:
            raise ValueError("l_c must be >= 0")


def score(reward: float, cost: float, params: ScoreParams = ScoreParams()) -> float:
    return reward - params.l_c * cost


@dataclass
class MetricsRow:
    reward_return: float
    cost_return: float
    cv: float
    total_cv: float
    cost_rate: float
    score: float


@dataclass
class EvalResult:
    aggregate: MetricsRow
    episodes: list[dict]


EPISODE_COLUMNS = ("seed", "episode", "reward_return", "cost_return", "cv", "cost_rate", "score")
COMPARISON_COLUMNS = ("variant", "seed", "reward_return", "cost_return", "cv", "total_cv", "cost_rate", "score")


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return repr(float(x))


def write_table(path, columns: Sequence[str], rows: Sequence[dict]) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
    return Path(path)


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if None in rec or any(v is None for v in rec.values()):
                raise ValueError(f"{path}:{lineno}: wrong number of fields")
            rows.append(rec)
        return rows


def evaluate(checkpoint, env_config, n_episodes: int, seeds: Sequence[int],
             score_params: ScoreParams = ScoreParams(), deterministic: bool = True,
             total_cv: float = float("nan")) -> EvalResult:
    """Roll the policy for ``n_episodes`` per seed and aggregate the metric suite.

    ``checkpoint`` is a path or a :class:`GaussianPolicy`. Constraint violations
    count cost-positive steps; returns are undiscounted per-episode sums.
    """
    policy = checkpoint if isinstance(checkpoint, GaussianPolicy) else load_checkpoint(checkpoint)[0]
    env = make_env(env_config)
    if (policy.obs_dim, policy.act_dim) != (env.obs_dim, env.act_dim):
        raise ValueError(f"checkpoint dims (obs={policy.obs_dim}, act={policy.act_dim}) do not match "
                         f"environment dims (obs={env.obs_dim}, act={env.act_dim})")
    horizon = env.spec.horizon
    episodes = []
    for seed in seeds:
        rng = np.random.default_rng(np.random.SeedSequence([seed, _EVAL_STREAM]))
        ep_seeds = [episode_seed(seed, _EVAL_STREAM, k) for k in range(n_episodes)]
        batch = collect_rollouts(policy, env_config, n_episodes * horizon, rng, ep_seeds,
                                 deterministic=deterministic)
        for k, (a, b) in enumerate(batch.bounds):
            rew = float(np.sum(batch.rewards[a:b]))
            cost = float(np.sum(batch.costs[a:b]))
            episodes.append({
                "seed": seed, "episode": k, "reward_return": rew, "cost_return": cost,
                "cv": int(np.count_nonzero(batch.costs[a:b] > 0)), "cost_rate": cost / (b - a),
                "score": score(rew, cost, score_params),
            })
    agg = {c: float(np.mean([e[c] for e in episodes])) for c in ("reward_return", "cost_return", "cv",
                                                                  "cost_rate", "score")}
    return EvalResult(MetricsRow(total_cv=total_cv, **agg), episodes)


def generate_demos(checkpoint, env_config, episodes: int, seed: int, label: str,
                   deterministic: bool = True, max_states: Optional[int] = None):
    """Roll an expert and return (state DemoSet, state-action pair DemoSet)."""
    policy = load_checkpoint(checkpoint)[0]
    horizon = make_env(env_config).spec.horizon
    rng = np.random.default_rng(np.random.SeedSequence([seed, _DEMO_STREAM]))
    ep_seeds = [episode_seed(seed, _DEMO_STREAM, k) for k in range(episodes)]
    batch = collect_rollouts(policy, env_config, episodes * horizon, rng, ep_seeds,
                             deterministic=deterministic)
    demo = build_demo_set(batch.trajectories, label, max_states, seed)
    pairs = DemoSet(np.hstack([batch.states, batch.actions]), "other")
    return demo, pairs


# -- pipeline -----------------------------------------------------------------

def _stage(name):
    def wrap(fn):
        def run(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except PipelineError:
                raise
            except Exception as exc:
                raise PipelineError(name, exc) from exc
        return run
    return wrap


def _trained(run_dir: Path) -> bool:
    return (run_dir / "checkpoint.txt").is_file() and (run_dir / "metrics.csv").is_file()


@_stage("experts")
def train_experts(cfg: RunConfig, out: Path) -> dict[str, Path]:
    env_cfg = cfg.env_config()
    dirs = {}
    for mode in ("reward_expert", "safe_expert"):
        d = out / "experts" / mode
        if not _trained(d):
            log.info("training %s", mode)
            tc = cfg.trainer_config(expert_mode=mode, ablation_mode="off",
                                    total_steps=cfg["experts.total_steps"], seed=cfg["experts.seed"])
            train(tc, env_cfg, out_dir=d)
        dirs[mode] = d
    return dirs


@_stage("demos")
def write_demos(cfg: RunConfig, out: Path, expert_dirs: dict[str, Path]) -> dict[str, Path]:
    d = out / "demos"
    d.mkdir(parents=True, exist_ok=True)
    paths = {"reward": d / "reward_expert.txt", "safe": d / "safe_expert.txt",
             "pairs": d / "reward_expert_pairs.txt"}
    if all(p.is_file() for p in paths.values()):
        return paths
    env_cfg = cfg.env_config()
    for mode, key in (("reward_expert", "reward"), ("safe_expert", "safe")):
        demo, pairs = generate_demos(expert_dirs[mode] / "checkpoint.txt", env_cfg, cfg["demos.episodes"],
                                     cfg["experts.seed"], mode, cfg["demos.deterministic"],
                                     cfg["cor.max_states"])
        save_demo_set(paths[key], demo)
        if mode == "reward_expert":
            save_demo_set(paths["pairs"], pairs)
    return paths


def resolve_demos(cfg: RunConfig, out: Path) -> Optional[dict[str, Path]]:
    if cfg["demos.reward_path"] and cfg["demos.safe_path"]:
        paths = {"reward": cfg.resolve(cfg["demos.reward_path"]), "safe": cfg.resolve(cfg["demos.safe_path"])}
        if cfg["demos.pairs_path"]:
            paths["pairs"] = cfg.resolve(cfg["demos.pairs_path"])
        return paths
    d = out / "demos"
    paths = {"reward": d / "reward_expert.txt", "safe": d / "safe_expert.txt",
             "pairs": d / "reward_expert_pairs.txt"}
    return paths if paths["reward"].is_file() and paths["safe"].is_file() else None


def train_variant(cfg: RunConfig, variant: str, seed: int, run_dir: Path, demos: Optional[dict]) -> Path:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if _trained(run_dir):
        return run_dir
    tc = cfg.trainer_config(ablation_mode=VARIANT_MODES[variant], seed=seed)
    sets = {}
    if demos is not None:
        sets["reward_set"] = load_demo_set(demos["reward"])
        sets["safe_set"] = load_demo_set(demos["safe"])
        if variant == "bc_loglik":
            if "pairs" not in demos or not Path(demos["pairs"]).is_file():
                raise FileNotFoundError("bc_loglik needs a reward-expert state-action pair file")
            sets["expert_pairs"] = load_demo_set(demos["pairs"])
    train(tc, cfg.env_config(), out_dir=run_dir, feature_mask=cfg["cor.feature_mask"],
          standardize=cfg["cor.standardize"], **sets)
    return run_dir


def evaluate_run(cfg: RunConfig, variant: str, seed: int, run_dir: Path) -> dict:
    log_rows = read_metrics_csv(run_dir / "metrics.csv")
    total_cv = log_rows[-1]["total_cv"] if log_rows else 0
    res = evaluate(run_dir / "checkpoint.txt", cfg.env_config(), cfg["eval_episodes"], [seed],
                   ScoreParams(cfg["score.l_c"]), cfg["eval.deterministic"], total_cv)
    write_table(run_dir / "eval_episodes.csv", EPISODE_COLUMNS, res.episodes)
    row = {"variant": variant, "seed": seed, **asdict(res.aggregate)}
    row["total_cv"] = int(total_cv)
    return row


def _run_grid(cfg: RunConfig, out: Path, variants, demos, stage_prefix: str) -> list[dict]:
    run_dirs = {}

    @_stage(f"{stage_prefix}-train")
    def _train():
        for variant in variants:
            for seed in cfg["seeds"]:
                d = out / "runs" / variant / f"seed{seed}"
                log.info("training %s seed %d", variant, seed)
                run_dirs[variant, seed] = train_variant(cfg, variant, seed, d, demos)

    @_stage(f"{stage_prefix}-eval")
    def _eval():
        return [evaluate_run(cfg, v, s, run_dirs[v, s]) for v in variants for s in cfg["seeds"]]

    _train()
    return _eval()


def run_pipeline(cfg: RunConfig, out_dir=None) -> Path:
    """Experts -> demonstrations -> per-seed agents -> evaluation table and plots."""
    out = Path(out_dir if out_dir is not None else cfg.resolve(cfg["out_dir"]))
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.json")
    demos = resolve_demos(cfg, out) if cfg["demos.reward_path"] else None
    if demos is None:
        demos = write_demos(cfg, out, train_experts(cfg, out))
    variants = list(cfg["pipeline.variants"])
    rows = _run_grid(cfg, out, variants, demos, "agents")
    write_table(out / "comparison.csv", COMPARISON_COLUMNS, rows)
    _plot_runs(cfg, out, variants)
    return out


def _plot_runs(cfg: RunConfig, out: Path, variants) -> None:
    metrics = {v: [out / "runs" / v / f"seed{s}" / "metrics.csv" for s in cfg["seeds"]] for v in variants}
    emit_plots(metrics, out / "plots", cfg["env.threshold_d"])


def median_rows(rows: Sequence[dict], variants) -> list[dict]:
    out = []
    for v in variants:
        mine = [r for r in rows if r["variant"] == v]
        med = {"variant": v, "seed": "median"}
        for c in COMPARISON_COLUMNS[2:]:
            med[c] = float(statistics.median(float(r[c]) for r in mine))
        out.append(med)
    return out


def ablation_grid(cfg: RunConfig, out_dir=None) -> Path:
    """All five variants across seeds plus one median row per variant."""
    out = Path(out_dir if out_dir is not None else cfg.resolve(cfg["out_dir"]))
    out.mkdir(parents=True, exist_ok=True)
    demos = resolve_demos(cfg, out)
    if demos is None:
        raise PipelineError("ablation", FileNotFoundError("demonstration files not found; run the pipeline first"))
    rows = _run_grid(cfg, out, VARIANTS, demos, "ablation")
    rows += median_rows(rows, VARIANTS)
    path = write_table(out / "ablation.csv", COMPARISON_COLUMNS, rows)
    _plot_runs(cfg, out, VARIANTS)
    return path
