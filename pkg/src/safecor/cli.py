"""Command line entry point: ``safecor <command> [--config ...] [--override key=value ...]``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .config import VARIANTS, ConfigError, load_config
from .cor import load_demo_set, save_demo_set
from .plots import emit_plots
from .trainer import read_metrics_csv, train

log = logging.getLogger("safecor")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="single seed (replaces the seeds list)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-key override, may be repeated")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safecor", description="Safe CoR constrained RL experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one agent or expert")
    _common(p)
    p.add_argument("--variant", choices=VARIANTS, default="baseline")
    p.add_argument("--expert", choices=("reward_expert", "safe_expert"),
                   help="train an expert instead of an agent")

    p = sub.add_parser("gen-demos", help="roll an expert checkpoint into a demonstration file")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--label", choices=("reward_expert", "safe_expert"), required=True)
    p.add_argument("--pairs", help="also write state-action pairs to this file")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("pipeline", help="experts, demos, agents and comparison table")
    _common(p)

    p = sub.add_parser("ablate", help="run the five-variant ablation grid")
    _common(p)

    p = sub.add_parser("plot", help="SVG charts from metrics CSVs")
    _common(p)
    p.add_argument("metrics", nargs="+", metavar="NAME=CSV",
                   help="series name and metrics log; repeat a name to average seeds")
    return parser


def _load(args):
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seeds=[{args.seed}]")
    return load_config(args.config, overrides)


def _out(args, cfg) -> Path:
    return Path(args.out) if args.out else cfg.resolve(cfg["out_dir"])


def run(args) -> None:
    cfg = _load(args)
    out = _out(args, cfg)
    seed = cfg["seeds"][0]
    if args.command == "train":
        if args.expert:
            tc = cfg.trainer_config(expert_mode=args.expert, seed=seed)
            res = train(tc, cfg.env_config(), out_dir=out)
            print(res.checkpoint)
        else:
            demos = harness.resolve_demos(cfg, out)
            harness.train_variant(cfg, args.variant, seed, out, demos)
            print(out / "checkpoint.txt")
    elif args.command == "gen-demos":
        out.mkdir(parents=True, exist_ok=True)
        demo, pairs = harness.generate_demos(args.checkpoint, cfg.env_config(), cfg["demos.episodes"], seed,
                                             args.label, cfg["demos.deterministic"], cfg["cor.max_states"])
        path = out / f"{args.label}.txt"
        save_demo_set(path, demo)
        if args.pairs:
            save_demo_set(args.pairs, pairs)
        # verify the written file before reporting success
        if load_demo_set(path).count != demo.count:
            raise RuntimeError(f"demo file {path} failed to round-trip")
        print(path)
    elif args.command == "eval":
        out.mkdir(parents=True, exist_ok=True)
        res = harness.evaluate(args.checkpoint, cfg.env_config(), cfg["eval_episodes"], cfg["seeds"],
                               harness.ScoreParams(cfg["score.l_c"]), cfg["eval.deterministic"])
        harness.write_table(out / "eval_episodes.csv", harness.EPISODE_COLUMNS, res.episodes)
        agg = res.aggregate
        print(f"reward_return={agg.reward_return:.4f} cost_return={agg.cost_return:.4f} cv={agg.cv:.4f} "
              f"cost_rate={agg.cost_rate:.5f} score={agg.score:.4f}")
    elif args.command == "pipeline":
        print(harness.run_pipeline(cfg, out) / "comparison.csv")
    elif args.command == "ablate":
        print(harness.ablation_grid(cfg, out))
    elif args.command == "plot":
        metrics: dict[str, list] = {}
        for item in args.metrics:
            name, sep, path = item.partition("=")
            if not sep:
                name, path = Path(item).parent.name or "run", item
            read_metrics_csv(path)
            metrics.setdefault(name, []).append(path)
        for p in emit_plots(metrics, out, cfg["env.threshold_d"]):
            print(p)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
