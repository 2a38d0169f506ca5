"""Command-line entry point for the laboratory.

    lab train --config configs/default.conf --variant drl_ek --seed 0
    lab eval --config configs/default.conf --variant drl_ek --seed 0
    lab sweep --config configs/default.conf
    lab plot outputs/drl_ek_seed0.csv
    lab compare outputs/a3c_seed0.csv outputs/a3c_area_seed0.csv
    lab order --better a3c_area --worse a3c --seeds 0,1,2,3,4
    lab rules check rules/default.rules
    lab detector calibrate --frames 10000

Exit status is 0 on success, 1 on any error (one line on stderr) and 2 on
bad arguments.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import pandas as pd

from app.config import settings
from ml import env as world
from ml.detector_sim import measure_error_mix
from ml.harness import (
    ORDERINGS,
    MetricsLog,
    compare_table,
    emit_plots,
    evaluate,
    load_checkpoint,
    load_config,
    ordering_check,
    run_paths,
    sweep,
    train,
)
from ml.knowledge_decision import count_rules, load_rules

logger = logging.getLogger("ml.cli")

LOG_FORMAT = "ts=%(asctime)s level=%(levelname)s logger=%(name)s msg=%(message)s"


def configure_logging(level: str) -> None:
    logging.basicConfig(level=level.upper(), format=LOG_FORMAT, stream=sys.stderr)


def _seeds(value: str) -> List[int]:
    try:
        return [int(s) for s in value.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {value!r}")


def _experiment(args: argparse.Namespace):
    overrides = list(args.set or [])
    if getattr(args, "variant", None):
        overrides.append(f"variant={args.variant}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seeds={args.seed}")
    if getattr(args, "episodes", None) is not None:
        overrides.append(f"episodes={args.episodes}")
    if getattr(args, "output_dir", None):
        overrides.append(f"output_dir={args.output_dir}")
    config_path = args.config
    if config_path is None and Path(settings.DEFAULT_CONFIG_PATH).exists():
        config_path = settings.DEFAULT_CONFIG_PATH
    return load_config(config_path, overrides)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _experiment(args)
    for seed, log in train(cfg, plots=not args.no_plots).items():
        print(f"{cfg.variant} seed={seed} episodes={len(log)} "
              f"mean_reward={log.tail(cfg.window).mean():.4f} csv={run_paths(cfg, seed)['csv']}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _experiment(args)
    for seed in cfg.seeds:
        paths = run_paths(cfg, seed)
        agent = load_checkpoint(args.checkpoint or paths["checkpoint"])
        log = evaluate(agent, cfg, args.eval_episodes, seed)
        out = log.write_csv(run_paths(cfg, seed, "_eval")["csv"])
        rewards = log.rewards
        print(f"{cfg.variant} seed={seed} eval_episodes={len(log)} "
              f"mean_reward={rewards.mean():.4f} std_reward={rewards.std():.4f} csv={out}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _experiment(args)
    table = sweep(cfg)
    out = Path(cfg.output_dir) / "sweep.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out, index=False, lineterminator="\n")
    print(table.to_csv(index=False, lineterminator="\n"), end="")
    return 0


def cmd_plot(args: argparse.Namespace) -> int:
    log = MetricsLog.read_csv(args.log)
    out_dir = args.out_dir or str(Path(args.log).parent)
    for path in emit_plots(log, out_dir, Path(args.log).stem, args.window):
        print(path)
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    logs = {}
    for path in args.logs:
        log = MetricsLog.read_csv(path)
        logs[log.variant] = log
    print(compare_table(logs, args.tail).to_csv(index=False, lineterminator="\n"), end="")
    return 0


def cmd_order(args: argparse.Namespace) -> int:
    cfg = _experiment(args)
    pairs = [(args.better, args.worse, args.allow_equal)] if args.better else list(ORDERINGS)
    failed = 0
    for better, worse, allow_equal in pairs:
        result = ordering_check(cfg, better, worse, args.seeds, args.tail, allow_equal)
        status = "pass" if result.passed else "fail"
        print(f"{better} {'>=' if allow_equal else '>'} {worse}: "
              f"{result.wins}/{result.total} seeds ({status})")
        failed += not result.passed
    if failed:
        print(f"error: {failed} ordering(s) did not hold", file=sys.stderr)
        return 1
    return 0


def cmd_rules_check(args: argparse.Namespace) -> int:
    rules = load_rules(args.file)
    print(f"{args.file}: {count_rules(rules)} rules")
    return 0


def cmd_detector_calibrate(args: argparse.Namespace) -> int:
    cfg = _experiment(args)
    views = world.random_views(cfg.world, args.frames, seed=args.seed)
    mix = measure_error_mix(cfg.detector, args.frames, views, seed=args.seed)
    rows = [("fp_share", mix.fp_share), ("fn_share", mix.fn_share),
            ("false_positives", mix.false_positives), ("false_negatives", mix.false_negatives),
            ("frames", mix.frames)]
    rows += [(f"precision_{kind}", p) for kind, p in mix.precision_per_kind.items()]
    print(pd.DataFrame(rows, columns=["metric", "value"]).to_csv(index=False, lineterminator="\n"), end="")
    return 0


def _add_experiment_args(p: argparse.ArgumentParser, variant: bool = True) -> None:
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    if variant:
        p.add_argument("--variant", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--output-dir", dest="output_dir", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lab", description="Knowledge-injected RL laboratory")
    parser.add_argument("--log-level", default=settings.LOG_LEVEL)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a variant and write metrics, checkpoint and plots")
    _add_experiment_args(p)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint with learning frozen")
    _add_experiment_args(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--eval-episodes", dest="eval_episodes", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="meta-learner grid over areas, layers and sizes")
    _add_experiment_args(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="reward and selection-share curves from a metrics CSV")
    p.add_argument("log")
    p.add_argument("--out-dir", dest="out_dir", default=None)
    p.add_argument("--window", type=int, default=100)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("compare", help="mean and std of the last episodes per metrics CSV")
    p.add_argument("logs", nargs="+")
    p.add_argument("--tail", type=int, default=100)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("order", help="check that one variant beats another across seeds")
    _add_experiment_args(p, variant=False)
    p.add_argument("--better", default=None)
    p.add_argument("--worse", default=None)
    p.add_argument("--allow-equal", dest="allow_equal", action="store_true")
    p.add_argument("--seeds", type=_seeds, default=None)
    p.add_argument("--tail", type=int, default=200)
    p.set_defaults(func=cmd_order)

    rules = sub.add_parser("rules", help="rules DSL tools")
    rules_sub = rules.add_subparsers(dest="rules_command", required=True)
    p = rules_sub.add_parser("check", help="parse a rules file and count its rules")
    p.add_argument("file")
    p.set_defaults(func=cmd_rules_check)

    detector = sub.add_parser("detector", help="simulated detector tools")
    detector_sub = detector.add_subparsers(dest="detector_command", required=True)
    p = detector_sub.add_parser("calibrate", help="measure the error mix on random views")
    _add_experiment_args(p, variant=False)
    p.add_argument("--frames", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_detector_calibrate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "better", None) is not None and args.worse is None:
        parser.error("--better requires --worse")
    configure_logging(args.log_level)
    try:
        return args.func(args)
    except Exception as e:
        logger.debug("command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
