"""Command-line front door.

Every subcommand reads the global configuration (``--config``) and exits with
0 on success, 1 when a run recorded a failure and 2 on a configuration error.
"""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from kinoctl.config import ConfigManager
from kinoctl.control_runtime import load_path, measure_plan_budget, save_path
from kinoctl.evaluation import (
    CONNECT_GOAL,
    CONNECT_START,
    BUILTIN_PATHS,
    builtin_path,
    eval_connectivity,
    eval_path_following,
    recompute_report,
    speed_trend,
    write_report,
)
from kinoctl.exceptions import ConfigError, KinoctlError
from kinoctl.fkd_model import (
    FkdModel,
    OracleFkdModel,
    load_fkd_model,
    open_loop_position_rmse,
    save_fkd_model,
    train_fkd,
)
from kinoctl.geometry import wrap_angle
from kinoctl.ikd_baseline import IkdModel, load_ikd_model, save_ikd_model, train_ikd
from kinoctl.logging import configure_from_section, get_logger
from kinoctl.nlls_opt import SquashMap, solve_optimal_connectivity, write_cost_table
from kinoctl.traj_data import generate_dataset, load_dataset

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2

ORACLE = "oracle"


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kinoctl", description="Learned forward kinodynamic control stack")
    parser.add_argument("--config", help="YAML or JSON configuration file")
    parser.add_argument("--env-file", help=".env file with configuration overrides")
    parser.add_argument("--log-level", help="overrides logging.level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="simulate excitation trajectories into a dataset directory")
    p.add_argument("--out", required=True)

    for name in ("train-fkd", "train-ikd"):
        p = sub.add_parser(name, help=f"train the {name[6:]} network on a dataset")
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)

    p = sub.add_parser("run-follow", help="path-following experiment")
    p.add_argument("--model", help=f"forward model file, or '{ORACLE}' for the simulator-backed model")
    p.add_argument("--ikd", help="inverse model file")
    p.add_argument("--path", action="append", help="built-in path name or path JSON file (repeatable)")
    p.add_argument("--speeds", type=_floats, help="comma-separated speeds in m/s")
    p.add_argument("--rollouts", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("run-connect", help="connectivity experiment")
    p.add_argument("--model", help=f"forward model file, or '{ORACLE}'")
    p.add_argument("--ikd", help="inverse model file")
    p.add_argument("--line", help="racing line for the inverse model (name or JSON file)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="recompute a report from an experiment directory")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--report", required=True)

    p = sub.add_parser("paths", help="write a built-in path")
    p.add_argument("--name", required=True, choices=sorted(BUILTIN_PATHS))
    p.add_argument("--out", required=True)

    p = sub.add_parser("budget", help="time path-following planning cycles against the real-time budget")
    p.add_argument("--model", required=True)
    p.add_argument("--path", default="rounded_rectangle")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--out")

    p = sub.add_parser("rmse", help="open-loop position error of a forward model on a dataset's validation split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    return parser


def _load_path(name: str):
    if name in BUILTIN_PATHS:
        return builtin_path(name)
    return load_path(name)


def _load_fkd(ref: Optional[str], cm: ConfigManager) -> Optional[FkdModel]:
    if ref is None:
        return None
    if ref == ORACLE:
        return OracleFkdModel(cm.get_sim_params(), cm.get_window_spec())
    return load_fkd_model(ref)


def _load_ikd(ref: Optional[str], cm: ConfigManager) -> Optional[IkdModel]:
    return None if ref is None else load_ikd_model(ref, cm.get_sim_params())


def cmd_gen_data(args, cm: ConfigManager) -> int:
    manifest = generate_dataset(cm.get_data_config(), cm.get_sim_params(), cm.get_window_spec(), args.out)
    cm.save_config(Path(args.out) / "config.yml")
    print(manifest)
    return EXIT_OK


def cmd_train(args, cm: ConfigManager) -> int:
    dataset = load_dataset(args.data)
    spec = cm.get_window_spec()
    cfg = cm.get_train_config()
    if args.command == "train-fkd":
        model = train_fkd(dataset, spec, cfg)
        save_fkd_model(model, args.out)
    else:
        model = train_ikd(dataset, spec, cfg, cm.get_sim_params())
        save_ikd_model(model, args.out)
    summary = model.training
    logger.info("Training finished", kind=model.kind, out=args.out,
                validation_loss=summary.validation_loss[-1] if summary and summary.validation_loss else None)
    return EXIT_OK


def cmd_run_follow(args, cm: ConfigManager) -> int:
    model, ikd = _load_fkd(args.model, cm), _load_ikd(args.ikd, cm)
    cfg = cm.get_eval_config()
    overrides = {}
    if args.speeds:
        overrides["speeds"] = tuple(args.speeds)
    if args.rollouts is not None:
        overrides["rollouts"] = args.rollouts
    if overrides:
        cfg = replace(cfg, **overrides)
    names = args.path or list(cfg.paths)
    paths = {Path(n).stem if n not in BUILTIN_PATHS else n: _load_path(n) for n in names}
    report = eval_path_following(model, ikd, paths, cfg, cm.get_runtime_config(), cm.get_sim_params(),
                                 cm.get_window_spec(), args.out, cm.get_lm_config())
    for (method, name), rho in sorted(speed_trend(report).items()):
        logger.info("Speed trend", method=method, path=name, spearman=rho)
    return EXIT_FAILURE if report.failure_count else EXIT_OK


def cmd_run_connect(args, cm: ConfigManager) -> int:
    model, ikd = _load_fkd(args.model, cm), _load_ikd(args.ikd, cm)
    cfg = cm.get_eval_config()
    runtime = cm.get_runtime_config()
    spec = cm.get_window_spec()
    sim_params = cm.get_sim_params()
    line = _load_path(args.line or cfg.racing_line)
    report = eval_connectivity(model, ikd, line, cfg, runtime, sim_params, spec, args.out, cm.get_lm_config())
    if model is not None:
        start = np.array([*CONNECT_START, 0.0, 0.0, 0.0])
        goal = np.array([CONNECT_GOAL[0], CONNECT_GOAL[1], wrap_angle(CONNECT_GOAL[2]), 0.0, 0.0, 0.0])
        history = np.tile(start, (spec.steps_per_window, 1))
        try:
            _, n_star, table = solve_optimal_connectivity(
                model, history, goal, runtime.alpha, runtime.n_range, cm.get_lm_config(),
                SquashMap.for_sim(sim_params), runtime.connect_weights, runtime.connect_initial_speed)
            write_cost_table(table, Path(args.out) / "cost_table.csv")
            logger.info("Open-loop connection", n_star=n_star, duration=n_star * spec.tau)
        except KinoctlError as e:
            logger.warning("Open-loop connection failed", error=str(e))
            return EXIT_FAILURE
    return EXIT_FAILURE if report.failure_count else EXIT_OK


def cmd_eval(args, cm: ConfigManager) -> int:
    report = recompute_report(args.in_dir)
    write_report(report, args.report)
    return EXIT_FAILURE if report.failure_count else EXIT_OK


def cmd_paths(args, cm: ConfigManager) -> int:
    save_path(builtin_path(args.name), args.out)
    return EXIT_OK


def cmd_budget(args, cm: ConfigManager) -> int:
    model = _load_fkd(args.model, cm)
    result = measure_plan_budget(model, _load_path(args.path), cm.get_runtime_config(), cm.get_window_spec(),
                                 cm.get_lm_config(), cm.get_sim_params(), args.repeats)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(result, indent=2) + "\n")
    return EXIT_OK if result["within_budget"] else EXIT_FAILURE


def cmd_rmse(args, cm: ConfigManager) -> int:
    model = _load_fkd(args.model, cm)
    dataset = load_dataset(args.data)
    rmse = open_loop_position_rmse(model, dataset.validation or dataset.train, model.spec)
    print(f"{rmse!r}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-fkd": cmd_train,
    "train-ikd": cmd_train,
    "run-follow": cmd_run_follow,
    "run-connect": cmd_run_connect,
    "eval": cmd_eval,
    "paths": cmd_paths,
    "budget": cmd_budget,
    "rmse": cmd_rmse,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cm = ConfigManager(config_file=args.config, env_file=args.env_file)
        log_section = cm.get_logging_section()
        if args.log_level:
            log_section["level"] = args.log_level
        configure_from_section(log_section)
        return COMMANDS[args.command](args, cm)
    except ConfigError as e:
        logger.error("Configuration error", command=args.command, error=str(e))
        print(f"kinoctl: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except KinoctlError as e:
        logger.error("Command failed", command=args.command, error=str(e))
        print(f"kinoctl: {e}", file=sys.stderr)
        return EXIT_FAILURE
