"""Command-line harness: generate data, solve, run policies, train and report.

Exit codes: 0 success, 2 bad arguments or config, 3 bad data, 4 training
divergence, 5 missing input file.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from .baselines import MsvvPolicy, PidGains, fp_policy, pid_policy, tune_pid, volume_target
from .dual import DualConfig, solve_dual
from .market import DEFAULT_HORIZON, MarketError, run_episode
from .marlia import (MarliaConfig, TrainingDivergence, load_checkpoint, save_checkpoint, train,
                     write_log)
from .traffic import (DataError, TrafficConfig, generate_pair, load_config, read_contracts,
                      read_day, write_contracts, write_day)

EXIT_OK, EXIT_ARGS, EXIT_DATA, EXIT_DIVERGED, EXIT_MISSING = 0, 2, 3, 4, 5
POLICIES = ("fp", "msvv", "pid", "marlia")
METRIC_COLUMNS = ("policy", "R", "R_star", "ratio", "r_gc_ratio", "r_rtb_ratio", "q_gc_ratio",
                  "wall_ms")


class UsageError(Exception):
    pass


@dataclass
class MetricsRow:
    policy: str
    R: float
    R_star: float
    r_gc_ratio: float
    r_rtb_ratio: float
    q_gc_ratio: float
    wall_ms: int

    @property
    def ratio(self) -> float:
        return self.r_gc_ratio + self.r_rtb_ratio + self.q_gc_ratio

    @classmethod
    def from_report(cls, policy, report, r_star, wall_ms=0) -> "MetricsRow":
        return cls(policy, report.total, r_star, report.r_gc / r_star,
                   report.r_rtb / r_star, report.q_gc / r_star, int(wall_ms))

    def values(self) -> list:
        return [self.policy, repr(self.R), repr(self.R_star), repr(self.ratio),
                repr(self.r_gc_ratio), repr(self.r_rtb_ratio), repr(self.q_gc_ratio), self.wall_ms]


def append_metrics(rows, path) -> None:
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow(r.values())


# --------------------------------------------------------------------- config

def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise UsageError(f"config section [{name}] must be a table")
    return dict(sec)


def _load(args) -> dict:
    if not getattr(args, "config", None):
        return {}
    if not os.path.exists(args.config):
        raise FileNotFoundError(args.config)
    try:
        return load_config(args.config)
    except DataError as exc:
        raise UsageError(str(exc)) from None


def _traffic(cfg, args) -> TrafficConfig:
    sec = _section(cfg, "traffic")
    if args.seed is not None:
        sec["seed"] = args.seed
    try:
        return TrafficConfig.from_mapping(sec)
    except (TypeError, DataError) as exc:
        raise UsageError(str(exc)) from None


def _marlia(cfg, args) -> MarliaConfig:
    sec = _section(cfg, "marlia")
    if args.seed is not None:
        sec["seed"] = args.seed
    if getattr(args, "episodes", None) is not None:
        sec["episodes"] = args.episodes
    try:
        return MarliaConfig.from_mapping(sec)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _pid(cfg) -> tuple[PidGains, bool]:
    sec = _section(cfg, "pid")
    tune = bool(sec.pop("tune", False))
    try:
        return PidGains(**sec), tune
    except (TypeError, ValueError) as exc:
        raise UsageError(f"pid config: {exc}") from None


def _dual(cfg) -> DualConfig:
    sec = _section(cfg, "dual")
    try:
        conf = DualConfig(**sec)
    except TypeError as exc:
        raise UsageError(f"dual config: {exc}") from None
    if conf.method not in ("exact", "subgradient"):
        raise UsageError(f"dual config: unknown method {conf.method!r}")
    return conf


def _horizon(cfg) -> int:
    return int(_section(cfg, "traffic").get("horizon", DEFAULT_HORIZON))


def _need(args, *names):
    for n in names:
        if getattr(args, n.replace("-", "_"), None) is None:
            raise UsageError(f"--{n} is required for '{args.command}'")


def _inputs(args, cfg, test=True):
    _need(args, "train-data", "contracts", *(["test-data"] if test else []))
    horizon = _horizon(cfg)
    contracts = read_contracts(args.contracts)
    m = len(contracts)
    train_ds = read_day(args.train_data, horizon, m)
    test_ds = read_day(args.test_data, horizon, m) if test else None
    return train_ds, test_ds, contracts


# ------------------------------------------------------------------- commands

def cmd_gen(args, cfg):
    _need(args, "out")
    traffic = _traffic(cfg, args)
    drift = _section(cfg, "drift")
    vm = float(drift.get("volume_multiplier", traffic.volume_multiplier))
    pm = float(drift.get("price_multiplier", traffic.price_multiplier))
    if vm <= 0 or pm <= 0:
        raise UsageError("drift multipliers must be > 0")
    train_ds, test_ds, contracts = generate_pair(traffic, vm, pm)
    os.makedirs(args.out, exist_ok=True)
    write_day(train_ds, os.path.join(args.out, "train.jsonl"))
    write_day(test_ds, os.path.join(args.out, "test.jsonl"))
    write_contracts(contracts, os.path.join(args.out, "contracts.jsonl"))
    print(f"wrote {len(train_ds)} train and {len(test_ds)} test impressions, "
          f"{len(contracts)} contracts to {args.out}")


def cmd_solve(args, cfg):
    _need(args, "out")
    train_ds, _, contracts = _inputs(args, cfg, test=False)
    sol = solve_dual(train_ds, contracts, _dual(cfg))
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(sol.to_json())
        fh.write("\n")
    print(f"r_star={sol.r_star!r} alphas={np.round(sol.alphas, 6).tolist()}")


def _policy(name, args, cfg, train_ds, contracts, alpha_star, r_star_train):
    if name == "fp":
        return fp_policy(alpha_star), None
    if name == "msvv":
        return MsvvPolicy(contracts), None
    target = volume_target(train_ds)
    if name == "pid":
        gains, tune = _pid(cfg)
        if tune:
            gains, _ = tune_pid(train_ds, contracts, alpha_star, target, r_star_train)
        return pid_policy(contracts, alpha_star, target, gains), None
    if name == "marlia":
        if getattr(args, "model", None):
            if not os.path.exists(args.model):
                raise FileNotFoundError(args.model)
            result = load_checkpoint(args.model)
        else:
            result = train(train_ds, contracts, _marlia(cfg, args))
        return result.policy(alpha_star), result
    raise UsageError(f"unknown policy {name!r}")


def _evaluate(names, args, cfg, train_ds, test_ds, contracts):
    train_sol = solve_dual(train_ds, contracts)
    test_sol = solve_dual(test_ds, contracts)
    rows, results = [], {}
    for name in names:
        policy, result = _policy(name, args, cfg, train_ds, contracts, train_sol.alphas,
                                 train_sol.r_star)
        t0 = time.perf_counter()
        report = run_episode(test_ds, contracts, policy)
        wall = 0 if args.no_timing else round((time.perf_counter() - t0) * 1000)
        rows.append(MetricsRow.from_report(name, report, test_sol.r_star, wall))
        results[name] = result
    return rows, results


def cmd_run(args, cfg):
    _need(args, "out", "policy")
    train_ds, test_ds, contracts = _inputs(args, cfg)
    rows, _ = _evaluate([args.policy], args, cfg, train_ds, test_ds, contracts)
    append_metrics(rows, args.out)
    r = rows[0]
    print(f"{r.policy}: R/R* = {r.ratio:.6f}")


def cmd_train(args, cfg):
    _need(args, "out")
    train_ds, _, contracts = _inputs(args, cfg, test=False)
    eval_ds = None
    if args.test_data is not None:
        eval_ds = read_day(args.test_data, _horizon(cfg), len(contracts))
    config = _marlia(cfg, args)
    result = train(train_ds, contracts, config, eval_dataset=eval_ds)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(result, os.path.join(args.out, "checkpoint.json"))
    log = result.log
    if args.no_timing:
        log = [dict(r, wall_ms=0) for r in log]
    write_log(log, os.path.join(args.out, "train_log.csv"))
    print(f"best R/R* = {result.best_ratio:.6f} at episode {result.best_episode}")


def cmd_report(args, cfg):
    _need(args, "out")
    train_ds, test_ds, contracts = _inputs(args, cfg)
    names = POLICIES if args.policy is None else (args.policy,)
    rows, results = _evaluate(names, args, cfg, train_ds, test_ds, contracts)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "metrics.csv")
    if os.path.exists(path):
        os.remove(path)
    append_metrics(rows, path)
    label = args.label or os.path.basename(os.path.normpath(os.path.dirname(args.test_data))) or "test"
    with open(os.path.join(args.out, "table.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", *[r.policy for r in rows]])
        w.writerow([label, *[f"{r.ratio:.6f}" for r in rows]])
    result = results.get("marlia")
    if result is not None and result.log:
        with open(os.path.join(args.out, "convergence.csv"), "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["episode", "ratio"])
            for r in result.log:
                w.writerow([r["episode"], repr(r["ratio"])])
    width = max(len(r.policy) for r in rows)
    print(f"{'policy':<{width}}  R/R*      R_GC/R*   R_RTB/R*  Q_GC/R*")
    for r in rows:
        print(f"{r.policy:<{width}}  {r.ratio:.4f}    {r.r_gc_ratio:.4f}    "
              f"{r.r_rtb_ratio:.4f}    {r.q_gc_ratio:.4f}")


COMMANDS = {"gen": cmd_gen, "solve": cmd_solve, "run": cmd_run, "train": cmd_train,
            "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="impalloc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen": "generate a synthetic train/test pair",
        "solve": "solve the offline optimum of a day",
        "run": "evaluate one policy on the test day",
        "train": "train the multi-agent learner",
        "report": "compare every policy on one pair",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output path (file or directory)")
        if name != "gen":
            p.add_argument("--train-data")
            p.add_argument("--contracts")
        if name in ("run", "train", "report"):
            p.add_argument("--test-data")
        if name in ("run", "report"):
            p.add_argument("--policy", choices=POLICIES)
            p.add_argument("--model", help="checkpoint for the marlia policy")
        if name in ("run", "train", "report"):
            p.add_argument("--episodes", type=int)
            p.add_argument("--no-timing", action="store_true",
                           help="write 0 for wall times so outputs are byte-stable")
        if name == "report":
            p.add_argument("--label", help="dataset name for the table row")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "episodes", None) is not None and args.episodes < 0:
        print("error: --episodes must be >= 0", file=sys.stderr)
        return EXIT_ARGS
    try:
        cfg = _load(args)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_MISSING
    except TrainingDivergence as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, MarketError) as exc:
        print(f"error: bad data: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
