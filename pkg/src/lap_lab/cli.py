"""Command line: ``lap-lab <command> [--config FILE] [--set key=value ...]``."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import pipeline
from .autodiff import ContractViolation
from .bench import ValidationError
from .config import ConfigError, RunConfig, load_config

COMMANDS = ("gen-data", "train", "eval", "analyze", "dynamics", "gradcheck", "layer-sweep", "compare")


def _gen_data(cfg: RunConfig) -> int:
    train_path, eval_path = pipeline.gen_data(cfg)
    print(f"wrote {train_path} and {eval_path}")
    return 0


def _train(cfg: RunConfig) -> int:
    train_set, _ = pipeline.load_data(cfg)
    started = time.perf_counter()
    result = pipeline.train_model(cfg, train_set)
    ckpt = pipeline.save_training(cfg, result)
    counts = ", ".join(f"{k}={v}" for k, v in sorted(result.log.branch_counts().items()))
    print(f"trained {result.optimizer.step} steps ({counts}) in {time.perf_counter() - started:.1f}s; "
          f"checkpoint at {ckpt}")
    return 0


def _eval(cfg: RunConfig) -> int:
    report = pipeline.run_eval(cfg)
    for key, value in report.aggregates.items():
        print(f"{key:>9} win-rate {value:.4f}")
    for key, value in report.meta["accuracy"].items():
        print(f"{key:>14} accuracy {value:.4f}")
    return 0


def _analyze(cfg: RunConfig) -> int:
    report = pipeline.run_analyze(cfg)
    rho = "undefined (" + report.rho_note + ")" if report.rho is None else f"{report.rho:.4f}"
    print(f"{len(report.stats)} cases; spearman(worst distance, drop) = {rho}")
    return 0


def _dynamics(cfg: RunConfig) -> int:
    for path in pipeline.run_dynamics(cfg):
        print(f"wrote {path}")
    return 0


def _gradcheck(cfg: RunConfig) -> int:
    results = pipeline.gradcheck_suite(cfg.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<24} max_rel_err={r.max_rel_err:.3e}")
    ok = all(r.passed for r in results)
    print("gradcheck", "passed" if ok else "FAILED")
    return 0 if ok else 1


def _layer_sweep(cfg: RunConfig) -> int:
    print(f"wrote {pipeline.run_layer_sweep(cfg)}")
    return 0


def _compare(cfg: RunConfig) -> int:
    rows = pipeline.compare_methods(cfg)
    path = pipeline.write_compare(cfg, rows)
    print(pipeline.format_table(rows))
    wins, n = pipeline.worst_template_wins(rows, cfg.train.adversary)
    print(f"{cfg.train.adversary} >= sft on worst-template accuracy in {wins}/{n} seeds; wrote {path}")
    return 0


HANDLERS = {
    "gen-data": _gen_data, "train": _train, "eval": _eval, "analyze": _analyze, "dynamics": _dynamics,
    "gradcheck": _gradcheck, "layer-sweep": _layer_sweep, "compare": _compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lap-lab", description="Latent adversarial paraphrasing lab")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", type=Path, help="JSON run configuration (defaults apply when omitted)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. --set train.inner.eta=0.1 (repeatable)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def run(command: str, config: str | Path | None = None, overrides: list[str] | None = None) -> int:
    """Run one command; returns the process exit status."""
    if command not in HANDLERS:
        print(f"error: unknown command {command!r}", file=sys.stderr)
        return 2
    try:
        cfg = load_config(config, overrides)
        pipeline.write_effective_config(cfg)
        return HANDLERS[command](cfg)
    except (ConfigError, ValidationError, ContractViolation) as err:
        print(f"error: invalid configuration: {err}", file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return run(args.command, args.config, args.overrides)


if __name__ == "__main__":
    sys.exit(main())
