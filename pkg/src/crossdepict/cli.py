"""Command-line entry point: ``crossdepict {gen-data,train,bench,analyze}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 run failure,
5 audit failure (frozen head changed or held-out domain touched).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import config as cfgmod
from .config import ConfigError
from .data import DataError, IsolationError, generate_synthetic, load_dataset, save_dataset
from .evaluation import (BenchmarkError, eigen_projection, kl_domain_shift, literature_table,
                         run_benchmark, run_cell)
from .model import save_checkpoint
from .trainers import AuditError, TrainingError, write_log

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUN, EXIT_AUDIT = 0, 2, 3, 4, 5

log = logging.getLogger("crossdepict")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _prepare_out(cfg: dict, command: str) -> Path:
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    _write(out / "config.resolved.json", cfgmod.dump_resolved(cfg))
    # the only file allowed to differ between reruns
    meta = {"command": command, "started": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
    _write(out / "metadata.json", json.dumps(meta, indent=2) + "\n")
    return out


def _dataset(cfg: dict):
    if cfg["dataset"]["source"] == "load":
        return load_dataset(cfg["dataset"]["manifest"])
    return generate_synthetic(cfgmod.synthetic_config(cfg))


def _counts_table(ds) -> str:
    lines = ["domain\t" + "\t".join(ds.classes) + "\ttotal"]
    for d in ds.domains:
        c = ds.class_counts(d)
        lines.append(d + "\t" + "\t".join(str(c[k]) for k in ds.classes) + f"\t{ds.size(d)}")
    return "\n".join(lines) + "\n"


def cmd_gen_data(cfg: dict) -> int:
    out = _prepare_out(cfg, "gen-data")
    ds = generate_synthetic(cfgmod.synthetic_config(cfg))
    try:
        manifest = save_dataset(ds, out)
    except OSError as exc:
        raise DataError(f"cannot write dataset to {out}: {exc}") from exc
    sys.stdout.write(_counts_table(ds))
    print(f"manifest: {manifest}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    ds = _dataset(cfg)
    method, held_out, seed = cfg["method"]["name"], cfg["run"]["held_out"], cfg["run"]["seed"]
    if held_out not in ds.domains:
        raise ConfigError(f"run.held_out {held_out!r} is not a dataset domain {list(ds.domains)}")
    n_train = len(ds.domains) - 1
    if method in ("mldg", "metareg") and n_train < 2:
        raise ConfigError(f"method {method} needs at least 2 training domains, scenario has {n_train}")
    out = _prepare_out(cfg, "train")
    cell, result, _ = run_cell(ds, method, held_out, seed, cfgmod.run_settings(cfg), return_result=True)
    write_log(result, out / "train.log")
    best = next(c for c in result.checkpoints if c.step == cell.best_step)
    save_checkpoint(result.model.with_params(best.params), out / "best.ckpt",
                    {"method": method, "held_out": held_out, "seed": seed, "step": cell.best_step})
    summary = f"{method}\t{held_out}\t{cell.test_accuracy!r}"
    _write(out / "summary.tsv", "method\theld_out\ttest_accuracy\n" + summary + "\n")
    print(f"method={method} held_out={held_out} test_accuracy={cell.test_accuracy:.2f} "
          f"val_accuracy={cell.val_accuracy:.2f} best_step={cell.best_step}")
    return EXIT_OK


def cmd_bench(cfg: dict, workers: int | None = None) -> int:
    ds = _dataset(cfg)
    bench = cfg["bench"]
    if len(ds.domains) < 2:
        raise ConfigError("benchmark needs at least 2 domains")
    if not bench["methods"]:
        raise ConfigError("bench.methods must list at least one method")
    held = bench["held_out"] or list(ds.domains)
    unknown = [d for d in held if d not in ds.domains]
    if unknown:
        raise ConfigError(f"bench.held_out names unknown domains {unknown}")
    if len(ds.domains) < 3 and set(bench["methods"]) & {"mldg", "metareg"}:
        raise ConfigError("mldg and metareg need at least 2 training domains per scenario")
    workers = workers or bench["workers"] or len(os.sched_getaffinity(0))
    out = _prepare_out(cfg, "bench")
    report = run_benchmark(ds, bench["methods"], bench["seeds"], cfgmod.run_settings(cfg),
                           workers=workers, held_out=held)
    _write(out / "report.tsv", report.to_tsv())
    _write(out / "report.txt", report.to_text())
    _write(out / "cells.tsv", report.cells_tsv())
    _write(out / "literature.txt", literature_table())
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_analyze(cfg: dict) -> int:
    ds = _dataset(cfg)
    out = _prepare_out(cfg, "analyze")
    kl = kl_domain_shift(ds)
    _write(out / "kl.tsv", kl.to_tsv())
    _write(out / "eigen.tsv", eigen_projection(ds).to_tsv())
    for d, v in kl.mean_to_others().items():
        print(f"{d}\tmean KL to others {v:.4f}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "bench": cmd_bench, "analyze": cmd_analyze}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crossdepict", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="YAML run config (defaults apply when omitted)")
        s.add_argument("--out", help="output directory (overrides config 'out')")
        s.add_argument("--profile", choices=["paper", "desk"])
        s.add_argument("--seed", type=int, help="overrides run.seed and bench.seeds")
        if name == "bench":
            s.add_argument("--workers", type=int, help="worker processes (default: available cores)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = dict(profile=args.profile, seed=args.seed, out=args.out)
        cfg = cfgmod.load(args.config, **overrides) if args.config else cfgmod.resolve(None, **overrides)
        if args.command == "bench":
            if args.workers is not None and args.workers < 1:
                raise ConfigError("--workers must be positive")
            return cmd_bench(cfg, args.workers)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (AuditError, IsolationError) as exc:
        print(f"audit failure: {exc}", file=sys.stderr)
        return EXIT_AUDIT
    except (BenchmarkError, TrainingError, ArithmeticError, ValueError, OSError) as exc:
        print(f"run failure: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
