"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure (a partial record is still written),
2 invalid configuration or usage.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..tuning import UsageError
from . import experiments as ex
from .config import (
    ExperimentConfig,
    SubsetsConfig,
    Table1Config,
    ValidationError,
    format_validation_error,
)
from .records import RecordWriter, read_records

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--out", help="JSON-lines output (overrides the config's output)")
    p.add_argument("--seed", type=int, help="base seed (overrides the config)")
    p.add_argument("--workers", type=int, default=1, help="processes for seed-level parallelism")
    p.add_argument("--eval-draws", type=int, help="draws for final evaluations")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uha", description="Annealed variational bounds experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("optimize", help="train and evaluate one configuration"))
    _common(sub.add_parser("grid", help="HAIS grid search over (eps, eta)"))
    p = sub.add_parser("table1", help="Student-t bound table for plain VI, UHA and IW")
    _common(p)
    p.add_argument("--csv", help="CSV table path (default: <out>.csv)")
    _common(sub.add_parser("subsets", help="compare trainable-parameter subsets"))

    p = sub.add_parser("extrapolate", help="carry trained UHA params to another K")
    _common(p, config=False)
    p.add_argument("--record", required=True, help="JSON-lines file with trained UHA runs")
    p.add_argument("--K1", type=int, required=True)

    p = sub.add_parser("moments", help="posterior moment errors of trained runs")
    _common(p, config=False)
    p.add_argument("--record", required=True)
    p.add_argument("--reference", help="reference-moments JSON (default: the target's analytic moments)")
    p.add_argument("--n-samples", type=int, default=100_000)

    p = sub.add_parser("export-csv", help="flatten a JSON-lines file into CSV")
    p.add_argument("--record", required=True)
    p.add_argument("--out", required=True)
    return parser


def _load(path, model, args):
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if args.seed is not None:
        target = data.setdefault("experiment", {}) if model is SubsetsConfig else data
        target["base_seed"] = args.seed
    if args.eval_draws is not None:
        target = data.setdefault("experiment", {}) if model is SubsetsConfig else data
        target["eval_draws"] = args.eval_draws
    return model.model_validate(data)


def _writer(args, cfg_output) -> RecordWriter:
    out = args.out or cfg_output
    if out is None:
        raise UsageError("no output path: pass --out or set output in the config")
    return RecordWriter(out)


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _failed(records) -> bool:
    return any(r.get("status") == "failed" for r in records)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ValidationError as exc:
        print(format_validation_error(exc), file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def _dispatch(args) -> int:
    cmd = args.command
    if cmd in ("optimize", "grid"):
        cfg = _load(args.config, ExperimentConfig, args)
        if cmd == "grid" and cfg.method != "hais":
            raise UsageError("grid runs method hais")
        records, summary = ex.run_experiment(cfg, _writer(args, cfg.output), args.workers)
        _print({k: summary[k] for k in ("method", "K", "pooled", "per_seed_means")})
        for r in records:
            if r.get("status") == "failed":
                print(f"seed {r['seed_index']} failed: {r['error']}", file=sys.stderr)
        return EXIT_RUNTIME if _failed(records) else EXIT_OK
    if cmd == "table1":
        cfg = _load(args.config, Table1Config, args)
        writer = _writer(args, cfg.output)
        csv_path = args.csv or str(writer.path.with_suffix(".csv"))
        rows = ex.run_table1(cfg, writer, csv_path)
        _print(rows)
        return EXIT_OK
    if cmd == "subsets":
        cfg = _load(args.config, SubsetsConfig, args)
        ranked = ex.run_subsets(cfg, _writer(args, cfg.experiment.output), args.workers)
        _print([{"trainable": r["trainable"], "pooled": r["pooled"]} for r in ranked])
        return EXIT_OK
    if cmd == "extrapolate":
        summary = ex.run_extrapolate(args.record, args.K1, args.eval_draws or 10_000, _writer(args, None))
        _print({k: summary[k] for k in ("K", "pooled", "source_pooled")})
        return EXIT_OK
    if cmd == "moments":
        out = ex.run_moments(args.record, args.n_samples, _writer(args, None), args.reference)
        _print([{k: r[k] for k in ("method", "K", "mean_mae", "var_mae", "low_confidence")} for r in out])
        return EXIT_OK
    if cmd == "export-csv":
        try:
            read_records(args.record)
        except OSError as exc:
            raise UsageError(str(exc)) from None
        n = ex.export_csv(args.record, args.out)
        print(f"wrote {n} rows to {args.out}")
        return EXIT_OK
    raise UsageError(f"unknown command {cmd}")


if __name__ == "__main__":
    sys.exit(main())
