"""Command-line front end.

Subcommands map onto the library layers: ``train`` runs one config,
``sweep`` and ``grid`` run the tuned matrix, ``noise`` samples gradient
error, ``plot`` renders SVG from result files.  Exit codes: 0 success,
2 config or selection problem, 3 every run diverged, 4 I/O failure.

Run results are cached under OPTLAB_CACHE_DIR when that is set, else
under ``<out>/cache``, so repeating a command is cheap and yields the
same files.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import replace

from .config import parse_config, parse_noise_config, serialize_config
from .errors import AllDiverged, EmptySelection, OptlabError, SchemaError
from .harness import (LABELS, RunCache, RunConfig, SweepConfig,
                      build_problem, cache_from_env, run_or_load, sweep)
from .models import init_model
from .noise import grad_error_samples
from .plots import PLOT_KINDS, PlotSpec, emit_plot
from .reporting import read_results, rows_for_record, write_results


def _read_text(path: str) -> str:
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and math.isnan(obj):
        return None
    return obj


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_json_safe(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _prepare_out(out: str) -> RunCache:
    os.makedirs(out, exist_ok=True)
    cache = cache_from_env()
    if cache is None:
        cache = RunCache(os.path.join(out, "cache"))
    return cache


def _load_run_config(path: str, seed) -> RunConfig:
    cfg = parse_config(_read_text(path))
    if not isinstance(cfg, RunConfig):
        raise SchemaError("", "expected a single-run config, got a sweep "
                          "(it has an 'optimizers' list)")
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def _load_sweep_config(path: str) -> SweepConfig:
    cfg = parse_config(_read_text(path))
    if not isinstance(cfg, SweepConfig):
        raise SchemaError("", "expected a sweep config with an "
                          "'optimizers' list")
    return cfg


def _cmd_train(args) -> int:
    cfg = _load_run_config(args.config, args.seed)
    cache = _prepare_out(args.out)
    record = run_or_load(cfg, cache)
    write_results(os.path.join(args.out, "results.csv"),
                  rows_for_record(record, include_timings=args.timings))
    _write_json(os.path.join(args.out, "record.json"), record.to_dict())
    with open(os.path.join(args.out, "config.json"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write(serialize_config(cfg))
    status = (f"diverged at iteration {record.diverged_at}"
              if record.diverged else "completed")
    print(f"run {record.run_id} {status}: "
          f"final_train_loss={record.final_train_loss:.6g} "
          f"({record.wall_clock_ms:.0f} ms, "
          f"{record.zero_gradient_skips} zero-gradient skips)")
    return 3 if record.diverged else 0


def _grid_to_dict(grid) -> dict:
    return {
        "selected": grid.selected,
        "refinement_rounds": grid.refinement_rounds,
        "candidates": [{"step_size": c.step_size,
                        "per_seed": list(c.per_seed),
                        "max_over_seeds": c.max_over_seeds}
                       for c in grid.candidates],
    }


def _sweep_summary(result) -> dict:
    return {
        "ladder": [[label, size] for label, size in result.ladder],
        "budgets": {label: {"batch_size": b.batch_size,
                            "iterations_per_epoch": b.iterations_per_epoch,
                            "epochs": b.epochs,
                            "iterations": b.iterations,
                            "flagged": b.flagged}
                    for label, b in result.budgets.items()},
        "errors": {f"{opt}:{label}": msg
                   for (opt, label), msg in sorted(result.errors.items())},
    }


def _run_sweep(args, grids_only: bool) -> int:
    cfg = _load_sweep_config(args.config)
    cache = _prepare_out(args.out)
    result = sweep(cfg, threads=args.threads, cache=cache)

    _write_json(os.path.join(args.out, "grids.json"),
                {f"{opt}:{label}": _grid_to_dict(g)
                 for (opt, label), g in sorted(result.grids.items())})
    _write_json(os.path.join(args.out, "sweep_summary.json"),
                _sweep_summary(result))
    if not grids_only:
        order = {label: i for i, label in enumerate(LABELS)}
        keys = sorted(result.records,
                      key=lambda k: (k[0], order[k[1]], k[2]))
        rows = []
        for key in keys:
            rows.extend(rows_for_record(result.records[key],
                                        include_timings=args.timings))
        write_results(os.path.join(args.out, "results.csv"), rows)

    for (opt, label), grid in sorted(result.grids.items()):
        finals = [result.records[(opt, label, s)].final_train_loss
                  for s in cfg.seeds if (opt, label, s) in result.records]
        shown = ", ".join(f"{v:.4g}" for v in finals)
        print(f"{opt} {label}: step={grid.selected:g} finals=[{shown}]")
    for (opt, label), msg in sorted(result.errors.items()):
        print(f"{opt} {label}: failed: {msg}", file=sys.stderr)

    if result.diverged_only:
        return 3
    if not result.records and result.errors and all(
            msg.startswith("AllDiverged") for msg in result.errors.values()):
        return 3
    return 0


def _cmd_noise(args) -> int:
    cfg = parse_noise_config(_read_text(args.config))
    if args.seed is not None:
        cfg["seed"] = args.seed
    _prepare_out(args.out)
    probe = RunConfig(problem=cfg["problem"],
                      problem_params=cfg["problem_params"],
                      model=cfg["model"],
                      optimizer={"id": "sgd-m", "momentum": 0.0},
                      step_size=1.0, batch_label="Full", batch_size=1,
                      epochs=1, max_iterations=None, seed=0)
    prob = build_problem(probe)
    params = init_model(prob.spec, cfg["init_seed"])
    sample = grad_error_samples(prob.spec, params, prob.ds,
                                cfg["batch_size"], cfg["n_draws"],
                                cfg["seed"], micro_batch=cfg["micro_batch"])
    try:
        theoretical, empirical = sample.qq()
        pairs = list(zip(theoretical, empirical))
    except OptlabError:
        pairs = None  # zero-variance sample (e.g. whole-dataset batches)

    lines = ["index,value,theoretical,empirical"]
    for i, v in enumerate(sample.values):
        t, e = (repr(float(pairs[i][0])), repr(float(pairs[i][1]))) \
            if pairs is not None else ("", "")
        lines.append(f"{i},{float(v)!r},{t},{e}")
    with open(os.path.join(args.out, "noise.csv"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    _write_json(os.path.join(args.out, "noise_summary.json"),
                sample.summary())
    s = sample.summary()
    print(f"batch_size={s['batch_size']} n_draws={s['n_draws']} "
          f"fitted_mu={s['fitted_mu']:.6g} fitted_sigma={s['fitted_sigma']:.6g} "
          f"excess_kurtosis={s['excess_kurtosis']:.4g} "
          f"tail_ratio_99_90={s['tail_ratio_99_90']:.4g}")
    return 0


def _coerce(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def _parse_filters(items: list) -> dict:
    flt = {}
    for item in items:
        if "=" not in item:
            raise SchemaError("filter", f"expected column=value, got {item!r}")
        col, _, raw = item.partition("=")
        value = _coerce(raw)
        if col in flt:
            prev = flt[col]
            flt[col] = (prev if isinstance(prev, list) else [prev]) + [value]
        else:
            flt[col] = value
    return flt


def _read_plain_csv(path: str) -> list:
    import csv as _csv
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        for parsed in _csv.DictReader(fh):
            rows.append({k: (None if v == "" else _coerce(v))
                         for k, v in parsed.items()})
    return rows


def _cmd_plot(args) -> int:
    spec = PlotSpec(kind=args.kind, filter=_parse_filters(args.filter),
                    x_scale=args.x_scale, y_scale=args.y_scale,
                    title=args.title, column=args.column)
    if args.kind in ("loss_vs_iteration", "final_loss_vs_batch_size"):
        rows = read_results(args.data)
    else:
        rows = _read_plain_csv(args.data)
    parent = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(parent, exist_ok=True)
    emit_plot(spec, rows, args.out)
    print(f"wrote {args.out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="optlab",
        description="Deterministic optimizer comparisons: run, sweep, "
                    "measure gradient noise, plot.")
    sub = p.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run one training config")
    train.add_argument("--config", required=True, help="run config JSON")
    train.add_argument("--out", required=True, help="output directory")
    train.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
    train.add_argument("--timings", action="store_true",
                       help="include wall-clock times in the CSV")

    for name, help_text in (("sweep", "grid-tune and run a full matrix"),
                            ("grid", "grid-tune only, write grids.json")):
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", required=True, help="sweep config JSON")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--threads", type=int, default=1,
                       help="worker threads across cells")
        s.add_argument("--timings", action="store_true",
                       help="include wall-clock times in the CSV")

    noise = sub.add_parser("noise", help="sample minibatch gradient error")
    noise.add_argument("--config", required=True, help="noise config JSON")
    noise.add_argument("--out", required=True, help="output directory")
    noise.add_argument("--seed", type=int, default=None,
                       help="override the draw seed")

    plot = sub.add_parser("plot", help="render an SVG from a results CSV")
    plot.add_argument("--kind", required=True, choices=PLOT_KINDS)
    plot.add_argument("--data", required=True, help="input CSV path")
    plot.add_argument("--out", required=True, help="output SVG path")
    plot.add_argument("--filter", action="append", default=[],
                      metavar="COL=VALUE",
                      help="keep only matching rows (repeatable)")
    plot.add_argument("--x-scale", choices=("linear", "log"), default=None)
    plot.add_argument("--y-scale", choices=("linear", "log"), default=None)
    plot.add_argument("--title", default=None)
    plot.add_argument("--column", default="value",
                      help="value column for histograms")
    return p


_COMMANDS = {
    "train": _cmd_train,
    "sweep": lambda a: _run_sweep(a, grids_only=False),
    "grid": lambda a: _run_sweep(a, grids_only=True),
    "noise": _cmd_noise,
    "plot": _cmd_plot,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (SchemaError, EmptySelection) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except AllDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 4
    except (OptlabError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
