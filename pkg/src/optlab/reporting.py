"""CSV result files: one row per training iteration, stable bytes.

The column set is fixed and ordered; every writer in the package goes
through ``write_results`` so files from different runs concatenate
cleanly.  Appends deduplicate on (run_id, iteration), keeping whatever
the file already holds, which makes re-running a sweep over an existing
results file a byte-level no-op.

Floats are written with ``repr`` so ``read_results`` recovers them
exactly; epoch-end evaluation metrics ride on the final iteration row of
their epoch rather than on rows of their own.
"""

from __future__ import annotations

import csv
import io
import os

COLUMNS = (
    "run_id", "problem", "optimizer", "momentum_flag", "step_size",
    "batch_label", "batch_size", "seed", "epoch", "iteration",
    "train_loss", "eval_metric_name", "eval_metric_value", "wall_ms",
)

_INT_COLUMNS = {"batch_size", "seed", "epoch", "iteration"}
_FLOAT_COLUMNS = {"step_size", "train_loss", "eval_metric_value", "wall_ms"}


def momentum_flag(optimizer: dict) -> str:
    """"+m" when the configured momentum (or beta1) is positive."""
    m = optimizer.get("momentum", optimizer.get("beta1", 0.0))
    return "+m" if m > 0 else "-m"


def rows_for_record(record, include_timings: bool = False) -> list:
    """Flatten a RunRecord into CSV row dicts, one per iteration.

    Epoch evaluations merge into the last iteration row of their epoch
    (the row whose iteration matches the eval's).  wall_ms stays empty
    unless ``include_timings`` is set: timing is machine-dependent, and
    leaving it out keeps repeated runs byte-identical.
    """
    cfg = record.config
    evals = {e.iteration: e for e in record.epoch_evals}
    wall = record.wall_clock_ms if include_timings else None
    n_rows = len(record.iteration_log)
    rows = []
    for i, (iteration, epoch, train_loss) in enumerate(record.iteration_log):
        ev = evals.get(iteration)
        rows.append({
            "run_id": record.run_id,
            "problem": cfg.problem,
            "optimizer": cfg.optimizer["id"],
            "momentum_flag": momentum_flag(cfg.optimizer),
            "step_size": cfg.step_size,
            "batch_label": cfg.batch_label,
            "batch_size": cfg.batch_size,
            "seed": cfg.seed,
            "epoch": epoch,
            "iteration": iteration,
            "train_loss": train_loss,
            "eval_metric_name": ev.metric_name if ev else None,
            "eval_metric_value": ev.metric_value if ev else None,
            "wall_ms": wall if i == n_rows - 1 else None,
        })
    return rows


def _format_cell(column: str, value) -> str:
    if value is None:
        return ""
    if column in _FLOAT_COLUMNS:
        return repr(float(value))
    return str(value)


def _format_row(row: dict) -> list:
    return [_format_cell(c, row.get(c)) for c in COLUMNS]


def _existing_keys(path: str) -> set:
    keys = set()
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is not None and tuple(header) != COLUMNS:
            raise ValueError(f"{path} has a different column set")
        for parsed in reader:
            if parsed:
                keys.add((parsed[0], parsed[9]))
    return keys


def write_results(path: str, rows: list, include_header: bool = True) -> int:
    """Append rows to a results CSV, creating it (with header) if needed.

    Rows whose (run_id, iteration) already exist in the file are dropped;
    the file's existing content is never rewritten.  Returns the number
    of rows actually appended.  Output is UTF-8 with LF line endings on
    every platform.
    """
    exists = os.path.exists(path) and os.path.getsize(path) > 0
    seen = _existing_keys(path) if exists else set()
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if not exists and include_header:
        writer.writerow(COLUMNS)
    appended = 0
    for row in rows:
        key = (str(row["run_id"]), str(row["iteration"]))
        if key in seen:
            continue
        seen.add(key)
        writer.writerow(_format_row(row))
        appended += 1
    text = buf.getvalue()
    if text or not exists:
        with open(path, "a", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return appended


def _parse_cell(column: str, text: str):
    if text == "":
        return None
    if column in _INT_COLUMNS:
        return int(text)
    if column in _FLOAT_COLUMNS:
        return float(text)
    return text


def read_results(path: str) -> list:
    """Read a results CSV back into row dicts with numeric types restored."""
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return rows
        if tuple(header) != COLUMNS:
            raise ValueError(f"{path} has a different column set")
        for parsed in reader:
            if not parsed:
                continue
            rows.append({c: _parse_cell(c, v)
                         for c, v in zip(COLUMNS, parsed)})
    return rows
