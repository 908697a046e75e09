"""Experiment orchestration: ladders, budgets, training runs, grids, sweeps.

The protocol under study compares optimizers across batch sizes at matched
iteration counts.  This module provides the moving parts:

* ``batch_size_ladder``   - S/M/L/XL at 4x steps plus the full batch,
* ``stopping_iterations`` - whole-epoch budgets targeting a shared
  iteration count,
* ``run_training``        - one deterministic training run with
  per-iteration loss logging,
* ``grid_search``         - step-size selection by min over a decade grid
  (with half-power refinement) of the max loss over seeds,
* ``sweep``               - the full (optimizer x batch label) matrix with
  an optional result cache and thread pool.

Everything downstream of a RunConfig is a pure function of it: same config,
same RunRecord, bit for bit, regardless of thread count.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .data import (Dataset, load_packaged_corpus, make_batches,
                   synth_classification, tokenize_corpus)
from .errors import AllDiverged, LadderTooTall, NonFinite
from .models import (MlpSpec, TransformerLmSpec, evaluate, forward_loss,
                     init_model)
from .optimizers import make_optimizer
from .rng import DROPOUT, INIT, RngStream

LABELS = ("S", "M", "L", "XL", "Full")

GRID_DECADES = (-5, -4, -3, -2, -1, 0)
MAX_GRID_EXTENSIONS = 3  # per side; keeps edge-chasing finite


# ---------------------------------------------------------------------------
# configuration and record types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=True)
class RunConfig:
    """Declarative description of one training run.

    ``problem`` names the task family ("char_lm", "synth_mlp",
    "quadratic"); ``problem_params`` and ``model`` carry its data and
    architecture settings as plain dicts so the whole config serializes to
    JSON losslessly.  ``optimizer`` holds the optimizer id plus every
    hyperparameter made explicit (defaults already applied).
    """

    problem: str
    problem_params: dict
    model: dict
    optimizer: dict
    step_size: float
    batch_label: str
    batch_size: int
    epochs: int
    max_iterations: int | None
    seed: int
    dropout_enabled: bool = True
    micro_batch: int | None = None

    def to_dict(self) -> dict:
        return {
            "problem": self.problem,
            "problem_params": dict(self.problem_params),
            "model": dict(self.model),
            "optimizer": dict(self.optimizer),
            "step_size": self.step_size,
            "batch_label": self.batch_label,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "max_iterations": self.max_iterations,
            "seed": self.seed,
            "dropout_enabled": self.dropout_enabled,
            "micro_batch": self.micro_batch,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(**d)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True,
                          separators=(",", ":"))

    @property
    def run_id(self) -> str:
        """Content hash of the config; doubles as the result-cache key."""
        digest = hashlib.sha256(self.canonical_json().encode()).hexdigest()
        return digest[:16]


@dataclass
class EpochEval:
    """Full-dataset evaluation (dropout off) taken at an epoch boundary."""

    epoch: int
    iteration: int
    eval_loss: float
    metric_name: str
    metric_value: float


@dataclass
class RunRecord:
    """Everything measured during one run.

    ``iteration_log`` rows are (iteration, epoch, train_loss) with the
    minibatch training loss, 1-based and strictly increasing.
    ``final_train_loss`` is the eval-mode full-dataset loss at the stopping
    iteration (+inf if the run diverged).  Wall-clock time is always real;
    the CSV layer decides whether to publish it.
    """

    config: RunConfig
    run_id: str
    iteration_log: list
    epoch_evals: list
    final_train_loss: float
    wall_clock_ms: float
    zero_gradient_skips: int
    diverged: bool = False
    diverged_at: int | None = None

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "run_id": self.run_id,
            "iteration_log": [list(row) for row in self.iteration_log],
            "epoch_evals": [[e.epoch, e.iteration, e.eval_loss,
                             e.metric_name, e.metric_value]
                            for e in self.epoch_evals],
            "final_train_loss": self.final_train_loss,
            "wall_clock_ms": self.wall_clock_ms,
            "zero_gradient_skips": self.zero_gradient_skips,
            "diverged": self.diverged,
            "diverged_at": self.diverged_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(
            config=RunConfig.from_dict(d["config"]),
            run_id=d["run_id"],
            iteration_log=[tuple(row) for row in d["iteration_log"]],
            epoch_evals=[EpochEval(*row) for row in d["epoch_evals"]],
            final_train_loss=d["final_train_loss"],
            wall_clock_ms=d["wall_clock_ms"],
            zero_gradient_skips=d["zero_gradient_skips"],
            diverged=d["diverged"],
            diverged_at=d["diverged_at"],
        )


@dataclass
class GridCandidate:
    step_size: float
    per_seed: tuple
    max_over_seeds: float


@dataclass
class GridResult:
    """Outcome of a step-size search.

    ``candidates`` lists every evaluated step size (sorted ascending) with
    its per-seed final losses and their max; ``selected`` minimizes the max
    among finite candidates, ties going to the smaller step size.
    """

    candidates: list
    selected: float
    refinement_rounds: int


# ---------------------------------------------------------------------------
# ladder and budgets
# ---------------------------------------------------------------------------


def batch_size_ladder(base: int, dataset_kept: int) -> list:
    """[(label, batch_size)] at 4x steps: S, M, L, XL, then the full batch."""
    if base < 1:
        raise ValueError("ladder base must be positive")
    if base * 4 ** 3 >= dataset_kept:
        raise LadderTooTall(
            f"base {base} gives XL={base * 64}, which does not fit under "
            f"the {dataset_kept} kept examples")
    sizes = [base, 4 * base, 16 * base, 64 * base, dataset_kept]
    return list(zip(LABELS, sizes))


@dataclass(frozen=True)
class StoppingBudget:
    """Epoch budget for one ladder level.

    ``flagged`` marks budgets outside [reference/2, 2*reference] total
    iterations, typically the smallest batch, whose single-epoch floor
    already overshoots the shared target (a deliberate bias in its favor).
    """

    label: str
    batch_size: int
    iterations_per_epoch: int
    epochs: int
    iterations: int
    flagged: bool


def stopping_iterations(ladder: list, reference_iters: int) -> dict:
    """Per-label whole-epoch budgets targeting ``reference_iters``.

    Each level gets the smallest whole number of epochs reaching at least
    the reference iteration count, floored at one epoch.  Budgets that
    land outside a factor of two of the reference are flagged, never
    rejected.  The dataset size is the ladder's own Full rung.
    """
    if reference_iters < 1:
        raise ValueError("reference_iters must be at least 1")
    dataset_kept = ladder[-1][1]
    budgets = {}
    for label, batch in ladder:
        ipe = dataset_kept // batch
        if ipe < 1:
            raise ValueError(f"batch {batch} exceeds the {dataset_kept} "
                             f"kept examples")
        epochs = max(1, math.ceil(reference_iters / ipe))
        iters = epochs * ipe
        flagged = not (reference_iters / 2 <= iters <= reference_iters * 2)
        budgets[label] = StoppingBudget(label=label, batch_size=batch,
                                        iterations_per_epoch=ipe,
                                        epochs=epochs, iterations=iters,
                                        flagged=flagged)
    return budgets


# ---------------------------------------------------------------------------
# problems
# ---------------------------------------------------------------------------


class _ModelProblem:
    """A (dataset, model spec) pair the training loop can drive."""

    def __init__(self, ds: Dataset, spec, metric: str):
        self.ds = ds
        self.spec = spec
        self.metric = metric


@lru_cache(maxsize=8)
def _build_problem_cached(problem: str, params_json: str,
                          model_json: str) -> _ModelProblem:
    params = json.loads(params_json)
    model = json.loads(model_json)
    if problem == "char_lm":
        corpus = load_packaged_corpus(params.get("corpus_bytes"))
        ds = tokenize_corpus(corpus, seq_len=model["seq_len"], name="char_lm")
        spec = TransformerLmSpec(vocab_size=ds.vocab_size,
                                 embed_dim=model["embed_dim"],
                                 num_heads=model["num_heads"],
                                 num_layers=model["num_layers"],
                                 ff_dim=model["ff_dim"],
                                 seq_len=model["seq_len"],
                                 dropout_p=model["dropout_p"])
        return _ModelProblem(ds, spec, "perplexity")
    if problem == "synth_mlp":
        ds = synth_classification(params["n"],
                                  input_dim=params["input_dim"],
                                  num_classes=params["num_classes"],
                                  seed=params["data_seed"],
                                  noise=params["noise"])
        spec = MlpSpec(input_dim=params["input_dim"],
                       hidden_dims=tuple(model["hidden_dims"]),
                       num_classes=params["num_classes"],
                       activation=model["activation"])
        return _ModelProblem(ds, spec, "accuracy")
    raise ValueError(f"unknown problem {problem!r}")


def build_problem(config: RunConfig) -> _ModelProblem | None:
    """Dataset + model spec for a config; None for the quadratic probe."""
    if config.problem == "quadratic":
        return None
    return _build_problem_cached(
        config.problem,
        json.dumps(config.problem_params, sort_keys=True),
        json.dumps(config.model, sort_keys=True))


# ---------------------------------------------------------------------------
# training runs
# ---------------------------------------------------------------------------


def _finish(config, log, evals, final, t0, skips, diverged, diverged_at):
    return RunRecord(config=config, run_id=config.run_id,
                     iteration_log=log, epoch_evals=evals,
                     final_train_loss=final,
                     wall_clock_ms=(time.perf_counter() - t0) * 1000.0,
                     zero_gradient_skips=skips, diverged=diverged,
                     diverged_at=diverged_at)


def _run_quadratic(config: RunConfig, t0: float) -> RunRecord:
    """Convex probe f(x) = 0.5 ||x||^2; gradient is x itself.

    One iteration per epoch (the "dataset" is the function), so epochs and
    iterations coincide.  Useful because every optimizer trajectory on it
    is hand-checkable.
    """
    dim = int(config.model["dim"])
    x = RngStream(config.seed, INIT).generator().standard_normal(dim)
    opt = make_optimizer(config.optimizer["id"],
                         {k: v for k, v in config.optimizer.items()
                          if k != "id"})
    total = config.epochs
    if config.max_iterations is not None:
        total = min(total, config.max_iterations)
    log, evals = [], []
    for t in range(1, total + 1):
        loss = 0.5 * float(x @ x)
        if not math.isfinite(loss):
            return _finish(config, log, evals, math.inf, t0,
                           getattr(opt, "skipped", 0), True, t)
        log.append((t, t, loss))
        x = opt.update(x, x.copy(), config.step_size)
        end_loss = 0.5 * float(x @ x)
        if math.isfinite(end_loss):
            evals.append(EpochEval(epoch=t, iteration=t, eval_loss=end_loss,
                                   metric_name="loss",
                                   metric_value=end_loss))
    final = evals[-1].eval_loss if evals else math.inf
    diverged = not math.isfinite(final)
    return _finish(config, log, evals, final, t0,
                   getattr(opt, "skipped", 0), diverged,
                   total if diverged else None)


def run_training(config: RunConfig) -> RunRecord:
    """Execute one run: deterministic in the config, divergence-tolerant.

    Logs the minibatch training loss every iteration and a full-dataset
    eval-mode loss (plus accuracy or perplexity) at every epoch boundary
    and at the stopping iteration.  A non-finite loss or gradient stops
    the run and marks it diverged; nothing is raised.
    """
    t0 = time.perf_counter()
    if config.problem == "quadratic":
        return _run_quadratic(config, t0)

    prob = build_problem(config)
    ds, spec = prob.ds, prob.spec
    kept = ds.n - ds.n % config.batch_size
    if config.batch_label == "Full" and config.batch_size != kept:
        raise ValueError(f"a Full-batch run must use the whole trimmed "
                         f"dataset ({kept}), got batch {config.batch_size}")
    train = ds.take(kept)
    ipe = kept // config.batch_size
    total = config.epochs * ipe
    if config.max_iterations is not None:
        total = min(total, config.max_iterations)

    params = init_model(spec, config.seed)
    opt = make_optimizer(config.optimizer["id"],
                         {k: v for k, v in config.optimizer.items()
                          if k != "id"})
    dropout_stream = RngStream(config.seed, DROPOUT)
    dropout_p = None if config.dropout_enabled else 0.0
    micro = config.micro_batch

    log, evals = [], []
    diverged, diverged_at = False, None
    batches = None
    for t in range(1, total + 1):
        epoch = (t - 1) // ipe + 1
        slot = (t - 1) % ipe
        if slot == 0:
            batches = make_batches(kept, config.batch_size, config.seed,
                                   epoch)
        idx = np.sort(batches[slot])
        try:
            # Overflow on the way to divergence is an expected, handled
            # condition here, not worth a warning per occurrence.
            with np.errstate(over="ignore", invalid="ignore",
                             divide="ignore"):
                loss_val, grad = _train_step_gradient(
                    spec, params, train, idx, dropout_stream, t, dropout_p,
                    micro)
        except NonFinite:
            diverged, diverged_at = True, t
            break
        if not math.isfinite(loss_val) or not np.isfinite(grad).all():
            diverged, diverged_at = True, t
            break
        log.append((t, epoch, loss_val))
        opt.step(params, grad, config.step_size)
        if slot == ipe - 1 or t == total:
            try:
                with np.errstate(over="ignore", invalid="ignore",
                                 divide="ignore"):
                    eval_loss, metric = evaluate(spec, params, train.inputs,
                                                 train.targets)
            except NonFinite:
                diverged, diverged_at = True, t
                break
            if not math.isfinite(eval_loss):
                diverged, diverged_at = True, t
                break
            evals.append(EpochEval(epoch=epoch, iteration=t,
                                   eval_loss=eval_loss,
                                   metric_name=prob.metric,
                                   metric_value=metric))

    final = math.inf if diverged or not evals else evals[-1].eval_loss
    return _finish(config, log, evals, final, t0,
                   getattr(opt, "skipped", 0), diverged, diverged_at)


def _train_step_gradient(spec, params, train, idx, dropout_stream, t,
                         dropout_p, micro):
    """Train-mode loss and flat gradient for one minibatch.

    Micro-batch accumulation uses example-weighted means, matching the
    eval-mode accumulation contract.  All chunks of one iteration share
    that iteration's dropout masks (the masks are a function of (site,
    iteration), not of example position).
    """
    k = idx.size
    chunk = k if micro is None else min(micro, k)
    if chunk == k:
        params.zero_grad()
        loss = forward_loss(spec, params, train.inputs[idx],
                            train.targets[idx], mode="train",
                            dropout_stream=dropout_stream, iteration=t,
                            dropout_p=dropout_p)
        loss.backward(free=True)
        grad = params.gradient_flat()
        params.zero_grad()
        return float(loss.data), grad
    params.zero_grad()
    total_grad = np.zeros(params.total_dim)
    total_loss = 0.0
    for lo in range(0, k, chunk):
        hi = min(lo + chunk, k)
        sel = idx[lo:hi]
        loss = forward_loss(spec, params, train.inputs[sel],
                            train.targets[sel], mode="train",
                            dropout_stream=dropout_stream, iteration=t,
                            dropout_p=dropout_p)
        loss.backward(free=True)
        total_grad += (hi - lo) * params.gradient_flat()
        total_loss += (hi - lo) * float(loss.data)
        params.zero_grad()
    return total_loss / k, total_grad / k


# ---------------------------------------------------------------------------
# result cache
# ---------------------------------------------------------------------------


class RunCache:
    """Content-addressed store of RunRecords, one JSON file per run_id.

    Safe for concurrent writers: files are written to a temp name and
    atomically renamed, and a stale or colliding entry (config mismatch)
    is simply ignored.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, run_id: str) -> Path:
        return self.root / f"{run_id}.json"

    def get(self, config: RunConfig) -> RunRecord | None:
        path = self._path(config.run_id)
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError):
            return None
        if payload.get("config") != config.to_dict():
            return None
        return RunRecord.from_dict(payload)

    def put(self, record: RunRecord) -> None:
        path = self._path(record.run_id)
        tmp = path.with_suffix(f".tmp.{os.getpid()}.{id(record)}")
        tmp.write_text(json.dumps(record.to_dict()), encoding="utf-8")
        os.replace(tmp, path)


def cache_from_env() -> RunCache | None:
    """RunCache at $OPTLAB_CACHE_DIR, or None when the variable is unset."""
    root = os.environ.get("OPTLAB_CACHE_DIR")
    return RunCache(root) if root else None


def run_or_load(config: RunConfig, cache: RunCache | None = None) -> RunRecord:
    if cache is not None:
        hit = cache.get(config)
        if hit is not None:
            return hit
    record = run_training(config)
    if cache is not None:
        cache.put(record)
    return record


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------


def _default_evaluate(cache):
    def evaluate_config(config: RunConfig) -> float:
        record = run_or_load(config, cache)
        return math.inf if record.diverged else record.final_train_loss
    return evaluate_config


def grid_search(base_config: RunConfig, seeds, evaluate=None,
                cache: RunCache | None = None) -> GridResult:
    """Step-size selection: decades, edge extension, half-power refinement.

    Round 1 scores {1e-5 ... 1e0}, each step size by the max over seeds of
    the final training loss (diverged runs score +inf).  While the leader
    sits on an edge of the decade grid, the grid grows one decade that way
    (up to MAX_GRID_EXTENSIONS per side).  The two half-powers adjacent to
    the leader are then added, and the overall argmin wins; exact ties go
    to the smaller step size.  ``evaluate`` may be injected (tests swap in
    synthetic loss surfaces); by default it trains per (step size, seed).
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("grid search needs at least one seed")
    evaluate_config = evaluate or _default_evaluate(cache)

    scores = {}  # step_size -> (per_seed tuple, max)

    def measure(step: float) -> None:
        if step in scores:
            return
        per_seed = tuple(
            evaluate_config(replace(base_config, step_size=step, seed=s))
            for s in seeds)
        worst = max(per_seed)
        scores[step] = (per_seed, worst if math.isfinite(worst) else math.inf)

    def leader() -> float:
        finite = [(worst, step) for step, (_, worst) in scores.items()
                  if math.isfinite(worst)]
        if not finite:
            raise AllDiverged("every step size diverged on every seed")
        return min(finite)[1]

    decades = list(GRID_DECADES)
    for k in decades:
        measure(10.0 ** k)
    rounds = 1

    extensions = {"low": 0, "high": 0}
    while True:
        best = leader()
        if best == 10.0 ** decades[0] and extensions["low"] < MAX_GRID_EXTENSIONS:
            decades.insert(0, decades[0] - 1)
            measure(10.0 ** decades[0])
            extensions["low"] += 1
        elif best == 10.0 ** decades[-1] and extensions["high"] < MAX_GRID_EXTENSIONS:
            decades.append(decades[-1] + 1)
            measure(10.0 ** decades[-1])
            extensions["high"] += 1
        else:
            break
        rounds += 1

    best_exp = math.log10(leader())
    for half in (best_exp - 0.5, best_exp + 0.5):
        measure(10.0 ** half)
    rounds += 1

    finite = [(worst, step) for step, (_, worst) in scores.items()
              if math.isfinite(worst)]
    if not finite:
        raise AllDiverged("every step size diverged on every seed")
    selected = min(finite)[1]

    candidates = [GridCandidate(step_size=s, per_seed=scores[s][0],
                                max_over_seeds=scores[s][1])
                  for s in sorted(scores)]
    return GridResult(candidates=candidates, selected=selected,
                      refinement_rounds=rounds)


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepConfig:
    """Declarative sweep: problem x optimizers x ladder x seeds.

    ``optimizer_configs`` maps each optimizer id to its complete
    hyperparameter dict (defaults already applied by the config layer).
    """

    problem: str
    problem_params: dict
    model: dict
    optimizers: tuple
    optimizer_configs: dict
    base: int
    seeds: tuple
    reference_iters: int
    dropout_enabled: bool = True
    micro_batch: int | None = None
    cells: tuple | None = None  # optional (optimizer_id, label) subset


@dataclass
class SweepResult:
    ladder: list
    budgets: dict
    grids: dict        # (optimizer_id, label) -> GridResult
    records: dict      # (optimizer_id, label, seed) -> RunRecord
    errors: dict       # (optimizer_id, label) -> repr of the failure

    @property
    def diverged_only(self) -> bool:
        return bool(self.records) and all(r.diverged
                                          for r in self.records.values())


def _cell_base_config(sweep_cfg: SweepConfig, optimizer: dict, label: str,
                      budget: StoppingBudget) -> RunConfig:
    return RunConfig(problem=sweep_cfg.problem,
                     problem_params=dict(sweep_cfg.problem_params),
                     model=dict(sweep_cfg.model),
                     optimizer=dict(optimizer),
                     step_size=1.0,
                     batch_label=label,
                     batch_size=budget.batch_size,
                     epochs=budget.epochs,
                     max_iterations=budget.iterations,
                     seed=sweep_cfg.seeds[0],
                     dropout_enabled=sweep_cfg.dropout_enabled,
                     micro_batch=sweep_cfg.micro_batch)


def sweep(sweep_cfg: SweepConfig, threads: int = 1,
          cache: RunCache | None = None) -> SweepResult:
    """Grid-tune then run finals for every requested (optimizer, label) cell.

    Cells are independent: each owns its model parameters, optimizer state,
    and RNG streams, so a thread pool of any size yields results identical
    to sequential execution.  A cell failure is recorded and skipped; the
    remaining cells still complete.  Final runs at the selected step size
    hit the cache entries the grid already wrote, so re-running a finished
    sweep does no new training.
    """
    optimizer_configs = sweep_cfg.optimizer_configs
    prob_probe = RunConfig(problem=sweep_cfg.problem,
                           problem_params=dict(sweep_cfg.problem_params),
                           model=dict(sweep_cfg.model),
                           optimizer={"id": "sgd-m", "momentum": 0.0},
                           step_size=1.0, batch_label="S", batch_size=1,
                           epochs=1, max_iterations=1, seed=0)
    prob = build_problem(prob_probe)
    if prob is None:
        raise ValueError("sweeps need a dataset-backed problem")
    ladder = batch_size_ladder(sweep_cfg.base, prob.ds.n)
    budgets = stopping_iterations(ladder, sweep_cfg.reference_iters)

    cells = (list(sweep_cfg.cells) if sweep_cfg.cells is not None
             else [(opt, label) for opt in sweep_cfg.optimizers
                   for label in LABELS])
    for opt_id, label in cells:
        if opt_id not in optimizer_configs:
            raise ValueError(f"no hyperparameters provided for {opt_id!r}")
        if label not in budgets:
            raise ValueError(f"unknown batch label {label!r}")

    def run_cell(cell):
        opt_id, label = cell
        base = _cell_base_config(sweep_cfg, optimizer_configs[opt_id],
                                 label, budgets[label])
        grid = grid_search(base, sweep_cfg.seeds, cache=cache)
        finals = {}
        for s in sweep_cfg.seeds:
            cfg = replace(base, step_size=grid.selected, seed=s)
            finals[s] = run_or_load(cfg, cache)
        return grid, finals

    grids, records, errors = {}, {}, {}
    if threads <= 1:
        outcomes = [(cell, _try_cell(run_cell, cell)) for cell in cells]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [(cell, pool.submit(_try_cell, run_cell, cell))
                       for cell in cells]
            outcomes = [(cell, f.result()) for cell, f in futures]

    for cell, outcome in outcomes:
        if isinstance(outcome, Exception):
            errors[cell] = repr(outcome)
            continue
        grid, finals = outcome
        grids[cell] = grid
        for s, record in finals.items():
            records[(cell[0], cell[1], s)] = record
    return SweepResult(ladder=ladder, budgets=budgets, grids=grids,
                       records=records, errors=errors)


def _try_cell(run_cell, cell):
    try:
        return run_cell(cell)
    except AllDiverged as exc:
        return exc
    except (ValueError, NonFinite) as exc:
        return exc
