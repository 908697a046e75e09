"""JSON config parsing with strict schemas and explicit defaults.

Two document shapes share one entry point: a run document describes a
single training run (it becomes a RunConfig) and a sweep document, which
is recognized by its ``optimizers`` key, describes a whole grid-tuned
matrix (it becomes a SweepConfig).  Validation is strict both ways:
unknown keys are hard errors, not warnings, and every violation reports
the dotted path of the offending field.  Defaults are only ever filled
into missing fields, never over explicit values.

The full schema is documented in README.md; ``serialize_config`` writes a
document that parses back to an equal config, with every default made
explicit.
"""

from __future__ import annotations

import json

from .errors import SchemaError
from .harness import LABELS, RunConfig, SweepConfig
from .optimizers import OPTIMIZER_IDS

# per-problem defaults for the data recipe and the architecture
PROBLEM_PARAM_DEFAULTS = {
    "char_lm": {"corpus_bytes": None},
    "synth_mlp": {"n": 600, "input_dim": 8, "num_classes": 4,
                  "data_seed": 0, "noise": 0.7},
    "quadratic": {},
}

MODEL_DEFAULTS = {
    "char_lm": {"embed_dim": 64, "num_heads": 2, "num_layers": 2,
                "ff_dim": 64, "seq_len": 32, "dropout_p": 0.1},
    "synth_mlp": {"hidden_dims": [32], "activation": "relu"},
    "quadratic": {"dim": 20},
}


def optimizer_defaults(optimizer_id: str) -> dict:
    """Complete hyperparameter dict for an optimizer id.

    The ``+m`` ids carry momentum 0.9 (beta1 0.9 for Adam); ``-m`` ids
    carry 0.  Shared Adam/RMSprop defaults: beta2 0.999, epsilon 1e-8.
    """
    if optimizer_id not in OPTIMIZER_IDS:
        raise SchemaError("optimizer.id",
                          f"unknown optimizer {optimizer_id!r}")
    with_m = optimizer_id.endswith("+m")
    if optimizer_id == "rmsprop":
        return {"id": "rmsprop", "beta2": 0.999, "epsilon": 1e-8}
    if optimizer_id.startswith("adam"):
        return {"id": optimizer_id, "beta1": 0.9 if with_m else 0.0,
                "beta2": 0.999, "epsilon": 1e-8, "bias_correction": True,
                "epsilon_inside_sqrt": True}
    return {"id": optimizer_id, "momentum": 0.9 if with_m else 0.0}


# ---------------------------------------------------------------------------
# validation helpers
# ---------------------------------------------------------------------------


def _fail(path: str, message: str):
    raise SchemaError(path, message)


def _require_mapping(value, path):
    if not isinstance(value, dict):
        _fail(path, f"expected an object, got {type(value).__name__}")
    return value


def _no_unknown_keys(doc: dict, allowed, path: str):
    unknown = set(doc) - set(allowed)
    if unknown:
        key = sorted(unknown)[0]
        _fail(f"{path}.{key}" if path else key, "unknown key")


def _get_int(doc, key, path, default=None, minimum=None, nullable=False):
    if key not in doc:
        return default
    v = doc[key]
    if v is None and nullable:
        return None
    if isinstance(v, bool) or not isinstance(v, int):
        _fail(f"{path}{key}", f"expected an integer, got {v!r}")
    if minimum is not None and v < minimum:
        _fail(f"{path}{key}", f"must be >= {minimum}, got {v}")
    return v


def _get_number(doc, key, path, default=None, minimum=None,
                exclusive_minimum=None, maximum_exclusive=None):
    if key not in doc:
        return default
    v = doc[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        _fail(f"{path}{key}", f"expected a number, got {v!r}")
    v = float(v)
    if minimum is not None and v < minimum:
        _fail(f"{path}{key}", f"must be >= {minimum}, got {v}")
    if exclusive_minimum is not None and v <= exclusive_minimum:
        _fail(f"{path}{key}", f"must be > {exclusive_minimum}, got {v}")
    if maximum_exclusive is not None and v >= maximum_exclusive:
        _fail(f"{path}{key}", f"must be < {maximum_exclusive}, got {v}")
    return v


def _get_bool(doc, key, path, default=None):
    if key not in doc:
        return default
    v = doc[key]
    if not isinstance(v, bool):
        _fail(f"{path}{key}", f"expected true or false, got {v!r}")
    return v


def _get_str(doc, key, path, default=None, choices=None):
    if key not in doc:
        if default is None and choices is not None:
            _fail(f"{path}{key}", "missing required field")
        return default
    v = doc[key]
    if not isinstance(v, str):
        _fail(f"{path}{key}", f"expected a string, got {v!r}")
    if choices is not None and v not in choices:
        _fail(f"{path}{key}",
              f"must be one of {sorted(choices)}, got {v!r}")
    return v


# ---------------------------------------------------------------------------
# section parsers
# ---------------------------------------------------------------------------


def _parse_problem_sections(doc: dict):
    problem = _get_str(doc, "problem", "", choices=PROBLEM_PARAM_DEFAULTS)
    raw_params = _require_mapping(doc.get("problem_params", {}),
                                  "problem_params")
    raw_model = _require_mapping(doc.get("model", {}), "model")
    params = dict(PROBLEM_PARAM_DEFAULTS[problem])
    model = dict(MODEL_DEFAULTS[problem])
    _no_unknown_keys(raw_params, params, "problem_params")
    _no_unknown_keys(raw_model, model, "model")

    if problem == "char_lm":
        params["corpus_bytes"] = _get_int(raw_params, "corpus_bytes",
                                          "problem_params.",
                                          default=params["corpus_bytes"],
                                          minimum=2, nullable=True)
        for key in ("embed_dim", "num_heads", "num_layers", "ff_dim",
                    "seq_len"):
            model[key] = _get_int(raw_model, key, "model.",
                                  default=model[key], minimum=1)
        model["dropout_p"] = _get_number(raw_model, "dropout_p", "model.",
                                         default=model["dropout_p"],
                                         minimum=0.0, maximum_exclusive=1.0)
        if model["embed_dim"] % model["num_heads"] != 0:
            _fail("model.num_heads",
                  f"must divide embed_dim {model['embed_dim']}")
    elif problem == "synth_mlp":
        for key in ("n", "input_dim", "num_classes"):
            params[key] = _get_int(raw_params, key, "problem_params.",
                                   default=params[key], minimum=1)
        if params["num_classes"] < 2:
            _fail("problem_params.num_classes", "need at least 2 classes")
        params["data_seed"] = _get_int(raw_params, "data_seed",
                                       "problem_params.",
                                       default=params["data_seed"])
        params["noise"] = _get_number(raw_params, "noise", "problem_params.",
                                      default=params["noise"], minimum=0.0)
        hidden = raw_model.get("hidden_dims", model["hidden_dims"])
        if (not isinstance(hidden, list) or not hidden
                or not all(isinstance(h, int) and not isinstance(h, bool)
                           and h >= 1 for h in hidden)):
            _fail("model.hidden_dims", "expected a list of positive integers")
        model["hidden_dims"] = list(hidden)
        model["activation"] = _get_str(raw_model, "activation", "model.",
                                       default=model["activation"],
                                       choices=("relu", "tanh"))
    else:  # quadratic
        model["dim"] = _get_int(raw_model, "dim", "model.",
                                default=model["dim"], minimum=1)
    return problem, params, model


def _parse_optimizer(raw, path="optimizer"):
    raw = _require_mapping(raw, path)
    opt_id = _get_str(raw, "id", f"{path}.", choices=OPTIMIZER_IDS)
    full = optimizer_defaults(opt_id)
    _no_unknown_keys(raw, full, path)
    p = f"{path}."
    if "momentum" in full:
        full["momentum"] = _get_number(raw, "momentum", p,
                                       default=full["momentum"],
                                       minimum=0.0, maximum_exclusive=1.0)
    if "beta1" in full:
        full["beta1"] = _get_number(raw, "beta1", p, default=full["beta1"],
                                    minimum=0.0, maximum_exclusive=1.0)
    if "beta2" in full:
        full["beta2"] = _get_number(raw, "beta2", p, default=full["beta2"],
                                    minimum=0.0, maximum_exclusive=1.0)
    if "epsilon" in full:
        full["epsilon"] = _get_number(raw, "epsilon", p,
                                      default=full["epsilon"], minimum=0.0)
    if "bias_correction" in full:
        full["bias_correction"] = _get_bool(raw, "bias_correction", p,
                                            default=full["bias_correction"])
    if "epsilon_inside_sqrt" in full:
        full["epsilon_inside_sqrt"] = _get_bool(
            raw, "epsilon_inside_sqrt", p,
            default=full["epsilon_inside_sqrt"])
    return full


_RUN_KEYS = ("problem", "problem_params", "model", "optimizer", "step_size",
             "batch_label", "batch_size", "epochs", "max_iterations", "seed",
             "dropout_enabled", "micro_batch")

_SWEEP_KEYS = ("problem", "problem_params", "model", "optimizers",
               "optimizer_overrides", "base", "seeds", "reference_iters",
               "dropout_enabled", "micro_batch", "cells")


def _parse_run(doc: dict) -> RunConfig:
    _no_unknown_keys(doc, _RUN_KEYS, "")
    problem, params, model = _parse_problem_sections(doc)
    if "optimizer" not in doc:
        _fail("optimizer", "missing required field")
    optimizer = _parse_optimizer(doc["optimizer"])
    step_size = _get_number(doc, "step_size", "", exclusive_minimum=0.0)
    if step_size is None:
        _fail("step_size", "missing required field")
    default_batch = 1 if problem == "quadratic" else None
    batch_size = _get_int(doc, "batch_size", "", default=default_batch,
                          minimum=1)
    if batch_size is None:
        _fail("batch_size", "missing required field")
    return RunConfig(
        problem=problem,
        problem_params=params,
        model=model,
        optimizer=optimizer,
        step_size=step_size,
        batch_label=_get_str(doc, "batch_label", "", default="Full",
                             choices=LABELS),
        batch_size=batch_size,
        epochs=_get_int(doc, "epochs", "", default=1, minimum=1),
        max_iterations=_get_int(doc, "max_iterations", "", default=None,
                                minimum=1, nullable=True),
        seed=_get_int(doc, "seed", "", default=0),
        dropout_enabled=_get_bool(doc, "dropout_enabled", "", default=True),
        micro_batch=_get_int(doc, "micro_batch", "", default=None,
                             minimum=1, nullable=True),
    )


def _parse_seed_list(doc, key, path, default):
    if key not in doc:
        return tuple(default)
    v = doc[key]
    if (not isinstance(v, list) or not v
            or not all(isinstance(s, int) and not isinstance(s, bool)
                       for s in v)):
        _fail(f"{path}{key}", "expected a non-empty list of integers")
    if len(set(v)) != len(v):
        _fail(f"{path}{key}", "seeds must be distinct")
    return tuple(v)


def _parse_sweep(doc: dict) -> SweepConfig:
    _no_unknown_keys(doc, _SWEEP_KEYS, "")
    problem, params, model = _parse_problem_sections(doc)
    if problem == "quadratic":
        _fail("problem", "sweeps need a dataset-backed problem")

    raw_opts = doc.get("optimizers")
    if (not isinstance(raw_opts, list) or not raw_opts
            or not all(isinstance(o, str) for o in raw_opts)):
        _fail("optimizers", "expected a non-empty list of optimizer ids")
    if len(set(raw_opts)) != len(raw_opts):
        _fail("optimizers", "optimizer ids must be distinct")
    overrides = _require_mapping(doc.get("optimizer_overrides", {}),
                                 "optimizer_overrides")
    _no_unknown_keys(overrides, raw_opts, "optimizer_overrides")
    optimizer_configs = {}
    for opt_id in raw_opts:
        if opt_id not in OPTIMIZER_IDS:
            _fail("optimizers", f"unknown optimizer {opt_id!r}")
        raw = dict(overrides.get(opt_id, {}))
        raw["id"] = opt_id
        optimizer_configs[opt_id] = _parse_optimizer(
            raw, path=f"optimizer_overrides.{opt_id}")

    base = _get_int(doc, "base", "", minimum=1)
    if base is None:
        _fail("base", "missing required field")
    reference_iters = _get_int(doc, "reference_iters", "", minimum=1)
    if reference_iters is None:
        _fail("reference_iters", "missing required field")

    cells = None
    if doc.get("cells") is not None:
        raw_cells = doc["cells"]
        if not isinstance(raw_cells, list) or not raw_cells:
            _fail("cells", "expected a non-empty list of "
                  "[optimizer_id, batch_label] pairs")
        cells = []
        for i, pair in enumerate(raw_cells):
            if (not isinstance(pair, list) or len(pair) != 2
                    or not all(isinstance(x, str) for x in pair)):
                _fail(f"cells.{i}", "expected [optimizer_id, batch_label]")
            opt_id, label = pair
            if opt_id not in raw_opts:
                _fail(f"cells.{i}",
                      f"{opt_id!r} is not in the optimizers list")
            if label not in LABELS:
                _fail(f"cells.{i}", f"unknown batch label {label!r}")
            cells.append((opt_id, label))
        cells = tuple(cells)

    return SweepConfig(
        problem=problem,
        problem_params=params,
        model=model,
        optimizers=tuple(raw_opts),
        optimizer_configs=optimizer_configs,
        base=base,
        seeds=_parse_seed_list(doc, "seeds", "", default=(0, 1, 2)),
        reference_iters=reference_iters,
        dropout_enabled=_get_bool(doc, "dropout_enabled", "", default=True),
        micro_batch=_get_int(doc, "micro_batch", "", default=None,
                             minimum=1, nullable=True),
        cells=cells,
    )


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


def parse_config(text: str):
    """Parse a JSON config document into a RunConfig or SweepConfig.

    The ``optimizers`` key (a list) marks a sweep document; a single
    ``optimizer`` object marks a run document.  All defaults are applied;
    unknown keys anywhere raise SchemaError with the dotted field path.
    """
    try:
        doc = json.loads(text)
    except ValueError as exc:
        raise SchemaError("", f"invalid JSON: {exc}") from None
    _require_mapping(doc, "")
    if "optimizers" in doc:
        return _parse_sweep(doc)
    return _parse_run(doc)


def serialize_config(config) -> str:
    """Write a config back to JSON; parse_config(result) == config."""
    if isinstance(config, RunConfig):
        return json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"
    if isinstance(config, SweepConfig):
        doc = {
            "problem": config.problem,
            "problem_params": dict(config.problem_params),
            "model": dict(config.model),
            "optimizers": list(config.optimizers),
            "optimizer_overrides": {
                opt_id: {k: v for k, v in full.items() if k != "id"}
                for opt_id, full in config.optimizer_configs.items()},
            "base": config.base,
            "seeds": list(config.seeds),
            "reference_iters": config.reference_iters,
            "dropout_enabled": config.dropout_enabled,
            "micro_batch": config.micro_batch,
            "cells": ([list(c) for c in config.cells]
                      if config.cells is not None else None),
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"
    raise TypeError(f"not a config object: {type(config).__name__}")


_NOISE_KEYS = ("problem", "problem_params", "model", "batch_size", "n_draws",
               "seed", "init_seed", "micro_batch")


def parse_noise_config(text: str) -> dict:
    """Parse a gradient-noise analysis document.

    Returns a plain dict: problem, problem_params, model, batch_size,
    n_draws, seed (for the draw stream), init_seed (for the model
    parameters), micro_batch.
    """
    try:
        doc = json.loads(text)
    except ValueError as exc:
        raise SchemaError("", f"invalid JSON: {exc}") from None
    _require_mapping(doc, "")
    _no_unknown_keys(doc, _NOISE_KEYS, "")
    problem, params, model = _parse_problem_sections(doc)
    if problem == "quadratic":
        _fail("problem", "noise analysis needs a dataset-backed problem")
    batch_size = _get_int(doc, "batch_size", "", minimum=1)
    if batch_size is None:
        _fail("batch_size", "missing required field")
    return {
        "problem": problem,
        "problem_params": params,
        "model": model,
        "batch_size": batch_size,
        "n_draws": _get_int(doc, "n_draws", "", default=100, minimum=30),
        "seed": _get_int(doc, "seed", "", default=0),
        "init_seed": _get_int(doc, "init_seed", "", default=0),
        "micro_batch": _get_int(doc, "micro_batch", "", default=None,
                                minimum=1, nullable=True),
    }
