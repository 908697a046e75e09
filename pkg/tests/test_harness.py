"""Orchestration tests: ladders, budgets, runs, grid search, sweeps."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from optlab.errors import AllDiverged, LadderTooTall
from optlab.harness import (GridResult, RunCache, RunConfig, SweepConfig,
                            batch_size_ladder, grid_search, run_or_load,
                            run_training, stopping_iterations, sweep)


def mlp_config(**over):
    base = dict(
        problem="synth_mlp",
        problem_params={"n": 96, "input_dim": 4, "num_classes": 3,
                        "data_seed": 0, "noise": 0.7},
        model={"hidden_dims": [8], "activation": "relu"},
        optimizer={"id": "sgd-m", "momentum": 0.0},
        step_size=0.1,
        batch_label="M",
        batch_size=8,
        epochs=2,
        max_iterations=None,
        seed=0,
    )
    base.update(over)
    return RunConfig(**base)


def lm_config(**over):
    base = dict(
        problem="char_lm",
        problem_params={"corpus_bytes": 2048},
        model={"embed_dim": 16, "num_heads": 2, "num_layers": 1,
               "ff_dim": 16, "seq_len": 16, "dropout_p": 0.1},
        optimizer={"id": "sgd-m", "momentum": 0.0},
        step_size=0.1,
        batch_label="M",
        batch_size=16,
        epochs=2,
        max_iterations=None,
        seed=0,
    )
    base.update(over)
    return RunConfig(**base)


def quad_config(**over):
    base = dict(
        problem="quadratic",
        problem_params={},
        model={"dim": 20},
        optimizer={"id": "sgd-m", "momentum": 0.0},
        step_size=0.1,
        batch_label="Full",
        batch_size=1,
        epochs=5,
        max_iterations=None,
        seed=0,
    )
    base.update(over)
    return RunConfig(**base)


class TestBatchSizeLadder:
    def test_large_corpus_example(self):
        # 26,520 trimmed sequences, the classic small-LM scale
        ladder = batch_size_ladder(16, 26520)
        assert ladder == [("S", 16), ("M", 64), ("L", 256), ("XL", 1024),
                          ("Full", 26520)]

    def test_power_of_two_example(self):
        assert [b for _, b in batch_size_ladder(8, 4096)] == \
            [8, 32, 128, 512, 4096]

    def test_too_tall(self):
        with pytest.raises(LadderTooTall):
            batch_size_ladder(16, 500)

    def test_boundary_is_strict(self):
        # base*64 == kept is still too tall; one more example fits
        with pytest.raises(LadderTooTall):
            batch_size_ladder(8, 512)
        assert batch_size_ladder(8, 513)[-1] == ("Full", 513)

    def test_labels_and_ratios(self):
        ladder = batch_size_ladder(3, 1000)
        assert [label for label, _ in ladder] == ["S", "M", "L", "XL",
                                                  "Full"]
        sizes = [b for _, b in ladder]
        assert sizes[1] == 4 * sizes[0]
        assert sizes[2] == 4 * sizes[1]
        assert sizes[3] == 4 * sizes[2]
        assert sizes[4] == 1000


class TestStoppingIterations:
    def test_small_batch_bias_example(self):
        # one epoch at the smallest batch already overshoots a 320
        # iteration reference by more than 2x, so it runs 815 and is
        # flagged rather than cut below one epoch
        ladder = batch_size_ladder(80, 65200)
        budgets = stopping_iterations(ladder, 320)
        s = budgets["S"]
        assert (s.epochs, s.iterations, s.flagged) == (1, 815, True)
        full = budgets["Full"]
        assert (full.epochs, full.iterations, full.flagged) == (320, 320,
                                                                False)

    def test_full_budget_equals_reference(self):
        for ref in (1, 7, 25):
            budgets = stopping_iterations(batch_size_ladder(2, 400), ref)
            assert budgets["Full"].iterations_per_epoch == 1
            assert budgets["Full"].epochs == ref
            assert budgets["Full"].iterations == ref

    def test_exactly_matching_ladder(self):
        # kept 256, base 1: iterations per epoch divide 256 at every
        # level, so every label can hit the reference exactly
        budgets = stopping_iterations(batch_size_ladder(1, 256), 256)
        assert all(b.iterations == 256 for b in budgets.values())
        assert not any(b.flagged for b in budgets.values())

    def test_budget_never_below_one_epoch(self):
        budgets = stopping_iterations(batch_size_ladder(4, 1024), 1)
        assert all(b.epochs >= 1 for b in budgets.values())

    def test_flag_bounds(self):
        # reference 100 at 64 iterations/epoch -> 2 epochs = 128, inside
        # [50, 200]; at 512 iterations/epoch -> 512, outside
        budgets = stopping_iterations(batch_size_ladder(2, 1024), 100)
        m = budgets["M"]  # batch 8 -> 128 iters/epoch -> 1 epoch = 128
        assert m.iterations == 128 and not m.flagged
        s = budgets["S"]  # batch 2 -> 512 iters/epoch -> 512 total
        assert s.iterations == 512 and s.flagged

    def test_bad_reference(self):
        with pytest.raises(ValueError):
            stopping_iterations(batch_size_ladder(2, 400), 0)


class TestQuadraticRuns:
    def test_exact_minimizer_in_one_step(self):
        # f(x) = ||x||^2 / 2 has gradient x, so a unit step of plain GD
        # lands exactly on the minimum
        rec = run_training(quad_config(step_size=1.0, epochs=1))
        assert rec.final_train_loss == 0.0
        assert not rec.diverged

    def test_zero_step_is_constant(self):
        rec = run_training(quad_config(step_size=0.0, epochs=6))
        losses = [loss for _, _, loss in rec.iteration_log]
        assert max(losses) - min(losses) <= 1e-12

    def test_monotone_descent_until_floor(self):
        rec = run_training(quad_config(step_size=0.1, epochs=160))
        losses = [loss for _, _, loss in rec.iteration_log]
        for prev, nxt in zip(losses, losses[1:]):
            if prev > 1e-12:
                assert nxt < prev
        assert rec.final_train_loss <= 1e-12

    def test_epochs_equal_iterations(self):
        rec = run_training(quad_config(epochs=4))
        assert [(t, e) for t, e, _ in rec.iteration_log] == \
            [(1, 1), (2, 2), (3, 3), (4, 4)]
        assert len(rec.epoch_evals) == 4


class TestModelRuns:
    def test_zero_step_constant_mlp(self):
        cfg = mlp_config(step_size=0.0, batch_label="Full", batch_size=96,
                         epochs=4)
        rec = run_training(cfg)
        losses = [loss for _, _, loss in rec.iteration_log]
        assert max(losses) - min(losses) <= 1e-12
        evs = [e.eval_loss for e in rec.epoch_evals]
        assert max(evs) - min(evs) <= 1e-12

    def test_zero_step_constant_lm_no_dropout(self):
        cfg = lm_config(step_size=0.0, batch_label="Full", batch_size=127,
                        epochs=3, dropout_enabled=False)
        rec = run_training(cfg)
        losses = [loss for _, _, loss in rec.iteration_log]
        assert max(losses) - min(losses) <= 1e-12

    def test_zero_step_lm_dropout_eval_losses_identical(self):
        # train-mode losses vary with the per-iteration dropout masks,
        # but evaluation is mask-free, so frozen parameters must give
        # the same eval loss every epoch, bit for bit
        cfg = lm_config(step_size=0.0, batch_label="Full", batch_size=127,
                        epochs=3, dropout_enabled=True)
        rec = run_training(cfg)
        evs = [e.eval_loss for e in rec.epoch_evals]
        assert evs[0] == evs[1] == evs[2]

    def test_repeat_run_bitwise_identical(self):
        cfg = lm_config(step_size=0.05, epochs=2)
        a, b = run_training(cfg), run_training(cfg)
        assert a.iteration_log == b.iteration_log
        assert a.epoch_evals == b.epoch_evals
        assert a.final_train_loss == b.final_train_loss
        assert a.run_id == b.run_id

    def test_seed_changes_trajectory(self):
        a = run_training(mlp_config(seed=0))
        b = run_training(mlp_config(seed=1))
        assert a.iteration_log != b.iteration_log

    def test_epoch_boundaries(self):
        rec = run_training(mlp_config(epochs=2))  # 96/8 = 12 iters/epoch
        assert [t for t, _, _ in rec.iteration_log] == list(range(1, 25))
        assert [e.iteration for e in rec.epoch_evals] == [12, 24]
        assert [e.epoch for e in rec.epoch_evals] == [1, 2]
        assert rec.final_train_loss == rec.epoch_evals[-1].eval_loss

    def test_mid_epoch_stop_evaluates_at_stop(self):
        rec = run_training(mlp_config(epochs=2, max_iterations=7))
        assert len(rec.iteration_log) == 7
        assert rec.epoch_evals[-1].iteration == 7
        assert rec.final_train_loss == rec.epoch_evals[-1].eval_loss

    def test_full_label_requires_whole_dataset(self):
        with pytest.raises(ValueError):
            run_training(mlp_config(batch_label="Full", batch_size=8))

    def test_divergence_recorded_not_raised(self):
        rec = run_training(mlp_config(step_size=1e30, epochs=2))
        assert rec.diverged
        assert rec.diverged_at is not None
        assert rec.final_train_loss == math.inf
        # nothing after the diverged iteration was logged
        assert all(t <= rec.diverged_at for t, _, _ in rec.iteration_log)

    def test_micro_batch_matches_single_chunk(self):
        whole = run_training(mlp_config(micro_batch=None))
        split = run_training(mlp_config(micro_batch=3))
        for (t1, e1, l1), (t2, e2, l2) in zip(whole.iteration_log,
                                              split.iteration_log):
            assert (t1, e1) == (t2, e2)
            assert l1 == pytest.approx(l2, abs=1e-10)
        assert whole.final_train_loss == pytest.approx(
            split.final_train_loss, abs=1e-10)

    def test_record_round_trip(self):
        rec = run_training(mlp_config(epochs=1))
        again = type(rec).from_dict(rec.to_dict())
        assert again.run_id == rec.run_id
        assert again.iteration_log == [tuple(r) for r in rec.iteration_log]
        assert again.final_train_loss == rec.final_train_loss
        assert again.config == rec.config
        assert again.zero_gradient_skips == rec.zero_gradient_skips == 0


# ---------------------------------------------------------------------------
# grid search against synthetic loss surfaces
# ---------------------------------------------------------------------------


def surface_evaluate(table, default=math.inf):
    """evaluate(config) backed by {exponent*2 (int): {seed: loss}}."""

    def evaluate(config):
        key = round(2 * math.log10(config.step_size))
        return table.get(key, {}).get(config.seed, default)

    return evaluate


def flat(table_by_exp, seeds):
    return {k: {s: v for s in seeds} for k, v in table_by_exp.items()}


class TestGridSearch:
    def test_interior_winner_gets_half_powers(self):
        table = flat({-10: 5.0, -8: 4.0, -6: 2.0, -4: 1.5, -2: 1.8,
                      0: 6.0, -5: 1.7, -3: 1.6}, [0])
        result = grid_search(mlp_config(), [0],
                             evaluate=surface_evaluate(table))
        assert result.selected == 1e-2
        steps = [c.step_size for c in result.candidates]
        assert 10.0 ** -2.5 in steps and 10.0 ** -1.5 in steps
        assert result.refinement_rounds == 2

    def test_half_power_can_win(self):
        table = flat({-10: 5.0, -8: 4.0, -6: 2.0, -4: 1.5, -2: 1.8,
                      0: 6.0, -5: 1.2, -3: 1.6}, [0])
        result = grid_search(mlp_config(), [0],
                             evaluate=surface_evaluate(table))
        assert result.selected == 10.0 ** -2.5

    def test_edge_winner_extends_one_decade(self):
        table = flat({-10: 9.0, -8: 8.0, -6: 7.0, -4: 6.0, -2: 5.0,
                      0: 1.0, 2: 2.0, -1: 3.0, 1: 3.0}, [0])
        result = grid_search(mlp_config(), [0],
                             evaluate=surface_evaluate(table))
        assert result.selected == 1.0
        steps = [c.step_size for c in result.candidates]
        assert 10.0 in steps  # the extension decade was evaluated
        assert result.refinement_rounds == 3

    def test_max_over_seeds_selection(self):
        # candidate A has the best single-seed loss but the worse max
        table = {-4: {0: 2.0, 1: 1.4}, -2: {0: 1.6, 1: 1.7}}
        for k in (-10, -8, -6, 0):
            table[k] = {0: 9.0, 1: 9.0}
        table[-5] = table[-3] = {0: 9.0, 1: 9.0}
        result = grid_search(mlp_config(), [0, 1],
                             evaluate=surface_evaluate(table))
        assert result.selected == 1e-1
        by_step = {c.step_size: c for c in result.candidates}
        assert by_step[1e-2].max_over_seeds == 2.0
        assert by_step[1e-1].max_over_seeds == 1.7

    def test_tie_prefers_smaller_step(self):
        table = flat({-10: 1.0, -8: 1.0, -6: 1.0, -4: 1.0, -2: 1.0,
                      0: 1.0, -11: 1.0, -9: 1.0}, [0])
        result = grid_search(mlp_config(), [0],
                             evaluate=surface_evaluate(table))
        # everything measurable ties, so the smallest finite step wins
        assert result.selected == min(c.step_size
                                      for c in result.candidates
                                      if math.isfinite(c.max_over_seeds))

    def test_diverged_candidates_score_inf(self):
        table = flat({-10: 5.0, -8: 4.0, -6: 2.0, -4: 1.5, -2: math.inf,
                      0: math.inf, -5: 1.7, -3: 1.6}, [0])
        result = grid_search(mlp_config(), [0],
                             evaluate=surface_evaluate(table))
        assert result.selected == 1e-2
        by_step = {c.step_size: c for c in result.candidates}
        assert by_step[1.0].max_over_seeds == math.inf

    def test_all_diverged(self):
        with pytest.raises(AllDiverged):
            grid_search(mlp_config(), [0],
                        evaluate=lambda config: math.inf)

    def test_needs_a_seed(self):
        with pytest.raises(ValueError):
            grid_search(mlp_config(), [],
                        evaluate=lambda config: 1.0)

    def test_candidates_sorted_and_selected_is_argmin(self):
        table = flat({-10: 3.0, -8: 2.5, -6: 2.0, -4: 2.2, -2: 2.6,
                      0: 3.1, -9: 2.4, -7: 2.1}, [0])
        result = grid_search(mlp_config(), [0],
                             evaluate=surface_evaluate(table))
        steps = [c.step_size for c in result.candidates]
        assert steps == sorted(steps)
        finite = [c for c in result.candidates
                  if math.isfinite(c.max_over_seeds)]
        best = min(finite, key=lambda c: (c.max_over_seeds, c.step_size))
        assert result.selected == best.step_size


def oracle_grid_selection(lookup, seeds):
    """Brute-force restatement of the selection protocol for checking.

    Walks the rule set literally: score each decade by max over seeds
    (non-finite -> +inf), extend one decade at a time while the leader
    sits on an edge (at most three per side), add the two half-powers
    around the leader, then take the argmin with ties to the smaller
    step.  Shares no code with the implementation under test.
    """

    def worst(exp2):
        vals = [lookup(exp2, s) for s in seeds]
        m = max(vals)
        return m if math.isfinite(m) else math.inf

    exps = [2 * d for d in range(-5, 1)]
    low_ext = high_ext = 0
    while True:
        scored = [(worst(e), e) for e in exps]
        finite = [(w, e) for w, e in scored if math.isfinite(w)]
        if not finite:
            return None
        lead = min(finite)[1]
        if lead == exps[0] and low_ext < 3:
            exps.insert(0, exps[0] - 2)
            low_ext += 1
        elif lead == exps[-1] and high_ext < 3:
            exps.append(exps[-1] + 2)
            high_ext += 1
        else:
            break
    pool = exps + [lead - 1, lead + 1]
    finite = [(worst(e), e) for e in pool if math.isfinite(worst(e))]
    if not finite:
        return None
    return min(finite)[1]


@settings(max_examples=60, deadline=None)
@given(st.lists(
    st.one_of(st.floats(min_value=0.125, max_value=64.0, allow_nan=False),
              st.just(math.inf)),
    min_size=50, max_size=50))
def test_grid_matches_oracle_on_random_surfaces(values):
    # exponents from -11.5 to +4.5 in half-decade steps cover every step
    # size either procedure can reach (3 extensions per side plus half
    # powers); two seeds share the table with an offset
    exps = list(range(-23, 27, 2)) + [e + 1 for e in range(-23, 25, 2)]
    table = {}
    for i, e in enumerate(sorted(exps)):
        v = values[i % len(values)]
        table[e] = {0: v, 7: v if v == math.inf else v * 1.5}

    def lookup(exp2, seed):
        return table.get(exp2, {}).get(seed, math.inf)

    expected = oracle_grid_selection(lookup, [0, 7])

    def evaluate(config):
        return lookup(round(2 * math.log10(config.step_size)), config.seed)

    if expected is None:
        with pytest.raises(AllDiverged):
            grid_search(mlp_config(), [0, 7], evaluate=evaluate)
    else:
        result = grid_search(mlp_config(), [0, 7], evaluate=evaluate)
        assert math.isclose(result.selected, 10.0 ** (expected / 2),
                            rel_tol=1e-12)


# ---------------------------------------------------------------------------
# cache and sweep
# ---------------------------------------------------------------------------


class CountingCache(RunCache):
    def __init__(self, root):
        super().__init__(root)
        self.puts = 0

    def put(self, record):
        self.puts += 1
        super().put(record)


def small_sweep_config(**over):
    base = dict(
        problem="synth_mlp",
        problem_params={"n": 96, "input_dim": 4, "num_classes": 3,
                        "data_seed": 0, "noise": 0.7},
        model={"hidden_dims": [8], "activation": "relu"},
        optimizers=("sgd+m", "sign-m"),
        optimizer_configs={"sgd+m": {"id": "sgd+m", "momentum": 0.9},
                           "sign-m": {"id": "sign-m", "momentum": 0.0}},
        base=1,
        seeds=(0, 1),
        reference_iters=4,
        cells=(("sgd+m", "Full"), ("sign-m", "Full")),
    )
    base.update(over)
    return SweepConfig(**base)


def record_fingerprint(rec):
    return (rec.run_id, tuple(tuple(r) for r in rec.iteration_log),
            rec.final_train_loss, rec.zero_gradient_skips)


class TestCache:
    def test_round_trip(self, tmp_path):
        cache = RunCache(str(tmp_path))
        cfg = mlp_config(epochs=1)
        first = run_or_load(cfg, cache)
        second = run_or_load(cfg, cache)
        assert record_fingerprint(first) == record_fingerprint(second)

    def test_cache_hit_does_no_work(self, tmp_path):
        cache = CountingCache(str(tmp_path))
        cfg = mlp_config(epochs=1)
        run_or_load(cfg, cache)
        assert cache.puts == 1
        run_or_load(cfg, cache)
        assert cache.puts == 1

    def test_different_config_misses(self, tmp_path):
        cache = CountingCache(str(tmp_path))
        run_or_load(mlp_config(epochs=1), cache)
        run_or_load(mlp_config(epochs=1, seed=5), cache)
        assert cache.puts == 2


class TestSweep:
    def test_records_keyed_by_cell_and_seed(self, tmp_path):
        cfg = small_sweep_config()
        result = sweep(cfg, cache=RunCache(str(tmp_path)))
        assert set(result.records) == {
            (opt, label, seed)
            for opt, label in cfg.cells for seed in cfg.seeds}
        assert not result.errors
        for (opt, label, _), rec in result.records.items():
            grid = result.grids[(opt, label)]
            assert rec.config.step_size == grid.selected

    def test_rerun_with_cache_trains_nothing(self, tmp_path):
        cfg = small_sweep_config()
        cache = CountingCache(str(tmp_path))
        first = sweep(cfg, cache=cache)
        done = cache.puts
        assert done > 0
        second = sweep(cfg, cache=cache)
        assert cache.puts == done
        for key in first.records:
            assert record_fingerprint(first.records[key]) == \
                record_fingerprint(second.records[key])

    def test_thread_count_does_not_change_results(self, tmp_path):
        cfg = small_sweep_config()
        seq = sweep(cfg, threads=1, cache=RunCache(str(tmp_path / "a")))
        par = sweep(cfg, threads=4, cache=RunCache(str(tmp_path / "b")))
        assert set(seq.records) == set(par.records)
        for key in seq.records:
            assert record_fingerprint(seq.records[key]) == \
                record_fingerprint(par.records[key])
        assert seq.grids == par.grids

    def test_removing_a_cell_leaves_others_unchanged(self, tmp_path):
        both = sweep(small_sweep_config(),
                     cache=RunCache(str(tmp_path / "a")))
        only = sweep(small_sweep_config(cells=(("sgd+m", "Full"),),
                                        optimizers=("sgd+m",),
                                        optimizer_configs={
                                            "sgd+m": {"id": "sgd+m",
                                                      "momentum": 0.9}}),
                     cache=RunCache(str(tmp_path / "b")))
        for key, rec in only.records.items():
            assert record_fingerprint(rec) == \
                record_fingerprint(both.records[key])

    def test_cell_failure_preserves_other_results(self, tmp_path,
                                                  monkeypatch):
        import optlab.harness as harness_mod
        real = harness_mod.grid_search

        def failing(base_config, seeds, evaluate=None, cache=None):
            if base_config.optimizer["id"] == "sign-m":
                raise AllDiverged("forced for the test")
            return real(base_config, seeds, evaluate=evaluate, cache=cache)

        monkeypatch.setattr(harness_mod, "grid_search", failing)
        result = sweep(small_sweep_config(),
                       cache=RunCache(str(tmp_path)))
        assert ("sign-m", "Full") in result.errors
        assert "AllDiverged" in result.errors[("sign-m", "Full")]
        assert ("sgd+m", "Full", 0) in result.records
        assert ("sgd+m", "Full", 1) in result.records

    def test_full_product_when_no_cells_given(self, tmp_path):
        cfg = small_sweep_config(
            cells=None,
            optimizers=("sgd-m",),
            optimizer_configs={"sgd-m": {"id": "sgd-m", "momentum": 0.0}},
            seeds=(0,),
            reference_iters=2)
        result = sweep(cfg, cache=RunCache(str(tmp_path)))
        labels = [label for label, _ in result.ladder]
        assert set(result.grids) == {("sgd-m", label) for label in labels}
        assert len(result.records) == 5  # one seed, five ladder levels

    def test_unknown_cell_rejected(self, tmp_path):
        cfg = small_sweep_config(cells=(("rmsprop", "Full"),))
        with pytest.raises(ValueError):
            sweep(cfg, cache=RunCache(str(tmp_path)))
