"""Gradient-noise measurement and distribution statistics.

The Gaussian quantile function is checked against scipy's ndtri as an
independent oracle.  The QQ calibration bound (max deviation over the
central 95% of plotting positions < 0.08 for 10,000 Gaussian draws) was
derived by Monte-Carlo with this package's own RNG before the module was
written: across 800 replications the statistic has mean 0.035 and 99th
percentile 0.063, while the raw maximum over *all* positions has mean 0.39
and never once fell below 0.08 (the outermost order statistics of a
10,000-point Gaussian sample swing with standard deviation about 0.28).
The frozen seed below measures 0.0387 central / 0.2466 raw.
"""

import math

import numpy as np
import pytest
import scipy.special as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from optlab import data, models, noise
from optlab.errors import BatchTooLarge, DegenerateFit, InsufficientSamples
from optlab.rng import NOISE, RngStream

# ---------------------------------------------------------------------------
# normal quantile function
# ---------------------------------------------------------------------------


def test_normal_quantile_matches_scipy_to_1e9():
    qs = np.concatenate([
        np.linspace(1e-6, 1 - 1e-6, 2001),
        [1e-12, 1e-9, 0.02425, 0.024250000001, 0.5, 0.97575, 1 - 1e-9],
    ])
    ours = noise.normal_quantiles(qs)
    ref = sp.ndtri(qs)
    assert np.max(np.abs(ours - ref)) < 1e-9


def test_normal_quantile_median_is_exactly_zero():
    assert noise.normal_quantile(0.5) == 0.0


def test_normal_quantile_known_points():
    # classic table values
    assert noise.normal_quantile(0.975) == pytest.approx(1.959963984540054)
    assert noise.normal_quantile(0.99) == pytest.approx(2.3263478740408408)


def test_normal_quantile_symmetry():
    for q in (1e-4, 0.01, 0.1, 0.3, 0.49):
        assert noise.normal_quantile(q) == pytest.approx(
            -noise.normal_quantile(1 - q), abs=1e-12)


def test_normal_quantile_rejects_out_of_domain():
    for q in (0.0, 1.0, -0.1, 1.1):
        with pytest.raises(ValueError):
            noise.normal_quantile(q)


@settings(max_examples=200)
@given(st.floats(min_value=1e-6, max_value=1 - 1e-6))
def test_normal_quantile_cdf_roundtrip(q):
    x = noise.normal_quantile(q)
    assert 0.5 * math.erfc(-x / math.sqrt(2)) == pytest.approx(q, abs=1e-12)


@settings(max_examples=50)
@given(st.floats(min_value=1e-9, max_value=1 - 1e-7),
       st.floats(min_value=1e-7, max_value=0.3))
def test_normal_quantile_monotone(q, dq):
    hi = min(q + dq, 1 - 1e-10)
    assert noise.normal_quantile(q) < noise.normal_quantile(hi)


# ---------------------------------------------------------------------------
# gaussian fit and QQ points
# ---------------------------------------------------------------------------


def test_gaussian_fit_hand_case():
    mu, sigma = noise.gaussian_fit(np.array([1.0, 2.0, 3.0]))
    assert mu == 2.0
    assert sigma == 1.0  # ddof=1: sqrt((1+0+1)/2)


def test_gaussian_fit_needs_two_values():
    with pytest.raises(ValueError):
        noise.gaussian_fit(np.array([4.0]))


def test_qq_exact_quantile_values_lie_on_diagonal():
    # Values placed exactly at the standard-normal quantiles of the plotting
    # positions must come back as (theo, emp) pairs with theo == emp.  The
    # values are generated with scipy so the check is against an independent
    # quantile implementation.
    n = 501
    positions = (np.arange(1, n + 1) - 0.5) / n
    values = sp.ndtri(positions)
    theo, emp = noise.qq_points(values, mu=0.0, sigma=1.0)
    assert np.max(np.abs(theo - emp)) < 1e-9
    assert np.all(np.diff(emp) >= 0)


def test_qq_points_sorts_and_scales():
    theo, emp = noise.qq_points(np.array([5.0, 1.0, 3.0]), mu=3.0, sigma=2.0)
    assert emp.tolist() == [1.0, 3.0, 5.0]
    # middle plotting position is 0.5 -> theoretical quantile is exactly mu
    assert theo[1] == 3.0
    assert theo[0] < theo[1] < theo[2]


def test_qq_constant_values_degenerate_fit():
    with pytest.raises(DegenerateFit):
        noise.qq_points(np.array([0.0, 0.0, 0.0]))


def test_qq_explicit_zero_sigma_degenerate_fit():
    with pytest.raises(DegenerateFit):
        noise.qq_points(np.array([1.0, 2.0]), mu=0.0, sigma=0.0)


def test_qq_needs_two_values():
    with pytest.raises(ValueError):
        noise.qq_points(np.array([1.0]), mu=0.0, sigma=1.0)


def test_qq_calibration_10k_gaussian_draws():
    # Frozen-seed calibration: 10,000 draws, Gaussian fitted to them, QQ
    # against the fit.  Central-band max deviation passes the Monte-Carlo
    # bound; the raw max over all positions sits far above it (tail order
    # statistics fluctuate by tenths of a sigma), which is why the metric
    # is defined over the central 95% of plotting positions.
    gen = RngStream(0, NOISE).generator(a=0)
    values = gen.standard_normal(10000)
    theo, emp = noise.qq_points(values)
    central = noise.qq_max_deviation(theo, emp)
    raw = noise.qq_max_deviation(theo, emp, central=1.0)
    assert central < 0.08
    assert central == pytest.approx(0.03866, abs=5e-4)
    assert raw > 0.08


def test_qq_max_deviation_hand_case():
    theo = np.array([0.0, 1.0, 2.0, 10.0])
    emp = np.array([0.0, 1.5, 2.0, 3.0])
    assert noise.qq_max_deviation(theo, emp, central=1.0) == 7.0
    # central=0.5 at n=4 keeps plotting positions 0.375 and 0.625 only
    assert noise.qq_max_deviation(theo, emp, central=0.5) == 0.5


def test_qq_max_deviation_validates_input():
    with pytest.raises(ValueError):
        noise.qq_max_deviation(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        noise.qq_max_deviation(np.zeros(3), np.zeros(3), central=0.0)


# ---------------------------------------------------------------------------
# kurtosis and tail statistics
# ---------------------------------------------------------------------------


def test_excess_kurtosis_hand_cases():
    # two-point symmetric mass: m2 = 1, m4 = 1 -> 1/1 - 3 = -2
    assert noise.excess_kurtosis(np.array([-1.0, -1.0, 1.0, 1.0])) == -2.0
    # [1,2,3]: m2 = 2/3, m4 = 2/3 -> (2/3)/(4/9) - 3 = -1.5
    assert noise.excess_kurtosis(np.array([1.0, 2.0, 3.0])) == pytest.approx(-1.5)


def test_excess_kurtosis_constant_sample_raises():
    with pytest.raises(ValueError):
        noise.excess_kurtosis(np.array([2.0, 2.0, 2.0]))


def test_tail_ratio_hand_case():
    # arange(1..100): linear-interpolated quantiles are exact affine values
    values = np.arange(1.0, 101.0)
    expected = (99.01 - 50.5) / (90.1 - 50.5)
    assert noise.tail_ratio_99_90(values) == pytest.approx(expected)


def test_tail_ratio_undefined_when_q90_equals_median():
    values = np.zeros(100)
    values[-1] = 1.0  # q50 = q90 = 0
    with pytest.raises(ValueError):
        noise.tail_ratio_99_90(values)


def test_gaussian_sample_kurtosis_near_zero_and_tail_near_theory():
    gen = RngStream(7, NOISE).generator(a=0)
    values = gen.standard_normal(100_000)
    kurt, tail = noise.tail_stats(values)
    assert abs(kurt) < 0.1
    assert tail == pytest.approx(1.8153, abs=0.05)  # (z99 - 0) / (z90 - 0)


def test_student_t3_sample_heavy_tailed():
    gen = RngStream(7, NOISE).generator(a=1)
    t3 = gen.standard_t(3, size=100_000)
    gen = RngStream(7, NOISE).generator(a=0)
    gauss = gen.standard_normal(100_000)
    t_kurt, t_tail = noise.tail_stats(t3)
    g_kurt, g_tail = noise.tail_stats(gauss)
    assert t_kurt > 3.0
    assert t_tail > g_tail


def test_tail_stats_needs_100_values():
    with pytest.raises(InsufficientSamples):
        noise.tail_stats(np.arange(99, dtype=np.float64))
    kurt, tail = noise.tail_stats(np.arange(100, dtype=np.float64))
    assert math.isfinite(kurt) and math.isfinite(tail)


# ---------------------------------------------------------------------------
# full and minibatch gradients
# ---------------------------------------------------------------------------


def _small_problem():
    ds = data.synth_classification(24, input_dim=4, num_classes=3, seed=5)
    spec = models.MlpSpec(input_dim=4, hidden_dims=(8,), num_classes=3)
    params = models.init_model(spec, seed=1)
    return spec, params, ds


def test_full_gradient_micro_batch_invariance():
    spec, params, ds = _small_problem()
    g_whole = noise.full_gradient(spec, params, ds)
    for micro in (3, 4, 8, 24):
        g = noise.full_gradient(spec, params, ds, micro_batch=micro)
        rel = np.linalg.norm(g - g_whole) / np.linalg.norm(g_whole)
        assert rel < 1e-10


def test_full_gradient_refuses_train_mode():
    spec, params, ds = _small_problem()
    with pytest.raises(ValueError):
        noise.full_gradient(spec, params, ds, mode="train")


def test_minibatch_gradient_of_everything_is_full_gradient():
    spec, params, ds = _small_problem()
    g_full = noise.full_gradient(spec, params, ds, micro_batch=8)
    g_mini = noise.minibatch_gradient(spec, params, ds, np.arange(ds.n),
                                      micro_batch=8)
    assert np.array_equal(g_full, g_mini)  # bitwise: same chunking


# ---------------------------------------------------------------------------
# grad_error_samples and NoiseSample
# ---------------------------------------------------------------------------


def test_grad_error_samples_reproducible():
    spec, params, ds = _small_problem()
    a = noise.grad_error_samples(spec, params, ds, batch_size=6, n_draws=40,
                                 seed=11)
    b = noise.grad_error_samples(spec, params, ds, batch_size=6, n_draws=40,
                                 seed=11)
    assert np.array_equal(a.values, b.values)
    assert np.all(a.values >= 0)
    c = noise.grad_error_samples(spec, params, ds, batch_size=6, n_draws=40,
                                 seed=12)
    assert not np.array_equal(a.values, c.values)


def test_grad_error_samples_whole_dataset_batch_is_exactly_zero():
    spec, params, ds = _small_problem()
    for micro in (None, 8):
        ns = noise.grad_error_samples(spec, params, ds, batch_size=ds.n,
                                      n_draws=30, seed=0, micro_batch=micro)
        assert np.all(ns.values == 0.0)
        assert ns.fitted_sigma == 0.0
        assert math.isnan(ns.excess_kurtosis)


def test_grad_error_samples_batch_too_large():
    spec, params, ds = _small_problem()
    with pytest.raises(BatchTooLarge):
        noise.grad_error_samples(spec, params, ds, batch_size=ds.n + 1,
                                 n_draws=30, seed=0)


def test_grad_error_samples_validates_counts():
    spec, params, ds = _small_problem()
    with pytest.raises(ValueError):
        noise.grad_error_samples(spec, params, ds, batch_size=0,
                                 n_draws=30, seed=0)
    with pytest.raises(ValueError):
        noise.grad_error_samples(spec, params, ds, batch_size=6,
                                 n_draws=29, seed=0)


def test_noise_sample_statistics_recompute_on_assignment():
    ns = noise.NoiseSample(values=np.array([1.0, 2.0, 3.0, 4.0]), batch_size=2)
    assert ns.fitted_mu == 2.5
    old_sigma = ns.fitted_sigma
    ns.values = np.array([10.0, 20.0, 30.0, 40.0])
    assert ns.fitted_mu == 25.0
    assert ns.fitted_sigma == pytest.approx(10 * old_sigma)


def test_noise_sample_rejects_bad_values():
    with pytest.raises(ValueError):
        noise.NoiseSample(values=np.array([1.0, -0.5]), batch_size=2)
    with pytest.raises(ValueError):
        noise.NoiseSample(values=np.array([1.0]), batch_size=2)


def test_noise_sample_qq_and_summary():
    gen = RngStream(3, NOISE).generator(a=0)
    ns = noise.NoiseSample(values=np.abs(gen.standard_normal(200)),
                           batch_size=16)
    theo, emp = ns.qq()
    assert theo.shape == emp.shape == (200,)
    s = ns.summary()
    assert s["batch_size"] == 16 and s["n_draws"] == 200
    for key in ("fitted_mu", "fitted_sigma", "excess_kurtosis",
                "tail_ratio_99_90"):
        assert math.isfinite(s[key])


def test_degenerate_noise_sample_qq_raises():
    ns = noise.NoiseSample(values=np.zeros(30), batch_size=4)
    with pytest.raises(DegenerateFit):
        ns.qq()


def test_lm_gradient_noise_at_init_is_heavy_tailed():
    # Expected-trend observation, pinned by a fixed seed: minibatch
    # gradient-error norms for a fresh character LM have positive excess
    # kurtosis (heavier than Gaussian).  Four seeds were checked before
    # freezing; all were positive (0.02 to 1.5).
    corpus = data.make_toy_corpus(6000, seed=3)
    ds = data.tokenize_corpus(corpus, seq_len=16)
    spec = models.TransformerLmSpec(vocab_size=ds.vocab_size, embed_dim=16,
                                    num_heads=2, num_layers=1, ff_dim=16,
                                    seq_len=16, dropout_p=0.0)
    params = models.init_model(spec, seed=0)
    ns = noise.grad_error_samples(spec, params, ds, batch_size=16,
                                  n_draws=500, seed=0, micro_batch=128)
    assert ns.excess_kurtosis > 0.0
    assert ns.batch_size == 16
    assert ns.at_params is params
