"""Stochastic gradient noise measurement.

The quantity of interest is the distribution of ``||g_tilde - g||_2``, the
L2 error between a minibatch gradient and the full-dataset gradient at a
fixed parameter point.  This module computes those error samples and the
statistics used to compare their distribution to a Gaussian: a fitted
normal, QQ points against it, excess kurtosis, and a quantile tail ratio.

Everything runs in eval mode: dropout would add a second noise source and
hide the one being measured, so ``full_gradient`` refuses train mode.

The Gaussian quantile function is implemented here (rational initializer
plus one Newton step through the exact erfc-based CDF) rather than imported,
so the package has no runtime dependency beyond numpy; tests compare it to
an independent implementation.
"""

from __future__ import annotations

import math

import numpy as np

from .data import Dataset
from .errors import BatchTooLarge, DegenerateFit, InsufficientSamples
from .models import ModelSpec, ParamVector, forward_loss
from .rng import NOISE, RngStream

# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def full_gradient(spec: ModelSpec, params: ParamVector, ds: Dataset,
                  micro_batch: int | None = None, mode: str = "eval") -> np.ndarray:
    """Gradient of the mean loss over the whole dataset, as a flat vector.

    Computed as the example-count-weighted mean of micro-batch gradients, so
    the result is independent (to float64 reassociation, below 1e-10) of the
    micro-batch size used to fit memory.  Only eval mode is meaningful here;
    asking for train mode raises.
    """
    if mode != "eval":
        raise ValueError("full_gradient is an eval-mode quantity; train mode "
                         "would mix dropout noise into the measurement")
    params.zero_grad()
    micro = ds.n if micro_batch is None else min(micro_batch, ds.n)
    if micro < 1:
        raise ValueError("micro_batch must be positive")
    total = np.zeros(params.total_dim)
    for lo in range(0, ds.n, micro):
        hi = min(lo + micro, ds.n)
        loss = forward_loss(spec, params, ds.inputs[lo:hi], ds.targets[lo:hi],
                            mode="eval")
        loss.backward(free=True)
        total += (hi - lo) * params.gradient_flat()
        params.zero_grad()
    return total / ds.n


def minibatch_gradient(spec: ModelSpec, params: ParamVector, ds: Dataset,
                       indices: np.ndarray,
                       micro_batch: int | None = None) -> np.ndarray:
    """Eval-mode gradient of the mean loss over ``indices``.

    Accumulates over micro-batches with the same chunk boundaries as
    ``full_gradient`` so that ``indices == arange(n)`` with the same
    ``micro_batch`` reproduces it bitwise.
    """
    indices = np.asarray(indices)
    k = indices.size
    micro = k if micro_batch is None else min(micro_batch, k)
    params.zero_grad()
    total = np.zeros(params.total_dim)
    for lo in range(0, k, micro):
        hi = min(lo + micro, k)
        sel = indices[lo:hi]
        loss = forward_loss(spec, params, ds.inputs[sel], ds.targets[sel],
                            mode="eval")
        loss.backward(free=True)
        total += (hi - lo) * params.gradient_flat()
        params.zero_grad()
    return total / k


def grad_error_samples(spec: ModelSpec, params: ParamVector, ds: Dataset,
                       batch_size: int, n_draws: int, seed: int,
                       micro_batch: int | None = None) -> "NoiseSample":
    """Norms ``||g_tilde - g||_2`` for ``n_draws`` random minibatches.

    Each draw samples ``batch_size`` distinct examples (without replacement
    within the draw, independently across draws) from the noise stream at
    counter block ``draw``, so draw k is reproducible in isolation.  The
    full gradient is computed once and reused for every draw.  Indices are
    gathered in sorted order; that keeps the summation order canonical, so
    a draw of the whole dataset reproduces the full gradient bitwise and
    its error norm is exactly zero.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    if batch_size > ds.n:
        raise BatchTooLarge(f"batch_size {batch_size} exceeds the "
                            f"{ds.n} available examples")
    if n_draws < 30:
        raise ValueError("need at least 30 draws for the tail statistics "
                         "to mean anything")
    g_full = full_gradient(spec, params, ds, micro_batch)
    stream = RngStream(seed, NOISE)
    out = np.empty(n_draws)
    for draw in range(n_draws):
        idx = stream.generator(a=draw).choice(ds.n, size=batch_size,
                                              replace=False)
        idx.sort()
        g = minibatch_gradient(spec, params, ds, idx,
                               micro_batch=micro_batch)
        out[draw] = float(np.linalg.norm(g - g_full))
    return NoiseSample(values=out, batch_size=batch_size, at_params=params)


# ---------------------------------------------------------------------------
# Gaussian quantile function
# ---------------------------------------------------------------------------

# rational initializer coefficients (central and tail regions)
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def _poly(coeffs, r):
    acc = coeffs[0]
    for c in coeffs[1:]:
        acc = acc * r + c
    return acc


def _norm_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def normal_quantile(q: float) -> float:
    """Inverse standard normal CDF, absolute error well under 1e-9.

    A piecewise rational approximation lands within ~1e-9; one Newton step
    through the exact CDF polishes it to machine precision.
    """
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile argument must be in (0, 1), got {q}")
    if q < _P_LOW:
        r = math.sqrt(-2.0 * math.log(q))
        x = _poly(_C, r) / (_poly(_D, r) * r + 1.0)
    elif q <= 1.0 - _P_LOW:
        u = q - 0.5
        r = u * u
        x = _poly(_A, r) * u / (_poly(_B, r) * r + 1.0)
    else:
        r = math.sqrt(-2.0 * math.log(1.0 - q))
        x = -_poly(_C, r) / (_poly(_D, r) * r + 1.0)
    pdf = math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    if pdf > 0.0:
        if q > 1.0 - _P_LOW:
            # Newton through the survival function: 1 - q is exact for
            # q >= 0.5 and erfc avoids the cancellation Phi(x) - q suffers
            # when both sit next to 1
            x += (0.5 * math.erfc(x / math.sqrt(2.0)) - (1.0 - q)) / pdf
        else:
            x -= (_norm_cdf(x) - q) / pdf
    return x


def normal_quantiles(qs: np.ndarray) -> np.ndarray:
    return np.array([normal_quantile(float(q)) for q in np.asarray(qs).reshape(-1)])


# ---------------------------------------------------------------------------
# distribution statistics
# ---------------------------------------------------------------------------

def gaussian_fit(values: np.ndarray) -> tuple[float, float]:
    """Sample mean and unbiased (n-1) standard deviation."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise ValueError("need at least two values to fit a Gaussian")
    return float(values.mean()), float(values.std(ddof=1))


def qq_points(values: np.ndarray, mu: float | None = None,
              sigma: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(theoretical, empirical) quantile pairs against a fitted Gaussian.

    Plotting positions are ``(i - 0.5) / n`` for the i-th order statistic;
    by default mu and sigma come from ``gaussian_fit``.  A zero sigma
    (constant sample) has no quantiles to pair against and raises
    DegenerateFit.
    """
    values = np.sort(np.asarray(values, dtype=np.float64))
    if values.size < 2:
        raise ValueError("need at least two values for a QQ comparison")
    if mu is None or sigma is None:
        mu, sigma = gaussian_fit(values)
    if sigma == 0.0:
        raise DegenerateFit("fitted sigma is zero; QQ against a point mass "
                            "is undefined")
    n = values.size
    positions = (np.arange(1, n + 1) - 0.5) / n
    return mu + sigma * normal_quantiles(positions), values


def qq_max_deviation(theoretical: np.ndarray, empirical: np.ndarray,
                     central: float = 0.95) -> float:
    """Largest |empirical - theoretical| over the central plotting positions.

    The extreme order statistics of even a perfectly Gaussian sample swing
    by tenths of a sigma from draw to draw (at n = 10,000 the outermost
    points have a standard deviation near 0.28 sigma), so a calibration
    check over the full range would measure tail luck, not fit quality.
    Restricting to the central band (default: plotting positions in
    [0.025, 0.975]) makes the statistic tight enough to bound.
    """
    theoretical = np.asarray(theoretical, dtype=np.float64)
    empirical = np.asarray(empirical, dtype=np.float64)
    if theoretical.shape != empirical.shape or theoretical.ndim != 1:
        raise ValueError("theoretical and empirical must be equal-length 1-D")
    if not 0.0 < central <= 1.0:
        raise ValueError("central must be in (0, 1]")
    n = theoretical.size
    positions = (np.arange(1, n + 1) - 0.5) / n
    lo = (1.0 - central) / 2.0
    keep = (positions >= lo) & (positions <= 1.0 - lo)
    return float(np.abs(empirical[keep] - theoretical[keep]).max())


def excess_kurtosis(values: np.ndarray) -> float:
    """m4 / m2^2 - 3 with biased (1/n) central moments; 0 for a Gaussian."""
    values = np.asarray(values, dtype=np.float64)
    centered = values - values.mean()
    m2 = float((centered ** 2).mean())
    if m2 == 0.0:
        raise ValueError("kurtosis undefined for a constant sample")
    m4 = float((centered ** 4).mean())
    return m4 / (m2 * m2) - 3.0


def tail_ratio_99_90(values: np.ndarray) -> float:
    """(q99 - median) / (q90 - median) with linear-interpolated quantiles.

    Equals about 1.815 for a Gaussian; heavier right tails push it higher.
    """
    values = np.asarray(values, dtype=np.float64)
    q50, q90, q99 = np.quantile(values, [0.5, 0.9, 0.99])
    if q90 == q50:
        raise ValueError("tail ratio undefined: q90 equals the median")
    return float((q99 - q50) / (q90 - q50))


def tail_stats(values: np.ndarray) -> tuple[float, float]:
    """(excess_kurtosis, tail_ratio_99_90) for a sample of at least 100.

    Below 100 values the 99th-percentile estimate rests on the top one or
    two order statistics, so the pair is refused rather than reported.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size < 100:
        raise InsufficientSamples(f"tail statistics need at least 100 "
                                  f"values, got {values.size}")
    return excess_kurtosis(values), tail_ratio_99_90(values)


class NoiseSample:
    """Gradient-error norms plus the statistics reported for them.

    ``fitted_mu``/``fitted_sigma`` are the moment fit of ``values``;
    ``excess_kurtosis`` and ``tail_ratio_99_90`` describe its shape.
    Assigning a new array to ``values`` recomputes all four, so the
    statistics can never go stale.  Degenerate samples (constant values,
    e.g. when the "minibatch" was the whole dataset) keep the fit but
    report NaN for the shape statistics, which are 0/0 there.
    """

    def __init__(self, values: np.ndarray, batch_size: int,
                 at_params: ParamVector | None = None):
        self.batch_size = int(batch_size)
        self.at_params = at_params
        self.values = values

    @property
    def values(self) -> np.ndarray:
        return self._values

    @values.setter
    def values(self, new: np.ndarray) -> None:
        v = np.asarray(new, dtype=np.float64)
        if v.ndim != 1 or v.size < 2:
            raise ValueError("values must be a 1-D array of at least two "
                             "error norms")
        if np.any(v < 0):
            raise ValueError("error norms are nonnegative by construction")
        self._values = v
        self.fitted_mu, self.fitted_sigma = gaussian_fit(v)
        centered = v - v.mean()
        m2 = float((centered ** 2).mean())
        if m2 == 0.0:
            self.excess_kurtosis = math.nan
            self.tail_ratio_99_90 = math.nan
        else:
            self.excess_kurtosis = excess_kurtosis(v)
            q50, q90, q99 = np.quantile(v, [0.5, 0.9, 0.99])
            self.tail_ratio_99_90 = (
                float((q99 - q50) / (q90 - q50)) if q90 != q50 else math.nan)

    def qq(self) -> tuple[np.ndarray, np.ndarray]:
        return qq_points(self._values, self.fitted_mu, self.fitted_sigma)

    def summary(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "n_draws": int(self._values.size),
            "fitted_mu": self.fitted_mu,
            "fitted_sigma": self.fitted_sigma,
            "excess_kurtosis": self.excess_kurtosis,
            "tail_ratio_99_90": self.tail_ratio_99_90,
        }
