"""Update rules under comparison: gradient descent and its two
direction-transformed variants (normalized GD, sign descent), each with
optional heavy-ball momentum, plus RMSprop and Adam.

The GD family shares one skeleton: transform the stochastic gradient into a
direction ``d``, fold it into the momentum buffer, and step along the buffer:

    m_t = beta * m_{t-1} + d_t
    x_t = x_{t-1} - alpha * m_t

with ``d_t`` the raw gradient, the globally L2-normalized gradient, or the
elementwise sign.  Momentum therefore accumulates the *transformed*
direction, not the raw gradient.

Adam keeps exponential moving averages of the gradient and its square, with
optional bias correction and the epsilon added inside the square root:

    m_t = beta1 * m_{t-1} + (1 - beta1) * g
    M_t = beta2 * M_{t-1} + (1 - beta2) * g^2
    x_t = x_{t-1} - alpha * mhat / sqrt(Mhat + eps)

RMSprop divides by the running RMS with epsilon added *outside* the root:

    v_t = beta2 * v_{t-1} + (1 - beta2) * g^2
    x_t = x_{t-1} - alpha * g / (sqrt(v_t) + eps)

With beta1=0, beta2=0, eps=0 and bias correction off, Adam collapses to
``g / sqrt(g^2)`` = sign descent, as does RMSprop with beta2=0, eps=0; the
degenerate 0/0 coordinates update by zero, matching sign(0) = 0.

Optimizers operate on the flat parameter view; ``step`` pulls the vector,
applies one update and writes it back.
"""

from __future__ import annotations

import numpy as np

from .errors import ZeroGradient
from .models import ParamVector

GD_KINDS = ("gd", "normalized_gd", "sign_descent")

OPTIMIZER_IDS = (
    "sgd+m", "sgd-m",
    "norm-gd+m", "norm-gd-m",
    "sign+m", "sign-m",
    "rmsprop",
    "adam+m", "adam-m",
)


def transform_direction(kind: str, grad: np.ndarray) -> np.ndarray:
    """Map a gradient to the descent direction of a GD variant.

    ``normalized_gd`` divides by the single global L2 norm and raises
    ZeroGradient when the norm is exactly zero; ``sign_descent`` maps each
    coordinate to -1, 0 or +1.
    """
    if kind == "gd":
        return grad
    if kind == "normalized_gd":
        norm = float(np.linalg.norm(grad))
        if norm == 0.0:
            raise ZeroGradient("cannot normalize a zero gradient")
        return grad / norm
    if kind == "sign_descent":
        return np.sign(grad)
    raise ValueError(f"unknown GD variant kind {kind!r}")


class GdVariant:
    """Gradient descent / normalized GD / sign descent with heavy-ball
    momentum on the transformed direction.

    A ZeroGradient from the direction transform does not abort the run: the
    step is skipped-but-counted, meaning the momentum buffer still decays by
    beta and the parameters still move along it.
    """

    def __init__(self, kind: str, momentum: float = 0.0):
        if kind not in GD_KINDS:
            raise ValueError(f"unknown GD variant kind {kind!r}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        self.kind = kind
        self.momentum = momentum
        self.m: np.ndarray | None = None
        self.t = 0
        self.skipped = 0

    def update(self, x: np.ndarray, grad: np.ndarray, alpha: float) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(x)
        try:
            d = transform_direction(self.kind, grad)
            self.m = self.momentum * self.m + d
        except ZeroGradient:
            self.skipped += 1
            self.m = self.momentum * self.m
        self.t += 1
        return x - alpha * self.m

    def step(self, params: ParamVector, grad: np.ndarray, alpha: float) -> None:
        params.load_flat(self.update(params.flat(), grad, alpha))


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 bias_correction: bool = True, epsilon_inside_sqrt: bool = True):
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ValueError("betas must be in [0, 1)")
        if eps < 0.0:
            raise ValueError("epsilon must be non-negative")
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.bias_correction = bias_correction
        self.epsilon_inside_sqrt = epsilon_inside_sqrt
        self.m: np.ndarray | None = None
        self.M: np.ndarray | None = None
        self.t = 0

    def update(self, x: np.ndarray, grad: np.ndarray, alpha: float) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(x)
            self.M = np.zeros_like(x)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.M = self.beta2 * self.M + (1.0 - self.beta2) * grad * grad
        if self.bias_correction:
            mhat = self.m / (1.0 - self.beta1 ** self.t)
            vhat = self.M / (1.0 - self.beta2 ** self.t)
        else:
            mhat, vhat = self.m, self.M
        if self.epsilon_inside_sqrt:
            den = np.sqrt(vhat + self.eps)
        else:
            den = np.sqrt(vhat) + self.eps
        # with eps = 0 a zero denominator implies a zero numerator (the
        # gradient history there is all zeros); step that coordinate by 0
        out = np.divide(mhat, den, out=np.zeros_like(x), where=den > 0.0)
        return x - alpha * out

    def step(self, params: ParamVector, grad: np.ndarray, alpha: float) -> None:
        params.load_flat(self.update(params.flat(), grad, alpha))


class Rmsprop:
    def __init__(self, beta2: float = 0.999, eps: float = 1e-8):
        if not 0.0 <= beta2 < 1.0:
            raise ValueError("beta2 must be in [0, 1)")
        if eps < 0.0:
            raise ValueError("epsilon must be non-negative")
        self.beta2 = beta2
        self.eps = eps
        self.v: np.ndarray | None = None
        self.t = 0

    def update(self, x: np.ndarray, grad: np.ndarray, alpha: float) -> np.ndarray:
        if self.v is None:
            self.v = np.zeros_like(x)
        self.t += 1
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        den = np.sqrt(self.v) + self.eps
        out = np.divide(grad, den, out=np.zeros_like(x), where=den > 0.0)
        return x - alpha * out

    def step(self, params: ParamVector, grad: np.ndarray, alpha: float) -> None:
        params.load_flat(self.update(params.flat(), grad, alpha))


Optimizer = GdVariant | Adam | Rmsprop

_GD_ID_KINDS = {"sgd": "gd", "norm-gd": "normalized_gd", "sign": "sign_descent"}


def make_optimizer(optimizer_id: str, overrides: dict | None = None) -> Optimizer:
    """Build the optimizer named by one of OPTIMIZER_IDS.

    The ``+m`` suffix selects momentum 0.9 (beta1 0.9 for Adam), ``-m``
    selects 0.  ``overrides`` may replace individual hyperparameters:
    ``momentum`` for the GD family; ``beta1``, ``beta2``, ``epsilon``,
    ``bias_correction``, ``epsilon_inside_sqrt`` for Adam; ``beta2`` and
    ``epsilon`` for RMSprop.
    """
    overrides = dict(overrides or {})
    if optimizer_id not in OPTIMIZER_IDS:
        raise ValueError(f"unknown optimizer id {optimizer_id!r}")

    def take(key, default):
        return overrides.pop(key, default)

    if optimizer_id == "rmsprop":
        opt = Rmsprop(beta2=take("beta2", 0.999), eps=take("epsilon", 1e-8))
    elif optimizer_id.startswith("adam"):
        with_m = optimizer_id.endswith("+m")
        opt = Adam(beta1=take("beta1", 0.9 if with_m else 0.0),
                   beta2=take("beta2", 0.999),
                   eps=take("epsilon", 1e-8),
                   bias_correction=bool(take("bias_correction", True)),
                   epsilon_inside_sqrt=bool(take("epsilon_inside_sqrt", True)))
    else:
        base = optimizer_id[:-2]
        with_m = optimizer_id.endswith("+m")
        opt = GdVariant(kind=_GD_ID_KINDS[base],
                        momentum=take("momentum", 0.9 if with_m else 0.0))
    if overrides:
        bad = ", ".join(sorted(overrides))
        raise ValueError(f"hyperparameters not accepted by {optimizer_id!r}: {bad}")
    return opt
