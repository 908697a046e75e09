"""Reverse-mode automatic differentiation on float64 numpy arrays.

The graph is built eagerly: every op computes its numpy result immediately
and returns a Tensor that remembers its op kind, its parents and a closure
that maps the output gradient to parent gradients.  Evaluating a node is
therefore just reading ``.data``; a forward pass is memoized by construction.

Gradients accumulate: ``backward()`` adds into ``.grad`` of every leaf that
``requires_grad``, so calling it for several micro-batch losses sums their
contributions.  Passing ``free=True`` releases the graph buffers afterwards;
a second ``backward()`` through a freed graph raises GraphConsumed.

Only float64 is supported.  Integer index arrays (class labels, token ids)
are passed as plain numpy arrays, not Tensors.

Finite checks: cross_entropy always validates its output because a NaN loss
is the canonical divergence signal and the check is cheap.  Full per-op
validation costs ~15% of a training step, so it is opt-in via the
``strict_finite()`` context manager (used by tests and grad_check); training
code instead checks loss, gradient and parameters once per iteration.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import GraphConsumed, NonFinite, ShapeMismatch
from .rng import RngStream


class _Mode(threading.local):
    """Per-thread autodiff switches.

    Thread-local so one worker evaluating under no_grad cannot silence
    gradient recording in another worker mid training step.  Class
    attributes provide each new thread's defaults.
    """

    grad_enabled = True
    strict_finite = False


_MODE = _Mode()


@contextmanager
def no_grad() -> Iterator[None]:
    """Build no backward closures inside this block (forward only)."""
    prev = _MODE.grad_enabled
    _MODE.grad_enabled = False
    try:
        yield
    finally:
        _MODE.grad_enabled = prev


@contextmanager
def strict_finite(enabled: bool = True) -> Iterator[None]:
    """Validate every op output for NaN/Inf inside this block."""
    prev = _MODE.strict_finite
    _MODE.strict_finite = enabled
    try:
        yield
    finally:
        _MODE.strict_finite = prev


def _as_f64(data) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.float64)
    return arr


def _check_finite(arr: np.ndarray, op: str, always: bool = False) -> None:
    if (always or _MODE.strict_finite) and not np.isfinite(arr).all():
        raise NonFinite(f"op '{op}' produced a non-finite value")


class Tensor:
    """A float64 array plus its position in the autodiff graph.

    ``op`` is "leaf" for user-created tensors and the op kind otherwise.
    ``grad`` is populated (and accumulated) on requires_grad leaves by
    ``backward``; intermediate gradients live only for the duration of the
    backward pass.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_freed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._freed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # Small amount of operator sugar for tests; the op functions are the API.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def backward(self, free: bool = False) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad leaf.

        ``self`` must hold a single value (any shape of size 1).  With
        ``free=True`` the graph buffers are released afterwards and further
        backward calls through them raise GraphConsumed.
        """
        if self.size != 1:
            raise ShapeMismatch(f"backward needs a scalar, got shape {self.shape}")
        if self._freed:
            raise GraphConsumed("backward() through a graph that was already freed")

        order = _topo_order(self)
        for node in order:
            if node._freed:
                raise GraphConsumed("backward() through a graph that was already freed")

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None or node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None and parent.op == "leaf":
                    if parent.grad is None:
                        parent.grad = np.zeros_like(parent.data)
                    parent.grad += pg
                else:
                    acc = grads.get(id(parent))
                    if acc is None:
                        # May alias a closure buffer or a sibling's gradient,
                        # so later contributions allocate instead of mutating.
                        grads[id(parent)] = pg
                    else:
                        grads[id(parent)] = acc + pg
        if free:
            for node in order:
                if node._backward is not None:
                    node._backward = None
                    node._parents = ()
                    node._freed = True


def _topo_order(root: Tensor) -> list[Tensor]:
    """Reverse topological order (root first), iterative to spare the stack."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], tuple] | None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._freed = False
    needs = _MODE.grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    _check_finite(data, op)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}") from exc

    def backward(g: np.ndarray):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _make(data, "add", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}") from exc
    a_data, b_data = a.data, b.data

    def backward(g: np.ndarray):
        return (_unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape))

    return _make(data, "mul", (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar."""
    c = float(c)
    data = a.data * c

    def backward(g: np.ndarray):
        return (g * c,)

    return _make(data, "scale", (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports 2D x 2D, batched x batched with identical batch dims, and
    batched x 2D (shared weight matrix applied to every batch row).
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatch(f"matmul needs >=2D operands, got {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatch(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if b.data.ndim > 2 and a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeMismatch(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    data = a.data @ b.data
    a_data, b_data = a.data, b.data

    def backward(g: np.ndarray):
        if b_data.ndim == 2:
            ga = g @ b_data.T
            gb = a_data.reshape(-1, a_data.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = g @ np.swapaxes(b_data, -1, -2)
            gb = np.swapaxes(a_data, -1, -2) @ g
        return (ga, gb)

    return _make(data, "matmul", (a, b), backward)


def relu(a: Tensor) -> Tensor:
    """max(x, 0); the subgradient at 0 is 0."""
    data = np.maximum(a.data, 0.0)
    mask = a.data > 0.0

    def backward(g: np.ndarray):
        return (g * mask,)

    return _make(data, "relu", (a,), backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g: np.ndarray):
        return (g * (1.0 - data * data),)

    return _make(data, "tanh", (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return ((g - dot) * data,)

    return _make(data, "softmax", (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    The variance floor ``eps`` sits inside the square root:
    ``(x - mean) / sqrt(var + eps) * gain + bias``.
    """
    d = x.data.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(
            f"layer_norm: gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data
    gain_data = gain.data

    def backward(g: np.ndarray):
        dxhat = g * gain_data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=axes)
        dbias = g.sum(axis=axes)
        return (dx, dgain, dbias)

    return _make(data, "layer_norm", (x, gain, bias), backward)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` (V, D) by an integer id array."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeMismatch("embedding_lookup: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeMismatch(
            f"embedding_lookup: id out of range for table with {table.shape[0]} rows")
    data = table.data[ids]

    def backward(g: np.ndarray):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (gt,)

    return _make(data, "embedding_lookup", (table,), backward)


def dropout_mask(shape: tuple[int, ...], p: float, stream: RngStream,
                 site: int, iteration: int) -> Tensor:
    """Inverted-dropout mask: entries are 0 or 1/(1-p).

    The mask is a constant tensor drawn from counter block (site, iteration)
    of ``stream``, so it depends only on (seed, site, iteration); backward
    through the ``mul`` that applies it reuses the recorded values.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout p must be in [0, 1), got {p}")
    gen = stream.generator(a=site, b=iteration)
    keep = gen.random(shape) >= p
    data = keep.astype(np.float64) / (1.0 - p)
    out = Tensor(data)
    out.op = "dropout_mask"
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row cross entropy of (N, V) logits against integer targets (N,).

    Fused log-sum-exp keeps it stable; the output is always checked for
    finiteness because a NaN here is the divergence signal training watches.
    """
    if logits.data.ndim != 2:
        raise ShapeMismatch(f"cross_entropy expects (N, V) logits, got {logits.shape}")
    targets = np.asarray(targets)
    if targets.shape != (logits.shape[0],):
        raise ShapeMismatch(
            f"cross_entropy: targets shape {targets.shape} does not match N={logits.shape[0]}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ShapeMismatch("cross_entropy: target id out of range")
    n = logits.shape[0]
    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    z = e.sum(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(z[:, 0])
    rows = np.arange(n)
    data = lse - logits.data[rows, targets]
    probs = e / z

    def backward(g: np.ndarray):
        gl = probs * g[:, None]
        gl[rows, targets] -= g
        return (gl,)

    out = _make(data, "cross_entropy", (logits,), backward)
    _check_finite(out.data, "cross_entropy", always=True)
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"reshape: {a.shape} -> {shape}") from exc
    src_shape = a.data.shape

    def backward(g: np.ndarray):
        return (g.reshape(src_shape),)

    return _make(data, "reshape", (a,), backward)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeMismatch(f"transpose: axes {axes} invalid for ndim {a.data.ndim}")
    data = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g: np.ndarray):
        return (np.ascontiguousarray(np.transpose(g, inverse)),)

    return _make(data, "transpose", (a,), backward)


def mean(a: Tensor) -> Tensor:
    """Mean over every element, as a scalar tensor."""
    data = np.asarray(a.data.mean())
    n = a.data.size
    shape = a.data.shape

    def backward(g: np.ndarray):
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make(data, "mean", (a,), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    """Worst-case comparison of analytic and central-difference gradients."""

    max_rel_err: float
    worst_leaf: int
    worst_index: int
    analytic: float
    numeric: float

    def __str__(self) -> str:  # pragma: no cover
        return (f"max rel err {self.max_rel_err:.3e} at leaf {self.worst_leaf}"
                f"[{self.worst_index}]: analytic {self.analytic:.6e},"
                f" numeric {self.numeric:.6e}")


def grad_check(build: Callable[[], Tensor], leaves: Sequence[Tensor],
               h_scale: float = 1e-5,
               indices: Sequence[np.ndarray] | None = None) -> GradCheckResult:
    """Compare backward() against central finite differences.

    ``build`` constructs a scalar loss from the current values of ``leaves``
    (it is called many times, so it must be deterministic).  Each probed
    element x_i is displaced by ``h = h_scale * max(1, |x_i|)``.  The
    relative error uses ``max(|analytic|, |numeric|, 1e-3)`` as denominator
    so that near-zero gradients are compared absolutely.

    ``indices`` optionally restricts the probe to a flat-index subset per
    leaf; by default every element is probed.
    """
    for leaf in leaves:
        leaf.zero_grad()
    with strict_finite():
        loss = build()
    loss.backward(free=True)
    analytic = [np.zeros_like(l.data) if l.grad is None else l.grad.copy() for l in leaves]

    result = GradCheckResult(0.0, -1, -1, 0.0, 0.0)
    with no_grad():
        for li, leaf in enumerate(leaves):
            flat = leaf.data.reshape(-1)
            a_flat = analytic[li].reshape(-1)
            probe = range(flat.size) if indices is None else indices[li]
            for i in probe:
                orig = flat[i]
                h = h_scale * max(1.0, abs(orig))
                flat[i] = orig + h
                lo_hi = build().item()
                flat[i] = orig - h
                lo_lo = build().item()
                flat[i] = orig
                fd = (lo_hi - lo_lo) / (2.0 * h)
                a = a_flat[i]
                rel = abs(a - fd) / max(abs(a), abs(fd), 1e-3)
                if rel > result.max_rel_err:
                    result = GradCheckResult(rel, li, int(i), float(a), float(fd))
    return result
