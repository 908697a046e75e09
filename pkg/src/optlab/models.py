"""Model definitions: a fully connected classifier and a small causal
character-level transformer language model.

Both models expose the same three entry points:

* ``init_model(spec, seed)`` draws parameters into a ParamVector,
* ``forward_loss(spec, params, inputs, targets, ...)`` builds the scalar
  training loss on the autodiff graph,
* ``evaluate(spec, params, inputs, targets)`` returns loss plus the model's
  headline metric (accuracy for the classifier, perplexity for the LM)
  without building a graph.

Initialization scheme: weight matrices are uniform on
``(-1/sqrt(fan_in), +1/sqrt(fan_in))``, biases start at zero, layer-norm
gains at one, and embedding tables are normal with standard deviation 0.02.
Draws come sequentially from the ``INIT`` stream in parameter order, so the
full parameter vector is a pure function of ``(spec, seed)``.

The transformer is post-norm: each block is
``x = LN(x + dropout(attention(x)))`` then ``x = LN(x + dropout(ffn(x)))``,
with a linear-ReLU-linear feed-forward and learned token embeddings plus
fixed sinusoidal position encodings.  Dropout sites are numbered (0 for the
embedding, then two per block) and masks are drawn from the counter block
``(site, iteration)`` of the dropout stream, independent of call order.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import ShapeMismatch
from .rng import INIT, RngStream
from .tensor import Tensor


@dataclass(frozen=True)
class MlpSpec:
    """Fully connected classifier: input -> hidden layers -> class logits."""

    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class TransformerLmSpec:
    """Causal character-level transformer LM."""

    vocab_size: int
    embed_dim: int = 64
    num_heads: int = 2
    num_layers: int = 2
    ff_dim: int = 64
    seq_len: int = 32
    dropout_p: float = 0.1

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")


ModelSpec = MlpSpec | TransformerLmSpec


class ParamVector:
    """Named parameter tensors with a flat float64 view.

    The ordering is fixed at construction and is the contract between models
    and optimizers: optimizers read ``flat()`` / ``gradient_flat()`` and
    write back with ``load_flat()``.
    """

    def __init__(self, named: list[tuple[str, Tensor]]):
        self._names = [n for n, _ in named]
        self._tensors = [t for _, t in named]
        self._by_name = dict(zip(self._names, self._tensors))
        if len(self._by_name) != len(self._names):
            raise ValueError("duplicate parameter name")
        self._sizes = [t.size for t in self._tensors]
        self.total_dim = int(sum(self._sizes))

    @property
    def names(self) -> list[str]:
        return list(self._names)

    def tensors(self) -> list[Tensor]:
        return list(self._tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._by_name[name]

    def __len__(self) -> int:
        return len(self._tensors)

    def flat(self) -> np.ndarray:
        """Concatenated copy of all parameter values."""
        return np.concatenate([t.data.reshape(-1) for t in self._tensors])

    def gradient_flat(self) -> np.ndarray:
        """Concatenated accumulated gradients (zeros where none)."""
        parts = []
        for t in self._tensors:
            if t.grad is None:
                parts.append(np.zeros(t.size))
            else:
                parts.append(t.grad.reshape(-1))
        return np.concatenate(parts)

    def load_flat(self, vec: np.ndarray) -> None:
        """Scatter a flat vector back into the parameter tensors."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.total_dim,):
            raise ShapeMismatch(
                f"load_flat: expected shape ({self.total_dim},), got {vec.shape}")
        offset = 0
        for t, size in zip(self._tensors, self._sizes):
            t.data = vec[offset:offset + size].reshape(t.shape).copy()
            offset += size

    def zero_grad(self) -> None:
        for t in self._tensors:
            t.grad = None

    def copy(self) -> "ParamVector":
        named = []
        for n, t in zip(self._names, self._tensors):
            c = Tensor(t.data.copy(), requires_grad=t.requires_grad)
            named.append((n, c))
        return ParamVector(named)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def _uniform_fan_in(gen: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(shape[0])
    return gen.uniform(-bound, bound, size=shape)


def init_model(spec: ModelSpec, seed: int) -> ParamVector:
    """Draw a fresh ParamVector for ``spec`` from the init stream of ``seed``."""
    gen = RngStream(seed, INIT).generator()
    named: list[tuple[str, np.ndarray]] = []
    if isinstance(spec, MlpSpec):
        dims = [spec.input_dim, *spec.hidden_dims, spec.num_classes]
        for i in range(len(dims) - 1):
            named.append((f"layers.{i}.weight", _uniform_fan_in(gen, (dims[i], dims[i + 1]))))
            named.append((f"layers.{i}.bias", np.zeros(dims[i + 1])))
    elif isinstance(spec, TransformerLmSpec):
        d, f, v = spec.embed_dim, spec.ff_dim, spec.vocab_size
        named.append(("embed.weight", gen.normal(0.0, 0.02, size=(v, d))))
        for i in range(spec.num_layers):
            p = f"blocks.{i}"
            for proj in ("wq", "wk", "wv", "wo"):
                named.append((f"{p}.attn.{proj}", _uniform_fan_in(gen, (d, d))))
                named.append((f"{p}.attn.{proj[1]}bias", np.zeros(d)))
            named.append((f"{p}.ln1.gain", np.ones(d)))
            named.append((f"{p}.ln1.bias", np.zeros(d)))
            named.append((f"{p}.ff.w1", _uniform_fan_in(gen, (d, f))))
            named.append((f"{p}.ff.b1", np.zeros(f)))
            named.append((f"{p}.ff.w2", _uniform_fan_in(gen, (f, d))))
            named.append((f"{p}.ff.b2", np.zeros(d)))
            named.append((f"{p}.ln2.gain", np.ones(d)))
            named.append((f"{p}.ln2.bias", np.zeros(d)))
        named.append(("head.weight", _uniform_fan_in(gen, (d, v))))
        named.append(("head.bias", np.zeros(v)))
    else:
        raise TypeError(f"unknown spec type {type(spec).__name__}")
    return ParamVector([(n, Tensor(a, requires_grad=True)) for n, a in named])


@lru_cache(maxsize=8)
def _position_encoding(seq_len: int, dim: int) -> np.ndarray:
    pos = np.arange(seq_len)[:, None]
    i = np.arange(0, dim, 2)[None, :]
    angle = pos / np.power(10000.0, i / dim)
    pe = np.zeros((seq_len, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : dim // 2])
    pe.flags.writeable = False
    return pe


@lru_cache(maxsize=8)
def _causal_mask(seq_len: int) -> np.ndarray:
    # additive mask: 0 on and below the diagonal, a large negative above,
    # which zeroes the corresponding attention weights after softmax
    m = np.triu(np.full((seq_len, seq_len), -1e9), k=1)[None, None, :, :]
    m.flags.writeable = False
    return m


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), b)


def _mlp_logits(spec: MlpSpec, params: ParamVector, inputs: np.ndarray) -> Tensor:
    act = T.relu if spec.activation == "relu" else T.tanh
    h = Tensor(inputs)
    n_layers = len(spec.hidden_dims) + 1
    for i in range(n_layers):
        h = _linear(h, params[f"layers.{i}.weight"], params[f"layers.{i}.bias"])
        if i < n_layers - 1:
            h = act(h)
    return h


def _lm_logits(spec: TransformerLmSpec, params: ParamVector, tokens: np.ndarray,
               dropout_p: float, dropout_stream: RngStream | None,
               iteration: int, attn_sink: list | None = None) -> Tensor:
    bsz, slen = tokens.shape
    if slen > spec.seq_len:
        raise ShapeMismatch(f"sequence length {slen} exceeds spec seq_len {spec.seq_len}")
    d, heads = spec.embed_dim, spec.num_heads
    dh = d // heads

    def drop(x: Tensor, site: int) -> Tensor:
        if dropout_p <= 0.0:
            return x
        mask = T.dropout_mask(x.shape, dropout_p, dropout_stream, site, iteration)
        return T.mul(x, mask)

    h = T.add(T.embedding_lookup(params["embed.weight"], tokens),
              Tensor(_position_encoding(slen, d)))
    h = drop(h, 0)
    mask = Tensor(_causal_mask(slen))

    for i in range(spec.num_layers):
        p = f"blocks.{i}"
        flat = T.reshape(h, (bsz * slen, d))

        def split_heads(t: Tensor) -> Tensor:
            return T.transpose(T.reshape(t, (bsz, slen, heads, dh)), (0, 2, 1, 3))

        q = split_heads(_linear(flat, params[f"{p}.attn.wq"], params[f"{p}.attn.qbias"]))
        k = split_heads(_linear(flat, params[f"{p}.attn.wk"], params[f"{p}.attn.kbias"]))
        v = split_heads(_linear(flat, params[f"{p}.attn.wv"], params[f"{p}.attn.vbias"]))

        scores = T.add(T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh)),
                       mask)
        weights = T.softmax(scores)
        if attn_sink is not None:
            attn_sink.append(weights.data)
        ctx = T.matmul(weights, v)
        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (bsz * slen, d))
        attn_out = _linear(merged, params[f"{p}.attn.wo"], params[f"{p}.attn.obias"])
        attn_out = drop(T.reshape(attn_out, (bsz, slen, d)), 1 + 2 * i)

        h = T.layer_norm(T.add(h, attn_out), params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"])

        flat = T.reshape(h, (bsz * slen, d))
        ff = _linear(T.relu(_linear(flat, params[f"{p}.ff.w1"], params[f"{p}.ff.b1"])),
                     params[f"{p}.ff.w2"], params[f"{p}.ff.b2"])
        ff = drop(T.reshape(ff, (bsz, slen, d)), 2 + 2 * i)

        h = T.layer_norm(T.add(h, ff), params[f"{p}.ln2.gain"], params[f"{p}.ln2.bias"])

    flat = T.reshape(h, (bsz * slen, d))
    return _linear(flat, params["head.weight"], params["head.bias"])


def forward_loss(spec: ModelSpec, params: ParamVector, inputs: np.ndarray,
                 targets: np.ndarray, *, mode: str = "eval",
                 dropout_stream: RngStream | None = None, iteration: int = 0,
                 dropout_p: float | None = None,
                 attn_sink: list | None = None) -> Tensor:
    """Mean cross-entropy of the model on a batch, as a graph scalar.

    ``mode`` is "train" or "eval"; dropout applies only in train mode, with
    probability ``dropout_p`` (defaulting to the spec's value for the LM).
    The loss is the mean over all examples (all token positions for the LM),
    so its scale does not depend on batch size.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if isinstance(spec, MlpSpec):
        logits = _mlp_logits(spec, params, np.asarray(inputs, dtype=np.float64))
        return T.mean(T.cross_entropy(logits, targets))
    if isinstance(spec, TransformerLmSpec):
        p = spec.dropout_p if dropout_p is None else dropout_p
        if mode != "train":
            p = 0.0
        if p > 0.0 and dropout_stream is None:
            raise ValueError("train mode with dropout needs a dropout stream")
        tokens = np.asarray(inputs)
        logits = _lm_logits(spec, params, tokens, p, dropout_stream, iteration, attn_sink)
        return T.mean(T.cross_entropy(logits, np.asarray(targets).reshape(-1)))
    raise TypeError(f"unknown spec type {type(spec).__name__}")


def metric_name(spec: ModelSpec) -> str:
    return "accuracy" if isinstance(spec, MlpSpec) else "perplexity"


def evaluate(spec: ModelSpec, params: ParamVector, inputs: np.ndarray,
             targets: np.ndarray) -> tuple[float, float]:
    """Eval-mode (loss, metric) on a batch, without autodiff bookkeeping."""
    with T.no_grad():
        if isinstance(spec, MlpSpec):
            logits = _mlp_logits(spec, params, np.asarray(inputs, dtype=np.float64))
            loss = T.mean(T.cross_entropy(logits, targets)).item()
            acc = float((logits.data.argmax(axis=1) == np.asarray(targets)).mean())
            return loss, acc
        loss = forward_loss(spec, params, inputs, targets, mode="eval").item()
        return loss, float(np.exp(loss))


def count_params(spec: ModelSpec) -> int:
    """Total parameter count without drawing values."""
    return init_model(spec, 0).total_dim
