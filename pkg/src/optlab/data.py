"""Datasets and batching.

Three data sources feed the experiments:

* IDX files (the classic big-endian image/label container) for real
  classification data,
* a byte-level corpus tokenizer for the character LM,
* synthetic generators: Gaussian-blob classification and a pseudo-English
  word-walk corpus, both pure functions of their seed.  The bundled
  ``data_files/corpus.txt`` was written by ``make_toy_corpus`` and is
  self-authored, so it carries no license baggage.

Batching contract: for batch size ``b`` the canonical example order is
truncated to ``kept = n - n % b`` *before* any shuffling (the tail is
dropped), every epoch is a fresh permutation of the kept examples drawn
from the data-order stream at counter block ``epoch``, and batches are
consecutive slices of that permutation.  Full-batch plans must not drop
more than 0.5% of the data; smaller batch sizes may drop their remainder
silently.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IdxFormatError, TrimTooLarge
from .rng import DATA_ORDER, RngStream

# private stream ids for dataset synthesis (init/data-order/dropout are 1-3)
_SYNTH_STREAM = 101
_CORPUS_STREAM = 102

_IDX_MAGIC_BY_NDIM = {1: 0x00000801, 3: 0x00000803}


@dataclass
class Dataset:
    """Examples in canonical order: model inputs plus integer targets."""

    inputs: np.ndarray
    targets: np.ndarray
    vocab_size: int | None = None
    vocab: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs and targets must have equal length")

    @property
    def n(self) -> int:
        return len(self.inputs)

    def take(self, count: int) -> "Dataset":
        """First ``count`` examples of the canonical order."""
        return Dataset(self.inputs[:count], self.targets[:count],
                       self.vocab_size, self.vocab, self.name)


@dataclass(frozen=True)
class BatchPlan:
    """How one batch size walks a dataset."""

    batch_size: int
    kept: int
    dropped: int
    micro_batch: int
    iterations_per_epoch: int


# ---------------------------------------------------------------------------
# IDX container
# ---------------------------------------------------------------------------

def load_idx(path: str | Path) -> np.ndarray:
    """Parse an IDX file of unsigned bytes (magic 0x801 or 0x803)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: too short for a magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in _IDX_MAGIC_BY_NDIM.values():
        raise IdxFormatError(f"{path}: unsupported magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) != header + count:
        raise IdxFormatError(
            f"{path}: payload is {len(raw) - header} bytes, header promises {count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims).copy()


def write_idx(path: str | Path, array: np.ndarray) -> None:
    """Write unsigned bytes in IDX format; inverse of load_idx."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = _IDX_MAGIC_BY_NDIM.get(array.ndim)
    if magic is None:
        raise IdxFormatError(f"IDX here covers 1-D and 3-D arrays, not {array.ndim}-D")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def idx_to_classification(images: np.ndarray, labels: np.ndarray,
                          name: str = "") -> Dataset:
    """Flatten ubyte images to unit-scaled float rows with integer labels."""
    if len(images) != len(labels):
        raise IdxFormatError("image and label counts differ")
    flat = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(flat, labels.astype(np.int64), name=name)


# ---------------------------------------------------------------------------
# corpus handling
# ---------------------------------------------------------------------------

def tokenize_corpus(data: bytes, seq_len: int, name: str = "") -> Dataset:
    """Byte-level tokenization into non-overlapping next-token windows.

    The vocabulary is the sorted set of distinct byte values; ids are ranks
    in that ordering.  Window ``i`` covers tokens ``[i*L, i*L + L)`` with
    targets shifted one position, so ``floor((len - 1) / L)`` windows fit.
    """
    if seq_len < 1:
        raise ValueError("seq_len must be positive")
    if len(data) < seq_len + 1:
        raise ValueError(f"corpus of {len(data)} bytes is shorter than one window")
    arr = np.frombuffer(data, dtype=np.uint8)
    vocab = np.unique(arr)
    lookup = np.zeros(256, dtype=np.int64)
    lookup[vocab] = np.arange(len(vocab))
    tokens = lookup[arr]
    n = (len(tokens) - 1) // seq_len
    inputs = tokens[: n * seq_len].reshape(n, seq_len)
    targets = tokens[1: n * seq_len + 1].reshape(n, seq_len)
    return Dataset(inputs, targets, vocab_size=len(vocab), vocab=vocab, name=name)


_WORDS = (
    "the of and to a in that it was he for on are as with his they at be this "
    "have from or one had by word but not what all were we when your can said "
    "there use an each which she do how their if will up other about out many "
    "then them these so some her would make like him into time has look two "
    "more write go see number no way could people my than first water been "
    "call who oil its now find long down day did get come made may part over "
    "new sound take only little work know place year live me back give most "
    "very after thing our just name good sentence man think say great where "
    "help through much before line right too mean old any same tell boy "
    "follow came want show also around form three small set put end does "
    "another well large must big even such because turn here why ask went "
    "men read need land different home us move try kind hand picture again "
    "change off play spell air away animal house point page letter mother "
    "answer found study still learn should world"
).split()


def make_toy_corpus(size_bytes: int, seed: int) -> bytes:
    """Deterministic pseudo-English text.

    A fixed successor table (three candidate next-words per word, drawn once
    from the seed) turns word sampling into a walk with real bigram
    structure, which a character LM can learn; sentences get length, commas
    and line breaks from the same stream.  Output is lowercase ASCII plus
    ``. , \\n``, roughly 30 distinct bytes.
    """
    gen = RngStream(seed, _CORPUS_STREAM).generator()
    n_words = len(_WORDS)
    successors = gen.integers(0, n_words, size=(n_words, 3))
    out: list[str] = []
    total = 0
    line_len = 0
    word_i = int(gen.integers(0, n_words))
    while total < size_bytes:
        sentence_len = int(gen.integers(4, 13))
        parts = []
        for k in range(sentence_len):
            word_i = int(successors[word_i][gen.integers(0, 3)])
            parts.append(_WORDS[word_i])
            if k == sentence_len - 2 and gen.random() < 0.15:
                parts[-1] += ","
        sentence = " ".join(parts) + "."
        sep = "\n" if line_len > 60 else " "
        line_len = 0 if sep == "\n" else line_len + len(sentence) + 1
        chunk = sentence + sep
        out.append(chunk)
        total += len(chunk)
    return "".join(out).encode("ascii")[:size_bytes]


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def trim_for_even_division(n: int, batch_size: int,
                           max_fraction: float | None = None) -> int:
    """Largest multiple of ``batch_size`` not exceeding ``n``.

    With ``max_fraction`` set (Full-batch plans use 0.005), exceeding it
    raises TrimTooLarge instead of silently dropping data.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    if batch_size > n:
        raise TrimTooLarge(f"batch size {batch_size} exceeds dataset size {n}")
    kept = n - n % batch_size
    if max_fraction is not None and (n - kept) / n > max_fraction:
        raise TrimTooLarge(
            f"dividing {n} by {batch_size} drops {n - kept} examples"
            f" ({(n - kept) / n:.2%} > {max_fraction:.2%})")
    return kept


def build_batch_plan(n: int, batch_size: int, micro_batch: int | None = None,
                     max_trim_fraction: float | None = None) -> BatchPlan:
    kept = trim_for_even_division(n, batch_size, max_trim_fraction)
    micro = batch_size if micro_batch is None else min(micro_batch, batch_size)
    if micro < 1:
        raise ValueError("micro_batch must be positive")
    return BatchPlan(batch_size=batch_size, kept=kept, dropped=n - kept,
                     micro_batch=micro, iterations_per_epoch=kept // batch_size)


def make_batches(kept: int, batch_size: int, seed: int, epoch: int) -> np.ndarray:
    """Index batches for one epoch, shaped (iterations, batch_size).

    The permutation comes from the data-order stream at counter block
    ``epoch``, so epoch k of a seed shuffles identically no matter what ran
    before it.
    """
    if kept % batch_size != 0:
        raise ValueError(f"kept={kept} is not a multiple of batch_size={batch_size}")
    perm = RngStream(seed, DATA_ORDER).permutation(kept, a=epoch)
    return perm.reshape(kept // batch_size, batch_size)


def split_holdout(ds: Dataset, fraction: float) -> tuple[Dataset, Dataset]:
    """Split off the canonical-order tail as a held-out set."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("holdout fraction must be in [0, 1)")
    n_hold = int(round(ds.n * fraction))
    n_train = ds.n - n_hold
    if n_train < 1:
        raise ValueError("holdout fraction leaves no training data")
    train = ds.take(n_train)
    hold = Dataset(ds.inputs[n_train:], ds.targets[n_train:],
                   ds.vocab_size, ds.vocab, ds.name)
    return train, hold


# ---------------------------------------------------------------------------
# synthetic classification
# ---------------------------------------------------------------------------

def synth_classification(n: int, input_dim: int = 8, num_classes: int = 4,
                         seed: int = 0, noise: float = 0.7) -> Dataset:
    """Gaussian blobs around class means on a sphere of radius 3."""
    gen = RngStream(seed, _SYNTH_STREAM).generator()
    means = gen.standard_normal((num_classes, input_dim))
    means *= 3.0 / np.linalg.norm(means, axis=1, keepdims=True)
    labels = gen.integers(0, num_classes, size=n)
    x = means[labels] + noise * gen.standard_normal((n, input_dim))
    return Dataset(x, labels.astype(np.int64), name="synth")


# ---------------------------------------------------------------------------
# packaged corpus
# ---------------------------------------------------------------------------

def load_packaged_corpus(limit_bytes: int | None = None) -> bytes:
    """The 200 KiB toy character corpus shipped with the package.

    ``limit_bytes`` truncates to a prefix, which is how small-machine
    experiment configs shrink the problem without changing its character
    statistics.
    """
    from importlib import resources

    raw = (resources.files("optlab") / "data_files" / "corpus.txt").read_bytes()
    if limit_bytes is not None:
        if limit_bytes < 2:
            raise ValueError("corpus prefix must be at least 2 bytes")
        if limit_bytes > len(raw):
            raise ValueError(f"corpus has only {len(raw)} bytes, "
                             f"{limit_bytes} requested")
        raw = raw[:limit_bytes]
    return raw
