"""Counter-based random number streams.

All randomness in the package flows through RngStream, a thin wrapper around
numpy's Philox engine.  A stream is keyed by ``(seed, stream_id)`` and every
``generator(a, b)`` call starts a fresh engine at counter block ``(a, b)``,
so a drawn value depends only on the tuple ``(seed, stream, a, b, position)``
and never on how many draws happened elsewhere.  That is what makes runs
bitwise reproducible regardless of scheduling: the dropout mask for
iteration 17 at site 2 is the same whether or not iteration 16 was logged,
profiled, or recomputed.

Stream ids used by the package:

* ``INIT`` - parameter initialization, consumed sequentially in parameter
  order (block (0, 0)).
* ``DATA_ORDER`` - shuffles and subsampling; block ``a`` is the epoch or
  draw index.
* ``DROPOUT`` - dropout masks; block ``(a=site, b=iteration)``.
* ``NOISE`` - minibatch subsampling for gradient-noise measurement; block
  ``a`` is the draw index.

The low 64-bit counter word is left to the engine, which gives each block
2^64 draws of headroom; blocks can never collide.
"""

from __future__ import annotations

import numpy as np

INIT = 1
DATA_ORDER = 2
DROPOUT = 3
NOISE = 4


class RngStream:
    """One named random stream of a seeded experiment."""

    def __init__(self, seed: int, stream: int):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.stream = int(stream)

    def generator(self, a: int = 0, b: int = 0) -> np.random.Generator:
        """Return a generator positioned at counter block ``(a, b)``."""
        bitgen = np.random.Philox(
            key=np.array([self.seed, self.stream], dtype=np.uint64),
            counter=np.array([0, a, b, 0], dtype=np.uint64),
        )
        return np.random.Generator(bitgen)

    def permutation(self, n: int, a: int = 0, b: int = 0) -> np.ndarray:
        """Deterministic permutation of ``range(n)`` at block ``(a, b)``."""
        return self.generator(a, b).permutation(n)

    def __repr__(self) -> str:  # pragma: no cover
        return f"RngStream(seed={self.seed}, stream={self.stream})"
