"""Named, independent random streams.

Each consumer (dataset generation, parameter init, minibatch shuffling,
Monte-Carlo inference, ...) asks for its own generator keyed by
``(seed, label, round)``.  Streams are Philox (counter based), so two
different keys never share state and adding a new consumer does not shift
the draws seen by existing ones.
"""

import zlib

import numpy as np


def _label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def stream(seed: int, label: str, round_: int = 0) -> np.random.Generator:
    """Return the generator for ``(seed, label, round_)``."""
    if seed < 0 or round_ < 0:
        raise ValueError("seed and round must be non-negative")
    ss = np.random.SeedSequence([int(seed), _label_key(label), int(round_)])
    return np.random.Generator(np.random.Philox(ss))


class Streams:
    """Convenience factory bound to a single run seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def __call__(self, label: str, round_: int = 0) -> np.random.Generator:
        return stream(self.seed, label, round_)
