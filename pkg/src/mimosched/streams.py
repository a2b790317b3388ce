"""Keyed random streams.

Every stochastic operation in the simulator draws from a generator obtained
through :func:`stream`, keyed by the master seed plus key parts: integers
(slot, user, trial, ...) or short string tags naming the stream's purpose.
Strings enter the key through their UTF-8 bytes, so the mapping is stable
across processes and platforms.  Streams with the same key are
bit-identical, so independent pieces of a run can be generated concurrently
and still match a sequential execution.
"""

import numpy as np

__all__ = ["stream", "derive_seed"]


def _as_entropy(seed, key):
    parts = [int(seed)]
    for k in key:
        if isinstance(k, str):
            k = int.from_bytes(k.encode("utf-8"), "big")
        else:
            k = int(k)
        if k < 0:
            # SeedSequence entropy must be non-negative; fold sign into an offset
            k = 2 * abs(k) + 1
        parts.append(k)
    if parts[0] < 0:
        raise ValueError("seed must be non-negative")
    return parts


def stream(seed, *key) -> np.random.Generator:
    """Return a Generator keyed by ``(seed, *key)``.

    Same arguments always give an identical stream, independent of call
    order or process.
    """
    return np.random.default_rng(np.random.SeedSequence(_as_entropy(seed, key)))


def derive_seed(seed, *key) -> int:
    """Collapse ``(seed, *key)`` into a single 63-bit child seed."""
    ss = np.random.SeedSequence(_as_entropy(seed, key))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))
