"""Deterministic, order-independent random substreams.

Every stochastic quantity in the package draws from a generator keyed
purely by identifying integers/tags (seed, purpose, instance id, ...).
Creation order therefore never matters, generation is embarrassingly
parallel per sample, and reruns are bit-identical.
"""

import numpy as np

_MASK64 = (1 << 64) - 1


def _to_entropy(key):
    if isinstance(key, str):
        return int.from_bytes(key.encode("utf-8"), "big")
    return int(key) & _MASK64


def substream(*keys):
    """Fresh Generator seeded only by the key tuple."""
    return np.random.default_rng(np.random.SeedSequence([_to_entropy(k) for k in keys]))


def derive_seed(*keys):
    """Collapse a key tuple into one 63-bit integer seed."""
    ss = np.random.SeedSequence([_to_entropy(k) for k in keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)
