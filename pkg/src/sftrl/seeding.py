"""Sub-seed derivation.

Every stage, rollout and evaluation seed is derived from one experiment seed
by hashing the seed together with a path of labels:

    derive_seed(seed, *labels) = first 8 bytes (little-endian) of
        blake2b("seed|label1|label2|...") masked to 63 bits

The mapping is stable across processes and platforms.
"""
from __future__ import annotations

import hashlib

_MASK = (1 << 63) - 1


def derive_seed(seed: int, *labels) -> int:
    key = "|".join([str(int(seed))] + [str(x) for x in labels]).encode()
    digest = hashlib.blake2b(key, digest_size=8).digest()
    return int.from_bytes(digest, "little") & _MASK
