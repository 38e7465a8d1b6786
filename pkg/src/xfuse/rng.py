"""Named, seedable, counter-based random streams.

A stream is a Philox generator keyed by a hash of the run seed and a tuple
of names, e.g. ``stream(seed, "init", "stage0.block1.attn.w_q")``. Streams
for different names are independent, so results never depend on the order
in which they are created.
"""

import hashlib

import numpy as np


def stream_key(seed: int, *names) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(seed)).encode())
    for name in names:
        h.update(b"\x1f")
        h.update(str(name).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def stream(seed: int, *names) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *names)))
