"""Deterministic random-stream derivation.

Every random decision in the system draws from a numpy ``Generator`` backed
by the counter-based Philox bit generator.  Streams are identified by a label
tuple (strings and integers); the 128-bit Philox key is the truncated SHA-256
of the canonical encoding of that tuple.  This makes every stream a pure
function of the experiment seed plus a stable label, independent of execution
mode, process layout, or platform.

Bit-exact definition of the key:
    key = little-endian int of sha256(b"pathforge.rng\\0" + enc(label_0) +
          enc(label_1) + ...).digest()[:16]
where enc(s: str) = utf-8 bytes + NUL and enc(i: int) = decimal ascii + NUL.
"""

from __future__ import annotations

import hashlib

import numpy as np

_DOMAIN = b"pathforge.rng\0"


def stream_key(*labels: str | int) -> int:
    """Derive a 128-bit Philox key from a label tuple."""
    h = hashlib.sha256(_DOMAIN)
    for part in labels:
        if isinstance(part, bool) or not isinstance(part, (str, int)):
            raise TypeError(f"rng labels must be str or int, got {part!r}")
        h.update(str(part).encode("utf-8"))
        h.update(b"\0")
    return int.from_bytes(h.digest()[:16], "little")


def stream(*labels: str | int) -> np.random.Generator:
    """Open the deterministic random stream named by ``labels``."""
    return np.random.Generator(np.random.Philox(key=stream_key(*labels)))
