"""Deterministic seed derivation shared by every pipeline stage.

One run seed is configured globally; every stochastic site derives its own
stream by hashing the run seed together with a stable site identifier.
Python's builtin ``hash`` is salted per process, so all derivation goes
through BLAKE2 on canonical UTF-8 encodings.
"""

from __future__ import annotations

import hashlib

_SEP = b"\x1f"


def _encode(parts: tuple[object, ...]) -> bytes:
    if not parts:
        raise ValueError("at least one part is required to derive a seed")
    return _SEP.join(str(p).encode("utf-8") for p in parts)


def stable_hash(*parts: object) -> int:
    """Stable unsigned 64-bit hash of the given parts."""
    digest = hashlib.blake2b(_encode(parts), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stable_hash32(*parts: object) -> int:
    """Stable unsigned 32-bit hash of the given parts."""
    digest = hashlib.blake2b(_encode(parts), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def derive_seed(*parts: object) -> int:
    """Derive an RNG seed from a run seed plus site identifiers.

    Suitable for ``numpy.random.default_rng``; the stream is fully
    determined by the part values, independent of call order elsewhere.
    """
    return stable_hash(*parts)
