"""Randomness sources shared by the agents.

Production code draws from the operating system. Simulations pass a
``DeterministicRandom`` so that a whole scenario (keys, nonces, proof
commitments) replays bit-for-bit from one master seed.
"""

from __future__ import annotations

import hashlib
import os
import secrets
from typing import Protocol, Union

SeedLike = Union[int, str, bytes]


class RandomSource(Protocol):
    def randbytes(self, n: int) -> bytes: ...

    def randbelow(self, n: int) -> int: ...

    def child(self, label: str) -> "RandomSource": ...


def _seed_bytes(seed: SeedLike) -> bytes:
    if isinstance(seed, bytes):
        return seed
    if isinstance(seed, int):
        return seed.to_bytes((seed.bit_length() + 8) // 8 or 1, "big", signed=True)
    return seed.encode("utf-8")


class DeterministicRandom:
    """SHAKE-256 counter-mode byte stream keyed by a seed."""

    def __init__(self, seed: SeedLike, label: str = "") -> None:
        self._key = hashlib.sha256(b"trustfl/drbg\x00" + _seed_bytes(seed) + b"\x00" + label.encode()).digest()
        self._counter = 0

    def randbytes(self, n: int) -> bytes:
        block = hashlib.shake_256(self._key + self._counter.to_bytes(8, "big")).digest(n)
        self._counter += 1
        return block

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("upper bound must be positive")
        # 128 surplus bits keep the modulo bias negligible
        width = (n.bit_length() + 7) // 8 + 16
        return int.from_bytes(self.randbytes(width), "big") % n

    def child(self, label: str) -> "DeterministicRandom":
        return DeterministicRandom(self._key, label)


class SystemRandom:
    def randbytes(self, n: int) -> bytes:
        return os.urandom(n)

    def randbelow(self, n: int) -> int:
        return secrets.randbelow(n)

    def child(self, label: str) -> "SystemRandom":
        return self
