"""Bloom-filter summaries of stream identifier sets.

Plain (non-counting) filters: route retraction happens through the
anycast table's epoch rebuilds rather than deletions. Bit positions come
from double hashing of two 64-bit digests, so any two nodes configured
with the same (m, k, seed) compute bit-identical filters.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field


@dataclass(frozen=True)
class BloomParams:
    m: int = 2048
    k: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.m < 8 or self.m % 8 != 0:
            raise ValueError("m must be a positive multiple of 8")
        if self.k < 1:
            raise ValueError("k must be >= 1")


def _hash_pair(stream_id: str, seed: int) -> tuple[int, int]:
    digest = hashlib.blake2b(
        stream_id.encode("utf-8"),
        digest_size=16,
        key=seed.to_bytes(8, "big", signed=False),
    ).digest()
    return int.from_bytes(digest[:8], "big"), int.from_bytes(digest[8:], "big")


def _bit_positions(stream_id: str, params: BloomParams) -> list[int]:
    h1, h2 = _hash_pair(stream_id, params.seed)
    return [(h1 + i * h2) % params.m for i in range(params.k)]


@dataclass(frozen=True)
class BloomFilter:
    """Immutable filter; operations return new values."""

    params: BloomParams = field(default_factory=BloomParams)
    bits: int = 0

    def insert(self, stream_id: str) -> "BloomFilter":
        new = self.bits
        for pos in _bit_positions(stream_id, self.params):
            new |= 1 << pos
        return BloomFilter(self.params, new)

    def contains(self, stream_id: str) -> bool:
        for pos in _bit_positions(stream_id, self.params):
            if not (self.bits >> pos) & 1:
                return False
        return True

    def union(self, other: "BloomFilter") -> "BloomFilter":
        if self.params != other.params:
            raise ValueError("cannot union filters with different parameters")
        return BloomFilter(self.params, self.bits | other.bits)

    def popcount(self) -> int:
        return self.bits.bit_count()

    def is_empty(self) -> bool:
        return self.bits == 0

    def to_wire(self) -> str:
        """"m k hex" with bit 0 at the most significant bit of byte 0."""
        n_bytes = self.params.m // 8
        buf = bytearray(n_bytes)
        bits = self.bits
        while bits:
            pos = (bits & -bits).bit_length() - 1
            buf[pos // 8] |= 1 << (7 - pos % 8)
            bits &= bits - 1
        return f"{self.params.m} {self.params.k} {buf.hex()}"


def from_wire(wire: str, seed: int = 0) -> BloomFilter:
    m_s, k_s, hex_s = wire.split(" ")
    m, k = int(m_s), int(k_s)
    raw = bytes.fromhex(hex_s)
    if len(raw) != m // 8:
        raise ValueError("bit array length does not match m")
    bits = 0
    for byte_idx, byte in enumerate(raw):
        for bit_in_byte in range(8):
            if (byte >> (7 - bit_in_byte)) & 1:
                bits |= 1 << (byte_idx * 8 + bit_in_byte)
    return BloomFilter(BloomParams(m=m, k=k, seed=seed), bits)


def estimated_fpr(m: int, k: int, n: int) -> float:
    """Expected false-positive rate for n inserted ids: (1 - e^(-kn/m))^k."""
    if m < 1 or k < 1 or n < 0:
        raise ValueError("m, k must be positive and n non-negative")
    if n == 0:
        return 0.0
    return (1.0 - math.exp(-k * n / m)) ** k
