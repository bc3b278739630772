"""Stable key hashing for partition routing.

Partition assignment must be reproducible across runs, processes and
implementations, so record keys are hashed with FNV-1a (64-bit), not with
Python's salted ``hash()``. The constants below are the standard FNV-1a
parameters; ``partition_for`` reduces the digest modulo the partition count.
"""

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def stable_hash(key: bytes) -> int:
    """64-bit FNV-1a digest of ``key``."""
    h = FNV64_OFFSET
    for b in key:
        h = ((h ^ b) * FNV64_PRIME) & _MASK64
    return h


def partition_for(key: bytes, partition_count: int) -> int:
    return stable_hash(key) % partition_count
