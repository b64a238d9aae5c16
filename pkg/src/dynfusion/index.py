"""Spatial hash index from integer block coordinates to block slots."""

from __future__ import annotations

import numpy as np

from .kernels import hashing

MAX_LOAD = 0.75


def hash_block(coord, capacity: int = 1 << 20) -> int:
    """Table slot of a single block coordinate (capacity is a power of two)."""
    if capacity & (capacity - 1):
        raise ValueError("capacity must be a power of two")
    return int(hashing.hash_slots(np.asarray(coord).reshape(1, 3), capacity)[0])


def _pow2_at_least(n: int) -> int:
    return 1 << max(4, int(np.ceil(np.log2(max(n, 1)))))


class BlockIndex:
    """Open-addressed table; values are dense block indices 0..count-1.

    Blocks are never removed. ``coords[i]`` is the coordinate of block i,
    so iteration order is allocation order.
    """

    def __init__(self, capacity: int = 1 << 12):
        capacity = _pow2_at_least(capacity)
        self.keys = np.zeros((capacity, 3), dtype=np.int32)
        self.vals = np.full(capacity, hashing.EMPTY, dtype=np.int32)
        self._coords = np.zeros((256, 3), dtype=np.int32)
        self.count = 0

    @property
    def capacity(self) -> int:
        return self.vals.shape[0]

    @property
    def coords(self) -> np.ndarray:
        return self._coords[: self.count]

    def __len__(self) -> int:
        return self.count

    def __iter__(self):
        return iter(map(tuple, self.coords))

    def __contains__(self, coord) -> bool:
        return self.lookup(np.asarray(coord).reshape(1, 3))[0] >= 0

    def _reserve(self, extra: int) -> None:
        need = self.count + extra
        if need > MAX_LOAD * self.capacity:
            self._rehash(_pow2_at_least(int(need / MAX_LOAD) + 1))
        if need > self._coords.shape[0]:
            grown = np.zeros((max(need, 2 * self._coords.shape[0]), 3), dtype=np.int32)
            grown[: self.count] = self.coords
            self._coords = grown

    def _rehash(self, capacity: int) -> None:
        coords = self.coords.copy()
        self.keys = np.zeros((capacity, 3), dtype=np.int32)
        self.vals = np.full(capacity, hashing.EMPTY, dtype=np.int32)
        if len(coords):
            hashing.insert(self.keys, self.vals, coords, 0)

    def lookup(self, coords) -> np.ndarray:
        """Block index per coordinate, -1 when absent."""
        return hashing.lookup(self.keys, self.vals, coords)

    def insert(self, coords) -> tuple[np.ndarray, np.ndarray]:
        """Insert coordinates; returns (block index per coord, newly-created flag).

        New blocks are numbered in order of first appearance in ``coords``.
        """
        coords = np.ascontiguousarray(coords, dtype=np.int32).reshape(-1, 3)
        idx = self.lookup(coords)
        new = np.zeros(len(coords), dtype=bool)
        missing = np.flatnonzero(idx < 0)
        if missing.size == 0:
            return idx, new
        _, first, inverse = np.unique(coords[missing], axis=0, return_index=True, return_inverse=True)
        order = np.sort(first)
        fresh = coords[missing[order]]
        self._reserve(len(fresh))
        got, _, nxt = hashing.insert(self.keys, self.vals, fresh, self.count)
        self._coords[self.count : nxt] = fresh
        self.count = nxt
        rank = np.empty(len(first), dtype=np.int64)
        rank[np.argsort(first)] = np.arange(len(first))
        idx[missing] = got[rank[inverse.reshape(-1)]]
        new[missing[order]] = True
        return idx, new
