"""Open-addressing hash table over integer 3D block coordinates.

Layout: ``keys`` (capacity, 3) int32, ``vals`` (capacity,) int32 with -1
marking an empty slot. Capacity is a power of two; probing is linear.
Slot = ((x*P1) ^ (y*P2) ^ (z*P3)) & (capacity - 1) in wrapping int64.
"""

from __future__ import annotations

import numpy as np

from .._backend import njit, use_numba

P1 = 73856093
P2 = 19349663
P3 = 83492791
EMPTY = -1


@njit
def _slot_nb(x, y, z, mask):
    h = (np.int64(x) * P1) ^ (np.int64(y) * P2) ^ (np.int64(z) * P3)
    return h & mask


@njit
def _find_nb(keys, vals, x, y, z):
    mask = vals.shape[0] - 1
    s = _slot_nb(x, y, z, mask)
    while True:
        v = vals[s]
        if v == EMPTY:
            return -1
        if keys[s, 0] == x and keys[s, 1] == y and keys[s, 2] == z:
            return v
        s = (s + 1) & mask


@njit
def _lookup_nb(keys, vals, coords):
    n = coords.shape[0]
    out = np.empty(n, dtype=np.int32)
    for i in range(n):
        out[i] = _find_nb(keys, vals, coords[i, 0], coords[i, 1], coords[i, 2])
    return out


@njit
def _insert_nb(keys, vals, coords, next_index):
    """Insert coords in order; returns (index per coord, new flag, next index)."""
    mask = vals.shape[0] - 1
    n = coords.shape[0]
    out = np.empty(n, dtype=np.int32)
    new = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        x = coords[i, 0]
        y = coords[i, 1]
        z = coords[i, 2]
        s = _slot_nb(x, y, z, mask)
        while True:
            v = vals[s]
            if v == EMPTY:
                keys[s, 0] = x
                keys[s, 1] = y
                keys[s, 2] = z
                vals[s] = next_index
                out[i] = next_index
                new[i] = True
                next_index += 1
                break
            if keys[s, 0] == x and keys[s, 1] == y and keys[s, 2] == z:
                out[i] = v
                break
            s = (s + 1) & mask
    return out, new, next_index


def hash_slots(coords: np.ndarray, capacity: int) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    with np.errstate(over="ignore"):
        h = (c[:, 0] * P1) ^ (c[:, 1] * P2) ^ (c[:, 2] * P3)
    return h & (capacity - 1)


def _lookup_np(keys, vals, coords):
    coords = np.asarray(coords, dtype=np.int32).reshape(-1, 3)
    cap = vals.shape[0]
    out = np.full(coords.shape[0], -1, dtype=np.int32)
    slot = hash_slots(coords, cap)
    pending = np.arange(coords.shape[0])
    while pending.size:
        s = slot[pending]
        v = vals[s]
        hit = (v != EMPTY) & np.all(keys[s] == coords[pending], axis=1)
        out[pending[hit]] = v[hit]
        keep = (v != EMPTY) & ~hit
        pending = pending[keep]
        slot[pending] = (slot[pending] + 1) & (cap - 1)
    return out


def _insert_np(keys, vals, coords, next_index):
    coords = np.asarray(coords, dtype=np.int32).reshape(-1, 3)
    n = coords.shape[0]
    out = _lookup_np(keys, vals, coords)
    new = np.zeros(n, dtype=bool)
    missing = np.flatnonzero(out < 0)
    if missing.size == 0:
        return out, new, next_index
    # first occurrence order decides block indices, as in the sequential kernel
    uniq, first, inverse = np.unique(coords[missing], axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    idx = (next_index + rank).astype(np.int32)
    out[missing] = idx[inverse.reshape(-1)]
    new[missing[first]] = True

    cap = vals.shape[0]
    pend = order.copy()  # process in index order
    slot = hash_slots(uniq, cap)
    while pend.size:
        s = slot[pend]
        free = vals[s] == EMPTY
        # lowest pending rank claims a contested empty slot
        cand = pend[free]
        taken = np.zeros(pend.size, dtype=bool)
        if cand.size:
            _, winners = np.unique(slot[cand], return_index=True)
            win = cand[winners]
            keys[slot[win]] = uniq[win]
            vals[slot[win]] = idx[win]
            taken[np.isin(pend, win)] = True
        pend = pend[~taken]
        slot[pend] = (slot[pend] + 1) & (cap - 1)
    return out, new, next_index + len(uniq)


def lookup(keys, vals, coords) -> np.ndarray:
    coords = np.ascontiguousarray(coords, dtype=np.int32).reshape(-1, 3)
    if use_numba():
        return _lookup_nb(keys, vals, coords)
    return _lookup_np(keys, vals, coords)


def insert(keys, vals, coords, next_index: int):
    coords = np.ascontiguousarray(coords, dtype=np.int32).reshape(-1, 3)
    if use_numba():
        out, new, nxt = _insert_nb(keys, vals, coords, np.int64(next_index))
        return out, new, int(nxt)
    return _insert_np(keys, vals, coords, int(next_index))
