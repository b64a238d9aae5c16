import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chisquare

from dynfusion.index import MAX_LOAD, BlockIndex, hash_block
from dynfusion.kernels.hashing import hash_slots

coords3 = st.lists(st.tuples(*[st.integers(-1000, 1000)] * 3), min_size=0, max_size=300)


def test_hash_deterministic():
    assert hash_block((3, -7, 11)) == hash_block((3, -7, 11))
    assert 0 <= hash_block((3, -7, 11), 64) < 64
    with pytest.raises(ValueError):
        hash_block((0, 0, 0), 100)


def test_hash_matches_formula():
    c = np.array([[1, 2, 3], [-5, 0, 9]])
    expect = ((c[:, 0] * 73856093) ^ (c[:, 1] * 19349663) ^ (c[:, 2] * 83492791)) & 1023
    assert np.array_equal(hash_slots(c, 1024), expect)


@pytest.mark.parametrize("capacity", [1 << 12, 1 << 16])
def test_hash_uniform(capacity):
    rng = np.random.default_rng(7)
    c = np.unique(rng.integers(-256, 256, (1_600_000, 3)), axis=0)
    c = c[rng.permutation(len(c))[:1_000_000]]
    counts = np.bincount(hash_slots(c, capacity), minlength=capacity)
    assert chisquare(counts).pvalue > 0.01


def test_colliding_coords_both_retrievable(backend):
    idx = BlockIndex(16)
    a, b = (0, 0, 0), (1, 0, 0)
    # force a collision by finding a partner with the same slot
    cap = idx.capacity
    partner = next((x, 0, 0) for x in range(1, 10000) if hash_block((x, 0, 0), cap) == hash_block(a, cap))
    got, new = idx.insert(np.array([a, partner, b]))
    assert new.all() and list(got) == [0, 1, 2]
    assert list(idx.lookup(np.array([partner, a, b]))) == [1, 0, 2]


def test_insert_order_of_first_appearance(backend):
    idx = BlockIndex()
    got, new = idx.insert(np.array([[5, 5, 5], [1, 1, 1], [5, 5, 5], [2, 2, 2]]))
    assert list(got) == [0, 1, 0, 2]
    assert list(new) == [True, True, False, True]
    got, new = idx.insert(np.array([[2, 2, 2], [9, 9, 9]]))
    assert list(got) == [2, 3] and list(new) == [False, True]
    assert [tuple(c) for c in idx] == [(5, 5, 5), (1, 1, 1), (2, 2, 2), (9, 9, 9)]
    assert (1, 1, 1) in idx and (0, 0, 0) not in idx


@given(coords3, coords3)
def test_membership_property(a, b):
    idx = BlockIndex(16)
    a = np.array(a, dtype=np.int64).reshape(-1, 3)
    b = np.array(b, dtype=np.int64).reshape(-1, 3)
    got, _ = idx.insert(a)
    ua = {tuple(x) for x in a}
    assert len(idx) == len(ua)
    assert len(set(got.tolist())) == len(ua)
    assert np.all(idx.lookup(a) == got)
    res = idx.lookup(b)
    for c, r in zip(map(tuple, b), res):
        assert (r >= 0) == (c in ua)
    assert idx.count <= MAX_LOAD * idx.capacity


def test_growth_keeps_entries(backend, rng):
    idx = BlockIndex(16)
    c = np.unique(rng.integers(-500, 500, (20000, 3)), axis=0)
    for chunk in np.array_split(c, 17):
        idx.insert(chunk)
    assert len(idx) == len(c)
    assert np.all(idx.lookup(c) >= 0)
    assert np.array_equal(np.sort(idx.lookup(c)), np.arange(len(c)))


def test_backends_agree(rng):
    from dynfusion._backend import use_backend

    c = rng.integers(-300, 300, (50000, 3))
    q = rng.integers(-300, 300, (50000, 3))
    res = []
    for be in ("numba", "numpy"):
        with use_backend(be):
            idx = BlockIndex(64)
            got, new = idx.insert(c)
            res.append((got, new, idx.lookup(q), idx.coords.copy()))
    for x, y in zip(*res):
        assert np.array_equal(x, y)
