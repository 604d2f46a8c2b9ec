import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import sorted_predecessor, sorted_successor
from wsisearch.veb import OpCounter, VebTree, dense_node_bytes, depth_bound


class TestBasics:
    def test_member(self):
        t = VebTree()
        t.insert(3)
        assert t.member(3) and not t.member(4)

    def test_idempotent_insert(self):
        t = VebTree()
        assert t.insert(3) and not t.insert(3)
        assert len(t) == 1 and list(t) == [3]

    def test_empty(self):
        t = VebTree()
        assert t.successor(0) is None and t.predecessor(2**50 - 1) is None and t.min is None

    def test_small_set(self):
        t = VebTree()
        for k in (3, 9, 17):
            t.insert(k)
        assert t.successor(4) == 9
        assert t.predecessor(3) is None
        assert t.predecessor(18) == 17 and t.successor(17) is None

    def test_universe_bounds(self):
        t = VebTree(8)
        with pytest.raises(ValueError):
            t.insert(256)
        with pytest.raises(ValueError):
            t.insert(-1)
        assert t.insert(255) and t.max == 255

    def test_delete(self):
        t = VebTree(16)
        for k in (1, 5, 9, 300):
            t.insert(k)
        assert t.delete(5) and not t.delete(5)
        assert list(t) == [1, 9, 300] and t.successor(1) == 9

    def test_depth_bound_50(self):
        assert depth_bound(50) == 7


class TestSerialization:
    def test_round_trip(self):
        rng = np.random.default_rng(0)
        t = VebTree()
        for k in rng.integers(0, 2**50, 500).tolist():
            t.insert(k)
        blob = t.to_bytes()
        back, end = VebTree.from_bytes(blob)
        assert end == len(blob)
        assert list(back) == list(t) and back.to_bytes() == blob

    def test_empty_round_trip(self):
        back, _ = VebTree.from_bytes(VebTree(12).to_bytes())
        assert len(back) == 0 and back.universe_bits == 12

    def test_dense_recurrence_small(self):
        # m=1 leaf: one node record; m=2: node + summary byte + 2 slots + summary(1) + 2 clusters(1)
        leaf = dense_node_bytes(1)
        assert dense_node_bytes(2) == leaf + 1 + 8 * 2 + leaf + 2 * leaf

    def test_dense_far_exceeds_actual(self):
        rng = np.random.default_rng(1)
        t = VebTree()
        for k in rng.integers(0, 2**50, 10_000).tolist():
            t.insert(k)
        assert dense_node_bytes(50) >= 1000 * len(t.to_bytes())


@given(st.lists(st.integers(0, 2**20 - 1), max_size=200), st.lists(st.integers(0, 2**20 - 1), min_size=1, max_size=50))
@settings(max_examples=80, deadline=None)
def test_matches_sorted_oracle(keys, probes):
    t = VebTree(20)
    for k in keys:
        t.insert(k)
    ref = sorted(set(keys))
    assert list(t) == ref
    for p in probes:
        c = OpCounter()
        assert t.member(p, c) == (p in set(ref))
        assert t.successor(p, c) == sorted_successor(ref, p)
        assert t.predecessor(p, c) == sorted_predecessor(ref, p)
        assert c.max_depth <= depth_bound(20)


@given(st.lists(st.integers(0, 1023), max_size=80), st.lists(st.integers(0, 1023), max_size=80))
@settings(max_examples=60, deadline=None)
def test_delete_matches_set(inserts, deletes):
    t, ref = VebTree(10), set()
    for k in inserts:
        t.insert(k)
        ref.add(k)
    for k in deletes:
        assert t.delete(k) == (k in ref)
        ref.discard(k)
    assert list(t) == sorted(ref) and len(t) == len(ref)
    assert t.min == (min(ref) if ref else None) and t.max == (max(ref) if ref else None)
