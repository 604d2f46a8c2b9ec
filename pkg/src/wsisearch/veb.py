"""van Emde Boas tree over an m-bit integer universe.

Sub-trees are allocated lazily, so memory grows with the number of keys
rather than with 2^m.  The serialized form keeps the textbook node layout,
where every allocated node carries a dense occupancy directory of its
2^ceil(m/2) cluster slots.  `dense_node_bytes` evaluates the fully
allocated footprint S(u) = (sqrt(u) + 1) S(sqrt(u)) + O(sqrt(u)) exactly.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

EMPTY = 0xFFFFFFFFFFFFFFFF
_NODE = struct.Struct("<BQQ")
_TREE = struct.Struct("<4sBBQ")
TREE_MAGIC = b"HSVB"
SLOT_BYTES = 8


@dataclass
class OpCounter:
    """Per-query operation counts; never shared between concurrent queries."""

    hamming: int = 0
    tree_walks: int = 0
    max_depth: int = 0
    candidates: int = 0

    def depth(self, d: int) -> None:
        if d > self.max_depth:
            self.max_depth = d


def depth_bound(m: int) -> int:
    """Longest chain of recursive calls for an m-bit universe (root counts as 1)."""
    depth = 1
    while m > 1:
        m = (m + 1) // 2
        depth += 1
    return depth


class _Node:
    __slots__ = ("m", "lo_bits", "min", "max", "summary", "clusters")

    def __init__(self, m: int):
        self.m = m
        self.lo_bits = m // 2
        self.min: Optional[int] = None
        self.max: Optional[int] = None
        self.summary: Optional[_Node] = None
        self.clusters: Dict[int, _Node] = {}

    # --- queries ---

    def member(self, x: int, depth: int, counter: Optional[OpCounter]) -> bool:
        if counter is not None:
            counter.depth(depth)
        if x == self.min or x == self.max:
            return True
        if self.m == 1:
            return False
        c = self.clusters.get(x >> self.lo_bits)
        return c is not None and c.member(x & ((1 << self.lo_bits) - 1), depth + 1, counter)

    def successor(self, x: int, depth: int, counter: Optional[OpCounter]) -> Optional[int]:
        if counter is not None:
            counter.depth(depth)
        if self.m == 1:
            return 1 if x == 0 and self.max == 1 else None
        if self.min is not None and x < self.min:
            return self.min
        lb = self.lo_bits
        h, l = x >> lb, x & ((1 << lb) - 1)
        c = self.clusters.get(h)
        if c is not None and c.max is not None and l < c.max:
            return (h << lb) | c.successor(l, depth + 1, counter)
        if self.summary is None:
            return None
        nxt = self.summary.successor(h, depth + 1, counter)
        if nxt is None:
            return None
        return (nxt << lb) | self.clusters[nxt].min

    def predecessor(self, x: int, depth: int, counter: Optional[OpCounter]) -> Optional[int]:
        if counter is not None:
            counter.depth(depth)
        if self.m == 1:
            return 0 if x == 1 and self.min == 0 else None
        if self.max is not None and x > self.max:
            return self.max
        lb = self.lo_bits
        h, l = x >> lb, x & ((1 << lb) - 1)
        c = self.clusters.get(h)
        if c is not None and c.min is not None and l > c.min:
            return (h << lb) | c.predecessor(l, depth + 1, counter)
        prev = self.summary.predecessor(h, depth + 1, counter) if self.summary is not None else None
        if prev is None:
            return self.min if self.min is not None and x > self.min else None
        return (prev << lb) | self.clusters[prev].max

    # --- updates ---

    def insert(self, x: int) -> None:
        if self.min is None:
            self.min = self.max = x
            return
        if x < self.min:
            x, self.min = self.min, x
        if self.m > 1:
            lb = self.lo_bits
            h, l = x >> lb, x & ((1 << lb) - 1)
            c = self.clusters.get(h)
            if c is None:
                if self.summary is None:
                    self.summary = _Node(self.m - lb)
                self.summary.insert(h)
                c = self.clusters[h] = _Node(lb)
                c.min = c.max = l
            else:
                c.insert(l)
        if x > self.max:
            self.max = x

    def delete(self, x: int) -> None:
        if self.min == self.max:
            self.min = self.max = None
            return
        if self.m == 1:
            self.min = 1 if x == 0 else 0
            self.max = self.min
            return
        lb = self.lo_bits
        if x == self.min:
            first = self.summary.min
            x = (first << lb) | self.clusters[first].min
            self.min = x
        h = x >> lb
        c = self.clusters[h]
        c.delete(x & ((1 << lb) - 1))
        if c.min is None:
            del self.clusters[h]
            self.summary.delete(h)
            if self.summary.min is None:
                self.summary = None
            if x == self.max:
                if self.summary is None:
                    self.max = self.min
                else:
                    top = self.summary.max
                    self.max = (top << lb) | self.clusters[top].max
        elif x == self.max:
            self.max = (h << lb) | c.max

    def node_count(self) -> int:
        n = 1 + (self.summary.node_count() if self.summary is not None else 0)
        return n + sum(c.node_count() for c in self.clusters.values())


class VebTree:
    def __init__(self, universe_bits: int = 50):
        if universe_bits < 1 or universe_bits > 64:
            raise ValueError("universe_bits must be in [1, 64]")
        self.universe_bits = universe_bits
        self._root = _Node(universe_bits)
        self._size = 0

    def _check(self, key: int) -> int:
        key = int(key)
        if key < 0 or key >> self.universe_bits:
            raise ValueError(f"key {key} outside universe 2^{self.universe_bits}")
        return key

    def __len__(self) -> int:
        return self._size

    def __contains__(self, key: int) -> bool:
        return self.member(key)

    @property
    def min(self) -> Optional[int]:
        return self._root.min

    @property
    def max(self) -> Optional[int]:
        return self._root.max

    def member(self, key: int, counter: Optional[OpCounter] = None) -> bool:
        return self._root.member(self._check(key), 1, counter)

    def insert(self, key: int) -> bool:
        """Insert `key`; returns False when it was already present."""
        key = self._check(key)
        if self._root.member(key, 1, None):
            return False
        self._root.insert(key)
        self._size += 1
        return True

    def delete(self, key: int) -> bool:
        key = self._check(key)
        if not self._root.member(key, 1, None):
            return False
        self._root.delete(key)
        self._size -= 1
        return True

    def successor(self, key: int, counter: Optional[OpCounter] = None) -> Optional[int]:
        if counter is not None:
            counter.tree_walks += 1
        return self._root.successor(self._check(key), 1, counter)

    def predecessor(self, key: int, counter: Optional[OpCounter] = None) -> Optional[int]:
        if counter is not None:
            counter.tree_walks += 1
        return self._root.predecessor(self._check(key), 1, counter)

    def __iter__(self) -> Iterator[int]:
        x = self.min
        while x is not None:
            yield x
            x = self._root.successor(x, 1, None)

    def node_count(self) -> int:
        return self._root.node_count() if self._root.min is not None else 0

    # --- serialization ---

    def to_bytes(self) -> bytes:
        out = [_TREE.pack(TREE_MAGIC, 1, self.universe_bits, self._size)]
        if self._root.min is not None:
            _write_node(self._root, out)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, blob: bytes, offset: int = 0) -> Tuple["VebTree", int]:
        magic, version, m, size = _TREE.unpack_from(blob, offset)
        if magic != TREE_MAGIC or version != 1:
            raise ValueError("not a serialized vEB tree")
        offset += _TREE.size
        tree = cls(m)
        if size:
            tree._root, offset = _read_node(blob, offset)
        tree._size = size
        return tree, offset


def _directory_bytes(m: int) -> int:
    return max(1, (1 << ((m + 1) // 2)) // 8)


def _write_node(node: _Node, out: List[bytes]) -> None:
    out.append(_NODE.pack(node.m, EMPTY if node.min is None else node.min, EMPTY if node.max is None else node.max))
    if node.m == 1:
        return
    out.append(b"\x01" if node.summary is not None else b"\x00")
    slots = np.zeros(_directory_bytes(node.m) * 8, dtype=bool)
    highs = sorted(node.clusters)
    slots[highs] = True
    out.append(np.packbits(slots, bitorder="little").tobytes())
    if node.summary is not None:
        _write_node(node.summary, out)
    for h in highs:
        _write_node(node.clusters[h], out)


def _read_node(blob: bytes, offset: int) -> Tuple[_Node, int]:
    m, lo, hi = _NODE.unpack_from(blob, offset)
    offset += _NODE.size
    node = _Node(m)
    node.min = None if lo == EMPTY else lo
    node.max = None if hi == EMPTY else hi
    if m == 1:
        return node, offset
    has_summary = blob[offset]
    offset += 1
    nbytes = _directory_bytes(m)
    slots = np.unpackbits(np.frombuffer(blob, dtype=np.uint8, count=nbytes, offset=offset), bitorder="little")
    offset += nbytes
    if has_summary:
        node.summary, offset = _read_node(blob, offset)
    for h in np.flatnonzero(slots).tolist():
        node.clusters[h], offset = _read_node(blob, offset)
    return node, offset


@lru_cache(maxsize=None)
def dense_node_bytes(m: int) -> int:
    """Bytes of a fully allocated textbook node over 2^m keys, with SLOT_BYTES per cluster pointer."""
    if m == 1:
        return _NODE.size
    hi, lo = (m + 1) // 2, m // 2
    slots = 1 << hi
    return _NODE.size + 1 + SLOT_BYTES * slots + dense_node_bytes(hi) + slots * dense_node_bytes(lo)
