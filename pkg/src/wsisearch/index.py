"""Index structures for the four pipelines, exact k-NN over them, and storage accounting.

File layout (little-endian): magic "HSIX", u8 kind, u8 version, u16 reserved,
u32 WSI count, the WSI table (u16-length-prefixed UTF-8 id, patient, label),
then a kind-specific payload.  Barcodes are stored as packed 64-bit words.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .encoding import (
    KEY_BITS,
    PoolingCodebook,
    hamming,
    words_for_bits,
)
from .veb import OpCounter, VebTree, dense_node_bytes

INDEX_MAGIC = b"HSIX"
INDEX_VERSION = 1
KIND_FLAT = 1
KIND_VEB = 2
KIND_COSINE = 3
KIND_HISTOGRAM = 4

_HEADER = struct.Struct("<4sBBHI")
_U32 = struct.Struct("<I")
_U32x2 = struct.Struct("<II")
DEFAULT_WALK_BUDGET = 50


class QueryError(ValueError):
    """Bad query or corrupt index file."""


@dataclass(frozen=True)
class WsiMeta:
    wsi_id: str
    patient_id: str
    label: str


@dataclass(frozen=True)
class Hit:
    score: float
    row: int
    wsi: int  # position in the index's WSI table
    wsi_id: str
    label: str
    grid_x: int = -1
    grid_y: int = -1


class _Table:
    """WSI metadata shared by every index kind."""

    def __init__(self):
        self.wsis: List[WsiMeta] = []
        self._pos: Dict[str, int] = {}

    def _register(self, meta: WsiMeta) -> int:
        if meta.wsi_id in self._pos:
            raise QueryError(f"WSI {meta.wsi_id!r} already indexed")
        self._pos[meta.wsi_id] = len(self.wsis)
        self.wsis.append(meta)
        return self._pos[meta.wsi_id]

    def position(self, wsi_id: str) -> int:
        return self._pos[wsi_id]

    def exclusion_mask(self, wsi_id: Optional[str] = None, patient_id: Optional[str] = None) -> np.ndarray:
        mask = np.zeros(len(self.wsis), dtype=bool)
        for i, w in enumerate(self.wsis):
            if w.wsi_id == wsi_id or (patient_id is not None and w.patient_id == patient_id):
                mask[i] = True
        return mask

    def _hit(self, score, row, wsi, coords=None) -> Hit:
        meta = self.wsis[wsi]
        gx, gy = (int(coords[row, 0]), int(coords[row, 1])) if coords is not None else (-1, -1)
        return Hit(float(score), int(row), int(wsi), meta.wsi_id, meta.label, gx, gy)

    def _table_bytes(self, kind: int) -> bytes:
        out = [_HEADER.pack(INDEX_MAGIC, kind, INDEX_VERSION, 0, len(self.wsis))]
        for w in self.wsis:
            for s in (w.wsi_id, w.patient_id, w.label):
                b = s.encode("utf-8")
                out.append(struct.pack("<H", len(b)) + b)
        return b"".join(out)

    def _read_table(self, blob: bytes, kind: int) -> int:
        magic, k, version, _, n = _HEADER.unpack_from(blob)
        if magic != INDEX_MAGIC or version != INDEX_VERSION:
            raise QueryError("not an index file")
        if k != kind:
            raise QueryError(f"index kind {k} != expected {kind}")
        off = _HEADER.size
        for _ in range(n):
            parts = []
            for _ in range(3):
                (ln,) = struct.unpack_from("<H", blob, off)
                parts.append(blob[off + 2 : off + 2 + ln].decode("utf-8"))
                off += 2 + ln
            self._register(WsiMeta(*parts))
        return off

    @property
    def table_size(self) -> int:
        return len(self._table_bytes(0))


def _row_dtype(extra):
    return np.dtype([("wsi", "<u4"), ("x", "<u4"), ("y", "<u4")] + extra)


def _top(scores: np.ndarray, valid: np.ndarray, k: int, descending: bool = False) -> np.ndarray:
    rows = np.flatnonzero(valid)
    s = scores[rows]
    order = np.argsort(-s if descending else s, kind="stable")
    return rows[order[:k]]


# --- flat barcode index (Yottixel) ----------------------------------------------


class FlatBarcodeIndex(_Table):
    kind = KIND_FLAT

    def __init__(self, n_bits: int):
        super().__init__()
        self.n_bits = n_bits
        self._codes: List[np.ndarray] = []
        self._coords: List[np.ndarray] = []
        self._owner: List[np.ndarray] = []
        self._frozen = None

    def add(self, meta: WsiMeta, coords, codes) -> None:
        codes = np.asarray(codes, dtype=np.uint64).reshape(-1, words_for_bits(self.n_bits))
        pos = self._register(meta)
        self._codes.append(codes)
        self._coords.append(np.asarray(coords, dtype=np.uint32).reshape(-1, 2))
        self._owner.append(np.full(len(codes), pos, dtype=np.int64))
        self._frozen = None

    def _arrays(self):
        if self._frozen is None:
            w = words_for_bits(self.n_bits)
            codes = np.concatenate(self._codes) if self._codes else np.zeros((0, w), np.uint64)
            coords = np.concatenate(self._coords) if self._coords else np.zeros((0, 2), np.uint32)
            owner = np.concatenate(self._owner) if self._owner else np.zeros(0, np.int64)
            self._frozen = (codes, coords, owner)
        return self._frozen

    @property
    def codes(self) -> np.ndarray:
        return self._arrays()[0]

    @property
    def coords(self) -> np.ndarray:
        return self._arrays()[1]

    @property
    def owner(self) -> np.ndarray:
        return self._arrays()[2]

    def __len__(self) -> int:
        return len(self.owner)

    def wsi_codes(self, wsi: int) -> np.ndarray:
        return self._codes[wsi]

    def to_bytes(self) -> bytes:
        codes, coords, owner = self._arrays()
        w = words_for_bits(self.n_bits)
        rows = np.zeros(len(owner), dtype=_row_dtype([("code", "<u8", (w,))]))
        rows["wsi"], rows["x"], rows["y"], rows["code"] = owner, coords[:, 0], coords[:, 1], codes
        return self._table_bytes(self.kind) + _U32x2.pack(self.n_bits, len(rows)) + rows.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "FlatBarcodeIndex":
        probe = _Table()
        off = probe._read_table(blob, cls.kind)
        n_bits, n = _U32x2.unpack_from(blob, off)
        off += _U32x2.size
        w = words_for_bits(n_bits)
        rows = np.frombuffer(blob, dtype=_row_dtype([("code", "<u8", (w,))]), count=n, offset=off)
        idx = cls(n_bits)
        for pos, meta in enumerate(probe.wsis):
            sel = rows["wsi"] == pos
            idx.add(meta, np.stack([rows["x"][sel], rows["y"][sel]], axis=1), rows["code"][sel].reshape(-1, w))
        return idx


def knn_hamming(idx: FlatBarcodeIndex, q, k: int, exclude: Optional[np.ndarray] = None,
                counter: Optional[OpCounter] = None) -> List[Hit]:
    """Exact k nearest barcodes by Hamming distance; ties keep insertion order."""
    n_bits = getattr(q, "n_bits", idx.n_bits)
    q = np.asarray(getattr(q, "words", q), dtype=np.uint64)
    if n_bits != idx.n_bits or q.shape != (words_for_bits(idx.n_bits),):
        raise QueryError("query barcode length does not match the index")
    codes, coords, owner = idx._arrays()
    dist = hamming(codes, q[None, :])
    if counter is not None:
        counter.hamming += len(codes)
    valid = np.ones(len(codes), dtype=bool) if exclude is None else ~exclude[owner]
    return [idx._hit(dist[r], r, owner[r], coords) for r in _top(dist, valid, k)]


# --- cosine index (RetCCL-style) ------------------------------------------------


class CosineIndex(_Table):
    kind = KIND_COSINE

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self._vecs: List[np.ndarray] = []
        self._coords: List[np.ndarray] = []
        self._owner: List[np.ndarray] = []
        self._frozen = None

    @staticmethod
    def normalize(v: np.ndarray) -> np.ndarray:
        v = np.atleast_2d(np.asarray(v, dtype=np.float64))
        norms = np.linalg.norm(v, axis=1)
        if np.any(norms == 0):
            raise QueryError("cannot index or query a zero vector")
        return v / norms[:, None]

    def add(self, meta: WsiMeta, coords, vectors) -> None:
        vectors = np.atleast_2d(np.asarray(vectors))
        if vectors.shape[1] != self.dim:
            raise QueryError(f"vector dim {vectors.shape[1]} != index dim {self.dim}")
        pos = self._register(meta)
        self._vecs.append(self.normalize(vectors))
        self._coords.append(np.asarray(coords, dtype=np.uint32).reshape(-1, 2))
        self._owner.append(np.full(len(vectors), pos, dtype=np.int64))
        self._frozen = None

    def _arrays(self):
        if self._frozen is None:
            vecs = np.concatenate(self._vecs) if self._vecs else np.zeros((0, self.dim))
            coords = np.concatenate(self._coords) if self._coords else np.zeros((0, 2), np.uint32)
            owner = np.concatenate(self._owner) if self._owner else np.zeros(0, np.int64)
            self._frozen = (vecs, coords, owner)
        return self._frozen

    @property
    def vectors(self) -> np.ndarray:
        return self._arrays()[0]

    def __len__(self) -> int:
        return len(self._arrays()[2])

    def to_bytes(self) -> bytes:
        vecs, coords, owner = self._arrays()
        rows = np.zeros(len(owner), dtype=_row_dtype([("v", "<f8", (self.dim,))]))
        rows["wsi"], rows["x"], rows["y"], rows["v"] = owner, coords[:, 0], coords[:, 1], vecs
        return self._table_bytes(self.kind) + _U32x2.pack(self.dim, len(rows)) + rows.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CosineIndex":
        probe = _Table()
        off = probe._read_table(blob, cls.kind)
        dim, n = _U32x2.unpack_from(blob, off)
        rows = np.frombuffer(blob, dtype=_row_dtype([("v", "<f8", (dim,))]), count=n, offset=off + _U32x2.size)
        idx = cls(dim)
        for pos, meta in enumerate(probe.wsis):
            sel = rows["wsi"] == pos
            idx._register(meta)
            idx._vecs.append(np.array(rows["v"][sel], dtype=np.float64).reshape(-1, dim))
            idx._coords.append(np.stack([rows["x"][sel], rows["y"][sel]], axis=1).astype(np.uint32))
            idx._owner.append(np.full(int(sel.sum()), pos, dtype=np.int64))
        return idx


def knn_cosine(idx: CosineIndex, q, k: int, exclude: Optional[np.ndarray] = None,
               counter: Optional[OpCounter] = None) -> List[Hit]:
    """Exact top-k by cosine similarity, descending; ties keep insertion order."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (idx.dim,):
        raise QueryError(f"query dim {q.shape} != index dim {idx.dim}")
    qn = CosineIndex.normalize(q)[0]
    vecs, coords, owner = idx._arrays()
    sims = vecs @ qn
    if counter is not None:
        counter.candidates += len(vecs)
    valid = np.ones(len(vecs), dtype=bool) if exclude is None else ~exclude[owner]
    return [idx._hit(sims[r], r, owner[r], coords) for r in _top(sims, valid, k, descending=True)]


# --- histogram index (BoVW) -----------------------------------------------------


def _varints(values: Iterable[int]) -> bytes:
    out = bytearray()
    for v in values:
        v = int(v)
        while True:
            b = v & 0x7F
            v >>= 7
            if v:
                out.append(b | 0x80)
            else:
                out.append(b)
                break
    return bytes(out)


def _read_varints(blob: bytes, off: int, count: int) -> Tuple[List[int], int]:
    vals = []
    for _ in range(count):
        shift = v = 0
        while True:
            b = blob[off]
            off += 1
            v |= (b & 0x7F) << shift
            shift += 7
            if not b & 0x80:
                break
        vals.append(v)
    return vals, off


class HistogramIndex(_Table):
    """One visual-word count vector per WSI; histograms are counts / total.

    Serialized sparsely: an occupancy bitmap over the dictionary (64-bit words)
    followed by LEB128 varint counts for the occupied bins.
    """

    kind = KIND_HISTOGRAM

    def __init__(self, k: int):
        super().__init__()
        self.k = k
        self._counts: List[np.ndarray] = []

    def add(self, meta: WsiMeta, counts) -> None:
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (self.k,) or counts.min() < 0 or counts.sum() == 0:
            raise QueryError("word counts must be a non-negative, non-empty vector of dictionary length")
        self._register(meta)
        self._counts.append(counts)

    @property
    def counts(self) -> np.ndarray:
        return np.stack(self._counts) if self._counts else np.zeros((0, self.k), np.int64)

    @property
    def histograms(self) -> np.ndarray:
        c = self.counts
        return c / c.sum(axis=1, keepdims=True) if len(c) else c.astype(np.float64)

    def __len__(self) -> int:
        return len(self._counts)

    def to_bytes(self) -> bytes:
        out = [self._table_bytes(self.kind), _U32x2.pack(self.k, len(self._counts))]
        nwords = words_for_bits(self.k)
        for c in self._counts:
            occupied = c > 0
            bitmap = np.zeros(nwords * 64, dtype=bool)
            bitmap[: self.k] = occupied
            out.append(np.packbits(bitmap, bitorder="little").tobytes())
            out.append(_varints(c[occupied]))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "HistogramIndex":
        probe = _Table()
        off = probe._read_table(blob, cls.kind)
        k, n = _U32x2.unpack_from(blob, off)
        off += _U32x2.size
        nbytes = words_for_bits(k) * 8
        idx = cls(k)
        for meta in probe.wsis:
            bits = np.unpackbits(np.frombuffer(blob, np.uint8, nbytes, off), bitorder="little")[:k].astype(bool)
            off += nbytes
            vals, off = _read_varints(blob, off, int(bits.sum()))
            counts = np.zeros(k, dtype=np.int64)
            counts[bits] = vals
            idx.add(meta, counts)
        return idx


def chi2_distance(h, g) -> float:
    h = np.asarray(h, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if h.shape != g.shape:
        raise QueryError("histogram lengths differ")
    return float(chi2_rows(h[None, :], g)[0])


def chi2_rows(hs: np.ndarray, g: np.ndarray) -> np.ndarray:
    num = (hs - g[None, :]) ** 2
    den = hs + g[None, :]
    safe = np.where(den > 0, den, 1.0)
    return np.where(den > 0, num / safe, 0.0).sum(axis=1)


def knn_chi2(idx: HistogramIndex, h, k: int, exclude: Optional[np.ndarray] = None,
             counter: Optional[OpCounter] = None) -> List[Hit]:
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (idx.k,):
        raise QueryError("histogram length does not match the index")
    hs = idx.histograms
    d = chi2_rows(hs, h) if len(hs) else np.zeros(0)
    if counter is not None:
        counter.candidates += len(hs)
    valid = np.ones(len(hs), dtype=bool) if exclude is None else ~exclude
    return [idx._hit(d[r], r, r) for r in _top(d, valid, k)]


# --- vEB patch index (SISH) -----------------------------------------------------


class VebPatchIndex(_Table):
    """Integer-keyed tree over mosaic patches plus their barcodes.

    Quantisation collisions share a key: every key maps to a bucket of rows.
    """

    kind = KIND_VEB

    def __init__(self, codebook: PoolingCodebook, n_bits: int, universe_bits: int = KEY_BITS):
        super().__init__()
        self.codebook = codebook
        self.n_bits = n_bits
        self.tree = VebTree(universe_bits)
        self.buckets: Dict[int, List[int]] = {}
        self._keys: List[int] = []
        self._codes: List[np.ndarray] = []
        self._coords: List[Tuple[int, int]] = []
        self._owner: List[int] = []
        self._frozen = None

    def add(self, meta: WsiMeta, coords, keys, codes) -> None:
        pos = self._register(meta)
        codes = np.asarray(codes, dtype=np.uint64).reshape(-1, words_for_bits(self.n_bits))
        coords = np.asarray(coords).reshape(-1, 2)
        for key, code, (x, y) in zip(np.asarray(keys).tolist(), codes, coords.tolist()):
            row = len(self._keys)
            self.tree.insert(key)
            self.buckets.setdefault(int(key), []).append(row)
            self._keys.append(int(key))
            self._codes.append(code)
            self._coords.append((int(x), int(y)))
            self._owner.append(pos)
        self._frozen = None

    def _arrays(self):
        if self._frozen is None:
            w = words_for_bits(self.n_bits)
            codes = np.stack(self._codes) if self._codes else np.zeros((0, w), np.uint64)
            coords = np.array(self._coords, dtype=np.uint32).reshape(-1, 2)
            self._frozen = (codes, coords, np.array(self._owner, dtype=np.int64))
        return self._frozen

    def __len__(self) -> int:
        return len(self._keys)

    def tree_bytes(self) -> int:
        return len(self.tree.to_bytes())

    def to_bytes(self) -> bytes:
        codes, coords, owner = self._arrays()
        w = words_for_bits(self.n_bits)
        cb = self.codebook
        out = [
            self._table_bytes(self.kind),
            struct.pack("<III", cb.levels, cb.bits_per_band, cb.thresholds.shape[1]),
            np.ascontiguousarray(cb.thresholds, dtype="<f4").tobytes(),
            _U32x2.pack(self.n_bits, len(owner)),
        ]
        rows = np.zeros(len(owner), dtype=_row_dtype([("key", "<u8"), ("code", "<u8", (w,))]))
        rows["wsi"], rows["x"], rows["y"] = owner, coords[:, 0], coords[:, 1]
        rows["key"], rows["code"] = np.array(self._keys, dtype=np.uint64), codes
        out.append(rows.tobytes())
        out.append(_U32.pack(len(self.buckets)))
        for key in sorted(self.buckets):
            members = self.buckets[key]
            out.append(struct.pack("<QI", key, len(members)) + np.array(members, dtype="<u4").tobytes())
        out.append(self.tree.to_bytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "VebPatchIndex":
        probe = _Table()
        off = probe._read_table(blob, cls.kind)
        levels, bpb, nthr = struct.unpack_from("<III", blob, off)
        off += 12
        thr = np.frombuffer(blob, "<f4", levels * nthr, off).reshape(levels, nthr).astype(np.float32)
        off += 4 * levels * nthr
        n_bits, n = _U32x2.unpack_from(blob, off)
        off += _U32x2.size
        w = words_for_bits(n_bits)
        rows = np.frombuffer(blob, _row_dtype([("key", "<u8"), ("code", "<u8", (w,))]), n, off)
        off += rows.nbytes
        idx = cls(PoolingCodebook(thr, bpb), n_bits)
        for meta in probe.wsis:
            idx._register(meta)
        (nb,) = _U32.unpack_from(blob, off)
        off += 4
        for _ in range(nb):
            key, cnt = struct.unpack_from("<QI", blob, off)
            off += 12
            idx.buckets[key] = np.frombuffer(blob, "<u4", cnt, off).astype(np.int64).tolist()
            off += 4 * cnt
        idx.tree, off = VebTree.from_bytes(blob, off)
        idx._keys = rows["key"].astype(np.int64).tolist()
        idx._codes = list(np.array(rows["code"], dtype=np.uint64).reshape(-1, w))
        idx._coords = list(zip(rows["x"].tolist(), rows["y"].tolist()))
        idx._owner = rows["wsi"].astype(np.int64).tolist()
        return idx


def veb_neighbor_candidates(idx, key: int, budget: int, counter: Optional[OpCounter] = None) -> List[int]:
    """Up to `budget` member keys nearest to `key` in integer distance.

    Walks successors and predecessors outward from `key`; equal distances
    resolve to the smaller key.  Output is ordered by distance.
    """
    if budget < 1:
        raise QueryError("candidate budget must be >= 1")
    tree: VebTree = idx.tree if isinstance(idx, VebPatchIndex) else idx
    key = int(key)
    out = [key] if tree.member(key, counter) else []
    succ = tree.successor(key, counter)
    pred = tree.predecessor(key, counter)
    while len(out) < budget and (succ is not None or pred is not None):
        if succ is None or (pred is not None and key - pred <= succ - key):
            out.append(pred)
            pred = tree.predecessor(pred, counter) if len(out) < budget else None
        else:
            out.append(succ)
            succ = tree.successor(succ, counter) if len(out) < budget else None
    return out


def knn_veb(idx: VebPatchIndex, key: int, q_code, k: int, budget: int = DEFAULT_WALK_BUDGET,
            exclude: Optional[np.ndarray] = None, counter: Optional[OpCounter] = None) -> List[Hit]:
    """Tree-guided patch search: candidate keys, then Hamming re-ranking of at most `budget` rows."""
    keys = veb_neighbor_candidates(idx, key, budget, counter)
    codes, coords, owner = idx._arrays()
    rows = []
    for ck in keys:
        for r in idx.buckets[ck]:
            if exclude is None or not exclude[owner[r]]:
                rows.append(r)
    rows = np.array(rows[:budget], dtype=np.int64)
    if counter is not None:
        counter.candidates += len(keys)
        counter.hamming += len(rows)
    if len(rows) == 0:
        return []
    q = np.asarray(q_code, dtype=np.uint64)
    dist = hamming(codes[rows], q[None, :])
    order = np.argsort(dist, kind="stable")[:k]
    return [idx._hit(dist[o], rows[o], owner[rows[o]], coords) for o in order]


# --- storage --------------------------------------------------------------------


@dataclass
class StorageReport:
    actual_bytes: int
    dense_equivalent_bytes: int
    per_wsi_bytes: float
    wsi_count: int

    def to_json(self) -> dict:
        return {
            "actual_bytes": self.actual_bytes,
            "dense_equivalent_bytes": self.dense_equivalent_bytes,
            "per_wsi_bytes": self.per_wsi_bytes,
            "wsi_count": self.wsi_count,
        }


def storage_report(index, blob: Optional[bytes] = None) -> StorageReport:
    blob = index.to_bytes() if blob is None else blob
    actual = len(blob)
    dense = actual
    if isinstance(index, VebPatchIndex) and len(index.tree):
        dense = actual - index.tree_bytes() + dense_node_bytes(index.tree.universe_bits)
    n = len(index.wsis)
    return StorageReport(actual, dense, actual / n if n else 0.0, n)


def payload_bytes(index) -> int:
    """Serialized size minus the header and WSI table."""
    return len(index.to_bytes()) - index.table_size


_LOADERS = {KIND_FLAT: FlatBarcodeIndex, KIND_VEB: VebPatchIndex, KIND_COSINE: CosineIndex,
            KIND_HISTOGRAM: HistogramIndex}


def index_from_bytes(blob: bytes):
    if len(blob) < _HEADER.size or blob[:4] != INDEX_MAGIC:
        raise QueryError("not an index file")
    return _LOADERS[blob[4]].from_bytes(blob)


def save_index(index, path) -> None:
    Path(path).write_bytes(index.to_bytes())


def load_index(path):
    return index_from_bytes(Path(path).read_bytes())
