"""Encoders: MinMax barcodes, visual-word histograms and 50-bit pooled integer codes."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .kmeans import assign, kmeans

KEY_BITS = 50
BITS_PER_BAND = 5
DEFAULT_BANDS = 10
DEFAULT_DICT_SIZE = 2048
DEFAULT_WORDS_PER_WSI = 4000

CODE_MAGIC = b"HSDC"
CODE_VERSION = 1
KIND_DICTIONARY = 1
KIND_CODEBOOK = 2
_CODE_HEADER = struct.Struct("<4sIBIIQ")


class EncodingError(ValueError):
    pass


# --- barcodes ---------------------------------------------------------------


def words_for_bits(n_bits: int) -> int:
    return (n_bits + 63) // 64


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a (n, n_bits) boolean matrix into (n, words) uint64, bit i -> word i//64, LSB first."""
    bits = np.atleast_2d(np.asarray(bits, dtype=bool))
    n, nb = bits.shape
    padded = np.zeros((n, words_for_bits(nb) * 64), dtype=bool)
    padded[:, :nb] = bits
    return np.packbits(padded, axis=1, bitorder="little").view("<u8").astype(np.uint64)


def unpack_bits(words: np.ndarray, n_bits: int) -> np.ndarray:
    words = np.atleast_2d(np.asarray(words, dtype="<u8"))
    return np.unpackbits(words.view(np.uint8), axis=1, bitorder="little")[:, :n_bits].astype(bool)


@dataclass(frozen=True)
class Barcode:
    words: np.ndarray
    n_bits: int

    @property
    def bits(self) -> np.ndarray:
        return unpack_bits(self.words[None, :], self.n_bits)[0]

    def __eq__(self, other):
        return isinstance(other, Barcode) and self.n_bits == other.n_bits and np.array_equal(self.words, other.words)

    def __hash__(self):
        return hash((self.n_bits, self.words.tobytes()))


def minmax_bits(features) -> np.ndarray:
    """Derivative-sign binarisation: bit i is set iff f[i+1] > f[i] (ties give 0)."""
    f = np.atleast_2d(np.asarray(features))
    if f.shape[1] < 2:
        raise EncodingError("barcoding needs feature dimension >= 2")
    return f[:, 1:] > f[:, :-1]


def barcode_matrix(features) -> np.ndarray:
    return pack_bits(minmax_bits(features))


def minmax_barcode(f) -> Barcode:
    f = np.asarray(f)
    if f.ndim != 1:
        raise EncodingError("expected a single feature vector")
    return Barcode(barcode_matrix(f)[0], len(f) - 1)


def hamming(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Popcount of XOR over the last axis; broadcasts."""
    return np.bitwise_count(np.bitwise_xor(a, b)).sum(axis=-1, dtype=np.int64)


# --- bag of visual words ------------------------------------------------------


@dataclass
class VisualDictionary:
    centroids: np.ndarray  # (k, word_dim) float32
    seed: int = 0

    @property
    def k(self) -> int:
        return len(self.centroids)

    @property
    def word_dim(self) -> int:
        return self.centroids.shape[1]


def build_dictionary(words, k_dict: int = DEFAULT_DICT_SIZE, seed: int = 0,
                     max_train_words: Optional[int] = None) -> VisualDictionary:
    """Fit the visual dictionary with k-means; k shrinks to the distinct-word count."""
    w = np.asarray(words, dtype=np.float64)
    if w.ndim != 2 or len(w) == 0:
        raise EncodingError("dictionary fitting needs a non-empty (n, dim) word matrix")
    rng = np.random.default_rng(seed)
    if max_train_words is not None and len(w) > max_train_words:
        w = w[np.sort(rng.choice(len(w), size=max_train_words, replace=False))]
    res = kmeans(w, k_dict, rng)
    return VisualDictionary(res.centroids.astype(np.float32), seed)


def word_counts(words, dictionary: VisualDictionary) -> np.ndarray:
    w = np.atleast_2d(np.asarray(words, dtype=np.float64))
    if w.shape[1] != dictionary.word_dim:
        raise EncodingError(f"word dim {w.shape[1]} != dictionary word dim {dictionary.word_dim}")
    labels, _ = assign(w, dictionary.centroids)
    return np.bincount(labels, minlength=dictionary.k).astype(np.int64)


def encode_bovw(words, dictionary: VisualDictionary) -> np.ndarray:
    counts = word_counts(words, dictionary)
    return counts / counts.sum()


def sample_words(features: np.ndarray, max_words: int, rng: np.random.Generator) -> np.ndarray:
    if len(features) <= max_words:
        return features
    return features[np.sort(rng.choice(len(features), size=max_words, replace=False))]


# --- pooled integer codes -----------------------------------------------------


@dataclass
class PoolingCodebook:
    thresholds: np.ndarray  # (bands, 31) float32, non-decreasing per band
    bits_per_band: int = BITS_PER_BAND

    @property
    def levels(self) -> int:
        return len(self.thresholds)


def band_means(features, bands: int = DEFAULT_BANDS) -> np.ndarray:
    """Average-pool each vector over `bands` contiguous bands; the tail is edge-padded."""
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    width = -(-f.shape[1] // bands)
    pad = width * bands - f.shape[1]
    if pad:
        f = np.pad(f, ((0, 0), (0, pad)), mode="edge")
    return f.reshape(len(f), bands, width).mean(axis=2)


def fit_pooling_codebook(features, bands: int = DEFAULT_BANDS) -> PoolingCodebook:
    f = np.atleast_2d(np.asarray(features))
    if bands * BITS_PER_BAND != KEY_BITS:
        raise EncodingError(f"bands * {BITS_PER_BAND} must equal {KEY_BITS}")
    n_levels = 2**BITS_PER_BAND
    if len(f) < n_levels:
        raise EncodingError(f"codebook fitting needs >= {n_levels} vectors, got {len(f)}")
    pooled = band_means(f, bands)
    q = np.arange(1, n_levels) / n_levels
    thresholds = np.quantile(pooled, q, axis=0).T.astype(np.float32)
    return PoolingCodebook(np.maximum.accumulate(thresholds, axis=1))


def band_codes(features, cb: PoolingCodebook) -> np.ndarray:
    pooled = band_means(features, cb.levels)
    return np.stack(
        [np.searchsorted(cb.thresholds[b].astype(np.float64), pooled[:, b], side="left") for b in range(cb.levels)],
        axis=1,
    ).astype(np.uint64)


def integer_codes(features, cb: PoolingCodebook) -> np.ndarray:
    """Shift-and-sum of per-band codes: key = sum_b code_b << (5 b)."""
    codes = band_codes(features, cb)
    shifts = (np.arange(cb.levels, dtype=np.uint64) * np.uint64(cb.bits_per_band))
    return np.bitwise_or.reduce(codes << shifts[None, :], axis=1).astype(np.uint64)


def integer_code(f, cb: PoolingCodebook) -> int:
    return int(integer_codes(np.asarray(f)[None, :], cb)[0])


# --- persistence --------------------------------------------------------------


def dictionary_to_bytes(d: VisualDictionary) -> bytes:
    c = np.ascontiguousarray(d.centroids, dtype="<f4")
    return _CODE_HEADER.pack(CODE_MAGIC, CODE_VERSION, KIND_DICTIONARY, c.shape[0], c.shape[1], d.seed) + c.tobytes()


def codebook_to_bytes(cb: PoolingCodebook) -> bytes:
    t = np.ascontiguousarray(cb.thresholds, dtype="<f4")
    return _CODE_HEADER.pack(CODE_MAGIC, CODE_VERSION, KIND_CODEBOOK, t.shape[0], t.shape[1], cb.bits_per_band) + t.tobytes()


def codes_from_bytes(blob: bytes):
    magic, version, kind, rows, cols, extra = _CODE_HEADER.unpack_from(blob)
    if magic != CODE_MAGIC or version != CODE_VERSION:
        raise EncodingError("not a dictionary/codebook file")
    payload = np.frombuffer(blob, dtype="<f4", offset=_CODE_HEADER.size, count=rows * cols).reshape(rows, cols)
    if kind == KIND_DICTIONARY:
        return VisualDictionary(payload.astype(np.float32), int(extra))
    if kind == KIND_CODEBOOK:
        return PoolingCodebook(payload.astype(np.float32), int(extra))
    raise EncodingError(f"unknown code kind {kind}")


def save_codes(obj, path) -> None:
    blob = dictionary_to_bytes(obj) if isinstance(obj, VisualDictionary) else codebook_to_bytes(obj)
    Path(path).write_bytes(blob)


def load_codes(path):
    return codes_from_bytes(Path(path).read_bytes())
