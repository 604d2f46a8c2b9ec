"""Feature providers: deterministic stand-ins for a deep backbone.

Pipelines only ever see a provider's output vectors, so a hand-crafted
extractor and a store of precomputed embeddings are interchangeable.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from .archive import ArchiveManifest, FeatureStoreError, PatchRef, load_features


@dataclass(frozen=True)
class PatchPixels:
    width: int
    height: int
    data: bytes  # row-major RGB, 8 bits per sample

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("patch dimensions must be positive")
        if len(self.data) != self.width * self.height * 3:
            raise ValueError(f"expected {self.width * self.height * 3} bytes, got {len(self.data)}")

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "PatchPixels":
        arr = np.ascontiguousarray(arr, dtype=np.uint8)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError("expected an (H, W, 3) array")
        return cls(arr.shape[1], arr.shape[0], arr.tobytes())

    def array(self) -> np.ndarray:
        return np.frombuffer(self.data, dtype=np.uint8).reshape(self.height, self.width, 3)


class FeatureProvider:
    name: str = "provider"
    output_dim: int = 0

    def extract(self, item) -> np.ndarray:
        raise NotImplementedError


class ColorHistogramProvider(FeatureProvider):
    def __init__(self, bins_per_channel: int = 16):
        if bins_per_channel < 2:
            raise ValueError("bins_per_channel must be >= 2")
        self.bins = bins_per_channel
        self.name = f"color_hist{bins_per_channel}"
        self.output_dim = 3 * bins_per_channel

    def extract(self, patch: PatchPixels) -> np.ndarray:
        px = patch.array().reshape(-1, 3).astype(np.int64)
        idx = px * self.bins // 256
        hist = np.concatenate([np.bincount(idx[:, ch], minlength=self.bins) for ch in range(3)])
        return hist / hist.sum()


_LBP_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


class LbpProvider(FeatureProvider):
    """256-bin histogram of 8-neighbour local binary patterns on grey levels.

    Neighbour i (clockwise from top-left) sets bit i when its grey level is
    >= the centre's.  Only interior pixels are coded.
    """

    def __init__(self, radius: int = 1, points: int = 8):
        if radius != 1 or points != 8:
            raise ValueError("only radius=1, points=8 is supported")
        self.name = "lbp_r1_p8"
        self.output_dim = 256

    @staticmethod
    def grey(patch: PatchPixels) -> np.ndarray:
        return patch.array().astype(np.int64).sum(axis=2)  # 3x mean, keeps integer ties exact

    def codes(self, patch: PatchPixels) -> np.ndarray:
        if patch.width < 3 or patch.height < 3:
            raise ValueError("LBP needs a patch of at least 3x3 pixels")
        g = self.grey(patch)
        h, w = g.shape
        centre = g[1:-1, 1:-1]
        code = np.zeros_like(centre)
        for bit, (dy, dx) in enumerate(_LBP_OFFSETS):
            code |= (g[1 + dy : h - 1 + dy, 1 + dx : w - 1 + dx] >= centre).astype(np.int64) << bit
        return code

    def extract(self, patch: PatchPixels) -> np.ndarray:
        hist = np.bincount(self.codes(patch).ravel(), minlength=256).astype(np.float64)
        return hist / hist.sum()


class PrecomputedProvider(FeatureProvider):
    """Returns stored vectors for patch references; never looks at pixels."""

    def __init__(self, manifest: ArchiveManifest, name: str = "precomputed"):
        self.manifest = manifest
        self.name = name
        self.output_dim = manifest.feature_dim
        self._cache: Dict[str, Dict[Tuple[int, int], np.ndarray]] = {}

    def extract(self, ref: PatchRef) -> np.ndarray:
        table = self._cache.get(ref.wsi_id)
        if table is None:
            feats = load_features(self.manifest, ref.wsi_id)
            table = {(int(x), int(y)): feats.features[i] for i, (x, y) in enumerate(feats.coords)}
            self._cache[ref.wsi_id] = table
        try:
            return table[(ref.grid_x, ref.grid_y)]
        except KeyError:
            raise FeatureStoreError(ref.wsi_id, f"no stored vector for patch ({ref.grid_x}, {ref.grid_y})") from None


def color_histogram_provider(bins_per_channel: int = 16) -> ColorHistogramProvider:
    return ColorHistogramProvider(bins_per_channel)


def lbp_provider(radius: int = 1, points: int = 8) -> LbpProvider:
    return LbpProvider(radius, points)


def precomputed_provider(manifest: ArchiveManifest, name: str = "precomputed") -> PrecomputedProvider:
    return PrecomputedProvider(manifest, name)
