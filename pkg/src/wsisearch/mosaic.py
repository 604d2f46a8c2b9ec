"""Mosaic construction: colour clustering, spatial sub-clustering, intra-cluster sampling."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np

from .archive import PatchRef, WsiFeatures, WsiRecord, stable_seed
from .kmeans import kmeans

STAIN = "stain_histogram"
DEEP = "deep_feature"


class MosaicError(Exception):
    pass


@dataclass
class MosaicParams:
    k_color: int = 9
    sampling_rate: float = 0.05
    spatial_clusters_per_color: Union[int, str] = "auto"
    min_per_cluster: int = 1
    divide_feature: str = STAIN
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.sampling_rate <= 1.0:
            raise ValueError("sampling_rate must be in (0, 1]")
        if self.k_color < 1:
            raise ValueError("k_color must be >= 1")
        if self.min_per_cluster < 0:
            raise ValueError("min_per_cluster must be >= 0")
        if self.divide_feature not in (STAIN, DEEP):
            raise ValueError(f"unknown divide_feature {self.divide_feature!r}")
        if self.spatial_clusters_per_color != "auto" and int(self.spatial_clusters_per_color) < 1:
            raise ValueError("spatial_clusters_per_color must be 'auto' or >= 1")


@dataclass
class Mosaic:
    wsi_id: str
    indices: np.ndarray  # rows of the WSI's feature arrays
    members: List[PatchRef]
    provenance: List[Tuple[int, int]]  # (colour cluster, spatial cluster) per member

    def __len__(self) -> int:
        return len(self.indices)

    def to_jsonl(self) -> str:
        lines = [
            json.dumps(
                {"wsi_id": self.wsi_id, "grid_x": m.grid_x, "grid_y": m.grid_y,
                 "color_cluster": c, "spatial_cluster": s},
                sort_keys=True,
            )
            for m, (c, s) in zip(self.members, self.provenance)
        ]
        return "".join(line + "\n" for line in lines)


def cluster_by_stain(histograms, k: int, seed=0) -> np.ndarray:
    x = np.asarray(histograms, dtype=np.float64)
    if len(x) == 0:
        raise MosaicError("cannot cluster an empty patch list")
    return kmeans(x, k, seed).labels


def cluster_spatially(coords, k: int, seed=0) -> np.ndarray:
    x = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    if len(x) == 0:
        raise MosaicError("cannot cluster an empty patch list")
    return kmeans(x, k, seed).labels


def round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def cluster_sample_size(size: int, rate: float, min_per_cluster: int) -> int:
    # 1e-9 guards products like 0.3 * 0.05 * 1000 landing just under .5
    return min(size, max(min_per_cluster, round_half_up(size * rate + 1e-9)))


def sample_mosaic(cluster_ids, sampling_rate: float, min_per_cluster: int = 1, seed=0) -> np.ndarray:
    """Pick members from each cluster uniformly without replacement.

    `cluster_ids` holds one hashable cluster key per patch (typically a
    (colour, spatial) pair).  Returns sorted row indices.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    groups = {}
    for i, cid in enumerate(cluster_ids):
        groups.setdefault(tuple(np.atleast_1d(cid).tolist()), []).append(i)
    chosen = []
    for key in sorted(groups):
        rows = groups[key]
        take = cluster_sample_size(len(rows), sampling_rate, min_per_cluster)
        if take:
            chosen.extend(rng.choice(rows, size=take, replace=False).tolist())
    return np.array(sorted(chosen), dtype=np.int64)


def build_mosaic(feats: WsiFeatures, params: MosaicParams, record: Optional[WsiRecord] = None) -> Mosaic:
    n = len(feats)
    if n == 0:
        raise MosaicError(f"{feats.wsi_id}: WSI has no patches")
    if params.divide_feature == STAIN:
        if feats.stain is None:
            raise MosaicError(f"{feats.wsi_id}: stain histograms required for colour clustering")
        divide = feats.stain
    else:
        divide = feats.features
    rng = np.random.default_rng(stable_seed(params.seed, feats.wsi_id))
    color = cluster_by_stain(divide, params.k_color, rng)

    spatial = np.zeros(n, dtype=np.int64)
    for c in np.unique(color):
        rows = np.flatnonzero(color == c)
        if params.spatial_clusters_per_color == "auto":
            k_sp = max(1, round_half_up(len(rows) * params.sampling_rate))
        else:
            k_sp = int(params.spatial_clusters_per_color)
        spatial[rows] = cluster_spatially(feats.coords[rows], k_sp, rng)

    keys = np.stack([color, spatial], axis=1)
    idx = sample_mosaic(keys, params.sampling_rate, params.min_per_cluster, rng)
    if len(idx) == 0:
        raise MosaicError(f"{feats.wsi_id}: mosaic is empty")
    px = record.patch_px if record else 256
    mag = record.magnification if record else PatchRef.__dataclass_fields__["magnification"].default
    members = [PatchRef(feats.wsi_id, int(feats.coords[i, 0]), int(feats.coords[i, 1]), px, mag) for i in idx]
    prov = [(int(color[i]), int(spatial[i])) for i in idx]
    return Mosaic(feats.wsi_id, idx, members, prov)
