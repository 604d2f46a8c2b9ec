"""Engines: per-WSI indexing and WSI-level retrieval for the four pipelines."""
from __future__ import annotations

import json
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .archive import ArchiveError, ArchiveManifest, WsiRecord, load_features, stable_seed
from .encoding import (
    DEFAULT_BANDS,
    DEFAULT_DICT_SIZE,
    DEFAULT_WORDS_PER_WSI,
    EncodingError,
    barcode_matrix,
    build_dictionary,
    fit_pooling_codebook,
    hamming,
    integer_codes,
    sample_words,
    word_counts,
)
from .index import (
    DEFAULT_WALK_BUDGET,
    CosineIndex,
    FlatBarcodeIndex,
    HistogramIndex,
    VebPatchIndex,
    WsiMeta,
    knn_chi2,
    knn_cosine,
    knn_hamming,
    knn_veb,
)
from .mosaic import DEEP, STAIN, MosaicError, MosaicParams, build_mosaic
from .ranking import DISTANCE, SIMILARITY, Neighbor, PatchEvidence, RankedOutcome, rank_and_label
from .veb import OpCounter

BOVW = "bovw"
YOTTIXEL = "yottixel"
SISH = "sish"
RETCCL = "retccl_style"
PIPELINES = (BOVW, YOTTIXEL, SISH, RETCCL)

# Errors that make one WSI unusable; the benchmark counts them as failures.
WSI_FAILURES = (ArchiveError, MosaicError, EncodingError, ValueError)


class SearchError(Exception):
    pass


@dataclass
class EngineConfig:
    pipeline: str = YOTTIXEL
    ranking_enabled: bool = False
    mosaic: MosaicParams = field(default_factory=MosaicParams)
    k_dict: int = DEFAULT_DICT_SIZE
    words_per_wsi: int = DEFAULT_WORDS_PER_WSI
    dict_train_words: Optional[int] = 20000
    bands: int = DEFAULT_BANDS
    walk_budget: int = DEFAULT_WALK_BUDGET
    patch_k: int = 5
    p_min: float = 0.5
    provider: str = "precomputed"
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise ValueError(f"unknown pipeline {self.pipeline!r}")
        if not self.name:
            self.name = self.pipeline

    def to_json(self) -> dict:
        m = self.mosaic
        return {
            "name": self.name,
            "pipeline": self.pipeline,
            "ranking_enabled": self.ranking_enabled,
            "provider": self.provider,
            "seed": self.seed,
            "mosaic": {
                "k_color": m.k_color,
                "sampling_rate": m.sampling_rate,
                "spatial_clusters_per_color": m.spatial_clusters_per_color,
                "min_per_cluster": m.min_per_cluster,
                "divide_feature": m.divide_feature,
            },
            "k_dict": self.k_dict,
            "words_per_wsi": self.words_per_wsi,
            "bands": self.bands,
            "walk_budget": self.walk_budget,
            "patch_k": self.patch_k,
        }


ENGINE_NAMES = ("bovw", "yottixel", "yottixel-r", "sish", "sish-n", "retccl", "retccl-n")


def engine_config(name: str, seed: int = 0, **overrides) -> EngineConfig:
    """Map an engine selector (e.g. "sish-n") to its configuration."""
    table = {
        "bovw": (BOVW, False, STAIN),
        "yottixel": (YOTTIXEL, False, STAIN),
        "yottixel-r": (YOTTIXEL, True, STAIN),
        "sish": (SISH, True, STAIN),
        "sish-n": (SISH, False, STAIN),
        "retccl": (RETCCL, True, DEEP),
        "retccl-n": (RETCCL, False, DEEP),
    }
    if name not in table:
        raise ValueError(f"unknown engine {name!r}; choose from {', '.join(ENGINE_NAMES)}")
    pipeline, ranking, divide = table[name]
    mosaic = overrides.pop("mosaic", None) or MosaicParams(divide_feature=divide, seed=seed)
    return EngineConfig(pipeline=pipeline, ranking_enabled=ranking, mosaic=mosaic, seed=seed, name=name, **overrides)


@dataclass
class Candidate:
    wsi_id: str
    label: str
    score: float
    score_kind: str


@dataclass
class WsiQueryResult:
    query: str
    pipeline: str
    k: int
    candidates: List[Candidate]
    evidence: Optional[List[PatchEvidence]] = None
    outcome: Optional[RankedOutcome] = None

    def to_json(self) -> dict:
        return {
            "query": self.query,
            "pipeline": self.pipeline,
            "k": self.k,
            "candidates": [{"wsi_id": c.wsi_id, "label": c.label, "score": c.score} for c in self.candidates],
        }


@dataclass
class PreparedWsi:
    """Query-side representation of one WSI for a given engine."""

    meta: WsiMeta
    coords: np.ndarray
    barcodes: Optional[np.ndarray] = None
    vectors: Optional[np.ndarray] = None  # mosaic deep features (or BoVW words)
    keys: Optional[np.ndarray] = None
    counts: Optional[np.ndarray] = None
    mosaic_size: int = 0


def wsi_distance(q_codes: np.ndarray, p_codes: np.ndarray, counter: Optional[OpCounter] = None) -> float:
    """Median over query barcodes of the minimum Hamming distance to the candidate's barcodes."""
    q_codes = np.atleast_2d(q_codes)
    p_codes = np.atleast_2d(p_codes)
    if len(q_codes) == 0 or len(p_codes) == 0:
        raise SearchError("wsi_distance needs two non-empty mosaics")
    if q_codes.shape[1] != p_codes.shape[1]:
        raise SearchError("barcode lengths differ")
    d = hamming(q_codes[:, None, :], p_codes[None, :, :])
    if counter is not None:
        counter.hamming += d.size
    return float(np.median(d.min(axis=1)))


def majority_vote(result: WsiQueryResult, n: int) -> str:
    """Most frequent label among the top-n candidates; ties go to the best-ranked tied label."""
    if not result.candidates:
        raise SearchError(f"query {result.query}: no candidates to vote on")
    top = result.candidates[: max(1, n)]
    counts = Counter(c.label for c in top)
    best = max(counts.values())
    for c in top:
        if counts[c.label] == best:
            return c.label
    raise AssertionError("unreachable")


class Engine:
    """One configured search engine over an indexed set of WSIs."""

    def __init__(self, config: EngineConfig, manifest: ArchiveManifest):
        self.config = config
        self.manifest = manifest
        self.index = None
        self.dictionary = None
        self.codebook = None
        self.failures: Dict[str, str] = {}
        self.index_seconds: Dict[str, float] = {}
        self.mosaic_sizes: Dict[str, int] = {}
        self.build_seconds = 0.0

    # --- per-WSI processing -------------------------------------------------

    def _meta(self, rec: WsiRecord) -> WsiMeta:
        return WsiMeta(rec.wsi_id, rec.patient_id, rec.label)

    def prepare(self, wsi_id: str) -> PreparedWsi:
        """Load and encode one WSI as far as the fitted state allows."""
        cfg = self.config
        rec = self.manifest.record(wsi_id)
        feats = load_features(self.manifest, wsi_id)
        if len(feats) == 0:
            raise MosaicError(f"{wsi_id}: no patches")
        meta = self._meta(rec)
        if cfg.pipeline == BOVW:
            rng = np.random.default_rng(stable_seed(cfg.seed, "words", wsi_id))
            words = sample_words(feats.features, cfg.words_per_wsi, rng)
            prep = PreparedWsi(meta, feats.coords, vectors=words)
            if self.dictionary is not None:
                prep.counts = word_counts(words, self.dictionary)
            return prep
        mosaic = build_mosaic(feats, cfg.mosaic, rec)
        vecs = feats.features[mosaic.indices]
        prep = PreparedWsi(meta, feats.coords[mosaic.indices], vectors=vecs, mosaic_size=len(mosaic))
        if cfg.pipeline in (YOTTIXEL, SISH):
            prep.barcodes = barcode_matrix(vecs)
        if cfg.pipeline == SISH and self.codebook is not None:
            prep.keys = integer_codes(vecs, self.codebook)
        return prep

    def _timed_prepare(self, wsi_id: str):
        t0 = time.perf_counter()
        try:
            prep = self.prepare(wsi_id)
        except WSI_FAILURES as exc:
            return wsi_id, None, str(exc), time.perf_counter() - t0
        return wsi_id, prep, None, time.perf_counter() - t0

    # --- index building -----------------------------------------------------

    def build(self, wsi_ids: Optional[Sequence[str]] = None, workers: int = 1) -> "Engine":
        cfg = self.config
        ids = list(wsi_ids) if wsi_ids is not None else self.manifest.wsi_ids
        t0 = time.perf_counter()
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                results = list(pool.map(self._timed_prepare, ids))
        else:
            results = [self._timed_prepare(w) for w in ids]
        prepared: List[PreparedWsi] = []
        for wsi_id, prep, err, secs in results:
            self.index_seconds[wsi_id] = secs
            if err is not None:
                self.failures[wsi_id] = err
            else:
                prepared.append(prep)
                self.mosaic_sizes[wsi_id] = prep.mosaic_size

        if cfg.pipeline == BOVW:
            if prepared:
                words = np.concatenate([p.vectors for p in prepared])
                self.dictionary = build_dictionary(words, cfg.k_dict, cfg.seed, cfg.dict_train_words)
                for p in prepared:
                    p.counts = word_counts(p.vectors, self.dictionary)
            index = HistogramIndex(self.dictionary.k if self.dictionary is not None else cfg.k_dict)
            for p in prepared:
                index.add(p.meta, p.counts)
        elif cfg.pipeline == YOTTIXEL:
            index = FlatBarcodeIndex(self.manifest.feature_dim - 1)
            for p in prepared:
                index.add(p.meta, p.coords, p.barcodes)
        elif cfg.pipeline == SISH:
            if prepared:
                self.codebook = fit_pooling_codebook(np.concatenate([p.vectors for p in prepared]), cfg.bands)
            index = VebPatchIndex(self.codebook, self.manifest.feature_dim - 1)
            for p in prepared:
                p.keys = integer_codes(p.vectors, self.codebook)
                index.add(p.meta, p.coords, p.keys, p.barcodes)
        else:
            index = CosineIndex(self.manifest.feature_dim)
            for p in prepared:
                index.add(p.meta, p.coords, p.vectors)
        self.index = index
        self.build_seconds = time.perf_counter() - t0
        return self

    # --- querying -----------------------------------------------------------

    def exclusion(self, wsi_id: str, by_patient: bool) -> np.ndarray:
        patient = self.manifest.record(wsi_id).patient_id if by_patient else None
        return self.index.exclusion_mask(wsi_id, patient)

    def query(self, wsi_id: str, k: int = 5, by_patient: bool = False, counter: Optional[OpCounter] = None,
              prepared: Optional[PreparedWsi] = None, trace: Optional[Callable[[dict], None]] = None) -> WsiQueryResult:
        if k < 1:
            raise SearchError("k must be >= 1")
        if self.index is None:
            raise SearchError("engine has not been built")
        prep = prepared if prepared is not None else self.prepare(wsi_id)
        exclude = self.exclusion(wsi_id, by_patient)
        cfg = self.config
        if cfg.pipeline == BOVW:
            hits = knn_chi2(self.index, prep.counts / prep.counts.sum(), k, exclude, counter)
            cands = [Candidate(h.wsi_id, h.label, h.score, DISTANCE) for h in hits]
            return WsiQueryResult(wsi_id, cfg.pipeline, k, cands)
        if cfg.pipeline == YOTTIXEL and not cfg.ranking_enabled:
            return WsiQueryResult(wsi_id, cfg.pipeline, k, self._yottixel_topk(prep.barcodes, k, exclude, counter))
        evidence = self._evidence(prep, exclude, counter)
        return self._aggregate(wsi_id, k, evidence, trace)

    def _yottixel_topk(self, q_codes, k, exclude, counter) -> List[Candidate]:
        idx: FlatBarcodeIndex = self.index
        codes, _, owner = idx._arrays()
        d = hamming(q_codes[:, None, :], codes[None, :, :])
        if counter is not None:
            counter.hamming += d.size
        starts = np.flatnonzero(np.r_[True, owner[1:] != owner[:-1]])
        per_wsi = np.minimum.reduceat(d, starts, axis=1)
        scores = np.median(per_wsi, axis=0)
        wsis = owner[starts]
        keep = ~exclude[wsis]
        order = np.argsort(scores[keep], kind="stable")[:k]
        sel = wsis[keep][order]
        return [Candidate(idx.wsis[w].wsi_id, idx.wsis[w].label, float(s), DISTANCE)
                for w, s in zip(sel, scores[keep][order])]

    def _evidence(self, prep: PreparedWsi, exclude, counter) -> List[PatchEvidence]:
        cfg = self.config
        out = []
        for i, (x, y) in enumerate(prep.coords.tolist()):
            if cfg.pipeline == YOTTIXEL:
                hits = knn_hamming(self.index, prep.barcodes[i], cfg.patch_k, exclude, counter)
                kind = DISTANCE
            elif cfg.pipeline == SISH:
                hits = knn_veb(self.index, int(prep.keys[i]), prep.barcodes[i], cfg.patch_k, cfg.walk_budget,
                               exclude, counter)
                kind = DISTANCE
            else:
                hits = knn_cosine(self.index, prep.vectors[i], cfg.patch_k, exclude, counter)
                kind = SIMILARITY
            if hits:
                out.append(PatchEvidence((x, y), tuple(Neighbor(h.label, h.score, h.wsi_id) for h in hits), kind))
        return out

    def _aggregate(self, wsi_id, k, evidence, trace) -> WsiQueryResult:
        """Turn patch evidence into a ranked WSI list.

        Without ranking every neighbour is one vote for its WSI.  With ranking
        only surviving patches vote; a patch of weight w spreads w over its
        neighbours that carry the patch's majority label.
        """
        cfg = self.config
        if not evidence:
            return WsiQueryResult(wsi_id, cfg.pipeline, k, [], evidence)
        kind = evidence[0].score_kind
        outcome = None
        support: Dict[str, float] = {}
        best: Dict[str, float] = {}
        labels: Dict[str, str] = {}
        if cfg.ranking_enabled:
            outcome = rank_and_label(evidence, len(self.manifest.classes), cfg.p_min, trace)
            for ev, w in zip(outcome.survivors, outcome.weights):
                maj, _ = ev.majority()
                voters = [n for n in ev.neighbors if n.label == maj]
                for n in voters:
                    support[n.wsi_id] = support.get(n.wsi_id, 0.0) + w / len(voters)
            pool = [n for ev in outcome.survivors for n in ev.neighbors]
        else:
            pool = [n for ev in evidence for n in ev.neighbors]
            for n in pool:
                support[n.wsi_id] = support.get(n.wsi_id, 0.0) + 1.0
        for n in pool:
            labels[n.wsi_id] = n.label
            if n.wsi_id not in best or (n.score < best[n.wsi_id] if kind == DISTANCE else n.score > best[n.wsi_id]):
                best[n.wsi_id] = n.score
        order = {w.wsi_id: i for i, w in enumerate(self.index.wsis)}
        sign = 1.0 if kind == DISTANCE else -1.0
        ranked = sorted(support, key=lambda w: (-support[w], sign * best[w], order[w]))
        cands = [Candidate(w, labels[w], support[w], SIMILARITY) for w in ranked[:k]]
        return WsiQueryResult(wsi_id, cfg.pipeline, k, cands, evidence, outcome)


def wsi_topk(engine: Engine, wsi_id: str, k: int, by_patient: bool = False,
             counter: Optional[OpCounter] = None, prepared: Optional[PreparedWsi] = None) -> WsiQueryResult:
    return engine.query(wsi_id, k, by_patient, counter, prepared)


def dump_result(result: WsiQueryResult) -> str:
    return json.dumps(result.to_json(), sort_keys=True)
