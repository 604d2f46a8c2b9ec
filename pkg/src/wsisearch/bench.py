"""Evaluation protocol: leave-one-out retrieval, macro F1, timing, failures, storage, ratings."""
from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .archive import ArchiveManifest, validate_archive
from .index import StorageReport, storage_report
from .search import BOVW, WSI_FAILURES, Engine, EngineConfig, SearchError, majority_vote
from .veb import OpCounter

MODES = ("top1", "mv3", "mv5")
VOTES = {"top1": 1, "mv3": 3, "mv5": 5}
REPORT_SCHEMA = "wsisearch.bench/1"
SEARCH_TIME_SCOPE = "query-side mosaic, encoding and matching"
BOVW_FOLDS = 5
EXTRAPOLATION_WSIS = 10**6

# metric -> True when larger is better
RATING_METRICS = {
    "R_top1": True,
    "R_MV3": True,
    "R_MV5": True,
    "R_idx": False,
    "R_search": False,
    "R_F": False,
    "R_storage": False,
}
TIMING_METRICS = ("R_idx", "R_search")


class BenchError(Exception):
    pass


@dataclass
class MetricsReport:
    mode: str
    per_class: Dict[str, float]
    macro_f1: float
    std: float
    confusion: List[List[int]]

    def to_json(self) -> dict:
        return {"macro_f1": self.macro_f1, "std": self.std, "per_class": self.per_class, "confusion": self.confusion}


@dataclass
class TimingReport:
    T_idx_min: float
    t_idx_mean_s: float
    t_search_mean_s: float
    N_F: int

    def to_json(self) -> dict:
        return {"T_idx_min": self.T_idx_min, "t_idx_mean_s": self.t_idx_mean_s, "t_search_mean_s": self.t_search_mean_s}


@dataclass
class RatingTable:
    engines: List[str]
    ranks: Dict[str, Dict[str, int]]  # engine -> metric -> rank
    composite: Dict[str, float]


@dataclass
class BenchResult:
    config: EngineConfig
    metrics: Dict[str, MetricsReport]
    timing: TimingReport
    storage: StorageReport
    failures: Dict[str, str]
    predictions: Dict[str, Dict[str, str]]
    mosaic_sizes: Dict[str, int] = field(default_factory=dict)
    counters: Dict[str, int] = field(default_factory=dict)


def macro_f1(confusion, classes: Optional[Sequence[str]] = None, mode: str = "top1") -> MetricsReport:
    """Per-class and macro-averaged F1 from a confusion matrix (rows = truth, columns = prediction)."""
    cm = np.asarray(confusion, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise BenchError(f"confusion matrix must be square, got shape {cm.shape}")
    if cm.shape[0] < 2:
        raise BenchError("macro F1 needs at least 2 classes")
    names = list(classes) if classes is not None else [str(i) for i in range(len(cm))]
    tp = np.diag(cm).astype(np.float64)
    pred = cm.sum(axis=0)
    true = cm.sum(axis=1)
    f1 = {}
    for i, name in enumerate(names):
        p = tp[i] / pred[i] if pred[i] else 0.0
        r = tp[i] / true[i] if true[i] else 0.0
        f1[name] = 2 * p * r / (p + r) if p + r else 0.0
    vals = np.array(list(f1.values()))
    return MetricsReport(mode, f1, float(vals.mean()), float(vals.std()), cm.tolist())


def confusion_matrix(truth: Sequence[str], predicted: Sequence[str], classes: Sequence[str]) -> np.ndarray:
    pos = {c: i for i, c in enumerate(classes)}
    cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(truth, predicted):
        cm[pos[t], pos[p]] += 1
    return cm


def _median_time(fn: Callable, repeats: int):
    times, value = [], None
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        value = fn()
        times.append(time.perf_counter() - t0)
    return value, statistics.median(times)


def _patient_folds(manifest: ArchiveManifest, ids: Sequence[str], n_folds: int, seed: int) -> List[List[str]]:
    patients = sorted({manifest.record(w).patient_id for w in ids})
    rng = np.random.default_rng(seed)
    order = [patients[i] for i in rng.permutation(len(patients))]
    n_folds = max(2, min(n_folds, len(patients)))
    fold_of = {p: i % n_folds for i, p in enumerate(order)}
    folds: List[List[str]] = [[] for _ in range(n_folds)]
    for w in ids:
        folds[fold_of[manifest.record(w).patient_id]].append(w)
    return folds


def run_leave_one_out(manifest: ArchiveManifest, config: EngineConfig, mode: str = "wsi", k: int = 5,
                      workers: int = 1, repeats: int = 1, trace: Optional[Callable[[dict], None]] = None,
                      validate: bool = True, counter_sink: Optional[Callable] = None) -> BenchResult:
    """Evaluate one engine configuration over the whole archive.

    The index is built once and every query excludes itself (and, in patient
    mode, its patient's other WSIs).  BoVW instead runs patient-grouped
    5-fold cross-validation with the dictionary fitted on each training split.
    Failed WSIs are counted and left out of the metrics.
    """
    if mode not in ("wsi", "patient"):
        raise BenchError(f"unknown mode {mode!r}")
    if validate:
        problems = validate_archive(manifest, check_store=False)
        if problems:
            raise BenchError("archive invalid: " + "; ".join(problems))
    by_patient = mode == "patient"
    if by_patient and len({r.patient_id for r in manifest.records}) < 2:
        raise BenchError("patient mode needs at least 2 patients")

    def build_full():
        return Engine(config, manifest).build(workers=workers)

    engine, build_secs = _median_time(build_full, repeats)
    failures = dict(engine.failures)
    usable = [w for w in manifest.wsi_ids if w not in failures]

    if config.pipeline == BOVW:
        plan = []
        for fold in _patient_folds(manifest, usable, BOVW_FOLDS, config.seed):
            train = [w for w in usable if w not in set(fold)]
            plan.append((Engine(config, manifest).build(train, workers=workers), fold))
    else:
        plan = [(engine, usable)]

    predictions: Dict[str, Dict[str, str]] = {}
    search_times: List[float] = []
    totals = {"hamming": 0, "tree_walks": 0, "candidates": 0, "queries": 0}
    for fold_engine, queries in plan:
        for wsi_id in queries:
            def one_query():
                c = OpCounter()
                prep = fold_engine.prepare(wsi_id)
                return fold_engine.query(wsi_id, k, by_patient, counter=c, prepared=prep, trace=trace), c
            try:
                (result, counter), secs = _median_time(one_query, repeats)
                preds = {m: majority_vote(result, VOTES[m]) for m in MODES}
            except WSI_FAILURES + (SearchError,) as exc:
                failures[wsi_id] = str(exc)
                continue
            if counter_sink is not None:
                counter_sink(wsi_id, result, counter)
            totals["hamming"] += counter.hamming
            totals["tree_walks"] += counter.tree_walks
            totals["candidates"] += counter.candidates
            totals["queries"] += 1
            predictions[wsi_id] = preds
            search_times.append(secs)

    classes = manifest.classes
    scored = [w for w in manifest.wsi_ids if w in predictions]
    truth = [manifest.record(w).label for w in scored]
    metrics = {
        m: macro_f1(confusion_matrix(truth, [predictions[w][m] for w in scored], classes), classes, m)
        for m in MODES
    }
    idx_times = [s for w, s in engine.index_seconds.items() if w not in engine.failures]
    timing = TimingReport(
        T_idx_min=build_secs / 60.0,
        t_idx_mean_s=float(np.mean(idx_times)) if idx_times else 0.0,
        t_search_mean_s=float(np.mean(search_times)) if search_times else 0.0,
        N_F=len(failures),
    )
    return BenchResult(config, metrics, timing, storage_report(engine.index), dict(sorted(failures.items())),
                       predictions, dict(engine.mosaic_sizes), totals)


def overall_rating(values: Dict[str, Dict[str, float]], directions: Optional[Dict[str, bool]] = None) -> RatingTable:
    """Rank engines per metric (1 = best, ties share the lower rank) and average the ranks."""
    directions = directions or RATING_METRICS
    engines = list(values)
    metrics = list(directions) if not engines else [m for m in directions if m in values[engines[0]]]
    for e in engines:
        missing = [m for m in metrics if m not in values[e] or values[e][m] is None]
        if missing:
            raise BenchError(f"engine {e!r} has no value for {', '.join(missing)}")
    ranks: Dict[str, Dict[str, int]] = {e: {} for e in engines}
    for m in metrics:
        higher = directions[m]
        for e in engines:
            v = values[e][m]
            better = sum(1 for o in engines if (values[o][m] > v if higher else values[o][m] < v))
            ranks[e][m] = better + 1
    composite = {e: (sum(ranks[e].values()) / len(metrics) if metrics else 0.0) for e in engines}
    return RatingTable(engines, ranks, composite)


def composite_rating(ranks: Sequence[float]) -> float:
    """R* = mean of the individual ratings."""
    if not ranks:
        raise BenchError("no ratings")
    return sum(ranks) / len(ranks)


def storage_benchmark(reports: Dict[str, StorageReport]) -> Dict[str, dict]:
    out = {}
    for name, rep in reports.items():
        entry = rep.to_json()
        entry["extrapolated_1e6_bytes"] = rep.per_wsi_bytes * EXTRAPOLATION_WSIS
        out[name] = entry
    return out


def build_report(results: Sequence[BenchResult], manifest: ArchiveManifest, mode: str, k: int = 5,
                 timing: bool = True, repeats: int = 1, seed: int = 0) -> dict:
    storage = storage_benchmark({r.config.name: r.storage for r in results})
    values = {}
    for r in results:
        v = {
            "R_top1": r.metrics["top1"].macro_f1,
            "R_MV3": r.metrics["mv3"].macro_f1,
            "R_MV5": r.metrics["mv5"].macro_f1,
            "R_F": r.timing.N_F,
            "R_storage": r.storage.per_wsi_bytes,
        }
        if timing:
            v["R_idx"] = r.timing.t_idx_mean_s
            v["R_search"] = r.timing.t_search_mean_s
        values[r.config.name] = v
    directions = {m: d for m, d in RATING_METRICS.items() if timing or m not in TIMING_METRICS}
    rating = overall_rating(values, directions)
    engines = []
    for r in results:
        name = r.config.name
        sizes = list(r.mosaic_sizes.values())
        engines.append({
            "engine": name,
            "config": r.config.to_json(),
            "metrics": {m: r.metrics[m].to_json() for m in MODES},
            "timing": r.timing.to_json() if timing else None,
            "failures": {"N_F": r.timing.N_F, "wsi_ids": list(r.failures)},
            "storage": storage[name],
            "mosaic_mean_size": float(np.mean(sizes)) if sizes else None,
            "ranks": rating.ranks[name],
            "R_star": rating.composite[name],
            "predictions": {w: r.predictions[w] for w in sorted(r.predictions)},
        })
    return {
        "schema": REPORT_SCHEMA,
        "meta": {
            "mode": mode,
            "k": k,
            "seed": seed,
            "timing": timing,
            "repeats": repeats,
            "search_time_scope": SEARCH_TIME_SCOPE,
            "classes": list(manifest.classes),
            "wsi_count": len(manifest.records),
            "rating_metrics": list(directions),
        },
        "engines": engines,
    }


TABLE_COLUMNS = ("engine", "F1_top1", "F1_MV3", "F1_MV5", "T_idx_min", "t_idx_s", "t_search_s", "N_F",
                 "bytes_per_WSI", "S_1e6_bytes", "R_star")


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4g}" if abs(v) >= 1e4 or (v and abs(v) < 1e-3) else f"{v:.3f}"
    return str(v)


def render_table(report: dict) -> str:
    rows = [list(TABLE_COLUMNS)]
    for e in report.get("engines", []):
        t = e.get("timing") or {}
        m = e["metrics"]
        rows.append([
            e["engine"],
            _fmt(m["top1"]["macro_f1"]),
            _fmt(m["mv3"]["macro_f1"]),
            _fmt(m["mv5"]["macro_f1"]),
            _fmt(t.get("T_idx_min")),
            _fmt(t.get("t_idx_mean_s")),
            _fmt(t.get("t_search_mean_s")),
            _fmt(e["failures"]["N_F"]),
            _fmt(float(e["storage"]["per_wsi_bytes"])),
            _fmt(float(e["storage"]["extrapolated_1e6_bytes"])),
            _fmt(float(e["R_star"])),
        ])
    widths = [max(len(r[i]) for r in rows) for i in range(len(TABLE_COLUMNS))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def emit_report(report: dict, fmt: str = "json") -> str:
    if fmt == "json":
        return json.dumps(report, indent=1, sort_keys=True) + "\n"
    if fmt == "table":
        return render_table(report)
    raise BenchError(f"unknown format {fmt!r}")
