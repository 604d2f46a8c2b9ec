"""Post-search ranking over per-patch evidence.

Three stages run in order: `clean` drops outlier patches and weak neighbours,
`filter_by_prediction` drops patches whose neighbours disagree too much, and
`weighted_uncertainty` weights each survivor by how peaked its neighbour
label distribution is.  The final label is the weighted vote.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

DISTANCE = "distance"
SIMILARITY = "similarity"


@dataclass(frozen=True)
class Neighbor:
    label: str
    score: float
    wsi_id: str


@dataclass(frozen=True)
class PatchEvidence:
    patch: object  # PatchRef or any identifier of the query patch
    neighbors: tuple  # of Neighbor, best first
    score_kind: str = DISTANCE

    def best_score(self) -> float:
        scores = [n.score for n in self.neighbors]
        return min(scores) if self.score_kind == DISTANCE else max(scores)

    def majority(self):
        """(label, empirical probability); ties go to the label of the best-ranked neighbour."""
        counts = Counter(n.label for n in self.neighbors)
        top = max(counts.values())
        for n in self.neighbors:
            if counts[n.label] == top:
                return n.label, top / len(self.neighbors)
        raise ValueError("empty evidence")


@dataclass
class RankedOutcome:
    label: str
    weights: List[float]
    survivors: List[PatchEvidence]
    trace: List[dict] = field(default_factory=list)


def _better(a: float, b: float, kind: str) -> bool:
    return a < b if kind == DISTANCE else a > b


def _tol(x: float) -> float:
    # absorbs rounding in means of identical scores
    return 1e-12 * max(1.0, abs(x))


def weighted_uncertainty(ev: PatchEvidence, class_count: int) -> float:
    """1 - H/ln(C) for the neighbour label distribution (natural log)."""
    if not ev.neighbors:
        raise ValueError("weighted_uncertainty needs at least one neighbour")
    if class_count < 2:
        raise ValueError("class_count must be >= 2")
    counts = np.array(list(Counter(n.label for n in ev.neighbors).values()), dtype=np.float64)
    p = counts / counts.sum()
    h = float(-(p * np.log(p)).sum())
    return min(1.0, max(0.0, 1.0 - h / math.log(class_count)))


def clean(evidence: Sequence[PatchEvidence], score_kind: Optional[str] = None) -> List[PatchEvidence]:
    """Drop patches whose best score is more than one std worse than the mean,
    then drop neighbours worse than their patch's mean neighbour score."""
    if not evidence:
        raise ValueError("clean needs at least one patch")
    kind = score_kind or evidence[0].score_kind
    best = np.array([ev.best_score() for ev in evidence])
    mu, sigma = best.mean(), best.std()
    if kind == DISTANCE:
        keep = best <= mu + sigma + _tol(mu)
    else:
        keep = best >= mu - sigma - _tol(mu)
    keep[int(np.argmin(best) if kind == DISTANCE else np.argmax(best))] = True
    out = []
    for ev, k in zip(evidence, keep):
        if not k:
            continue
        mean_score = float(np.mean([n.score for n in ev.neighbors]))
        slack = _tol(mean_score) if kind == DISTANCE else -_tol(mean_score)
        kept = tuple(n for n in ev.neighbors if not _better(mean_score + slack, n.score, kind))
        out.append(replace(ev, neighbors=kept))
    return out


def filter_by_prediction(evidence: Sequence[PatchEvidence], p_min: float = 0.5) -> List[PatchEvidence]:
    if not evidence:
        return []
    probs = [ev.majority()[1] for ev in evidence]
    kept = [ev for ev, p in zip(evidence, probs) if p >= p_min]
    if kept:
        return kept
    return [evidence[int(np.argmax(probs))]]


def rank_and_label(evidence: Sequence[PatchEvidence], class_count: int, p_min: float = 0.5,
                   trace: Optional[Callable[[dict], None]] = None) -> RankedOutcome:
    if not evidence:
        raise ValueError("rank_and_label needs at least one patch")
    kind = evidence[0].score_kind
    log: List[dict] = []

    def emit(entry):
        log.append(entry)
        if trace is not None:
            trace(entry)

    cleaned = clean(evidence, kind)
    emit({"stage": "clean", "in": len(evidence), "out": len(cleaned),
          "kept": [str(ev.patch) for ev in cleaned]})
    survivors = filter_by_prediction(cleaned, p_min)
    emit({"stage": "filter_by_prediction", "in": len(cleaned), "out": len(survivors), "p_min": p_min})
    weights = [weighted_uncertainty(ev, class_count) for ev in survivors]
    emit({"stage": "weighted_uncertainty", "weights": weights})

    totals: dict = {}
    best: dict = {}
    for ev, w in zip(survivors, weights):
        label, _ = ev.majority()
        totals[label] = totals.get(label, 0.0) + w
        s = ev.best_score()
        if label not in best or _better(s, best[label], kind):
            best[label] = s
    top = max(totals.values())
    tied = [lab for lab, t in totals.items() if t == top]
    label = tied[0]
    for lab in tied[1:]:
        if _better(best[lab], best[label], kind):
            label = lab
    emit({"stage": "label", "totals": totals, "label": label})
    return RankedOutcome(label, weights, list(survivors), log)


def trace_writer(stream) -> Callable[[dict], None]:
    def write(entry: dict) -> None:
        stream.write(json.dumps(entry, sort_keys=True) + "\n")

    return write
