"""Grounding post-processing and retrieval metrics.

Predictions are lists of ``(span, score)`` with spans in seconds, sorted by
descending score.  All metric functions are pure and order-independent
over the sample list.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .losses import iou
from .moment_map import moment_to_span, valid_mask

Span = tuple[float, float]
Ranked = list[tuple[Span, float]]

RECALL_KS = (1, 5)
RECALL_IOUS = (0.3, 0.5, 0.7)


class UndefinedMetricError(ValueError):
    pass


class ProtocolError(ValueError):
    pass


def rank_moments(score_map, duration: float) -> Ranked:
    """All valid moments as second-spans, best first; ties by lowest ``(i, j)``."""
    vals = np.asarray(getattr(score_map, "values", score_map), dtype=np.float64)
    n = vals.shape[-1]
    ii, jj = np.nonzero(valid_mask(n))  # already lexicographic
    scores = vals[ii, jj]
    order = np.argsort(-scores, kind="stable")
    return [(moment_to_span(int(ii[o]), int(jj[o]), duration, n), float(scores[o])) for o in order]


def nms(pred: Ranked, iou_thresh: float = 0.5) -> Ranked:
    """Greedy suppression of spans overlapping a kept span by more than ``iou_thresh``."""
    if not 0.0 <= iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must lie in [0, 1], got {iou_thresh}")
    kept: Ranked = []
    for span, score in pred:
        if all(iou(span, k) <= iou_thresh for k, _ in kept):
            kept.append((span, score))
    return kept


def _best_iou(span: Span, gt) -> float:
    """IoU against one span, or against a list of annotator spans (best match)."""
    if gt and isinstance(gt[0], (tuple, list)):
        return max(iou(span, g) for g in gt)
    return iou(span, gt)


def recall_at_k(samples: Sequence[tuple[Ranked, Span]], k: int, iou_thresh: float) -> float:
    """Percent of samples with a top-``k`` span reaching ``iou_thresh`` against ground truth."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not samples:
        raise UndefinedMetricError("recall on an empty sample list")
    hits = sum(any(_best_iou(span, gt) >= iou_thresh for span, _ in pred[:k])
               for pred, gt in samples)
    return 100.0 * hits / len(samples)


def best_matched_three(spans: Sequence[Span]) -> list[Span]:
    """The three annotator spans with maximal pairwise IoU sum (all of them if fewer).

    Subsets are enumerated in index order; the first maximal one wins.
    """
    spans = list(spans)
    if len(spans) <= 3:
        return spans
    best, best_sum = None, -1.0
    for trio in itertools.combinations(range(len(spans)), 3):
        s = sum(iou(spans[a], spans[b]) for a, b in itertools.combinations(trio, 2))
        if s > best_sum:
            best, best_sum = trio, s
    return [spans[t] for t in best]


def mean_iou(samples: Sequence[tuple[Ranked, object]]) -> float:
    """Mean top-1 IoU in percent.

    Ground truth is a single span, or a list of annotator spans in which case
    the top-1 span is scored by its mean IoU over the best-matched three.
    """
    if not samples:
        raise UndefinedMetricError("mIoU on an empty sample list")
    parts = []
    for pred, gt in samples:
        top = pred[0][0]
        if gt and isinstance(gt[0], (tuple, list)):
            trio = best_matched_three(gt)
            parts.append(math.fsum(iou(top, g) for g in trio) / len(trio))
        else:
            parts.append(iou(top, gt))
    # fsum is exact, so the result does not depend on sample order
    return 100.0 * math.fsum(parts) / len(samples)


def didemo_candidates(n: int = 6) -> list[tuple[int, int]]:
    """The 21 ``(start, end)`` clip combinations of a 6-segment video."""
    return [(i, j) for i in range(n) for j in range(i, n)]


def didemo_rank_at_k(ranked: Sequence[tuple[int, int]], annotations: Sequence[tuple[int, int]],
                     k: int) -> bool:
    """Hit when the best-matched three annotations have mean 1-based rank <= ``k``.

    ``ranked`` orders all 21 candidates (clip-index pairs, inclusive), best
    first.  Annotations with fewer than three entries use all of them.
    """
    cands = didemo_candidates()
    if sorted(map(tuple, ranked)) != sorted(cands):
        raise ProtocolError("prediction must rank exactly the 21 fixed candidates")
    pos = {tuple(c): r + 1 for r, c in enumerate(ranked)}
    for a in annotations:
        if tuple(a) not in pos:
            raise ProtocolError(f"annotation {a} is not one of the 21 candidates")
    if not annotations:
        raise ProtocolError("no annotations")
    trio = best_matched_three([(a, b + 1) for a, b in annotations])
    ranks = [pos[(s, e - 1)] for s, e in trio]
    return sum(ranks) / len(ranks) <= k


@dataclass
class MetricsReport:
    """Metric table keyed by ``(name, k, iou)`` with percentages as values."""

    values: dict[tuple[str, int, float], float] = field(default_factory=dict)
    miou: float = float("nan")
    count: int = 0
    fingerprint: str = ""
    notes: dict[str, object] = field(default_factory=dict)

    def recall(self, k: int, thr: float) -> float:
        return self.values[("R", k, thr)]

    def rows(self) -> list[tuple[str, str, str, float]]:
        out = [(name, str(k), f"{thr:g}", v) for (name, k, thr), v in sorted(self.values.items())]
        out.append(("mIoU", "", "", self.miou))
        out.append(("count", "", "", float(self.count)))
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# fingerprint={self.fingerprint}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "k", "iou", "value"])
            for name, k, thr, v in self.rows():
                w.writerow([name, k, thr, format(v, ".6f")])

    def to_dict(self) -> dict:
        return {
            "fingerprint": self.fingerprint,
            "count": self.count,
            "mIoU": self.miou,
            "recall": [{"metric": n, "k": k, "iou": t, "value": v}
                       for (n, k, t), v in sorted(self.values.items())],
            "notes": self.notes,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def summary(self) -> str:
        parts = [f"R@{k} IoU={t:g}: {v:.2f}" for (_, k, t), v in sorted(self.values.items())]
        return " | ".join(parts + [f"mIoU: {self.miou:.2f}", f"n={self.count}"])


def compute_report(samples: Sequence[tuple[Ranked, Span]], ks=RECALL_KS, ious=RECALL_IOUS,
                   fingerprint: str = "") -> MetricsReport:
    rep = MetricsReport(fingerprint=fingerprint, count=len(samples))
    for k in ks:
        for t in ious:
            rep.values[("R", k, t)] = recall_at_k(samples, k, t)
    rep.miou = mean_iou(samples)
    return rep
