"""Reliability binning, expected calibration error, and pseudo-label precision/recall."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .geometry import BBox, iou


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ReliabilityBin:
    lo: float
    hi: float
    count: int
    mean_conf: float  # nan when empty
    precision: float  # nan when empty


@dataclass(frozen=True)
class ReliabilityReport:
    bins: tuple[ReliabilityBin, ...]
    ece: float
    n_bins: int

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["bin_lo", "bin_hi", "count", "mean_conf", "precision"])
            for b in self.bins:
                w.writerow([repr(b.lo), repr(b.hi), b.count, repr(b.mean_conf), repr(b.precision)])
            w.writerow(["ece", repr(self.ece)])


def reliability(confidences, matches, n_bins: int = 15) -> ReliabilityReport:
    """Equal-width reliability bins over [0, 1] and the resulting ECE.

    A confidence ``p`` lands in bin ``floor(p * n_bins)``; ``p == 1`` goes to
    the last bin. Empty bins contribute nothing to the ECE.
    """
    if n_bins < 1:
        raise MetricsError(f"n_bins must be positive, got {n_bins}")
    p = np.asarray(confidences, dtype=float).ravel()
    m = np.asarray(matches, dtype=float).ravel()
    if p.size == 0:
        raise MetricsError("no samples")
    if p.shape != m.shape:
        raise MetricsError("confidences and matches differ in length")
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise MetricsError("confidences must lie in [0, 1]")

    idx = np.minimum((p * n_bins).astype(int), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=p, minlength=n_bins)
    hit_sum = np.bincount(idx, weights=m, minlength=n_bins)

    bins = []
    ece = 0.0
    n = p.size
    for i in range(n_bins):
        c = int(counts[i])
        if c:
            mc = conf_sum[i] / c
            pr = hit_sum[i] / c
            ece += c / n * abs(mc - pr)
        else:
            mc = pr = float("nan")
        bins.append(ReliabilityBin(i / n_bins, (i + 1) / n_bins, c, float(mc), float(pr)))
    return ReliabilityReport(tuple(bins), float(ece), n_bins)


def ece(confidences, matches, n_bins: int = 15) -> float:
    return reliability(confidences, matches, n_bins).ece


class _Boxed(Protocol):
    category: int
    box: BBox


def match_count(pseudo: Sequence[_Boxed], withheld: Sequence[_Boxed], tau_match: float = 0.5) -> int:
    """Greedy one-to-one matches, highest-scoring pseudo labels first."""
    order = sorted(
        range(len(pseudo)),
        key=lambda i: -(getattr(pseudo[i], "score", None) or 0.0),
    )
    used = [False] * len(withheld)
    matched = 0
    for i in order:
        lab = pseudo[i]
        best, best_j = -1.0, -1
        for j, gt in enumerate(withheld):
            if used[j] or gt.category != lab.category:
                continue
            o = iou(lab.box, gt.box)
            if o >= tau_match and o > best:
                best, best_j = o, j
        if best_j >= 0:
            used[best_j] = True
            matched += 1
    return matched


def pseudo_pr(pseudo: Sequence[_Boxed], withheld: Sequence[_Boxed], tau_match: float = 0.5) -> tuple[float, float]:
    """Precision and recall of pseudo labels against the deleted annotations.

    Precision of an empty pseudo set is 1; recall against an empty withheld
    set is 1.
    """
    if not 0.0 < tau_match < 1.0:
        raise MetricsError(f"tau_match must lie in (0, 1), got {tau_match}")
    k = match_count(pseudo, withheld, tau_match)
    precision = k / len(pseudo) if pseudo else 1.0
    recall = k / len(withheld) if withheld else 1.0
    return precision, recall
