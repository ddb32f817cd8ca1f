"""Soft precision/recall/F1 per pixel and per cell centroid."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
from scipy import ndimage

from .labels import CLASS_NAMES, NUM_CLASSES, POSITIVE_CLASSES

REPORT_COLUMNS = ("class", "regime", "split", "precision", "recall", "f1")
AVERAGE_ROW = "Avg."


@dataclass
class SoftConfusion:
    tp: float = 0.0
    tn: float = 0.0
    fp: float = 0.0
    fn: float = 0.0

    def __add__(self, other: "SoftConfusion") -> "SoftConfusion":
        return SoftConfusion(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


def soft_confusion(tau, rho) -> SoftConfusion:
    """Soft confusion sums of a binary target map and a probability map."""
    tau = np.asarray(tau, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    if tau.shape != rho.shape:
        raise ValueError(f"target {tau.shape} and prediction {rho.shape} differ in shape")
    return SoftConfusion(
        tp=float(np.sum(tau * rho)),
        tn=float(np.sum((1 - tau) * (1 - rho))),
        fp=float(np.sum(rho * (1 - tau))),
        fn=float(np.sum(tau * (1 - rho))),
    )


def prf(c: SoftConfusion) -> tuple[float, float, float]:
    """Precision, recall and F1.

    With no positives and nothing predicted the score is (1, 1, 1); when only
    one denominator vanishes that metric is 0.
    """
    pd, rd = c.tp + c.fp, c.tp + c.fn
    if pd == 0 and rd == 0:
        return 1.0, 1.0, 1.0
    p = c.tp / pd if pd > 0 else 0.0
    r = c.tp / rd if rd > 0 else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def extract_centroids(labelmap, cls: int) -> list[tuple[int, int]]:
    """Rounded (x, y) centroids of the 4-connected components of one class."""
    comps, n = ndimage.label(np.asarray(labelmap) == cls)
    if n == 0:
        return []
    centres = ndimage.center_of_mass(np.ones_like(comps), comps, range(1, n + 1))
    return [(int(np.floor(cx + 0.5)), int(np.floor(cy + 0.5))) for cy, cx in centres]


def centroid_counts(gt, pred, cls: int) -> SoftConfusion:
    """Integer tp/fp/fn judged at component centroids (tn is left at 0)."""
    gt, pred = np.asarray(gt), np.asarray(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"ground truth {gt.shape} and prediction {pred.shape} differ in shape")
    tp = fn = fp = 0
    for x, y in extract_centroids(gt, cls):
        if pred[y, x] == cls:
            tp += 1
        else:
            fn += 1
    for x, y in extract_centroids(pred, cls):
        if gt[y, x] != cls:
            fp += 1
    return SoftConfusion(tp=tp, fp=fp, fn=fn)


@dataclass
class MetricReport:
    regime: str  # "per-pixel" | "per-centroid"
    split: str = "test"
    scores: dict = field(default_factory=dict)  # class name -> (P, R, F1)
    average_over: tuple = tuple(CLASS_NAMES[c] for c in POSITIVE_CLASSES)

    @property
    def average(self) -> tuple[float, float, float]:
        vals = np.array([self.scores[n] for n in self.average_over], dtype=np.float64)
        return tuple(float(v) for v in vals.mean(axis=0))

    def rows(self) -> list[tuple]:
        rows = [(name, self.regime, self.split, *self.scores[name]) for name in CLASS_NAMES if name in self.scores]
        rows.append((AVERAGE_ROW, self.regime, self.split, *self.average))
        return rows


def centroid_metrics(gt, pred, split: str = "test") -> MetricReport:
    """Per-centroid report for a single (ground truth, prediction) pair."""
    acc = CentroidAccumulator()
    acc.update(gt, pred)
    return acc.report(split)


class PixelAccumulator:
    """Sums per-class soft confusions over many patches before taking ratios."""

    def __init__(self, num_classes: int = NUM_CLASSES):
        self.conf = [SoftConfusion() for _ in range(num_classes)]

    def update(self, gt, probs) -> None:
        """``probs`` is ``(C, H, W)``: softmax outputs, or one-hot maps for hard scoring."""
        gt = np.asarray(gt)
        for c in range(len(self.conf)):
            self.conf[c] = self.conf[c] + soft_confusion(gt == c, probs[c])

    def report(self, split: str = "test") -> MetricReport:
        return MetricReport("per-pixel", split, {CLASS_NAMES[c]: prf(k) for c, k in enumerate(self.conf)})


class CentroidAccumulator:
    def __init__(self, num_classes: int = NUM_CLASSES):
        self.conf = [SoftConfusion() for _ in range(num_classes)]

    def update(self, gt, pred) -> None:
        for c in range(len(self.conf)):
            self.conf[c] = self.conf[c] + centroid_counts(gt, pred, c)

    def report(self, split: str = "test") -> MetricReport:
        return MetricReport("per-centroid", split, {CLASS_NAMES[c]: prf(k) for c, k in enumerate(self.conf)})


def one_hot(labels, num_classes: int = NUM_CLASSES) -> np.ndarray:
    labels = np.asarray(labels)
    return (np.arange(num_classes).reshape(-1, *([1] * labels.ndim)) == labels[None]).astype(np.float64)


def evaluate(gts: Iterable, probs: Iterable, split: str = "test", hard: bool = False) -> tuple[MetricReport, MetricReport]:
    """Per-pixel and per-centroid reports over paired (gt, probability map) sequences."""
    pix, cen = PixelAccumulator(), CentroidAccumulator()
    for gt, p in zip(gts, probs):
        p = np.asarray(p)
        pred = np.argmax(p, axis=0)
        pix.update(gt, one_hot(pred, p.shape[0]) if hard else p)
        cen.update(gt, pred)
    return pix.report(split), cen.report(split)


def format_report(reports: Iterable[MetricReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for rep in reports:
        for name, regime, split, p, r, f in rep.rows():
            writer.writerow([name, regime, split, f"{p:.6f}", f"{r:.6f}", f"{f:.6f}"])
    return buf.getvalue()


def parse_report(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    for row in rows:
        for k in ("precision", "recall", "f1"):
            row[k] = float(row[k])
    return rows
