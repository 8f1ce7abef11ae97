"""Overlap and boundary-distance metrics for binary segmentation masks."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

HD_PERCENTILE = 95.0


def _binary_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def dice_score(pred, gt) -> float:
    """2|P∩G| / (|P|+|G|); two empty masks score 1."""
    p, g = _binary_pair(pred, gt)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def iou_score(pred, gt) -> float:
    """|P∩G| / |P∪G|; two empty masks score 1."""
    p, g = _binary_pair(pred, gt)
    union = int(np.logical_or(p, g).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(p, g).sum()) / union


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a background 4-neighbour; outside the image is background."""
    m = np.pad(np.asarray(mask).astype(bool), 1)
    core = m[1:-1, 1:-1]
    interior = m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return core & ~interior


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    # Euclidean distance from every src boundary pixel to the nearest dst boundary pixel
    dist = ndimage.distance_transform_edt(~dst)
    return dist[src]


def hd95(pred, gt) -> float | None:
    """Symmetric 95th-percentile boundary Hausdorff distance in pixels.

    Returns None when either mask is empty. Percentiles interpolate linearly
    between order statistics.
    """
    p, g = _binary_pair(pred, gt)
    if not p.any() or not g.any():
        return None
    bp, bg = boundary(p), boundary(g)
    return float(max(np.percentile(_directed(bp, bg), HD_PERCENTILE),
                     np.percentile(_directed(bg, bp), HD_PERCENTILE)))


@dataclass
class SampleScore:
    id: str
    dice: float
    iou: float
    hd95: float | None


@dataclass
class EvalReport:
    foreground: int = 1
    samples: list[SampleScore] = field(default_factory=list)

    def add(self, sample_id: str, pred: np.ndarray, gt: np.ndarray) -> SampleScore:
        p, g = np.asarray(pred) == self.foreground, np.asarray(gt) == self.foreground
        score = SampleScore(sample_id, dice_score(p, g), iou_score(p, g), hd95(p, g))
        self.samples.append(score)
        return score

    @property
    def count(self) -> int:
        return len(self.samples)

    def _values(self, key):
        return [getattr(s, key) for s in self.samples if getattr(s, key) is not None]

    def mean(self, key: str) -> float:
        vals = self._values(key)
        return float(np.mean(vals)) if vals else math.nan

    def std(self, key: str) -> float:
        vals = self._values(key)
        return float(np.std(vals)) if vals else math.nan

    @property
    def hd95_undefined(self) -> int:
        return sum(s.hd95 is None for s in self.samples)

    def write_csv(self, path) -> None:
        def fmt(v):
            return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"

        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "dice", "iou", "hd95"])
            for s in self.samples:
                w.writerow([s.id, fmt(s.dice), fmt(s.iou), fmt(s.hd95)])
            w.writerow(["mean", fmt(self.mean("dice")), fmt(self.mean("iou")), fmt(self.mean("hd95"))])
            w.writerow(["std", fmt(self.std("dice")), fmt(self.std("iou")), fmt(self.std("hd95"))])
            w.writerow(["count", self.count, self.count, self.count - self.hd95_undefined])
