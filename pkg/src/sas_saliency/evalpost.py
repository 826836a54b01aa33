"""Box extraction from saliency maps and segmentation/detection metrics.

Metric conventions:

* MAP (segmentation): area under the precision-recall curve traced by the 256
  thresholds ``k / 255`` with ``pred >= t`` counted positive, as a step sum.
* AFM: F-measure with beta^2 = 0.3 at the adaptive threshold
  ``T = min(2 * mean(pred), 0.9)`` with ``pred > T`` positive.
* IAAE: one minus the mean absolute error.
* AIOU: mean IoU over the greedily matched (prediction, truth) box pairs.
* MAP (detection): all-point interpolated average precision at IoU 0.5.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from skimage.morphology import disk

BETA2 = 0.3
EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class DetectionBox:
    """Pixel bounds, rows/cols inclusive-exclusive."""

    row0: int
    col0: int
    row1: int
    col1: int
    score: float = 1.0

    def __post_init__(self):
        if not (self.row0 < self.row1 and self.col0 < self.col1):
            raise ValueError(f"empty box {self}")

    @property
    def area(self) -> int:
        return (self.row1 - self.row0) * (self.col1 - self.col0)


def adaptive_threshold(saliency: np.ndarray) -> float:
    return min(2.0 * float(np.mean(saliency)), 0.9)


def _component_boxes(binary: np.ndarray, values: np.ndarray | None, min_area: float) -> list[DetectionBox]:
    comp, n = ndimage.label(binary, structure=EIGHT)
    boxes = []
    for lab, sl in enumerate(ndimage.find_objects(comp), start=1):
        if sl is None:
            continue
        if np.count_nonzero(comp[sl] == lab) < min_area:
            continue
        score = float(values[sl].mean()) if values is not None else 1.0
        boxes.append(DetectionBox(sl[0].start, sl[1].start, sl[0].stop, sl[1].stop, score))
    return boxes


def extract_boxes(saliency: np.ndarray, min_area_frac: float = 0.002, morph_radius: int = 1) -> list[DetectionBox]:
    """Threshold, open, and box each surviving 8-connected component.

    Opening only decides which components survive: a component is kept whole
    when any part of it outlasts the opening, so a clean binary map boxes
    exactly like its own mask. A box's score is the mean saliency inside it.
    """
    sal = np.asarray(saliency, dtype=np.float64)
    binary = sal > adaptive_threshold(sal)
    if morph_radius > 0:
        opened = ndimage.binary_opening(binary, structure=disk(morph_radius))
        comp, _ = ndimage.label(binary, structure=EIGHT)
        binary = np.isin(comp, np.unique(comp[opened]))
    return _component_boxes(binary, sal, min_area_frac * sal.size)


def mask_boxes(mask: np.ndarray) -> list[DetectionBox]:
    """Tight boxes around each 8-connected component of a binary mask."""
    return _component_boxes(np.asarray(mask) > 0, None, 1)


def box_iou(a: DetectionBox, b: DetectionBox) -> float:
    dr = min(a.row1, b.row1) - max(a.row0, b.row0)
    dc = min(a.col1, b.col1) - max(a.col0, b.col0)
    inter = max(dr, 0) * max(dc, 0)
    return inter / (a.area + b.area - inter)


def precision_recall_curve(pred: np.ndarray, truth: np.ndarray, n_thresholds: int = 256):
    """Precision and recall at thresholds ``k / (n - 1)``; precision is 1 when nothing is predicted."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth).ravel() > 0
    thr = np.arange(n_thresholds) / (n_thresholds - 1)
    # counts of predictions >= each threshold, via sorted search
    order = np.sort(p)
    pos = np.sort(p[t])
    n_pred = p.size - np.searchsorted(order, thr, side="left")
    tp = pos.size - np.searchsorted(pos, thr, side="left")
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(n_pred > 0, tp / np.maximum(n_pred, 1), 1.0)
    recall = tp / t.sum() if t.any() else np.full(thr.shape, np.nan)
    return thr, precision, recall


def average_precision_seg(pred, truth) -> float:
    _, precision, recall = precision_recall_curve(pred, truth)
    if np.isnan(recall).any():
        return float("nan")
    r_next = np.append(recall[1:], 0.0)
    return float(np.sum((recall - r_next) * precision))


def f_measure(pred, truth, beta2: float = BETA2) -> float:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth) > 0
    if not t.any():
        return float("nan")
    binary = p > adaptive_threshold(p)
    tp = np.count_nonzero(binary & t)
    prec = tp / binary.sum() if binary.any() else 0.0
    rec = tp / t.sum()
    if prec + rec == 0:
        return 0.0
    return float((1 + beta2) * prec * rec / (beta2 * prec + rec))


def iaae(pred, truth) -> float:
    return float(1.0 - np.mean(np.abs(np.asarray(pred, dtype=np.float64) - (np.asarray(truth) > 0))))


def segmentation_metrics(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float, float]:
    """(MAP, AFM, IAAE); the first two are NaN for an empty truth mask."""
    if np.shape(pred) != np.shape(truth):
        raise ValueError("prediction and mask differ in shape")
    return average_precision_seg(pred, truth), f_measure(pred, truth), iaae(pred, truth)


def greedy_match(boxes: Sequence[DetectionBox], truths: Sequence[DetectionBox], min_iou: float = 0.0):
    """One-to-one matching by descending score; each box takes its best free truth.

    Returns (box index, truth index, IoU) for matches with IoU > ``min_iou``
    (or >= when ``min_iou`` is positive, as detection thresholds are inclusive).
    """
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    free = set(range(len(truths)))
    pairs = []
    for i in order:
        best, best_iou = None, 0.0
        for j in sorted(free):
            iou = box_iou(boxes[i], truths[j])
            if iou > best_iou:
                best, best_iou = j, iou
        ok = best is not None and (best_iou >= min_iou if min_iou > 0 else best_iou > 0)
        if ok:
            free.discard(best)
            pairs.append((i, best, best_iou))
    return pairs


def detection_average_precision(boxes, truths, iou_threshold: float = 0.5) -> float:
    if not truths:
        return float("nan")
    if not boxes:
        return 0.0
    pairs = greedy_match(boxes, truths, iou_threshold)
    hit = {i for i, _, _ in pairs}
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    tp = np.cumsum([i in hit for i in order])
    precision = tp / np.arange(1, len(order) + 1)
    recall = tp / len(truths)
    # all-point interpolation: precision envelope over recall steps
    env = np.maximum.accumulate(precision[::-1])[::-1]
    r_prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - r_prev) * env))


def detection_metrics(boxes: Sequence[DetectionBox], truth_boxes: Sequence[DetectionBox],
                      iou_threshold: float = 0.5) -> tuple[float, float]:
    """(MAP_det, AIOU). AIOU is NaN when there are no truth boxes."""
    if not truth_boxes:
        return float("nan"), float("nan")
    pairs = greedy_match(boxes, truth_boxes)
    aiou = float(np.mean([p[2] for p in pairs])) if pairs else 0.0
    return detection_average_precision(boxes, truth_boxes, iou_threshold), aiou


@dataclass
class MetricsReport:
    MAP: float
    AFM: float
    AIOU: float
    IAAE: float
    MAP_det: float
    n_images: int
    per_class: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and not np.isfinite(v):
                return None
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            return v
        return json.dumps(clean(self.to_dict()), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        for k in ("MAP", "AFM", "AIOU", "IAAE", "MAP_det"):
            d[k] = float("nan") if d[k] is None else d[k]
        return cls(**d)


def evaluate_maps(preds: Iterable[np.ndarray], masks: Iterable[np.ndarray], classes: Sequence[str] | None = None,
                  min_area_frac: float = 0.002, morph_radius: int = 1) -> MetricsReport:
    """Per-image metrics averaged over a set; NaN entries are excluded from means."""
    rows = []
    for pred, mask in zip(preds, masks):
        m_ap, afm, ia = segmentation_metrics(pred, mask)
        map_det, aiou = detection_metrics(extract_boxes(pred, min_area_frac, morph_radius), mask_boxes(mask))
        rows.append((m_ap, afm, aiou, ia, map_det))
    if not rows:
        raise ValueError("no images to evaluate")
    arr = np.array(rows, dtype=np.float64)
    names = ("MAP", "AFM", "AIOU", "IAAE", "MAP_det")

    def agg(a):
        with np.errstate(invalid="ignore"):
            valid = ~np.isnan(a)
            mean = a[valid].mean(0) if valid.any() else float("nan")
            std = a[valid].std(0) if valid.any() else float("nan")
        return float(mean), float(std)

    stats = [agg(arr[:, k]) for k in range(len(names))]
    per_class = {}
    if classes is not None:
        labels = np.asarray(classes)
        for c in sorted(set(classes)):
            sel = arr[labels == c]
            per_class[c] = {n: agg(sel[:, k])[0] for k, n in enumerate(names)}
    return MetricsReport(*[s[0] for s in stats], n_images=len(rows), per_class=per_class,
                         std={n: s[1] for n, s in zip(names, stats)})


def aggregate_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Mean of trial reports, with the standard deviation across trials."""
    if not reports:
        raise ValueError("need at least one report")
    if len(reports) == 1:
        return reports[0]
    names = ("MAP", "AFM", "AIOU", "IAAE", "MAP_det")
    vals = np.array([[getattr(r, n) for n in names] for r in reports], dtype=np.float64)
    mean = np.nanmean(vals, 0)
    std = np.nanstd(vals, 0)
    return MetricsReport(*map(float, mean), n_images=sum(r.n_images for r in reports),
                         std={n: float(s) for n, s in zip(names, std)})


def write_boxes_csv(boxes: Sequence[DetectionBox], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row0", "col0", "row1", "col1", "score"])
        for b in boxes:
            w.writerow([b.row0, b.col0, b.row1, b.col1, f"{b.score:.6f}"])


def read_boxes_csv(path: str | Path) -> list[DetectionBox]:
    with open(path, newline="") as fh:
        return [DetectionBox(int(r["row0"]), int(r["col0"]), int(r["row1"]), int(r["col1"]), float(r["score"]))
                for r in csv.DictReader(fh)]
