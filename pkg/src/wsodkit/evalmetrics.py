"""Detection metrics: VOC all-point AP, CorLoc and COCO-style average recall."""

from __future__ import annotations

import csv
import math
import os
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .geometry import iou_matrix

# .50:.05:.95, rounded so that 0.55 is exactly the literal 0.55
AR_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
SMALL_AREA = 32.0 ** 2
MEDIUM_AREA = 96.0 ** 2


@dataclass(frozen=True)
class Detection:
    image_id: str
    cls: int
    box: tuple[float, float, float, float]
    confidence: float

    def __post_init__(self):
        if not math.isfinite(self.confidence):
            raise ValueError("detection confidence must be finite")


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    cls: int
    box: tuple[float, float, float, float]


def _group(items, key):
    out = defaultdict(list)
    for it in items:
        out[key(it)].append(it)
    return out


def _sorted_by_confidence(dets: Sequence[Detection]) -> list[Detection]:
    # stable: equal confidences keep their input order
    return sorted(dets, key=lambda d: -d.confidence)


def voc_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the monotone precision envelope (all-point interpolation)."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def _class_ap(dets: list[Detection], gts: list[GroundTruth], iou_thresh: float) -> float:
    gt_by_img = _group(gts, lambda g: g.image_id)
    gt_boxes = {k: np.asarray([g.box for g in v]) for k, v in gt_by_img.items()}
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gt_by_img.items()}
    dets = _sorted_by_confidence(dets)
    tp = np.zeros(len(dets))
    for i, d in enumerate(dets):
        boxes = gt_boxes.get(d.image_id)
        if boxes is None:
            continue
        ious = iou_matrix(np.asarray([d.box]), boxes)[0]
        j = int(np.argmax(ious))
        if ious[j] >= iou_thresh and not used[d.image_id][j]:
            used[d.image_id][j] = True
            tp[i] = 1.0
    if len(dets) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / len(gts)
    precision = ctp / np.arange(1, len(dets) + 1)
    return voc_ap(recall, precision)


def average_precision(dets: Iterable[Detection], gts: Iterable[GroundTruth], iou_thresh: float = 0.5) -> dict:
    """Per-class AP and their mean over classes that have ground truth.

    Detections are ranked by confidence; each one goes to its highest-IoU
    ground truth in the same image and is a true positive only if that box is
    unmatched and the IoU reaches ``iou_thresh``.
    """
    dets_c = _group(dets, lambda d: d.cls)
    gts_c = _group(gts, lambda g: g.cls)
    per_class = {c: _class_ap(dets_c.get(c, []), gts_c[c], iou_thresh) for c in sorted(gts_c)}
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return {"per_class": per_class, "mean": mean}


def corloc(dets: Iterable[Detection], gts: Iterable[GroundTruth], iou_thresh: float = 0.5) -> dict:
    """Fraction of positive (image, class) pairs whose top detection hits a ground truth."""
    top: dict[tuple[str, int], Detection] = {}
    for d in dets:
        k = (d.image_id, d.cls)
        if k not in top or d.confidence > top[k].confidence:
            top[k] = d
    gt_pairs = _group(gts, lambda g: (g.image_id, g.cls))
    hits: dict[int, list[float]] = defaultdict(list)
    for (img, c), gl in sorted(gt_pairs.items()):
        d = top.get((img, c))
        ok = d is not None and iou_matrix(np.asarray([d.box]), np.asarray([g.box for g in gl])).max() >= iou_thresh
        hits[c].append(1.0 if ok else 0.0)
    per_class = {c: float(np.mean(v)) for c, v in sorted(hits.items())}
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return {"per_class": per_class, "mean": mean}


def _recall_counts(dets: list[Detection], gts: list[GroundTruth], max_dets: int, areas: tuple[float, float]):
    """Matched / total counts of in-bucket ground truths, one pair per threshold."""
    lo, hi = areas
    gt_by_img = _group(gts, lambda g: g.image_id)
    det_by_img = _group(dets, lambda d: d.image_id)
    matched = np.zeros(len(AR_THRESHOLDS))
    total = 0
    for img, gl in gt_by_img.items():
        boxes = np.asarray([g.box for g in gl])
        area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
        in_bucket = (area >= lo) & (area < hi)
        total += int(in_bucket.sum())
        if not in_bucket.any():
            continue
        dl = _sorted_by_confidence(det_by_img.get(img, []))[:max_dets]
        if not dl:
            continue
        ious = iou_matrix(np.asarray([d.box for d in dl]), boxes)
        # prefer in-bucket ground truths, as COCO does with ignored boxes
        ranked = np.where(in_bucket[None, :], ious, ious - 2.0)
        for t_i, t in enumerate(AR_THRESHOLDS):
            used = np.zeros(len(gl), dtype=bool)
            for i in range(len(dl)):
                cand = np.where(~used & (ious[i] >= t - 1e-12), ranked[i], -np.inf)
                j = int(np.argmax(cand))
                if np.isfinite(cand[j]):
                    used[j] = True
            matched[t_i] += int((used & in_bucket).sum())
    return matched, total


def average_recall(dets: Iterable[Detection], gts: Iterable[GroundTruth], max_dets: int = 100) -> dict:
    """Recall averaged over IoU .50:.05:.95 with ``max_dets`` detections per image and class.

    Returns the overall value and the small / medium / large buckets (COCO
    area limits 32^2 and 96^2); a bucket without ground truth is NaN.
    """
    dets_c = _group(dets, lambda d: d.cls)
    gts_c = _group(gts, lambda g: g.cls)
    buckets = {"all": (0.0, math.inf), "small": (0.0, SMALL_AREA),
               "medium": (SMALL_AREA, MEDIUM_AREA), "large": (MEDIUM_AREA, math.inf)}
    out = {}
    for name, rng in buckets.items():
        vals = []
        for c in sorted(gts_c):
            m, tot = _recall_counts(dets_c.get(c, []), gts_c[c], max_dets, rng)
            if tot:
                vals.append(float(np.mean(m / tot)))
        out[name] = float(np.mean(vals)) if vals else float("nan")
    return out


def evaluate(dets: Sequence[Detection], gts: Sequence[GroundTruth], corloc_gts: Sequence[GroundTruth] | None = None,
             corloc_dets: Sequence[Detection] | None = None) -> dict:
    """AP50, CorLoc and AR^1/AR^10/AR^100 (+ size buckets at 100) in one flat dict."""
    ap = average_precision(dets, gts, 0.5)
    res = {"AP50": ap["mean"]}
    for c, v in ap["per_class"].items():
        res[f"AP50/{c}"] = v
    cl = corloc(corloc_dets if corloc_dets is not None else dets,
                corloc_gts if corloc_gts is not None else gts)
    res["CorLoc"] = cl["mean"]
    for k in (1, 10, 100):
        ar = average_recall(dets, gts, max_dets=k)
        res[f"AR{k}"] = ar["all"]
        if k == 100:
            res["ARs"], res["ARm"], res["ARl"] = ar["small"], ar["medium"], ar["large"]
    return res


def format_report(metrics: dict) -> str:
    width = max(len(k) for k in metrics) if metrics else 0
    return "\n".join(f"{k:<{width}}  {v:.4f}" for k, v in metrics.items())


def write_metric_table(path: str | os.PathLike, metrics: dict) -> None:
    """``class,metric,value`` rows; per-class keys look like ``AP50/2``."""
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp)
        w.writerow(["class", "metric", "value"])
        for k, v in metrics.items():
            metric, _, cls = k.partition("/")
            w.writerow([cls or "all", metric, f"{v:.6f}"])
