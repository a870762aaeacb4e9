"""Detection metrics: IoU matching, precision/recall/F1, PR curves, AP/mAP, confusion matrices."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from udeep.dataset import DEFAULT_CLASSES, ClassMap, NormalizedBox
from udeep.detection import Detection, corner_iou

F1_THRESHOLDS = tuple(i / 100 for i in range(101))


class EmptyGroundTruth(ValueError):
    pass


class NoDefinedClasses(ValueError):
    pass


def _corners(box) -> Sequence[float]:
    return box.corners if hasattr(box, "corners") else box


def iou(a, b) -> float:
    """IoU of two boxes given as ``(x1, y1, x2, y2)`` or objects with ``.corners``."""
    return corner_iou(_corners(a), _corners(b))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError("counts must be non-negative")

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float
    undefined: tuple[str, ...] = ()


def classification_metrics(c: ConfusionCounts) -> Metrics:
    """Precision, recall and F1; a 0/0 ratio scores 0 and is listed in ``undefined``."""
    undefined = []
    if c.tp + c.fp:
        precision = c.tp / (c.tp + c.fp)
    else:
        precision = 0.0
        undefined.append("precision")
    if c.tp + c.fn:
        recall = c.tp / (c.tp + c.fn)
    else:
        recall = 0.0
        undefined.append("recall")
    if precision + recall:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        undefined.append("f1")
    return Metrics(precision, recall, f1, tuple(undefined))


@dataclass
class MatchResult:
    """Per-detection outcome, aligned with the input detection order."""

    is_tp: list[bool]
    matched_gt: list[int | None]
    gt_matched: list[bool]
    gt_totals: Counter = field(default_factory=Counter)

    def counts(self, dets: Sequence[Detection], gts: Sequence[NormalizedBox], class_id: int) -> ConfusionCounts:
        tp = sum(1 for d, t in zip(dets, self.is_tp) if d.class_id == class_id and t)
        fp = sum(1 for d, t in zip(dets, self.is_tp) if d.class_id == class_id and not t)
        return ConfusionCounts(tp, fp, self.gt_totals[class_id] - tp)


def confidence_order(dets: Sequence[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: -dets[i].confidence)


def match_detections(dets: Sequence[Detection], gts: Sequence[NormalizedBox], iou_thr: float = 0.5) -> MatchResult:
    """Greedy class-wise matching of one image's detections to its ground truth.

    Detections are visited by descending confidence (ties keep input order);
    each takes the unmatched same-class GT with the highest IoU if that IoU
    reaches ``iou_thr``.
    """
    is_tp = [False] * len(dets)
    matched_gt: list[int | None] = [None] * len(dets)
    gt_matched = [False] * len(gts)
    for i in confidence_order(dets):
        d = dets[i]
        best, best_iou = None, -1.0
        for j, g in enumerate(gts):
            if gt_matched[j] or g.class_id != d.class_id:
                continue
            v = iou(d, g)
            if v > best_iou:
                best, best_iou = j, v
        if best is not None and best_iou >= iou_thr:
            gt_matched[best] = True
            is_tp[i] = True
            matched_gt[i] = best
    return MatchResult(is_tp, matched_gt, gt_matched, Counter(g.class_id for g in gts))


@dataclass(frozen=True)
class PrPoint:
    threshold: float | None
    recall: float | Fraction
    precision: float | Fraction


@dataclass(frozen=True)
class PrCurve:
    points: tuple[PrPoint, ...]

    @property
    def recalls(self) -> list:
        return [p.recall for p in self.points]

    @property
    def precisions(self) -> list:
        return [p.precision for p in self.points]

    def __len__(self) -> int:
        return len(self.points)


def pr_curve(flags: Sequence[bool], gt_total: int, confidences: Sequence[float] | None = None,
             exact: bool = False) -> PrCurve:
    """Precision/recall after each prefix of confidence-ranked TP/FP flags.

    With ``exact=True`` the values are :class:`fractions.Fraction`.
    """
    if gt_total <= 0:
        raise EmptyGroundTruth("recall is undefined without ground-truth boxes")
    if confidences is not None and len(confidences) != len(flags):
        raise ValueError("confidences and flags differ in length")
    points = []
    cum_tp = 0
    for n, flag in enumerate(flags, 1):
        cum_tp += bool(flag)
        if exact:
            p, r = Fraction(cum_tp, n), Fraction(cum_tp, gt_total)
        else:
            p, r = cum_tp / n, cum_tp / gt_total
        points.append(PrPoint(None if confidences is None else float(confidences[n - 1]), r, p))
    return PrCurve(tuple(points))


def average_precision(curve: PrCurve, interpolate: bool = False):
    """Sum of (R_n - R_{n-1}) * P_n over the curve, R_0 = 0.

    ``interpolate=True`` switches to 101-point interpolated AP (mean over
    recall levels 0, 0.01, ..., 1 of the best precision at recall >= level).
    """
    if not curve.points:
        return 0.0
    if interpolate:
        recalls = np.array([float(r) for r in curve.recalls])
        precisions = np.array([float(p) for p in curve.precisions])
        envelope = np.maximum.accumulate(precisions[::-1])[::-1]
        total = 0.0
        for level in np.linspace(0.0, 1.0, 101):
            idx = np.searchsorted(recalls, level, side="left")
            total += envelope[idx] if idx < len(recalls) else 0.0
        return float(total / 101)
    ap = 0 * curve.points[0].recall
    prev = 0 * curve.points[0].recall
    for pt in curve.points:
        ap += (pt.recall - prev) * pt.precision
        prev = pt.recall
    return ap


def mean_average_precision(per_class_ap: Mapping[str, float | None]) -> float:
    """Unweighted mean over classes whose AP is defined (not None)."""
    defined = [v for v in per_class_ap.values() if v is not None]
    if not defined:
        raise NoDefinedClasses("no class has a defined AP")
    return float(sum(defined) / len(defined))


ImagePair = tuple[Sequence[Detection], Sequence[NormalizedBox]]


def ranked_flags(images: Sequence[ImagePair], iou_thr: float, class_id: int,
                 conf_thr: float = 0.0) -> tuple[list[bool], list[float], int]:
    """Pool one class's matched detections over images, ranked by confidence.

    Returns (flags, confidences, gt_total). Ties keep image order, then
    detection order.
    """
    pooled = []
    gt_total = 0
    for dets, gts in images:
        dets = [d for d in dets if d.confidence >= conf_thr]
        m = match_detections(dets, gts, iou_thr)
        gt_total += m.gt_totals[class_id]
        pooled.extend((d.confidence, t) for d, t in zip(dets, m.is_tp) if d.class_id == class_id)
    pooled.sort(key=lambda t: -t[0])
    return [t for _, t in pooled], [c for c, _ in pooled], gt_total


def counts_at(images: Sequence[ImagePair], iou_thr: float, class_id: int, conf_thr: float) -> ConfusionCounts:
    total = ConfusionCounts()
    for dets, gts in images:
        dets = [d for d in dets if d.confidence >= conf_thr]
        total = total + match_detections(dets, gts, iou_thr).counts(dets, gts, class_id)
    return total


@dataclass
class F1Curve:
    thresholds: tuple[float, ...]
    mean: list[float]
    per_class: dict[str, list[float]]
    best_f1: float
    best_threshold: float
    classes_averaged: tuple[str, ...]


def f1_confidence_curve(images: Sequence[ImagePair], iou_thr: float = 0.5,
                        class_map: ClassMap = DEFAULT_CLASSES) -> F1Curve:
    """Mean per-class F1 at confidence cutoffs 0.00, 0.01, ..., 1.00.

    The mean runs over classes with at least one GT box. The best threshold
    is the lowest one reaching the maximum mean F1.
    """
    gt_counts = Counter(g.class_id for _, gts in images for g in gts)
    averaged = [c for c in range(len(class_map)) if gt_counts[c] > 0]
    per_class: dict[str, list[float]] = {name: [] for name in class_map.names}
    mean = []
    for t in F1_THRESHOLDS:
        counts = {c: ConfusionCounts() for c in range(len(class_map))}
        for dets, gts in images:
            kept = [d for d in dets if d.confidence >= t]
            m = match_detections(kept, gts, iou_thr)
            for c in counts:
                counts[c] = counts[c] + m.counts(kept, gts, c)
        f1s = {c: classification_metrics(counts[c]).f1 for c in counts}
        for c, name in enumerate(class_map.names):
            per_class[name].append(f1s[c])
        mean.append(sum(f1s[c] for c in averaged) / len(averaged) if averaged else 0.0)
    best = int(np.argmax(mean))
    return F1Curve(F1_THRESHOLDS, mean, per_class, mean[best], F1_THRESHOLDS[best],
                   tuple(class_map.name(c) for c in averaged))


def confusion_matrix(images: Sequence[ImagePair], iou_thr: float = 0.5, conf_thr: float = 0.25,
                     num_classes: int = 2) -> np.ndarray:
    """(C+1) x (C+1) counts; rows are predicted class, columns true class, index C is background.

    Same-class matches are made first (as in :func:`match_detections`); the
    remaining detections then take any remaining GT regardless of class.
    """
    bg = num_classes
    mat = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
    for dets, gts in images:
        dets = [d for d in dets if d.confidence >= conf_thr]
        m = match_detections(dets, gts, iou_thr)
        taken = list(m.gt_matched)
        for i in confidence_order(dets):
            d = dets[i]
            if m.is_tp[i]:
                mat[d.class_id, d.class_id] += 1
                continue
            best, best_iou = None, -1.0
            for j, g in enumerate(gts):
                if taken[j]:
                    continue
                v = iou(d, g)
                if v > best_iou:
                    best, best_iou = j, v
            if best is not None and best_iou >= iou_thr:
                taken[best] = True
                mat[d.class_id, gts[best].class_id] += 1
            else:
                mat[d.class_id, bg] += 1
        for j, g in enumerate(gts):
            if not taken[j]:
                mat[bg, g.class_id] += 1
    return mat


@dataclass
class EvalReport:
    iou_threshold: float
    per_class_ap: dict[str, float | None]
    map: float | None
    best_f1: float
    best_f1_threshold: float
    per_class_at_best: dict[str, dict]
    confusion: dict
    n_images: int
    n_gt_boxes: int
    n_detections: int
    notes: list[str] = field(default_factory=list)
    pr_curves: dict[str, PrCurve] = field(default_factory=dict, repr=False)
    f1_curve: F1Curve | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "iou_threshold": self.iou_threshold,
            "per_class_ap": self.per_class_ap,
            "map": self.map,
            "best_f1": self.best_f1,
            "best_f1_threshold": self.best_f1_threshold,
            "per_class_at_best_f1_threshold": self.per_class_at_best,
            "confusion_matrix": self.confusion,
            "n_images": self.n_images,
            "n_gt_boxes": self.n_gt_boxes,
            "n_detections": self.n_detections,
            "notes": self.notes,
        }


def evaluate(images: Mapping[str, ImagePair], class_map: ClassMap = DEFAULT_CLASSES, iou_thr: float = 0.5,
             conf_thr: float = 0.25, interpolate: bool = False) -> EvalReport:
    ordered = [images[k] for k in sorted(images)]
    notes = []
    per_class_ap: dict[str, float | None] = {}
    curves = {}
    for c, name in enumerate(class_map.names):
        flags, confs, gt_total = ranked_flags(ordered, iou_thr, c)
        try:
            curve = pr_curve(flags, gt_total, confs)
        except EmptyGroundTruth:
            per_class_ap[name] = None
            notes.append(f"class {name!r} has no ground-truth boxes; AP undefined and excluded from mAP")
            continue
        curves[name] = curve
        per_class_ap[name] = float(average_precision(curve, interpolate))
    try:
        map_value = mean_average_precision(per_class_ap)
    except NoDefinedClasses:
        map_value = None
        notes.append("no class has ground truth; mAP undefined")

    f1 = f1_confidence_curve(ordered, iou_thr, class_map)
    at_best = {}
    for c, name in enumerate(class_map.names):
        counts = counts_at(ordered, iou_thr, c, f1.best_threshold)
        met = classification_metrics(counts)
        at_best[name] = {"tp": counts.tp, "fp": counts.fp, "fn": counts.fn, "precision": met.precision,
                         "recall": met.recall, "f1": met.f1, "undefined": list(met.undefined)}
    mat = confusion_matrix(ordered, iou_thr, conf_thr, len(class_map))
    confusion = {"labels": [*class_map.names, "background"], "conf_threshold": conf_thr,
                 "iou_threshold": iou_thr, "rows": "predicted", "columns": "true", "matrix": mat.tolist()}
    return EvalReport(
        iou_threshold=iou_thr,
        per_class_ap=per_class_ap,
        map=map_value,
        best_f1=f1.best_f1,
        best_f1_threshold=f1.best_threshold,
        per_class_at_best=at_best,
        confusion=confusion,
        n_images=len(ordered),
        n_gt_boxes=sum(len(g) for _, g in ordered),
        n_detections=sum(len(d) for d, _ in ordered),
        notes=notes,
        pr_curves=curves,
        f1_curve=f1,
    )


def write_pr_csv(curve: PrCurve, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "recall", "precision"])
        for p in curve.points:
            w.writerow(["" if p.threshold is None else repr(p.threshold), repr(float(p.recall)), repr(float(p.precision))])


def write_f1_csv(curve: F1Curve, path: str | Path) -> None:
    names = list(curve.per_class)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "f1_mean", *[f"f1_{n}" for n in names]])
        for i, t in enumerate(curve.thresholds):
            w.writerow([f"{t:.2f}", repr(curve.mean[i]), *[repr(curve.per_class[n][i]) for n in names]])


def f1_from_pr(precision: float, recall: float) -> float:
    """F1 directly from a precision/recall pair."""
    if precision + recall == 0 or math.isnan(precision + recall):
        return 0.0
    return 2 * precision * recall / (precision + recall)
