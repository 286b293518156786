"""Region average precision: mask IoU, greedy confidence-ranked matching of
predictions to ground truth, per-class AP at fixed IoU thresholds and the
mean over classes.

Matching rule: predictions are sorted by descending confidence (ties by image
index, then emission order) and each is matched to the unmatched same-class,
same-image ground truth with the highest mask IoU; it counts as a true
positive (consuming the ground truth) iff that IoU reaches the threshold.
AP is the area under the precision-recall curve after making the precision
envelope monotone (all-point interpolation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_THRESHOLDS = (0.5, 0.6, 0.7)


@dataclass
class Prediction:
    cls: int
    confidence: float
    mask: np.ndarray  # full-image bool mask, non-empty


@dataclass
class AprReport:
    ap: dict            # (cls, threshold) -> AP
    mean: dict          # threshold -> mean AP over classes present in the gts
    classes: list[int]  # classes present in the ground truth
    thresholds: tuple


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError(f"mask_iou dimension mismatch: {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def _average_precision(tp_flags: list[bool], n_gt: int) -> float:
    if n_gt == 0:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    ranks = np.arange(1, len(tp_flags) + 1)
    recall = tp / n_gt
    precision = tp / ranks
    # monotone non-increasing precision envelope, then integrate over recall
    recall = np.concatenate([[0.0], recall])
    precision = np.concatenate([[0.0], precision])
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    return float(np.sum((recall[1:] - recall[:-1]) * precision[1:]))


def evaluate_apr(predictions: list[list[Prediction]],
                 gts: list[list],
                 thresholds=DEFAULT_THRESHOLDS,
                 num_classes: int | None = None) -> AprReport:
    """AP per (class, threshold) plus per-threshold means.

    ``predictions`` and ``gts`` are parallel per-image lists; ground-truth
    entries need ``cls`` and ``mask`` attributes.
    """
    if len(predictions) != len(gts):
        raise ValueError("predictions and ground truth cover different image counts")
    classes = sorted({gt.cls for per_img in gts for gt in per_img})
    k = num_classes if num_classes is not None else (max(classes) if classes else 0)
    for per_img in predictions:
        for p in per_img:
            if not (1 <= p.cls <= k):
                raise ValueError(f"prediction class {p.cls} outside 1..{k}")

    ap: dict = {}
    for cls in classes:
        entries = []  # (confidence, image index, emission order, mask)
        for img_i, per_img in enumerate(predictions):
            for order, p in enumerate(per_img):
                if p.cls == cls:
                    entries.append((p.confidence, img_i, order, p.mask))
        entries.sort(key=lambda e: (-e[0], e[1], e[2]))
        n_gt = sum(1 for per_img in gts for gt in per_img if gt.cls == cls)
        for thr in thresholds:
            matched = [[False] * len(per_img) for per_img in gts]
            flags = []
            for _, img_i, _, mask in entries:
                best_j, best = -1, 0.0
                for j, gt in enumerate(gts[img_i]):
                    if gt.cls != cls or matched[img_i][j]:
                        continue
                    v = mask_iou(mask, gt.mask)
                    if v > best:
                        best_j, best = j, v
                if best_j >= 0 and best >= thr:
                    matched[img_i][best_j] = True
                    flags.append(True)
                else:
                    flags.append(False)
            ap[(cls, thr)] = _average_precision(flags, n_gt)

    mean = {}
    for thr in thresholds:
        vals = [ap[(cls, thr)] for cls in classes]
        mean[thr] = float(np.mean(vals)) if vals else 0.0
    return AprReport(ap=ap, mean=mean, classes=classes, thresholds=tuple(thresholds))


def format_report(report: AprReport, class_names: dict | None = None) -> str:
    """Human-readable table."""
    names = class_names or {}
    lines = ["class      " + "".join(f"  AP@{t:<5}" for t in report.thresholds)]
    for cls in report.classes:
        label = names.get(cls, f"class {cls}")
        row = "".join(f"  {report.ap[(cls, t)]:7.4f}" for t in report.thresholds)
        lines.append(f"{label:<11}{row}")
    lines.append("mean       " + "".join(f"  {report.mean[t]:7.4f}"
                                         for t in report.thresholds))
    return "\n".join(lines)


def report_lines(report: AprReport) -> list[str]:
    """Machine-readable flat form: class/threshold/ap then mean/threshold/map."""
    lines = []
    for cls in report.classes:
        for thr in report.thresholds:
            lines.append(f"{cls}\t{thr}\t{report.ap[(cls, thr)]!r}")
    for thr in report.thresholds:
        lines.append(f"mean\t{thr}\t{report.mean[thr]!r}")
    return lines
