"""Detection evaluation: greedy matching, all-point AP, mAP and center localisation error."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import box_iou


def match_detections(dets, gt_boxes, gt_labels, iou_threshold: float, iou_mode: str = "oriented") -> list[bool]:
    """TP flag per detection; ``dets`` must already be sorted by descending objectness.

    Each detection takes the highest-IoU unmatched ground truth of its class
    with IoU at least ``iou_threshold``.
    """
    used = np.zeros(len(gt_boxes), dtype=bool)
    flags = []
    for d in dets:
        best, best_iou = -1, -1.0
        for j, (gt, lab) in enumerate(zip(gt_boxes, gt_labels)):
            if used[j] or lab != d.class_id:
                continue
            v = box_iou(d.box, gt, iou_mode)
            if v >= iou_threshold and v > best_iou:
                best, best_iou = j, v
        if best >= 0:
            used[best] = True
        flags.append(best >= 0)
    return flags


def precision_recall(flags, num_gt: int):
    """Cumulative precision and recall along a ranked TP/FP list."""
    flags = np.asarray(flags, dtype=bool)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    precision = tp / np.maximum(tp + fp, 1)
    recall = tp / num_gt if num_gt > 0 else np.zeros_like(precision, dtype=np.float64)
    return precision, recall


def average_precision(flags, num_gt: int) -> float:
    """Area under the precision-recall curve with the monotone (all-point) envelope.

    Returns NaN when the class has neither ground truth nor detections, so
    callers can leave it out of the mean.
    """
    if num_gt < 0:
        raise ValueError("num_gt must be non-negative")
    flags = list(flags)
    if num_gt == 0:
        return float("nan") if not flags else 0.0
    if not flags:
        return 0.0
    precision, recall = precision_recall(flags, num_gt)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def center_localization_error(samples, gt_centers) -> float:
    """Mean distance from each sample to its nearest ground-truth center."""
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, 3)
    gt_centers = np.asarray(gt_centers, dtype=np.float64).reshape(-1, 3)
    if len(samples) == 0 or len(gt_centers) == 0:
        raise ValueError("need at least one sample and one center")
    d2 = np.sum((samples[:, None, :] - gt_centers[None]) ** 2, axis=-1)
    return float(np.mean(np.sqrt(d2.min(axis=1))))


@dataclass
class EvalReport:
    thresholds: tuple
    num_classes: int
    ap: dict = field(default_factory=dict)       # threshold -> per-class AP (NaN = skipped)
    pr: dict = field(default_factory=dict)       # (threshold, class) -> (precision, recall)
    center_error: float = float("nan")
    num_scenes: int = 0

    def mAP(self, threshold: float) -> float:
        vals = [v for v in self.ap[threshold] if not np.isnan(v)]
        return float(np.mean(vals)) if vals else 0.0

    def lines(self) -> list[str]:
        out = [f"scenes: {self.num_scenes}"]
        for t in self.thresholds:
            out.append(f"mAP@{t:g}: {self.mAP(t):.6f}")
        for t in self.thresholds:
            for c, v in enumerate(self.ap[t]):
                out.append(f"AP@{t:g}.class{c}: {'nan' if np.isnan(v) else f'{v:.6f}'}")
        out.append(f"center_error: {self.center_error:.6f}")
        return out

    def write(self, out_dir):
        """``report.txt`` plus ``pr_<threshold>_class<c>.csv`` per class."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.txt").write_text("\n".join(self.lines()) + "\n", encoding="ascii")
        for (t, c), (prec, rec) in sorted(self.pr.items()):
            with open(out_dir / f"pr_{t:g}_class{c}.csv", "w", newline="", encoding="ascii") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["recall", "precision"])
                for r, p in zip(rec, prec):
                    w.writerow([f"{r:.6f}", f"{p:.6f}"])


def evaluate(per_scene_dets, per_scene_gt, num_classes: int, thresholds=(0.25, 0.5), iou_mode: str = "oriented",
             samples=None) -> EvalReport:
    """Pool detections over scenes and compute per-class AP at each threshold.

    ``per_scene_gt`` holds ``(boxes, labels)`` per scene. ``samples`` (one
    array per scene) adds the mean center localisation error.
    """
    if len(per_scene_dets) != len(per_scene_gt):
        raise ValueError(f"{len(per_scene_dets)} detection sets for {len(per_scene_gt)} scenes")
    report = EvalReport(tuple(thresholds), num_classes, num_scenes=len(per_scene_gt))
    for t in thresholds:
        scores = {c: [] for c in range(num_classes)}
        flags = {c: [] for c in range(num_classes)}
        num_gt = np.zeros(num_classes, dtype=int)
        for dets, (boxes, labels) in zip(per_scene_dets, per_scene_gt):
            for lab in labels:
                num_gt[lab] += 1
            ranked = sorted(dets, key=lambda d: -d.objectness)
            tp = match_detections(ranked, boxes, labels, t, iou_mode)
            for d, f in zip(ranked, tp):
                scores[d.class_id].append(d.objectness)
                flags[d.class_id].append(f)
        aps = []
        for c in range(num_classes):
            # stable sort keeps scene order for equal scores
            order = np.argsort(-np.asarray(scores[c], dtype=np.float64), kind="stable")
            fl = [flags[c][i] for i in order]
            aps.append(average_precision(fl, int(num_gt[c])))
            if num_gt[c] > 0:
                report.pr[(t, c)] = precision_recall(fl, int(num_gt[c]))
        report.ap[t] = aps
    if samples is not None:
        errs = [center_localization_error(s, [b.center for b in boxes])
                for s, (boxes, _) in zip(samples, per_scene_gt) if len(boxes)]
        report.center_error = float(np.mean(errs)) if errs else float("nan")
    return report
