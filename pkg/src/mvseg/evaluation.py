"""Semantic accuracy and instance average precision."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .merge_nms import Instance, point_iou


@dataclass
class EvalReport:
    per_class_accuracy: dict[str, float] = field(default_factory=dict)
    micro_mean_accuracy: float = 0.0
    per_class_ap: dict[str, float] = field(default_factory=dict)
    map_05: float = 0.0

    def lines(self) -> list[str]:
        out = [f"semantic.micro_mean_accuracy {self.micro_mean_accuracy:.6f}"]
        out += [f"accuracy.{c} {v:.6f}" for c, v in self.per_class_accuracy.items()]
        out.append(f"instance.map_05 {self.map_05:.6f}")
        out += [f"ap_05.{c} {v:.6f}" for c, v in self.per_class_ap.items()]
        return out

    def write(self, text_path, json_path=None) -> None:
        with open(text_path, "w") as fh:
            fh.write("\n".join(self.lines()) + "\n")
        if json_path is not None:
            with open(json_path, "w") as fh:
                json.dump(asdict(self), fh, indent=2, sort_keys=True)


def _name(c: int, class_names: Sequence[str] | None) -> str:
    return class_names[c] if class_names and c < len(class_names) else str(c)


def semantic_metrics(pred, gt, num_classes: int, class_names: Sequence[str] | None = None):
    """Per-class accuracy (over classes present in ``gt``) and micro-mean accuracy."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction has {pred.size} labels, ground truth {gt.size}")
    correct = pred == gt
    total = np.bincount(gt, minlength=num_classes)
    hits = np.bincount(gt[correct], minlength=num_classes)
    per_class = {_name(c, class_names): float(hits[c] / total[c]) for c in range(num_classes) if total[c] > 0}
    micro = float(correct.mean()) if gt.size else 0.0
    return per_class, micro


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """Area under the all-points interpolated precision/recall curve."""
    if n_gt == 0:
        return 0.0
    if len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def instance_ap(
    predictions: Sequence[Instance],
    ground_truth: Sequence[Instance],
    iou_threshold: float = 0.5,
    class_names: Sequence[str] | None = None,
):
    """Per-class AP and its mean over classes that have ground-truth instances.

    Predictions are visited by decreasing confidence; each one takes the
    unmatched same-class, same-scene ground-truth instance of highest IoU and
    counts as a true positive if that IoU exceeds ``iou_threshold``.
    """
    gt_by = defaultdict(list)
    for g in ground_truth:
        gt_by[(g.scene, g.semantic)].append(g)
    classes = sorted({g.semantic for g in ground_truth})
    per_class: dict[str, float] = {}
    for c in classes:
        preds = [p for p in predictions if p.semantic == c]
        preds.sort(key=lambda p: -p.confidence)
        matched: dict[tuple, set] = defaultdict(set)
        tp = np.zeros(len(preds))
        for k, p in enumerate(preds):
            pool = gt_by.get((p.scene, c), [])
            best, best_iou = None, iou_threshold
            for gi, g in enumerate(pool):
                if gi in matched[(p.scene, c)]:
                    continue
                iou = point_iou(p.points, g.points)
                if iou > best_iou:
                    best, best_iou = gi, iou
            if best is not None:
                matched[(p.scene, c)].add(best)
                tp[k] = 1.0
        n_gt = sum(len(v) for (s, cc), v in gt_by.items() if cc == c)
        per_class[_name(c, class_names)] = average_precision(tp, n_gt)
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean


def gt_instances(semantic, instance, scene: str = "") -> list[Instance]:
    out = []
    for i in np.unique(instance).tolist():
        if i < 0:
            continue
        members = np.flatnonzero(instance == i)
        out.append(Instance(members, int(np.bincount(semantic[members]).argmax()), 1.0, scene))
    return out


def evaluate(scenes, num_classes: int, class_names: Sequence[str] | None = None, iou_threshold: float = 0.5) -> EvalReport:
    """``scenes`` yields (name, SegmentationResult, gt_semantic, gt_instance)."""
    preds, gts, sem_p, sem_g = [], [], [], []
    for name, result, gsem, ginst in scenes:
        preds += result.instances(name)
        gts += gt_instances(np.asarray(gsem), np.asarray(ginst), name)
        sem_p.append(np.asarray(result.semantic))
        sem_g.append(np.asarray(gsem))
    per_acc, micro = semantic_metrics(np.concatenate(sem_p), np.concatenate(sem_g), num_classes, class_names)
    per_ap, mean_ap = instance_ap(preds, gts, iou_threshold, class_names)
    return EvalReport(per_acc, micro, per_ap, mean_ap)
