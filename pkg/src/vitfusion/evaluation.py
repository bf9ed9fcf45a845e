"""Detection evaluation: greedy TP/FP assignment, 40-point interpolated
average precision, and heading-weighted APH.

For each class, detections are pooled over the evaluation scenes, sorted by
descending confidence (ties by appearance order), and matched greedily to
unmatched ground truth of that class at the class IoU threshold. APH uses
the same PR interpolation but each true positive's precision contribution
is weighted by heading accuracy 1 - |wrapped(dtheta)| / pi, so APH <= AP
cell by cell.

Ground truth below a difficulty's minimum in-box point count is ignored:
detections matched to it are neither TP nor FP, and it does not count
toward recall. Classes with no valid ground truth report no AP and are
excluded from the mean.
"""

from __future__ import annotations

import json
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .data import points_in_box
from .detection import DetectionSet
from .geometry import iou_2d, iou_3d, iou_bev, nms, wrap_angle
from .lidar import EmptySceneError
from .model import ModelOps

N_RECALL_POINTS = 40


def heading_accuracy(theta_pred, theta_gt) -> float:
    return 1.0 - abs(float(wrap_angle(theta_pred - theta_gt))) / np.pi


def scene_sample_seed(base_seed: int, scene_id: str) -> int:
    return (int(base_seed) * 1_000_003 + zlib.crc32(str(scene_id).encode())) % (2 ** 31)


def predict_with_nms(model, scene, sample_seed: int | None = None) -> DetectionSet:
    """Run inference and per-class NMS; empty scenes yield zero detections."""
    cfg = model.cfg
    if sample_seed is None:
        sample_seed = scene_sample_seed(cfg.seed, scene.scene_id)
    try:
        dets = ModelOps.predict(model, scene, sample_seed=sample_seed)
    except EmptySceneError:
        return DetectionSet([], np.zeros((0, len(cfg.classes) + 1)))
    iou_fn = iou_bev if model.box_dim == 7 else iou_2d
    cls = dets.argmax_classes()
    kept = []
    for c in range(len(cfg.classes)):
        idx = np.flatnonzero(cls == c)
        if idx.size == 0:
            continue
        sub = dets.take(idx)
        sub_kept = nms(sub, cfg.nms_iou_threshold, cfg.nms_max_out, iou_fn)
        kept.append(sub_kept)
    if not kept:
        return DetectionSet([], np.zeros((0, len(cfg.classes) + 1)))
    boxes = [b for k in kept for b in k.boxes]
    probs = np.concatenate([k.class_probs for k in kept], axis=0)
    return DetectionSet(boxes, probs)


def mark_detections(dets_per_scene, gts_per_scene, valid_per_scene, iou_fn,
                    iou_threshold: float):
    """Greedy confidence-ordered TP/FP assignment for one class.

    dets_per_scene: per scene (boxes, confidences); gts_per_scene: per scene
    box list; valid_per_scene: per scene bool mask (False = ignored).
    Returns (confidences, tp, ignored, heading_weights, n_valid_gt) pooled
    over scenes in appearance order.
    """
    conf_all, tp_all, ign_all, hw_all = [], [], [], []
    n_valid = 0
    for (boxes, conf), gt_boxes, valid in zip(dets_per_scene, gts_per_scene,
                                              valid_per_scene):
        valid = np.asarray(valid, dtype=bool)
        n_valid += int(valid.sum())
        matched = np.zeros(len(gt_boxes), dtype=bool)
        order = np.lexsort((np.arange(len(conf)), -np.asarray(conf)))
        tp = np.zeros(len(conf), dtype=bool)
        ign = np.zeros(len(conf), dtype=bool)
        hw = np.zeros(len(conf))
        for i in order:
            ious = np.array([iou_fn(boxes[i], g) if not matched[j] else -1.0
                             for j, g in enumerate(gt_boxes)])
            cand = np.flatnonzero(ious >= iou_threshold)
            if cand.size == 0:
                continue  # FP
            valid_cand = cand[valid[cand]]
            if valid_cand.size:
                j = valid_cand[np.argmax(ious[valid_cand])]
                matched[j] = True
                tp[i] = True
                if hasattr(boxes[i], "theta"):
                    hw[i] = heading_accuracy(boxes[i].theta, gt_boxes[j].theta)
                else:
                    hw[i] = 1.0
            else:
                j = cand[np.argmax(ious[cand])]
                matched[j] = True
                ign[i] = True
        conf_all.append(np.asarray(conf, dtype=np.float64))
        tp_all.append(tp)
        ign_all.append(ign)
        hw_all.append(hw)
    cat = lambda parts: (np.concatenate(parts) if parts else np.zeros(0))
    return (cat(conf_all), cat(tp_all).astype(bool), cat(ign_all).astype(bool),
            cat(hw_all), n_valid)


def pr_curves(conf, tp, ignored, heading_w, n_gt):
    """Precision/recall plus heading-weighted precision, confidence-ordered."""
    keep = ~ignored
    conf, tp, heading_w = conf[keep], tp[keep], heading_w[keep]
    order = np.lexsort((np.arange(len(conf)), -conf))
    tp = tp[order]
    hw = np.where(tp, heading_w[order], 0.0)
    tp_cum = np.cumsum(tp)
    hw_cum = np.cumsum(hw)
    k = np.arange(1, len(tp) + 1)
    precision = tp_cum / k
    precision_h = hw_cum / k
    recall = tp_cum / n_gt if n_gt > 0 else np.zeros_like(precision)
    return recall, precision, precision_h


def interpolated_ap(recall, precision, n_points: int = N_RECALL_POINTS) -> float:
    """KITTI-style N-point interpolation: mean over recall thresholds
    i/n_points (i = 1..n_points) of max precision at recall >= threshold."""
    total = 0.0
    for i in range(1, n_points + 1):
        r = i / n_points
        mask = recall >= r - 1e-12
        total += float(precision[mask].max()) if mask.any() else 0.0
    return total / n_points


@dataclass
class EvalReport:
    classes: list
    metrics: dict                    # metric -> class -> difficulty -> {ap, aph}
    curves: dict = field(default_factory=dict)
    runtime: dict = field(default_factory=dict)

    def ap(self, metric: str, cls: str, difficulty: str):
        return self.metrics[metric][cls][difficulty]["ap"]

    def aph(self, metric: str, cls: str, difficulty: str):
        return self.metrics[metric][cls][difficulty]["aph"]

    def mean_ap(self, metric: str, difficulty: str):
        vals = [self.metrics[metric][c][difficulty]["ap"] for c in self.classes]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    def verify(self, tol: float = 1e-12) -> bool:
        """APH <= AP and all cells in [0, 1] (or None)."""
        for per_cls in self.metrics.values():
            for per_diff in per_cls.values():
                for cell in per_diff.values():
                    ap, aph = cell["ap"], cell["aph"]
                    for v in (ap, aph):
                        if v is not None and not (0.0 - tol <= v <= 1.0 + tol):
                            return False
                    if ap is not None and aph is not None and aph > ap + tol:
                        return False
        return True

    def to_dict(self) -> dict:
        return {"classes": list(self.classes), "metrics": self.metrics,
                "runtime": self.runtime}

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def to_text(self) -> str:
        lines = []
        fmt = lambda v: "  n/a" if v is None else f"{100 * v:5.1f}"
        for metric, per_cls in self.metrics.items():
            diffs = list(next(iter(per_cls.values())).keys())
            lines.append(f"[{metric}]")
            header = f"{'class':<12}" + "".join(
                f"{d + ' AP':>10}{d + ' APH':>11}" for d in diffs)
            lines.append(header)
            for cls in self.classes:
                row = f"{cls:<12}"
                for d in diffs:
                    cell = per_cls[cls][d]
                    row += f"{fmt(cell['ap']):>10}{fmt(cell['aph']):>11}"
                lines.append(row)
            lines.append("")
        return "\n".join(lines)


def evaluate_detections(det_sets, scenes, classes, iou_thresholds,
                        metric_fns, difficulty_min_points) -> EvalReport:
    """Score pre-computed per-scene detections against scene ground truth."""
    # per-GT in-box point counts (shared across metrics)
    gt_points = []
    for scene in scenes:
        counts = np.array([int(points_in_box(scene.cloud, b).sum())
                           for b in scene.gt.boxes], dtype=np.int64)
        gt_points.append(counts)

    metrics = {}
    curves = {}
    for metric, iou_fn in metric_fns.items():
        metrics[metric] = {}
        curves[metric] = {}
        for ci, cls in enumerate(classes):
            thr = iou_thresholds[cls]
            dets_per_scene, gts_per_scene, counts_per_scene = [], [], []
            for dets, scene, counts in zip(det_sets, scenes, gt_points):
                mask = dets.argmax_classes() == ci if len(dets) else np.zeros(0, bool)
                idx = np.flatnonzero(mask)
                sub = dets.take(idx)
                dets_per_scene.append((sub.boxes, sub.confidences()))
                sel = scene.gt.labels == ci
                gts_per_scene.append([b for b, s in zip(scene.gt.boxes, sel) if s])
                counts_per_scene.append(counts[sel])
            metrics[metric][cls] = {}
            curves[metric][cls] = {}
            for diff, min_pts in difficulty_min_points.items():
                valid_per_scene = [c >= min_pts for c in counts_per_scene]
                conf, tp, ign, hw, n_gt = mark_detections(
                    dets_per_scene, gts_per_scene, valid_per_scene, iou_fn, thr)
                if n_gt == 0:
                    metrics[metric][cls][diff] = {"ap": None, "aph": None}
                    continue
                recall, precision, precision_h = pr_curves(conf, tp, ign, hw, n_gt)
                ap = interpolated_ap(recall, precision)
                aph = interpolated_ap(recall, precision_h)
                metrics[metric][cls][diff] = {"ap": ap, "aph": aph}
                curves[metric][cls][diff] = {"recall": recall, "precision": precision,
                                             "precision_heading": precision_h}
    return EvalReport(classes=list(classes), metrics=metrics, curves=curves)


def evaluate_model(model, scenes, iou_thresholds=None) -> EvalReport:
    """Full evaluation: inference + NMS + AP/APH per class and difficulty."""
    if not scenes:
        raise ValueError("evaluation dataset is empty")
    cfg = model.cfg
    thresholds = iou_thresholds or cfg.eval_iou_thresholds
    t0 = time.perf_counter()
    det_sets = [predict_with_nms(model, s) for s in scenes]
    infer_time = time.perf_counter() - t0
    if model.box_dim == 7:
        metric_fns = {"3d": iou_3d, "bev": iou_bev}
        difficulties = dict(cfg.difficulty_min_points)
    else:
        metric_fns = {"2d": iou_2d}
        difficulties = {"all": 0}
    report = evaluate_detections(det_sets, scenes, cfg.classes, thresholds,
                                 metric_fns, difficulties)
    report.runtime = {
        "scenes": len(scenes),
        "inference_seconds": infer_time,
        "scenes_per_second": len(scenes) / infer_time if infer_time > 0 else None,
    }
    return report
