"""Instance segmentation scoring: IoU primitives, AP/AR, score tables.

Predictions are matched to ground truth greedily in confidence order;
each prediction claims the unmatched same-class instance with the best
IoU, counting as a true positive when that IoU clears the threshold.
Average precision integrates the all-points interpolated PR curve.
Classes with no ground truth in the split are excluded from every mean.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scene import CLASS_NAMES, OBJECT_CLASSES, Scene

log = logging.getLogger(__name__)

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


class MetricsError(ValueError):
    pass


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two point-index sets; empty-vs-empty is 0."""
    a = np.asarray(a)
    b = np.asarray(b)
    inter = np.intersect1d(a, b).size
    union = np.union1d(a, b).size
    if union == 0:
        return 0.0
    return inter / union


@dataclass
class Box:
    lo: np.ndarray  # (3,)
    hi: np.ndarray  # (3,)

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))


def fit_box(points: np.ndarray) -> Box:
    """Axis-aligned bounding box of a point set."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[0] == 0 or points.shape[1] != 3:
        raise MetricsError(f"fit_box needs a non-empty (n, 3) array, got {points.shape}")
    return Box(lo=points.min(axis=0), hi=points.max(axis=0))


def box_iou(a: Box, b: Box) -> float:
    """Volume IoU of two axis-aligned boxes.

    Zero-volume boxes (min == max on some axis) are legal; a zero-volume
    union yields 0. Inverted extents (min > max) are an error.
    """
    if np.any(a.hi < a.lo) or np.any(b.hi < b.lo):
        raise MetricsError("box_iou of a box with min > max")
    lo = np.maximum(a.lo, b.lo)
    hi = np.minimum(a.hi, b.hi)
    inter = float(np.prod(np.maximum(hi - lo, 0.0)))
    union = a.volume + b.volume - inter
    if union <= 0.0:
        return 0.0
    return inter / union


# ---------------------------------------------------------------------------
# detection records and matching

@dataclass
class DetectionRecord:
    scene_id: str
    class_id: int
    confidence: float
    mask: np.ndarray
    box: Box | None = None


@dataclass
class GroundTruthObject:
    scene_id: str
    class_id: int
    mask: np.ndarray
    box: Box | None = None


def gt_objects(scene: Scene) -> list[GroundTruthObject]:
    out = []
    for inst in scene.instance_ids():
        mask = np.flatnonzero(scene.instance_id == inst)
        out.append(GroundTruthObject(
            scene_id=scene.scene_id,
            class_id=scene.instance_class(int(inst)),
            mask=mask,
            box=fit_box(scene.positions[mask]),
        ))
    return out


def _pair_iou(pred: DetectionRecord, gt: GroundTruthObject, kind: str) -> float:
    if kind == "mask":
        if pred.scene_id != gt.scene_id:
            return 0.0
        return mask_iou(pred.mask, gt.mask)
    if kind == "box":
        if pred.scene_id != gt.scene_id or pred.box is None or gt.box is None:
            return 0.0
        return box_iou(pred.box, gt.box)
    raise MetricsError(f"unknown IoU kind '{kind}'")


def _sorted_predictions(preds: list[DetectionRecord]) -> list[DetectionRecord]:
    order = sorted(range(len(preds)),
                   key=lambda i: (-preds[i].confidence, preds[i].scene_id, i))
    return [preds[i] for i in order]


def match_predictions(preds: list[DetectionRecord], gts: list[GroundTruthObject],
                      class_id: int, threshold: float,
                      kind: str = "mask") -> tuple[np.ndarray, int]:
    """Greedy confidence-ordered matching within one class.

    Returns (tp flags in sorted-prediction order, number of ground truths).
    """
    cls_preds = _sorted_predictions([p for p in preds if p.class_id == class_id])
    cls_gts = [g for g in gts if g.class_id == class_id]
    matched = [False] * len(cls_gts)
    tp = np.zeros(len(cls_preds), dtype=bool)
    for i, p in enumerate(cls_preds):
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(cls_gts):
            if matched[j]:
                continue
            iou = _pair_iou(p, g, kind)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= threshold:
            tp[i] = True
            matched[best_j] = True
    return tp, len(cls_gts)


def average_precision(preds: list[DetectionRecord], gts: list[GroundTruthObject],
                      class_id: int, threshold: float,
                      kind: str = "mask") -> float | None:
    """All-points interpolated AP for one class; None when the class has no GT."""
    tp, n_gt = match_predictions(preds, gts, class_id, threshold, kind)
    if n_gt == 0:
        return None
    if tp.size == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(~tp)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for i in range(tp.size):
        if tp[i]:
            ap += (recall[i] - prev_r) * envelope[i]
            prev_r = recall[i]
    return float(ap)


def recall_at(preds: list[DetectionRecord], gts: list[GroundTruthObject],
              class_id: int, threshold: float, kind: str = "mask") -> float | None:
    tp, n_gt = match_predictions(preds, gts, class_id, threshold, kind)
    if n_gt == 0:
        return None
    return float(tp.sum() / n_gt)


# ---------------------------------------------------------------------------
# score tables

METRIC_KEYS = ("ap25", "ap50", "ap", "rc50", "box_ap25", "box_ap50")


@dataclass
class ScoreTable:
    per_class: dict[str, dict[str, float | None]]
    mean: dict[str, float | None]

    def to_dict(self) -> dict:
        return {"per_class": self.per_class, "mean": self.mean}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def format_table(self) -> str:
        names = list(self.per_class)
        rows = []
        header = ["metric"] + names + ["mean"]
        for key in METRIC_KEYS:
            row = [key]
            for n in names:
                v = self.per_class[n][key]
                row.append("n/a" if v is None else f"{v:.4f}")
            m = self.mean[key]
            row.append("n/a" if m is None else f"{m:.4f}")
            rows.append(row)
        widths = [max(len(r[c]) for r in [header] + rows) for c in range(len(header))]
        lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
        lines.append("  ".join("-" * w for w in widths))
        for r in rows:
            lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)))
        return "\n".join(lines) + "\n"


def evaluate(preds: list[DetectionRecord], gts: list[GroundTruthObject],
             classes: tuple[int, ...] = OBJECT_CLASSES) -> ScoreTable:
    per_class: dict[str, dict[str, float | None]] = {}
    for c in classes:
        name = CLASS_NAMES[c]
        ap_avg = [average_precision(preds, gts, c, t, "mask") for t in IOU_THRESHOLDS]
        entry: dict[str, float | None] = {
            "ap25": average_precision(preds, gts, c, 0.25, "mask"),
            "ap50": average_precision(preds, gts, c, 0.50, "mask"),
            "ap": None if ap_avg[0] is None else float(np.mean([v for v in ap_avg])),
            "rc50": recall_at(preds, gts, c, 0.50, "mask"),
            "box_ap25": average_precision(preds, gts, c, 0.25, "box"),
            "box_ap50": average_precision(preds, gts, c, 0.50, "box"),
        }
        per_class[name] = entry
    mean: dict[str, float | None] = {}
    for key in METRIC_KEYS:
        vals = [per_class[n][key] for n in per_class if per_class[n][key] is not None]
        mean[key] = float(np.mean(vals)) if vals else None
    return ScoreTable(per_class=per_class, mean=mean)


# ---------------------------------------------------------------------------
# benchmark prediction files

def write_predictions(out_dir, scene_id: str, objects, n_points: int) -> None:
    """Write `<scene_id>.txt` plus one 0/1 mask file per predicted object.

    Each index line reads `predicted_masks/<scene_id>_<k>.txt <class> <conf>`;
    mask files carry one 0/1 row per scene point.
    """
    out_dir = Path(out_dir)
    mask_dir = out_dir / "predicted_masks"
    mask_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for k, obj in enumerate(objects):
        rel = f"predicted_masks/{scene_id}_{k}.txt"
        lines.append(f"{rel} {int(obj.semantic_class)} {obj.confidence:.6f}")
        flags = np.zeros(n_points, dtype=np.int64)
        flags[np.asarray(obj.mask, dtype=np.int64)] = 1
        np.savetxt(mask_dir / f"{scene_id}_{k}.txt", flags, fmt="%d")
    (out_dir / f"{scene_id}.txt").write_text("\n".join(lines) + ("\n" if lines else ""))


def read_predictions(pred_dir, scene_id: str, n_points: int) -> list[DetectionRecord]:
    """Read one scene's predictions; a missing index file means no detections."""
    pred_dir = Path(pred_dir)
    index = pred_dir / f"{scene_id}.txt"
    if not index.exists():
        log.warning("no prediction file for scene %s", scene_id)
        return []
    out: list[DetectionRecord] = []
    for lineno, line in enumerate(index.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise MetricsError(f"{index.name}: line {lineno}: expected 3 fields")
        rel, cls, conf = parts
        mask_path = pred_dir / rel
        if not mask_path.exists():
            raise MetricsError(f"{index.name}: line {lineno}: missing mask file {rel}")
        flags = np.loadtxt(mask_path, dtype=np.int64, ndmin=1)
        if flags.shape[0] != n_points:
            raise MetricsError(
                f"{rel}: {flags.shape[0]} rows for a scene of {n_points} points")
        out.append(DetectionRecord(
            scene_id=scene_id,
            class_id=int(cls),
            confidence=float(conf),
            mask=np.flatnonzero(flags == 1),
        ))
    return out


def evaluate_scene_dirs(pred_dir, scenes: list[Scene],
                        classes: tuple[int, ...] = OBJECT_CLASSES) -> ScoreTable:
    """Score prediction files against a list of ground-truth scenes."""
    preds: list[DetectionRecord] = []
    gts: list[GroundTruthObject] = []
    for scene in scenes:
        gts.extend(gt_objects(scene))
        for rec in read_predictions(pred_dir, scene.scene_id, scene.n_points):
            if rec.mask.size:
                rec.box = fit_box(scene.positions[rec.mask])
            preds.append(rec)
    return evaluate(preds, gts, classes)
