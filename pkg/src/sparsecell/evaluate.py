"""Detection mAP and per-attribute F1 evaluation.

The metric core is pure (per-image prediction/GT lists in, numbers out)
so it can be checked against an independent exhaustive-matching oracle;
inference plumbing that turns a checkpoint + dataset into those lists
lives alongside it.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import ATTRIBUTE_NAMES, BoundingBox, Dataset, iou
from .model import Detector, decode_predictions, pool_region_features

log = logging.getLogger(__name__)

IOU_THRESHOLDS_50_95 = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
# exact k/100 divisions (linspace can land an ulp off, which flips the
# boundary comparison when a recall value is exactly k/100)
RECALL_POINTS = np.array([k / 100.0 for k in range(101)])


@dataclass
class EvalReport:
    map50: float
    map50_95: float
    per_class_ap: dict
    attribute_f1: dict
    n_images: int
    n_gt: int
    n_predictions: int
    config_fingerprint: str = ""
    wallclock: float = 0.0
    no_attribute_matches: bool = False

    def to_json(self) -> dict:
        return {
            "map50": self.map50,
            "map50_95": self.map50_95,
            "per_class_ap": self.per_class_ap,
            "attribute_f1": self.attribute_f1,
            "counts": {
                "images": self.n_images,
                "gt": self.n_gt,
                "predictions": self.n_predictions,
            },
            "config_fingerprint": self.config_fingerprint,
            # wallclock stays off the serialized artifact so identical runs
            # produce identical report files
            "no_attribute_matches": self.no_attribute_matches,
        }

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1, sort_keys=True)
            f.write("\n")

    def text_table(self) -> str:
        lines = [
            f"{'metric':<28}{'value':>10}",
            f"{'mAP@50':<28}{self.map50:>10.4f}",
            f"{'mAP@50-95':<28}{self.map50_95:>10.4f}",
        ]
        for name in sorted(self.per_class_ap):
            lines.append(f"{'AP@50 ' + name:<28}{self.per_class_ap[name]:>10.4f}")
        for name in ATTRIBUTE_NAMES:
            if name in self.attribute_f1:
                lines.append(f"{'F1 ' + name:<28}{self.attribute_f1[name]:>10.4f}")
        lines.append(f"{'images':<28}{self.n_images:>10d}")
        lines.append(f"{'ground truth':<28}{self.n_gt:>10d}")
        lines.append(f"{'predictions':<28}{self.n_predictions:>10d}")
        return "\n".join(lines)


def average_precision(matches, n_gt: int) -> float:
    """101-point interpolated AP from (conf, is_tp) pairs, conf-sorted.

    `matches` must already be sorted by confidence, descending.
    """
    if n_gt == 0:
        return float("nan")
    if not matches:
        return 0.0
    tp = np.cumsum([1.0 if m else 0.0 for _, m in matches])
    fp = np.cumsum([0.0 if m else 1.0 for _, m in matches])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    # precision envelope, then sample at the 101 recall points
    env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    for r in RECALL_POINTS:
        idx = np.searchsorted(recall, r, side="left")
        ap += env[idx] if idx < len(env) else 0.0
    return ap / len(RECALL_POINTS)


def match_class_predictions(preds_by_image, gts_by_image, iou_thr: float):
    """Greedy conf-ordered matching of one class; returns conf-sorted (conf, tp)."""
    flat = []
    for img_idx, preds in preds_by_image.items():
        for conf, box in preds:
            flat.append((conf, img_idx, box))
    flat.sort(key=lambda t: -t[0])
    used = {i: [False] * len(g) for i, g in gts_by_image.items()}
    out = []
    for conf, img_idx, box in flat:
        gts = gts_by_image.get(img_idx, [])
        best_iou, best_j = 0.0, -1
        for j, gbox in enumerate(gts):
            if used[img_idx][j]:
                continue
            v = iou(box, gbox)
            if v >= iou_thr and v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0:
            used[img_idx][best_j] = True
            out.append((conf, True))
        else:
            out.append((conf, False))
    return out


def detection_map(per_image_preds, per_image_gts, n_classes: int,
                  iou_thresholds=IOU_THRESHOLDS_50_95):
    """mAP over IoU thresholds.

    per_image_preds: list (one per image) of (cell_class, conf, BoundingBox);
    per_image_gts: list of (cell_class, BoundingBox).
    Returns (map at each threshold as dict, per-class AP at the first
    threshold).  Classes with no ground truth anywhere are skipped.
    """
    maps = {}
    per_class_at_first = {}
    for t_idx, thr in enumerate(iou_thresholds):
        aps = []
        for cls in range(n_classes):
            preds_by_image = {
                i: [(conf, box) for c, conf, box in preds if c == cls]
                for i, preds in enumerate(per_image_preds)
            }
            gts_by_image = {
                i: [box for c, box in gts if c == cls]
                for i, gts in enumerate(per_image_gts)
            }
            n_gt = sum(len(g) for g in gts_by_image.values())
            if n_gt == 0:
                continue
            matches = match_class_predictions(preds_by_image, gts_by_image, thr)
            ap = average_precision(matches, n_gt)
            aps.append((cls, ap))
        if not aps:
            raise ValueError("no ground-truth annotations in the test set")
        maps[thr] = float(np.mean([ap for _, ap in aps]))
        if t_idx == 0:
            per_class_at_first = {cls: ap for cls, ap in aps}
    return maps, per_class_at_first


def attribute_f1_scores(matched_pairs):
    """Per-attribute F1 from (predicted_probs, gt_flags) pairs.

    Predictions are binarized at 0.5.  Returns ({name: f1}, zero_matches).
    """
    if not matched_pairs:
        return {name: 0.0 for name in ATTRIBUTE_NAMES}, True
    pred = np.array([np.asarray(p) >= 0.5 for p, _ in matched_pairs], dtype=int)
    gt = np.array([g for _, g in matched_pairs], dtype=int)
    scores = {}
    for j, name in enumerate(ATTRIBUTE_NAMES):
        tp = int(((pred[:, j] == 1) & (gt[:, j] == 1)).sum())
        fp = int(((pred[:, j] == 1) & (gt[:, j] == 0)).sum())
        fn = int(((pred[:, j] == 0) & (gt[:, j] == 1)).sum())
        denom = 2 * tp + fp + fn
        scores[name] = (2 * tp / denom) if denom else 1.0
    return scores, False


def match_for_attributes(preds, gts, iou_thr: float = 0.5):
    """Greedy conf-ordered class-agnostic matching for attribute scoring.

    preds: (conf, BoundingBox, attr_probs); gts: (BoundingBox, attr_flags).
    Returns list of (attr_probs, attr_flags) for matched pairs.
    """
    used = [False] * len(gts)
    pairs = []
    for conf, box, probs in sorted(preds, key=lambda t: -t[0]):
        best_iou, best_j = 0.0, -1
        for j, (gbox, _) in enumerate(gts):
            if used[j]:
                continue
            v = iou(box, gbox)
            if v >= iou_thr and v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0:
            used[best_j] = True
            pairs.append((probs, gts[best_j][1]))
    return pairs


def load_image_tensor(corpus_dir, rec) -> torch.Tensor:
    img = Image.open(Path(corpus_dir) / rec.file).convert("RGB")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1)


def run_inference(model: Detector, ds: Dataset, corpus_dir,
                  conf_threshold: float = 0.1, nms_iou: float = 0.5,
                  with_attributes: bool = True):
    """Per-image decoded predictions (+ attribute probs from predicted boxes)."""
    model.eval()
    results = []
    for rec in ds.records:
        image = load_image_tensor(corpus_dir, rec)
        with torch.no_grad():
            (s1, s2), levels = model(image)
            preds = decode_predictions(levels, conf_threshold, nms_iou)
            attrs = []
            if with_attributes:
                for p in preds:
                    fused = pool_region_features((s1, s2), p.box,
                                                 (rec.width, rec.height))
                    attrs.append(model.attri_head(fused).cpu().numpy())
        results.append((rec, preds, attrs))
    return results


def evaluate_detection(model: Detector, ds: Dataset, corpus_dir,
                       iou_thresholds=IOU_THRESHOLDS_50_95,
                       conf_threshold: float = 0.1, nms_iou: float = 0.5,
                       config_fingerprint: str = "") -> EvalReport:
    """Full evaluation: mAP@50, mAP@50-95, per-class AP, attribute F1."""
    if len(ds.records) == 0:
        raise ValueError("empty test dataset")
    t0 = time.time()
    inference = run_inference(model, ds, corpus_dir, conf_threshold, nms_iou)

    per_image_preds, per_image_gts = [], []
    attr_pairs = []
    for rec, preds, attrs in inference:
        per_image_preds.append([(p.cell_class, p.conf, p.box) for p in preds])
        per_image_gts.append([(a.cell_class, a.box) for a in rec.annotations])
        attr_pairs.extend(match_for_attributes(
            [(p.conf, p.box, ap) for p, ap in zip(preds, attrs)],
            [(a.box, a.attributes) for a in rec.annotations],
        ))

    maps, per_class = detection_map(per_image_preds, per_image_gts,
                                    ds.n_classes, iou_thresholds)
    f1, no_matches = attribute_f1_scores(attr_pairs)
    if no_matches:
        log.warning("no IoU-matched detections; attribute F1 reported as 0")
    map50 = maps[iou_thresholds[0]]
    return EvalReport(
        map50=map50,
        map50_95=float(np.mean(list(maps.values()))),
        per_class_ap={ds.class_names[c]: ap for c, ap in per_class.items()},
        attribute_f1=f1,
        n_images=len(ds.records),
        n_gt=sum(len(r.annotations) for r in ds.records),
        n_predictions=sum(len(p) for p in per_image_preds),
        config_fingerprint=config_fingerprint,
        wallclock=time.time() - t0,
        no_attribute_matches=no_matches,
    )
