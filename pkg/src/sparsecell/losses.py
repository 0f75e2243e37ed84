"""Losses and filter rules for supervised, sparse, and attribute training.

Everything here is a pure function of (predictions, targets, config) and
differentiable w.r.t. the raw level tensors, so the training loop can mix
and match terms.  Masks follow one rule throughout: a cell outside the
supervision mask contributes nothing, bit-exactly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import Annotation, AnnotatedRegion, BoundingBox, ValidationError, region_mask
from .model import STRIDES, LevelPrediction

log = logging.getLogger(__name__)

_EPS = 1e-7


@dataclass
class SparseTrainConfig:
    t0: float = 0.70          # pseudo/candidate confidence floor
    t1: float = 0.95          # pseudo-label confidence gate
    t2: float = 2.6           # entropy gate, bits
    area_min: float = 0.0     # smallest training GT box area, px^2
    w_pl: float = 0.1
    w_tri: float = 0.1
    triplet_margin: float = 0.05
    triplet_formula: str = "hypothesis"  # "hypothesis" | "paper"
    epochs_total: int = 50
    epochs_triplet_active: int = 40

    def validate(self, n_classes: int | None = None):
        if not (0.0 <= self.t0 <= self.t1 <= 1.0):
            raise ValueError(f"need 0 <= t0 <= t1 <= 1, got t0={self.t0} t1={self.t1}")
        if n_classes is not None and not (0.0 < self.t2 <= math.log2(n_classes)):
            raise ValueError(
                f"t2={self.t2} outside (0, log2 C]={math.log2(n_classes):.3f} "
                f"for C={n_classes}"
            )
        if self.w_pl < 0 or self.w_tri < 0:
            raise ValueError("loss weights must be >= 0")
        if self.triplet_formula not in ("hypothesis", "paper"):
            raise ValueError(f"unknown triplet_formula {self.triplet_formula!r}")


@dataclass
class PseudoLabel:
    """A filtered unlabeled-region prediction promoted to a training target."""

    cell_class: int
    box: BoundingBox  # image pixels, corner-form
    conf: float

    def footprint_cell(self, stride: int, grid_hw) -> tuple:
        """(row, col) of the grid cell holding the box center at one level."""
        H, W = grid_hw
        j = min(max(int(self.box.cx // stride), 0), W - 1)
        i = min(max(int(self.box.cy // stride), 0), H - 1)
        return i, j


def confidence_score(probs, objectness: float) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size == 0:
        raise ValueError("empty probability vector")
    return float(probs.max() * objectness)


def class_entropy(probs) -> float:
    """Shannon entropy in bits of the renormalized class vector."""
    p = np.asarray(probs, dtype=np.float64)
    if p.size == 0 or np.any(p < 0):
        raise ValueError("probabilities must be non-negative and non-empty")
    total = p.sum()
    if total <= 0:
        raise ValueError("all-zero probability vector has no entropy")
    p = p / total
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def compute_area_min(dataset) -> float:
    areas = [a.box.area for r in dataset.records for a in r.annotations]
    if not areas:
        raise ValueError("dataset has no annotations; cannot compute minimum area")
    return float(min(areas))


def assign_level(box: BoundingBox, strides=STRIDES) -> int:
    """Route a target to the level whose stride best matches sqrt(w*h).

    Ties go to the coarser level.
    """
    size = math.sqrt(box.area)
    best, best_diff = 0, float("inf")
    for v, s in enumerate(strides):
        diff = abs(size - s)
        if diff <= best_diff:  # <=: later (coarser) level wins ties
            best, best_diff = v, diff
    return best


def _cell_of(box: BoundingBox, stride: int, grid_hw) -> tuple:
    H, W = grid_hw
    j = min(max(int(box.cx // stride), 0), W - 1)
    i = min(max(int(box.cy // stride), 0), H - 1)
    return i, j


def _box_iou_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """IoU of center-form (cx, cy, w, h) boxes, elementwise."""
    ax0, ay0 = a[..., 0] - a[..., 2] / 2, a[..., 1] - a[..., 3] / 2
    ax1, ay1 = a[..., 0] + a[..., 2] / 2, a[..., 1] + a[..., 3] / 2
    bx0, by0 = b[..., 0] - b[..., 2] / 2, b[..., 1] - b[..., 3] / 2
    bx1, by1 = b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2
    iw = (torch.min(ax1, bx1) - torch.max(ax0, bx0)).clamp(min=0)
    ih = (torch.min(ay1, by1) - torch.max(ay0, by0)).clamp(min=0)
    inter = iw * ih
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return inter / union.clamp(min=_EPS)


def detection_losses(levels, targets, masks=None):
    """(L_obj, L_cls, L_bbox) over all levels under per-level supervision masks.

    `targets` is a sequence of (BoundingBox, cell_class).  A target routes
    to one level by box size and marks the grid cell holding its center as
    positive there.  L_obj is binary cross-entropy on objectness over all
    mask=1 cells (positives toward 1, the rest toward 0); L_cls and L_bbox
    act on positive cells only.  Each term is averaged over its own
    contributing cell count and is 0 when nothing contributes.
    """
    dev = levels[0].obj_logit.device
    dt = levels[0].obj_logit.dtype
    if masks is None:
        masks = [np.ones(lv.grid_hw, dtype=np.float32) for lv in levels]

    routed = {v: [] for v in range(len(levels))}
    for box, cls in targets:
        routed[assign_level(box, tuple(lv.stride for lv in levels))].append((box, cls))

    obj_sum = torch.zeros((), device=dev, dtype=dt)
    obj_count = 0
    cls_sum = torch.zeros((), device=dev, dtype=dt)
    box_sum = torch.zeros((), device=dev, dtype=dt)
    pos_count = 0

    for v, lv in enumerate(levels):
        H, W = lv.grid_hw
        mask = torch.as_tensor(np.asarray(masks[v]), device=dev).to(dt)
        obj_target = torch.zeros((H, W), device=dev, dtype=dt)
        positives = []
        for box, cls in routed[v]:
            i, j = _cell_of(box, lv.stride, (H, W))
            if mask[i, j] > 0:
                obj_target[i, j] = 1.0
                positives.append((i, j, box, cls))
        bce = torch.nn.functional.binary_cross_entropy_with_logits(
            lv.obj_logit, obj_target, reduction="none")
        obj_sum = obj_sum + (bce * mask).sum()
        obj_count += int(mask.sum().item())

        if positives:
            decoded = lv.decode_boxes()
            C = lv.cls_logit.shape[-1]
            for i, j, box, cls in positives:
                cls_target = torch.zeros(C, device=dev, dtype=dt)
                cls_target[cls] = 1.0
                cls_sum = cls_sum + torch.nn.functional.binary_cross_entropy_with_logits(
                    lv.cls_logit[i, j], cls_target, reduction="mean")
                tgt = torch.tensor([box.cx, box.cy, box.w, box.h], device=dev, dtype=dt)
                box_sum = box_sum + (1.0 - _box_iou_torch(decoded[i, j], tgt))
                pos_count += 1

    zero = torch.zeros((), device=dev, dtype=dt)
    l_obj = obj_sum / obj_count if obj_count else zero
    l_cls = cls_sum / pos_count if pos_count else zero
    l_bbox = box_sum / pos_count if pos_count else zero
    return l_obj, l_cls, l_bbox


def labeled_region_loss(levels, annotations, region: AnnotatedRegion, image_dims):
    """Supervised loss restricted to the annotated region (masked per level)."""
    for j, ann in enumerate(annotations):
        if not region.contains_box_center(ann.box):
            raise ValidationError(
                f"annotation {j} center outside the annotated region"
            )
    masks = [
        region_mask(region, (lv.grid_hw[1], lv.grid_hw[0]), image_dims)
        for lv in levels
    ]
    targets = [(a.box, a.cell_class) for a in annotations]
    l_obj, l_cls, l_bbox = detection_losses(levels, targets, masks)
    return l_obj + l_cls + l_bbox


def filter_pseudo_labels(outside_preds, config: SparseTrainConfig):
    """Apply the four pseudo-label gates to outside-region predictions.

    Keeps a prediction iff conf >= t0, Area > area_min (strict), conf > t1,
    and class entropy < t2.
    """
    kept = []
    for p in outside_preds:
        conf = confidence_score(p.probs, p.objectness)
        if conf < config.t0:
            continue
        if not (p.box.area > config.area_min):
            continue
        if not (conf > config.t1):
            continue
        if not (class_entropy(p.probs) < config.t2):
            continue
        kept.append(PseudoLabel(cell_class=p.cell_class, box=p.box, conf=conf))
    return kept


def similarity_candidates(outside_preds, config: SparseTrainConfig):
    """Predictions with intermediate confidence: t0 <= conf < t1."""
    return [
        p for p in outside_preds
        if config.t0 <= confidence_score(p.probs, p.objectness) < config.t1
    ]


def gate_verdicts(outside_preds, config: SparseTrainConfig):
    """Per-prediction gate diagnostics for the filter-debug dump."""
    out = []
    for p in outside_preds:
        conf = float(confidence_score(p.probs, p.objectness))
        ent = float(class_entropy(p.probs))
        gates = {
            "t0": bool(conf >= config.t0),
            "area": bool(p.box.area > config.area_min),
            "t1": bool(conf > config.t1),
            "entropy": bool(ent < config.t2),
        }
        if all(gates.values()):
            verdict = "pseudo"
        elif config.t0 <= conf < config.t1:
            verdict = "candidate"
        else:
            verdict = "discard"
        out.append({
            "box": p.box.to_json(),
            "conf": conf,
            "entropy_bits": ent,
            "area": float(p.box.area),
            "gate_results": gates,
            "verdict": verdict,
        })
    return out


def pseudo_label_loss(levels, pseudo_labels):
    """Detection loss supervised only at pseudo-label footprint cells.

    The mask is the union of each pseudo label's center cell at every
    level; no cell outside a footprint is penalized as background.
    """
    dev = levels[0].obj_logit.device
    dt = levels[0].obj_logit.dtype
    if not pseudo_labels:
        return torch.zeros((), device=dev, dtype=dt)
    masks = []
    for lv in levels:
        m = np.zeros(lv.grid_hw, dtype=np.float32)
        for pl in pseudo_labels:
            i, j = pl.footprint_cell(lv.stride, lv.grid_hw)
            m[i, j] = 1.0
        masks.append(m)
    targets = [(pl.box, pl.cell_class) for pl in pseudo_labels]
    l_obj, l_cls, l_bbox = detection_losses(levels, targets, masks)
    return l_obj + l_cls + l_bbox


def triplet_loss(cand_feats, cand_classes, gt_feats, gt_classes,
                 margin: float = 0.05, formula: str = "hypothesis"):
    """Cosine-similarity triplet loss of uncertain predictions vs batch GT.

    Per candidate: Min_Sim = min cosine similarity to same-class GT
    features, Max_Sim = max to different-class GT.  The "hypothesis"
    hinge max(0, Max_Sim + margin - Min_Sim) is zero exactly when every
    same-class similarity beats every different-class one by the margin;
    "paper" keeps the printed max(0, Min_Sim - (Max_Sim + margin))
    variant for comparison.  Candidates lacking a same-class or a
    different-class GT in the batch are skipped; returns 0 when none
    qualify.
    """
    if len(cand_feats) == 0 or len(gt_feats) == 0:
        return torch.zeros(())
    dev = cand_feats[0].device
    dt = cand_feats[0].dtype
    gt_norms = [f.flatten() for f in gt_feats]
    terms = []
    for f, c in zip(cand_feats, cand_classes):
        f = f.flatten()
        fn = torch.linalg.vector_norm(f)
        if fn.item() == 0.0:
            log.warning("triplet: skipping zero-norm candidate feature")
            continue
        same, diff = [], []
        for g, gc in zip(gt_norms, gt_classes):
            gn = torch.linalg.vector_norm(g)
            if gn.item() == 0.0:
                log.warning("triplet: skipping zero-norm ground-truth feature")
                continue
            sim = (f @ g) / (fn * gn)
            (same if gc == c else diff).append(sim)
        if not same or not diff:
            continue
        min_sim = torch.stack(same).min()
        max_sim = torch.stack(diff).max()
        if formula == "paper":
            term = torch.clamp(min_sim - (max_sim + margin), min=0.0)
        else:
            term = torch.clamp(max_sim + margin - min_sim, min=0.0)
        terms.append(term)
    if not terms:
        return torch.zeros((), device=dev, dtype=dt)
    return torch.stack(terms).mean()


def asymmetric_attribute_loss(pred: torch.Tensor, target,
                              gamma_pos: float = 0.0, gamma_neg: float = 4.0,
                              shift: float = 0.05):
    """Asymmetric multi-label loss over the 6 attribute probabilities.

    Positive term: -(1-p)^g+ log p; negative term uses the shifted
    probability p_m = max(p - shift, 0): -p_m^g- log(1 - p_m).  Mean over
    the 6 attributes.  With g+ = g- = 0 and shift 0 this is plain BCE.
    """
    if gamma_pos < 0 or gamma_neg < 0 or not (0.0 <= shift < 1.0):
        raise ValueError("need gamma_pos, gamma_neg >= 0 and shift in [0, 1)")
    y = torch.as_tensor(target, dtype=pred.dtype, device=pred.device)
    p = pred.clamp(_EPS, 1.0 - _EPS)
    pm = (p - shift).clamp(min=0.0, max=1.0 - _EPS)
    pos = torch.pow(1.0 - p, gamma_pos) * torch.log(p)
    neg = torch.pow(pm, gamma_neg) * torch.log(1.0 - pm)
    return -(y * pos + (1.0 - y) * neg).mean()


def total_loss(mode: str, parts: dict, config: SparseTrainConfig, epoch: int = 0):
    """Composite objective for one of the three training modes.

    parts holds whichever of l_det (supervised detection sum), l_lr,
    l_pl, l_tri, l_mor the mode consumes; missing parts default to 0.
    The triplet term only counts while epoch < epochs_triplet_active.
    """
    def part(name):
        return parts.get(name, torch.zeros(()))

    if mode == "attridet":
        return part("l_det") + part("l_mor")
    if mode in ("sla_det", "sla_det_attri"):
        total = part("l_lr") + config.w_pl * part("l_pl")
        if epoch < config.epochs_triplet_active:
            total = total + config.w_tri * part("l_tri")
        if mode == "sla_det_attri":
            total = total + part("l_mor")
        return total
    raise ValueError(f"unknown training mode {mode!r}")
