"""Deterministic training loops for the three modes, plus the ablation runner.

Modes:
  attridet       full supervision: detection losses + attribute loss
  sla_det        sparse: labeled-region + pseudo-label + triplet losses
  sla_det_attri  sla_det plus the attribute loss on labeled-region GT

Identical (seed, config, corpus) gives a byte-identical checkpoint and
loss trace on one platform.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace as dc_replace
from pathlib import Path

import numpy as np
import torch

from .data import BoundingBox, Dataset, boxes_in_region
from .evaluate import evaluate_detection, load_image_tensor
from .losses import (
    SparseTrainConfig,
    asymmetric_attribute_loss,
    compute_area_min,
    detection_losses,
    filter_pseudo_labels,
    labeled_region_loss,
    pseudo_label_loss,
    similarity_candidates,
    total_loss,
    triplet_loss,
)
from .model import Detector, DetectorConfig, decode_predictions, pool_region_features, save_checkpoint

log = logging.getLogger(__name__)

MODES = ("attridet", "sla_det", "sla_det_attri")


@dataclass
class TrainConfig:
    mode: str = "sla_det"
    epochs: int = 50
    batch_size: int = 4
    lr0: float = 0.01
    lr_final: float = 0.001
    momentum: float = 0.937
    weight_decay: float = 0.0005
    warmup_epochs: int = 3
    augment_flip: bool = True
    augment_jitter: float = 0.1
    decode_conf: float = 0.05    # decode threshold for pseudo/candidate mining
    decode_nms: float = 0.5
    enable_pl: bool = True       # ablation switches
    enable_tri: bool = True
    sparse: SparseTrainConfig = field(default_factory=SparseTrainConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Linear warmup into a cosine decay from lr0 to lr_final."""
    if epoch < cfg.warmup_epochs:
        frac = (epoch + 1) / cfg.warmup_epochs
        return cfg.lr0 * (0.1 + 0.9 * frac)
    span = max(cfg.epochs - cfg.warmup_epochs, 1)
    t = (epoch - cfg.warmup_epochs) / span
    return cfg.lr_final + (cfg.lr0 - cfg.lr_final) * 0.5 * (1 + math.cos(math.pi * t))


def _augment(image: torch.Tensor, rec, rng: np.random.Generator, cfg: TrainConfig):
    """Seeded horizontal flip + brightness jitter; boxes/region flip too."""
    annotations = rec.annotations
    region = rec.region
    if cfg.augment_flip and rng.random() < 0.5:
        image = torch.flip(image, dims=[2])
        W = rec.width

        def flip_box(b):
            return BoundingBox(W - b.x - b.w, b.y, b.w, b.h)

        annotations = tuple(dc_replace(a, box=flip_box(a.box)) for a in annotations)
        region = dc_replace(region, rect=flip_box(region.rect))
    if cfg.augment_jitter > 0:
        scale = 1.0 + float(rng.uniform(-cfg.augment_jitter, cfg.augment_jitter))
        image = (image * scale).clamp(0.0, 1.0)
    return image, annotations, region


def _attribute_loss_for(model, features, annotations, image_dims):
    """Asymmetric attribute loss over GT boxes, pooled from the backbone."""
    if not annotations:
        return torch.zeros(())
    fused = torch.stack([
        pool_region_features(features, a.box, image_dims) for a in annotations
    ])
    probs = model.attri_head(fused)
    targets = torch.tensor([a.attributes for a in annotations], dtype=probs.dtype)
    return asymmetric_attribute_loss(probs, targets)


def _image_loss(model: Detector, image, annotations, region, image_dims,
                cfg: TrainConfig, epoch: int):
    """Composite loss for one image; returns (loss, component floats)."""
    (s1, s2), levels = model(image)
    parts = {}
    comp = {}

    if cfg.mode == "attridet":
        l_obj, l_cls, l_bbox = detection_losses(
            levels, [(a.box, a.cell_class) for a in annotations])
        parts["l_det"] = l_obj + l_cls + l_bbox
        parts["l_mor"] = _attribute_loss_for(model, (s1, s2), annotations, image_dims)
        comp = {"l_det": float(parts["l_det"].detach()), "l_mor": float(parts["l_mor"].detach())}
    else:
        parts["l_lr"] = labeled_region_loss(levels, annotations, region, image_dims)
        comp["l_lr"] = float(parts["l_lr"].detach())
        comp["l_pl"] = 0.0
        comp["l_tri"] = 0.0
        need_mining = cfg.enable_pl or (cfg.enable_tri
                                        and epoch < cfg.sparse.epochs_triplet_active)
        if need_mining:
            decoded = decode_predictions(levels, cfg.decode_conf, cfg.decode_nms)
            _, outside = boxes_in_region(decoded, region)
            if cfg.enable_pl:
                pseudos = filter_pseudo_labels(outside, cfg.sparse)
                parts["l_pl"] = pseudo_label_loss(levels, pseudos)
                comp["l_pl"] = float(parts["l_pl"].detach())
            if cfg.enable_tri and epoch < cfg.sparse.epochs_triplet_active and annotations:
                cands = similarity_candidates(outside, cfg.sparse)
                if cands:
                    cand_feats = [pool_region_features((s1, s2), p.box, image_dims)
                                  for p in cands]
                    gt_feats = [pool_region_features((s1, s2), a.box, image_dims)
                                for a in annotations]
                    parts["l_tri"] = triplet_loss(
                        cand_feats, [p.cell_class for p in cands],
                        gt_feats, [a.cell_class for a in annotations],
                        margin=cfg.sparse.triplet_margin,
                        formula=cfg.sparse.triplet_formula)
                    comp["l_tri"] = float(parts["l_tri"].detach())
        if cfg.mode == "sla_det_attri":
            parts["l_mor"] = _attribute_loss_for(model, (s1, s2), annotations, image_dims)
            comp["l_mor"] = float(parts["l_mor"].detach())

    if not cfg.enable_pl:
        parts.pop("l_pl", None)
    if not cfg.enable_tri:
        parts.pop("l_tri", None)
    loss = total_loss(cfg.mode, parts, cfg.sparse, epoch)
    comp["total"] = float(loss.detach())
    return loss, comp


def train(train_ds: Dataset, corpus_dir, cfg: TrainConfig, seed: int,
          checkpoint_path=None):
    """Train one model; returns (model, trace).

    trace is a list of per-epoch dicts with the mean of every loss
    component and the learning rate.
    """
    cfg.validate()
    if cfg.mode != "attridet":
        if all(r.fully_annotated for r in train_ds.records) and cfg.epochs > 0:
            log.info("sparse mode on fully annotated data: reduces to supervised")
        if any(r.region is None for r in train_ds.records):
            raise ValueError("sparse modes require region annotations")
    sparse = dc_replace(cfg.sparse, area_min=compute_area_min(train_ds))
    max_t2 = math.log2(train_ds.n_classes)
    if sparse.t2 > max_t2:
        log.info("clamping entropy gate t2 from %.3f to log2(C)=%.3f",
                 sparse.t2, max_t2)
        sparse = dc_replace(sparse, t2=max_t2)
    sparse.validate(train_ds.n_classes)
    cfg = dc_replace(cfg, sparse=sparse,
                     detector=dc_replace(cfg.detector, n_classes=train_ds.n_classes))

    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    model = Detector(cfg.detector)
    model.train()
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr0, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)

    trace = []
    n = len(train_ds.records)
    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg, epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        order_rng = np.random.default_rng([seed, epoch])
        order = order_rng.permutation(n)
        sums, counts = {}, 0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            opt.zero_grad()
            batch_loss = torch.zeros(())
            for idx in batch:
                rec = train_ds.records[idx]
                aug_rng = np.random.default_rng([seed, epoch, int(idx)])
                image = load_image_tensor(corpus_dir, rec)
                image, anns, region = _augment(image, rec, aug_rng, cfg)
                loss, comp = _image_loss(model, image, anns, region,
                                         (rec.width, rec.height), cfg, epoch)
                batch_loss = batch_loss + loss / len(batch)
                for k, v in comp.items():
                    sums[k] = sums.get(k, 0.0) + v
                counts += 1
            if batch_loss.requires_grad:
                batch_loss.backward()
                opt.step()
        epoch_row = {k: v / counts for k, v in sums.items()}
        epoch_row.update(epoch=epoch, lr=lr)
        trace.append(epoch_row)
        log.info("epoch %d/%d lr=%.4g total=%.4f", epoch + 1, cfg.epochs, lr,
                 epoch_row.get("total", float("nan")))

    model.eval()
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return model, trace


def save_trace(trace, path) -> None:
    keys = sorted({k for row in trace for k in row})
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        for row in trace:
            writer.writerow({k: row.get(k, "") for k in keys})


ABLATION_ROWS = (
    ("LR", dict(enable_pl=False, enable_tri=False)),
    ("LR+PL", dict(enable_pl=True, enable_tri=False)),
    ("LR+PL+Tri", dict(enable_pl=True, enable_tri=True)),
)


def run_ablation(train_ds: Dataset, test_ds: Dataset, corpus_dir,
                 cfg: TrainConfig, n_seeds: int = 3, base_seed: int = 0,
                 out_dir=None, eval_conf: float = 0.1, eval_nms: float = 0.5):
    """Train each loss configuration per seed; returns the summary table.

    Rows differ only in which loss terms are enabled.  The table holds
    mean and std of mAP@50-95 and mAP@50 over seeds.
    """
    if n_seeds < 1:
        raise ValueError("need at least one seed")
    # keep the attribute head in the loop when the caller asked for it;
    # plain detection ablations run in sla_det mode
    mode = cfg.mode if cfg.mode == "sla_det_attri" else "sla_det"
    table = []
    for row_name, switches in ABLATION_ROWS:
        row_cfg = dc_replace(cfg, mode=mode, **switches)
        m50, m5095, f1s = [], [], []
        for s in range(n_seeds):
            model, _ = train(train_ds, corpus_dir, row_cfg, seed=base_seed + s)
            report = evaluate_detection(model, test_ds, corpus_dir,
                                        conf_threshold=eval_conf,
                                        nms_iou=eval_nms)
            m50.append(report.map50)
            m5095.append(report.map50_95)
            f1s.append(report.attribute_f1)
            log.info("ablation %s seed %d: mAP@50=%.4f mAP@50-95=%.4f",
                     row_name, base_seed + s, report.map50, report.map50_95)
        row = {
            "row": row_name,
            "map50_mean": float(np.mean(m50)),
            "map50_std": float(np.std(m50)),
            "map50_95_mean": float(np.mean(m5095)),
            "map50_95_std": float(np.std(m5095)),
            "seeds": n_seeds,
        }
        if mode == "sla_det_attri":
            for name in sorted(f1s[0]):
                row[f"f1_{name}"] = float(np.mean([f[name] for f in f1s]))
        table.append(row)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "ablation.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(table[0]))
            writer.writeheader()
            writer.writerows(table)
        with open(out_dir / "ablation.json", "w") as f:
            json.dump(table, f, indent=1)
            f.write("\n")
    return table
