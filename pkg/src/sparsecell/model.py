"""Toy one-stage anchor-free detector plus the attribute head.

Three prediction levels at strides 8/16/32, one prediction per grid cell.
The two early feature maps (strides 8 and 16) feed region pooling for the
attribute head and the similarity branch.  Architecture widths are small
on purpose; the contract other modules rely on is only the multi-level
map shapes and the per-cell (objectness, class vector, box) structure.
"""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .data import BoundingBox, normalize_bbox

log = logging.getLogger(__name__)

STRIDES = (8, 16, 32)
POOLED_HW = (24, 30)  # (H_out, W_out) of region pooling

CHECKPOINT_MAGIC = b"SCCK"
CHECKPOINT_VERSION = 1


class CheckpointVersionError(RuntimeError):
    """Checkpoint magic/schema version does not match this build."""


@dataclass
class DetectorConfig:
    n_classes: int = 6
    c1: int = 32           # channels of the stride-8 map S_1
    c2: int = 64           # channels of the stride-16 map S_2
    c3: int = 64           # channels of the stride-32 map
    head_width: int = 64   # channels of the per-level prediction head
    attri_fc: tuple = (1024, 256)
    attri_dropout: float = 0.2

    def to_json(self) -> dict:
        return {
            "n_classes": self.n_classes, "c1": self.c1, "c2": self.c2,
            "c3": self.c3, "head_width": self.head_width,
            "attri_fc": list(self.attri_fc),
            "attri_dropout": self.attri_dropout,
        }

    @staticmethod
    def from_json(d: dict) -> "DetectorConfig":
        return DetectorConfig(
            n_classes=int(d["n_classes"]), c1=int(d["c1"]), c2=int(d["c2"]),
            c3=int(d["c3"]), head_width=int(d["head_width"]),
            attri_fc=tuple(d["attri_fc"]),
            attri_dropout=float(d["attri_dropout"]),
        )


@dataclass
class LevelPrediction:
    """Raw per-cell outputs of one prediction level.

    Tensors keep gradients; `obj_logit` is (H, W), `cls_logit` (H, W, C),
    `box_raw` (H, W, 4) as (tx, ty, tw, th).
    """

    level_index: int
    stride: int
    obj_logit: torch.Tensor
    cls_logit: torch.Tensor
    box_raw: torch.Tensor

    @property
    def grid_hw(self):
        return tuple(self.obj_logit.shape)

    def objectness(self) -> torch.Tensor:
        return torch.sigmoid(self.obj_logit)

    def class_probs(self) -> torch.Tensor:
        return torch.sigmoid(self.cls_logit)

    def decode_boxes(self) -> torch.Tensor:
        """(H, W, 4) center-form (cx, cy, w, h) in image pixels.

        Offsets go through a sigmoid so each decoded center stays inside
        its owning cell; sizes are stride * exp(t), clamped for safety.
        """
        H, W = self.grid_hw
        t = self.box_raw
        ys = torch.arange(H, dtype=t.dtype, device=t.device)
        xs = torch.arange(W, dtype=t.dtype, device=t.device)
        cx = (xs[None, :] + torch.sigmoid(t[..., 0])) * self.stride
        cy = (ys[:, None] + torch.sigmoid(t[..., 1])) * self.stride
        wh = self.stride * torch.exp(t[..., 2:4].clamp(max=6.0))
        return torch.stack([cx, cy, wh[..., 0], wh[..., 1]], dim=-1)


@dataclass
class Prediction:
    """One decoded detection in image pixels (corner-form box)."""

    cell_class: int
    conf: float
    box: BoundingBox
    probs: np.ndarray
    objectness: float
    level_index: int = 0

    def to_json(self) -> dict:
        return {
            "cell_class": self.cell_class, "conf": self.conf,
            "box": self.box.to_json(), "objectness": self.objectness,
            "probs": [float(p) for p in self.probs],
        }


def _conv(cin, cout, stride=1):
    groups = next(g for g in (8, 4, 2, 1) if cout % g == 0)
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(groups, cout),
        nn.LeakyReLU(0.1, inplace=True),
    )


class Backbone(nn.Module):
    """Small conv stack with stride-2 downsampling to /8, /16, /32."""

    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        c1, c2, c3 = cfg.c1, cfg.c2, cfg.c3
        self.stem = nn.Sequential(
            _conv(3, 16, 2), _conv(16, 16),      # /2
            _conv(16, 24, 2), _conv(24, 24),     # /4
        )
        self.stage8 = nn.Sequential(_conv(24, c1, 2), _conv(c1, c1))    # /8
        self.stage16 = nn.Sequential(_conv(c1, c2, 2), _conv(c2, c2))   # /16
        self.stage32 = nn.Sequential(_conv(c2, c3, 2), _conv(c3, c3))   # /32

    def forward(self, x):
        x = self.stem(x)
        s1 = self.stage8(x)
        s2 = self.stage16(s1)
        s3 = self.stage32(s2)
        return s1, s2, s3


class Detector(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        C = cfg.n_classes
        self.heads = nn.ModuleList([
            nn.Sequential(_conv(c, cfg.head_width),
                          nn.Conv2d(cfg.head_width, 5 + C, 1))
            for c in (cfg.c1, cfg.c2, cfg.c3)
        ])
        # start objectness near zero: most cells are background, and a
        # neutral start makes the shared head bias absorb the background
        # gradient instead of the per-cell evidence
        with torch.no_grad():
            for head in self.heads:
                head[-1].bias[0] = -3.0
        self.attri_head = AttriHead(cfg)

    def forward(self, image: torch.Tensor):
        """image: (3, H, W) or (1, 3, H, W), dims divisible by 32.

        Returns ((S_1, S_2), [LevelPrediction per level]).
        """
        if image.dim() == 3:
            image = image[None]
        _, _, H, W = image.shape
        if H % 32 or W % 32:
            raise ValueError(f"image dims must be divisible by 32, got {W}x{H}")
        s1, s2, s3 = self.backbone(image)
        levels = []
        C = self.cfg.n_classes
        for v, (fmap, head) in enumerate(zip((s1, s2, s3), self.heads)):
            out = head(fmap)[0]  # (5+C, h, w)
            levels.append(LevelPrediction(
                level_index=v,
                stride=STRIDES[v],
                obj_logit=out[0],
                cls_logit=out[1:1 + C].permute(1, 2, 0),
                box_raw=out[1 + C:].permute(1, 2, 0),
            ))
        return (s1[0], s2[0]), levels


class AttriHead(nn.Module):
    """Three conv+maxpool blocks, then FC (1024, 256, 6) with dropout 0.2."""

    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        cin = cfg.c1 + cfg.c2
        self.convs = nn.Sequential(
            nn.Conv2d(cin, 64, 3, padding=1), nn.LeakyReLU(0.1, inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(64, 64, 3, padding=1), nn.LeakyReLU(0.1, inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(64, 64, 3, padding=1), nn.LeakyReLU(0.1, inplace=True),
            nn.MaxPool2d(2),
        )
        ph, pw = POOLED_HW
        flat = 64 * (ph // 8) * (pw // 8)
        f1, f2 = cfg.attri_fc
        self.fc = nn.Sequential(
            nn.Linear(flat, f1), nn.LeakyReLU(0.1, inplace=True),
            nn.Dropout(cfg.attri_dropout),
            nn.Linear(f1, f2), nn.LeakyReLU(0.1, inplace=True),
            nn.Dropout(cfg.attri_dropout),
            nn.Linear(f2, 6),
        )

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        """fused: (C, 24, 30) or (B, C, 24, 30) -> sigmoid probabilities (.., 6)."""
        squeeze = fused.dim() == 3
        if squeeze:
            fused = fused[None]
        x = self.convs(fused)
        x = x.flatten(1)
        out = torch.sigmoid(self.fc(x))
        return out[0] if squeeze else out


def bilinear_pool(fmap: torch.Tensor, box: BoundingBox, out_hw=POOLED_HW) -> torch.Tensor:
    """Bilinear-aligned pooling of a level-coordinate box to (C, H_out, W_out).

    One sample point per output cell, placed at the cell center inside the
    box.  Feature pixel (i, j) sits at continuous location (j+0.5, i+0.5);
    samples are clamped at the borders.  Differentiable w.r.t. `fmap`.
    """
    C, H, W = fmap.shape
    out_h, out_w = out_hw
    # minimum one-cell footprint for degenerate boxes, keeping the center
    w = max(box.w, 1.0)
    h = max(box.h, 1.0)
    x0 = box.cx - w / 2.0
    y0 = box.cy - h / 2.0
    dt = fmap.dtype
    dev = fmap.device
    sx = x0 + (torch.arange(out_w, dtype=dt, device=dev) + 0.5) * (w / out_w)
    sy = y0 + (torch.arange(out_h, dtype=dt, device=dev) + 0.5) * (h / out_h)
    u = (sx - 0.5).clamp(0.0, W - 1.0)
    v = (sy - 0.5).clamp(0.0, H - 1.0)
    j0 = u.floor().long().clamp(0, W - 2) if W > 1 else torch.zeros_like(u).long()
    i0 = v.floor().long().clamp(0, H - 2) if H > 1 else torch.zeros_like(v).long()
    fu = (u - j0.to(dt)).clamp(0.0, 1.0)
    fv = (v - i0.to(dt)).clamp(0.0, 1.0)
    j1 = (j0 + 1).clamp(max=W - 1)
    i1 = (i0 + 1).clamp(max=H - 1)

    f00 = fmap[:, i0][:, :, j0]
    f01 = fmap[:, i0][:, :, j1]
    f10 = fmap[:, i1][:, :, j0]
    f11 = fmap[:, i1][:, :, j1]
    fu = fu[None, None, :]
    fv = fv[None, :, None]
    top = f00 * (1 - fu) + f01 * fu
    bot = f10 * (1 - fu) + f11 * fu
    return top * (1 - fv) + bot * fv


def pool_region_features(features, box: BoundingBox, image_dims,
                         out_hw=POOLED_HW) -> torch.Tensor:
    """Pool and fuse the early maps over an image-pixel box.

    Each map gets the box rescaled to its own coordinates, is pooled to
    `out_hw`, and the results are channel-concatenated.
    """
    pooled = []
    W, H = image_dims
    for fmap in features:
        _, Hj, Wj = fmap.shape
        nbox = normalize_bbox(box, (W, H), (Wj, Hj))
        pooled.append(bilinear_pool(fmap, nbox, out_hw))
    return torch.cat(pooled, dim=0)


def greedy_nms(boxes, scores, iou_thr: float):
    """Indices kept by greedy class-agnostic NMS, highest score first."""
    order = sorted(range(len(boxes)), key=lambda i: -scores[i])
    keep = []
    suppressed = [False] * len(boxes)
    from .data import iou as box_iou
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        for j in order:
            if not suppressed[j] and j != i and box_iou(boxes[i], boxes[j]) > iou_thr:
                suppressed[j] = True
    return keep


def decode_predictions(levels, conf_threshold: float, nms_iou: float):
    """Flatten level grids to thresholded, NMS-filtered Predictions.

    Per cell: conf = max(class probs) * objectness, class = argmax.
    Output is sorted by confidence, descending.
    """
    if not (0.0 <= conf_threshold <= 1.0 and 0.0 <= nms_iou <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    cands = []
    for lv in levels:
        with torch.no_grad():
            obj = lv.objectness().cpu().numpy()
            probs = lv.class_probs().cpu().numpy()
            boxes = lv.decode_boxes().cpu().numpy()
        conf = probs.max(axis=-1) * obj
        ii, jj = np.nonzero(conf >= conf_threshold)
        for i, j in zip(ii, jj):
            cx, cy, w, h = boxes[i, j]
            cands.append(Prediction(
                cell_class=int(probs[i, j].argmax()),
                conf=float(conf[i, j]),
                box=BoundingBox(cx - w / 2, cy - h / 2, w, h),
                probs=probs[i, j].copy(),
                objectness=float(obj[i, j]),
                level_index=lv.level_index,
            ))
    keep = greedy_nms([c.box for c in cands], [c.conf for c in cands], nms_iou)
    out = [cands[i] for i in keep]
    out.sort(key=lambda p: -p.conf)
    return out


# ---------------------------------------------------------------------------
# checkpoint serialization: versioned binary container, bit-exact round trip

def save_checkpoint(model: Detector, path) -> None:
    tensors = []
    payload = io.BytesIO()
    offset = 0
    state = model.state_dict()
    for name in sorted(state):
        arr = state[name].detach().cpu().numpy()
        raw = np.ascontiguousarray(arr).tobytes()
        tensors.append({
            "name": name, "shape": list(arr.shape),
            "dtype": arr.dtype.name, "offset": offset, "nbytes": len(raw),
        })
        payload.write(raw)
        offset += len(raw)
    header = json.dumps({
        "schema_version": CHECKPOINT_VERSION,
        "config": model.cfg.to_json(),
        "tensors": tensors,
    }, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        f.write(payload.getvalue())


def load_checkpoint(path) -> Detector:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointVersionError(f"{path}: bad checkpoint magic")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint schema v{version}, expected v{CHECKPOINT_VERSION}"
        )
    header = json.loads(blob[12:12 + hlen].decode())
    if header.get("schema_version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: header schema version mismatch")
    base = 12 + hlen
    model = Detector(DetectorConfig.from_json(header["config"]))
    state = {}
    for t in header["tensors"]:
        raw = blob[base + t["offset"]: base + t["offset"] + t["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(t["dtype"])).reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    model.eval()
    return model
