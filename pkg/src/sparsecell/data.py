"""Dataset and prediction data model shared by every other module.

Boxes are stored corner-form (x, y = top-left) in manifest files and
converted to center-form only where grid assignment needs it.  All types
are immutable after load; operations here are pure functions.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

ATTRIBUTE_NAMES = (
    "NuclearChromatin",
    "NuclearShape",
    "Nucleus",
    "Cytoplasm",
    "CytoplasmicBasophilia",
    "CytoplasmicVacuoles",
)
N_ATTRIBUTES = len(ATTRIBUTE_NAMES)

SCHEMA_VERSION = 1


class ValidationError(ValueError):
    """Manifest content violates the dataset schema."""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box, corner-form: (x, y) is the top-left, in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValidationError(f"box needs w > 0 and h > 0, got {self}")

    @property
    def cx(self) -> float:
        return self.x + self.w / 2.0

    @property
    def cy(self) -> float:
        return self.y + self.h / 2.0

    @property
    def area(self) -> float:
        return self.w * self.h

    def contains_point(self, px: float, py: float) -> bool:
        # closed rectangle: boundary counts as inside
        return self.x <= px <= self.x + self.w and self.y <= py <= self.y + self.h

    def clamped(self, width: float, height: float) -> "BoundingBox":
        """Clamp to image bounds, keeping at least a sliver of extent."""
        x0 = min(max(self.x, 0.0), width - 1.0)
        y0 = min(max(self.y, 0.0), height - 1.0)
        x1 = min(self.x + self.w, width)
        y1 = min(self.y + self.h, height)
        return BoundingBox(x0, y0, max(x1 - x0, 1e-6), max(y1 - y0, 1e-6))

    def as_xyxy(self) -> tuple:
        return (self.x, self.y, self.x + self.w, self.y + self.h)

    def to_json(self) -> dict:
        return {"x": float(self.x), "y": float(self.y),
                "w": float(self.w), "h": float(self.h)}

    @staticmethod
    def from_json(d: dict) -> "BoundingBox":
        return BoundingBox(float(d["x"]), float(d["y"]), float(d["w"]), float(d["h"]))


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ax0, ay0, ax1, ay1 = a.as_xyxy()
    bx0, by0, bx1, by1 = b.as_xyxy()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class Annotation:
    box: BoundingBox
    cell_class: int
    attributes: tuple = field(default_factory=lambda: (0,) * N_ATTRIBUTES)

    def __post_init__(self):
        if len(self.attributes) != N_ATTRIBUTES:
            raise ValidationError(
                f"attribute vector must have {N_ATTRIBUTES} entries, "
                f"got {len(self.attributes)}"
            )
        if any(a not in (0, 1) for a in self.attributes):
            raise ValidationError(f"attributes must be binary, got {self.attributes}")
        if self.cell_class < 0:
            raise ValidationError(f"cell_class must be >= 0, got {self.cell_class}")

    def to_json(self) -> dict:
        return {
            "box": self.box.to_json(),
            "cell_class": self.cell_class,
            "attributes": list(self.attributes),
        }

    @staticmethod
    def from_json(d: dict) -> "Annotation":
        return Annotation(
            box=BoundingBox.from_json(d["box"]),
            cell_class=int(d["cell_class"]),
            attributes=tuple(int(a) for a in d["attributes"]),
        )


@dataclass(frozen=True)
class AnnotatedRegion:
    """The single rectangle of an image inside which every cell is labeled."""

    rect: BoundingBox

    def contains_box_center(self, box: BoundingBox) -> bool:
        return self.rect.contains_point(box.cx, box.cy)


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    file: str
    width: int
    height: int
    region: AnnotatedRegion  # full-image rect for fully annotated records
    annotations: tuple

    @property
    def fully_annotated(self) -> bool:
        r = self.region.rect
        return r.x <= 0 and r.y <= 0 and r.w >= self.width and r.h >= self.height


@dataclass(frozen=True)
class Dataset:
    records: tuple
    class_names: tuple
    attribute_names: tuple = ATTRIBUTE_NAMES

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def __len__(self):
        return len(self.records)


def full_region(width: float, height: float) -> AnnotatedRegion:
    return AnnotatedRegion(BoundingBox(0.0, 0.0, float(width), float(height)))


def _validate_record(rec: ImageRecord, n_classes: int):
    for j, ann in enumerate(rec.annotations):
        if ann.cell_class >= n_classes:
            raise ValidationError(
                f"record {rec.image_id} annotation {j}: cell_class "
                f"{ann.cell_class} >= C={n_classes}"
            )
        if not rec.region.contains_box_center(ann.box):
            raise ValidationError(
                f"record {rec.image_id} annotation {j}: box center "
                f"({ann.box.cx:.1f}, {ann.box.cy:.1f}) outside annotated region"
            )


def load_dataset(path) -> Dataset:
    """Load and validate a JSON dataset manifest.

    Boxes extending past image bounds are clamped (with a warning) rather
    than rejected.  Records come back sorted by image_id.
    """
    path = Path(path)
    if not path.exists():
        raise IOError(f"dataset manifest not found: {path}")
    with open(path) as f:
        doc = json.load(f)
    for key in ("schema_version", "classes", "attributes", "images"):
        if key not in doc:
            raise ValidationError(f"manifest missing key '{key}'")
    if list(doc["attributes"]) != list(ATTRIBUTE_NAMES):
        raise ValidationError(
            f"manifest attribute names {doc['attributes']} do not match "
            f"the fixed 6-attribute schema"
        )
    class_names = tuple(doc["classes"])
    records = []
    for img in doc["images"]:
        w, h = int(img["width"]), int(img["height"])
        anns = []
        for j, a in enumerate(img.get("annotations", [])):
            ann = Annotation.from_json(a)
            clamped = ann.box.clamped(w, h)
            if clamped != ann.box:
                log.warning(
                    "record %s annotation %d: box clamped to image bounds",
                    img["image_id"], j,
                )
                ann = replace(ann, box=clamped)
            anns.append(ann)
        if img.get("region") is None:
            region = full_region(w, h)
        else:
            region = AnnotatedRegion(BoundingBox.from_json(img["region"]))
        rec = ImageRecord(
            image_id=str(img["image_id"]),
            file=str(img.get("file", "")),
            width=w,
            height=h,
            region=region,
            annotations=tuple(anns),
        )
        _validate_record(rec, len(class_names))
        records.append(rec)
    records.sort(key=lambda r: r.image_id)
    return Dataset(records=tuple(records), class_names=class_names)


def save_dataset(ds: Dataset, path) -> None:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "classes": list(ds.class_names),
        "attributes": list(ds.attribute_names),
        "images": [
            {
                "image_id": r.image_id,
                "file": r.file,
                "width": r.width,
                "height": r.height,
                "region": None if r.fully_annotated else r.region.rect.to_json(),
                "annotations": [a.to_json() for a in r.annotations],
            }
            for r in ds.records
        ],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def normalize_bbox(box: BoundingBox, image_dims, level_dims) -> BoundingBox:
    """Rescale a box from image pixels to feature-level coordinates.

    Fractional coordinates are preserved; nothing is rounded.
    """
    W, H = image_dims
    Wj, Hj = level_dims
    if W <= 0 or H <= 0 or Wj <= 0 or Hj <= 0:
        raise ValueError(f"dims must be positive, got image={image_dims} level={level_dims}")
    sx, sy = Wj / W, Hj / H
    return BoundingBox(box.x * sx, box.y * sy, box.w * sx, box.h * sy)


def region_mask(region: AnnotatedRegion, level_dims, image_dims) -> np.ndarray:
    """Binary (H_v, W_v) grid: 1 where the cell center falls inside the region.

    The region rectangle is first rescaled to level coordinates; a grid
    cell belongs to the region iff its center lies in the closed rectangle.
    """
    Wv, Hv = level_dims
    r = normalize_bbox(region.rect, image_dims, level_dims)
    xs = np.arange(Wv) + 0.5
    ys = np.arange(Hv) + 0.5
    in_x = (xs >= r.x) & (xs <= r.x + r.w)
    in_y = (ys >= r.y) & (ys <= r.y + r.h)
    return (in_y[:, None] & in_x[None, :]).astype(np.float32)


def boxes_in_region(boxes, region: AnnotatedRegion):
    """Partition boxes into (inside, outside) by center membership.

    `boxes` is any sequence whose elements expose a BoundingBox via
    `.box` or are boxes themselves.  Boundary centers count as inside.
    """
    inside, outside = [], []
    for item in boxes:
        box = item.box if hasattr(item, "box") else item
        (inside if region.contains_box_center(box) else outside).append(item)
    return inside, outside
