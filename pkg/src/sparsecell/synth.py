"""Deterministic synthetic blood-smear-style corpus.

Renders "cell" blobs whose class fixes the body hue and whose six binary
morphology flags each control one visible trait, so both the detector and
the attribute head have something real to learn from pixels.  Training
images are sparsified down to a single annotated rectangle covering
~region_fraction of the image; test images stay fully annotated.

Per-image random streams are derived from (seed, split, image_index), so
generation order (or parallel rendering) cannot change the output.
"""

from __future__ import annotations

import colorsys
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .data import (
    ATTRIBUTE_NAMES,
    Annotation,
    AnnotatedRegion,
    BoundingBox,
    Dataset,
    ImageRecord,
    full_region,
    save_dataset,
)

log = logging.getLogger(__name__)

# attribute -> rendering rule; kept as data so a spec can name them
DEFAULT_ATTRIBUTE_RULES = {
    "NuclearChromatin": "speckled_nucleus",
    "NuclearShape": "lobed_nucleus",
    "Nucleus": "large_nucleus",
    "Cytoplasm": "thick_rim",
    "CytoplasmicBasophilia": "dark_body",
    "CytoplasmicVacuoles": "punched_holes",
}


@dataclass(frozen=True)
class CorpusSpec:
    seed: int = 0
    n_train: int = 200
    n_test: int = 40
    image_dims: tuple = (640, 512)  # (W, H)
    n_classes: int = 6
    cells_per_image: tuple = (3, 7)
    cell_radius: tuple = (18, 28)
    region_fraction: float = 0.2
    # scales how visibly each morphology trait is drawn; 1.0 keeps the
    # subtle clinical look, larger values make the traits unambiguous
    trait_contrast: float = 1.0
    attribute_rules: dict = field(default_factory=lambda: dict(DEFAULT_ATTRIBUTE_RULES))

    def validate(self):
        if not (0.0 < self.region_fraction <= 1.0):
            raise ValueError(
                f"region_fraction must be in (0, 1], got {self.region_fraction}"
            )
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if set(self.attribute_rules) != set(ATTRIBUTE_NAMES):
            raise ValueError("attribute_rules must cover exactly the 6 attributes")
        if self.cell_radius[0] < 4:
            raise ValueError("cell_radius too small to render traits")
        if not (1.0 <= self.trait_contrast <= 2.0):
            raise ValueError(
                f"trait_contrast must be in [1, 2], got {self.trait_contrast}"
            )


def class_color(cls: int, n_classes: int, basophilic: bool,
                contrast: float = 1.0) -> np.ndarray:
    """Body RGB for a class; hue is the class signature, basophilia darkens.

    `contrast` >= 1 widens the saturation/value gap between the
    basophilic and normal looks; 1.0 is the baseline.
    """
    hue = (0.10 + 0.80 * cls / n_classes) % 1.0
    d = contrast - 1.0
    if basophilic:
        sat, val = min(0.75 + 0.15 * d, 0.95), max(0.55 - 0.15 * d, 0.30)
    else:
        sat, val = max(0.45 - 0.15 * d, 0.20), min(0.85 + 0.10 * d, 0.95)
    return np.array(colorsys.hsv_to_rgb(hue, sat, val)) * 255.0


def _disc_mask(xx, yy, cx, cy, r):
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def render_cell(img: np.ndarray, rng: np.random.Generator, cx, cy, r,
                cls: int, n_classes: int, attrs, contrast: float = 1.0) -> None:
    """Draw one cell in place.  `attrs` is the 6-flag tuple in schema order.

    `contrast` >= 1 enlarges/darkens the per-attribute traits; 1.0 keeps
    the baseline look bit-for-bit.
    """
    nc, ns, nuc, cyt, cb, cv = attrs
    s = contrast
    H, W, _ = img.shape
    x0, x1 = max(int(cx - r - 2), 0), min(int(cx + r + 3), W)
    y0, y1 = max(int(cy - r - 2), 0), min(int(cy + r + 3), H)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    patch = img[y0:y1, x0:x1]

    body = _disc_mask(xx, yy, cx, cy, r)
    patch[body] = class_color(cls, n_classes, bool(cb), contrast=s)

    if cyt:  # thick dark rim; extra contrast darkens it rather than
        # thickening it, so the body color stays visible
        rim = body & ~_disc_mask(xx, yy, cx, cy, r * (0.82 - 0.06 * (s - 1.0)))
        patch[rim] = patch[rim] * (0.35 - 0.15 * (s - 1.0))

    if cv:  # punched near-white holes in the cytoplasm
        for _ in range(4):
            ang = rng.uniform(0, 2 * np.pi)
            rad = rng.uniform(0.55, 0.75) * r
            hx, hy = cx + rad * np.cos(ang), cy + rad * np.sin(ang)
            hole = _disc_mask(xx, yy, hx, hy, r * (0.14 + 0.10 * (s - 1.0))) & body
            patch[hole] = (245.0, 245.0, 240.0)

    # nucleus: dark violet, size and shape controlled by flags
    nuc_r = (0.58 if nuc else 0.33) * r
    nuc_color = np.array(colorsys.hsv_to_rgb(0.78, 0.70, 0.35)) * 255.0
    if ns:  # two lobes
        # higher contrast pulls the lobes apart while shrinking them, so
        # the silhouette goes dumbbell without growing the total dark area
        # (which is the Nucleus-size cue)
        off = r * (0.30 + 0.25 * (s - 1.0))
        ang = rng.uniform(0, np.pi)
        dx, dy = off * np.cos(ang), off * np.sin(ang)
        lobe_r = nuc_r * (0.78 - 0.22 * (s - 1.0))
        nmask = (_disc_mask(xx, yy, cx - dx, cy - dy, lobe_r)
                 | _disc_mask(xx, yy, cx + dx, cy + dy, lobe_r))
    else:
        nmask = _disc_mask(xx, yy, cx, cy, nuc_r)
    nmask &= body
    patch[nmask] = nuc_color

    if nc:  # coarse chromatin: dark speckles on the nucleus
        speck = (rng.random(nmask.shape) < min(0.30 * s, 0.5)) & nmask
        patch[speck] = nuc_color * (0.35 - 0.15 * (s - 1.0))


def _render_distractors(img, rng, n, radius):
    """Unannotated pale 'RBC' discs standing in for background cells."""
    H, W, _ = img.shape
    for _ in range(n):
        cx, cy = rng.uniform(0, W), rng.uniform(0, H)
        r = rng.uniform(0.5, 0.8) * radius
        x0, x1 = max(int(cx - r - 1), 0), min(int(cx + r + 2), W)
        y0, y1 = max(int(cy - r - 1), 0), min(int(cy + r + 2), H)
        if x0 >= x1 or y0 >= y1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        disc = _disc_mask(xx, yy, cx, cy, r)
        ring = disc & ~_disc_mask(xx, yy, cx, cy, r * 0.55)
        img[y0:y1, x0:x1][disc] = (235.0, 185.0, 180.0)
        img[y0:y1, x0:x1][ring] = (225.0, 160.0, 155.0)


def render_image(spec: CorpusSpec, rng: np.random.Generator):
    """Render one fully annotated image; returns (uint8 array, annotations)."""
    W, H = spec.image_dims
    img = np.full((H, W, 3), (232.0, 227.0, 218.0), dtype=np.float64)
    img += rng.normal(0.0, 5.0, size=img.shape)
    _render_distractors(img, rng, rng.integers(8, 16), spec.cell_radius[1])

    n_cells = int(rng.integers(spec.cells_per_image[0], spec.cells_per_image[1] + 1))
    placed = []
    anns = []
    attempts = 0
    while len(placed) < n_cells and attempts < 200:
        attempts += 1
        r = rng.uniform(*spec.cell_radius)
        cx = rng.uniform(r + 2, W - r - 2)
        cy = rng.uniform(r + 2, H - r - 2)
        # rejection sampling keeps cell bodies essentially separated
        if any((cx - px) ** 2 + (cy - py) ** 2 < (0.9 * (r + pr)) ** 2
               for px, py, pr in placed):
            continue
        cls = int(rng.integers(0, spec.n_classes))
        attrs = tuple(int(b) for b in rng.random(6) < 0.5)
        render_cell(img, rng, cx, cy, r, cls, spec.n_classes, attrs,
                    contrast=spec.trait_contrast)
        placed.append((cx, cy, r))
        box = BoundingBox(cx - r - 2, cy - r - 2, 2 * r + 4, 2 * r + 4).clamped(W, H)
        anns.append(Annotation(box=box, cell_class=cls, attributes=attrs))
    return np.clip(img, 0, 255).astype(np.uint8), anns


def sample_region(rng: np.random.Generator, image_dims, fraction: float) -> AnnotatedRegion:
    """Uniformly placed rectangle of area fraction*W*H, aspect in [0.5, 2]."""
    W, H = image_dims
    if fraction >= 1.0:
        return full_region(W, H)
    area = fraction * W * H
    for _ in range(100):
        aspect = rng.uniform(0.5, 2.0)  # w/h
        rw, rh = np.sqrt(area * aspect), np.sqrt(area / aspect)
        if rw <= W and rh <= H:
            break
    rw, rh = min(rw, W), min(rh, H)
    rx = rng.uniform(0, W - rw)
    ry = rng.uniform(0, H - rh)
    return AnnotatedRegion(BoundingBox(rx, ry, rw, rh))


def _image_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, {"train": 1, "test": 2, "sparsify": 3}[split], index])


def generate_corpus(spec: CorpusSpec, out_dir):
    """Write PNGs + train/test manifests; returns (train_path, test_path)."""
    spec.validate()
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IOError(f"cannot create corpus directory {out_dir}: {e}") from e

    class_names = tuple(f"class_{k}" for k in range(spec.n_classes))
    manifests = {}
    for split, count in (("train", spec.n_train), ("test", spec.n_test)):
        records = []
        for i in range(count):
            rng = _image_rng(spec.seed, split, i)
            img, anns = render_image(spec, rng)
            image_id = f"{split}_{i:05d}"
            rel = f"images/{image_id}.png"
            Image.fromarray(img).save(out_dir / rel)
            W, H = spec.image_dims
            if split == "train":
                region = sample_region(rng, spec.image_dims, spec.region_fraction)
                anns = [a for a in anns if region.contains_box_center(a.box)]
            else:
                region = full_region(W, H)
            records.append(ImageRecord(
                image_id=image_id, file=rel, width=W, height=H,
                region=region, annotations=tuple(anns),
            ))
        ds = Dataset(records=tuple(records), class_names=class_names)
        path = out_dir / f"{split}.json"
        save_dataset(ds, path)
        manifests[split] = path
    log.info("corpus written to %s", out_dir)
    return manifests["train"], manifests["test"]


def sparsify(ds: Dataset, region_fraction: float, seed: int) -> Dataset:
    """Reduce a fully annotated dataset to one annotated region per image.

    Annotations whose box centers fall outside the sampled region are
    dropped; the input dataset is left untouched.
    """
    if not (0.0 < region_fraction <= 1.0):
        raise ValueError(f"region_fraction must be in (0, 1], got {region_fraction}")
    out = []
    for i, rec in enumerate(ds.records):
        rng = _image_rng(seed, "sparsify", i)
        region = sample_region(rng, (rec.width, rec.height), region_fraction)
        kept = tuple(a for a in rec.annotations if region.contains_box_center(a.box))
        out.append(replace(rec, region=region, annotations=kept))
    return Dataset(records=tuple(out), class_names=ds.class_names,
                   attribute_names=ds.attribute_names)
