"""Per-film morphology summary built from accumulated detections.

Detections across the images of one film (dataset group) are pooled into
per-class counts and per-attribute positive rates, then rendered as one
templated paragraph per film plus the raw count table.  Ties in the
majority votes go to the lower class index / "absent" state; that rule is
stated in the report footer.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import numpy as np

from .data import ATTRIBUTE_NAMES


def film_of(image_id: str) -> str:
    """Dataset grouping rule: the image_id prefix before the first '_'."""
    return image_id.split("_")[0] if "_" in image_id else image_id


def accumulate(inference_results):
    """Pool detections per film.

    Input is run_inference output: (record, predictions, attribute_probs)
    per image.  Returns {film: {"images", "class_counts", "attr_positive",
    "n_detections"}}.
    """
    films = defaultdict(lambda: {
        "images": 0, "n_detections": 0,
        "class_counts": defaultdict(int),
        "attr_positive": defaultdict(int),
    })
    for rec, preds, attrs in inference_results:
        bank = films[film_of(rec.image_id)]
        bank["images"] += 1
        for p, ap in zip(preds, attrs):
            bank["n_detections"] += 1
            bank["class_counts"][p.cell_class] += 1
            for name, prob in zip(ATTRIBUTE_NAMES, np.asarray(ap)):
                if prob >= 0.5:
                    bank["attr_positive"][name] += 1
    return dict(films)


def film_paragraph(film: str, bank: dict, class_names) -> str:
    n = bank["n_detections"]
    if n == 0:
        return f"Film {film}: no cells detected across {bank['images']} image(s)."
    counts = bank["class_counts"]
    # modal class, ties to the lower class index
    modal = min(counts, key=lambda c: (-counts[c], c))
    traits = []
    for name in ATTRIBUTE_NAMES:
        pos = bank["attr_positive"][name]
        state = "present" if pos * 2 > n else "absent"
        traits.append(f"{name}: {state}")
    return (
        f"Film {film}: {n} cell(s) detected across {bank['images']} image(s). "
        f"Predominant cell type: {class_names[modal]} ({counts[modal]}/{n}). "
        f"Morphology — " + "; ".join(traits) + "."
    )


FOOTER = ("Tie rule: equal class counts resolve to the lower class index; "
          "an attribute is 'present' only on a strict majority of detections.")


def render_report(inference_results, class_names) -> str:
    films = accumulate(inference_results)
    paras = [film_paragraph(f, films[f], class_names) for f in sorted(films)]
    return "\n\n".join(paras + [FOOTER]) + "\n"


def write_counts_csv(inference_results, class_names, path) -> None:
    films = accumulate(inference_results)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["film", "images", "detections"]
                        + list(class_names) + list(ATTRIBUTE_NAMES))
        for film in sorted(films):
            bank = films[film]
            writer.writerow(
                [film, bank["images"], bank["n_detections"]]
                + [bank["class_counts"].get(i, 0) for i in range(len(class_names))]
                + [bank["attr_positive"].get(a, 0) for a in ATTRIBUTE_NAMES]
            )
