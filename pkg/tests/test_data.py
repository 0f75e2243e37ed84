import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsecell.data import (
    ATTRIBUTE_NAMES,
    Annotation,
    AnnotatedRegion,
    BoundingBox,
    ValidationError,
    boxes_in_region,
    full_region,
    load_dataset,
    normalize_bbox,
    region_mask,
    save_dataset,
)
from oracles import point_in_rect


def manifest_doc(images):
    return {
        "schema_version": 1,
        "classes": ["a", "b", "c"],
        "attributes": list(ATTRIBUTE_NAMES),
        "images": images,
    }


def image_entry(image_id, width=100, height=80, region=None, annotations=()):
    return {
        "image_id": image_id, "file": f"{image_id}.png",
        "width": width, "height": height, "region": region,
        "annotations": list(annotations),
    }


def ann_entry(x, y, w, h, cls=0, attrs=(0, 0, 0, 0, 0, 0)):
    return {"box": {"x": x, "y": y, "w": w, "h": h},
            "cell_class": cls, "attributes": list(attrs)}


class TestLoadDataset:
    def test_round_trip(self, tmp_path):
        doc = manifest_doc([
            image_entry("img_b", annotations=[ann_entry(10, 10, 20, 20, cls=1)]),
            image_entry("img_a"),
        ])
        path = tmp_path / "m.json"
        path.write_text(json.dumps(doc))
        ds = load_dataset(path)
        assert len(ds) == 2
        assert ds.n_classes == 3
        # deterministic order: sorted by image_id
        assert [r.image_id for r in ds.records] == ["img_a", "img_b"]
        out = tmp_path / "out.json"
        save_dataset(ds, out)
        assert load_dataset(out) == ds

    def test_missing_file(self, tmp_path):
        with pytest.raises(IOError):
            load_dataset(tmp_path / "nope.json")

    def test_box_clamped_with_warning(self, tmp_path, caplog):
        doc = manifest_doc([
            image_entry("i", annotations=[ann_entry(90, 10, 30, 20)]),
        ])
        path = tmp_path / "m.json"
        path.write_text(json.dumps(doc))
        with caplog.at_level("WARNING"):
            ds = load_dataset(path)
        assert "clamped" in caplog.text
        box = ds.records[0].annotations[0].box
        assert box.x + box.w <= 100

    def test_center_outside_region_rejected(self, tmp_path):
        doc = manifest_doc([
            image_entry("i", region={"x": 0, "y": 0, "w": 30, "h": 30},
                        annotations=[ann_entry(60, 60, 10, 10)]),
        ])
        path = tmp_path / "m.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(ValidationError, match="outside annotated region"):
            load_dataset(path)

    def test_schema_violation_names_field(self, tmp_path):
        doc = manifest_doc([image_entry("i")])
        del doc["classes"]
        path = tmp_path / "m.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(ValidationError, match="classes"):
            load_dataset(path)

    def test_attribute_arity_enforced(self):
        with pytest.raises(ValidationError):
            Annotation(box=BoundingBox(0, 0, 5, 5), cell_class=0,
                       attributes=(1, 0, 1))


class TestNormalizeBbox:
    def test_simple_scaling(self):
        out = normalize_bbox(BoundingBox(64, 64, 32, 32), (640, 640), (80, 80))
        assert (out.x, out.y, out.w, out.h) == (8, 8, 4, 4)

    def test_identity(self):
        box = BoundingBox(12.5, 3.25, 7.5, 9.0)
        assert normalize_bbox(box, (640, 512), (640, 512)) == box

    def test_fractional_preserved(self):
        out = normalize_bbox(BoundingBox(100, 50, 40, 20), (1000, 500), (125, 125))
        assert (out.x, out.y, out.w, out.h) == (12.5, 12.5, 5, 5)

    def test_bad_dims(self):
        with pytest.raises(ValueError):
            normalize_bbox(BoundingBox(0, 0, 1, 1), (0, 10), (5, 5))

    @given(x=st.floats(0, 500), y=st.floats(0, 400),
           w=st.floats(0.1, 100), h=st.floats(0.1, 100))
    @settings(max_examples=50, deadline=None)
    def test_round_trip_within_1e9(self, x, y, w, h):
        box = BoundingBox(x, y, w, h)
        down = normalize_bbox(box, (640, 512), (80, 64))
        back = normalize_bbox(down, (80, 64), (640, 512))
        for a, b in zip((back.x, back.y, back.w, back.h), (x, y, w, h)):
            assert a == pytest.approx(b, rel=1e-9, abs=1e-9)


class TestRegionMask:
    def test_full_image_all_ones(self):
        m = region_mask(full_region(640, 512), (20, 16), (640, 512))
        assert m.shape == (16, 20)
        assert m.sum() == 16 * 20

    def test_left_half(self):
        region = AnnotatedRegion(BoundingBox(0, 0, 50, 100))
        m = region_mask(region, (10, 10), (100, 100))
        assert (m[:, :5] == 1).all()
        assert (m[:, 5:] == 0).all()

    def test_one_fifth_centered_patch(self):
        # enumerate cell centers against the rectangle: mask fraction near 1/5
        W = H = 200
        rw = rh = np.sqrt(0.2) * 200
        region = AnnotatedRegion(
            BoundingBox((W - rw) / 2, (H - rh) / 2, rw, rh))
        m = region_mask(region, (20, 20), (W, H))
        frac = m.sum() / 400
        assert 0.15 <= frac <= 0.25
        # cross-check every cell against the brute-force point test
        r = region.rect
        for i in range(20):
            for j in range(20):
                cx, cy = (j + 0.5) * 10, (i + 0.5) * 10
                assert bool(m[i, j]) == point_in_rect(
                    cx, cy, r.x, r.y, r.w, r.h)


class TestBoxesInRegion:
    def test_all_inside(self):
        region = AnnotatedRegion(BoundingBox(0, 0, 100, 100))
        boxes = [BoundingBox(10, 10, 5, 5), BoundingBox(50, 50, 5, 5)]
        inside, outside = boxes_in_region(boxes, region)
        assert inside == boxes and outside == []

    def test_boundary_counts_as_inside(self):
        region = AnnotatedRegion(BoundingBox(0, 0, 50, 50))
        box = BoundingBox(45, 20, 10, 10)  # center exactly on x = 50
        inside, _ = boxes_in_region([box], region)
        assert inside == [box]

    @given(st.data())
    @settings(max_examples=30, deadline=None)
    def test_partition_property(self, data):
        rng_boxes = data.draw(st.lists(
            st.tuples(st.floats(0, 90), st.floats(0, 90),
                      st.floats(1, 20), st.floats(1, 20)),
            min_size=0, max_size=30))
        rx = data.draw(st.floats(0, 60))
        ry = data.draw(st.floats(0, 60))
        region = AnnotatedRegion(BoundingBox(rx, ry,
                                             data.draw(st.floats(1, 50)),
                                             data.draw(st.floats(1, 50))))
        boxes = [BoundingBox(*t) for t in rng_boxes]
        inside, outside = boxes_in_region(boxes, region)
        assert len(inside) + len(outside) == len(boxes)
        assert set(map(id, inside)).isdisjoint(set(map(id, outside)))
        r = region.rect
        for b in boxes:
            expect_inside = point_in_rect(b.cx, b.cy, r.x, r.y, r.w, r.h)
            assert (b in inside) == expect_inside
