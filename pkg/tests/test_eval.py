import json
import math

import numpy as np
import pytest
import torch

from sparsecell.data import BoundingBox
from sparsecell.evaluate import (
    EvalReport,
    IOU_THRESHOLDS_50_95,
    attribute_f1_scores,
    average_precision,
    detection_map,
    match_for_attributes,
)
from sparsecell.data import ATTRIBUTE_NAMES
from oracles import reference_ap, reference_map


def random_scene(rng, n_images=8, n_classes=3, wh=(128, 128),
                 gts_per_image=(1, 5), extra_preds=(0, 4), jitter=0.0,
                 drop=0.0):
    """Build per-image GT plus predictions derived from it.

    jitter perturbs the predicted boxes; drop removes some GT from the
    predictions; extra_preds adds false positives.
    """
    preds, gts = [], []
    for _ in range(n_images):
        img_gts, img_preds = [], []
        for _ in range(rng.integers(*gts_per_image)):
            w, h = rng.uniform(10, 40, 2)
            x = rng.uniform(0, wh[0] - w)
            y = rng.uniform(0, wh[1] - h)
            cls = int(rng.integers(n_classes))
            img_gts.append((cls, BoundingBox(x, y, w, h)))
            if rng.random() >= drop:
                dx, dy = rng.normal(0, jitter, 2)
                img_preds.append((cls, float(rng.random()),
                                  BoundingBox(x + dx, y + dy, w, h)))
        for _ in range(rng.integers(*extra_preds)):
            w, h = rng.uniform(10, 40, 2)
            img_preds.append((int(rng.integers(n_classes)),
                              float(rng.random()),
                              BoundingBox(rng.uniform(0, wh[0] - w),
                                          rng.uniform(0, wh[1] - h), w, h)))
        preds.append(img_preds)
        gts.append(img_gts)
    return preds, gts


class TestAveragePrecision:
    def test_all_true_positives(self):
        matches = [(0.9, True), (0.8, True), (0.7, True)]
        assert average_precision(matches, 3) == pytest.approx(1.0)

    def test_no_predictions(self):
        assert average_precision([], 5) == 0.0

    def test_no_gt_is_nan(self):
        assert math.isnan(average_precision([(0.9, False)], 0))

    def test_half_recall(self):
        # one TP of two GT at full precision: AP = 51/101
        matches = [(0.9, True)]
        assert average_precision(matches, 2) == pytest.approx(51 / 101)


class TestDetectionMap:
    def test_perfect_detector_scores_one(self):
        rng = np.random.default_rng(0)
        preds, gts = random_scene(rng, jitter=0.0, drop=0.0,
                                  extra_preds=(0, 1))
        maps, per_class = detection_map(preds, gts, 3)
        for thr, v in maps.items():
            assert v == pytest.approx(1.0)
        assert all(ap == pytest.approx(1.0) for ap in per_class.values())

    def test_empty_predictions_score_zero(self):
        rng = np.random.default_rng(1)
        _, gts = random_scene(rng)
        maps, per_class = detection_map([[] for _ in gts], gts, 3)
        assert all(v == 0.0 for v in maps.values())

    def test_no_gt_raises(self):
        with pytest.raises(ValueError, match="ground-truth"):
            detection_map([[]], [[]], 3)

    def test_matches_reference_oracle(self):
        rng = np.random.default_rng(2)
        for trial in range(50):
            preds, gts = random_scene(
                rng, n_images=20, n_classes=4, jitter=rng.uniform(0, 8),
                drop=rng.uniform(0, 0.5), extra_preds=(0, 5))
            if not any(gts):
                continue
            for thr in (0.5, 0.75):
                maps, _ = detection_map(preds, gts, 4, iou_thresholds=(thr,))
                want = reference_map(preds, gts, 4, thr)
                assert maps[thr] == pytest.approx(want, abs=1e-6)

    def test_per_class_matches_reference(self):
        rng = np.random.default_rng(3)
        preds, gts = random_scene(rng, n_images=15, n_classes=3,
                                  jitter=4.0, drop=0.3)
        _, per_class = detection_map(preds, gts, 3, iou_thresholds=(0.5,))
        for cls, ap in per_class.items():
            cpreds = [(i, conf, (b.x, b.y, b.x + b.w, b.y + b.h))
                      for i, ps in enumerate(preds)
                      for c, conf, b in ps if c == cls]
            cgts = [(i, (b.x, b.y, b.x + b.w, b.y + b.h))
                    for i, gs in enumerate(gts)
                    for c, b in gs if c == cls]
            assert ap == pytest.approx(reference_ap(cpreds, cgts, 0.5),
                                       abs=1e-6)

    def test_duplicate_predictions_counted_once(self):
        from sparsecell.evaluate import match_class_predictions
        box = BoundingBox(10, 10, 20, 20)
        matches = match_class_predictions(
            {0: [(0.9, box), (0.8, box)]}, {0: [box]}, 0.5)
        # one GT: the higher-confidence duplicate is the sole true positive
        assert matches == [(0.9, True), (0.8, False)]

    def test_input_order_invariance(self):
        rng = np.random.default_rng(4)
        preds, gts = random_scene(rng, n_images=10, jitter=3.0, drop=0.2)
        maps_a, _ = detection_map(preds, gts, 3, iou_thresholds=(0.5,))
        shuffled = [list(p) for p in preds]
        for p in shuffled:
            rng.shuffle(p)
        maps_b, _ = detection_map(shuffled, gts, 3, iou_thresholds=(0.5,))
        assert maps_a[0.5] == pytest.approx(maps_b[0.5], abs=1e-12)

    def test_map50_95_not_above_map50(self):
        rng = np.random.default_rng(5)
        preds, gts = random_scene(rng, n_images=12, jitter=5.0, drop=0.2)
        maps, _ = detection_map(preds, gts, 3)
        vals = [maps[t] for t in IOU_THRESHOLDS_50_95]
        assert np.mean(vals) <= maps[0.5] + 1e-12
        # localization-sensitive: AP declines with stricter IoU on jittered boxes
        assert vals[-1] <= vals[0] + 1e-12

    def test_class_without_gt_skipped(self):
        gts = [[(0, BoundingBox(10, 10, 20, 20))]]
        preds = [[(0, 0.9, BoundingBox(10, 10, 20, 20)),
                  (2, 0.9, BoundingBox(50, 50, 20, 20))]]
        maps, per_class = detection_map(preds, gts, 3, iou_thresholds=(0.5,))
        assert maps[0.5] == pytest.approx(1.0)  # class 2 has no GT: skipped
        assert set(per_class) == {0}


class TestAttributeF1:
    def test_perfect_scores_one(self):
        pairs = [(np.array([0.9, 0.1, 0.8, 0.2, 0.7, 0.3]),
                  (1, 0, 1, 0, 1, 0))] * 4
        scores, empty = attribute_f1_scores(pairs)
        assert not empty
        assert all(v == pytest.approx(1.0) for v in scores.values())

    def test_zero_matches_flagged(self):
        scores, empty = attribute_f1_scores([])
        assert empty
        assert all(v == 0.0 for v in scores.values())

    def test_all_negative_attribute_scores_one(self):
        # no positives predicted or present: F1 defined as 1
        pairs = [(np.zeros(6), (0, 0, 0, 0, 0, 0))] * 3
        scores, _ = attribute_f1_scores(pairs)
        assert all(v == 1.0 for v in scores.values())

    def test_confusion_count_oracle(self):
        rng = np.random.default_rng(6)
        pairs = [(rng.random(6), tuple(rng.integers(0, 2, 6)))
                 for _ in range(200)]
        scores, _ = attribute_f1_scores(pairs)
        for j, name in enumerate(ATTRIBUTE_NAMES):
            tp = fp = fn = 0
            for probs, flags in pairs:
                p = int(probs[j] >= 0.5)
                if p and flags[j]:
                    tp += 1
                elif p:
                    fp += 1
                elif flags[j]:
                    fn += 1
            want = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 1.0
            assert scores[name] == pytest.approx(want, abs=1e-12)

    def test_binarize_at_half(self):
        pairs = [(np.array([0.5, 0.49, 0, 0, 0, 0]), (1, 1, 0, 0, 0, 0))]
        scores, _ = attribute_f1_scores(pairs)
        assert scores[ATTRIBUTE_NAMES[0]] == 1.0  # 0.5 counts as positive
        assert scores[ATTRIBUTE_NAMES[1]] == 0.0  # 0.49 does not


class TestMatchForAttributes:
    def test_class_agnostic(self):
        preds = [(0.9, BoundingBox(10, 10, 20, 20), np.full(6, 0.9))]
        gts = [(BoundingBox(10, 10, 20, 20), (1,) * 6)]
        pairs = match_for_attributes(preds, gts)
        assert len(pairs) == 1

    def test_low_iou_unmatched(self):
        preds = [(0.9, BoundingBox(0, 0, 10, 10), np.zeros(6))]
        gts = [(BoundingBox(50, 50, 10, 10), (0,) * 6)]
        assert match_for_attributes(preds, gts) == []

    def test_one_to_one(self):
        gts = [(BoundingBox(10, 10, 20, 20), (1,) * 6)]
        preds = [(0.9, BoundingBox(10, 10, 20, 20), np.ones(6)),
                 (0.8, BoundingBox(11, 11, 20, 20), np.zeros(6))]
        pairs = match_for_attributes(preds, gts)
        assert len(pairs) == 1
        assert pairs[0][0].sum() == 6  # the higher-confidence one wins


class TestEvalReport:
    def make_report(self):
        return EvalReport(
            map50=0.75, map50_95=0.5,
            per_class_ap={"a": 0.8, "b": 0.7},
            attribute_f1={n: 0.9 for n in ATTRIBUTE_NAMES},
            n_images=10, n_gt=42, n_predictions=50,
            config_fingerprint="cafe", wallclock=1.23)

    def test_json_round_trip_excludes_wallclock(self, tmp_path):
        rep = self.make_report()
        path = tmp_path / "r.json"
        rep.save(path)
        doc = json.loads(path.read_text())
        assert doc["map50"] == 0.75
        assert doc["counts"] == {"images": 10, "gt": 42, "predictions": 50}
        assert "wallclock" not in doc

    def test_identical_reports_identical_bytes(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        r1 = self.make_report()
        r2 = self.make_report()
        r2.wallclock = 99.0  # timing must not leak into the artifact
        r1.save(a)
        r2.save(b)
        assert a.read_bytes() == b.read_bytes()

    def test_text_table_contains_metrics(self):
        table = self.make_report().text_table()
        assert "mAP@50" in table and "0.7500" in table
        assert ATTRIBUTE_NAMES[0] in table
