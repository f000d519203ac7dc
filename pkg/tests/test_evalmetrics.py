import csv
import math

import numpy as np
import pytest

from wsodkit.evalmetrics import (
    AR_THRESHOLDS,
    Detection,
    GroundTruth,
    average_precision,
    average_recall,
    corloc,
    evaluate,
    format_report,
    voc_ap,
    write_metric_table,
)
from wsodkit.geometry import iou_matrix

G = (0.0, 0.0, 10.0, 10.0)
H = (20.0, 20.0, 30.0, 30.0)
MISS = (50.0, 50.0, 60.0, 60.0)


def det(img, box, conf, cls=0):
    return Detection(img, cls, box, conf)


class TestAP:
    def test_perfect(self):
        assert average_precision([det("a", G, 0.9)], [GroundTruth("a", 0, G)])["mean"] == 1.0

    def test_low_overlap(self):
        # IoU 0.3 < 0.5
        box = (0.0, 0.0, 10.0, 3.0)
        assert average_precision([det("a", box, 0.9)], [GroundTruth("a", 0, G)])["mean"] == 0.0

    def test_hand_pr_curve(self):
        gts = [GroundTruth("a", 0, G), GroundTruth("a", 0, H)]
        dets = [det("a", G, 0.9), det("a", MISS, 0.8), det("a", H, 0.7)]
        # precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1 -> 1/2 * 1 + 1/2 * 2/3
        assert average_precision(dets, gts)["mean"] == pytest.approx(5 / 6, abs=1e-9)

    def test_duplicates_count_once(self):
        gts = [GroundTruth("a", 0, G)]
        ap = average_precision([det("a", G, 0.9), det("a", G, 0.8)], gts)["mean"]
        assert ap == pytest.approx(1.0)
        ap = average_precision([det("a", MISS, 0.95), det("a", G, 0.9), det("a", G, 0.8)], gts)["mean"]
        assert ap == pytest.approx(0.5)

    def test_classes_without_gt_excluded(self):
        res = average_precision([det("a", G, 0.9), det("a", G, 0.9, cls=3)], [GroundTruth("a", 0, G)])
        assert list(res["per_class"]) == [0] and res["mean"] == 1.0

    def test_no_detections(self):
        assert average_precision([], [GroundTruth("a", 0, G)])["mean"] == 0.0

    def test_voc_ap_envelope(self):
        assert voc_ap(np.array([0.5, 0.5, 1.0]), np.array([1.0, 0.5, 2 / 3])) == pytest.approx(5 / 6)


class TestCorLoc:
    def test_all_hit(self):
        gts = [GroundTruth("a", 0, G), GroundTruth("b", 1, H)]
        assert corloc([det("a", G, 0.5), det("b", H, 0.5, cls=1)], gts)["mean"] == 1.0

    def test_missing_detection_is_miss(self):
        assert corloc([], [GroundTruth("a", 0, G)])["mean"] == 0.0

    def test_one_hit_one_miss(self):
        gts = [GroundTruth("a", 0, G), GroundTruth("b", 0, G)]
        dets = [det("a", G, 0.9), det("b", MISS, 0.9), det("b", G, 0.1)]
        assert corloc(dets, gts)["mean"] == pytest.approx(0.5, abs=1e-9)

    def test_any_gt_counts(self):
        gts = [GroundTruth("a", 0, G), GroundTruth("a", 0, H)]
        assert corloc([det("a", H, 0.9)], gts)["mean"] == 1.0


class TestAR:
    def test_thresholds(self):
        assert AR_THRESHOLDS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)

    def test_perfect(self):
        gts = [GroundTruth("a", 0, G), GroundTruth("a", 1, H)]
        dets = [det("a", G, 0.9), det("a", H, 0.8, cls=1)]
        for k in (1, 10, 100):
            assert average_recall(dets, gts, k)["all"] == 1.0

    def test_iou_055_counts_two_thresholds(self):
        gt = (0.0, 0.0, 100.0, 100.0)
        box = (0.0, 0.0, 100.0, 55.0)
        assert iou_matrix(np.array([box]), np.array([gt]))[0, 0] == 0.55
        assert average_recall([det("a", box, 0.9)], [GroundTruth("a", 0, gt)], 100)["all"] == pytest.approx(0.2, abs=1e-9)

    def test_max_dets_truncates(self):
        gts = [GroundTruth("a", 0, G), GroundTruth("a", 0, H)]
        dets = [det("a", G, 0.9), det("a", H, 0.8)]
        assert average_recall(dets, gts, 1)["all"] == pytest.approx(0.5)
        assert average_recall(dets, gts, 10)["all"] == pytest.approx(1.0)

    def test_size_buckets(self):
        small, large = (0.0, 0.0, 20.0, 20.0), (0.0, 0.0, 100.0, 100.0)
        gts = [GroundTruth("a", 0, small), GroundTruth("b", 0, large)]
        res = average_recall([det("a", small, 0.9)], gts, 100)
        assert res["small"] == 1.0 and res["large"] == 0.0 and math.isnan(res["medium"])
        assert res["all"] == pytest.approx(0.5)


def random_case(rng):
    gts, dets = [], []
    for i in range(int(rng.integers(1, 5))):
        img = f"im{i}"
        for _ in range(int(rng.integers(1, 5))):
            c = int(rng.integers(0, 3))
            xy = rng.integers(0, 60, 2)
            wh = rng.integers(4, 40, 2)
            gts.append(GroundTruth(img, c, tuple(float(v) for v in (*xy, *(xy + wh)))))
        for _ in range(int(rng.integers(0, 12))):
            if gts and rng.random() < 0.6:
                g = gts[int(rng.integers(len(gts)))]
                j = rng.integers(-4, 5, 4)
                b = np.array(g.box) + j
                if b[2] <= b[0] or b[3] <= b[1]:
                    continue
                c = g.cls if rng.random() < 0.8 else int(rng.integers(0, 3))
                dets.append(Detection(g.image_id, c, tuple(float(v) for v in b), float(rng.random())))
            else:
                xy = rng.integers(0, 80, 2)
                wh = rng.integers(2, 40, 2)
                dets.append(Detection(img, int(rng.integers(0, 3)), tuple(float(v) for v in (*xy, *(xy + wh))),
                                      float(rng.random())))
    return dets, gts


def metrics(dets, gts):
    return (average_precision(dets, gts)["mean"], corloc(dets, gts)["mean"],
            average_recall(dets, gts, 100)["all"], average_recall(dets, gts, 1)["all"])


def is_false(d, gts):
    boxes = [g.box for g in gts if g.image_id == d.image_id and g.cls == d.cls]
    return not boxes or iou_matrix(np.array([d.box]), np.array(boxes)).max() < 0.5


def test_random_instances_bounds_and_invariances():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        dets, gts = random_case(rng)
        base = metrics(dets, gts)
        assert all(0.0 <= v <= 1.0 for v in base)
        # strictly monotone rescaling of confidences
        scaled = [Detection(d.image_id, d.cls, d.box, 0.5 * d.confidence ** 3 + 2) for d in dets]
        assert metrics(scaled, gts) == base
        # dropping a false detection never hurts
        false = [i for i, d in enumerate(dets) if is_false(d, gts)]
        if false:
            k = false[int(rng.integers(len(false)))]
            after = metrics(dets[:k] + dets[k + 1:], gts)
            assert all(a >= b - 1e-12 for a, b in zip(after, base))


def test_evaluate_ground_truth_as_detections():
    gts = [GroundTruth("a", 0, G), GroundTruth("a", 1, H), GroundTruth("b", 0, H)]
    res = evaluate([Detection(g.image_id, g.cls, g.box, 1.0) for g in gts], gts)
    assert res["AP50"] == 1.0 and res["CorLoc"] == 1.0
    assert {"AR1", "AR10", "AR100", "ARs", "ARm", "ARl", "AP50/0", "AP50/1"} <= set(res)


def test_table_and_report(tmp_path):
    res = {"AP50": 0.5, "AP50/0": 0.25, "AR100": 1.0}
    path = tmp_path / "m.csv"
    write_metric_table(path, res)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["class", "metric", "value"]
    assert rows[1:] == [["all", "AP50", "0.500000"], ["0", "AP50", "0.250000"], ["all", "AR100", "1.000000"]]
    assert "AP50/0" in format_report(res)


def test_detection_requires_finite_confidence():
    with pytest.raises(ValueError):
        Detection("a", 0, G, float("nan"))
