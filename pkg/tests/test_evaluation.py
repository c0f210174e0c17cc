import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_ap, brute_force_map, enumerate_matching, raster_iou
from sdnia.detector import Detection
from sdnia.evaluation import (COCO_THRESHOLDS, TABLE7_ROWS, alpha_range, ap_from_pr, average_precision,
                              iou, iou_xyxy, map_range, measure_latency, read_detections, run_ablation,
                              write_detections, detections_to_records)
from sdnia.imagery import BoundingBox
from sdnia.nia import NIANetwork


def _gt(x1, y1, x2, y2, c=0):
    return BoundingBox.from_xyxy(c, x1, y1, x2, y2)


def _det(x1, y1, x2, y2, conf, c=0):
    return Detection(BoundingBox.from_xyxy(c, x1, y1, x2, y2), conf, c, conf)


# ---------------------------------------------------------------- iou

def test_iou_one_seventh_against_raster_oracle():
    a, b = (0, 0, 2, 2), (1, 1, 3, 3)
    oracle = raster_iou(a, b)
    assert oracle == pytest.approx(1 / 7, abs=1e-3)
    assert iou_xyxy(a, b) == pytest.approx(1 / 7, abs=1e-15)


def test_iou_identity_and_disjoint():
    a = _gt(0.1, 0.1, 0.4, 0.5)
    assert iou(a, a) == 1.0
    assert iou(a, _gt(0.5, 0.5, 0.9, 0.9)) == 0.0


def test_iou_degenerate():
    with pytest.raises(ValueError):
        iou_xyxy((0, 0, 0, 1), (0, 0, 1, 1))


@given(*[st.floats(0, 0.45) for _ in range(4)], *[st.floats(0.05, 0.5) for _ in range(4)])
@settings(max_examples=40, deadline=None)
def test_iou_symmetric_and_matches_raster(x1, y1, x2, y2, w1, h1, w2, h2):
    a, b = (x1, y1, x1 + w1, y1 + h1), (x2, y2, x2 + w2, y2 + h2)
    assert iou_xyxy(a, b) == iou_xyxy(b, a)
    assert iou_xyxy(a, b) == pytest.approx(raster_iou(a, b, 400), abs=0.02)


# ---------------------------------------------------------------- AP

def test_ap_perfect_and_empty():
    g = _gt(0.1, 0.1, 0.3, 0.3)
    assert average_precision([_det(0.1, 0.1, 0.3, 0.3, 0.9)], [g]) == 1.0
    assert average_precision([], [g]) == 0.0
    assert math.isnan(average_precision([], []))


THREE_DET_FIXTURE = (
    [_det(0.1, 0.1, 0.3, 0.3, 0.9), _det(0.6, 0.6, 0.7, 0.7, 0.8), _det(0.5, 0.1, 0.8, 0.4, 0.7)],
    [_gt(0.1, 0.1, 0.3, 0.3), _gt(0.5, 0.1, 0.8, 0.4)],
)


def test_ap_three_detection_fixture():
    dets, gts = THREE_DET_FIXTURE
    # ranks 1 and 3 are hits: exact envelope area = (1 + 2/3) / 2
    assert average_precision(dets, gts, method="continuous") == pytest.approx(0.8333333333333334, abs=1e-12)
    # 101-point: recall 0..0.50 at precision 1 (51 points), 0.51..1.00 at 2/3 (50 points)
    assert average_precision(dets, gts) == pytest.approx((51 + 50 * 2 / 3) / 101, abs=1e-12)
    flags = enumerate_matching([(d.box.xyxy, d.confidence) for d in dets], [g.xyxy for g in gts], 0.5)
    assert flags == [True, False, True]
    for method in ("continuous", "coco101"):
        assert average_precision(dets, gts, method=method) == pytest.approx(
            brute_force_ap(flags, 2, method), abs=1e-12)


def test_tie_break_follows_input_order():
    g = _gt(0.1, 0.1, 0.3, 0.3)
    far = _det(0.6, 0.6, 0.8, 0.8, 0.5)
    hit = _det(0.1, 0.1, 0.3, 0.3, 0.5)
    assert average_precision([hit, far], [g], method="continuous") == 1.0
    assert average_precision([far, hit], [g], method="continuous") == 0.5


@given(st.lists(st.booleans(), max_size=12), st.integers(0, 11), st.integers(1, 12))
@settings(max_examples=100, deadline=None)
def test_ap_monotone_when_fp_becomes_tp(flags, pos, n_gt):
    tp = np.array(flags, dtype=bool)
    if len(tp) == 0 or tp.sum() >= n_gt:
        return
    pos = pos % len(tp)
    if tp[pos]:
        return
    better = tp.copy()
    better[pos] = True
    for method in ("coco101", "continuous"):
        assert ap_from_pr(better, n_gt, method) >= ap_from_pr(tp, n_gt, method) - 1e-12


_coord = st.integers(0, 8).map(lambda v: v / 8)


@st.composite
def small_box(draw):
    x1, y1 = draw(_coord), draw(_coord)
    w, h = draw(st.integers(1, 4)), draw(st.integers(1, 4))
    return (x1, y1, min(x1 + w / 8, 1.0), min(y1 + h / 8, 1.0))


@st.composite
def fixture(draw, n_images=2, n_classes=2):
    images = []
    for _ in range(n_images):
        gts = draw(st.lists(st.tuples(small_box(), st.integers(0, n_classes - 1)), max_size=5))
        dets = draw(st.lists(st.tuples(small_box(), st.sampled_from([0.2, 0.5, 0.7, 0.9]),
                                       st.integers(0, n_classes - 1)), max_size=5))
        images.append((dets, gts))
    return images


def _to_objects(images):
    dets = [[Detection(BoundingBox.from_xyxy(c, *b), conf, c, conf) for b, conf, c in d if b[2] > b[0] and b[3] > b[1]]
            for d, _ in images]
    gts = [[BoundingBox.from_xyxy(c, *b) for b, c in g if b[2] > b[0] and b[3] > b[1]] for _, g in images]
    return dets, gts


@given(fixture())
@settings(max_examples=60, deadline=None)
def test_map_matches_brute_force_oracle(images):
    images = [([d for d in dets if d[0][2] > d[0][0] and d[0][3] > d[0][1]],
               [g for g in gts if g[0][2] > g[0][0] and g[0][3] > g[0][1]]) for dets, gts in images]
    dets, gts = _to_objects(images)
    if not any(gts):
        return
    for method in ("coco101", "continuous"):
        report = map_range(dets, gts, ["a", "b"], method=method)
        o50, oall = brute_force_map([d for d, _ in images], [g for _, g in images], 2, COCO_THRESHOLDS, method)
        assert report.map_50 == pytest.approx(o50, abs=1e-12)
        assert report.map_50_95 == pytest.approx(oall, abs=1e-12)


def test_map_perfect_detector():
    rng = np.random.default_rng(0)
    gts, dets = [], []
    for _ in range(5):
        boxes = [BoundingBox(int(rng.integers(3)), *rng.uniform(0.3, 0.7, 2), *rng.uniform(0.05, 0.3, 2))
                 for _ in range(3)]
        gts.append(boxes)
        dets.append([Detection(b, 0.9, b.class_id, 0.9) for b in boxes])
    rep = map_range(dets, gts, ["a", "b", "c"])
    assert rep.map_50 == 1.0 and rep.map_50_95 == 1.0


def test_map_iou_point_six_two_counts_three_thresholds():
    # each detection overlaps its box with IoU 0.62: a hit at 0.50, 0.55, 0.60 only
    gts = [[_gt(0.0, 0.0, 0.5, 0.5)], [_gt(0.5, 0.5, 1.0, 1.0, 1)]]
    dets = [[_det(0.0, 0.0, 0.31, 0.5, 0.8)], [_det(0.5, 0.5, 0.81, 1.0, 0.6, 1)]]
    assert iou(dets[0][0].box, gts[0][0]) == pytest.approx(0.62)
    rep = map_range(dets, gts, ["a", "b"])
    assert rep.map_50 == 1.0
    assert rep.map_50_95 == pytest.approx(0.3 * rep.map_50)


def test_map_single_class_single_image_equals_ap():
    dets, gts = THREE_DET_FIXTURE
    rep = map_range([dets], [gts], ["x"])
    assert rep.map_50 == average_precision(dets, gts, 0.5)


def test_map_single_threshold():
    dets, gts = THREE_DET_FIXTURE
    full = map_range([dets], [gts], ["x"])
    only = map_range([dets], [gts], ["x"], thresholds=[0.5])
    assert only.map_50 == only.map_50_95 == full.map_50


def test_map_excludes_absent_classes():
    dets, gts = THREE_DET_FIXTURE
    rep = map_range([dets], [gts], ["x", "absent"])
    assert math.isnan(rep.per_class_ap["absent"][0.5])
    assert rep.map_50 == average_precision(dets, gts)


def test_map_empty_test_set():
    with pytest.raises(ValueError, match="empty"):
        map_range([], [], ["a"])


def test_report_serializes(tmp_path):
    dets, gts = THREE_DET_FIXTURE
    rep = map_range([dets], [gts], ["x", "absent"])
    rep.save(tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["per_class_ap"]["absent"]["0.50"] is None
    assert "mAP@.5" in rep.summary()


def test_detection_records_round_trip(tmp_path):
    dets, _ = THREE_DET_FIXTURE
    write_detections(tmp_path / "d.jsonl", detections_to_records("im", dets))
    back = read_detections(tmp_path / "d.jsonl")["im"]
    assert [d.box for d in back] == [d.box for d in dets]
    assert [d.confidence for d in back] == [d.confidence for d in dets]


# ---------------------------------------------------------------- latency

def test_latency_single_run():
    net = NIANetwork().eval()
    rep = measure_latency(net, 16, n_warmup=1, n_runs=1)
    assert rep["p95"] == rep["mean"] and rep["n_runs"] == 1


def test_latency_grows_with_input_size():
    torch.manual_seed(0)
    net = NIANetwork().eval()
    means = [measure_latency(net, s, n_warmup=2, n_runs=5)["mean"] for s in (16, 64, 160)]
    assert means[0] < means[2] and means[1] < means[2]


# ---------------------------------------------------------------- ablation

def _fake_cell(row, overrides):
    rep = map_range([[_det(0.1, 0.1, 0.3, 0.3, 0.9)]], [[_gt(0.1, 0.1, 0.3, 0.3)]], ["x"])
    return {"VNT": rep, "VFT": rep}


def test_ablation_table6_rows():
    res = run_ablation("table6", _fake_cell)
    assert res.rows == ["YOLOv3", "SD-YOLOv3", "NIA-YOLOv3", "SDNIA-YOLOv3"]
    assert res.columns == ["VNT", "VFT"]
    assert "SDNIA-YOLOv3" in res.table()


def test_ablation_table7_alpha_ranges():
    res = run_ablation("table7", _fake_cell)
    assert res.rows == ["1.0", "[0.8:1.0]", "[0.6:1.0]", "[0.4:1.0]", "[0.2:1.0]"]
    assert TABLE7_ROWS["[0.6:1.0]"]["alphas"] == [0.6, 0.8, 1.0]
    assert alpha_range(0.2) == [0.2, 0.4, 0.6, 0.8, 1.0]


def test_ablation_empty_grid():
    res = run_ablation({}, _fake_cell)
    assert res.rows == [] and res.cells == {}


def test_ablation_failure_recorded_and_grid_continues():
    def cell(row, overrides):
        if row == "SD-YOLOv3":
            raise RuntimeError("out of memory")
        return _fake_cell(row, overrides)

    res = run_ablation("table6", cell)
    assert "SD-YOLOv3" in res.errors
    assert res.cells["SDNIA-YOLOv3"]["VNT"] is not None
    assert "failed" in res.table()


def test_ablation_resume_skips_completed(tmp_path):
    calls = []

    def cell(row, overrides):
        calls.append(row)
        return _fake_cell(row, overrides)

    run_ablation("table6", cell, state_dir=tmp_path)
    assert len(calls) == 4
    res = run_ablation("table6", cell, state_dir=tmp_path, resume=True)
    assert len(calls) == 4
    assert res.cells["YOLOv3"]["VNT"].map_50 == 1.0
