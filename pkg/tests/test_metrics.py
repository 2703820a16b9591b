import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canthus.metrics import (FrameEvaluation, Summary, aggregate, face_bbox_size, format_accuracy_table, metric_key, nme,
                             pose_error, region_iou, summarize, accuracy_table_rows)
from canthus.pose import HeadPose, rotation_from_euler
from canthus.refine import CanthusRegion, convex_hull_2d


def bbox_oracle(contour):
    xs, ys = list(contour[0]), list(contour[1])
    w = max(xs) - min(xs)
    h = max(ys) - min(ys)
    return math.sqrt(w * h)


def nme_oracle(det, gt, size):
    return [100 * math.hypot(det[0][i] - gt[0][i], det[1][i] - gt[1][i]) / size for i in range(len(det[0]))]


def inside_oracle(poly, x, y):
    n = len(poly)
    for i in range(n):
        ax, ay = poly[i]
        bx, by = poly[(i + 1) % n]
        if (bx - ax) * (y - ay) - (by - ay) * (x - ax) < -1e-9 * max(math.hypot(bx - ax, by - ay), 1):
            return False
    return True


def iou_oracle(pa, pb, h, w):
    inter = union = 0
    for y in range(h):
        for x in range(w):
            a, b = inside_oracle(pa, x, y), inside_oracle(pb, x, y)
            inter += a and b
            union += a or b
    return None if union == 0 else inter / union


def angle_error_oracle(a, b):
    d = abs(a - b) % 360
    return min(d, 360 - d)


def region(poly, eye="left"):
    poly = np.asarray(poly, float)
    return CanthusRegion(eye, poly.mean(axis=0), poly, 1)


def test_bbox_examples():
    assert face_bbox_size(np.array([[0, 100, 50], [0, 100, 30]])) == 100
    assert face_bbox_size(np.array([[0, 200], [0, 50]])) == 100


def test_bbox_rejects_degenerate():
    with pytest.raises(ValueError):
        face_bbox_size(np.array([[0, 0, 0], [0, 5, 9]]))
    with pytest.raises(ValueError):
        face_bbox_size(np.array([[1.0], [2.0]]))


def test_nme_examples():
    g = np.random.default_rng(0).normal(size=(2, 5))
    assert np.array_equal(nme(g, g, 50), np.zeros(5))
    assert nme(np.array([3.0, 4.0]), np.zeros(2), 100)[0] == pytest.approx(5.0)
    with pytest.raises(ValueError):
        nme(np.zeros((2, 3)), np.zeros((2, 4)), 1)


@settings(max_examples=50)
@given(seed=st.integers(0, 10_000), shift=st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)))
def test_nme_translation_and_scale(seed, shift):
    rng = np.random.default_rng(seed)
    d, g = rng.normal(size=(2, 2, 7)) * 20
    base = nme(d, g, 40)
    s = np.array(shift)[:, None]
    assert np.allclose(nme(d + s, g + s, 40), base, atol=1e-9)
    assert np.allclose(nme(d, g, 80), base / 2)


def test_iou_examples():
    a = region([[2, 2], [8, 2], [8, 8], [2, 8]])
    b = region([[20, 20], [25, 20], [25, 25], [20, 25]])
    assert region_iou(a, a, (30, 30)) == 1.0
    assert region_iou(a, b, (30, 30)) == 0.0
    off = region([[50, 50], [55, 50], [55, 55]])
    assert region_iou(off, off, (30, 30)) is None


def test_pose_error_examples():
    assert np.array_equal(pose_error((1, 2, 3), (1, 2, 3)), [0, 0, 0])
    assert pose_error((0, 179, 0), (0, -179, 0))[1] == pytest.approx(2)
    a = HeadPose(rotation_from_euler(10, 20, 30))
    b = HeadPose(rotation_from_euler(12, 15, 33))
    assert np.allclose(pose_error(a, b), [2, 5, 3])


@settings(max_examples=100)
@given(a=st.floats(-720, 720), b=st.floats(-720, 720), c=st.floats(-720, 720))
def test_pose_error_triangle_inequality(a, b, c):
    e = lambda x, y: pose_error((x, 0, 0), (y, 0, 0))[0]  # noqa: E731
    assert e(a, c) <= e(a, b) + e(b, c) + 1e-9
    assert e(a, b) == pytest.approx(angle_error_oracle(a, b), abs=1e-9)


def test_metrics_match_oracles_on_random_frames():
    rng = np.random.default_rng(42)
    h, w = 60, 80
    for _ in range(50):
        contour = rng.uniform(0, 500, (2, 17))
        det, gt = rng.uniform(0, 500, (2, 2, 68))
        size = face_bbox_size(contour)
        assert size == pytest.approx(bbox_oracle(contour), rel=1e-15)
        assert np.allclose(nme(det, gt, size), nme_oracle(det, gt, size), rtol=1e-13)
        pa = convex_hull_2d(rng.uniform(0, 70, (8, 2)))
        pb = convex_hull_2d(rng.uniform(10, 80, (8, 2)))
        assert region_iou(region(pa), region(pb), (h, w)) == iou_oracle(pa, pb, h, w)
        p, g = rng.uniform(-180, 180, (2, 3))
        assert np.allclose(pose_error(p, g), [angle_error_oracle(x, y) for x, y in zip(p, g)], atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_iou_symmetric(seed):
    rng = np.random.default_rng(seed)
    a = region(convex_hull_2d(rng.uniform(0, 40, (6, 2))))
    b = region(convex_hull_2d(rng.uniform(0, 40, (6, 2))))
    assert region_iou(a, b, (40, 40)) == region_iou(b, a, (40, 40))


def frame(fid, iou, correct=(True, True), pose=(1.0, 2.0, 3.0)):
    return FrameEvaluation(fid, {metric_key("iou", "op3dmm", 1): [iou]}, list(correct), np.array(pose))


def test_aggregate_single_frame():
    s = aggregate([frame("a", 0.7)])
    m = s["metrics"][metric_key("iou", "op3dmm", 1)]
    assert (m.mean, m.std, m.n) == (0.7, 0.0, 1)
    assert s["pose_error"]["yaw"].mean == 2.0


def test_aggregate_population_std():
    s = aggregate([frame("a", 0.2), frame("b", 0.4, correct=(True, False))])
    m = s["metrics"][metric_key("iou", "op3dmm", 1)]
    assert m.mean == pytest.approx(0.3) and m.std == pytest.approx(0.1)
    assert s["occlusion_frame_pct"] == 50.0
    assert s["occlusion_eye_pct"] == 75.0


def test_aggregate_empty_rejected():
    with pytest.raises(ValueError):
        aggregate([])


@settings(max_examples=30)
@given(a=st.lists(st.floats(0, 1), min_size=1, max_size=10), b=st.lists(st.floats(0, 1), min_size=1, max_size=10))
def test_aggregate_concat_is_weighted_mean(a, b):
    fa = [frame(str(i), v) for i, v in enumerate(a)]
    fb = [frame(str(i), v) for i, v in enumerate(b)]
    key = metric_key("iou", "op3dmm", 1)
    ma, mb = aggregate(fa)["metrics"][key], aggregate(fb)["metrics"][key]
    mab = aggregate(fa + fb)["metrics"][key]
    assert mab.mean == pytest.approx((ma.mean * ma.n + mb.mean * mb.n) / (ma.n + mb.n), abs=1e-12)


def test_summarize_skips_missing():
    assert summarize([None, float("nan"), 1.0, 3.0]) == Summary(2.0, 1.0, 2)
    assert summarize([]).n == 0


def test_table_layout():
    values = {}
    for k in (1, 2, 3, 4):
        for metric in ("iou", "nme_man", "nme_gt"):
            for method in ("op3dmm", "refined"):
                values[metric_key(metric, method, k)] = [0.5]
    summary = aggregate([FrameEvaluation("a", values, [True, True], np.zeros(3))])
    rows = accuracy_table_rows(summary)
    assert [(r[0], r[1]) for r in rows[:3]] == [("1-Ring", "IoU"), ("1-Ring", "NME (man)(%)"),
                                              ("1-Ring", "NME (gt)(%)")]
    assert len(rows) == 12
    text = format_accuracy_table(summary)
    lines = text.splitlines()
    assert "OP+3DMM" in lines[0] and "Refinement" in lines[0]
    assert "50.0 ± 0.0" in lines[2]  # IoU shown x100
    assert any("Occlusion (%)" in line and "100.0" in line for line in lines)
