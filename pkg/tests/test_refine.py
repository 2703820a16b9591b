import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canthus.imageio import ThermalImage, read_thermal, write_thermal
from canthus.pose import AffineProjection, rotation_from_euler
from canthus.refine import (CanthusAnnotation, CanthusRegion, DegenerateRegionError, EyeAnnotation,
                            OutOfFrameError, annotate_eyes, convex_hull_2d, extract_region, gaussian_kernel,
                            gaussian_smooth, points_in_polygon, polygon_area, polygon_mask, refine_canthus)
from canthus.model import k_ring


def gift_wrap_oracle(points):
    """All-pairs hull: (a, b) is an edge when every point is left of or on it and
    the collinear ones lie between a and b, so a and b are the extreme points."""
    pts = np.unique(np.asarray(points), axis=0)
    corners = set()
    for a, b in itertools.permutations(range(len(pts)), 2):
        d = pts[b] - pts[a]
        cross = d[0] * (pts[:, 1] - pts[a, 1]) - d[1] * (pts[:, 0] - pts[a, 0])
        if np.any(cross < -1e-9):
            continue
        proj = (pts - pts[a]) @ d
        on_line = np.abs(cross) <= 1e-9
        tol = 1e-12 * (d @ d)
        if np.all((proj[on_line] >= -tol) & (proj[on_line] <= d @ d + tol)):
            corners.add(tuple(pts[a]))
    return corners


def dense_blur_oracle(data, sigma):
    """Direct 2D summation with the outer-product kernel and edge replication."""
    k1 = gaussian_kernel(sigma)
    r = len(k1) // 2
    padded = np.pad(np.asarray(data, float), r, mode="edge")
    k2 = np.outer(k1, k1)
    h, w = data.shape
    out = np.zeros((h, w))
    for dy in range(2 * r + 1):
        for dx in range(2 * r + 1):
            out += k2[dy, dx] * padded[dy:dy + h, dx:dx + w]
    return out


def square(x0, y0, x1, y1, eye="left", k=1):
    poly = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float)
    return CanthusRegion(eye, poly.mean(axis=0), poly, k)


def camera(pitch=0, yaw=0, roll=0, scale=280.0, t=(512.0, 384.0)):
    return AffineProjection(scale * rotation_from_euler(pitch, yaw, roll)[:2], np.array(t))


def test_sigma_zero_identity():
    img = ThermalImage(np.random.default_rng(0).integers(0, 65535, (20, 30)).astype(np.uint16))
    assert gaussian_smooth(img, 0) is img


def test_constant_image_stays_constant():
    img = ThermalImage(np.full((17, 23), 1234, np.uint16))
    assert np.allclose(gaussian_smooth(img, 2.7).data, 1234)


def test_impulse_matches_dense_oracle():
    data = np.zeros((31, 31))
    data[15, 15] = 60000
    got = gaussian_smooth(ThermalImage(data), 1.5).data
    assert np.abs(got - dense_blur_oracle(data, 1.5)).max() < 1.0


def test_random_image_matches_dense_oracle_at_borders():
    data = np.random.default_rng(1).uniform(0, 65535, (12, 19))
    got = gaussian_smooth(ThermalImage(data), 2.0).data
    assert np.allclose(got, dense_blur_oracle(data, 2.0), atol=1e-6)


def test_kernel_radius_and_normalisation():
    k = gaussian_kernel(1.5)
    assert len(k) == 2 * 5 + 1 and k.sum() == pytest.approx(1.0)


@settings(max_examples=100)
@given(st.lists(st.tuples(st.integers(-50, 50), st.integers(-50, 50)), min_size=3, max_size=40))
def test_hull_matches_gift_wrap(points):
    pts = np.array(points, dtype=float)
    hull = convex_hull_2d(pts)
    if len(hull) >= 3 and abs(polygon_area(hull)) > 0:
        assert {tuple(p) for p in hull} == gift_wrap_oracle(pts)
        assert polygon_area(hull) > 0  # counter-clockwise
        assert points_in_polygon(hull, pts).all()


def test_pixel_inclusion_counts_boundary():
    poly = np.array([[0, 0], [4, 0], [4, 2], [0, 2]], float)
    mask = polygon_mask(poly, 5, 6)
    assert mask.sum() == 5 * 3
    assert mask[0, 0] and mask[2, 4] and not mask[3, 0]


def test_region_triangle_contains_center(tiny):
    P = camera(scale=100)
    region = extract_region(tiny, P, "left", 1)
    assert len(region.polygon) >= 3
    assert points_in_polygon(region.polygon, region.center).all()


def test_region_matches_hull_oracle_random_pose(reference_face):
    rng = np.random.default_rng(3)
    m = reference_face
    for _ in range(5):
        P = camera(*rng.uniform(-40, 40, 3))
        for eye, seed in zip(("left", "right"), m.canthus_indices):
            region = extract_region(m, P, eye, 3)
            from canthus.pose import project
            pts = project(P, m.mean_shape[:, k_ring(m, int(seed), 3)]).T
            assert {tuple(p) for p in region.polygon} == gift_wrap_oracle(pts)


def test_region_monotone_in_k(reference_face):
    P = camera(10, -25, 5)
    h, w = 768, 1024
    masks = [extract_region(reference_face, P, "right", k).mask(h, w) for k in (1, 2, 3, 4)]
    for a, b in zip(masks, masks[1:]):
        assert not np.any(a & ~b)
    areas = [extract_region(reference_face, P, "right", k).area for k in (1, 2, 3, 4)]
    assert areas == sorted(areas)


def test_degenerate_region_rejected(tiny):
    P = AffineProjection(np.zeros((2, 3)), np.array([10.0, 10.0]))
    with pytest.raises(DegenerateRegionError):
        extract_region(tiny, P, "left", 2)


def test_uniform_image_tie_breaks_row_major():
    img = ThermalImage(np.full((20, 20), 500, np.uint16))
    region = square(3.5, 4.2, 9, 12)
    point, peak = refine_canthus(img, region, 1.5)
    assert point.tolist() == [4.0, 5.0] and peak == pytest.approx(500)


def blob(h, w, cx, cy, amp=5000.0, s=3.0, base=20000.0):
    ys, xs = np.mgrid[0:h, 0:w]
    return ThermalImage(base + amp * np.exp(-0.5 * ((xs - cx) ** 2 + (ys - cy) ** 2) / s ** 2))


def test_hotspot_inside_region_found():
    img = blob(60, 80, 40.3, 30.6)
    point, _ = refine_canthus(img, square(25, 20, 55, 45), 1.5)
    assert np.linalg.norm(point - [40.3, 30.6]) <= 1.0


def test_hotspot_outside_region_stays_on_boundary():
    img = blob(60, 80, 60, 30)
    region = square(25, 20, 50, 45)
    point, _ = refine_canthus(img, region, 1.5)
    assert point.tolist() == [50.0, 30.0]
    assert points_in_polygon(region.polygon, point).all()


def test_out_of_frame_region():
    img = ThermalImage(np.zeros((10, 10), np.uint16))
    with pytest.raises(OutOfFrameError):
        refine_canthus(img, square(20, 20, 30, 30), 1.5)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), dx=st.integers(-5, 5), dy=st.integers(-5, 5))
def test_translation_equivariance(seed, dx, dy):
    rng = np.random.default_rng(seed)
    data = rng.uniform(0, 1000, (40, 40))
    big = np.zeros((60, 60))
    big[10:50, 10:50] = data
    shifted = np.zeros((60, 60))
    shifted[10 + dy:50 + dy, 10 + dx:50 + dx] = data
    region = square(15.5, 14, 33, 30.5)
    moved = CanthusRegion("left", region.center + [dx, dy], region.polygon + [dx, dy], 1)
    p0, v0 = refine_canthus(ThermalImage(big), region, 1.5)
    p1, v1 = refine_canthus(ThermalImage(shifted), moved, 1.5)
    assert np.array_equal(p1 - p0, [dx, dy]) and v0 == pytest.approx(v1)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_refined_point_inside_and_not_cooler(seed):
    rng = np.random.default_rng(seed)
    img = ThermalImage(rng.integers(0, 65535, (50, 50)).astype(np.uint16))
    pts = rng.uniform(5, 45, (6, 2))
    hull = convex_hull_2d(pts)
    if len(hull) < 3 or polygon_area(hull) < 2:
        return
    center = pts.mean(axis=0)
    region = CanthusRegion("left", center, hull, 1)
    smoothed = gaussian_smooth(img, 1.5)
    point, peak = refine_canthus(img, region, 1.5, smoothed)
    assert points_in_polygon(hull, point).all()
    cx, cy = np.round(center).astype(int)
    if points_in_polygon(hull, [cx, cy]).all():
        assert peak >= smoothed.data[cy, cx]


def test_occluded_eye_skipped_and_celsius_reported():
    img = blob(60, 80, 40, 30)
    img.intensity_map = (0.01, -273.15)
    ann = annotate_eyes(img, [square(25, 20, 55, 45), square(25, 20, 55, 45, "right")], (False, True))
    assert ann.left.refined_point is not None and ann.left.peak_celsius == pytest.approx(
        0.01 * ann.left.peak_intensity - 273.15)
    assert ann.right.occluded and ann.right.refined_point is None
    back = CanthusAnnotation.from_dict(ann.to_dict())
    assert np.array_equal(back.left.refined_point, ann.left.refined_point)
    assert back.right.refined_point is None


def test_region_serialisation():
    region = square(1, 2, 5, 7)
    back = CanthusRegion.from_dict(region.to_dict())
    assert np.array_equal(back.polygon, region.polygon) and back.k == region.k
    assert EyeAnnotation.from_dict(EyeAnnotation(region).to_dict()).refined_point is None


@pytest.mark.parametrize("suffix", [".png", ".pgm"])
def test_thermal_io_round_trip(tmp_path, suffix):
    data = np.random.default_rng(0).integers(0, 65536, (7, 9)).astype(np.uint16)
    write_thermal(ThermalImage(data), tmp_path / f"x{suffix}")
    assert np.array_equal(read_thermal(tmp_path / f"x{suffix}").data, data)


def test_eight_bit_input_upscaled(tmp_path):
    from PIL import Image

    data = np.array([[0, 1, 255]], dtype=np.uint8)
    Image.fromarray(data).save(tmp_path / "x.png")
    assert read_thermal(tmp_path / "x.png").data.tolist() == [[0, 257, 65535]]
    (tmp_path / "x.pgm").write_bytes(b"P5\n# comment\n3 1\n255\n" + data.tobytes())
    assert read_thermal(tmp_path / "x.pgm").data.tolist() == [[0, 257, 65535]]


def test_rgb_image_rejected(tmp_path):
    from PIL import Image

    Image.new("RGB", (4, 4)).save(tmp_path / "c.png")
    with pytest.raises(ValueError, match="single-channel"):
        read_thermal(tmp_path / "c.png")
