import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
import shapely
from shapely.geometry import Polygon

from podcount.core import (
    Box,
    CountResult,
    Detection,
    InstanceAnnotation,
    SppClass,
    box_iou,
    box_iou_matrix,
    count_from_detections,
    mask_bbox,
    mask_iou,
    rasterize,
    rasterize_rings,
    trace_contours,
)

unit = st.floats(0.0, 1.0, allow_nan=False)


@st.composite
def boxes(draw):
    x0, x1 = sorted(draw(st.tuples(unit, unit)))
    y0, y1 = sorted(draw(st.tuples(unit, unit)))
    if x1 - x0 < 1e-3 or y1 - y0 < 1e-3:
        x0, x1, y0, y1 = 0.1, 0.4, 0.2, 0.5
    return Box.from_xyxy(x0, y0, x1, y1)


def test_spp_rejects_out_of_range():
    for bad in (0, 5, -1, True, 2.0, "2"):
        with pytest.raises(ValueError):
            SppClass.parse(bad)
    assert SppClass.parse(3) is SppClass.SPP3
    assert str(SppClass.SPP2) == "2spp"


def test_box_clips_and_validates():
    b = Box(0.95, 0.5, 0.2, 0.2)
    assert b.xyxy[2] == 1.0
    assert b.w == pytest.approx(0.15)
    with pytest.raises(ValueError):
        Box(0.5, 0.5, 0.0, 0.1)
    with pytest.raises(ValueError):
        Box(float("nan"), 0.5, 0.1, 0.1)
    with pytest.raises(ValueError):
        Box(1.5, 0.5, 0.2, 0.2)


def test_box_iou_examples():
    a = Box(0.25, 0.5, 0.5, 1.0)
    b = Box(0.5, 0.5, 0.5, 1.0)
    assert box_iou(a, b) == pytest.approx(1 / 3, abs=1e-12)
    assert box_iou(a, a) == 1.0
    assert box_iou(Box(0.1, 0.1, 0.1, 0.1), Box(0.9, 0.9, 0.1, 0.1)) == 0.0


@given(boxes(), boxes())
def test_box_iou_symmetric_and_bounded(a, b):
    v = box_iou(a, b)
    assert v == box_iou(b, a)
    assert 0.0 <= v <= 1.0
    assert box_iou(a, a) == pytest.approx(1.0)


@given(st.lists(boxes(), min_size=1, max_size=5), st.lists(boxes(), min_size=1, max_size=5))
def test_box_iou_matrix_matches_scalar(a, b):
    m = box_iou_matrix(np.array([x.xyxy for x in a]), np.array([x.xyxy for x in b]))
    for i, j in itertools.product(range(len(a)), range(len(b))):
        assert m[i, j] == pytest.approx(box_iou(a[i], b[j]), abs=1e-12)


def test_mask_iou_examples():
    a = np.zeros((2, 2), bool)
    b = np.zeros((2, 2), bool)
    a[0, 0] = a[0, 1] = True
    b[0, 1] = b[1, 1] = True
    assert mask_iou(a, b) == pytest.approx(1 / 3)
    assert mask_iou(a, a) == 1.0
    assert mask_iou(a, ~a) == 0.0
    with pytest.raises(ValueError):
        mask_iou(a, np.zeros((3, 3), bool))


def test_rasterize_square_and_triangle():
    sq = [(2, 3), (12, 3), (12, 13), (2, 13)]
    assert rasterize(sq, 20, 20).sum() == 100
    tri = [(0, 0), (4, 0), (0, 4)]
    m = rasterize(tri, 4, 4)
    # independent oracle: point-in-polygon over every pixel centre
    ys, xs = np.mgrid[0:4, 0:4] + 0.5
    ref = shapely.contains_xy(Polygon(tri), xs, ys)
    assert m.sum() == 6
    assert np.array_equal(m, ref)


@st.composite
def star_polygons(draw):
    n = draw(st.integers(3, 12))
    cx, cy = draw(st.floats(8, 24)), draw(st.floats(8, 24))
    angles = np.sort(np.array(draw(st.lists(st.floats(0, 2 * np.pi - 1e-3), min_size=n, max_size=n, unique=True))))
    radii = draw(st.lists(st.floats(2.0, 7.5), min_size=n, max_size=n))
    return [(cx + r * np.cos(a), cy + r * np.sin(a)) for a, r in zip(angles, radii)]


@given(star_polygons())
def test_rasterize_matches_point_in_polygon(poly):
    try:
        m = rasterize(poly, 32, 32)
    except ValueError:
        return  # degenerate star, rejected by validation
    ys, xs = np.mgrid[0:32, 0:32] + 0.5
    shape = Polygon(poly)
    inside = shapely.contains_xy(shape, xs, ys)
    on_edge = shapely.dwithin(shape.boundary, shapely.points(xs, ys), 1e-9)
    # centres lying exactly on an edge are the only allowed disagreement
    assert not ((m != inside) & ~on_edge).any()


@given(st.integers(0, 2**32 - 1))
def test_trace_round_trip(seed):
    rng = np.random.default_rng(seed)
    mask = rng.random((12, 14)) < 0.45
    rings = trace_contours(mask)
    assert np.array_equal(rasterize_rings(rings, 14, 12), mask)


def test_polygon_round_trip_through_trace():
    poly = [(1.3, 2.2), (17.8, 4.1), (12.5, 15.9), (3.1, 11.4)]
    m = rasterize(poly, 20, 20)
    assert np.array_equal(rasterize_rings(trace_contours(m), 20, 20), m)


def test_rasterize_origin_is_a_window():
    poly = [(5.0, 5.0), (15.0, 6.0), (10.0, 14.0)]
    full = rasterize(poly, 20, 20)
    win = rasterize(poly, 8, 6, origin=(4, 7))
    assert np.array_equal(win, full[7:13, 4:12])


def test_invalid_polygons_rejected():
    with pytest.raises(ValueError):
        InstanceAnnotation(((0, 0), (1, 1)), 1)
    with pytest.raises(ValueError):
        InstanceAnnotation(((0, 0), (2, 2), (2, 0), (0, 2)), 1)  # bow tie
    with pytest.raises(ValueError):
        InstanceAnnotation(((0, 0), (1, 1), (2, 2)), 1)


@given(boxes(), boxes())
def test_mask_iou_of_rectangles_tracks_box_iou(a, b):
    n = 64

    def rect(bx):
        x0, y0, x1, y1 = bx.to_pixels(n, n)
        m = np.zeros((n, n), bool)
        if x1 - x0 > 0 and y1 - y0 > 0:
            m = rasterize([(x0, y0), (x1, y0), (x1, y1), (x0, y1)], n, n)
        return m

    ma, mb = rect(a), rect(b)
    if ma.sum() < 16 or mb.sum() < 16:
        return
    # quantization: every box edge moves by at most half a pixel
    x0a, y0a, x1a, y1a = a.to_pixels(n, n)
    x0b, y0b, x1b, y1b = b.to_pixels(n, n)
    perim = 2 * ((x1a - x0a) + (y1a - y0a) + (x1b - x0b) + (y1b - y0b))
    small = min(ma.sum(), mb.sum())
    tol = max(1 / n, 2 * perim / small)
    assert abs(mask_iou(ma, mb) - box_iou(a, b)) <= tol


def test_mask_iou_random_rectangles_within_quantization():
    rng = np.random.default_rng(0)
    n = 256
    devs = []
    for _ in range(100):
        xs = np.sort(rng.integers(0, n, 2))
        ys = np.sort(rng.integers(0, n, 2))
        xs2 = np.sort(rng.integers(0, n, 2))
        ys2 = np.sort(rng.integers(0, n, 2))
        if (xs[1] - xs[0]) * (ys[1] - ys[0]) * (xs2[1] - xs2[0]) * (ys2[1] - ys2[0]) == 0:
            continue
        a = Box.from_xyxy(xs[0] / n, ys[0] / n, xs[1] / n, ys[1] / n)
        b = Box.from_xyxy(xs2[0] / n, ys2[0] / n, xs2[1] / n, ys2[1] / n)
        ma = rasterize([(xs[0], ys[0]), (xs[1], ys[0]), (xs[1], ys[1]), (xs[0], ys[1])], n, n)
        mb = rasterize([(xs2[0], ys2[0]), (xs2[1], ys2[0]), (xs2[1], ys2[1]), (xs2[0], ys2[1])], n, n)
        devs.append(abs(mask_iou(ma, mb) - box_iou(a, b)))
    assert len(devs) > 80
    assert max(devs) <= 1 / n


def test_count_examples():
    assert count_from_detections([]) == CountResult(0, 0)
    b = Box(0.5, 0.5, 0.1, 0.1)
    dets = [Detection(b, 2), Detection(b, 3), Detection(b, 1)]
    assert count_from_detections(dets) == CountResult(3, 6)


def test_paper_scale_pod_total():
    # 40 evaluation images holding 2426 annotated pods in total
    rng = np.random.default_rng(1)
    per_image = rng.multinomial(2426 - 40, np.ones(40) / 40) + 1
    b = Box(0.5, 0.5, 0.1, 0.1)
    total = CountResult()
    for n in per_image:
        total = total + count_from_detections([Detection(b, int(rng.integers(1, 5))) for _ in range(n)])
    assert total.pod_count == 2426


spp_lists = st.lists(st.integers(1, 4), max_size=30)


@given(spp_lists, spp_lists)
def test_count_additive_and_bounded(a, b):
    box = Box(0.5, 0.5, 0.1, 0.1)
    da = [Detection(box, s) for s in a]
    db = [Detection(box, s) for s in b]
    ca, cb, cab = count_from_detections(da), count_from_detections(db), count_from_detections(da + db)
    assert cab == ca + cb
    assert cab.pod_count <= cab.seed_count <= 4 * cab.pod_count


def test_count_result_rejects_impossible():
    with pytest.raises(ValueError):
        CountResult(2, 9)
    with pytest.raises(ValueError):
        CountResult(-1, 0)


def test_mask_bbox():
    m = np.zeros((5, 6), bool)
    assert mask_bbox(m) is None
    m[1:3, 2:5] = True
    assert mask_bbox(m) == (2, 1, 5, 3)


def test_pixel_window_exact_for_aligned_boxes():
    b = Box.from_xyxy(3 / 96, 10 / 96, 15 / 96, 14 / 96)
    assert b.pixel_window(96, 96) == (3, 10, 15, 14)
