import math

import numpy as np
import pytest

from oracles import (
    ball_bruteforce,
    box_iou_montecarlo,
    chamfer_bruteforce,
    fps_bruteforce,
    knn_bruteforce,
)
from votestep.geometry import (
    GeometryError,
    OrientedBox,
    PointCloud,
    ball_query,
    ball_query_batch,
    box_corners,
    box_iou,
    chamfer_distance,
    farthest_point_sampling,
    fps_batch,
    k_nearest_neighbors,
    knn_indices,
)


def random_box(rng, spread=1.0):
    return OrientedBox(
        tuple(rng.uniform(-spread, spread, 3)),
        tuple(rng.uniform(0.3, 2.0, 3)),
        float(rng.uniform(-math.pi, math.pi)),
    )


# --- FPS -------------------------------------------------------------------

def test_fps_collinear_extremes():
    pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], float)
    assert list(farthest_point_sampling(PointCloud(pts), 2, 0)) == [0, 3]


def test_fps_full_is_permutation(rng):
    pts = rng.normal(size=(30, 3))
    idx = farthest_point_sampling(pts, 30)
    assert sorted(idx.tolist()) == list(range(30))


def test_fps_with_duplicates_never_repeats():
    pts = np.zeros((5, 3))
    assert sorted(farthest_point_sampling(pts, 5).tolist()) == list(range(5))


def test_fps_matches_bruteforce(rng):
    pts = rng.random((64, 3))
    assert farthest_point_sampling(pts, 8).tolist() == fps_bruteforce(pts.tolist(), 8)


def test_fps_batch_rows_independent(rng):
    pts = rng.random((3, 40, 3))
    out = fps_batch(pts, 6, np.array([0, 5, 9]))
    for b, s in enumerate([0, 5, 9]):
        assert out[b].tolist() == farthest_point_sampling(pts[b], 6, s).tolist()


def test_fps_k_too_large():
    with pytest.raises(GeometryError):
        farthest_point_sampling(np.zeros((3, 3)), 4)


# --- k-NN ------------------------------------------------------------------

def test_knn_self_query(rng):
    pts = rng.random((10, 3))
    (i, d), = k_nearest_neighbors(pts[4], pts, 1)
    assert i == 4 and d == 0.0


def test_knn_simple():
    pts = np.array([[3, 0, 0], [1, 0, 0], [0, 2, 0]], float)
    out = k_nearest_neighbors([0, 0, 0], pts, 2)
    assert [i for i, _ in out] == [1, 2]
    assert [d for _, d in out] == [1.0, 2.0]


def test_knn_matches_full_sort(rng):
    pts = rng.random((100, 3))
    q = rng.random(3)
    got = k_nearest_neighbors(q, pts, 10)
    ref = knn_bruteforce(q.tolist(), pts.tolist(), 10)
    assert [i for i, _ in got] == [i for i, _ in ref]
    np.testing.assert_allclose([d for _, d in got], [d for _, d in ref], rtol=1e-12)


def test_knn_prefix_property(rng):
    pts = rng.random((25, 3))
    q = rng.random(3)
    full = k_nearest_neighbors(q, pts, 25)
    assert [d for _, d in full] == sorted(d for _, d in full)
    for k in range(1, 25):
        assert k_nearest_neighbors(q, pts, k) == full[:k]


def test_knn_tie_lowest_index():
    pts = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0]], float)
    assert [i for i, _ in k_nearest_neighbors([0, 0, 0], pts, 3)] == [0, 1, 2]


def test_knn_vectorised_matches_scalar(rng):
    pts = rng.random((2, 50, 3))
    qs = rng.random((2, 7, 3))
    idx, d2 = knn_indices(qs, pts, 5)
    for b in range(2):
        for q in range(7):
            ref = k_nearest_neighbors(qs[b, q], pts[b], 5)
            assert idx[b, q].tolist() == [i for i, _ in ref]
            np.testing.assert_allclose(np.sqrt(d2[b, q]), [d for _, d in ref], atol=1e-7)


def test_knn_k_too_large():
    with pytest.raises(GeometryError):
        k_nearest_neighbors([0, 0, 0], np.zeros((2, 3)), 3)


# --- ball query --------------------------------------------------------------

def test_ball_query_empty():
    assert ball_query([10, 10, 10], np.zeros((4, 3)), 1.0, 8) == []


def test_ball_query_all():
    assert ball_query([0, 0, 0], np.zeros((4, 3)), 1.0, 8) == [0, 1, 2, 3]


def test_ball_query_matches_linear_scan(rng):
    pts = rng.random((80, 3))
    q = rng.random(3)
    assert ball_query(q, pts, 0.3, 5) == ball_bruteforce(q.tolist(), pts.tolist(), 0.3, 5)


def test_ball_query_batch_agrees(rng):
    pts = rng.random((60, 3))
    qs = rng.random((9, 3))
    idx, valid = ball_query_batch(qs, pts, 0.25, 6)
    for q in range(9):
        assert idx[q][valid[q]].tolist() == ball_query(qs[q], pts, 0.25, 6)


# --- chamfer -----------------------------------------------------------------

def test_chamfer_identical_zero(rng):
    a = rng.random((12, 3))
    assert chamfer_distance(a, a) == 0.0


def test_chamfer_single_points():
    assert chamfer_distance([[0, 0, 0]], [[1, 0, 0]]) == 2.0


def test_chamfer_matches_double_loop(rng):
    a, b = rng.random((20, 3)), rng.random((30, 3))
    assert chamfer_distance(a, b) == pytest.approx(chamfer_bruteforce(a.tolist(), b.tolist()), rel=1e-12)
    assert chamfer_distance(a, b) == pytest.approx(chamfer_distance(b, a), rel=1e-12)


def test_chamfer_adding_point_of_b_never_increases_ab_term(rng):
    a, b = rng.random((10, 3)), rng.random((10, 3))

    def ab_term(x, y):
        d = ((x[:, None] - y[None]) ** 2).sum(-1)
        return d.min(1).mean()

    before = ab_term(a, b)
    # the new point contributes 0 so the mean can only drop
    assert ab_term(np.vstack([a, b[3]]), b) <= before


def test_chamfer_empty():
    with pytest.raises(GeometryError):
        chamfer_distance(np.zeros((0, 3)), np.zeros((2, 3)))


# --- boxes -------------------------------------------------------------------

def test_unit_cube_corners():
    c = box_corners(OrientedBox((0, 0, 0), (1, 1, 1), 0.0))
    assert set(map(tuple, c)) == {(x, y, z) for x in (-.5, .5) for y in (-.5, .5) for z in (-.5, .5)}
    # documented order: bottom face CCW from (-,-), then top
    np.testing.assert_array_equal(c[0], [-.5, -.5, -.5])
    np.testing.assert_array_equal(c[1], [.5, -.5, -.5])
    np.testing.assert_array_equal(c[2], [.5, .5, -.5])
    np.testing.assert_array_equal(c[4], [-.5, -.5, .5])


def test_quarter_turn_swaps_extents():
    c = box_corners(OrientedBox((0, 0, 0), (2, 1, 1), math.pi / 2))
    ext = c.max(0) - c.min(0)
    np.testing.assert_allclose(ext, [1, 2, 1], atol=1e-12)


def test_corners_full_turn_and_centroid(rng):
    for _ in range(20):
        b = random_box(rng)
        c = box_corners(b)
        np.testing.assert_allclose(c.mean(0), b.center, atol=1e-9)
        # the heading domain is [-pi, pi); compare against the raw parameter path
        from votestep.geometry import corners_from_params
        np.testing.assert_allclose(corners_from_params(b.center, b.size, b.heading + 2 * math.pi), c, atol=1e-9)
        # opposite faces are b_s apart
        np.testing.assert_allclose(np.linalg.norm(c[1] - c[0]), b.size[0], rtol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(c[3] - c[0]), b.size[1], rtol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(c[4] - c[0]), b.size[2], rtol=1e-12)


def test_invalid_box():
    with pytest.raises(GeometryError):
        OrientedBox((0, 0, 0), (1, 0, 1), 0.0)
    with pytest.raises(GeometryError):
        OrientedBox((0, 0, 0), (1, 1, 1), math.pi)


def test_iou_identical_and_disjoint(rng):
    b = random_box(rng)
    assert box_iou(b, b) == pytest.approx(1.0, abs=1e-12)
    far = OrientedBox((10, 10, 0), (1, 1, 1), 0.3)
    assert box_iou(b, far) == 0.0


def test_iou_axis_aligned_half_overlap():
    a = OrientedBox((0, 0, 0), (2, 2, 2), 0.0)
    b = OrientedBox((1, 0, 0), (2, 2, 2), 0.0)
    assert box_iou(a, b) == pytest.approx(1 / 3)


def test_iou_symmetric_and_rotation_invariant(rng):
    for _ in range(30):
        a, b = random_box(rng, 0.5), random_box(rng, 0.5)
        assert box_iou(a, b) == pytest.approx(box_iou(b, a), abs=1e-12)
        phi = rng.uniform(-math.pi, math.pi)

        def rot(box):
            R = np.array([[math.cos(phi), -math.sin(phi)], [math.sin(phi), math.cos(phi)]])
            xy = R @ np.array(box.center[:2])
            h = (box.heading + phi + math.pi) % (2 * math.pi) - math.pi
            return OrientedBox((xy[0], xy[1], box.center[2]), box.size, h)

        assert box_iou(rot(a), rot(b)) == pytest.approx(box_iou(a, b), abs=1e-6)


def test_iou_matches_montecarlo(rng):
    checked = 0
    while checked < 3:
        a, b = random_box(rng, 0.4), random_box(rng, 0.4)
        ref = box_iou_montecarlo(a, b, n=10**6, rng=rng)
        if ref < 0.05:
            continue
        assert abs(box_iou(a, b) - ref) < 0.01
        checked += 1


def test_iou_axis_aligned_mode():
    a = OrientedBox((0, 0, 0), (2, 1, 1), math.pi / 2 - 1e-12)
    b = OrientedBox((0, 0, 0), (1, 2, 1), 0.0)
    assert box_iou(a, b, mode="axis_aligned") == pytest.approx(1.0, abs=1e-9)
