"""Point-cloud and oriented-box primitives.

Everything here is plain numpy and side-effect free. The single-query
functions (``k_nearest_neighbors``, ``ball_query``) follow the documented
contracts exactly; the ``*_batch`` / ``knn_indices`` variants are the
vectorised forms the network code uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


class GeometryError(ValueError):
    """Raised on size/precondition violations (e.g. ``k > N``)."""


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise GeometryError(f"points must have shape (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise GeometryError("point cloud must contain at least one point")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.features is not None:
            feats = np.asarray(self.features, dtype=np.float64)
            if feats.ndim != 2 or feats.shape[0] != pts.shape[0]:
                raise GeometryError("feature count must equal point count")
            object.__setattr__(self, "features", feats)

    def __len__(self):
        return self.points.shape[0]

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        if not np.array_equal(self.points, other.points):
            return False
        if (self.features is None) != (other.features is None):
            return False
        return self.features is None or np.array_equal(self.features, other.features)


@dataclass(frozen=True)
class OrientedBox:
    """Box with center, full extents (dx, dy, dz) and heading about +z."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    heading: float = 0.0

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        s = tuple(float(v) for v in self.size)
        if len(c) != 3 or len(s) != 3:
            raise GeometryError("center and size must be 3-vectors")
        if not all(math.isfinite(v) for v in c + s + (float(self.heading),)):
            raise GeometryError("box parameters must be finite")
        if min(s) <= 0:
            raise GeometryError(f"box size must be positive, got {s}")
        h = float(self.heading)
        if not (-math.pi <= h < math.pi):
            raise GeometryError(f"heading {h} outside [-pi, pi)")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", s)
        object.__setattr__(self, "heading", h)

    @property
    def half_diagonal(self) -> float:
        return 0.5 * math.sqrt(sum(v * v for v in self.size))

    def contains(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        local = to_box_frame(np.asarray(points, dtype=np.float64), self)
        half = np.asarray(self.size) / 2 + margin
        return np.all(np.abs(local) <= half, axis=-1)


def wrap_angle(theta):
    """Map angles to [-pi, pi)."""
    return (np.asarray(theta) + np.pi) % (2 * np.pi) - np.pi


def rotation_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def to_box_frame(points: np.ndarray, box: OrientedBox) -> np.ndarray:
    """Express world points in the box's local (axis-aligned) frame."""
    rel = points - np.asarray(box.center)
    return rel @ rotation_z(box.heading)  # R^T applied row-wise


def _as_points(pc) -> np.ndarray:
    if isinstance(pc, PointCloud):
        return pc.points
    pts = np.asarray(pc, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[-1] != 3:
        raise GeometryError(f"expected (N, 3) points, got {pts.shape}")
    return pts


# ---------------------------------------------------------------------------
# sampling and neighbourhoods
# ---------------------------------------------------------------------------

def farthest_point_sampling(pc, k: int, seed_index: int = 0) -> np.ndarray:
    """Greedy farthest point sampling.

    Returns ``k`` indices; the first is ``seed_index`` and every later index
    maximises the minimum distance to the points already chosen (lowest index
    wins ties, already-chosen points are never re-picked).
    """
    pts = _as_points(pc)
    return fps_batch(pts[None], k, np.array([seed_index]))[0]


def fps_batch(points: np.ndarray, k: int, seed_index=0) -> np.ndarray:
    """Batched FPS over ``points`` of shape (B, N, 3); returns (B, k) indices."""
    points = np.asarray(points)
    B, N, _ = points.shape
    if not 1 <= k <= N:
        raise GeometryError(f"cannot sample k={k} points from N={N}")
    seeds = np.broadcast_to(np.asarray(seed_index, dtype=np.int64), (B,))
    if np.any(seeds < 0) or np.any(seeds >= N):
        raise GeometryError("seed_index out of range")
    rows = np.arange(B)
    out = np.empty((B, k), dtype=np.int64)
    out[:, 0] = seeds
    xs, ys, zs = (np.ascontiguousarray(points[..., a], dtype=np.float64) for a in range(3))
    mind = np.full((B, N), np.inf)
    cur = seeds.copy()
    for i in range(1, k):
        d = (xs - xs[rows, cur][:, None]) ** 2
        d += (ys - ys[rows, cur][:, None]) ** 2
        d += (zs - zs[rows, cur][:, None]) ** 2
        np.minimum(mind, d, out=mind)
        mind[rows, cur] = -np.inf
        cur = np.argmax(mind, axis=1)
        out[:, i] = cur
    return out


def k_nearest_neighbors(query, pc, k: int) -> list[tuple[int, float]]:
    """The ``k`` closest points to ``query`` as ``(index, distance)`` pairs.

    Sorted by ascending Euclidean distance, ties by lowest index.
    """
    pts = _as_points(pc)
    if k > pts.shape[0]:
        raise GeometryError(f"k={k} exceeds point count {pts.shape[0]}")
    q = np.asarray(query, dtype=np.float64).reshape(3)
    d = np.sqrt(np.sum((pts - q) ** 2, axis=1))
    order = np.argsort(d, kind="stable")[:k]
    return [(int(i), float(d[i])) for i in order]


def pairwise_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distances between the rows of ``a`` (..., Q, 3) and ``b`` (..., N, 3)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aa = np.sum(a * a, axis=-1)[..., :, None]
    bb = np.sum(b * b, axis=-1)[..., None, :]
    d = aa + bb - 2.0 * (a @ np.swapaxes(b, -1, -2))
    return np.maximum(d, 0.0)


def knn_indices(queries: np.ndarray, points: np.ndarray, k: int):
    """Vectorised k-NN: ``queries`` (..., Q, 3) against ``points`` (..., N, 3).

    Leading dimensions must match. Returns ``(idx, sqdist)`` each of shape
    (..., Q, k), ordered by (distance, index).
    """
    queries = np.asarray(queries, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    N = points.shape[-2]
    if k > N:
        raise GeometryError(f"k={k} exceeds point count {N}")
    lead = queries.shape[:-2]
    if points.shape[:-2] != lead:
        raise GeometryError(f"batch shapes differ: {lead} vs {points.shape[:-2]}")
    qf = queries.reshape((-1,) + queries.shape[-2:])
    pf = points.reshape((-1,) + points.shape[-2:])
    idx = np.empty(qf.shape[:2] + (k,), dtype=np.int64)
    d2 = np.empty(qf.shape[:2] + (k,))
    for b in range(qf.shape[0]):
        dist, ind = cKDTree(pf[b]).query(qf[b], k=list(range(1, k + 1)))
        idx[b], d2[b] = ind, dist * dist
    # the tree does not order exact ties; impose (distance, index) order
    order = np.lexsort((idx, d2), axis=-1)
    idx = np.take_along_axis(idx, order, axis=-1)
    d2 = np.take_along_axis(d2, order, axis=-1)
    return idx.reshape(lead + idx.shape[1:]), d2.reshape(lead + d2.shape[1:])


def ball_query(query, pc, radius: float, max_count: int) -> list[int]:
    """Indices (in index order) of points within ``radius`` of ``query``, at most ``max_count``."""
    if radius <= 0:
        raise GeometryError("radius must be positive")
    pts = _as_points(pc)
    q = np.asarray(query, dtype=np.float64).reshape(3)
    d2 = np.sum((pts - q) ** 2, axis=1)
    return [int(i) for i in np.flatnonzero(d2 <= radius * radius)[:max_count]]


def ball_query_batch(queries: np.ndarray, points: np.ndarray, radius: float, max_count: int):
    """Vectorised ball query; returns ``(idx, valid)`` of shape (..., Q, max_count).

    Invalid slots are filled with index 0 and flagged False in ``valid``.
    """
    d2 = pairwise_sqdist(queries, points)
    inside = d2 <= radius * radius
    # stable argsort on "not inside" brings inside points first in index order
    order = np.argsort(~inside, axis=-1, kind="stable")[..., :max_count]
    valid = np.take_along_axis(inside, order, axis=-1)
    idx = np.where(valid, order, 0)
    return idx, valid


def chamfer_distance(a, b) -> float:
    """Symmetric Chamfer distance with squared Euclidean distances."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise GeometryError("chamfer distance needs two nonempty point sets")
    diff = a[:, None, :] - b[None, :, :]
    d = np.sum(diff * diff, axis=-1)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


# ---------------------------------------------------------------------------
# boxes
# ---------------------------------------------------------------------------

# bottom face counterclockwise from (-dx/2, -dy/2), then top face in the same order
_CORNER_SIGNS = np.array(
    [
        [-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
        [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1],
    ],
    dtype=np.float64,
)


def box_corners(box: OrientedBox) -> np.ndarray:
    """The 8 corners of ``box`` as an (8, 3) array in the documented order."""
    return corners_from_params(np.asarray(box.center), np.asarray(box.size), box.heading)


def corners_from_params(center, size, heading) -> np.ndarray:
    """Vectorised corners: center (..., 3), size (..., 3), heading (...) -> (..., 8, 3)."""
    center = np.asarray(center, dtype=np.float64)
    size = np.asarray(size, dtype=np.float64)
    heading = np.asarray(heading, dtype=np.float64)
    local = 0.5 * size[..., None, :] * _CORNER_SIGNS
    c, s = np.cos(heading)[..., None], np.sin(heading)[..., None]
    x = c * local[..., 0] - s * local[..., 1]
    y = s * local[..., 0] + c * local[..., 1]
    return np.stack([x, y, local[..., 2]], axis=-1) + center[..., None, :]


def _footprint(box: OrientedBox) -> list[tuple[float, float]]:
    return [tuple(p) for p in box_corners(box)[:4, :2]]


def polygon_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    area = 0.0
    for (x1, y1), (x2, y2) in zip(poly, poly[1:] + poly[:1]):
        area += x1 * y2 - x2 * y1
    return 0.5 * area


def clip_polygon(subject, clip):
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clip``."""
    output = list(subject)
    n = len(clip)
    for i in range(n):
        if not output:
            break
        (ax, ay), (bx, by) = clip[i], clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp, output = output, []

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    t = sp / (sp - sc)
                    output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                output.append(cur)
            elif sp >= 0:
                t = sp / (sp - sc)
                output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, sp = cur, sc
    return output


def _vertical_overlap(a: OrientedBox, b: OrientedBox) -> float:
    lo = max(a.center[2] - a.size[2] / 2, b.center[2] - b.size[2] / 2)
    hi = min(a.center[2] + a.size[2] / 2, b.center[2] + b.size[2] / 2)
    return max(0.0, hi - lo)


def _volume(box: OrientedBox) -> float:
    return box.size[0] * box.size[1] * box.size[2]


def axis_aligned_envelope(box: OrientedBox) -> OrientedBox:
    corners = box_corners(box)
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    return OrientedBox(tuple((lo + hi) / 2), tuple(hi - lo), 0.0)


def box_iou(a: OrientedBox, b: OrientedBox, mode: str = "oriented") -> float:
    """3D IoU of two boxes.

    ``mode="oriented"`` clips the two rotated footprints exactly;
    ``mode="axis_aligned"`` compares the axis-aligned envelopes instead.
    """
    if mode == "axis_aligned":
        a, b = axis_aligned_envelope(a), axis_aligned_envelope(b)
    elif mode != "oriented":
        raise ValueError(f"unknown IoU mode {mode!r}")
    h = _vertical_overlap(a, b)
    if h <= 0.0:
        return 0.0
    # cheap rejection on the circumscribed circles
    dx, dy = a.center[0] - b.center[0], a.center[1] - b.center[1]
    ra = 0.5 * math.hypot(a.size[0], a.size[1])
    rb = 0.5 * math.hypot(b.size[0], b.size[1])
    if dx * dx + dy * dy >= (ra + rb) ** 2:
        return 0.0
    inter_area = abs(polygon_area(clip_polygon(_footprint(a), _footprint(b))))
    inter = inter_area * h
    union = _volume(a) + _volume(b) - inter
    if union <= 0.0:
        return 0.0
    return float(min(1.0, max(0.0, inter / union)))
