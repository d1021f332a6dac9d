"""Synthetic indoor scenes with exactly known ground-truth boxes.

Objects are boxes resting on the floor of a rectangular room. Their visible
faces (all but the bottom one) are sampled with surface points, optionally
jittered by Gaussian noise, and whole faces can be dropped to mimic partial
scans. Uniform clutter fills the rest of the point budget.

Scene files are line oriented::

    scene v1 <n_points> <n_boxes> <n_classes> <seed>
    p <x> <y> <z>                                    (n_points lines)
    b <cx> <cy> <cz> <dx> <dy> <dz> <heading> <class> (n_boxes lines)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import OrientedBox, PointCloud, rotation_z, wrap_angle


class PlacementError(RuntimeError):
    pass


class SceneFormatError(ValueError):
    """Malformed scene or detection file; ``line`` is 1-based."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class SceneValidationError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectSpec:
    class_id: int
    size_range: tuple  # ((min_dx, max_dx), (min_dy, max_dy), (min_dz, max_dz))
    count_range: tuple = (0, 3)

    def __post_init__(self):
        sr = tuple(tuple(float(v) for v in r) for r in self.size_range)
        if len(sr) != 3 or any(len(r) != 2 for r in sr):
            raise ValueError("size_range needs one (min, max) pair per axis")
        for lo, hi in sr:
            if lo <= 0 or hi < lo:
                raise ValueError(f"invalid size range {(lo, hi)}")
        lo, hi = self.count_range
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid count range {self.count_range}")
        object.__setattr__(self, "size_range", sr)
        object.__setattr__(self, "count_range", (int(lo), int(hi)))

    @property
    def mean_size(self) -> np.ndarray:
        return np.array([(lo + hi) / 2 for lo, hi in self.size_range])


# four furniture-like classes with distinct proportions
DEFAULT_OBJECTS = (
    ObjectSpec(0, ((1.2, 1.8), (0.7, 1.0), (0.7, 0.8))),   # table
    ObjectSpec(1, ((0.5, 0.7), (0.45, 0.6), (0.8, 1.0))),  # chair
    ObjectSpec(2, ((1.8, 2.2), (1.3, 1.6), (0.4, 0.6))),   # bed
    ObjectSpec(3, ((0.8, 1.2), (0.4, 0.6), (1.4, 1.9))),   # cabinet
)


@dataclass(frozen=True)
class GenerationConfig:
    room: tuple = (8.0, 8.0, 3.0)
    objects: tuple = DEFAULT_OBJECTS
    object_count_range: tuple = (3, 8)
    num_points: int = 2048
    object_point_fraction: float = 0.8
    noise_std: float = 0.01
    occlusion: float = 0.15
    overlap_factor: float = 1.0
    oriented: bool = True
    max_retries: int = 1000

    @property
    def num_classes(self) -> int:
        return len(self.objects)

    def validate(self):
        if min(self.room) <= 0:
            raise ValueError("room extents must be positive")
        if not self.objects:
            raise ValueError("at least one object spec is required")
        if sorted(o.class_id for o in self.objects) != list(range(len(self.objects))):
            raise ValueError("object class ids must be 0..N_C-1")
        lo, hi = self.object_count_range
        if lo < 0 or hi < lo:
            raise ValueError("invalid object count range")
        if self.num_points < 1:
            raise ValueError("num_points must be positive")
        if not 0.0 <= self.object_point_fraction <= 1.0:
            raise ValueError("object_point_fraction must lie in [0, 1]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if not 0.0 <= self.occlusion < 1.0:
            raise ValueError("occlusion must lie in [0, 1)")
        if self.overlap_factor < 0:
            raise ValueError("overlap_factor must be non-negative")


@dataclass(eq=False)
class Scene:
    cloud: PointCloud
    boxes: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    seed: int = 0
    num_classes: int = 4

    def __post_init__(self):
        if len(self.labels) != len(self.boxes):
            raise SceneValidationError("labels and boxes must have equal length")

    @property
    def centers(self) -> np.ndarray:
        return np.array([b.center for b in self.boxes], dtype=np.float64).reshape(-1, 3)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([b.size for b in self.boxes], dtype=np.float64).reshape(-1, 3)

    @property
    def headings(self) -> np.ndarray:
        return np.array([b.heading for b in self.boxes], dtype=np.float64)

    def validate(self):
        for i, box in enumerate(self.boxes):
            if not np.any(box.contains(self.cloud.points, margin=1e-6)):
                raise SceneValidationError(f"box {i} contains no cloud point")

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.cloud == other.cloud
            and list(self.boxes) == list(other.boxes)
            and [int(v) for v in self.labels] == [int(v) for v in other.labels]
            and self.seed == other.seed
            and self.num_classes == other.num_classes
        )


# (axis, sign) of each sampled face; the bottom face rests on the floor
FACES = ((0, -1), (0, 1), (1, -1), (1, 1), (2, 1))


def _face_points(size: np.ndarray, axis: int, sign: int, n: int, rng) -> np.ndarray:
    pts = (rng.random((n, 3)) - 0.5) * size
    pts[:, axis] = sign * size[axis] / 2
    return pts


def generate_scene(cfg: GenerationConfig, seed: int) -> Scene:
    """Generate one scene; identical (cfg, seed) pairs give identical scenes."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    room = np.asarray(cfg.room, dtype=np.float64)
    specs = {o.class_id: o for o in cfg.objects}

    # choose classes honouring per-class count ranges
    for _ in range(cfg.max_retries):
        n_obj = int(rng.integers(cfg.object_count_range[0], cfg.object_count_range[1] + 1))
        classes = rng.integers(0, cfg.num_classes, size=n_obj)
        counts = np.bincount(classes, minlength=cfg.num_classes)
        if all(specs[c].count_range[0] <= counts[c] <= specs[c].count_range[1] for c in specs):
            break
    else:
        raise PlacementError("could not satisfy per-class object counts")

    boxes, labels = None, None
    for _ in range(LAYOUT_RESTARTS):
        boxes, labels = _place_objects(cfg, classes, specs, room, rng)
        if boxes is not None:
            break
    if boxes is None:
        raise PlacementError(f"could not place {len(classes)} objects after {LAYOUT_RESTARTS} layouts")

    n_obj_pts = int(round(cfg.num_points * cfg.object_point_fraction)) if boxes else 0
    chunks = []
    if boxes:
        per_obj = np.full(len(boxes), n_obj_pts // len(boxes))
        per_obj[: n_obj_pts % len(boxes)] += 1
        for box, n in zip(boxes, per_obj):
            chunks.append(_sample_object(box, int(n), cfg, rng))
    n_clutter = cfg.num_points - sum(len(c) for c in chunks)
    lo = np.array([-room[0] / 2, -room[1] / 2, 0.0])
    chunks.append(lo + rng.random((n_clutter, 3)) * room)
    points = np.concatenate(chunks, axis=0)
    points = points[rng.permutation(len(points))]
    return Scene(PointCloud(points), boxes, labels, int(seed), cfg.num_classes)


LAYOUT_RESTARTS = 20


def _place_objects(cfg, classes, specs, room, rng):
    """Sequential rejection placement; returns (None, None) if some object does not fit."""
    boxes, labels = [], []
    per_object = max(1, cfg.max_retries // LAYOUT_RESTARTS)
    for cls in classes:
        spec = specs[int(cls)]
        size = np.array([rng.uniform(lo, hi) for lo, hi in spec.size_range])
        radius = 0.5 * math.hypot(size[0], size[1])
        heading = float(wrap_angle(rng.uniform(-math.pi, math.pi))) if cfg.oriented else 0.0
        for _ in range(per_object):
            margin = np.minimum(radius, room[:2] / 2 - 1e-6)
            xy = rng.uniform(-room[:2] / 2 + margin, room[:2] / 2 - margin)
            if all(
                math.hypot(xy[0] - o.center[0], xy[1] - o.center[1])
                >= (radius + 0.5 * math.hypot(o.size[0], o.size[1])) * cfg.overlap_factor
                for o in boxes
            ):
                break
        else:
            return None, None
        cz = min(size[2] / 2, room[2] / 2)
        boxes.append(OrientedBox((xy[0], xy[1], cz), tuple(size), heading))
        labels.append(int(cls))
    return boxes, labels


def _sample_object(box: OrientedBox, n: int, cfg: GenerationConfig, rng) -> np.ndarray:
    size = np.asarray(box.size)
    keep = rng.random(len(FACES)) >= cfg.occlusion
    if not keep.any():
        keep[int(rng.integers(len(FACES)))] = True
    faces = [f for f, k in zip(FACES, keep) if k]
    areas = np.array([np.prod(np.delete(size, axis)) for axis, _ in faces])
    counts = rng.multinomial(n, areas / areas.sum())
    local = np.concatenate([_face_points(size, ax, sg, c, rng) for (ax, sg), c in zip(faces, counts)], axis=0)
    if cfg.noise_std > 0:
        local = local + rng.normal(0.0, cfg.noise_std, size=local.shape)
    return local @ rotation_z(box.heading).T + np.asarray(box.center)


def face_occupancy(scene: Scene, tol: float = 1e-6) -> np.ndarray:
    """Per box, which of the sampled faces carry at least one point (noise-free scenes)."""
    out = np.zeros((len(scene.boxes), len(FACES)), dtype=bool)
    for i, box in enumerate(scene.boxes):
        local = (scene.cloud.points - np.asarray(box.center)) @ rotation_z(box.heading)
        half = np.asarray(box.size) / 2
        inside = np.all(np.abs(local) <= half + tol, axis=1)
        for j, (axis, sign) in enumerate(FACES):
            on_face = inside & (np.abs(local[:, axis] - sign * half[axis]) <= tol)
            out[i, j] = on_face.any()
    return out


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def format_scene(scene: Scene) -> str:
    pts = scene.cloud.points
    lines = [f"scene v1 {len(pts)} {len(scene.boxes)} {scene.num_classes} {scene.seed}"]
    lines.extend(f"p {_fmt(x)} {_fmt(y)} {_fmt(z)}" for x, y, z in pts)
    for box, label in zip(scene.boxes, scene.labels):
        vals = " ".join(_fmt(v) for v in (*box.center, *box.size, box.heading))
        lines.append(f"b {vals} {int(label)}")
    return "\n".join(lines) + "\n"


def write_scene(scene: Scene, path):
    with open(path, "w", encoding="ascii") as fh:
        fh.write(format_scene(scene))


def _floats(tokens, lineno):
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise SceneFormatError(f"bad number ({exc})", lineno) from None


def parse_scene(text: str) -> Scene:
    lines = text.splitlines()
    if not lines:
        raise SceneFormatError("empty file", 1)
    head = lines[0].split()
    if len(head) != 6 or head[0] != "scene" or head[1] != "v1":
        raise SceneFormatError("expected header 'scene v1 N_points N_boxes N_C seed'", 1)
    try:
        n_pts, n_box, n_cls, seed = (int(v) for v in head[2:])
    except ValueError:
        raise SceneFormatError("header counts must be integers", 1) from None
    if n_pts < 1:
        raise SceneValidationError("scene must contain at least one point")
    expected = 1 + n_pts + n_box
    if len(lines) < expected:
        raise SceneFormatError(f"truncated file: expected {expected} lines, found {len(lines)}", len(lines) + 1)
    pts = np.empty((n_pts, 3))
    for i in range(n_pts):
        lineno = i + 2
        tok = lines[i + 1].split()
        if len(tok) != 4 or tok[0] != "p":
            raise SceneFormatError("expected 'p x y z'", lineno)
        pts[i] = _floats(tok[1:], lineno)
    boxes, labels = [], []
    for j in range(n_box):
        lineno = n_pts + j + 2
        tok = lines[n_pts + j + 1].split()
        if len(tok) != 9 or tok[0] != "b":
            raise SceneFormatError("expected 'b cx cy cz dx dy dz heading class'", lineno)
        v = _floats(tok[1:8], lineno)
        try:
            label = int(tok[8])
        except ValueError:
            raise SceneFormatError("class must be an integer", lineno) from None
        if not 0 <= label < n_cls:
            raise SceneFormatError(f"class {label} outside [0, {n_cls})", lineno)
        try:
            boxes.append(OrientedBox(tuple(v[:3]), tuple(v[3:6]), v[6]))
        except ValueError as exc:
            raise SceneFormatError(str(exc), lineno) from None
        labels.append(label)
    extra = [k for k in range(expected, len(lines)) if lines[k].strip()]
    if extra:
        raise SceneFormatError("unexpected trailing content", extra[0] + 1)
    return Scene(PointCloud(pts), boxes, labels, seed, n_cls)


def read_scene(path) -> Scene:
    with open(path, encoding="ascii") as fh:
        return parse_scene(fh.read())
