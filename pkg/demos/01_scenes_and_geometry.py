# A tour of the synthetic scenes and the geometry kernels the detector is built on.
# Run from the repository root:  python demos/01_scenes_and_geometry.py

import numpy as np

from votestep.geometry import (
    OrientedBox,
    box_iou,
    chamfer_distance,
    farthest_point_sampling,
    knn_indices,
)
from votestep.scenegen import GenerationConfig, format_scene, generate_scene, parse_scene

NAMES = ["table", "chair", "bed", "cabinet"]

# one room, a handful of furniture boxes, surface samples plus clutter
scene = generate_scene(GenerationConfig(), seed=7)
pts = scene.cloud.points
print(f"scene 7: {len(pts)} points, {len(scene.boxes)} objects")
for box, label in zip(scene.boxes, scene.labels):
    c = np.round(box.center, 2)
    print(f"  {NAMES[label]:8s} center {c}  size {np.round(box.size, 2)}  heading {box.heading:+.2f}")

# the text format round-trips exactly
assert parse_scene(format_scene(scene)) == scene

# how much of the cloud lies on objects?
on_object = np.zeros(len(pts), dtype=bool)
for box in scene.boxes:
    on_object |= box.contains(pts, margin=0.02)
print(f"fraction of points on objects: {on_object.mean():.2f}")

# farthest point sampling spreads the seeds over the room
seeds = farthest_point_sampling(pts, 64)
spread = np.linalg.norm(pts[seeds][:, None] - pts[seeds][None], axis=-1)
np.fill_diagonal(spread, np.inf)
print(f"FPS 64 seeds: min pairwise gap {spread.min():.3f} m")
rand = np.random.default_rng(0).choice(len(pts), 64, replace=False)
gap = np.linalg.norm(pts[rand][:, None] - pts[rand][None], axis=-1)
np.fill_diagonal(gap, np.inf)
print(f"random 64 seeds: min pairwise gap {gap.min():.3f} m")

# neighbourhoods for grouping
idx, d2 = knn_indices(pts[seeds][None], pts[None], 16)
print(f"16-NN radius around the seeds: median {np.median(np.sqrt(d2[0, :, -1])):.3f} m")

# Chamfer distance between the cloud and a jittered copy shrinks with the jitter
rng = np.random.default_rng(1)
for s in (0.1, 0.03, 0.01):
    print(f"chamfer(cloud, cloud + N(0, {s}^2)) = {chamfer_distance(pts[:500], pts[:500] + rng.normal(0, s, (500, 3))):.5f}")

# rotated IoU: turning a 2 x 1 footprint against itself
a = OrientedBox((0, 0, 0), (2, 1, 1), 0.0)
for deg in (0, 15, 45, 90):
    b = OrientedBox((0, 0, 0), (2, 1, 1), np.deg2rad(deg))
    print(f"IoU at {deg:2d} deg: {box_iou(a, b):.3f}")
