"""Hierarchical point encoder: set abstraction down, feature propagation up.

All tensors are batched over scenes: points are ``(B, n, 3)`` numpy arrays
and features are ``(B, n, d)`` tensors. Every scene in a batch has the same
point count, so each level has a fixed size.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensornet as tn
from .geometry import GeometryError, ball_query_batch, fps_batch, knn_indices
from .tensornet import Dense, MLP, Module, Tensor


class SamplingWarning(UserWarning):
    pass


@dataclass
class LevelOutput:
    points: np.ndarray  # (B, n, 3)
    features: Tensor    # (B, n, d)

    def __post_init__(self):
        if self.points.shape[:2] != self.features.shape[:2]:
            raise tn.ShapeError(f"{self.points.shape[:2]} points vs {self.features.shape[:2]} features")

    @property
    def count(self) -> int:
        return self.points.shape[1]


@dataclass
class BackboneOutput:
    levels: list                  # propagation outputs, coarse to fine
    sa_levels: list               # abstraction outputs, fine to coarse
    seg_logits: list              # (B, n_l) tensor per abstraction level
    sa_indices: list = field(default_factory=list)  # sampled indices into the previous level

    @property
    def fg_scores(self) -> np.ndarray:
        """Foreground probabilities of the first abstraction level, (B, n_1)."""
        return _sigmoid(self.seg_logits[0].data)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def gather_points(points: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """``points[b, idx[b]]`` for (B, N, 3) points and (B, ...) indices."""
    B = points.shape[0]
    return points[np.arange(B).reshape((B,) + (1,) * (idx.ndim - 1)), idx]


def group(centers: np.ndarray, points: np.ndarray, k: int, mode: str = "knn", radius: float = 1.0):
    """Neighbour indices (B, Q, k) of each center and a validity mask (None for k-NN)."""
    if k > points.shape[1]:
        raise GeometryError(f"k={k} exceeds level size {points.shape[1]}")
    if mode == "knn":
        idx, _ = knn_indices(centers, points, k)
        return idx, None
    if mode == "ball":
        return ball_query_batch(centers, points, radius, k)
    raise ValueError(f"unknown grouping mode {mode!r}")


class SetAbstraction(Module):
    """Group k neighbours per center, run a shared MLP on [feature; offset], max-pool."""

    def __init__(self, in_dim: int, widths, k: int, grouping: str = "knn", radius: float = 1.0,
                 rng=None, dtype=np.float64):
        self.mlp = MLP(in_dim + 3, widths, rng=rng, dtype=dtype)
        self.k, self.grouping, self.radius = k, grouping, radius
        self.out_dim = self.mlp.out_dim

    def group_features(self, points, feats: Tensor, centers):
        idx, mask = group(centers, points, self.k, self.grouping, self.radius)
        offset = (gather_points(points, idx) - centers[:, :, None, :]) / self.radius
        grouped = tn.concat([tn.batch_gather(feats, idx), Tensor(offset.astype(feats.dtype))], axis=-1)
        return grouped, mask

    def __call__(self, points: np.ndarray, feats: Tensor, center_idx: np.ndarray) -> LevelOutput:
        if self.k > points.shape[1]:
            raise GeometryError(f"k={self.k} exceeds input count {points.shape[1]}")
        centers = gather_points(points, center_idx)
        grouped, mask = self.group_features(points, feats, centers)
        pooled = tn.aggregate(self.mlp(grouped), "max", axis=2, mask=mask)
        return LevelOutput(centers, pooled)


def interpolation_weights(fine: np.ndarray, coarse: np.ndarray, k: int = 3):
    """Inverse squared-distance weights over the ``k`` nearest coarse points.

    A fine point that coincides with a coarse point takes that point's
    feature exactly.
    """
    k = min(k, coarse.shape[1])
    idx, d2 = knn_indices(fine, coarse, k)
    exact = d2[..., 0] <= 1e-20
    w = 1.0 / np.maximum(d2, 1e-20)
    w[exact] = 0.0
    w[exact, 0] = 1.0
    w /= w.sum(axis=-1, keepdims=True)
    return idx, w


def interpolate(coarse: LevelOutput, fine_points: np.ndarray, k: int = 3) -> Tensor:
    idx, w = interpolation_weights(fine_points, coarse.points, k)
    nb = tn.batch_gather(coarse.features, idx)  # (B, n, k, d)
    return tn.tsum(tn.mul(nb, Tensor(w[..., None].astype(nb.dtype))), axis=2)


class FeaturePropagation(Module):
    """Interpolate coarse features onto fine points, concatenate the skip features, dense layer."""

    def __init__(self, coarse_dim: int, skip_dim: int, out_dim: int, rng=None, dtype=np.float64):
        self.dense = Dense(coarse_dim + skip_dim, out_dim, "leaky_relu", rng=rng, dtype=dtype)
        self.out_dim = out_dim

    def __call__(self, coarse: LevelOutput, fine: LevelOutput) -> LevelOutput:
        interp = interpolate(coarse, fine.points)
        return LevelOutput(fine.points, self.dense(tn.concat([interp, fine.features], axis=-1)))


def foreground_split_sampling(points: np.ndarray, scores: np.ndarray, total_count: int,
                              foreground_fraction: float) -> np.ndarray:
    """Sample ``total_count`` indices, favouring high-score points.

    Points are ranked by score (stable, so ties keep index order). The top
    ``round(f * n)`` form the foreground pool and the rest the background
    pool; FPS picks ``round(f * total_count)`` points from the first and the
    remainder from the second. A quota larger than its pool is clamped and
    the excess moved to the other pool with a :class:`SamplingWarning`.
    Accepts a single scene (n, 3) or a batch (B, n, 3).
    """
    single = points.ndim == 2
    if single:
        points, scores = points[None], scores[None]
    B, n, _ = points.shape
    if not 1 <= total_count <= n:
        raise GeometryError(f"cannot sample {total_count} of {n} points")
    n_fg = min(n, max(0, int(round(foreground_fraction * n))))
    q_fg = int(round(foreground_fraction * total_count))
    q_bg = total_count - q_fg
    if q_fg > n_fg or q_bg > n - n_fg:
        warnings.warn(f"sampling quota ({q_fg}, {q_bg}) exceeds pools ({n_fg}, {n - n_fg}); clamped",
                      SamplingWarning, stacklevel=2)
        q_fg = min(q_fg, n_fg)
        q_bg = total_count - q_fg
        if q_bg > n - n_fg:
            q_bg = n - n_fg
            q_fg = total_count - q_bg
    order = np.argsort(-scores, axis=1, kind="stable")
    parts = []
    for pool, quota in ((order[:, :n_fg], q_fg), (order[:, n_fg:], q_bg)):
        if quota:
            sel = fps_batch(gather_points(points, pool), quota, 0)
            parts.append(np.take_along_axis(pool, sel, axis=1))
    out = np.concatenate(parts, axis=1)
    return out[0] if single else out


class Backbone(Module):
    """Input MLP on point height, ``len(sa_points)`` abstraction levels, ``num_fp_levels`` propagation levels.

    Each abstraction level carries a one-logit segmentation head; levels after
    the first sample their centers with :func:`foreground_split_sampling` on
    the previous level's scores.
    """

    def __init__(self, cfg, rng=None, dtype=np.float64):
        rng = np.random.default_rng(0) if rng is None else rng
        self.cfg = cfg
        self.input = Dense(1, cfg.input_width, "leaky_relu", rng=rng, dtype=dtype)
        self.sa = []
        self.seg = []
        d = cfg.input_width
        for w, r in zip(cfg.sa_widths, cfg.radius):
            layer = SetAbstraction(d, [w, w], cfg.k, cfg.grouping, r, rng=rng, dtype=dtype)
            self.sa.append(layer)
            self.seg.append(Dense(w, 1, rng=rng, dtype=dtype))
            d = w
        self.fp = []
        coarse = cfg.sa_widths[-1]
        for i in range(cfg.num_fp_levels):
            skip = cfg.sa_widths[-2 - i]
            self.fp.append(FeaturePropagation(coarse, skip, cfg.fp_width, rng=rng, dtype=dtype))
            coarse = cfg.fp_width
        self.dtype = dtype

    @property
    def min_points(self) -> int:
        return self.cfg.sa_points[0]

    def encode(self, points: np.ndarray, first_indices: np.ndarray | None = None) -> BackboneOutput:
        """Run the encoder. ``first_indices`` may supply precomputed FPS centers for the first level."""
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 2:
            points = points[None]
        if points.shape[1] < self.min_points:
            raise GeometryError(f"cloud has {points.shape[1]} points; the encoder needs at least {self.min_points}")
        cfg = self.cfg
        feats = self.input(Tensor(points[..., 2:3].astype(self.dtype)))
        level = LevelOutput(points, feats)
        sa_levels, seg_logits, sa_idx = [], [], []
        for i, (layer, head) in enumerate(zip(self.sa, self.seg)):
            n_out = cfg.sa_points[i]
            if i == 0:
                idx = fps_batch(level.points, n_out, 0) if first_indices is None else first_indices
            else:
                scores = tn.detached(_sigmoid(seg_logits[-1].data))
                idx = foreground_split_sampling(level.points, scores, n_out, cfg.fg_fraction)
            level = layer(level.points, level.features, idx)
            sa_levels.append(level)
            sa_idx.append(idx)
            seg_logits.append(tn.reshape(head(level.features), level.points.shape[:2]))
        levels = []
        coarse = sa_levels[-1]
        for i, fp in enumerate(self.fp):
            coarse = fp(coarse, sa_levels[-2 - i])
            levels.append(coarse)
        return BackboneOutput(levels, sa_levels, seg_logits, sa_idx)


def foreground_targets(points: np.ndarray, boxes, margin: float) -> np.ndarray:
    """Boolean membership of each point in any box enlarged by ``margin``."""
    out = np.zeros(points.shape[0], dtype=bool)
    for box in boxes:
        out |= box.contains(points, margin=margin)
    return out

