"""Object center proposals: per-level voting, merging by FPS, and scale prediction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensornet as tn
from .backbone import LevelOutput, gather_points
from .geometry import GeometryError, fps_batch, knn_indices
from .tensornet import Dense, MLP, Module, Tensor


@dataclass
class CenterProposalSet:
    g: np.ndarray                # (B, M, 3) proposal coordinates, detached
    features: Tensor             # (B, M, d)
    s_tilde: Tensor | None = None  # (B, M, 3) predicted object size, positive
    s: np.ndarray | None = None    # (B, M) half diagonal 0.5 * |s_tilde|, detached
    source: np.ndarray | None = None  # (B, M) index into the concatenated votes

    @property
    def count(self) -> int:
        return self.g.shape[1]


def half_diagonal(s_tilde) -> np.ndarray:
    s_tilde = np.asarray(s_tilde, dtype=np.float64)
    return 0.5 * np.linalg.norm(s_tilde, axis=-1)


class VotingModule(Module):
    """Shared two-layer MLP on [x; q] producing a coordinate offset and a feature offset."""

    def __init__(self, feat_dim: int, hidden: int, use_coords: bool = True, rng=None, dtype=np.float64):
        in_dim = feat_dim + (3 if use_coords else 0)
        self.mlp = MLP(in_dim, [hidden, 3 + feat_dim], rng=rng, dtype=dtype, last_activation="none")
        self.use_coords = use_coords
        self.feat_dim = feat_dim

    def __call__(self, level: LevelOutput):
        q = level.features
        inp = tn.concat([Tensor(level.points.astype(q.dtype)), q], axis=-1) if self.use_coords else q
        out = self.mlp(inp)
        dx, dq = out[..., :3], out[..., 3:]
        votes = tn.add(Tensor(level.points.astype(q.dtype)), dx)
        return votes, tn.add(q, dq)


def merge_and_fps(votes, feats, projections, num_proposals: int) -> CenterProposalSet:
    """Concatenate per-level votes (features projected to a common width) and FPS down to M."""
    if not votes:
        raise GeometryError("need at least one level of proposals")
    feats = [proj(f) for proj, f in zip(projections, feats)] if projections else list(feats)
    all_votes = tn.concat(votes, axis=1) if len(votes) > 1 else votes[0]
    all_feats = tn.concat(feats, axis=1) if len(feats) > 1 else feats[0]
    total = all_votes.shape[1]
    if total < num_proposals:
        raise GeometryError(f"only {total} candidate proposals for M={num_proposals}")
    pts = tn.detached(all_votes.data.astype(np.float64))
    idx = fps_batch(pts, num_proposals, 0)
    g = gather_points(pts, idx)
    return CenterProposalSet(g, tn.batch_gather(all_feats, idx), source=idx)


class ScalePredictor(Module):
    """Set abstraction over neighbouring proposals followed by an MLP; ``s_tilde = exp(output)``."""

    def __init__(self, feat_dim: int, width: int, k: int, rng=None, dtype=np.float64):
        self.group_mlp = MLP(feat_dim + 3, [width, width], rng=rng, dtype=dtype)
        self.out = MLP(width, [width, 3], rng=rng, dtype=dtype, last_activation="none")
        # start from unit sizes; an untrained exp() otherwise spans orders of magnitude
        self.out.layers[-1].weight.data[...] = 0
        self.k = k

    def __call__(self, props: CenterProposalSet) -> CenterProposalSet:
        g, c = props.g, props.features
        k = min(self.k, g.shape[1])
        idx, _ = knn_indices(g, g, k)
        offset = gather_points(g, idx) - g[:, :, None, :]
        grouped = tn.concat([tn.batch_gather(c, idx), Tensor(offset.astype(c.dtype))], axis=-1)
        pooled = tn.aggregate(self.group_mlp(grouped), "max", axis=2)
        s_tilde = tn.exp(self.out(pooled))
        s = tn.detached(half_diagonal(s_tilde.data))
        return CenterProposalSet(props.g, props.features, s_tilde, s, props.source)


def _nearest(points: np.ndarray, targets: np.ndarray):
    d2 = np.sum((points[:, None, :] - targets[None, :, :]) ** 2, axis=-1)
    j = np.argmin(d2, axis=1)
    return j, d2[np.arange(len(points)), j]


def center_loss(votes, gt_centers, symmetric: bool = False) -> Tensor:
    """Mean over levels of the one-directional squared Chamfer term votes -> GT centers.

    ``votes`` is a list of (B, n, 3) tensors (or arrays), ``gt_centers`` a
    list of (K_b, 3) arrays, one per scene. Scenes without objects are
    skipped. ``symmetric`` adds the GT -> votes term.
    """
    total = None
    for v in votes:
        v = tn.as_tensor(v)
        B = v.shape[0]
        level = None
        for b in range(B):
            gt = np.asarray(gt_centers[b], dtype=np.float64).reshape(-1, 3)
            if len(gt) == 0:
                continue
            vb = tn.index(v, b)
            j, _ = _nearest(vb.data.astype(np.float64), gt)
            diff = tn.sub(vb, gt[j].astype(v.dtype))
            term = tn.mean(tn.tsum(tn.square(diff), axis=-1))
            if symmetric:
                i, _ = _nearest(gt, vb.data.astype(np.float64))
                back = tn.sub(tn.gather_rows(vb, i), gt.astype(v.dtype))
                term = tn.add(term, tn.mean(tn.tsum(tn.square(back), axis=-1)))
            level = term if level is None else tn.add(level, term)
        if level is None:
            level = Tensor(np.zeros((), dtype=v.dtype))
        level = tn.mul(level, 1.0 / B)
        total = level if total is None else tn.add(total, level)
    return tn.mul(total, 1.0 / len(votes))


def match_to_gt(g: np.ndarray, gt_centers: np.ndarray, radius: float):
    """Nearest GT index per proposal and whether it lies within ``radius`` (per scene)."""
    gt_centers = np.asarray(gt_centers, dtype=np.float64).reshape(-1, 3)
    if len(gt_centers) == 0:
        return np.zeros(len(g), dtype=np.int64), np.zeros(len(g), dtype=bool), np.full(len(g), np.inf)
    j, d2 = _nearest(np.asarray(g, dtype=np.float64), gt_centers)
    d = np.sqrt(d2)
    return j, d <= radius, d


class ProposalModule(Module):
    """Votes on every propagation level, merges them and predicts object scale."""

    def __init__(self, level_dims, cfg, rng=None, dtype=np.float64):
        dim = level_dims[0]
        if any(d != dim for d in level_dims):
            raise tn.ShapeError("the shared voting MLP needs equal level widths")
        self.cfg = cfg
        self.vote = VotingModule(dim, dim, cfg.use_coords, rng=rng, dtype=dtype)
        n_levels = len(level_dims) if cfg.multi_scale else 1
        self.proj = [Dense(dim, cfg.feature_width, "leaky_relu", rng=rng, dtype=dtype) for _ in range(n_levels)]
        self.scale = ScalePredictor(cfg.feature_width, cfg.feature_width, cfg.scale_k, rng=rng, dtype=dtype)

    def __call__(self, levels):
        used = levels if self.cfg.multi_scale else levels[-1:]
        votes, feats = zip(*(self.vote(lv) for lv in used))
        props = merge_and_fps(list(votes), list(feats), self.proj, self.cfg.num_proposals)
        return self.scale(props), list(votes)
