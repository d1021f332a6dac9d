import warnings

import numpy as np
import pytest

from oracles import fps_bruteforce, knn_bruteforce
from votestep import tensornet as tn
from votestep.backbone import (
    Backbone,
    LevelOutput,
    SamplingWarning,
    SetAbstraction,
    foreground_split_sampling,
    foreground_targets,
    interpolate,
)
from votestep.checks import micro_config
from votestep.config import RunConfig
from votestep.geometry import GeometryError
from votestep.scenegen import GenerationConfig, generate_scene
from votestep.tensornet import Tensor


def _level(rng, n, d=4):
    return LevelOutput(rng.normal(size=(1, n, 3)), Tensor(rng.normal(size=(1, n, d))))


def test_set_abstraction_k1_passes_features_with_zero_offset(rng):
    lv = _level(rng, 7)
    sa = SetAbstraction(4, [5], k=1, rng=rng)
    grouped, mask = sa.group_features(lv.points, lv.features, lv.points)
    assert mask is None
    np.testing.assert_array_equal(grouped.data[0, :, 0, :4], lv.features.data[0])
    np.testing.assert_array_equal(grouped.data[0, :, 0, 4:], 0.0)


def test_set_abstraction_single_point_is_its_own_center(rng):
    lv = _level(rng, 1)
    out = SetAbstraction(4, [5], k=1, rng=rng)(lv.points, lv.features, np.zeros((1, 1), dtype=int))
    np.testing.assert_array_equal(out.points, lv.points)


def test_set_abstraction_rejects_large_k(rng):
    lv = _level(rng, 3)
    with pytest.raises(GeometryError):
        SetAbstraction(4, [5], k=4, rng=rng)(lv.points, lv.features, np.zeros((1, 1), dtype=int))


def test_backbone_centers_match_fps_oracle(rng):
    cfg = micro_config()
    bb = Backbone(cfg.backbone, rng=rng)
    pts = rng.uniform(-1, 1, size=(16, 3))
    out = bb.encode(pts)
    ref = fps_bruteforce(pts.tolist(), cfg.backbone.sa_points[0])
    np.testing.assert_array_equal(out.sa_indices[0][0], ref)


def test_interpolation_exact_coincidence_and_symmetry():
    coarse = LevelOutput(np.array([[[0.0, 0, 0], [2.0, 0, 0], [10.0, 10, 10]]]),
                         Tensor(np.array([[[1.0, 2.0], [3.0, 6.0], [100.0, 100.0]]])))
    fine = np.array([[[2.0, 0, 0], [1.0, 0, 0]]])
    out = interpolate(coarse, fine, k=2).data[0]
    np.testing.assert_array_equal(out[0], [3.0, 6.0])
    np.testing.assert_allclose(out[1], [2.0, 4.0], atol=1e-12)


def test_interpolation_matches_bruteforce(rng):
    for _ in range(10):
        coarse = _level(rng, 9, d=3)
        fine = rng.normal(size=(1, 20, 3))
        out = interpolate(coarse, fine).data[0]
        for i, p in enumerate(fine[0]):
            nb = knn_bruteforce(p.tolist(), coarse.points[0].tolist(), 3)
            w = np.array([1.0 / d ** 2 for _, d in nb])
            ref = sum(wi * coarse.features.data[0, j] for wi, (j, _) in zip(w, nb)) / w.sum()
            np.testing.assert_allclose(out[i], ref, rtol=1e-10)


def test_split_sampling_equal_scores_is_fps_per_half(rng):
    pts = rng.normal(size=(40, 3))
    idx = foreground_split_sampling(pts, np.zeros(40), 8, 0.5)
    fg = fps_bruteforce(pts[:20].tolist(), 4)
    bg = [20 + i for i in fps_bruteforce(pts[20:].tolist(), 4)]
    np.testing.assert_array_equal(idx, fg + bg)


def test_split_sampling_full_fraction_uses_top_pool_only(rng):
    pts = rng.normal(size=(30, 3))
    scores = rng.random(30)
    idx = foreground_split_sampling(pts, scores, 10, 1.0)
    order = np.argsort(-scores, kind="stable")
    np.testing.assert_array_equal(idx, order[fps_bruteforce(pts[order].tolist(), 10)])


def test_split_sampling_foreground_quota_scores_dominate(rng):
    for _ in range(20):
        pts = rng.normal(size=(50, 3))
        scores = rng.random(50)
        idx = foreground_split_sampling(pts, scores, 12, 0.75)
        assert len(set(idx.tolist())) == 12
        n_fg = int(round(0.75 * 50))
        background = np.sort(scores)[: 50 - n_fg]
        assert scores[idx[:9]].min() >= background.max()


def test_split_sampling_quotas_always_fit_their_pools(rng):
    for n in range(1, 12):
        pts = rng.normal(size=(n, 3))
        for total in range(1, n + 1):
            for f in (0.0, 0.1, 0.25, 0.5, 0.75, 1.0):
                with warnings.catch_warnings():
                    warnings.simplefilter("error", SamplingWarning)
                    idx = foreground_split_sampling(pts, rng.random(n), total, f)
                assert len(set(idx.tolist())) == total


def test_encode_is_deterministic_and_shaped(rng):
    cfg = micro_config()
    cfg.set("backbone.num_fp_levels", "2")
    bb = Backbone(cfg.backbone, rng=rng)
    pts = rng.normal(size=(16, 3))
    a, b = bb.encode(pts), bb.encode(pts.copy())
    assert len(a.levels) == 2
    assert [lv.count for lv in a.sa_levels] == list(cfg.backbone.sa_points)
    # propagation runs coarse to fine: 4 -> 8 -> 12
    assert [lv.count for lv in a.levels] == [8, 12]
    assert all(lv.features.shape[-1] == cfg.backbone.fp_width for lv in a.levels)
    for x, y in zip(a.levels, b.levels):
        np.testing.assert_array_equal(x.features.data, y.features.data)
    assert np.all((a.fg_scores >= 0) & (a.fg_scores <= 1))


def test_encode_level0_scores_are_permutation_equivariant(rng):
    cfg = micro_config()
    bb = Backbone(cfg.backbone, rng=rng)
    pts = rng.normal(size=(16, 3))
    perm = rng.permutation(16)
    base = bb.encode(pts)
    inv = np.argsort(perm)
    # pin the FPS selection by remapping the original centers into the permuted cloud
    moved = bb.encode(pts[perm], first_indices=inv[base.sa_indices[0]])
    np.testing.assert_allclose(moved.seg_logits[0].data, base.seg_logits[0].data, atol=1e-12)


def test_encode_rejects_small_cloud(rng):
    bb = Backbone(micro_config().backbone, rng=rng)
    with pytest.raises(GeometryError):
        bb.encode(rng.normal(size=(8, 3)))


def test_segmentation_head_learns_single_box():
    cfg = RunConfig()
    for k, v in {"backbone.num_input": 256, "backbone.sa_points": "128 64 32", "backbone.sa_widths": "16 16 16",
                 "backbone.k": 8, "backbone.fp_width": 16, "backbone.input_width": 8}.items():
        cfg.set(k, str(v))
    gen = GenerationConfig(object_count_range=(1, 1), num_points=256, noise_std=0.0, occlusion=0.0,
                           object_point_fraction=0.5)
    scenes = [generate_scene(gen, s) for s in range(8)]
    bb = Backbone(cfg.backbone, rng=np.random.default_rng(0))
    opt = tn.Adam(bb.parameters(), lr=5e-3)
    for step in range(60):
        sc = scenes[step % len(scenes)]
        out = bb.encode(sc.cloud.points)
        target = foreground_targets(out.sa_levels[0].points[0], sc.boxes, 0.05)
        bb.zero_grad()
        loss = tn.bce_with_logits(tn.index(out.seg_logits[0], 0), target.astype(float))
        loss.backward()
        opt.step()
        assert all(np.isfinite(lv.features.data).all() for lv in out.levels)
    acc = []
    for sc in scenes:
        out = bb.encode(sc.cloud.points)
        target = foreground_targets(out.sa_levels[0].points[0], sc.boxes, 0.05)
        acc.append(np.mean((out.fg_scores[0] > 0.5) == target))
    assert np.mean(acc) > 0.95
