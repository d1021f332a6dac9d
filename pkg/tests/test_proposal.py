import numpy as np
import pytest

from oracles import fps_bruteforce
from votestep import tensornet as tn
from votestep.backbone import LevelOutput
from votestep.config import RunConfig
from votestep.geometry import GeometryError
from votestep.proposal import (
    CenterProposalSet,
    ProposalModule,
    ScalePredictor,
    VotingModule,
    center_loss,
    half_diagonal,
    match_to_gt,
    merge_and_fps,
)
from votestep.scenegen import GenerationConfig, ObjectSpec, generate_scene
from votestep.tensornet import Tensor


def _zero(module):
    for p in module.parameters().values():
        p.data[...] = 0


def test_zero_weight_voting_keeps_points(rng):
    lv = LevelOutput(rng.normal(size=(2, 9, 3)), Tensor(rng.normal(size=(2, 9, 5))))
    vote = VotingModule(5, 6, rng=rng)
    _zero(vote)
    votes, feats = vote(lv)
    np.testing.assert_array_equal(votes.data, lv.points)
    np.testing.assert_array_equal(feats.data, lv.features.data)
    assert votes.shape == (2, 9, 3)


def test_merge_single_level_is_a_permutation(rng):
    v = Tensor(rng.normal(size=(1, 6, 3)))
    out = merge_and_fps([v], [Tensor(rng.normal(size=(1, 6, 2)))], None, 6)
    assert sorted(out.source[0].tolist()) == list(range(6))
    np.testing.assert_array_equal(out.g[0], v.data[0, out.source[0]])


def test_merge_duplicated_levels_never_repeats_a_point(rng):
    v = Tensor(rng.normal(size=(1, 10, 3)))
    f = Tensor(rng.normal(size=(1, 10, 2)))
    out = merge_and_fps([v, v], [f, f], None, 10)
    assert len({tuple(p) for p in out.g[0]}) == 10


def test_merge_matches_fps_oracle_on_concatenation(rng):
    for _ in range(10):
        levels = [Tensor(rng.normal(size=(1, n, 3))) for n in (7, 12)]
        feats = [Tensor(rng.normal(size=(1, n, 2))) for n in (7, 12)]
        out = merge_and_fps(levels, feats, None, 8)
        cat = np.concatenate([lv.data[0] for lv in levels])
        np.testing.assert_array_equal(out.g[0], cat[fps_bruteforce(cat.tolist(), 8)])


def test_merge_rejects_too_few_candidates(rng):
    with pytest.raises(GeometryError):
        merge_and_fps([Tensor(rng.normal(size=(1, 3, 3)))], [Tensor(rng.normal(size=(1, 3, 2)))], None, 4)


def test_center_loss_examples():
    c = np.array([[1.0, 2.0, 3.0]])
    assert float(center_loss([c[None]], [c]).data) == 0.0
    v = np.array([[[3.0, 2.0, 3.0]]])
    assert float(center_loss([v], [c]).data) == pytest.approx(4.0)


def test_center_loss_matches_double_loop(rng):
    votes = [rng.normal(size=(2, 5, 3)), rng.normal(size=(2, 7, 3))]
    gts = [rng.normal(size=(3, 3)), rng.normal(size=(1, 3))]
    for symmetric in (False, True):
        ref = 0.0
        for v in votes:
            per_level = 0.0
            for b in range(2):
                fwd = np.mean([min(np.sum((p - c) ** 2) for c in gts[b]) for p in v[b]])
                back = np.mean([min(np.sum((p - c) ** 2) for p in v[b]) for c in gts[b]]) if symmetric else 0.0
                per_level += (fwd + back) / 2
            ref += per_level / len(votes)
        assert float(center_loss(votes, gts, symmetric).data) == pytest.approx(ref, rel=1e-12)


def test_half_diagonal_closed_forms(rng):
    assert half_diagonal([1.0, 1.0, 1.0]) == pytest.approx(0.5 * np.sqrt(3))
    assert half_diagonal([2.0, 1.0, 2.0]) == pytest.approx(1.5)
    st = np.exp(rng.normal(size=(50, 3)))
    np.testing.assert_allclose(half_diagonal(st), 0.5 * np.linalg.norm(st, axis=1), atol=1e-9)


def test_zero_output_scale_predictor_gives_unit_sizes(rng):
    sp = ScalePredictor(4, 6, 3, rng=rng)
    props = CenterProposalSet(rng.normal(size=(1, 5, 3)), Tensor(rng.normal(size=(1, 5, 4))))
    out = sp(props)
    np.testing.assert_array_equal(out.s_tilde.data, 1.0)
    np.testing.assert_allclose(out.s, 0.5 * np.sqrt(3), atol=1e-12)


def test_scale_invariant_holds_after_random_weights(rng):
    sp = ScalePredictor(4, 6, 3, rng=rng)
    for p in sp.parameters().values():
        p.data = rng.normal(0, 0.5, p.shape)
    out = sp(CenterProposalSet(rng.normal(size=(2, 8, 3)), Tensor(rng.normal(size=(2, 8, 4)))))
    assert np.all(out.s_tilde.data > 0)
    np.testing.assert_allclose(out.s, 0.5 * np.linalg.norm(out.s_tilde.data, axis=-1), atol=1e-9)


def test_match_to_gt_radius():
    j, ok, d = match_to_gt(np.array([[0.0, 0, 0], [3.0, 0, 0]]), np.array([[0.5, 0, 0], [5.0, 0, 0]]), 1.0)
    assert j.tolist() == [0, 1] and ok.tolist() == [True, False]
    np.testing.assert_allclose(d, [0.5, 2.0])


def _cube_config():
    cfg = RunConfig()
    for k, v in {"scene.num_points": 512, "backbone.num_input": 512, "backbone.sa_points": "256 128 64",
                 "backbone.sa_widths": "16 32 32", "backbone.k": 8, "backbone.fp_width": 32,
                 "backbone.input_width": 8, "proposal.num_proposals": 32, "proposal.feature_width": 32,
                 "proposal.scale_k": 4}.items():
        cfg.set(k, str(v))
    return cfg


def test_training_moves_votes_and_learns_cube_scale():
    from votestep.backbone import Backbone
    cfg = _cube_config()
    gen = GenerationConfig(objects=(ObjectSpec(0, ((1, 1), (1, 1), (1, 1)), (1, 1)),), object_count_range=(1, 1),
                           num_points=512, occlusion=0.0, noise_std=0.0, object_point_fraction=0.9)
    scenes = [generate_scene(gen, s) for s in range(50)]
    rng = np.random.default_rng(0)
    bb = Backbone(cfg.backbone, rng=rng)
    prop = ProposalModule([cfg.backbone.fp_width] * 2, cfg.proposal, rng=rng)
    params = {**{f"b.{k}": v for k, v in bb.parameters().items()},
              **{f"p.{k}": v for k, v in prop.parameters().items()}}
    opt = tn.Adam(params, lr=3e-3)

    def forward(sc):
        out = bb.encode(sc.cloud.points)
        props, votes = prop(out.levels)
        return out, props, votes

    for step in range(150):
        sc = scenes[step % 40]
        out, props, votes = forward(sc)
        centers = np.array([b.center for b in sc.boxes])
        loss = center_loss(votes, [centers])
        j, ok, _ = match_to_gt(props.g[0], centers, 1.0)
        if ok.any():
            target = np.log(np.array([sc.boxes[i].size for i in j[ok]]))
            pred = tn.log(tn.index(props.s_tilde, (0, np.flatnonzero(ok))))
            loss = tn.add(loss, tn.mean(tn.square(tn.sub(pred, target))))
        for p in params.values():
            p.grad = None
        loss.backward()
        opt.step()

    before, after, s_pred = [], [], []
    for sc in scenes:
        out, props, votes = forward(sc)
        c = np.asarray(sc.boxes[0].center)
        for lv, v in zip(out.levels, votes):
            before.append(np.linalg.norm(lv.points[0] - c, axis=1).mean())
            after.append(np.linalg.norm(v.data[0] - c, axis=1).mean())
        _, ok, _ = match_to_gt(props.g[0], c[None], 1.0)
        s_pred.extend(props.s[0][ok])
    assert np.mean(after) < np.mean(before)
    assert np.mean(s_pred) == pytest.approx(0.5 * np.sqrt(3), rel=0.15)
