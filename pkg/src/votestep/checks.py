"""Finite-difference checks of every trainable component at micro scale."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensornet as tn
from .config import RunConfig
from .diffusion import GatedLayer, LevelEncoder, corrupt, ncsn_loss
from .head import corner_loss_tensor
from .tensornet import Dense, MLP, Tensor, TimeEmbedding, TrainableAggregation

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    worst: float
    worst_param: str

    @property
    def passed(self) -> bool:
        return self.worst < TOLERANCE


def micro_config() -> RunConfig:
    """A 16-point, float64 version of the full detector."""
    cfg = RunConfig()
    for k, v in {
        "scene.num_points": 16, "scene.object_count": "1 1", "scene.occlusion": 0.0,
        "backbone.num_input": 16, "backbone.sa_points": "12 8 4", "backbone.sa_widths": "8 8 8",
        "backbone.k": 3, "backbone.fp_width": 8, "backbone.input_width": 4,
        "proposal.num_proposals": 6, "proposal.feature_width": 8, "proposal.scale_k": 3,
        "diffusion.replicates": 2, "diffusion.k": 3, "diffusion.enhance_k": 3,
        "diffusion.feature_width": 8, "diffusion.offset_width": 4, "diffusion.score_width": 8,
        "diffusion.time_dim": 4, "head.k": 3, "head.width": 8,
        "head.pos_radius": 0.6, "head.neg_radius": 0.8, "train.dtype": "float64",
    }.items():
        cfg.set(k, str(v))
    return cfg.validate()


def _run(name, loss_fn, params, rng, max_checks=6, h=1e-4) -> CheckResult:
    report = tn.gradcheck(loss_fn, params, h=h, max_checks=max_checks, rng=rng, stencil=5)
    worst_param = max(report, key=report.get)
    return CheckResult(name, report[worst_param], worst_param)


def _randomise_biases(module, rng):
    # zero biases put many pre-activations exactly on the LeakyReLU kink
    for k, p in module.parameters().items():
        if k.endswith("bias"):
            p.data = rng.normal(0, 0.1, p.shape)


def layer_checks(rng) -> list[CheckResult]:
    out = []
    x = Tensor(rng.normal(size=(5, 4)))
    dense = Dense(4, 3, "leaky_relu", rng=rng)
    _randomise_biases(dense, rng)
    out.append(_run("dense", lambda: tn.tsum(tn.square(dense(x))), dense.parameters(), rng))
    mlp = MLP(4, [6, 3], rng=rng, last_activation="sigmoid")
    _randomise_biases(mlp, rng)
    out.append(_run("mlp", lambda: tn.tsum(tn.square(mlp(x))), mlp.parameters(), rng))

    w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    target = rng.integers(0, 3, size=5)
    bits = rng.random((5, 3)) < 0.5
    out.append(_run("elementwise", lambda: tn.add(
        tn.tsum(tn.huber(tn.mul(tn.exp(tn.linear(x, w)), 0.7))),
        tn.tsum(tn.log(tn.add(tn.square(tn.sin(tn.linear(x, w))), 1.0)))), {"w": w}, rng))
    out.append(_run("losses", lambda: tn.add(tn.cross_entropy(tn.linear(x, w), target),
                                             tn.bce_with_logits(tn.linear(x, w), bits)),
                    {"w": w}, rng))
    out.append(_run("norm_gather", lambda: tn.tsum(tn.norm(tn.batch_gather(
        tn.reshape(tn.linear(x, w), (1, 5, 3)), np.array([[0, 2, 2, 4]])))), {"w": w}, rng))
    return out


def aggregation_checks(rng) -> list[CheckResult]:
    out = []
    x = Tensor(rng.normal(size=(3, 5, 4)))
    mask = rng.random((3, 5)) < 0.7
    mask[:, 0] = True
    agg = TrainableAggregation(4, 6, rng=rng)
    _randomise_biases(agg, rng)
    out.append(_run("aggregation_trainable", lambda: tn.tsum(tn.square(tn.aggregate(x, "trainable", agg, axis=1))),
                    agg.parameters(), rng))
    w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    for mode in ("max", "mean"):
        out.append(_run(f"aggregation_{mode}", lambda m=mode: tn.tsum(tn.square(
            tn.aggregate(tn.linear(x, w), m, axis=1, mask=mask))), {"w": w}, rng))
    return out


def time_embedding_check(rng) -> CheckResult:
    emb = TimeEmbedding(8, 10, rng=rng)
    _randomise_biases(emb, rng)
    return _run("time_embedding", lambda: tn.tsum(tn.square(emb(np.array([1, 4, 10])))), emb.parameters(), rng)


def score_checks(rng) -> list[CheckResult]:
    cfg = micro_config().diffusion
    out = []
    g = rng.normal(size=(1, 4, 3))
    s = np.full((1, 4), 0.8)
    from .backbone import LevelOutput
    pts = rng.normal(size=(1, 10, 3))
    lv = LevelOutput(pts, Tensor(rng.normal(size=(1, 10, 8))))
    enc = LevelEncoder(8, cfg, rng=rng)
    layer = GatedLayer(8, 8, cfg.time_dim, True, rng=rng)
    final = Dense(8, 3, rng=rng)
    emb = TimeEmbedding(cfg.time_dim, 10, rng=rng)
    for m in (enc, layer, emb):
        _randomise_biases(m, rng)
    from .diffusion import NoiseSchedule
    sch = NoiseSchedule.from_config(cfg)
    ps = corrupt(g, s, sch, 3, np.random.default_rng(1))

    def loss():
        h, _ = enc(ps.g_t, lv.points, lv.features)
        d = layer(h, emb(3), Tensor(np.full((1, 1), sch.sigma(3))), Tensor(ps.g_t))
        return ncsn_loss([final(tn.leaky_relu(d))], ps, g)

    params = {}
    for prefix, m in (("encoder", enc), ("gated", layer), ("out", final), ("time", emb)):
        params.update({f"{prefix}.{k}": v for k, v in m.parameters().items()})
    out.append(_run("score_network", loss, params, rng, max_checks=4))
    return out


def corner_check(rng) -> CheckResult:
    c = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    sz = Tensor(rng.uniform(0.5, 2, size=(3, 3)), requires_grad=True)
    hd = Tensor(rng.uniform(-3, 3, size=3), requires_grad=True)
    gc, gs, gh = rng.normal(size=(3, 3)), rng.uniform(0.5, 2, size=(3, 3)), rng.uniform(-3, 3, size=3)
    return _run("corner_loss", lambda: corner_loss_tensor(c, sz, hd, gc, gs, gh), {"c": c, "s": sz, "h": hd}, rng)


def end_to_end_check(rng, max_checks: int = 3) -> CheckResult:
    """Total loss of the whole detector on a 16-point scene."""
    from .head import total_loss, weights_from_config
    from .pipeline import Detector, generate_dataset, make_batch

    cfg = micro_config()
    cfg.set("data.n_train", "1")
    cfg.set("data.n_val", "0")
    model = Detector(cfg, rng=np.random.default_rng(3))
    _randomise_biases(model, rng)
    scenes, _ = generate_dataset(cfg)
    batch = make_batch(scenes, 16)
    weights = weights_from_config(cfg.loss)

    # proposal positions, scales and denoised samples are stop-gradient values: hold them fixed
    @tn.FrozenDetach()
    def loss():
        return total_loss(model.train_step(batch, np.random.default_rng(7), t=4).terms, weights)[0]

    return _run("end_to_end", loss, model.parameters(), rng, max_checks=max_checks)


def run_all(seed: int = 0, include_end_to_end: bool = True) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = layer_checks(rng) + aggregation_checks(rng)
    results.append(time_embedding_check(rng))
    results += score_checks(rng)
    results.append(corner_check(rng))
    if include_end_to_end:
        results.append(end_to_end_check(rng))
    return results
