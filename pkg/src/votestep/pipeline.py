"""The full detector and its training and inference loops."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensornet as tn
from .backbone import Backbone, foreground_targets
from .config import RunConfig, fp_level_sizes, model_dtype
from .diffusion import (
    DDPMSchedule,
    NoiseSchedule,
    ScoreModel,
    Trajectory,
    corrupt,
    ddpm_corrupt,
    ddpm_loss,
    ddpm_x0,
    mean_prediction,
    ncsn_loss,
    sample_trajectory,
)
from .evalx import EvalReport, evaluate
from .geometry import OrientedBox, fps_batch, rotation_z, wrap_angle
from .head import (
    BoxParameterization,
    ProposalHead,
    assign_targets,
    head_losses,
    nms,
    total_loss,
    weights_from_config,
)
from .proposal import ProposalModule, center_loss
from .scenegen import DEFAULT_OBJECTS, GenerationConfig, Scene, generate_scene
from .tensornet import Adam, Module, Tensor

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "L_ctr", "L_ncsn", "L_box", "L_corner", "L_obj", "L_cls", "total", "val_mAP25")


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class SceneBatch:
    points: np.ndarray                      # (B, N, 3)
    gt: list                                # (centers, sizes, headings, labels) per scene
    boxes: list = field(default_factory=list)  # OrientedBox lists, for segmentation targets
    first_indices: np.ndarray | None = None     # cached first-level FPS centers

    @property
    def size(self) -> int:
        return self.points.shape[0]


def scene_gt(scene: Scene):
    return scene.centers, scene.sizes, scene.headings, np.asarray(scene.labels, dtype=np.int64)


def _fit_points(points: np.ndarray, n: int, rng) -> np.ndarray:
    if len(points) == n:
        return points
    if len(points) < n:
        # pad by repeating random points; the encoder needs a fixed count
        extra = rng.choice(len(points), n - len(points), replace=True)
        return np.concatenate([points, points[extra]])
    return points[np.sort(rng.choice(len(points), n, replace=False))]


def make_batch(scenes, num_points: int, rng=None, augment: bool = False, oriented: bool = True) -> SceneBatch:
    rng = np.random.default_rng(0) if rng is None else rng
    pts, gts, boxes = [], [], []
    for sc in scenes:
        p = _fit_points(sc.cloud.points, num_points, rng)
        c, s, h, lab = scene_gt(sc)
        if augment:
            p, c, h = augment_scene(p, c, h, rng, oriented)
        pts.append(p)
        gts.append((c, s, h, lab))
        boxes.append([OrientedBox(tuple(ci), tuple(si), float(hi)) for ci, si, hi in zip(c, s, h)])
    return SceneBatch(np.stack(pts), gts, boxes)


def augment_scene(points, centers, headings, rng, oriented: bool = True):
    """Random flip across the x = 0 plane and (for oriented scenes) rotation about +z."""
    points, centers, headings = points.copy(), centers.copy(), headings.copy()
    if rng.random() < 0.5:
        points[:, 0] *= -1
        centers[:, 0] *= -1
        headings = np.pi - headings
    if oriented:
        theta = rng.uniform(-np.pi, np.pi)
        R = rotation_z(theta)
        points = points @ R.T
        centers = centers @ R.T
        headings = headings + theta
    else:
        headings = np.zeros_like(headings)
    return points, centers, wrap_angle(headings)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class TrainStepOutput:
    terms: dict
    proposals: np.ndarray
    denoised: np.ndarray


@dataclass
class InferenceResult:
    detections: list          # per scene, after NMS
    raw: list                 # per scene, before NMS
    start: np.ndarray         # (B, Q, 3) initial corrupted samples
    final: np.ndarray         # (B, Q, 3) denoised samples
    proposals: np.ndarray     # (B, M, 3)
    trajectory: Trajectory | None = None


def _require_finite(arr, what: str):
    # geometry code downstream would fail on these with an unrelated error
    if not np.all(np.isfinite(arr)):
        raise tn.TrainingError(f"non-finite {what} during training", name=what)


_DDPM_COUNTERPART = {"ga": "ddim", "ld": "ddpm", "ald": "ddpm"}
_NCSN_COUNTERPART = {"ddim": "ga", "ddpm": "ald"}


class Detector(Module):
    def __init__(self, cfg: RunConfig, rng=None):
        cfg.validate()
        rng = np.random.default_rng(cfg.train.seed) if rng is None else rng
        dt = model_dtype(cfg)
        self.cfg = cfg
        self.dtype = dt
        self.backbone = Backbone(cfg.backbone, rng=rng, dtype=dt)
        dims = [cfg.backbone.fp_width] * len(fp_level_sizes(cfg))
        self.proposal = ProposalModule(dims, cfg.proposal, rng=rng, dtype=dt)
        d = cfg.diffusion
        self.schedule = NoiseSchedule.from_config(d)
        self.ddpm = DDPMSchedule.linear(d.ddpm_beta_start, d.ddpm_beta_end, d.ddpm_levels)
        levels = d.ddpm_levels if d.mode == "ddpm" else d.num_levels
        self.score = ScoreModel(dims, d, levels, rng=rng, dtype=dt)
        means = [o.mean_size for o in DEFAULT_OBJECTS[:cfg.scene.num_classes]]
        self.param = BoxParameterization(cfg.head.num_heading_bins, means, cfg.scene.num_classes)
        self.head = ProposalHead(self.score.feature_dim, cfg.proposal.feature_width, self.param, cfg.head,
                                 rng=rng, dtype=dt)

    @property
    def mode(self) -> str:
        return self.cfg.diffusion.mode

    # -- training -----------------------------------------------------------

    def _seg_loss(self, out, batch: SceneBatch) -> Tensor:
        margin = self.cfg.backbone.seg_margin
        total = None
        for level, logits in zip(out.sa_levels, out.seg_logits):
            target = np.stack([foreground_targets(level.points[b], batch.boxes[b], margin)
                               for b in range(batch.size)])
            term = tn.mul(tn.bce_with_logits(logits, target), 1.0 / target.size)
            total = term if total is None else tn.add(total, term)
        return tn.mul(total, 1.0 / len(out.seg_logits))

    def train_step(self, batch: SceneBatch, rng, t: int | None = None) -> TrainStepOutput:
        """Encode, propose, corrupt at one random level, denoise once and compute every loss term."""
        cfg = self.cfg
        out = self.backbone.encode(batch.points, batch.first_indices)
        for lv in out.levels:
            _require_finite(lv.features.data, "backbone features")
        props, votes = self.proposal(out.levels)
        g = props.g
        _require_finite(g, "center proposals")
        terms = {}
        ctr = center_loss(votes, [gt[0] for gt in batch.gt], cfg.proposal.symmetric_chamfer)
        if cfg.loss.seg_weight:
            ctr = tn.add(ctr, tn.mul(self._seg_loss(out, batch), cfg.loss.seg_weight))
        terms["ctr"] = ctr
        sch = self.schedule
        if self.mode == "ncsn":
            t = int(rng.integers(1, sch.T + 1)) if t is None else t
            ps = corrupt(g, props.s, sch, t, rng)
            x = ps.g_t
            feats = self.score.features(x, out.levels)
            preds = self.score.predict(x, feats, t, sch.sigma(t))
            terms["ncsn"] = ncsn_loss(preds, ps, g, sch.weight(t))
            # one gradient-ascent step with unit step size
            denoised = tn.detached(x + mean_prediction(preds).data.astype(np.float64))
        else:
            T = self.ddpm.T
            t = int(rng.integers(1, T + 1)) if t is None else t
            abar = self.ddpm.abar(t)
            R = sch.replicates
            parent = np.repeat(np.arange(g.shape[1]), R)
            unit = sch.scale(props.s)[:, parent]
            x, z = ddpm_corrupt(g[:, parent], abar, rng, unit)
            feats = self.score.features(x, out.levels)
            preds = self.score.predict(x, feats, t, math.sqrt(1 - abar))
            terms["ncsn"] = ddpm_loss(preds, z)
            denoised = tn.detached(ddpm_x0(x, mean_prediction(preds).data.astype(np.float64), abar, unit))
        head_out = self.head(g, props.features, denoised, feats.h_e)
        hc = cfg.head
        assign = assign_targets(g, batch.gt, self.param, hc.pos_radius, hc.neg_radius, cfg.proposal.match_radius)
        terms.update(head_losses(head_out, props.s_tilde, assign, self.param))
        return TrainStepOutput(terms, g, denoised)

    def loss(self, batch: SceneBatch, rng, t: int | None = None):
        step = self.train_step(batch, rng, t)
        return total_loss(step.terms, weights_from_config(self.cfg.loss))

    # -- inference ----------------------------------------------------------

    def default_sampler(self) -> str:
        """``infer.sampler``, or its counterpart when it belongs to the other training mode."""
        s = self.cfg.infer.sampler
        if self.mode == "ddpm":
            return _DDPM_COUNTERPART.get(s, s)
        return _NCSN_COUNTERPART.get(s, s)

    def _predictor(self, levels, ddpm: bool):
        def predict(x, t):
            feats = self.score.features(x, levels)
            sigma = math.sqrt(1 - self.ddpm.abar(t)) if ddpm else self.schedule.sigma(t)
            preds = self.score.predict(x, feats, t, sigma)
            return mean_prediction(preds).data.astype(np.float64), [h.data for h in feats.h_e]
        return predict

    def infer(self, points, sampler: str | None = None, steps: int | None = None, rng=None,
              phase: str | None = None, apply_nms: bool = True, noise_rng=None) -> InferenceResult:
        """Detect boxes in ``points`` (B, N, 3).

        ``rng`` draws the starting corruption; ``noise_rng`` (default: ``rng``)
        drives the stochastic samplers.
        """
        cfg = self.cfg
        sampler = self.default_sampler() if sampler is None else sampler
        steps = cfg.infer.steps if steps is None else steps
        phase = cfg.infer.feature_phase if phase is None else phase
        rng = np.random.default_rng(cfg.infer.seed) if rng is None else rng
        noise_rng = rng if noise_rng is None else noise_rng
        is_ddpm = sampler in ("ddpm", "ddim")
        if is_ddpm != (self.mode == "ddpm"):
            raise ValueError(f"sampler {sampler!r} does not match a model trained in {self.mode!r} mode")
        with tn.no_grad():
            out = self.backbone.encode(points)
            props, _ = self.proposal(out.levels)
            g = props.g
            sch = self.schedule
            parent = np.repeat(np.arange(g.shape[1]), sch.replicates)
            unit = sch.scale(props.s)[:, parent]
            if is_ddpm:
                start, _ = ddpm_corrupt(g[:, parent], self.ddpm.abar(self.ddpm.T), rng, unit)
            else:
                start = corrupt(g, props.s, sch, sch.T, rng).g_t
            traj = sample_trajectory(sampler, steps, start, self._predictor(out.levels, is_ddpm), sch, noise_rng,
                                     unit=unit, ddpm=self.ddpm)
            chosen = traj.phase(phase)
            avg = [Tensor(np.mean([step[l] for step in chosen], axis=0).astype(self.dtype))
                   for l in range(len(chosen[0]))]
            head_out = self.head(g, props.features, traj.final, avg)
        o_c, o_r = head_out.o_c.data, head_out.o_r.data
        raw, kept = [], []
        hc = cfg.head
        for b in range(g.shape[0]):
            dets = self.param.decode(o_c[b], o_r[b], g[b])
            raw.append(dets)
            kept.append(nms(dets, hc.nms_iou, hc.objectness_floor, cfg.eval.iou_mode) if apply_nms else dets)
        return InferenceResult(kept, raw, start, traj.final, g, traj)

    # -- persistence ----------------------------------------------------------

    def checkpoint_state(self, optimizer: Adam | None = None, extra: dict | None = None) -> dict:
        state = {f"model.{k}": v for k, v in self.state_dict().items()}
        if optimizer is not None:
            state.update(optimizer.state_dict())
        for k, v in (extra or {}).items():
            state[k] = np.asarray(v, dtype=np.float64)
        return state

    def load_checkpoint_state(self, state: dict):
        model = {k[len("model."):]: v for k, v in state.items() if k.startswith("model.")}
        self.load_state_dict(model)


def save_checkpoint(path, model: Detector, optimizer: Adam | None = None, extra: dict | None = None):
    tn.write_checkpoint(path, model.checkpoint_state(optimizer, extra))


def load_checkpoint(path, cfg: RunConfig) -> tuple[Detector, dict]:
    state = tn.read_checkpoint(path)
    model = Detector(cfg)
    model.load_checkpoint_state(state)
    return model, state


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------

def run_inference(model: Detector, scenes, sampler=None, steps=None, seed: int = 0, batch_size: int = 8,
                  phase=None, noise_seed: int | None = None) -> list[InferenceResult]:
    results = []
    n = model.cfg.backbone.num_input
    for i in range(0, len(scenes), batch_size):
        chunk = scenes[i:i + batch_size]
        rng = np.random.default_rng([seed, i])
        noise = None if noise_seed is None else np.random.default_rng([noise_seed, i, 1])
        batch = make_batch(chunk, n, rng)
        results.append(model.infer(batch.points, sampler, steps, rng, phase, noise_rng=noise))
    return results


def evaluate_model(model: Detector, scenes, sampler=None, steps=None, seed: int = 0, phase=None,
                   noise_seed: int | None = None) -> EvalReport:
    results = run_inference(model, scenes, sampler, steps, seed, phase=phase, noise_seed=noise_seed)
    dets = [d for r in results for d in r.detections]
    samples = [s for r in results for s in r.final]
    gts = [(sc.boxes, sc.labels) for sc in scenes]
    ev = model.cfg.eval
    return evaluate(dets, gts, model.cfg.scene.num_classes, ev.thresholds, ev.iou_mode, samples)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

class FPSCache:
    """First-level FPS centers per training scene.

    Distances, and hence FPS, are unchanged by the rotation and flip
    augmentation, so the selection is computed once on the stored points.
    Only scenes that already have exactly the encoder's point count are
    cached (others are resampled every batch).
    """

    def __init__(self, num_points: int, count: int):
        self.num_points, self.count = num_points, count
        self._cache: dict[int, np.ndarray] = {}

    def lookup(self, keys, scenes):
        if any(len(sc.cloud.points) != self.num_points for sc in scenes):
            return None
        for k, sc in zip(keys, scenes):
            if k not in self._cache:
                self._cache[k] = fps_batch(sc.cloud.points[None], self.count, 0)[0]
        return np.stack([self._cache[k] for k in keys])


def learning_rate(tc, epoch: int) -> float:
    return tc.lr * tc.lr_decay ** sum(1 for m in tc.lr_milestones if epoch >= m)


@dataclass
class TrainResult:
    model: Detector
    metrics: list
    best_map: float
    timings: list


def train(cfg: RunConfig, train_scenes, val_scenes=None, out_dir=None, resume=None,
          epochs: int | None = None, progress=None) -> TrainResult:
    """Train from scratch (or from ``resume``) and write checkpoints plus ``metrics.csv`` into ``out_dir``.

    Batch ``j`` of epoch ``e`` draws all its randomness from
    ``default_rng([seed, e, j])``, so a resumed run continues exactly.
    """
    tc = cfg.train
    model = Detector(cfg)
    opt = Adam(model.parameters(), lr=tc.lr, clip_norm=tc.clip_norm, weight_decay=tc.weight_decay)
    start_epoch, best = 0, -1.0
    metrics: list[dict] = []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        state = tn.read_checkpoint(resume)
        model.load_checkpoint_state(state)
        opt.load_state_dict(state)
        start_epoch = int(state["train.next_epoch"])
        best = float(state.get("train.best_map", -1.0))
        if out_dir is not None and (out_dir / "metrics.csv").exists():
            metrics = read_metrics(out_dir / "metrics.csv")[:start_epoch]
    end_epoch = tc.epochs if epochs is None else min(tc.epochs, start_epoch + epochs)
    n_points = cfg.backbone.num_input
    weights = weights_from_config(cfg.loss)
    timings = []
    fps_cache = FPSCache(n_points, cfg.backbone.sa_points[0])
    for epoch in range(start_epoch, end_epoch):
        t0 = time.perf_counter()
        opt.lr = learning_rate(tc, epoch)
        order = np.random.default_rng([tc.seed, epoch]).permutation(len(train_scenes))
        sums = {k: 0.0 for k in ("ctr", "ncsn", "box", "corner", "obj", "cls", "total")}
        n_batches = 0
        for j, start in enumerate(range(0, len(order), tc.batch_size)):
            rng = np.random.default_rng([tc.seed, epoch, j])
            chunk = [train_scenes[i] for i in order[start:start + tc.batch_size]]
            batch = make_batch(chunk, n_points, rng, tc.augment, cfg.scene.oriented)
            batch.first_indices = fps_cache.lookup([int(i) for i in order[start:start + tc.batch_size]], chunk)
            model.zero_grad()
            step = model.train_step(batch, rng)
            loss, parts = total_loss(step.terms, weights)
            loss.backward()
            opt.step()
            for k in sums:
                sums[k] += parts[k]
            n_batches += 1
        row = {"epoch": epoch}
        row.update({f"L_{k}": v / max(n_batches, 1) for k, v in sums.items() if k != "total"})
        row["total"] = sums["total"] / max(n_batches, 1)
        row["val_mAP25"] = float("nan")
        last = epoch == tc.epochs - 1
        if val_scenes and tc.eval_every > 0 and ((epoch + 1) % tc.eval_every == 0 or last):
            rep = evaluate_model(model, val_scenes, seed=cfg.infer.seed)
            row["val_mAP25"] = rep.mAP(0.25)
            if row["val_mAP25"] > best:
                best = row["val_mAP25"]
                if out_dir is not None:
                    save_checkpoint(out_dir / "best.ckpt", model, opt,
                                    {"train.next_epoch": epoch + 1, "train.best_map": best})
        metrics.append(row)
        timings.append(time.perf_counter() - t0)
        if out_dir is not None:
            write_metrics(out_dir / "metrics.csv", metrics)
            save_checkpoint(out_dir / "last.ckpt", model, opt,
                            {"train.next_epoch": epoch + 1, "train.best_map": best})
        log.info("epoch %d total %.4f val_mAP25 %s (%.1fs)", epoch, row["total"], row["val_mAP25"], timings[-1])
        if progress is not None:
            progress(row)
    return TrainResult(model, metrics, best, timings)


def _fmt_metric(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "nan" if math.isnan(v) else f"{v:.6f}"


def write_metrics(path, rows):
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([_fmt_metric(r[c]) for c in METRIC_COLUMNS])


def read_metrics(path) -> list[dict]:
    with open(path, encoding="ascii") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows]



# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def generation_config(cfg: RunConfig) -> GenerationConfig:
    sc = cfg.scene
    return GenerationConfig(room=tuple(sc.room), objects=DEFAULT_OBJECTS[:sc.num_classes],
                            object_count_range=tuple(sc.object_count), num_points=sc.num_points,
                            object_point_fraction=sc.object_point_fraction, noise_std=sc.noise_std,
                            occlusion=sc.occlusion, overlap_factor=sc.overlap_factor, oriented=sc.oriented)


def split_seeds(cfg: RunConfig) -> tuple[list[int], list[int]]:
    """Disjoint scene seeds: training first, validation after it."""
    base = cfg.data.seed * 1_000_000
    n_tr, n_va = cfg.data.n_train, cfg.data.n_val
    return list(range(base, base + n_tr)), list(range(base + n_tr, base + n_tr + n_va))


def generate_dataset(cfg: RunConfig):
    gen = generation_config(cfg)
    tr, va = split_seeds(cfg)
    return [generate_scene(gen, s) for s in tr], [generate_scene(gen, s) for s in va]
