"""Run configuration: a flat ``section.key = value`` text format.

Lines starting with ``#`` are comments. Sequences are written as
space-separated values (``backbone.sa_points = 1024 256 64``). Every key
maps onto a field of one of the dataclasses below; unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass
class SceneConfig:
    room: tuple = (8.0, 8.0, 3.0)
    num_classes: int = 4
    num_points: int = 2048
    object_count: tuple = (3, 8)
    object_point_fraction: float = 0.8
    noise_std: float = 0.01
    occlusion: float = 0.15
    overlap_factor: float = 1.0
    oriented: bool = True


@dataclass
class DataConfig:
    n_train: int = 200
    n_val: int = 50
    seed: int = 0


@dataclass
class BackboneConfig:
    num_input: int = 2048
    input_width: int = 16
    sa_points: tuple = (1024, 256, 64)
    sa_widths: tuple = (64, 128, 256)
    k: int = 16
    fp_width: int = 128
    num_fp_levels: int = 2
    fg_fraction: float = 0.75
    grouping: str = "knn"
    radius: tuple = (0.2, 0.4, 0.8)
    seg_margin: float = 0.05


@dataclass
class ProposalConfig:
    num_proposals: int = 64
    feature_width: int = 64
    use_coords: bool = True
    multi_scale: bool = True
    scale_k: int = 8
    match_radius: float = 1.0
    symmetric_chamfer: bool = False


@dataclass
class DiffusionConfig:
    mode: str = "ncsn"
    lambda_: float = 0.6
    use_scale: bool = True
    replicates: int = 16
    num_levels: int = 10
    sigma_min: float = 0.1
    sigma_max: float = 1.0
    gamma0: float = 0.01
    k: int = 8
    grouping: str = "knn"
    radius: float = 0.3
    aggregation: str = "trainable"
    feature_width: int = 64
    offset_width: int = 16
    enhance: bool = True
    enhance_k: int = 8
    score_layers: int = 2
    score_width: int = 64
    time_dim: int = 32
    use_coords: bool = True
    eq9_variance: bool = False
    loss_weighting: str = "uniform"
    ddpm_levels: int = 30
    ddpm_beta_start: float = 0.005
    ddpm_beta_end: float = 0.1


@dataclass
class HeadConfig:
    num_heading_bins: int = 12
    k: int = 16
    width: int = 128
    pos_radius: float = 0.3
    neg_radius: float = 0.6
    independent_aggregation: bool = False
    nms_iou: float = 0.25
    objectness_floor: float = 0.05


@dataclass
class LossConfig:
    w_ctr: float = 1.0
    w_ncsn: float = 1.0
    w_box: float = 1.0
    w_corner: float = 0.1
    w_obj: float = 0.5
    w_cls: float = 0.1
    seg_weight: float = 1.0


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    lr: float = 1e-3
    lr_decay: float = 0.5
    lr_milestones: tuple = (30, 40)
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    seed: int = 0
    augment: bool = True
    eval_every: int = 5
    dtype: str = "float32"


@dataclass
class InferConfig:
    sampler: str = "ga"
    steps: int = 10
    feature_phase: str = "full"
    seed: int = 0


@dataclass
class EvalConfig:
    iou_mode: str = "oriented"
    thresholds: tuple = (0.25, 0.5)


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    proposal: ProposalConfig = field(default_factory=ProposalConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    # -- access ------------------------------------------------------------
    def set(self, key: str, raw: str):
        section, _, name = key.partition(".")
        if not name or not hasattr(self, section):
            raise ConfigError(f"unknown config key {key!r}")
        sec = getattr(self, section)
        attr = _attr_name(sec, name)
        if attr is None:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(sec, attr, _coerce(getattr(sec, attr), raw, key))

    def items(self):
        for sf in fields(self):
            sec = getattr(self, sf.name)
            for f in fields(sec):
                yield f"{sf.name}.{f.name.rstrip('_')}", getattr(sec, f.name)

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    def copy(self) -> RunConfig:
        return dataclasses.replace(
            self, **{sf.name: dataclasses.replace(getattr(self, sf.name)) for sf in fields(self)}
        )

    def validate(self):
        validate(self)
        return self


def _attr_name(sec, name):
    for cand in (name, name + "_"):
        if any(f.name == cand for f in fields(sec)):
            return cand
    return None


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return " ".join(_format(x) for x in v)
    return str(v)


def _coerce(default, raw: str, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = raw.replace(",", " ").split()
            kind = type(default[0]) if default else float
            return tuple(kind(p) for p in parts)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = RunConfig() if base is None else base.copy()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            cfg.set(key, value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return cfg


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg = parse_config(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    for k, v in (overrides or {}).items():
        cfg.set(k, str(v))
    return cfg.validate()


def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


def validate(cfg: RunConfig):
    s, b, p, d, h, t = cfg.scene, cfg.backbone, cfg.proposal, cfg.diffusion, cfg.head, cfg.train
    _require(len(s.room) == 3 and min(s.room) > 0, "scene.room needs three positive extents")
    _require(1 <= s.num_classes <= 4, "scene.num_classes must lie in [1, 4]")
    _require(s.num_points >= 1, "scene.num_points must be positive")
    _require(len(s.object_count) == 2 and 1 <= s.object_count[0] <= s.object_count[1],
             "scene.object_count must be 'min max' with 1 <= min <= max")
    _require(0.0 <= s.object_point_fraction <= 1.0, "scene.object_point_fraction must lie in [0, 1]")
    _require(s.noise_std >= 0, "scene.noise_std must be non-negative")
    _require(0.0 <= s.occlusion < 1.0, "scene.occlusion must lie in [0, 1)")
    _require(cfg.data.n_train >= 1 and cfg.data.n_val >= 0, "data split sizes invalid")

    _require(len(b.sa_points) >= 2, "backbone needs at least two set-abstraction levels")
    _require(len(b.sa_widths) == len(b.sa_points), "backbone.sa_widths must match backbone.sa_points")
    _require(all(x >= y for x, y in zip(b.sa_points, b.sa_points[1:])), "backbone.sa_points must be non-increasing")
    _require(b.num_input >= b.sa_points[0], "backbone.num_input must be >= the first SA level size")
    _require(1 <= b.k <= min(b.sa_points[-1], b.num_input), "backbone.k must not exceed the smallest level")
    _require(1 <= b.num_fp_levels <= len(b.sa_points) - 1, "backbone.num_fp_levels must lie in [1, L_sa - 1]")
    _require(0.0 < b.fg_fraction <= 1.0, "backbone.fg_fraction must lie in (0, 1]")
    _require(b.grouping in ("knn", "ball"), "backbone.grouping must be knn or ball")
    _require(len(b.radius) == len(b.sa_points) and min(b.radius) > 0, "backbone.radius needs one positive radius per SA level")

    _require(p.num_proposals >= 1, "proposal.num_proposals must be positive")
    fp_sizes = fp_level_sizes(cfg)
    _require(p.num_proposals <= sum(fp_sizes if p.multi_scale else fp_sizes[-1:]),
             "proposal.num_proposals exceeds the number of candidate proposals")
    _require(1 <= p.scale_k <= p.num_proposals, "proposal.scale_k must lie in [1, num_proposals]")
    _require(p.match_radius > 0, "proposal.match_radius must be positive")

    _require(d.mode in ("ncsn", "ddpm"), "diffusion.mode must be ncsn or ddpm")
    _require(0.0 < d.lambda_ <= 1.0, "diffusion.lambda must lie in (0, 1]")
    _require(d.replicates >= 1, "diffusion.replicates must be >= 1")
    _require(d.num_levels >= 1, "diffusion.num_levels must be >= 1")
    _require(0 < d.sigma_min < d.sigma_max or (d.num_levels == 1 and d.sigma_min > 0),
             "diffusion sigmas must satisfy 0 < sigma_min < sigma_max")
    _require(d.gamma0 > 0, "diffusion.gamma0 must be positive")
    _require(1 <= d.k <= min(fp_sizes), "diffusion.k must not exceed the smallest propagation level")
    _require(d.grouping in ("knn", "ball", "ball_position"), "diffusion.grouping must be knn, ball or ball_position")
    _require(d.radius > 0, "diffusion.radius must be positive")
    _require(d.aggregation in ("max", "mean", "trainable"), "diffusion.aggregation must be max, mean or trainable")
    _require(1 <= d.enhance_k <= p.num_proposals * d.replicates, "diffusion.enhance_k out of range")
    _require(d.score_layers >= 1 and d.score_width >= 1, "score network needs at least one layer")
    _require(d.time_dim >= 2 and d.time_dim % 2 == 0, "diffusion.time_dim must be even")
    _require(d.loss_weighting in ("uniform", "sigma2"), "diffusion.loss_weighting must be uniform or sigma2")
    _require(d.ddpm_levels >= 1 and 0 < d.ddpm_beta_start <= d.ddpm_beta_end < 1, "invalid DDPM schedule")

    _require(h.num_heading_bins >= 1, "head.num_heading_bins must be >= 1")
    _require(1 <= h.k <= p.num_proposals * d.replicates, "head.k out of range")
    _require(0 < h.pos_radius <= h.neg_radius, "head radii must satisfy 0 < pos <= neg")
    _require(0 < h.nms_iou < 1, "head.nms_iou must lie in (0, 1)")
    _require(0 <= h.objectness_floor < 1, "head.objectness_floor must lie in [0, 1)")

    for name in ("w_ctr", "w_ncsn", "w_box", "w_corner", "w_obj", "w_cls", "seg_weight"):
        _require(getattr(cfg.loss, name) >= 0, f"loss.{name} must be non-negative")

    _require(t.epochs >= 0 and t.batch_size >= 1, "train.epochs/batch_size invalid")
    _require(t.lr > 0 and 0 < t.lr_decay <= 1, "train.lr/lr_decay invalid")
    _require(t.clip_norm >= 0 and t.weight_decay >= 0, "train.clip_norm/weight_decay invalid")
    _require(t.eval_every >= 1, "train.eval_every must be >= 1")
    _require(t.dtype in ("float32", "float64"), "train.dtype must be float32 or float64")

    i = cfg.infer
    _require(i.sampler in SAMPLERS, f"infer.sampler must be one of {SAMPLERS}")
    _require(i.steps >= 1, "infer.steps must be >= 1")
    _require(i.feature_phase in ("full", "last", "first_half", "second_half"), "invalid infer.feature_phase")
    _require(cfg.eval.iou_mode in ("oriented", "axis_aligned"), "eval.iou_mode must be oriented or axis_aligned")
    _require(len(cfg.eval.thresholds) >= 1 and all(0 < x <= 1 for x in cfg.eval.thresholds), "eval.thresholds invalid")


SAMPLERS = ("ga", "ld", "ald", "ddpm", "ddim")


def fp_level_sizes(cfg: RunConfig) -> list[int]:
    """Point counts of the feature-propagation outputs, coarse to fine."""
    sa = list(cfg.backbone.sa_points)
    return [sa[-2 - i] for i in range(cfg.backbone.num_fp_levels)]


def model_dtype(cfg: RunConfig):
    return np.float32 if cfg.train.dtype == "float32" else np.float64
