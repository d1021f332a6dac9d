"""Scale-normalised corruption of center proposals, the gated multi-scale score
network, and the samplers that move perturbed proposals back toward the data.

Conventions used throughout:

* ``corrupt`` draws ``g_t = g + lam * s * sigma_t * z``; the score network is
  trained to predict the displacement ``g - g_t``, so one gradient-ascent
  step with ``gamma = 1`` reconstructs ``g`` from a perfect prediction.
* Step sizes follow ``gamma_t = gamma0 * sigma_t**2 / sigma_1**2``. The
  default ``gamma0 = (sigma_1 / sigma_T)**2`` makes ``gamma_T = 1``.
* The DDPM baseline works in the same normalised frame: with ``c = lam * s``
  it draws ``x_t = sqrt(abar_t) * g + c * sqrt(1 - abar_t) * z`` and the
  network predicts ``z``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensornet as tn
from .backbone import gather_points, group
from .geometry import knn_indices
from .tensornet import Dense, Module, Tensor, TimeEmbedding, TrainableAggregation


# ---------------------------------------------------------------------------
# schedules and corruption
# ---------------------------------------------------------------------------

@dataclass
class NoiseSchedule:
    sigmas: np.ndarray
    lam: float = 0.6
    gamma0: float | None = None
    replicates: int = 16
    weighting: str = "uniform"
    eq9_variance: bool = False
    use_scale: bool = True
    scale_range: tuple = (0.05, 5.0)

    def __post_init__(self):
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64).reshape(-1)
        if len(self.sigmas) < 1 or np.any(self.sigmas <= 0) or np.any(np.diff(self.sigmas) <= 0):
            raise ValueError("sigmas must be positive and strictly increasing")
        if not 0.0 < self.lam <= 1.0:
            raise ValueError("lambda must lie in (0, 1]")
        if self.replicates < 1:
            raise ValueError("need at least one replicate")
        if self.gamma0 is None:
            self.gamma0 = float((self.sigmas[0] / self.sigmas[-1]) ** 2)

    @classmethod
    def geometric(cls, sigma_min: float, sigma_max: float, num_levels: int, **kw) -> NoiseSchedule:
        if num_levels == 1:
            return cls(np.array([sigma_max]), **kw)
        return cls(np.geomspace(sigma_min, sigma_max, num_levels), **kw)

    @classmethod
    def from_config(cls, d) -> NoiseSchedule:
        return cls.geometric(d.sigma_min, d.sigma_max, d.num_levels, lam=d.lambda_, gamma0=d.gamma0,
                             replicates=d.replicates, weighting=d.loss_weighting,
                             eq9_variance=d.eq9_variance, use_scale=d.use_scale)

    @property
    def T(self) -> int:
        return len(self.sigmas)

    def _check(self, t):
        if not 1 <= t <= self.T:
            raise IndexError(f"noise level {t} outside [1, {self.T}]")

    def sigma(self, t: int) -> float:
        self._check(t)
        return float(self.sigmas[t - 1])

    def gamma(self, t: int) -> float:
        return float(self.gamma0 * self.sigma(t) ** 2 / self.sigmas[0] ** 2)

    def weight(self, t: int) -> float:
        return 1.0 if self.weighting == "uniform" else self.sigma(t) ** 2

    def levels_for(self, steps: int) -> np.ndarray:
        """Noise level used at each of ``steps`` annealed steps, from T down to 1."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        return np.rint(np.linspace(self.T, 1, steps)).astype(int)

    def _base(self, s) -> np.ndarray:
        # a wild early scale prediction must not blow up the noise
        s = np.asarray(s, dtype=np.float64)
        return np.clip(s, *self.scale_range) if self.use_scale else np.ones_like(s)

    def noise_std(self, s, t: int) -> np.ndarray:
        base = self._base(s)
        if self.eq9_variance:
            return np.sqrt(base * self.lam) * self.sigma(t)
        return self.lam * base * self.sigma(t)

    def scale(self, s) -> np.ndarray:
        """Per-proposal length unit ``lam * s`` (or ``lam`` without scale normalisation)."""
        return self.lam * self._base(s)


@dataclass
class PerturbedSet:
    g_t: np.ndarray     # (B, M*R, 3)
    parent: np.ndarray  # (M*R,) proposal index of each sample
    t: np.ndarray       # (B, M*R) noise level per sample
    z: np.ndarray       # (B, M*R, 3) unit noise
    std: np.ndarray     # (B, M*R) noise standard deviation

    @property
    def count(self) -> int:
        return self.g_t.shape[1]


def _batched(g, s):
    g = np.asarray(g, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    single = g.ndim == 2
    if single:
        g, s = g[None], s[None]
    return g, s, single


def corrupt(g, s, schedule: NoiseSchedule, t: int, rng=None, z=None, replicates: int | None = None) -> PerturbedSet:
    """``replicates`` noisy copies of every proposal at level ``t``.

    Sample ``i * R + r`` is replicate ``r`` of proposal ``i``. ``z`` may be
    given explicitly with shape (B, M*R, 3).
    """
    g, s, _ = _batched(g, s)
    B, M, _ = g.shape
    R = schedule.replicates if replicates is None else replicates
    parent = np.repeat(np.arange(M), R)
    if z is None:
        rng = np.random.default_rng() if rng is None else rng
        z = rng.standard_normal((B, M * R, 3))
    z = np.asarray(z, dtype=np.float64).reshape(B, M * R, 3)
    std = schedule.noise_std(s[:, parent], t)
    g_t = g[:, parent] + std[..., None] * z
    return PerturbedSet(g_t, parent, np.full((B, M * R), t), z, std)


@dataclass
class DDPMSchedule:
    betas: np.ndarray

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if np.any(self.betas <= 0) or np.any(self.betas >= 1):
            raise ValueError("betas must lie in (0, 1)")
        self.alpha_bar = np.cumprod(1.0 - self.betas)

    @classmethod
    def linear(cls, beta_start: float, beta_end: float, num_levels: int) -> DDPMSchedule:
        return cls(np.linspace(beta_start, beta_end, num_levels))

    @property
    def T(self) -> int:
        return len(self.betas)

    def abar(self, t: int) -> float:
        """Cumulative alpha at level ``t``; level 0 is the clean data (1.0)."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise IndexError(f"DDPM level {t} outside [0, {self.T}]")
        return float(self.alpha_bar[t - 1])

    def levels_for(self, steps: int) -> np.ndarray:
        if steps < 1:
            raise ValueError("steps must be >= 1")
        return np.unique(np.rint(np.linspace(self.T, 1, steps)).astype(int))[::-1]


def ddpm_corrupt(g, alpha_bar: float, rng=None, scale=1.0, z=None):
    """``x_t = sqrt(abar) * g + scale * sqrt(1 - abar) * z``; returns ``(x_t, z)``."""
    if not 0.0 < alpha_bar <= 1.0:
        raise ValueError("alpha_bar must lie in (0, 1]")
    g = np.asarray(g, dtype=np.float64)
    if z is None:
        rng = np.random.default_rng() if rng is None else rng
        z = rng.standard_normal(g.shape)
    scale = np.asarray(scale, dtype=np.float64)
    if scale.ndim and scale.ndim < g.ndim:
        scale = scale[..., None]
    return np.sqrt(alpha_bar) * g + scale * np.sqrt(1.0 - alpha_bar) * z, z


def ddpm_x0(x_t, eps, abar_t: float, scale=1.0):
    scale = np.asarray(scale, dtype=np.float64)
    if scale.ndim and scale.ndim < np.ndim(x_t):
        scale = scale[..., None]
    return (x_t - scale * np.sqrt(1.0 - abar_t) * eps) / np.sqrt(abar_t)


def ddpm_reverse_step(x_t, eps, abar_t: float, abar_prev: float, scale=1.0, eta: float = 1.0, rng=None):
    """One generalised reverse step from ``abar_t`` to ``abar_prev``.

    ``eta = 1`` is the ancestral DDPM update, ``eta = 0`` the deterministic
    DDIM update. Returns ``(x_prev, x0_estimate)``.
    """
    scale_b = np.asarray(scale, dtype=np.float64)
    if scale_b.ndim and scale_b.ndim < np.ndim(x_t):
        scale_b = scale_b[..., None]
    x0 = ddpm_x0(x_t, eps, abar_t, scale)
    sig = eta * np.sqrt((1 - abar_prev) / (1 - abar_t)) * np.sqrt(max(0.0, 1 - abar_t / abar_prev))
    direction = np.sqrt(max(0.0, 1 - abar_prev - sig ** 2)) * eps
    x_prev = np.sqrt(abar_prev) * x0 + scale_b * direction
    if sig > 0:
        rng = np.random.default_rng() if rng is None else rng
        x_prev = x_prev + scale_b * sig * rng.standard_normal(np.shape(x_t))
    return x_prev, x0


# ---------------------------------------------------------------------------
# multi-scale features
# ---------------------------------------------------------------------------

@dataclass
class MultiScaleFeatures:
    h: list                      # per level (B, Q, d) tensors
    h_e: list                    # per level enhanced features
    empty: list = field(default_factory=list)  # per level (B, Q) bool, empty ball-query neighbourhoods

    def stacked(self) -> Tensor:
        """Enhanced features of all levels, shape (B, Q, L, d_e)."""
        B, Q, d = self.h_e[0].shape
        return tn.concat([tn.reshape(h, (B, Q, 1, d)) for h in self.h_e], axis=2)


class LevelEncoder(Module):
    """Features of perturbed samples from one backbone level.

    For each sample: group neighbours of the level, concatenate each
    neighbour feature with an MLP of its offset, shared MLP, aggregate.
    """

    def __init__(self, level_dim: int, cfg, rng=None, dtype=np.float64):
        w = cfg.feature_width
        self.offset = Dense(3, cfg.offset_width, "leaky_relu", rng=rng, dtype=dtype)
        self.shared = Dense(level_dim + cfg.offset_width, w, "leaky_relu", rng=rng, dtype=dtype)
        self.agg = TrainableAggregation(w, w, rng=rng, dtype=dtype) if cfg.aggregation == "trainable" else None
        self.pos = Dense(3, w, "leaky_relu", rng=rng, dtype=dtype) if cfg.grouping == "ball_position" else None
        self.mode = cfg.aggregation
        self.grouping = "knn" if cfg.grouping == "knn" else "ball"
        self.k, self.radius = cfg.k, cfg.radius
        self.out_dim = w

    def __call__(self, samples: np.ndarray, points: np.ndarray, feats: Tensor):
        idx, mask = group(samples, points, self.k, self.grouping, self.radius)
        off = (gather_points(points, idx) - samples[:, :, None, :]).astype(feats.dtype)
        h = tn.concat([tn.batch_gather(feats, idx), self.offset(Tensor(off))], axis=-1)
        h = tn.aggregate(self.shared(h), self.mode, self.agg, axis=2, mask=mask)
        empty = np.zeros(samples.shape[:2], dtype=bool)
        if mask is not None:
            empty = ~mask.any(axis=-1)
            h = tn.mul(h, (~empty)[..., None].astype(feats.dtype))
        if self.pos is not None:
            h = tn.add(h, self.pos(Tensor(samples.astype(feats.dtype))))
        return h, empty


class Enhancer(Module):
    """Set abstraction over neighbouring perturbed samples: ``[h; SA(h, g_t)]``."""

    def __init__(self, dim: int, k: int, rng=None, dtype=np.float64):
        self.mlp = Dense(dim + 3, dim, "leaky_relu", rng=rng, dtype=dtype)
        self.k = k

    def neighbours(self, samples: np.ndarray) -> np.ndarray:
        return knn_indices(samples, samples, min(self.k, samples.shape[1]))[0]

    def summary(self, h: Tensor, samples: np.ndarray, idx: np.ndarray) -> Tensor:
        off = (gather_points(samples, idx) - samples[:, :, None, :]).astype(h.dtype)
        grouped = tn.concat([tn.batch_gather(h, idx), Tensor(off)], axis=-1)
        return tn.aggregate(self.mlp(grouped), "max", axis=2)

    def __call__(self, h: Tensor, samples: np.ndarray, idx: np.ndarray | None = None) -> Tensor:
        idx = self.neighbours(samples) if idx is None else idx
        return tn.concat([h, self.summary(h, samples, idx)], axis=-1)


# ---------------------------------------------------------------------------
# score network
# ---------------------------------------------------------------------------

class SplitDense(Module):
    """Dense layer on a concatenation, stored as one weight block per input part.

    Parts may have different leading shapes as long as they broadcast, which
    lets a per-step time embedding join per-sample inputs without tiling.
    """

    def __init__(self, in_dims, out_dim: int, rng=None, dtype=np.float64):
        rng = np.random.default_rng(0) if rng is None else rng
        bound = np.sqrt(3.0 / max(1, sum(in_dims)))
        self.weights = [Tensor(rng.uniform(-bound, bound, (out_dim, d)).astype(dtype), requires_grad=True)
                        for d in in_dims]
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def __call__(self, *parts) -> Tensor:
        out = None
        for w, x in zip(self.weights, parts):
            y = tn.linear(x, w)
            out = y if out is None else tn.add(out, y)
        return tn.add(out, self.bias)


class GatedLayer(Module):
    """``d = phi_t(h) * sigmoid(phi_g([t_e; g_t])) + phi_b([sigma_t; g_t])``."""

    def __init__(self, in_dim: int, width: int, time_dim: int, use_coords: bool, rng=None, dtype=np.float64):
        coords = [3] if use_coords else []
        self.phi_t = Dense(in_dim, width, rng=rng, dtype=dtype)
        self.phi_g = SplitDense([time_dim] + coords, width, rng=rng, dtype=dtype)
        self.phi_b = SplitDense([1] + coords, width, rng=rng, dtype=dtype)
        self.use_coords = use_coords

    def __call__(self, h: Tensor, t_e: Tensor, sigma: Tensor, coords: Tensor | None) -> Tensor:
        extra = (coords,) if self.use_coords else ()
        c_t = self.phi_t(h)
        c_g = tn.sigmoid(self.phi_g(t_e, *extra))
        c_b = self.phi_b(sigma, *extra)
        return tn.add(tn.mul(c_t, c_g), c_b)


class LevelScoreNet(Module):
    """Stacked gated layers (LeakyReLU between them) and a final dense layer to a 3-vector."""

    def __init__(self, in_dim: int, cfg, rng=None, dtype=np.float64):
        self.layers = []
        d = in_dim
        for _ in range(cfg.score_layers):
            self.layers.append(GatedLayer(d, cfg.score_width, cfg.time_dim, cfg.use_coords, rng=rng, dtype=dtype))
            d = cfg.score_width
        self.out = Dense(d, 3, rng=rng, dtype=dtype)

    def __call__(self, h_e, t_e, sigma, coords):
        x = h_e
        for i, layer in enumerate(self.layers):
            x = layer(x, t_e, sigma, coords)
            if i < len(self.layers) - 1:
                x = tn.leaky_relu(x)
        return self.out(x)


class ScoreModel(Module):
    """Multi-scale feature extraction, grouping enhancement and one score net per level."""

    def __init__(self, level_dims, cfg, num_levels: int, rng=None, dtype=np.float64):
        self.cfg = cfg
        self.encoders = [LevelEncoder(d, cfg, rng=rng, dtype=dtype) for d in level_dims]
        w = cfg.feature_width
        self.enhancers = [Enhancer(w, cfg.enhance_k, rng=rng, dtype=dtype) for _ in level_dims] if cfg.enhance else []
        self.feature_dim = 2 * w if cfg.enhance else w
        self.time = TimeEmbedding(cfg.time_dim, num_levels, rng=rng, dtype=dtype)
        self.nets = [LevelScoreNet(self.feature_dim, cfg, rng=rng, dtype=dtype) for _ in level_dims]
        self.dtype = dtype

    def features(self, samples: np.ndarray, levels) -> MultiScaleFeatures:
        hs, empties = [], []
        for enc, lv in zip(self.encoders, levels):
            h, empty = enc(samples, lv.points, lv.features)
            hs.append(h)
            empties.append(empty)
        if self.enhancers:
            idx = self.enhancers[0].neighbours(samples)
            h_e = [enh(h, samples, idx) for enh, h in zip(self.enhancers, hs)]
        else:
            h_e = list(hs)
        return MultiScaleFeatures(hs, h_e, empties)

    def predict(self, samples: np.ndarray, feats: MultiScaleFeatures, t: int, sigma: float) -> list:
        """Per-level predictions, each (B, Q, 3)."""
        dt = self.dtype
        t_e = self.time(t)                                   # (1, time_dim)
        sig = Tensor(np.full((1, 1), sigma, dtype=dt))
        coords = Tensor(samples.astype(dt)) if self.cfg.use_coords else None
        return [net(h, t_e, sig, coords) for net, h in zip(self.nets, feats.h_e)]


def mean_prediction(preds) -> Tensor:
    out = preds[0]
    for p in preds[1:]:
        out = tn.add(out, p)
    return tn.mul(out, 1.0 / len(preds))


def ncsn_loss(preds, perturbed: PerturbedSet, g, weight: float = 1.0) -> Tensor:
    """``weight`` times the mean over levels and samples of ``|pred - (g - g_t)|^2``."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim == 2:
        g = g[None]
    target = g[:, perturbed.parent] - perturbed.g_t
    return _mse(preds, target, weight)


def ddpm_loss(preds, z, weight: float = 1.0) -> Tensor:
    return _mse(preds, np.asarray(z), weight)


def _mse(preds, target, weight):
    total = None
    for p in preds:
        p = tn.as_tensor(p)
        diff = tn.sub(p, target.astype(p.dtype).reshape(p.shape))
        term = tn.mean(tn.tsum(tn.square(diff), axis=-1))
        total = term if total is None else tn.add(total, term)
    return tn.mul(total, weight / len(preds))


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------

def gradient_ascent_step(x, delta, gamma: float):
    if gamma <= 0:
        raise ValueError("step size must be positive")
    return np.asarray(x) + gamma * np.asarray(delta)


def langevin_step(x, delta, gamma: float, rng, noise_scale=1.0):
    """``x + gamma/2 * delta + sqrt(gamma) * noise_scale * z``.

    With ``delta`` an exact score and ``noise_scale = 1`` this is the textbook
    Langevin update. For displacement-valued predictions at level ``t`` pass
    ``noise_scale = lam * s * sigma_t`` (per sample, broadcast over xyz).
    """
    if gamma <= 0:
        raise ValueError("step size must be positive")
    x = np.asarray(x, dtype=np.float64)
    noise_scale = np.asarray(noise_scale, dtype=np.float64)
    if noise_scale.ndim and noise_scale.ndim < x.ndim:
        noise_scale = noise_scale[..., None]
    return x + 0.5 * gamma * np.asarray(delta) + np.sqrt(gamma) * noise_scale * rng.standard_normal(x.shape)


SAMPLER_MODES = ("ga", "ld", "ald", "ddpm", "ddim")


@dataclass
class Trajectory:
    positions: list      # (B, Q, 3) before each step, then the final positions
    features: list       # per step, whatever the predictor returned as features
    levels: list         # noise level used at each step

    @property
    def final(self) -> np.ndarray:
        return self.positions[-1]

    def phase(self, which: str = "full") -> list:
        """Step features for a trajectory phase: full, last, first_half or second_half."""
        n = len(self.features)
        half = (n + 1) // 2
        if which == "full":
            return self.features
        if which == "last":
            return self.features[-1:]
        if which == "first_half":
            return self.features[:half]
        if which == "second_half":
            return self.features[half:] or self.features[-1:]
        raise ValueError(f"unknown trajectory phase {which!r}")


def sample_trajectory(mode: str, steps: int, start: np.ndarray, predictor, schedule, rng=None,
                      unit=None, ddpm: DDPMSchedule | None = None) -> Trajectory:
    """Run a sampler from ``start`` for ``steps`` steps.

    ``predictor(x, t)`` returns ``(prediction, features)``; the prediction is
    a displacement for the score-step modes and the unit noise for the DDPM
    modes. ``unit`` is the per-sample length ``lam * s`` (Langevin noise and
    DDPM scaling). Modes:

    * ``ga``  deterministic gradient ascent, levels annealed T -> 1
    * ``ld``  Langevin dynamics at the fixed level T
    * ``ald`` annealed Langevin dynamics, levels T -> 1
    * ``ddpm`` / ``ddim`` ancestral / deterministic reverse diffusion
    """
    if mode not in SAMPLER_MODES:
        raise ValueError(f"unknown sampler {mode!r}")
    x = np.asarray(start, dtype=np.float64)
    unit = np.ones(x.shape[:-1]) if unit is None else np.asarray(unit, dtype=np.float64)
    traj = Trajectory([x], [], [])
    if mode in ("ddpm", "ddim"):
        if ddpm is None:
            raise ValueError("DDPM sampling needs a DDPMSchedule")
        ts = ddpm.levels_for(steps)
        eta = 1.0 if mode == "ddpm" else 0.0
        for i, t in enumerate(ts):
            eps, feats = predictor(x, int(t))
            prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
            x, _ = ddpm_reverse_step(x, eps, ddpm.abar(int(t)), ddpm.abar(prev), unit, eta, rng)
            traj.features.append(feats)
            traj.levels.append(int(t))
            traj.positions.append(x)
        return traj
    levels = np.full(steps, schedule.T) if mode == "ld" else schedule.levels_for(steps)
    for t in levels:
        t = int(t)
        delta, feats = predictor(x, t)
        gamma = schedule.gamma(t)
        if mode == "ga":
            x = gradient_ascent_step(x, delta, gamma)
        else:
            x = langevin_step(x, delta, gamma, rng, unit * schedule.sigma(t))
        traj.features.append(feats)
        traj.levels.append(t)
        traj.positions.append(x)
    return traj


def write_trajectory_csv(path, traj: Trajectory, scene: int = 0):
    """Rows ``step, sample, x, y, z``; step 0 is the starting corruption."""
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "sample", "x", "y", "z"])
        for step, pos in enumerate(traj.positions):
            p = pos[scene] if pos.ndim == 3 else pos
            for i, (x, y, z) in enumerate(p):
                w.writerow([step, i, repr(float(x)), repr(float(y)), repr(float(z))])
