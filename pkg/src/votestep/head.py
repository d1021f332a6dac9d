"""Box head on denoised proposals: aggregation, box parameterisation, losses, NMS and detection files."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensornet as tn
from .backbone import gather_points
from .geometry import OrientedBox, box_iou, corners_from_params, knn_indices, wrap_angle
from .scenegen import _fmt
from .tensornet import Dense, MLP, Module, Tensor, TrainableAggregation, TrainingError


# ---------------------------------------------------------------------------
# box parameterisation
# ---------------------------------------------------------------------------

SIZE_RES_LIMIT = 5.0  # decoded sizes stay within exp(+-5) of the class mean


class BoxParameterization:
    """Heading bins, size clusters and class count, plus the channel layout of the head outputs.

    ``o_c`` = [objectness (neg, pos) | class logits];
    ``o_r`` = [center offset (3) | heading logits (N_H) | heading residuals (N_H)
    | size logits (N_S) | size residuals (N_S x 3)].
    Heading bin ``i`` is centered at ``-pi + i * 2 pi / N_H`` and residuals are
    in units of half a bin. Size residuals are log ratios to the cluster mean.
    """

    def __init__(self, num_heading_bins: int, mean_sizes, num_classes: int):
        mean_sizes = np.asarray(mean_sizes, dtype=np.float64).reshape(-1, 3)
        if num_heading_bins < 1 or len(mean_sizes) < 1 or num_classes < 1:
            raise ValueError("need at least one heading bin, size cluster and class")
        if np.any(mean_sizes <= 0):
            raise ValueError("mean sizes must be positive")
        self.num_heading_bins = num_heading_bins
        self.mean_sizes = mean_sizes
        self.num_classes = num_classes

    @property
    def num_size_clusters(self) -> int:
        return len(self.mean_sizes)

    @property
    def reg_width(self) -> int:
        return 3 + 2 * self.num_heading_bins + 4 * self.num_size_clusters

    @property
    def cls_width(self) -> int:
        return 2 + self.num_classes

    @property
    def half_bin(self) -> float:
        return math.pi / self.num_heading_bins

    def bin_centers(self) -> np.ndarray:
        return -math.pi + np.arange(self.num_heading_bins) * 2 * math.pi / self.num_heading_bins

    def slices(self) -> dict:
        nh, ns = self.num_heading_bins, self.num_size_clusters
        s = {"offset": slice(0, 3)}
        s["heading_logits"] = slice(3, 3 + nh)
        s["heading_res"] = slice(3 + nh, 3 + 2 * nh)
        s["size_logits"] = slice(3 + 2 * nh, 3 + 2 * nh + ns)
        s["size_res"] = slice(3 + 2 * nh + ns, 3 + 2 * nh + 4 * ns)
        return s

    def size_cluster(self, size, class_id) -> np.ndarray:
        """One cluster per class when the counts agree, otherwise the nearest mean in log space."""
        class_id = np.asarray(class_id)
        if self.num_size_clusters == self.num_classes:
            return class_id.astype(np.int64)
        ls = np.log(np.asarray(size, dtype=np.float64))[..., None, :]
        return np.argmin(np.sum((ls - np.log(self.mean_sizes)) ** 2, axis=-1), axis=-1)

    def encode(self, g, center, size, heading, class_id) -> dict:
        """Regression targets for proposals at ``g`` assigned to the given boxes (arrays broadcast per proposal)."""
        g = np.asarray(g, dtype=np.float64)
        heading = wrap_angle(np.asarray(heading, dtype=np.float64))
        nh = self.num_heading_bins
        bins = np.rint((heading + math.pi) / (2 * math.pi / nh)).astype(np.int64) % nh
        res = wrap_angle(heading - self.bin_centers()[bins]) / self.half_bin
        cluster = self.size_cluster(size, class_id)
        return {
            "offset": np.asarray(center, dtype=np.float64) - g,
            "heading_bin": bins,
            "heading_res": res,
            "size_cluster": cluster,
            "size_res": np.log(np.asarray(size, dtype=np.float64) / self.mean_sizes[cluster]),
            "class_id": np.asarray(class_id, dtype=np.int64),
        }

    def decode_arrays(self, o_c: np.ndarray, o_r: np.ndarray, g: np.ndarray) -> dict:
        """Vectorised decode of raw head outputs (..., widths) at proposals ``g`` (..., 3)."""
        o_c = np.asarray(o_c, dtype=np.float64)
        o_r = np.asarray(o_r, dtype=np.float64)
        if o_c.shape[-1] != self.cls_width or o_r.shape[-1] != self.reg_width:
            raise tn.ShapeError(f"head widths {o_c.shape[-1]}, {o_r.shape[-1]} != {self.cls_width}, {self.reg_width}")
        s = self.slices()
        hb = np.argmax(o_r[..., s["heading_logits"]], axis=-1)
        hr = np.take_along_axis(o_r[..., s["heading_res"]], hb[..., None], axis=-1)[..., 0]
        heading = wrap_angle(self.bin_centers()[hb] + hr * self.half_bin)
        sc = np.argmax(o_r[..., s["size_logits"]], axis=-1)
        sres = o_r[..., s["size_res"]].reshape(o_r.shape[:-1] + (self.num_size_clusters, 3))
        sr = np.take_along_axis(sres, sc[..., None, None], axis=-2)[..., 0, :]
        # an untrained head can emit huge residuals; keep the box finite and non-degenerate
        size = self.mean_sizes[sc] * np.exp(np.clip(sr, -SIZE_RES_LIMIT, SIZE_RES_LIMIT))
        obj = _softmax(o_c[..., :2])[..., 1]
        cls_p = _softmax(o_c[..., 2:])
        cls = np.argmax(cls_p, axis=-1)
        return {
            "center": np.asarray(g, dtype=np.float64) + o_r[..., s["offset"]],
            "size": size,
            "heading": heading,
            "class_id": cls,
            "objectness": obj,
            "class_score": np.take_along_axis(cls_p, cls[..., None], axis=-1)[..., 0],
        }

    def decode(self, o_c, o_r, g) -> list[Detection]:
        d = self.decode_arrays(o_c, o_r, g)
        flat = {k: np.asarray(v).reshape((-1,) + np.shape(v)[np.ndim(d["objectness"]):]) for k, v in d.items()}
        out = []
        for i in range(len(flat["objectness"])):
            box = OrientedBox(tuple(flat["center"][i]), tuple(flat["size"][i]), float(flat["heading"][i]))
            out.append(Detection(box, int(flat["class_id"][i]), float(flat["objectness"][i]),
                                 float(flat["class_score"][i])))
        return out

    def targets_to_box(self, t: dict, g) -> OrientedBox:
        """Exact inverse of :meth:`encode` for a single proposal."""
        heading = wrap_angle(self.bin_centers()[t["heading_bin"]] + t["heading_res"] * self.half_bin)
        size = self.mean_sizes[t["size_cluster"]] * np.exp(t["size_res"])
        return OrientedBox(tuple(np.asarray(g) + t["offset"]), tuple(size), float(heading))

    def state(self) -> dict:
        return {"head.mean_sizes": self.mean_sizes}


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# detections
# ---------------------------------------------------------------------------

@dataclass
class Detection:
    box: OrientedBox
    class_id: int
    objectness: float
    class_score: float = field(default=1.0, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.objectness <= 1.0 or not 0.0 <= self.class_score <= 1.0:
            raise ValueError("scores must lie in [0, 1]")


def nms(dets, iou_threshold: float = 0.25, objectness_floor: float = 0.05, iou_mode: str = "oriented"):
    """Greedy per-class suppression by descending objectness (stable for ties)."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("IoU threshold must lie in (0, 1)")
    order = sorted((d for d in dets if d.objectness >= objectness_floor), key=lambda d: -d.objectness)
    kept: list[Detection] = []
    for d in order:
        c = np.asarray(d.box.center)
        r = d.box.half_diagonal
        suppressed = False
        for k in kept:
            if k.class_id != d.class_id:
                continue
            # boxes whose bounding spheres are apart cannot overlap
            if np.linalg.norm(c - np.asarray(k.box.center)) >= r + k.box.half_diagonal:
                continue
            if box_iou(d.box, k.box, iou_mode) > iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(d)
    return kept


class DetectionFormatError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def format_detections(dets) -> str:
    lines = [f"detections v1 {len(dets)}"]
    for d in dets:
        b = d.box
        vals = " ".join(_fmt(v) for v in (*b.center, *b.size, b.heading))
        lines.append(f"d {vals} {int(d.class_id)} {_fmt(d.objectness)}")
    return "\n".join(lines) + "\n"


def parse_detections(text: str) -> list[Detection]:
    lines = [ln for ln in text.splitlines()]
    if not lines:
        raise DetectionFormatError("empty file", 1)
    head = lines[0].split()
    if len(head) != 3 or head[:2] != ["detections", "v1"]:
        raise DetectionFormatError("expected header 'detections v1 N'", 1)
    try:
        n = int(head[2])
    except ValueError:
        raise DetectionFormatError("count must be an integer", 1) from None
    if len(lines) < n + 1:
        raise DetectionFormatError(f"truncated file: expected {n + 1} lines", len(lines) + 1)
    out = []
    for i in range(n):
        tok = lines[i + 1].split()
        lineno = i + 2
        if len(tok) != 10 or tok[0] != "d":
            raise DetectionFormatError("expected 'd cx cy cz dx dy dz heading class objectness'", lineno)
        try:
            v = [float(t) for t in tok[1:8]]
            cls = int(tok[8])
            obj = float(tok[9])
            out.append(Detection(OrientedBox(tuple(v[:3]), tuple(v[3:6]), v[6]), cls, obj))
        except ValueError as exc:
            raise DetectionFormatError(str(exc), lineno) from None
    if any(ln.strip() for ln in lines[n + 1:]):
        raise DetectionFormatError("unexpected trailing content", n + 2)
    return out


def write_detections(dets, path):
    with open(path, "w", encoding="ascii") as fh:
        fh.write(format_detections(dets))


def read_detections(path) -> list[Detection]:
    with open(path, encoding="ascii") as fh:
        return parse_detections(fh.read())


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

@dataclass
class HeadOutput:
    o_c: Tensor          # (B, M, 2 + N_C)
    o_r: Tensor          # (B, M, 3 + 2 N_H + 4 N_S)
    neighbours: np.ndarray  # (B, M, k) indices into the denoised samples


class ProposalHead(Module):
    """Aggregate denoised samples around each clean proposal, then classify and regress.

    Per denoised sample the per-level features share one dense layer and are
    max-pooled over levels. For each proposal the ``k`` nearest denoised
    samples contribute that vector plus their offset to the proposal; an MLP
    and a trainable aggregation reduce them to one vector, which is joined
    with the proposal feature and fed to the two output MLPs.
    """

    def __init__(self, sample_dim: int, proposal_dim: int, param: BoxParameterization, cfg, rng=None,
                 dtype=np.float64):
        w = cfg.width
        self.param = param
        self.k = cfg.k
        self.level = Dense(sample_dim, w, "leaky_relu", rng=rng, dtype=dtype)
        self.member = Dense(w + 3, w, "leaky_relu", rng=rng, dtype=dtype)
        n_agg = 2 if cfg.independent_aggregation else 1
        self.agg = [TrainableAggregation(w, w, rng=rng, dtype=dtype) for _ in range(n_agg)]
        self.cls = MLP(w + proposal_dim, [w, param.cls_width], rng=rng, dtype=dtype, last_activation="none")
        self.reg = MLP(w + proposal_dim, [w, param.reg_width], rng=rng, dtype=dtype, last_activation="none")
        self.dtype = dtype

    def sample_features(self, level_feats) -> Tensor:
        """Shared dense layer per level, max over levels: (B, Q, w)."""
        per = [self.level(tn.as_tensor(h)) for h in level_feats]
        if len(per) == 1:
            return per[0]
        B, Q, w = per[0].shape
        stacked = tn.concat([tn.reshape(p, (B, Q, 1, w)) for p in per], axis=2)
        return tn.aggregate(stacked, "max", axis=2)

    def __call__(self, g: np.ndarray, proposal_feats: Tensor, samples: np.ndarray, level_feats) -> HeadOutput:
        k = self.k
        if k > samples.shape[1]:
            raise tn.ShapeError(f"head k={k} exceeds {samples.shape[1]} denoised samples")
        idx, _ = knn_indices(g, samples, k)
        v = self.sample_features(level_feats)
        off = gather_points(samples, idx) - g[:, :, None, :]
        members = self.member(tn.concat([tn.batch_gather(v, idx), Tensor(off.astype(self.dtype))], axis=-1))
        pooled = [a(members, axis=2) for a in self.agg]
        c_in = tn.concat([pooled[0], proposal_feats], axis=-1)
        r_in = tn.concat([pooled[-1], proposal_feats], axis=-1)
        return HeadOutput(self.cls(c_in), self.reg(r_in), idx)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def corner_loss(pred: OrientedBox, gt: OrientedBox, flip: bool = True) -> float:
    """Sum of Euclidean distances between corresponding corners; min over the heading flip."""
    pc = corners_from_params(pred.center, pred.size, pred.heading)
    d = np.linalg.norm(pc - corners_from_params(gt.center, gt.size, gt.heading), axis=-1).sum()
    if flip:
        d2 = np.linalg.norm(pc - corners_from_params(gt.center, gt.size, gt.heading + math.pi), axis=-1).sum()
        d = min(d, d2)
    return float(d)


_SIGNS = np.array([[-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
                   [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1]], dtype=np.float64)


def corners_tensor(center: Tensor, size: Tensor, heading: Tensor) -> Tensor:
    """Differentiable corners: (P, 3), (P, 3), (P,) -> (P, 8, 3)."""
    P = center.shape[0]
    dt = center.dtype
    local = tn.mul(tn.reshape(size, (P, 1, 3)), (0.5 * _SIGNS).astype(dt))
    lx, ly, lz = local[..., 0], local[..., 1], local[..., 2]
    c = tn.reshape(tn.cos(heading), (P, 1))
    s = tn.reshape(tn.sin(heading), (P, 1))
    x = tn.sub(tn.mul(c, lx), tn.mul(s, ly))
    y = tn.add(tn.mul(s, lx), tn.mul(c, ly))
    xyz = tn.concat([tn.reshape(a, (P, 8, 1)) for a in (x, y, lz)], axis=-1)
    return tn.add(xyz, tn.reshape(center, (P, 1, 3)))


def corner_loss_tensor(center: Tensor, size: Tensor, heading: Tensor, gt_center, gt_size, gt_heading,
                       flip: bool = True) -> Tensor:
    """Mean over boxes of :func:`corner_loss`."""
    pc = corners_tensor(center, size, heading)
    dt = pc.dtype
    P = center.shape[0]

    def dist(h):
        gc = corners_from_params(gt_center, gt_size, h).astype(dt)
        return tn.tsum(tn.norm(tn.sub(pc, gc), axis=-1), axis=-1)

    d = dist(gt_heading)
    if flip:
        d2 = dist(np.asarray(gt_heading) + math.pi)
        both = tn.concat([tn.reshape(d, (P, 1)), tn.reshape(d2, (P, 1))], axis=1)
        d = -tn.tmax(-both, axis=1)
    return tn.mean(d)


@dataclass
class Assignment:
    """Per-proposal (flattened over the batch) targets."""
    pos: np.ndarray        # bool
    neg: np.ndarray        # bool
    matched: np.ndarray    # bool, within the scale-supervision radius
    targets: dict          # encode() output per proposal
    gt_center: np.ndarray
    gt_size: np.ndarray
    gt_heading: np.ndarray


def assign_targets(g: np.ndarray, scenes_gt, param: BoxParameterization, pos_radius: float,
                   neg_radius: float, match_radius: float) -> Assignment:
    """Nearest-center assignment. ``scenes_gt`` holds (centers, sizes, headings, labels) per scene."""
    B, M, _ = g.shape
    n = B * M
    gc, gs, gh, gl = np.zeros((n, 3)), np.ones((n, 3)), np.zeros(n), np.zeros(n, dtype=np.int64)
    dist = np.full(n, np.inf)
    for b, (centers, sizes, headings, labels) in enumerate(scenes_gt):
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        if len(centers) == 0:
            continue
        d2 = np.sum((g[b][:, None, :] - centers[None]) ** 2, axis=-1)
        j = np.argmin(d2, axis=1)
        sl = slice(b * M, (b + 1) * M)
        dist[sl] = np.sqrt(d2[np.arange(M), j])
        gc[sl], gs[sl] = centers[j], np.asarray(sizes, dtype=np.float64).reshape(-1, 3)[j]
        gh[sl], gl[sl] = np.asarray(headings)[j], np.asarray(labels)[j]
    targets = param.encode(g.reshape(n, 3), gc, gs, gh, gl)
    return Assignment(dist < pos_radius, dist > neg_radius, dist <= match_radius, targets, gc, gs, gh)


def _select(x: Tensor, rows: np.ndarray) -> Tensor:
    flat = tn.reshape(x, (-1, x.shape[-1]))
    return tn.gather_rows(flat, rows)


def _zero(dt) -> Tensor:
    return Tensor(np.zeros((), dtype=dt))


def head_losses(out: HeadOutput, s_tilde: Tensor | None, assign: Assignment, param: BoxParameterization,
                flip: bool = True) -> dict:
    """Box, corner, objectness and class terms (dictionary of scalar tensors)."""
    dt = out.o_r.dtype
    sl = param.slices()
    pos = np.flatnonzero(assign.pos)
    labelled = np.flatnonzero(assign.pos | assign.neg)
    terms = {}
    if len(labelled):
        obj_logits = _select(out.o_c, labelled)[:, 0:2]
        terms["obj"] = tn.mul(tn.cross_entropy(obj_logits, assign.pos[labelled].astype(np.int64)), 1.0 / len(labelled))
    else:
        terms["obj"] = _zero(dt)
    box = _zero(dt)
    if len(pos):
        t = {k: v[pos] for k, v in assign.targets.items()}
        r = _select(out.o_r, pos)
        c = _select(out.o_c, pos)
        inv = 1.0 / len(pos)
        nh, ns = param.num_heading_bins, param.num_size_clusters
        terms["cls"] = tn.mul(tn.cross_entropy(c[:, 2:], t["class_id"]), inv)
        off = r[:, sl["offset"]]
        center_l = tn.tsum(tn.huber(tn.sub(off, t["offset"].astype(dt))))
        hres_all = r[:, sl["heading_res"]]
        hres = tn.tsum(tn.mul(hres_all, np.eye(nh, dtype=dt)[t["heading_bin"]]), axis=-1)
        head_l = tn.add(tn.cross_entropy(r[:, sl["heading_logits"]], t["heading_bin"]),
                        tn.tsum(tn.huber(tn.sub(hres, t["heading_res"].astype(dt)))))
        sres_all = tn.reshape(r[:, sl["size_res"]], (len(pos), ns, 3))
        onehot = np.eye(ns, dtype=dt)[t["size_cluster"]][..., None]
        sres = tn.tsum(tn.mul(sres_all, onehot), axis=1)
        size_l = tn.add(tn.cross_entropy(r[:, sl["size_logits"]], t["size_cluster"]),
                        tn.tsum(tn.huber(tn.sub(sres, t["size_res"].astype(dt)))))
        box = tn.mul(tn.add(tn.add(center_l, head_l), size_l), inv)
        # corners from predicted residuals on the ground-truth bin and cluster
        g_flat = assign.gt_center[pos] - t["offset"]
        center = tn.add(off, g_flat.astype(dt))
        heading = tn.add(tn.mul(hres, dt.type(param.half_bin)), param.bin_centers()[t["heading_bin"]].astype(dt))
        size = tn.mul(tn.exp(sres), param.mean_sizes[t["size_cluster"]].astype(dt))
        terms["corner"] = corner_loss_tensor(center, size, heading, assign.gt_center[pos],
                                             assign.gt_size[pos], assign.gt_heading[pos], flip)
    else:
        terms["cls"] = _zero(dt)
        terms["corner"] = _zero(dt)
    matched = np.flatnonzero(assign.matched)
    if s_tilde is not None and len(matched):
        ls = tn.log(_select(s_tilde, matched))
        scale_l = tn.mul(tn.tsum(tn.huber(tn.sub(ls, np.log(assign.gt_size[matched]).astype(dt)))), 1.0 / len(matched))
        box = tn.add(box, scale_l)
    terms["box"] = box
    return terms


LOSS_TERMS = ("ctr", "ncsn", "box", "corner", "obj", "cls")


def total_loss(terms: dict, weights: dict):
    """Weighted sum of the loss terms and a float breakdown (unweighted values plus ``total``)."""
    total = None
    breakdown = {}
    for name in LOSS_TERMS:
        term = tn.as_tensor(terms[name]) if name in terms else None
        if term is None:
            breakdown[name] = 0.0
            continue
        value = float(term.data)
        if not math.isfinite(value):
            raise TrainingError(f"loss term L_{name} is not finite ({value})", name=name)
        breakdown[name] = value
        w = float(weights.get(name, 0.0))
        scaled = tn.mul(term, w)
        total = scaled if total is None else tn.add(total, scaled)
    if total is None:
        total = Tensor(np.zeros(()))
    breakdown["total"] = float(total.data)
    return total, breakdown


def weights_from_config(loss_cfg) -> dict:
    return {name: getattr(loss_cfg, f"w_{name}") for name in LOSS_TERMS}
