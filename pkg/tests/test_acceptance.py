"""Acceptance criteria, one reported PASS/FAIL line each.

The training-based criteria (5 to 8) share two 50-epoch runs on the default
config and one sampler sweep. Set ``VOTESTEP_ACCEPTANCE_DIR`` to keep those
artifacts between sessions; completed runs found there are reused.
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import (
    ball_bruteforce,
    box_iou_montecarlo,
    chamfer_bruteforce,
    fps_bruteforce,
    knn_bruteforce,
    match_exhaustive,
    nms_reference,
)
from test_head import _one_hot_outputs, _param
from votestep import tensornet as tn
from votestep.cli import EXIT_OK, main, read_sampler_csv
from votestep.config import load_config
from votestep.diffusion import NoiseSchedule, corrupt, sample_trajectory
from votestep.evalx import match_detections
from votestep.geometry import (
    OrientedBox,
    ball_query,
    box_iou,
    chamfer_distance,
    farthest_point_sampling,
    k_nearest_neighbors,
    knn_indices,
    wrap_angle,
)
from votestep.head import Detection, nms, read_detections, write_detections
from votestep.pipeline import Detector, evaluate_model, load_checkpoint, read_metrics, save_checkpoint
from votestep.scenegen import read_scene, write_scene

RESULTS: dict[str, str] = {}
RECORD: dict[str, dict] = {}
EPOCHS = 50


def report(key: str, ok: bool, detail: str, **numbers):
    line = f"[{key}] {'PASS' if ok else 'FAIL'}: {detail}"
    RESULTS[key] = line
    RECORD[key] = {"pass": bool(ok), "detail": detail, **numbers}
    print(line)
    assert ok, line


@pytest.fixture(scope="session")
def art_dir(tmp_path_factory):
    env = os.environ.get("VOTESTEP_ACCEPTANCE_DIR")
    path = Path(env) if env else tmp_path_factory.mktemp("acceptance")
    path.mkdir(parents=True, exist_ok=True)
    yield path
    (path / "acceptance.json").write_text(json.dumps(RECORD, indent=2, default=float) + "\n")


@pytest.fixture(scope="session")
def dataset(art_dir):
    d = art_dir / "data"
    if not (d / "splits.txt").exists():
        assert main(["generate", "--out", str(d), "--deterministic"]) == EXIT_OK
    return d


def _complete(run: Path) -> bool:
    return ((run / "last.ckpt").exists() and (run / "manifest.json").exists()
            and len(read_metrics(run / "metrics.csv")) == EPOCHS)


def _train(art_dir, dataset, name, extra=()):
    run = art_dir / name
    if not _complete(run):
        code = main(["train", "--data", str(dataset), "--out", str(run), "--deterministic", *extra])
        assert code == EXIT_OK
    manifest = json.loads((run / "manifest.json").read_text())
    return {"dir": run, "metrics": read_metrics(run / "metrics.csv"), "seconds": manifest["timings"]["train"],
            "cfg": load_config(run / "config.txt")}


@pytest.fixture(scope="session")
def ncsn_run(art_dir, dataset):
    return _train(art_dir, dataset, "ncsn")


@pytest.fixture(scope="session")
def ddpm_run(art_dir, dataset):
    return _train(art_dir, dataset, "ddpm", ["--set", "diffusion.mode=ddpm"])


@pytest.fixture(scope="session")
def sweep(art_dir, dataset, ncsn_run, ddpm_run):
    out = art_dir / "sweep"
    if not (out / "samplers.csv").exists():
        code = main(["compare-samplers", "--checkpoint", str(ncsn_run["dir"] / "last.ckpt"),
                     "--ddpm-checkpoint", str(ddpm_run["dir"] / "last.ckpt"),
                     "--scenes", str(dataset / "val"), "--out", str(out), "--deterministic"])
        assert code == EXIT_OK
    return {(r["sampler"], r["steps"]): r for r in read_sampler_csv(out / "samplers.csv")}


# -- 1 -----------------------------------------------------------------------

def test_c1_gradient_integrity(tmp_path, capsys):
    t0 = time.perf_counter()
    code = main(["gradcheck", "--out", str(tmp_path)])
    elapsed = time.perf_counter() - t0
    lines = [x for x in capsys.readouterr().out.splitlines() if x.startswith(("PASS", "FAIL"))]
    worst = max(float(x.split("error ")[1].split()[0]) for x in lines)
    ok = code == EXIT_OK and len(lines) >= 12 and worst < 1e-4 and elapsed < 60
    report("1 gradient integrity", ok, f"{len(lines)} checks, worst relative error {worst:.2e} (< 1e-4), "
           f"{elapsed:.1f}s (< 60s)", worst=worst, seconds=elapsed)


# -- 2 -----------------------------------------------------------------------

def test_c2_analytic_score_oracle():
    rng = np.random.default_rng(2)
    sd = 0.5
    sch = NoiseSchedule.geometric(0.1, 1.0, 10, gamma0=0.01)
    assert all(math.isclose(sch.gamma(t), sch.sigma(t) ** 2) for t in range(1, sch.T + 1))
    t0 = time.perf_counter()
    monotone, finals = True, []
    for _ in range(100):
        mu = rng.uniform(-3, 3, size=3)
        start = mu + rng.normal(size=(1, 1, 3)) * rng.uniform(0.5, 3.0)

        def score(x, t):
            # exact score of N(mu, sd^2) convolved with the level-t noise
            return (mu - x) / (sd ** 2 + sch.sigma(t) ** 2), None

        traj = sample_trajectory("ga", 20, start, score, sch)
        d = np.array([np.linalg.norm(p[0, 0] - mu) for p in traj.positions])
        monotone &= bool(np.all(np.diff(d) < 0))
        finals.append(d[-1])
    worst = max(finals)
    report("2 analytic score oracle", monotone and worst < 1e-3 * sd,
           f"100 starts, strictly decreasing={monotone}, worst final distance {worst:.2e} "
           f"(< {1e-3 * sd:.0e}), {time.perf_counter() - t0:.2f}s", worst=worst)


# -- 3 -----------------------------------------------------------------------

def test_c3_corruption_statistics():
    rng = np.random.default_rng(3)
    sch = NoiseSchedule.geometric(0.1, 1.0, 10, lam=0.6, replicates=10_000)
    g = np.array([[0.4, -1.2, 0.9]])
    size = np.array([1.2, 0.8, 1.0])
    s = 0.5 * np.linalg.norm(size)
    t = sch.T
    ps = corrupt(g, np.array([s]), sch, t, rng)
    x = ps.g_t[0]
    se = x.std(axis=0, ddof=1) / np.sqrt(len(x))
    z = np.abs(x.mean(axis=0) - g[0]) / se
    inside = float(np.mean(np.all(np.abs(x - g[0]) <= size / 2, axis=1)))
    # oracle: density of the corruption integrated over the box by uniform sampling inside it
    std = 0.6 * s * sch.sigma(t)
    u = np.random.default_rng(33).uniform(-size / 2, size / 2, size=(2_000_000, 3))
    dens = np.exp(-0.5 * np.sum(u ** 2, axis=1) / std ** 2) / (2 * np.pi * std ** 2) ** 1.5
    oracle = float(np.mean(dens) * np.prod(size))
    ok = bool(np.all(z < 3)) and abs(inside - oracle) <= 0.01
    report("3 corruption statistics", ok, f"lambda=0.6, R=1e4: mean offsets {np.round(z, 2).tolist()} SE (< 3); "
           f"inside-box {inside:.4f} vs oracle {oracle:.4f} (+-0.01)", z=z.tolist(), inside=inside, oracle=oracle)


# -- 4 -----------------------------------------------------------------------

def _rand_box(rng, spread=1.0):
    return OrientedBox(tuple(rng.uniform(-spread, spread, 3)), tuple(rng.uniform(0.3, 2.0, 3)),
                       float(rng.uniform(-math.pi, math.pi)))


def test_c4_geometry_oracles():
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    failures = {}

    def check(name, ok):
        failures[name] = failures.get(name, 0) + (not ok)

    for _ in range(100):
        n = int(rng.integers(2, 257))
        pts = rng.uniform(-2, 2, size=(n, 3))
        k = int(rng.integers(1, n + 1))
        check("fps", farthest_point_sampling(pts, k).tolist() == fps_bruteforce(pts.tolist(), k))
        q = rng.uniform(-2, 2, 3)
        kk = int(rng.integers(1, min(n, 32) + 1))
        ref = knn_bruteforce(q.tolist(), pts.tolist(), kk)
        got = k_nearest_neighbors(q, pts, kk)
        vec, _ = knn_indices(q[None, None], pts[None], kk)
        check("knn", [i for i, _ in got] == [i for i, _ in ref] == vec[0, 0].tolist()
              and np.allclose([d for _, d in got], [d for _, d in ref], rtol=1e-12))
        r, cap = float(rng.uniform(0.2, 2.0)), int(rng.integers(1, 64))
        check("ball", ball_query(q, pts, r, cap) == ball_bruteforce(q.tolist(), pts.tolist(), r, cap))
        b = rng.uniform(-2, 2, size=(int(rng.integers(1, 257)), 3))
        check("chamfer", math.isclose(chamfer_distance(pts, b), chamfer_bruteforce(pts.tolist(), b.tolist()),
                                      rel_tol=1e-9))
        dets = [Detection(_rand_box(rng, 1.5), int(rng.integers(0, 2)), float(rng.random()))
                for _ in range(int(rng.integers(1, 40)))]
        check("nms", [id(d) for d in nms(dets, 0.25, 0.05)] == [id(d) for d in nms_reference(dets, box_iou, 0.25, 0.05)])
        gts = [_rand_box(rng, 1.5) for _ in range(int(rng.integers(1, 6)))]
        labels = rng.integers(0, 2, len(gts)).tolist()
        dets.sort(key=lambda d: -d.objectness)
        check("matching", match_detections(dets, gts, labels, 0.25) == match_exhaustive(dets, gts, labels, box_iou, 0.25))
    iou_err = []
    for _ in range(20):
        a = _rand_box(rng, 0.5)
        b = _rand_box(rng, 0.5)
        iou_err.append(abs(box_iou(a, b) - box_iou_montecarlo(a, b, n=10 ** 6, rng=rng)))
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in failures.items() if v}
    ok = not bad and max(iou_err) <= 0.01 and elapsed < 300
    report("4 geometry oracles", ok, f"fps/knn/ball/chamfer/nms/matching mismatches {bad or 'none'} on 100 instances; "
           f"worst IoU deviation {max(iou_err):.4f} (<= 0.01) on 20 pairs; {elapsed:.0f}s (< 300s)",
           iou_worst=max(iou_err), seconds=elapsed)


# -- 5 -----------------------------------------------------------------------

def test_c5_end_to_end_learning(ncsn_run, dataset):
    cfg = ncsn_run["cfg"]
    _, val = zip(*[(f, read_scene(f)) for f in sorted((dataset / "val").glob("*.scene"))])
    untrained = evaluate_model(Detector(cfg), list(val), seed=cfg.infer.seed).mAP(0.25)
    final = ncsn_run["metrics"][-1]["val_mAP25"]
    minutes = ncsn_run["seconds"] / 60
    ok = final >= 0.60 and final >= 10 * untrained and minutes <= 60
    report("5 end-to-end learning", ok, f"val mAP@0.25 after {EPOCHS} epochs {final:.4f} (>= 0.60), untrained "
           f"{untrained:.4f} (needs <= {final / 10:.4f}), training {minutes:.1f} min (<= 60)",
           final=final, untrained=untrained, minutes=minutes)


def test_c5_training_smoke(ncsn_run):
    m = ncsn_run["metrics"]
    ctr = [r["L_ctr"] for r in m[:10]]
    worst_rise = max(b - a for a, b in zip(ctr, ctr[1:]))
    ok = m[5]["total"] < m[0]["total"] and worst_rise <= 0.1 * ctr[0]
    report("5 training smoke", ok, f"total loss epoch 5 {m[5]['total']:.3f} < epoch 0 {m[0]['total']:.3f}; "
           f"largest epoch-to-epoch L_ctr rise in epochs 0-9 {worst_rise:.4f} (<= {0.1 * ctr[0]:.4f})")


# -- 6 -----------------------------------------------------------------------

def test_c6_sampler_ordering(sweep):
    err = {(s, n): sweep[(s, n)]["loc_error"] for s in ("ga", "ld", "ald") for n in (10, 20, 30)}
    order = all(err[("ga", n)] <= err[("ald", n)] <= err[("ld", n)] for n in (10, 20))
    degr = {s: (err[(s, 30)] - err[(s, 10)]) / err[(s, 10)] for s in ("ga", "ld", "ald")}
    smallest = degr["ga"] <= min(degr["ld"], degr["ald"])
    cells = ", ".join(f"{s}@{n}={err[(s, n)]:.4f}" for n in (10, 20) for s in ("ga", "ald", "ld"))
    rel = ", ".join(f"{s} {v:+.3f}" for s, v in degr.items())
    report("6 sampler ordering", order and smallest, f"GA <= ALD <= LD at 10/20 steps: {order} ({cells}); "
           f"relative degradation 10->30: {rel}; GA smallest: {smallest}", errors={f"{s}@{n}": v for (s, n), v in err.items()},
           degradation=degr)


# -- 7 -----------------------------------------------------------------------

def test_c7_iteration_sweet_spot(sweep):
    maps = {n: sweep[("ga", n)]["mAP25"] for n in (1, 2, 5, 10, 20, 30)}
    spread = max(maps.values()) - min(maps.values())
    ok = maps[10] >= maps[1] and spread < 0.05
    report("7 iteration sweet spot", ok, "GA mAP@0.25 by steps " + ", ".join(f"{n}:{v:.4f}" for n, v in maps.items())
           + f"; 10 >= 1: {maps[10] >= maps[1]}; spread {spread:.4f} (< 0.05)", maps=maps, spread=spread)


# -- 8 -----------------------------------------------------------------------

def test_c8_ncsn_beats_ddpm(sweep, ncsn_run, ddpm_run):
    ncsn = sweep[("ga", 10)]["mAP25"]
    ddpm = sweep[("ddpm", 10)]["mAP25"]
    ddim = sweep[("ddim", 10)]["mAP25"]
    best = max(ddpm, ddim)
    assert ncsn == pytest.approx(ncsn_run["metrics"][-1]["val_mAP25"], abs=1e-6)
    report("8 NCSN vs DDPM", ncsn >= best - 0.01, f"10-step val mAP@0.25: NCSN/GA {ncsn:.4f} vs DDPM ancestral "
           f"{ddpm:.4f}, DDIM {ddim:.4f} (NCSN >= best - 0.01; strict: {ncsn > best})",
           ncsn=ncsn, ddpm=ddpm, ddim=ddim, ddpm_training_final=ddpm_run["metrics"][-1]["val_mAP25"])


# -- 9 -----------------------------------------------------------------------

def _micro_config(path):
    from votestep.checks import micro_config
    cfg = micro_config()
    for k, v in {"data.n_train": 6, "data.n_val": 3, "train.epochs": 2, "train.batch_size": 2,
                 "train.eval_every": 1}.items():
        cfg.set(k, str(v))
    path.write_text(cfg.dumps())
    return str(path)


def test_c9_deterministic_reruns(tmp_path):
    cfg = _micro_config(tmp_path / "micro.cfg")
    outputs = {}
    for rep in ("a", "b"):
        root = tmp_path / rep
        common = ["--config", cfg, "--seed", "11", "--deterministic"]
        assert main(["generate", *common, "--out", str(root / "data")]) == EXIT_OK
        assert main(["train", *common, "--data", str(root / "data"), "--out", str(root / "run")]) == EXIT_OK
        ck = str(root / "run" / "last.ckpt")
        assert main(["infer", *common, "--checkpoint", ck, "--scenes", str(root / "data" / "val"),
                     "--out", str(root / "infer")]) == EXIT_OK
        assert main(["eval", *common, "--detections", str(root / "infer" / "detections"),
                     "--scenes", str(root / "data" / "val"), "--out", str(root / "eval")]) == EXIT_OK
        assert main(["compare-samplers", *common, "--checkpoint", ck, "--scenes", str(root / "data" / "val"),
                     "--out", str(root / "sweep")]) == EXIT_OK
        files = [p for p in sorted(root.rglob("*")) if p.is_file() and p.name != "manifest.json"]
        outputs[rep] = {p.relative_to(root): p.read_bytes() for p in files}
    differing = [str(k) for k in outputs["a"] if outputs["a"][k] != outputs["b"].get(k)]
    ok = outputs["a"].keys() == outputs["b"].keys() and not differing
    report("9 reproducibility", ok, f"generate/train/infer/eval/compare-samplers re-run with --deterministic: "
           f"{len(outputs['a'])} files compared, {len(differing)} differ {differing[:3]}")


# -- 10 ----------------------------------------------------------------------

def test_c10_round_trips(tmp_path, dataset, rng):
    scenes_ok = True
    for f in sorted((dataset / "val").glob("*.scene"))[:10]:
        sc = read_scene(f)
        write_scene(sc, tmp_path / "s.scene")
        scenes_ok &= (tmp_path / "s.scene").read_bytes() == f.read_bytes() and read_scene(tmp_path / "s.scene") == sc

    # the format stores float64, which holds float32 parameters exactly
    cfg = load_config(None, {"train.dtype": "float32"})
    model = Detector(cfg, rng)
    save_checkpoint(tmp_path / "m.ckpt", model, tn.Adam(model.parameters()))
    again, state = load_checkpoint(tmp_path / "m.ckpt", cfg)
    tn.write_checkpoint(tmp_path / "m2.ckpt", state)
    ckpt_ok = (tmp_path / "m2.ckpt").read_bytes() == (tmp_path / "m.ckpt").read_bytes() and all(
        again.state_dict()[k].tobytes() == v.tobytes() for k, v in model.state_dict().items())

    dets = [Detection(OrientedBox(tuple(rng.normal(size=3)), tuple(rng.uniform(0.1, 3, 3)),
                                  float(rng.uniform(-math.pi, math.pi))), int(rng.integers(4)), float(rng.random()))
            for _ in range(200)]
    write_detections(dets, tmp_path / "d.det")
    dets_ok = read_detections(tmp_path / "d.det") == dets

    p = _param()
    n = 10_000
    g = rng.uniform(-4, 4, size=(n, 3))
    center = g + rng.normal(0, 0.5, size=(n, 3))
    size = rng.uniform(0.1, 3.0, size=(n, 3))
    heading = rng.uniform(-math.pi, math.pi, n)
    labels = rng.integers(0, 4, n)
    d = p.decode_arrays(*_one_hot_outputs(p, p.encode(g, center, size, heading, labels)), g)
    box_err = max(np.abs(d["center"] - center).max(), np.abs(d["size"] - size).max(),
                  np.abs(wrap_angle(d["heading"] - heading)).max())
    ok = scenes_ok and ckpt_ok and dets_ok and box_err <= 1e-6
    report("10 round trips", ok, f"scene files exact: {scenes_ok}; checkpoint exact: {ckpt_ok}; detection files exact: "
           f"{dets_ok}; box decode(encode) worst error {box_err:.1e} on {n} boxes (<= 1e-6)", box_err=box_err)
