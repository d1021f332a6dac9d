# End to end on a miniature problem: generate scenes, train a few epochs,
# sample with gradient ascent, decode boxes and score them.
#
# The configuration is shrunk so this finishes in a few minutes on a laptop;
# the default config (see `votestep train`) is what the acceptance runs use.

import time
from pathlib import Path
import tempfile

import numpy as np

from votestep.config import RunConfig
from votestep.diffusion import write_trajectory_csv
from votestep.pipeline import evaluate_model, generate_dataset, make_batch, train

cfg = RunConfig()
for key, value in {
    "scene.room": "5 5 3", "scene.num_points": 1024, "scene.num_classes": 2, "scene.object_count": "2 4",
    "data.n_train": 80, "data.n_val": 16,
    "backbone.num_input": 1024, "backbone.sa_points": "512 128 32", "backbone.sa_widths": "32 64 64",
    "backbone.fp_width": 64, "proposal.num_proposals": 32, "proposal.feature_width": 32,
    "diffusion.replicates": 8, "diffusion.feature_width": 32, "diffusion.score_width": 32,
    "head.width": 64, "train.epochs": 30, "train.eval_every": 10, "train.lr_milestones": "20 25",
}.items():
    cfg.set(key, str(value))
cfg.validate()

train_scenes, val_scenes = generate_dataset(cfg)
out = Path(tempfile.mkdtemp(prefix="votestep-demo-"))
print(f"{len(train_scenes)} training scenes, {len(val_scenes)} validation scenes, writing to {out}")

t0 = time.perf_counter()
res = train(cfg, train_scenes, val_scenes, out,
            progress=lambda r: print(f"epoch {r['epoch']:2d}  total {r['total']:.3f}  "
                                     f"L_ncsn {r['L_ncsn']:.3f}  val mAP@0.25 {r['val_mAP25']:.3f}"))
print(f"trained in {time.perf_counter() - t0:.0f}s")

# detections on one held-out scene
model = res.model
scene = val_scenes[0]
batch = make_batch([scene], cfg.backbone.num_input)
result = model.infer(batch.points, "ga", 10, np.random.default_rng(0))
print(f"\nscene {scene.seed}: {len(scene.boxes)} objects, {len(result.detections[0])} detections after NMS")
for det in result.detections[0][:5]:
    print(f"  class {det.class_id}  objectness {det.objectness:.2f}  center {np.round(det.box.center, 2)}")

# how the corrupted proposals move during sampling
write_trajectory_csv(out / "trajectory.csv", result.trajectory)
moved = [np.linalg.norm(p - result.proposals[:, np.repeat(np.arange(result.proposals.shape[1]),
                                                                   cfg.diffusion.replicates)], axis=-1).mean()
         for p in result.trajectory.positions]
print("mean distance of samples from their proposal, per step:", np.round(moved, 3))

for steps in (1, 10):
    rep = evaluate_model(model, val_scenes, "ga", steps)
    print(f"GA {steps:2d} steps: mAP@0.25 {rep.mAP(0.25):.3f}  center error {rep.center_error:.3f}")
