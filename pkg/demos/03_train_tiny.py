"""A complete tiny training run, readable in one sitting.

Trains the full pipeline for a few hundred steps on two small scenes and
then runs inference on a third. Loss components, the learning-rate ladder,
checkpointing and the log format are all the same machinery the CLI uses;
only the sizes are shrunk so this finishes in well under a minute.
"""
import json
import tempfile
import time
from pathlib import Path

import numpy as np

from voteseg import metrics as mt
from voteseg import scene as sc
from voteseg import training as tr
from voteseg.model import ModelConfig, Network

gen = dict(room_extent=(4.0, 4.0, 3.0), objects_per_scene=(2, 4),
           points_per_m2=80.0)
train_scenes = [sc.generate_scene(sc.SceneGenParams(seed=s, **gen)) for s in (1, 2)]
val_scene = sc.generate_scene(sc.SceneGenParams(seed=3, **gen))

net = Network.create(ModelConfig(gcn_layers=0), seed=0)
config = tr.TrainConfig(steps=300, batch_size=2, lr_halving=150, log_every=30,
                        max_points=512, train_proposals=16, max_group=24, seed=0)

out = Path(tempfile.mkdtemp()) / "tiny"
t0 = time.time()
records = tr.train(net, train_scenes, [val_scene], config, out)
print(f"trained {config.steps} steps in {time.time() - t0:.1f}s -> {out}")

# ---------------------------------------------------------------------------
# The log is newline-delimited JSON; loss components sum to the total
# with the semantic term down-weighted by 0.1.

steps = [r for r in records if "total" in r]
print("\n step     lr   point    obj    sem   mask    agg  total")
for r in steps[:: max(1, len(steps) // 6)]:
    print(f"{r['step']:5d} {r['lr']:6.3f} {r['point']:7.3f} {r['objectness']:6.3f} "
          f"{r['semantic']:6.3f} {r['mask']:6.3f} {r['aggregation']:6.3f} "
          f"{r['total']:6.3f}")

first, last = steps[0], steps[-1]
print(f"\ntotal {first['total']:.3f} -> {last['total']:.3f}; "
      f"lr halved {int(np.log2(first['lr'] / last['lr']))} times")

# ---------------------------------------------------------------------------
# Checkpoints: a rolling `latest.ckpt` per epoch plus `final.ckpt`

reloaded, meta = Network.load(out / "final.ckpt")
print(f"final checkpoint: step {meta['step']}, "
      f"{sum(p.data.size for p in reloaded.parameters())} parameters")

# ---------------------------------------------------------------------------
# Inference on the held-out scene, scored against its ground truth

objects = tr.infer(reloaded, val_scene, mode="geometric", seed=0)
print(f"\nval scene: {len(objects)} predicted objects, "
      f"{val_scene.instance_centers()[0].size} ground truth")

preds = []
for o in objects:
    box = mt.fit_box(val_scene.positions[o.mask])
    preds.append(mt.DetectionRecord(val_scene.scene_id, o.semantic_class,
                                    o.confidence, o.mask, box))
table = mt.evaluate(preds, mt.gt_objects(val_scene))
print(f"mask mAP@50 {table.mean['ap50']:.3f}  mAP@25 {table.mean['ap25']:.3f}  "
      f"mAR@50 {table.mean['rc50']:.3f}")
