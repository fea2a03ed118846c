"""
Tiny end-to-end training run with saliency export
=================================================

Trains the toy detector for a handful of epochs on a small synthetic
dataset, evaluates it, and exports per-level prototype response maps
plus the combined saliency map for one class as PGM images.

This is the library-level twin of:

    protodet synth --out data --seed 5
    protodet train --dataset data --out run
    protodet eval  --checkpoint run/checkpoint --dataset data
    protodet visualize --checkpoint run/checkpoint --dataset data \
        --index 0 --class 1 --out run/viz

Expect a few minutes of CPU time.
"""

import sys
import time
from pathlib import Path

from protodet import data, detector, proto

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "run"
out.mkdir(parents=True, exist_ok=True)

spec = data.SceneSpec()
train_scenes = [data.synth_scene(1000 + i, spec) for i in range(16)]
test_scenes = [data.synth_scene(5000 + i, spec) for i in range(8)]

cfg = detector.TrainConfig(seed=5, epochs=30)
t0 = time.time()
params, reports = detector.train(cfg, train_scenes, out_dir=str(out))
print(f"trained {reports[-1][0]} steps in {time.time() - t0:.0f}s; "
      f"loss {reports[0][1].total:.3f} -> {reports[-1][1].total:.3f}")

report = detector.evaluate(params, test_scenes, cfg)
print(f"mAP@0.5 {report.map50:.3f}  disc {report.disc:.3f}  "
      f"spar {report.spar:.3f}  auc_ft {report.auc_ft:.3f}")

# response maps for class 1 on the first test scene
outputs, _, _ = detector.forward(params, test_scenes[0].image, cfg)
stacks = [out.stack for out in outputs]
for out_lvl in outputs:
    plane = out_lvl.stack.scores.data[0]   # class-1 plane at this level
    proto.write_pgm(out / f"response_l{out_lvl.level.index}.pgm", plane)
sal = proto.aggregate_saliency(stacks, class_index=0,
                               input_size=(cfg.image_size, cfg.image_size))
proto.export_saliency_pgm(out / "saliency_c1.pgm", sal)
print(f"wrote response maps to {out}/")
