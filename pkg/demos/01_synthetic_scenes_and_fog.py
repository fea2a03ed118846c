"""
Synthetic scenes and atmospheric degradation
============================================

Generates a few procedural detection scenes (colored discs / squares /
triangles on a noisy background), then degrades one of them with the
scattering fog model and with low-light gamma+gain, and writes PPM
previews you can open with any image viewer.

Run from the repo root:  python3 demos/01_synthetic_scenes_and_fog.py out/
"""

import sys
from pathlib import Path

import numpy as np

from protodet import data

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "scenes"
out.mkdir(parents=True, exist_ok=True)

spec = data.SceneSpec()
print(f"image size {spec.image_size}, classes {spec.class_count} (incl. background)")

for seed in range(4):
    scene = data.synth_scene(seed, spec)
    sizes = [f"{b.w:.0f}x{b.h:.0f}(c{b.class_index})" for b in scene.boxes]
    print(f"seed {seed}: {len(scene.boxes)} objects -> {', '.join(sizes)}")
    data.write_ppm(out / f"scene_{seed}.ppm", scene.image)

# fog: I = J*t + A*(1-t), with transmission t = exp(-beta * depth)
scene = data.synth_scene(0, spec)
for beta in (0.05, 0.1, 0.2):
    fog = data.FogParams(A=0.5, beta=beta)
    foggy = data.apply_fog(scene.image, fog)
    data.write_ppm(out / f"fog_beta{beta}.ppm", foggy)
    print(f"beta={beta}: mean pixel {scene.image.mean():.3f} -> {foggy.mean():.3f}")

dark = data.apply_lowlight(scene.image, gamma=2.5, noise_sigma=0.02, seed=0)
data.write_ppm(out / "lowlight.ppm", dark)
print(f"low-light: mean pixel {scene.image.mean():.3f} -> {dark.mean():.3f}")
print(f"wrote previews to {out}/")
