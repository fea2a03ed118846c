"""Synthetic scenes, degradation pipelines, and dataset persistence.

Scenes place colored shapes (disc, square, triangle = classes 1..3) on a
dark noisy background at sizes drawn per scale bucket, so every pyramid
level's valid range is exercised.  Degradations: physically-modeled fog
(transmission decays with a radial pseudo-depth) and gamma + noise
low-light.  Datasets persist as P6 PPM images with JSON-lines annotations
and a manifest.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .imageio import ImageFormatError, read_ppm, write_ppm
from .labels import BoxAnnotation


class DataError(ValueError):
    pass


@dataclass
class Scene:
    image: np.ndarray           # (H, W, 3) in [0, 1]
    boxes: list                 # BoxAnnotation
    seed: int


@dataclass
class FogParams:
    A: float = 0.5      # global atmospheric light
    beta: float = 0.1   # scattering coefficient

    def __post_init__(self):
        if not 0.0 <= self.A <= 1.0 or self.beta < 0.0:
            raise DataError(f"bad fog params A={self.A}, beta={self.beta}")


@dataclass
class SceneSpec:
    image_size: int = 192
    n_objects: (int, int) = (2, 4)
    # size ranges (pixels) per scale bucket; chosen so each pyramid level's
    # valid range is exercised
    size_ranges: dict = field(default_factory=lambda: {
        "small": (12, 20), "medium": (36, 56), "large": (140, 160)})
    bucket_weights: dict = field(default_factory=lambda: {
        "small": 0.4, "medium": 0.4, "large": 0.2})
    background: float = 0.15
    noise: float = 0.02
    class_count: int = 4  # 3 shape classes + background

    def to_dict(self):
        return {"image_size": self.image_size, "n_objects": list(self.n_objects),
                "size_ranges": {k: list(v) for k, v in self.size_ranges.items()},
                "bucket_weights": dict(self.bucket_weights),
                "background": self.background, "noise": self.noise,
                "class_count": self.class_count}


# per-class base colors: disc=red-ish, square=green-ish, triangle=blue-ish
CLASS_COLORS = {1: (0.85, 0.25, 0.2), 2: (0.2, 0.8, 0.3), 3: (0.25, 0.35, 0.9)}
MAX_PLACEMENT_RETRIES = 400


def _draw_shape(img, cls, cx, cy, size, color):
    H, W, _ = img.shape
    yy, xx = np.mgrid[0:H, 0:W]
    half = size / 2.0
    if cls == 1:    # disc
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= half ** 2
    elif cls == 2:  # square
        mask = (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    else:           # upward triangle inscribed in the box
        fy = (yy - (cy - half)) / size          # 0 at top vertex row, 1 at base
        mask = (np.abs(xx - cx) <= half * np.clip(fy, 0, 1)) & (fy >= 0) & (fy <= 1)
    img[mask] = color
    return mask


def synth_scene(seed, spec: SceneSpec) -> Scene:
    """Deterministic scene under (seed, spec); annotations are exact."""
    if spec.class_count - 1 > len(CLASS_COLORS):
        raise DataError(f"at most {len(CLASS_COLORS)} foreground classes supported")
    rng = np.random.default_rng(seed)
    H = W = spec.image_size
    img = np.full((H, W, 3), spec.background, dtype=np.float64)
    img += rng.normal(0.0, spec.noise, size=img.shape)

    n = int(rng.integers(spec.n_objects[0], spec.n_objects[1] + 1))
    buckets = list(spec.size_ranges)
    weights = np.array([spec.bucket_weights[b] for b in buckets], dtype=np.float64)
    weights /= weights.sum()

    boxes, occupied = [], []
    for _ in range(n):
        placed = False
        for _ in range(MAX_PLACEMENT_RETRIES):
            bucket = buckets[int(rng.choice(len(buckets), p=weights))]
            lo, hi = spec.size_ranges[bucket]
            size = float(rng.uniform(lo, hi))
            if size >= spec.image_size:
                continue
            half = size / 2.0
            cx = float(rng.uniform(half, W - half))
            cy = float(rng.uniform(half, H - half))
            rect = (cx - half, cy - half, cx + half, cy + half)
            if any(_rects_overlap(rect, r) for r in occupied):
                continue
            cls = int(rng.integers(1, spec.class_count))
            color = np.clip(np.array(CLASS_COLORS[cls]) + rng.normal(0, 0.05, 3), 0, 1)
            _draw_shape(img, cls, cx, cy, size, color)
            boxes.append(BoxAnnotation(cls, cx, cy, size, size))
            occupied.append(rect)
            placed = True
            break
        if not placed:
            raise DataError(
                f"placement infeasible after {MAX_PLACEMENT_RETRIES} retries "
                f"(non-overlap constraint, image_size={spec.image_size})")
    return Scene(image=np.clip(img, 0.0, 1.0), boxes=boxes, seed=seed)


def _rects_overlap(a, b):
    return not (a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1])


# ---------------------------------------------------------------------------
# degradations
# ---------------------------------------------------------------------------

def fog_depth_map(rows, cols):
    """Pseudo-depth d = -0.04 * rho + sqrt(max(rows, cols)), where rho is the
    Euclidean pixel distance to the image center."""
    yy, xx = np.mgrid[0:rows, 0:cols].astype(np.float64)
    rho = np.sqrt((yy - rows / 2.0) ** 2 + (xx - cols / 2.0) ** 2)
    return -0.04 * rho + np.sqrt(max(rows, cols))


def apply_fog(image, params: FogParams):
    """I = J * t + A * (1 - t) with transmission t = clamp(exp(-beta*d), 0, 1)."""
    J = np.asarray(image, dtype=np.float64)
    d = fog_depth_map(J.shape[0], J.shape[1])
    t = np.clip(np.exp(-params.beta * d), 0.0, 1.0)
    if J.ndim == 3:
        t = t[:, :, None]
    return J * t + params.A * (1.0 - t)


def apply_lowlight(image, gamma, noise_sigma, seed):
    """I' = clamp(I^gamma + gaussian(0, sigma), 0, 1), deterministic per seed."""
    if gamma < 1.0 or noise_sigma < 0.0:
        raise DataError(f"bad low-light params gamma={gamma}, sigma={noise_sigma}")
    J = np.asarray(image, dtype=np.float64)
    rng = np.random.default_rng(seed)
    out = np.power(J, gamma) + rng.normal(0.0, noise_sigma, size=J.shape)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def write_dataset(root, scenes, split="train", degradation=None):
    """Write scenes as PPM + JSON-lines annotations; returns the manifest."""
    os.makedirs(os.path.join(root, split), exist_ok=True)
    images = []
    ann_path = os.path.join(root, split, "annotations.jsonl")
    with open(ann_path, "w") as ann:
        for idx, scene in enumerate(scenes):
            name = f"{split}_{idx:04d}.ppm"
            write_ppm(os.path.join(root, split, name), scene.image)
            images.append(name)
            for b in scene.boxes:
                ann.write(json.dumps({"image": name, "class": b.class_index,
                                      "cx": b.cx, "cy": b.cy,
                                      "w": b.w, "h": b.h}) + "\n")
    manifest_path = os.path.join(root, "manifest.json")
    manifest = {"splits": {}}
    if os.path.exists(manifest_path):
        with open(manifest_path) as f:
            manifest = json.load(f)
    manifest["splits"][split] = {"images": images, "degradation": degradation}
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def read_dataset(root, split="train"):
    """Read a split back as a list of Scenes (seed recorded as -1)."""
    manifest_path = os.path.join(root, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DataError(f"missing manifest at {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if split not in manifest.get("splits", {}):
        raise DataError(f"split {split!r} not in manifest "
                        f"(have {sorted(manifest.get('splits', {}))})")
    ann_path = os.path.join(root, split, "annotations.jsonl")
    boxes_by_image = {}
    if os.path.exists(ann_path):
        with open(ann_path) as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    box = BoxAnnotation(int(rec["class"]), float(rec["cx"]),
                                        float(rec["cy"]), float(rec["w"]),
                                        float(rec["h"]))
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise DataError(f"{ann_path}:{lineno}: malformed record ({exc})")
                boxes_by_image.setdefault(rec["image"], []).append(box)
    scenes = []
    for name in manifest["splits"][split]["images"]:
        try:
            image = read_ppm(os.path.join(root, split, name))
        except ImageFormatError:
            raise
        scenes.append(Scene(image=image, boxes=boxes_by_image.get(name, []), seed=-1))
    return scenes


def manifest_digest(root):
    """SHA-256 over the manifest plus every annotation file, for golden checks."""
    h = hashlib.sha256()
    with open(os.path.join(root, "manifest.json"), "rb") as f:
        h.update(f.read())
    with open(os.path.join(root, "manifest.json")) as f:
        manifest = json.load(f)
    for split in sorted(manifest["splits"]):
        ann = os.path.join(root, split, "annotations.jsonl")
        if os.path.exists(ann):
            with open(ann, "rb") as f:
                h.update(f.read())
        for name in manifest["splits"][split]["images"]:
            with open(os.path.join(root, split, name), "rb") as f:
                h.update(f.read())
    return h.hexdigest()
