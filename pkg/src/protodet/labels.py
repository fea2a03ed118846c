"""Scale-gated pseudo label maps for region-prototype supervision.

Each pyramid level only accepts boxes whose width AND height fall inside
its valid range [0, tau_l * s_l]; accepted boxes mark every cell whose
center lies inside the box rectangle.  The background plane is the
complement of the foreground maximum, cell-exactly.
"""

from dataclasses import dataclass

import numpy as np

from .imageio import write_pgm
from .proto import LevelSpec


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class BoxAnnotation:
    class_index: int  # foreground, 1..C-1
    cx: float
    cy: float
    w: float
    h: float

    @property
    def x1(self):
        return self.cx - self.w / 2.0

    @property
    def y1(self):
        return self.cy - self.h / 2.0

    @property
    def x2(self):
        return self.cx + self.w / 2.0

    @property
    def y2(self):
        return self.cy + self.h / 2.0


def clip_box(box: BoxAnnotation, image_h, image_w) -> BoxAnnotation | None:
    """Clip a box to image bounds; range tests use the clipped extent."""
    x1 = max(box.x1, 0.0)
    y1 = max(box.y1, 0.0)
    x2 = min(box.x2, float(image_w))
    y2 = min(box.y2, float(image_h))
    if x2 <= x1 or y2 <= y1:
        return None
    return BoxAnnotation(box.class_index, (x1 + x2) / 2.0, (y1 + y2) / 2.0,
                         x2 - x1, y2 - y1)


@dataclass
class LabelMapStack:
    level: LevelSpec
    maps: np.ndarray  # (C, H_l, W_l) in {0, 1}; plane C-1 is background


def valid_range(level: LevelSpec):
    """Closed interval [0, tau_l * s_l] in pixels."""
    return (0.0, level.tau * level.stride)


def box_in_range(box: BoxAnnotation, level: LevelSpec) -> bool:
    lo, hi = valid_range(level)
    return lo <= box.w <= hi and lo <= box.h <= hi


def generate_label_maps(boxes, level: LevelSpec, class_count,
                        scale_filter=True) -> LabelMapStack:
    """Rasterize admitted boxes into per-class binary maps.

    A cell (i, j) is positive for class k when its center
    ((j+0.5)s, (i+0.5)s) lies inside (inclusive) an admitted class-k box.
    With scale_filter=False every box participates regardless of size
    (the no-scale-gating ablation).
    """
    if class_count < 2:
        raise LabelError("class_count must be >= 2 (foreground + background)")
    H, W, s = level.grid_h, level.grid_w, level.stride
    maps = np.zeros((class_count, H, W), dtype=np.uint8)
    cx = (np.arange(W) + 0.5) * s
    cy = (np.arange(H) + 0.5) * s
    for box in boxes:
        if not 1 <= box.class_index <= class_count - 1:
            raise LabelError(f"class index {box.class_index} outside 1..{class_count - 1}")
        if scale_filter and not box_in_range(box, level):
            continue
        in_x = (cx >= box.x1) & (cx <= box.x2)
        in_y = (cy >= box.y1) & (cy <= box.y2)
        maps[box.class_index - 1][np.ix_(in_y, in_x)] = 1
    maps[class_count - 1] = 1 - maps[:class_count - 1].max(axis=0, initial=0)
    return LabelMapStack(level=level, maps=maps)


def rasterize_oracle(box: BoxAnnotation, level: LevelSpec):
    """Independent per-cell containment loop; test oracle for the rasterizer."""
    cells = set()
    s = level.stride
    for i in range(level.grid_h):
        for j in range(level.grid_w):
            px, py = (j + 0.5) * s, (i + 0.5) * s
            if box.x1 <= px <= box.x2 and box.y1 <= py <= box.y2:
                cells.add((i, j))
    return cells


def export_label_maps_pgm(prefix, stack: LabelMapStack):
    """One PGM per class plane, for visual debugging."""
    paths = []
    for k in range(stack.maps.shape[0]):
        path = f"{prefix}_class{k + 1}.pgm"
        write_pgm(path, stack.maps[k].astype(np.float64))
        paths.append(path)
    return paths
