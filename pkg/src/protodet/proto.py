"""Prototype matching against feature grids and cross-level saliency.

A level's classification predictor is a 1x1 convolution whose kernel rows
act as class prototypes; the matching score of class k at cell (i, j) is
sigmoid(p_k . f_ij + b_k).  Per-level score planes are resized to the input
resolution and averaged with equal weight to form the combined saliency map
used by all interpretability metrics.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .imageio import write_pgm


class ProtoError(ValueError):
    pass


@dataclass(frozen=True)
class LevelSpec:
    index: int          # 1-based
    stride: int         # pixels per cell
    tau: float          # scale coefficient; valid box range is [0, tau*stride]
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.stride <= 0 or self.tau <= 0 or self.grid_h <= 0 or self.grid_w <= 0:
            raise ProtoError(f"bad level spec: {self}")


def make_levels(image_h, image_w, strides=(8, 16, 32), taus=None):
    """Build LevelSpecs for an image; default taus are (4, 8, H/s_last)."""
    if image_h % strides[-1] or image_w % strides[-1]:
        raise ProtoError(f"image size {image_h}x{image_w} not divisible by "
                         f"the coarsest stride {strides[-1]}")
    if taus is None:
        taus = (4.0, 8.0, image_h / strides[-1])
    levels = []
    for idx, (s, t) in enumerate(zip(strides, taus), start=1):
        levels.append(LevelSpec(index=idx, stride=s, tau=float(t),
                                grid_h=image_h // s, grid_w=image_w // s))
    for a, b in zip(levels, levels[1:]):
        if b.stride <= a.stride or b.tau * b.stride < a.tau * a.stride:
            raise ProtoError("strides/valid ranges must be non-decreasing across levels")
    return levels


@dataclass
class FeatureGrid:
    level: LevelSpec
    values: ag.Tensor   # (H_l, W_l, D)

    @property
    def channels(self):
        return self.values.shape[2]


@dataclass
class PrototypeSet:
    level: LevelSpec
    prototypes: ag.Tensor  # (C, D); last row is the background class
    biases: ag.Tensor      # (C,)

    def __post_init__(self):
        if self.prototypes.data.ndim != 2 or self.prototypes.shape[0] < 2:
            raise ProtoError("prototype matrix must be C x D with C >= 2")
        if self.biases.shape != (self.prototypes.shape[0],):
            raise ProtoError("bias length must equal class count")

    @property
    def class_count(self):
        return self.prototypes.shape[0]


@dataclass
class ScoreStack:
    level: LevelSpec
    scores: ag.Tensor   # (C, H_l, W_l), entries in (0, 1)


@dataclass
class SaliencyMap:
    class_index: int
    values: np.ndarray  # (H, W) at input resolution


def response_map(protos: PrototypeSet, grid: FeatureGrid) -> ScoreStack:
    """scores[k,i,j] = sigmoid(p_k . f_ij + b_k); differentiable through the tape."""
    if protos.level != grid.level:
        raise ProtoError("prototype set and feature grid belong to different levels")
    D = protos.prototypes.shape[1]
    if grid.channels != D:
        raise ProtoError(f"channel mismatch: grid D={grid.channels}, prototypes D={D}")
    H, W = grid.level.grid_h, grid.level.grid_w
    flat = ag.reshape(grid.values, (H * W, D))
    logits = ag.bias_add(ag.matmul(flat, ag.transpose(protos.prototypes)), protos.biases)
    scores = ag.sigmoid(logits)                     # (H*W, C)
    chw = ag.transpose(scores)                      # (C, H*W)
    return ScoreStack(level=grid.level, scores=ag.reshape(chw, (protos.class_count, H, W)))


def resize_map(values, target_size, mode="bilinear"):
    """Resize a plain (H, W) array; align-corners-false bilinear by default."""
    values = np.asarray(values, dtype=np.float64)
    Ho, Wo = target_size
    if Ho < 1 or Wo < 1:
        raise ProtoError(f"bad target size {target_size}")
    if mode == "nearest":
        H, W = values.shape
        iy = np.minimum((np.arange(Ho) + 0.5) * H // Ho, H - 1).astype(int)
        ix = np.minimum((np.arange(Wo) + 0.5) * W // Wo, W - 1).astype(int)
        return values[iy][:, ix]
    if mode != "bilinear":
        raise ProtoError(f"unknown resize mode {mode!r}")
    return ag.resize_bilinear(ag.Tensor(values, dtype=np.float64), target_size).data


def aggregate_saliency(stacks, class_index, input_size, mode="bilinear") -> SaliencyMap:
    """Equal-weight average of the class plane across levels, each resized
    to the input resolution.  Levels are processed in index order."""
    if not stacks:
        raise ProtoError("no score stacks given")
    stacks = sorted(stacks, key=lambda st: st.level.index)
    indices = [st.level.index for st in stacks]
    if indices != list(range(indices[0], indices[0] + len(stacks))):
        raise ProtoError(f"missing level in stacks: got indices {indices}")
    acc = np.zeros(tuple(input_size), dtype=np.float64)
    for st in stacks:
        plane = st.scores.data[class_index]
        if plane.shape[0] > input_size[0] or plane.shape[1] > input_size[1]:
            raise ProtoError("input size smaller than a grid size")
        acc += resize_map(plane, input_size, mode=mode)
    return SaliencyMap(class_index=class_index, values=acc / len(stacks))


def export_saliency_pgm(path, saliency: SaliencyMap):
    write_pgm(path, saliency.values)
