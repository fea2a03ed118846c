"""Training objectives.

- rpc_loss: mean binary cross-entropy between prototype response maps and
  the scale-gated label maps (epsilon fused inside both logs).
- pr_loss_svd: sum |sigma_k - 1| over the prototype matrix spectrum, with
  the analytic gradient U diag(sign(sigma - 1)) V^T; cosine and POP
  pairwise variants are kept as ablation baselines.
- dfl_loss: cross-entropy against the two-bin linear interpolation of the
  target distance; decoded distance is the distribution's expectation.
- cls_loss / iou_reg_loss: the simplified detection terms.
- total_loss: unit-weight sum of all components.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import linalg
from .labels import LabelMapStack
from .proto import ScoreStack


class LossError(ValueError):
    pass


RPC_EPS = 1e-7


def _as_scalar(g):
    return float(np.asarray(g).reshape(()))


def rpc_loss(stack: ScoreStack, labels: LabelMapStack):
    """Region-prototype contrastive loss: mean BCE over C x H x W."""
    if stack.level != labels.level:
        raise LossError("score stack and label stack belong to different levels")
    if tuple(stack.scores.shape) != tuple(labels.maps.shape):
        raise LossError(f"shape mismatch {list(stack.scores.shape)} "
                        f"vs {list(labels.maps.shape)}")
    return ag.reduce_mean(ag.bce(stack.scores, labels.maps, eps=RPC_EPS))


# ---------------------------------------------------------------------------
# prototype regularizers
# ---------------------------------------------------------------------------

def pr_loss_svd(P):
    """Spectral regularizer value on a plain C x D array."""
    P = np.asarray(P, dtype=np.float64)
    f = linalg.svd(P)
    loss = float(np.abs(f.sigma - 1.0).sum())
    # thin SVD carries min(C, D) singular values; a C x D matrix with C > D
    # has C - D implicit zeros, each contributing |0 - 1|
    loss += max(P.shape[0] - P.shape[1], 0)
    return loss


def pr_loss_svd_grad(P):
    """d/dP of pr_loss_svd: U diag(sign(sigma - 1)) V^T, with sign(0) := 0."""
    P = np.asarray(P, dtype=np.float64)
    f = linalg.svd(P)
    m = f.sigma.shape[0]
    return (f.U[:, :m] * np.sign(f.sigma - 1.0)) @ f.V.T


def pr_loss_svd_op(P: ag.Tensor):
    """Tape-attached spectral regularizer for training."""
    val = pr_loss_svd(P.data)
    grad = pr_loss_svd_grad(P.data)
    return ag.custom_op(np.array(val, dtype=P.data.dtype), (P,),
                        lambda g: (_as_scalar(g) * grad,), op="pr_loss_svd")


def _row_normalized(P):
    P = np.asarray(P, dtype=np.float64)
    norms = np.linalg.norm(P, axis=1)
    if np.any(norms <= 1e-12):
        raise LossError("zero prototype row not allowed for pairwise regularizers")
    return P / norms[:, None], norms


def pr_loss_cosine(P):
    """Mean over ordered pairs i != j of |cos(p_i, p_j)|."""
    Pn, _ = _row_normalized(np.asarray(P.data if isinstance(P, ag.Tensor) else P))
    C = Pn.shape[0]
    G = Pn @ Pn.T
    off = ~np.eye(C, dtype=bool)
    return float(np.abs(G[off]).mean())


def pr_loss_pop(P):
    """Mean squared off-diagonal of the row-normalized Gram matrix."""
    Pn, _ = _row_normalized(np.asarray(P.data if isinstance(P, ag.Tensor) else P))
    C = Pn.shape[0]
    G = Pn @ Pn.T
    off = ~np.eye(C, dtype=bool)
    return float((G[off] ** 2).mean())


def _pairwise_grad(P, squared):
    """Gradient of the cosine (squared=False) or POP (squared=True) variant."""
    Pn, norms = _row_normalized(P)
    C = Pn.shape[0]
    G = Pn @ Pn.T
    np.fill_diagonal(G, 0.0)
    npairs = C * (C - 1)
    if squared:
        dG = 4.0 * G / npairs          # d/dG_kj of (1/npairs) sum G_ij^2, symmetric pairs
    else:
        dG = 2.0 * np.sign(G) / npairs
    d_hat = dG @ Pn                    # dL/d p_hat_k = sum_j dG_kj * p_hat_j
    # chain through row normalization: d p_hat / d p = (I - p_hat p_hat^T)/|p|
    proj = (d_hat * Pn).sum(axis=1, keepdims=True)
    return (d_hat - proj * Pn) / norms[:, None]


def pr_loss_cosine_op(P: ag.Tensor):
    val = pr_loss_cosine(P.data)
    grad = _pairwise_grad(np.asarray(P.data, dtype=np.float64), squared=False)
    return ag.custom_op(np.array(val, dtype=P.data.dtype), (P,),
                        lambda g: (_as_scalar(g) * grad,), op="pr_loss_cosine")


def pr_loss_pop_op(P: ag.Tensor):
    val = pr_loss_pop(P.data)
    grad = _pairwise_grad(np.asarray(P.data, dtype=np.float64), squared=True)
    return ag.custom_op(np.array(val, dtype=P.data.dtype), (P,),
                        lambda g: (_as_scalar(g) * grad,), op="pr_loss_pop")


PR_VARIANTS = {
    "svd": pr_loss_svd_op,
    "cosine": pr_loss_cosine_op,
    "pop": pr_loss_pop_op,
}


# ---------------------------------------------------------------------------
# detection terms
# ---------------------------------------------------------------------------

def dfl_loss(dist_logits: ag.Tensor, targets):
    """Distribution focal loss over (..., nbins) logits.

    targets has the logits' leading shape; every target must lie in
    [0, nbins - 1] (the level's range in stride units).
    """
    t = np.asarray(targets, dtype=np.float64)
    nbins = dist_logits.shape[-1]
    if t.shape != tuple(dist_logits.shape[:-1]):
        raise LossError(f"target shape {list(t.shape)} does not match logits "
                        f"{list(dist_logits.shape)}")
    if np.any(t < 0) or np.any(t > nbins - 1):
        raise LossError(f"DFL target outside [0, {nbins - 1}] "
                        "(assignment should guarantee the level's range)")
    lo = np.clip(np.floor(t).astype(int), 0, nbins - 2)
    hi = lo + 1
    w_hi = t - lo
    y = np.zeros(dist_logits.shape, dtype=np.float64)
    idx = tuple(np.indices(t.shape))
    y[idx + (lo,)] = 1.0 - w_hi
    y[idx + (hi,)] += w_hi

    p = _softmax64(dist_logits.data)
    n = max(t.size, 1)
    val = float(-(y * np.log(np.maximum(p, 1e-30))).sum() / n)

    def _bw(g):
        return (_as_scalar(g) * (p - y) / n,)
    return ag.custom_op(np.array(val, dtype=dist_logits.data.dtype),
                        (dist_logits,), _bw, op="dfl")


def _softmax64(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def dfl_decode(dist_logits):
    """Expected distance per side: sum_b b * softmax(logits)_b."""
    p = _softmax64(dist_logits.data if isinstance(dist_logits, ag.Tensor) else dist_logits)
    bins = np.arange(p.shape[-1], dtype=np.float64)
    return (p * bins).sum(axis=-1)


def box_iou(a, b):
    """IoU of two (x1, y1, x2, y2) boxes."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def iou_reg_loss(pred_dists: ag.Tensor, anchors, strides, gt_boxes):
    """Mean (1 - IoU) over positives.

    pred_dists: (N, 4) distances (l, t, r, b) in stride units;
    anchors: (N, 2) cell-center pixel coordinates; strides: (N,);
    gt_boxes: (N, 4) target corners (x1, y1, x2, y2) in pixels.
    """
    d = np.asarray(pred_dists.data, dtype=np.float64)
    if d.ndim != 2 or d.shape[1] != 4:
        raise LossError(f"pred_dists must be (N, 4), got {list(d.shape)}")
    anchors = np.asarray(anchors, dtype=np.float64)
    strides = np.asarray(strides, dtype=np.float64)
    gt = np.asarray(gt_boxes, dtype=np.float64)
    N = d.shape[0]
    if N == 0:
        return ag.custom_op(np.array(0.0, dtype=pred_dists.data.dtype),
                            (pred_dists,), lambda g: (np.zeros_like(d),), op="iou_reg")

    s = strides[:, None]
    px1 = anchors[:, 0] - d[:, 0] * strides
    py1 = anchors[:, 1] - d[:, 1] * strides
    px2 = anchors[:, 0] + d[:, 2] * strides
    py2 = anchors[:, 1] + d[:, 3] * strides

    ix1 = np.maximum(px1, gt[:, 0])
    iy1 = np.maximum(py1, gt[:, 1])
    ix2 = np.minimum(px2, gt[:, 2])
    iy2 = np.minimum(py2, gt[:, 3])
    iw = ix2 - ix1
    ih = iy2 - iy1
    overlap = (iw > 0) & (ih > 0)
    iw_c = np.where(overlap, iw, 0.0)
    ih_c = np.where(overlap, ih, 0.0)
    inter = iw_c * ih_c
    area_p = np.maximum(px2 - px1, 0.0) * np.maximum(py2 - py1, 0.0)
    area_g = (gt[:, 2] - gt[:, 0]) * (gt[:, 3] - gt[:, 1])
    union = area_p + area_g - inter
    iou = np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)
    val = float((1.0 - iou).mean())

    def _bw(g):
        # d(1 - iou)/d corners, then chain corners -> distances
        dd = np.zeros_like(d)
        if not np.any(overlap):
            return (dd,)
        dinter = np.zeros((N, 4))  # w.r.t. (px1, py1, px2, py2)
        dinter[:, 0] = -ih_c * (px1 > gt[:, 0])
        dinter[:, 1] = -iw_c * (py1 > gt[:, 1])
        dinter[:, 2] = ih_c * (px2 < gt[:, 2])
        dinter[:, 3] = iw_c * (py2 < gt[:, 3])
        darea = np.zeros((N, 4))
        pw = np.maximum(px2 - px1, 0.0)
        ph = np.maximum(py2 - py1, 0.0)
        darea[:, 0] = -ph
        darea[:, 1] = -pw
        darea[:, 2] = ph
        darea[:, 3] = pw
        u = np.maximum(union, 1e-12)[:, None]
        diou = (dinter * u - inter[:, None] * (darea - dinter)) / (u * u)
        diou = np.where(overlap[:, None], diou, 0.0)
        # corners -> distances: px1 = ax - l*s, py1 = ay - t*s, px2 = ax + r*s, ...
        dcorners = -diou / N * _as_scalar(g)
        dd[:, 0] = -dcorners[:, 0] * strides
        dd[:, 1] = -dcorners[:, 1] * strides
        dd[:, 2] = dcorners[:, 2] * strides
        dd[:, 3] = dcorners[:, 3] * strides
        return (dd,)
    return ag.custom_op(np.array(val, dtype=pred_dists.data.dtype),
                        (pred_dists,), _bw, op="iou_reg")


def cls_loss(stack: ScoreStack, positives, negative_cells):
    """BCE on assigned positive cells plus sampled negative cells.

    positives: iterable of (class_index 1..C-1, i, j);
    negative_cells: iterable of (i, j) where all foreground planes get 0.
    """
    C, H, W = stack.scores.shape
    target = np.zeros((C, H, W))
    weight = np.zeros((C, H, W))
    for k, i, j in positives:
        if not 1 <= k <= C - 1:
            raise LossError(f"class index {k} outside 1..{C - 1}")
        target[k - 1, i, j] = 1.0
        weight[:C - 1, i, j] = 1.0
    for i, j in negative_cells:
        weight[:C - 1, i, j] = 1.0
    n = weight.sum()
    if n == 0:
        return ag.scale(ag.reduce_sum(ag.mask_mul(stack.scores, weight)), 0.0)
    per_cell = ag.mask_mul(ag.bce(stack.scores, target), weight)
    return ag.scale(ag.reduce_sum(per_cell), 1.0 / n)


# ---------------------------------------------------------------------------
# total objective
# ---------------------------------------------------------------------------

@dataclass
class LossReport:
    total: float
    components: dict = field(default_factory=dict)


LEVEL_COUNT = 3


def total_loss(cls, reg, dfl, rpc_per_level, pr_per_level, weights=None):
    """Unit-weight composition: cls + reg + dfl + sum_l rpc_l + sum_l pr_l.

    Each argument is a scalar Tensor (rpc/pr as length-3 sequences).
    Returns (scalar Tensor, LossReport).
    """
    if len(rpc_per_level) != LEVEL_COUNT or len(pr_per_level) != LEVEL_COUNT:
        raise LossError(f"expected exactly {LEVEL_COUNT} per-level terms")
    w = {"cls": 1.0, "reg": 1.0, "dfl": 1.0, "rpc": 1.0, "pr": 1.0}
    if weights:
        w.update(weights)
    pieces = [("cls", cls, w["cls"]), ("reg", reg, w["reg"]), ("dfl", dfl, w["dfl"])]
    for l, t in enumerate(rpc_per_level, start=1):
        pieces.append((f"rpc_l{l}", t, w["rpc"]))
    for l, t in enumerate(pr_per_level, start=1):
        pieces.append((f"pr_l{l}", t, w["pr"]))
    components = {}
    total = None
    for name, tensor, wt in pieces:
        if tensor is None:
            raise LossError(f"missing loss component {name}")
        term = ag.scale(tensor, wt)
        components[name] = _as_scalar(term.data)
        total = term if total is None else ag.add(total, term)
    return total, LossReport(total=_as_scalar(total.data), components=components)
