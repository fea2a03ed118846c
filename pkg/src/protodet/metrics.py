"""Interpretability metrics and a toy mAP@0.5 evaluator.

Each headline quantity ships with an independent brute-force oracle:
auc_ft has an O(n^2) pairwise counter, discriminability and sparsity have
closed-form hand cases, and mAP is simple enough to check by construction.
"""

from dataclasses import dataclass, field

import numpy as np


class MetricError(ValueError):
    pass


DISC_EPS = 1e-7

# toy-scale area buckets (pixels^2): small < 24^2, medium < 64^2, large otherwise
SIZE_BUCKETS = {"small": (0.0, 24.0 ** 2), "medium": (24.0 ** 2, 64.0 ** 2),
                "large": (64.0 ** 2, float("inf"))}


@dataclass
class MetricReport:
    disc: float
    auc_ft: float
    spar: float
    map50: float
    map_small: float = 0.0
    map_medium: float = 0.0
    map_large: float = 0.0
    n_pairs: int = 0
    per_class: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "disc": self.disc, "auc_ft": self.auc_ft, "spar": self.spar,
            "map50": self.map50, "map_small": self.map_small,
            "map_medium": self.map_medium, "map_large": self.map_large,
            "n_pairs": self.n_pairs, "per_class": self.per_class,
        }


def discriminability(saliency, mask):
    """Fraction of saliency mass inside the ground-truth mask:
    sum(S * M) / (sum(S) + eps)."""
    S = np.asarray(saliency, dtype=np.float64)
    M = np.asarray(mask, dtype=np.float64)
    if S.shape != M.shape:
        raise MetricError(f"size mismatch {list(S.shape)} vs {list(M.shape)}")
    return float((S * M).sum() / (S.sum() + DISC_EPS))


def auc_ft(saliency, mask):
    """Probability a random foreground pixel outscores a random background
    pixel, ties at 0.5 (Mann-Whitney via average ranks).

    Returns None (skipped) when the mask is all-foreground or all-background.
    """
    S = np.asarray(saliency, dtype=np.float64).ravel()
    M = np.asarray(mask).ravel().astype(bool)
    if S.shape != M.shape:
        raise MetricError("size mismatch between saliency and mask")
    n_pos = int(M.sum())
    n_neg = M.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _average_ranks(S)
    rank_sum = ranks[M].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _average_ranks(values):
    """1-based ranks with ties averaged."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc_pairwise_oracle(saliency, mask):
    """O(n^2) pairwise counter; use on small maps only."""
    S = np.asarray(saliency, dtype=np.float64).ravel()
    M = np.asarray(mask).ravel().astype(bool)
    pos = S[M]
    neg = S[~M]
    if pos.size == 0 or neg.size == 0:
        return None
    wins = 0.0
    for p in pos:
        wins += (p > neg).sum() + 0.5 * (p == neg).sum()
    return float(wins / (pos.size * neg.size))


def sparsity(prototype_matrices):
    """1 - mean over levels of the mean absolute pairwise row cosine."""
    if not prototype_matrices:
        raise MetricError("no prototype matrices given")
    acc = 0.0
    for P in prototype_matrices:
        P = np.asarray(P, dtype=np.float64)
        norms = np.linalg.norm(P, axis=1)
        if np.any(norms <= 1e-12):
            raise MetricError("zero-norm prototype row")
        Pn = P / norms[:, None]
        G = Pn @ Pn.T
        off = ~np.eye(P.shape[0], dtype=bool)
        acc += np.abs(G[off]).mean()
    return float(1.0 - acc / len(prototype_matrices))


def box_mask(boxes, class_index, image_h, image_w):
    """Binary union mask of all class-k boxes at input resolution."""
    M = np.zeros((image_h, image_w), dtype=np.uint8)
    for b in boxes:
        if b.class_index != class_index:
            continue
        x1 = int(np.clip(np.floor(b.x1), 0, image_w))
        y1 = int(np.clip(np.floor(b.y1), 0, image_h))
        x2 = int(np.clip(np.ceil(b.x2), 0, image_w))
        y2 = int(np.clip(np.ceil(b.y2), 0, image_h))
        M[y1:y2, x1:x2] = 1
    return M


# ---------------------------------------------------------------------------
# mAP@0.5
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Detection:
    image_id: int
    class_index: int
    score: float
    box: tuple  # (x1, y1, x2, y2)


def _iou_xyxy(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua


def _ap_101(recalls, precisions):
    """101-point interpolated average precision."""
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recalls >= r
        ap += precisions[mask].max() if mask.any() else 0.0
    return ap / 101.0


def average_precision(detections, gt_boxes, iou_thresh=0.5):
    """Greedy-matched AP for one class; gt_boxes: list of (image_id, box)."""
    n_gt = len(gt_boxes)
    if n_gt == 0:
        return None
    dets = sorted(detections, key=lambda d: -d.score)
    matched = set()
    tp = np.zeros(len(dets))
    fp = np.zeros(len(dets))
    for di, d in enumerate(dets):
        best_iou, best = 0.0, None
        for gi, (img, box) in enumerate(gt_boxes):
            if img != d.image_id or gi in matched:
                continue
            iou = _iou_xyxy(d.box, box)
            if iou > best_iou:
                best_iou, best = iou, gi
        if best is not None and best_iou >= iou_thresh:
            matched.add(best)
            tp[di] = 1
        else:
            fp[di] = 1
    if len(dets) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(fp)
    recalls = ctp / n_gt
    precisions = ctp / np.maximum(ctp + cfp, 1e-12)
    return _ap_101(recalls, precisions)


def _bucket_of(box):
    area = (box[2] - box[0]) * (box[3] - box[1])
    for name, (lo, hi) in SIZE_BUCKETS.items():
        if lo <= area < hi:
            return name
    return "large"


def map50(detections, ground_truth, iou_thresh=0.5, bucket=None):
    """Mean AP@0.5 over classes with ground truth.

    detections: list of Detection; ground_truth: list of
    (image_id, class_index, (x1, y1, x2, y2)).
    With a bucket name, only GT in that size bucket count; detections that
    best-match out-of-bucket GT are ignored rather than penalized.
    """
    classes = sorted({g[1] for g in ground_truth})
    if not classes:
        return 0.0, {}
    per_class = {}
    for k in classes:
        gt_all = [(g[0], g[2]) for g in ground_truth if g[1] == k]
        if bucket is None:
            gt_k = gt_all
            dets_k = [d for d in detections if d.class_index == k]
        else:
            gt_k = [g for g in gt_all if _bucket_of(g[1]) == bucket]
            if not gt_k:
                continue
            dets_k = []
            for d in detections:
                if d.class_index != k:
                    continue
                # ignore detections whose best GT match lies outside the bucket
                ious = [(_iou_xyxy(d.box, box), (img, box)) for img, box in gt_all
                        if img == d.image_id]
                best = max(ious, default=(0.0, None))
                if best[0] >= iou_thresh and _bucket_of(best[1][1]) != bucket:
                    continue
                dets_k.append(d)
        ap = average_precision(dets_k, gt_k, iou_thresh)
        if ap is not None:
            per_class[k] = ap
    if not per_class:
        return 0.0, {}
    return float(np.mean(list(per_class.values()))), per_class
