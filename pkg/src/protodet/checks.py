"""Self-check suites: finite-difference gradient checks and brute-force
oracles, shared by the CLI and the acceptance tests."""

import numpy as np

from . import autograd as ag
from . import losses
from .labels import BoxAnnotation, generate_label_maps, rasterize_oracle
from .metrics import auc_ft, auc_pairwise_oracle
from .proto import LevelSpec, ScoreStack
from .labels import LabelMapStack


def _random_labels(rng, C, H, W, level):
    maps = (rng.random((C, H, W)) < 0.3).astype(np.uint8)
    maps[C - 1] = 1 - maps[:C - 1].max(axis=0, initial=0)
    return LabelMapStack(level=level, maps=maps)


def rpc_grad_error(seed, C=2, H=4, W=4, D=6):
    """FD error of RPC-Loss w.r.t. the raw score logits."""
    rng = np.random.default_rng(seed)
    level = LevelSpec(index=1, stride=8, tau=4, grid_h=H, grid_w=W)
    labels = _random_labels(rng, C, H, W, level)
    logits = rng.normal(0, 1.5, size=(C, H, W))

    def fn(x):
        stack = ScoreStack(level=level, scores=ag.sigmoid(x))
        return losses.rpc_loss(stack, labels)
    return ag.finite_diff_check(fn, logits)


def pr_grad_error(seed, C=4, D=8):
    """FD error of the spectral regularizer, away from the |sigma-1| kink."""
    rng = np.random.default_rng(seed)
    while True:
        P = rng.normal(0, 1.0, size=(C, D))
        from .linalg import svd
        if np.all(np.abs(svd(P).sigma - 1.0) > 1e-3):
            break
    return ag.finite_diff_check(losses.pr_loss_svd_op, P)


def pairwise_pr_grad_error(seed, variant, C=4, D=8):
    rng = np.random.default_rng(seed)
    P = rng.normal(0, 1.0, size=(C, D))
    return ag.finite_diff_check(losses.PR_VARIANTS[variant], P)


def dfl_grad_error(seed, n=3, nbins=7):
    rng = np.random.default_rng(seed)
    logits = rng.normal(0, 1.0, size=(n, 4, nbins))
    targets = rng.uniform(0.05, nbins - 1.05, size=(n, 4))
    return ag.finite_diff_check(lambda x: losses.dfl_loss(x, targets), logits)


def total_grad_error(seed, C=3, D=6, H=4, W=4, nbins=5):
    """FD error of the composed objective w.r.t. a packed parameter vector
    holding the feature grid, the prototype matrix, and the DFL logits."""
    rng = np.random.default_rng(seed)
    level = LevelSpec(index=1, stride=8, tau=nbins - 1, grid_h=H, grid_w=W)
    labels = _random_labels(rng, C, H, W, level)
    targets = rng.uniform(0.2, nbins - 1.2, size=(2, 4))
    anchors = np.array([[12.0, 12.0], [20.0, 20.0]])
    strides = np.array([8.0, 8.0])
    gts = np.array([[4.0, 4.0, 22.0, 20.0], [10.0, 12.0, 30.0, 28.0]])
    cls_target = (rng.random((C, H, W)) < 0.2).astype(np.float64)
    cls_weight = (rng.random((C, H, W)) < 0.5).astype(np.float64)
    cls_weight[C - 1] = 0

    n_feat = H * W * D
    n_proto = C * D
    n_dfl = 2 * 4 * nbins
    x0 = rng.normal(0, 0.8, size=n_feat + n_proto + n_dfl)

    def fn(x):
        feat = ag.reshape(_slice(x, 0, n_feat), (H * W, D))
        P = ag.reshape(_slice(x, n_feat, n_proto), (C, D))
        dfl_logits = ag.reshape(_slice(x, n_feat + n_proto, n_dfl), (2, 4, nbins))
        zero_bias = ag.Tensor(np.zeros(C), tape=x.tape, dtype=np.float64)
        logits = ag.bias_add(ag.matmul(feat, ag.transpose(P)), zero_bias)
        scores = ag.reshape(ag.transpose(ag.sigmoid(logits)), (C, H, W))
        stack = ScoreStack(level=level, scores=scores)

        rpc = losses.rpc_loss(stack, labels)
        pr = losses.pr_loss_svd_op(P)
        dfl = losses.dfl_loss(dfl_logits, targets)
        pred = _expected(dfl_logits)
        reg = losses.iou_reg_loss(pred, anchors, strides, gts)
        cls = ag.reduce_mean(ag.mask_mul(ag.bce(scores, cls_target), cls_weight))
        zero = ag.Tensor(np.float64(0.0), tape=x.tape, dtype=np.float64)
        total, _ = losses.total_loss(cls, reg, dfl, [rpc, zero, zero],
                                     [pr, zero, zero])
        return total
    return ag.finite_diff_check(fn, x0)


def _slice(x, start, count):
    sl = x.data.ravel()[start:start + count].copy()

    def _bw(g):
        full = np.zeros(x.data.size, dtype=g.dtype)
        full[start:start + count] = g.ravel()
        return (full.reshape(x.data.shape),)
    return ag.custom_op(sl, (x,), _bw, op="slice")


def _expected(logits):
    p = ag.softmax_last(logits)
    bins = np.arange(logits.shape[-1], dtype=np.float64)

    def _bw(g):
        return (g[:, :, None] * bins,)
    return ag.custom_op((p.data * bins).sum(axis=-1), (p,), _bw, op="expect")


def run_grad_suite(seeds=range(20), tol=1e-4):
    """Returns {check name: worst FD error}; all must be below tol."""
    results = {}
    for name, fn in [("rpc", rpc_grad_error), ("pr_svd", pr_grad_error),
                     ("dfl", dfl_grad_error), ("total", total_grad_error)]:
        results[name] = max(fn(seed) for seed in seeds)
    results["pr_cosine"] = max(pairwise_pr_grad_error(s, "cosine") for s in seeds)
    results["pr_pop"] = max(pairwise_pr_grad_error(s, "pop") for s in seeds)
    return results, tol


def run_rasterize_oracle(trials=1000, seed=0):
    """Exact set equality between the vectorized rasterizer and the
    per-cell loop on random (box, level) cases.  Returns mismatch count."""
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(trials):
        stride = int(rng.choice([8, 16, 32]))
        tau = float(rng.choice([4, 8, 16]))
        gh, gw = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        level = LevelSpec(index=1, stride=stride, tau=tau, grid_h=gh, grid_w=gw)
        img_w, img_h = gw * stride, gh * stride
        w = float(rng.uniform(0.5, img_w))
        h = float(rng.uniform(0.5, img_h))
        cx = float(rng.uniform(0, img_w))
        cy = float(rng.uniform(0, img_h))
        box = BoxAnnotation(1, cx, cy, w, h)
        stack = generate_label_maps([box], level, 2, scale_filter=False)
        got = {(i, j) for i, j in zip(*np.nonzero(stack.maps[0]))}
        want = rasterize_oracle(box, level)
        if got != want:
            mismatches += 1
    return mismatches


def run_auc_oracle(trials=200, seed=0, max_side=16):
    """Max |sorted AUC - pairwise AUC| over random small maps."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        h, w = int(rng.integers(2, max_side + 1)), int(rng.integers(2, max_side + 1))
        sal = np.round(rng.random((h, w)), 2)  # rounding forces ties
        mask = rng.random((h, w)) < 0.4
        if mask.all() or not mask.any():
            mask.flat[0] = not mask.flat[0]
        a = auc_ft(sal, mask)
        b = auc_pairwise_oracle(sal, mask)
        worst = max(worst, abs(a - b))
    return worst
