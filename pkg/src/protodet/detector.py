"""Toy trainable detector: small backbone + 3-level pyramid with decoupled
heads whose classification predictor is the prototype layer.

The backbone is five stride-2 3x3 convolutions; a two-step top-down pathway
with nearest 2x upsampling merges the last three stages into pyramid levels
at strides 8/16/32.  Each level's head runs two 3x3 convolutions per branch;
the classification predictor is a per-level prototype matrix shared between
the detection scores and the region-prototype supervision.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import losses
from .labels import BoxAnnotation, clip_box, generate_label_maps
from .metrics import (MetricReport, Detection, auc_ft, box_mask,
                      discriminability, map50, sparsity)
from .proto import (FeatureGrid, LevelSpec, PrototypeSet, ScoreStack,
                    aggregate_saliency, make_levels, response_map)


class DetectorError(ValueError):
    pass


STRIDES = (8, 16, 32)
FEATURE_DIM = 32
STEM_DIM = 16


@dataclass
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 0.01
    momentum: float = 0.937
    weight_decay: float = 0.0005
    batch_size: int = 8
    seed: int = 5
    image_size: int = 192
    class_count: int = 4
    taus: tuple = None            # default (4, 8, H/s3)
    use_rpc: bool = True
    use_pr: bool = True
    use_splgs: bool = True
    pr_variant: str = "svd"       # svd | cosine | pop
    neg_ratio: int = 5            # sampled negatives per positive cell
    rpc_stop_backbone: bool = False
    score_thresh: float = 0.3
    nms_iou: float = 0.5
    loss_weights: dict = None

    def resolved_taus(self):
        if self.taus is not None:
            return tuple(self.taus)
        return (4.0, 8.0, self.image_size / STRIDES[-1])

    def to_dict(self):
        d = dict(self.__dict__)
        d["taus"] = list(self.resolved_taus())
        return d

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if known.get("taus") is not None:
            known["taus"] = tuple(known["taus"])
        unknown = set(d) - set(known)
        if unknown:
            raise DetectorError(f"unknown config keys: {sorted(unknown)}")
        return cls(**known)


def levels_for(config: TrainConfig):
    return make_levels(config.image_size, config.image_size,
                       strides=STRIDES, taus=config.resolved_taus())


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _he(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def init_params(config: TrainConfig, rng=None):
    """He-initialized parameter dict keyed by name."""
    rng = rng or np.random.default_rng(config.seed)
    C, D = config.class_count, FEATURE_DIM
    p = {}

    def conv3(name, cin, cout):
        p[f"{name}.w"] = _he(rng, (cout, 3, 3, cin), 9 * cin)
        p[f"{name}.b"] = np.zeros(cout, dtype=np.float32)

    def conv1(name, cin, cout):
        p[f"{name}.w"] = _he(rng, (cout, cin), cin)
        p[f"{name}.b"] = np.zeros(cout, dtype=np.float32)

    conv3("backbone.c1", 3, STEM_DIM)
    conv3("backbone.c2", STEM_DIM, D)
    conv3("backbone.c3", D, D)
    conv3("backbone.c4", D, D)
    conv3("backbone.c5", D, D)
    conv1("neck.l3", D, D)
    conv1("neck.l4", D, D)
    conv1("neck.l5", D, D)
    taus = config.resolved_taus()
    for l in (1, 2, 3):
        for branch in ("cls", "reg"):
            conv3(f"head{l}.{branch}1", D, D)
            conv3(f"head{l}.{branch}2", D, D)
        p[f"head{l}.proto"] = _he(rng, (C, D), D)
        p[f"head{l}.proto_bias"] = np.zeros(C, dtype=np.float32)
        nbins = int(round(taus[l - 1])) + 1
        conv1(f"head{l}.dfl", D, 4 * nbins)
    return {name: ag.Tensor(arr, requires_grad=True) for name, arr in p.items()}


def _attach(params, tape):
    """Fresh leaf tensors on the given tape, sharing the parameter arrays."""
    out = {}
    for name, t in params.items():
        leaf = ag.Tensor(t.data, tape=tape, requires_grad=True)
        out[name] = leaf
    return out


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

@dataclass
class LevelOutput:
    level: LevelSpec
    cls_grid: FeatureGrid
    stack: ScoreStack
    reg_logits: ag.Tensor     # (H, W, 4, nbins)
    protos: PrototypeSet


def forward(params, image, config: TrainConfig, tape=None):
    """Run the detector on an (H, W, 3) image in [0, 1].

    Returns (per-level LevelOutput list, attached leaf dict, tape).
    """
    image = np.asarray(image)
    H = config.image_size
    if image.shape != (H, H, 3):
        raise DetectorError(f"expected {H}x{H}x3 image, got {list(image.shape)}")
    if H % STRIDES[-1]:
        raise DetectorError(f"image side {H} not divisible by {STRIDES[-1]}")
    tape = tape or ag.Tape()
    w = _attach(params, tape)
    levels = levels_for(config)

    x = ag.Tensor(image.astype(np.float32), tape=tape)
    def stage(name, t):
        return ag.relu(ag.conv3x3(t, w[f"{name}.w"], w[f"{name}.b"], stride=2))
    b1 = stage("backbone.c1", x)
    b2 = stage("backbone.c2", b1)
    b3 = stage("backbone.c3", b2)   # stride 8
    b4 = stage("backbone.c4", b3)   # stride 16
    b5 = stage("backbone.c5", b4)   # stride 32

    t5 = ag.conv1x1(b5, w["neck.l5.w"], w["neck.l5.b"])
    t4 = ag.add(ag.conv1x1(b4, w["neck.l4.w"], w["neck.l4.b"]), ag.upsample2x(t5))
    t3 = ag.add(ag.conv1x1(b3, w["neck.l3.w"], w["neck.l3.b"]), ag.upsample2x(t4))
    pyramid = {1: t3, 2: t4, 3: t5}

    outputs = []
    for lvl in levels:
        l = lvl.index
        feat = pyramid[l]
        c = ag.relu(ag.conv3x3(feat, w[f"head{l}.cls1.w"], w[f"head{l}.cls1.b"]))
        c = ag.relu(ag.conv3x3(c, w[f"head{l}.cls2.w"], w[f"head{l}.cls2.b"]))
        grid = FeatureGrid(level=lvl, values=c)
        protos = PrototypeSet(level=lvl, prototypes=w[f"head{l}.proto"],
                              biases=w[f"head{l}.proto_bias"])
        stack = response_map(protos, grid)
        r = ag.relu(ag.conv3x3(feat, w[f"head{l}.reg1.w"], w[f"head{l}.reg1.b"]))
        r = ag.relu(ag.conv3x3(r, w[f"head{l}.reg2.w"], w[f"head{l}.reg2.b"]))
        raw = ag.conv1x1(r, w[f"head{l}.dfl.w"], w[f"head{l}.dfl.b"])
        nbins = raw.shape[2] // 4
        reg = ag.reshape(raw, (lvl.grid_h, lvl.grid_w, 4, nbins))
        outputs.append(LevelOutput(level=lvl, cls_grid=grid, stack=stack,
                                   reg_logits=reg, protos=protos))
    return outputs, w, tape


# ---------------------------------------------------------------------------
# target assignment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Assignment:
    class_index: int
    i: int
    j: int
    dists: tuple     # (l, t, r, b) in stride units, within [0, tau]
    gt_xyxy: tuple
    anchor: tuple    # cell-center pixels (ax, ay)


def assign_targets(boxes, levels, image_size):
    """Center-cell assignment at every level whose valid range admits the
    box; collisions keep the first box and skip the rest."""
    per_level = {lvl.index: [] for lvl in levels}
    skipped = []
    for box in boxes:
        clipped = clip_box(box, image_size, image_size)
        if clipped is None:
            skipped.append(box)
            continue
        assigned = False
        for lvl in levels:
            lo, hi = 0.0, lvl.tau * lvl.stride
            if not (lo <= clipped.w <= hi and lo <= clipped.h <= hi):
                continue
            s = lvl.stride
            j = min(int(clipped.cx // s), lvl.grid_w - 1)
            i = min(int(clipped.cy // s), lvl.grid_h - 1)
            if any(a.i == i and a.j == j for a in per_level[lvl.index]):
                continue  # cell collision at this level
            ax, ay = (j + 0.5) * s, (i + 0.5) * s
            d = (max(ax - clipped.x1, 0.0) / s, max(ay - clipped.y1, 0.0) / s,
                 max(clipped.x2 - ax, 0.0) / s, max(clipped.y2 - ay, 0.0) / s)
            d = tuple(min(v, lvl.tau) for v in d)
            per_level[lvl.index].append(Assignment(
                class_index=clipped.class_index, i=i, j=j, dists=d,
                gt_xyxy=(clipped.x1, clipped.y1, clipped.x2, clipped.y2),
                anchor=(ax, ay)))
            assigned = True
        if not assigned:
            skipped.append(box)
    return per_level, skipped


# ---------------------------------------------------------------------------
# per-image loss
# ---------------------------------------------------------------------------

def image_loss(outputs, boxes, config: TrainConfig, rng):
    """Compose the total objective for one image on the outputs' tape."""
    tape = outputs[0].stack.scores.tape
    levels = [o.level for o in outputs]
    assignments, _ = assign_targets(boxes, levels, config.image_size)

    zero = lambda: ag.Tensor(np.float32(0.0), tape=tape)
    cls_terms, dfl_terms, reg_terms = [], [], []
    rpc_terms, pr_terms = [], []

    for out in outputs:
        l = out.level.index
        assigns = assignments[l]
        positives = [(a.class_index, a.i, a.j) for a in assigns]
        negatives = _sample_negatives(out.level, positives, config.neg_ratio, rng)
        cls_terms.append(losses.cls_loss(out.stack, positives, negatives))

        if assigns:
            idx_i = [a.i for a in assigns]
            idx_j = [a.j for a in assigns]
            sel = _gather_cells(out.reg_logits, idx_i, idx_j)   # (N, 4, nbins)
            targets = np.array([a.dists for a in assigns])
            dfl_terms.append(losses.dfl_loss(sel, targets))
            pred_dists = _expected_dists(sel)                   # (N, 4) tensor
            anchors = np.array([a.anchor for a in assigns])
            strides = np.full(len(assigns), out.level.stride, dtype=np.float64)
            gts = np.array([a.gt_xyxy for a in assigns])
            reg_terms.append(losses.iou_reg_loss(pred_dists, anchors, strides, gts))

        if config.use_rpc:
            clipped = [cb for cb in
                       (clip_box(b, config.image_size, config.image_size)
                        for b in boxes) if cb is not None]
            label_stack = generate_label_maps(
                clipped, out.level, config.class_count,
                scale_filter=config.use_splgs)
            stack = out.stack
            if config.rpc_stop_backbone:
                detached = FeatureGrid(level=out.level,
                                       values=ag.Tensor(out.cls_grid.values.data,
                                                        tape=tape))
                stack = response_map(out.protos, detached)
            rpc_terms.append(losses.rpc_loss(stack, label_stack))
        else:
            rpc_terms.append(zero())

        if config.use_pr:
            pr_terms.append(losses.PR_VARIANTS[config.pr_variant](out.protos.prototypes))
        else:
            pr_terms.append(zero())

    def _mean(terms):
        if not terms:
            return zero()
        acc = terms[0]
        for t in terms[1:]:
            acc = ag.add(acc, t)
        return ag.scale(acc, 1.0 / len(terms))

    return losses.total_loss(_mean(cls_terms), _mean(reg_terms), _mean(dfl_terms),
                             rpc_terms, pr_terms, weights=config.loss_weights)


def _gather_cells(reg_logits, idx_i, idx_j):
    """Select (N, 4, nbins) rows from an (H, W, 4, nbins) tensor."""
    H, W, four, nbins = reg_logits.shape
    data = reg_logits.data[idx_i, idx_j]
    ii = np.asarray(idx_i)
    jj = np.asarray(idx_j)

    def _bw(g):
        full = np.zeros(reg_logits.shape, dtype=g.dtype)
        np.add.at(full, (ii, jj), g)
        return (full,)
    return ag.custom_op(data, (reg_logits,), _bw, op="gather_cells")


def _expected_dists(sel):
    """Differentiable DFL expectation: (N, 4, nbins) -> (N, 4)."""
    p = ag.softmax_last(sel)
    nbins = sel.shape[-1]
    N = sel.shape[0]
    bins = np.arange(nbins, dtype=np.float64)

    def _bw(g):
        return (g[:, :, None] * bins,)
    flat = ag.custom_op((p.data * bins).sum(axis=-1), (p,), _bw, op="dfl_expect")
    return flat


def _sample_negatives(level, positives, neg_ratio, rng):
    if not positives or neg_ratio <= 0 or rng is None:
        return []
    taken = {(i, j) for _, i, j in positives}
    free = [(i, j) for i in range(level.grid_h) for j in range(level.grid_w)
            if (i, j) not in taken]
    n = min(len(free), neg_ratio * len(positives))
    if n == 0:
        return []
    picks = rng.choice(len(free), size=n, replace=False)
    return [free[k] for k in picks]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train(config: TrainConfig, scenes, out_dir=None, log_path=None,
          params=None, start_step=0):
    """SGD with momentum and decoupled weight decay; reproducible per seed.

    Returns (params, step_reports).  With out_dir set, a checkpoint is
    written each epoch; with log_path set, per-step component values are
    appended as JSON lines.
    """
    if not scenes:
        raise DetectorError("dataset is empty")
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = init_params(config, rng=np.random.default_rng(config.seed))
    velocity = {k: np.zeros_like(t.data) for k, t in params.items()}
    lr, mu, wd = config.learning_rate, config.momentum, config.weight_decay

    log_file = open(log_path, "a") if log_path else None
    reports = []
    step = start_step
    try:
        for epoch in range(config.epochs):
            order = rng.permutation(len(scenes))
            for b0 in range(0, len(scenes), config.batch_size):
                batch = [scenes[k] for k in order[b0:b0 + config.batch_size]]
                grads = {k: np.zeros_like(t.data) for k, t in params.items()}
                comp_sums, total_sum = {}, 0.0
                for scene in batch:
                    outputs, leaves, tape = forward(params, scene.image, config)
                    total, report = image_loss(outputs, scene.boxes, config, rng)
                    if not np.isfinite(report.total):
                        bad = [k for k, v in report.components.items()
                               if not np.isfinite(v)]
                        raise DetectorError(
                            f"non-finite loss at step {step}: components {bad}")
                    ag.backward(tape, total)
                    for name, leaf in leaves.items():
                        if leaf.grad is not None:
                            grads[name] += leaf.grad
                    total_sum += report.total
                    for k, v in report.components.items():
                        comp_sums[k] = comp_sums.get(k, 0.0) + v
                n = len(batch)
                for name, t in params.items():
                    g = grads[name] / n
                    velocity[name] = mu * velocity[name] + g
                    t.data = (t.data - lr * velocity[name]
                              - lr * wd * t.data).astype(np.float32)
                step += 1
                report = losses.LossReport(
                    total=total_sum / n,
                    components={k: v / n for k, v in comp_sums.items()})
                reports.append((step, report))
                if log_file:
                    log_file.write(json.dumps(
                        {"step": step, "component": "total",
                         "value": report.total}) + "\n")
                    for k in sorted(report.components):
                        log_file.write(json.dumps(
                            {"step": step, "component": k,
                             "value": report.components[k]}) + "\n")
            if out_dir:
                save_checkpoint(os.path.join(out_dir, "checkpoint"), params,
                                config, step=step)
    finally:
        if log_file:
            log_file.close()
    return params, reports


# ---------------------------------------------------------------------------
# decode / NMS
# ---------------------------------------------------------------------------

def decode(outputs, score_thresh, nms_iou, image_id=0, restrict_level=None):
    """Anchor-free decode + greedy per-class NMS -> list of Detection."""
    if not 0.0 < score_thresh < 1.0 or not 0.0 < nms_iou < 1.0:
        raise DetectorError("thresholds must lie in (0, 1)")
    cands = []
    for out in outputs:
        if restrict_level is not None and out.level.index != restrict_level:
            continue
        s = out.level.stride
        scores = out.stack.scores.data          # (C, H, W)
        fg = scores[:-1]
        conf = fg.max(axis=0)
        cls = fg.argmax(axis=0) + 1
        dists = losses.dfl_decode(out.reg_logits.data) * s   # (H, W, 4)
        for i, j in zip(*np.nonzero(conf >= score_thresh)):
            ax, ay = (j + 0.5) * s, (i + 0.5) * s
            l, t, r, b = dists[i, j]
            cands.append(Detection(image_id=image_id, class_index=int(cls[i, j]),
                                   score=float(conf[i, j]),
                                   box=(ax - l, ay - t, ax + r, ay + b)))
    kept = []
    for k in sorted({c.class_index for c in cands}):
        group = sorted([c for c in cands if c.class_index == k],
                       key=lambda d: -d.score)
        chosen = []
        for d in group:
            if all(losses.box_iou(d.box, c.box) < nms_iou for c in chosen):
                chosen.append(d)
        kept.extend(chosen)
    return kept


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(params, scenes, config: TrainConfig, restrict_level=None):
    """MetricReport over a scene list: mAP@0.5 (+ size buckets), the
    saliency-mass discriminability, foreground/background AUC, and the
    prototype sparsity score."""
    detections, ground_truth = [], []
    disc_vals, auc_vals = [], []
    for img_id, scene in enumerate(scenes):
        outputs, _, _ = forward(params, scene.image, config)
        detections.extend(decode(outputs, config.score_thresh, config.nms_iou,
                                 image_id=img_id, restrict_level=restrict_level))
        stacks = [o.stack for o in outputs]
        present = sorted({b.class_index for b in scene.boxes})
        for k in present:
            sal = aggregate_saliency(stacks, k - 1,
                                     (config.image_size, config.image_size))
            mask = box_mask(scene.boxes, k, config.image_size, config.image_size)
            disc_vals.append(discriminability(sal.values, mask))
            a = auc_ft(sal.values, mask)
            if a is not None:
                auc_vals.append(a)
        for b in scene.boxes:
            ground_truth.append((img_id, b.class_index,
                                 (b.x1, b.y1, b.x2, b.y2)))
    overall, per_class = map50(detections, ground_truth)
    buckets = {name: map50(detections, ground_truth, bucket=name)[0]
               for name in ("small", "medium", "large")}
    protos = [params[f"head{l}.proto"].data for l in (1, 2, 3)]
    return MetricReport(
        disc=float(np.mean(disc_vals)) if disc_vals else 0.0,
        auc_ft=float(np.mean(auc_vals)) if auc_vals else 0.5,
        spar=sparsity(protos),
        map50=overall, map_small=buckets["small"], map_medium=buckets["medium"],
        map_large=buckets["large"], n_pairs=len(disc_vals),
        per_class={str(k): v for k, v in per_class.items()})


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(prefix, params, config: TrainConfig, step=0):
    """JSON manifest (names, shapes, byte offsets) + little-endian float32 blob."""
    manifest = {"tensors": {}, "config": config.to_dict(), "step": step}
    offset = 0
    with open(prefix + ".bin", "wb") as blob:
        for name in sorted(params):
            arr = params[name].data.astype("<f4")
            blob.write(arr.tobytes())
            manifest["tensors"][name] = {"shape": list(arr.shape),
                                         "offset": offset,
                                         "size": int(arr.size)}
            offset += arr.nbytes
    with open(prefix + ".json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_checkpoint(prefix):
    """Returns (params dict, TrainConfig, step)."""
    with open(prefix + ".json") as f:
        manifest = json.load(f)
    with open(prefix + ".bin", "rb") as f:
        blob = f.read()
    params = {}
    for name, meta in manifest["tensors"].items():
        arr = np.frombuffer(blob, dtype="<f4", count=meta["size"],
                            offset=meta["offset"]).reshape(meta["shape"])
        params[name] = ag.Tensor(arr.copy(), requires_grad=True)
    config = TrainConfig.from_dict(manifest["config"])
    return params, config, manifest.get("step", 0)
