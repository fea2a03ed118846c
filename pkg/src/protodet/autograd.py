"""Minimal dense-tensor reverse-mode autodiff.

A Tape records every Tensor produced by an operator in creation order;
backward() walks the tape in strict reverse order and accumulates (sums)
gradients, so shared subexpressions behave correctly.  The operator set is
fixed and small: just enough to train the toy detector and machine-check
every loss gradient against central finite differences.

Values are float32 by default.  The finite-difference checker promotes
everything to float64 internally so the comparison is limited by the
analytic gradient, not by rounding.
"""

import numpy as np

DEFAULT_DTYPE = np.float32


class AutogradError(ValueError):
    pass


class Tape:
    """Ordered record of tensors; topological order == recording order."""

    def __init__(self):
        self.nodes = []

    def _register(self, tensor):
        tensor._node_id = len(self.nodes)
        self.nodes.append(tensor)


class Tensor:
    def __init__(self, data, tape=None, requires_grad=False, dtype=None,
                 _parents=(), _backward=None, _op="leaf"):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = (arr.astype(dtype) if arr.ndim == 0
                     else np.ascontiguousarray(arr, dtype=dtype))
        if not np.all(np.isfinite(self.data)):
            raise AutogradError(f"non-finite values in tensor (op={_op})")
        self.requires_grad = requires_grad
        self.tape = tape
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        if tape is not None:
            tape._register(self)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={list(self.data.shape)}, op={self._op})"


def _tape_of(parents):
    for p in parents:
        if isinstance(p, Tensor) and p.tape is not None:
            return p.tape
    return None


def _accum(parent, g):
    if parent.grad is None:
        parent.grad = np.zeros_like(parent.data, dtype=g.dtype)
    parent.grad = parent.grad + g.reshape(parent.data.shape)


def custom_op(data, parents, backward_fn, op="custom"):
    """Create an op node with a hand-written backward.

    backward_fn(grad_out) must return one gradient array per parent
    (None to skip a parent).  Used by the fused losses (DFL, IoU, the
    spectral regularizer) whose gradients are derived analytically.
    """
    out = Tensor(data, tape=_tape_of(parents), _parents=tuple(parents), _op=op)

    def _bw(g):
        grads = backward_fn(g)
        for p, pg in zip(out._parents, grads):
            if pg is not None:
                _accum(p, np.asarray(pg, dtype=p.data.dtype))
    out._backward = _bw
    return out


def backward(tape, loss):
    """Populate .grad on every requires_grad leaf reachable from loss."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise AutogradError("backward expects a scalar loss tensor")
    if loss.tape is not tape:
        raise AutogradError("loss was not recorded on this tape")
    for t in tape.nodes:
        t.grad = None
    loss.grad = np.ones_like(loss.data)
    for t in reversed(tape.nodes):
        if t.grad is not None and t._backward is not None:
            t._backward(t.grad)
    return {t._node_id: t.grad for t in tape.nodes
            if t.requires_grad and t.grad is not None}


# ---------------------------------------------------------------------------
# operator set
# ---------------------------------------------------------------------------

def _require_shape(a, b, op):
    if a.shape != b.shape:
        raise AutogradError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


def add(a, b):
    _require_shape(a.data, b.data, "add")
    return custom_op(a.data + b.data, (a, b), lambda g: (g, g), op="add")


def bias_add(x, b):
    """Add a length-C bias over the last axis; the only broadcast allowed."""
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise AutogradError(
            f"bias_add: shape mismatch {list(x.data.shape)} vs {list(b.data.shape)}")

    def _bw(g):
        return g, g.reshape(-1, b.data.shape[0]).sum(axis=0)
    return custom_op(x.data + b.data, (x, b), _bw, op="bias_add")


def scale(x, c):
    c = float(c)
    return custom_op(x.data * c, (x,), lambda g: (g * c,), op="scale")


def mask_mul(x, mask):
    """Elementwise multiply by a constant array (no gradient to the mask)."""
    m = np.asarray(mask, dtype=x.data.dtype)
    _require_shape(x.data, m, "mask_mul")
    return custom_op(x.data * m, (x,), lambda g: (g * m,), op="mask_mul")


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise AutogradError(
            f"matmul: shape mismatch {list(a.data.shape)} vs {list(b.data.shape)}")

    def _bw(g):
        return g @ b.data.T, a.data.T @ g
    return custom_op(a.data @ b.data, (a, b), _bw, op="matmul")


def transpose(x):
    if x.data.ndim != 2:
        raise AutogradError(f"transpose: expected 2-d, got {list(x.data.shape)}")
    return custom_op(x.data.T.copy(), (x,), lambda g: (g.T,), op="transpose")


def reshape(x, shape):
    shape = tuple(shape)
    return custom_op(x.data.reshape(shape), (x,),
                     lambda g: (g.reshape(x.data.shape),), op="reshape")


def relu(x):
    mask = x.data > 0
    return custom_op(np.where(mask, x.data, 0), (x,),
                     lambda g: (g * mask,), op="relu")


def sigmoid(x):
    d = x.data
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.clip(d, -60, 60))),
                 np.exp(np.clip(d, -60, 60)) / (1.0 + np.exp(np.clip(d, -60, 60))))
    y = y.astype(d.dtype)
    return custom_op(y, (x,), lambda g: (g * y * (1.0 - y),), op="sigmoid")


def reduce_sum(x):
    def _bw(g):
        return (np.full_like(x.data, float(np.asarray(g).reshape(()))),)
    return custom_op(np.array(x.data.sum(dtype=np.float64), dtype=x.data.dtype),
                     (x,), _bw, op="sum")


def reduce_mean(x):
    n = x.data.size

    def _bw(g):
        return (np.full_like(x.data, float(np.asarray(g).reshape(())) / n),)
    return custom_op(np.array(x.data.mean(dtype=np.float64), dtype=x.data.dtype),
                     (x,), _bw, op="mean")


def softmax_last(x):
    d = x.data
    m = d - d.max(axis=-1, keepdims=True)
    e = np.exp(m)
    y = (e / e.sum(axis=-1, keepdims=True)).astype(d.dtype)

    def _bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)
    return custom_op(y, (x,), _bw, op="softmax")


BCE_EPS = 1e-7


def bce(pred, target, eps=BCE_EPS):
    """Elementwise -[y log(p+eps) + (1-y) log(1-p+eps)]; target is constant."""
    y = np.asarray(target, dtype=pred.data.dtype)
    _require_shape(pred.data, y, "bce")
    p = pred.data
    val = -(y * np.log(p + eps) + (1.0 - y) * np.log(1.0 - p + eps))

    def _bw(g):
        return (g * (-(y / (p + eps)) + (1.0 - y) / (1.0 - p + eps)),)
    return custom_op(val, (pred,), _bw, op="bce")


# -- convolutions -----------------------------------------------------------

def _im2col(x, k, stride, pad):
    H, W, Cin = x.shape
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    cols = np.empty((Ho, Wo, k, k, Cin), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            cols[:, :, di, dj, :] = xp[di:di + (Ho - 1) * stride + 1:stride,
                                       dj:dj + (Wo - 1) * stride + 1:stride, :]
    return cols.reshape(Ho * Wo, k * k * Cin), Ho, Wo


def _col2im(dcols, H, W, Cin, k, stride, pad, Ho, Wo):
    dxp = np.zeros((H + 2 * pad, W + 2 * pad, Cin), dtype=dcols.dtype)
    dcols = dcols.reshape(Ho, Wo, k, k, Cin)
    for di in range(k):
        for dj in range(k):
            dxp[di:di + (Ho - 1) * stride + 1:stride,
                dj:dj + (Wo - 1) * stride + 1:stride, :] += dcols[:, :, di, dj, :]
    return dxp[pad:pad + H, pad:pad + W]


def conv3x3(x, w, b, stride=1):
    """x: (H,W,Cin), w: (Cout,3,3,Cin), b: (Cout,); padding 1."""
    if x.data.ndim != 3 or w.data.ndim != 4 or w.data.shape[1:3] != (3, 3) \
            or w.data.shape[3] != x.data.shape[2]:
        raise AutogradError(
            f"conv3x3: shape mismatch {list(x.data.shape)} vs {list(w.data.shape)}")
    if stride not in (1, 2):
        raise AutogradError("conv3x3: stride must be 1 or 2")
    H, W, Cin = x.data.shape
    Cout = w.data.shape[0]
    wm = w.data.reshape(Cout, 9 * Cin)
    cols, Ho, Wo = _im2col(x.data, 3, stride, 1)
    y = (cols @ wm.T + b.data).reshape(Ho, Wo, Cout)

    def _bw(g):
        gm = g.reshape(Ho * Wo, Cout)
        dw = (gm.T @ cols).reshape(w.data.shape)
        dcols = gm @ wm
        dx = _col2im(dcols, H, W, Cin, 3, stride, 1, Ho, Wo)
        return dx, dw, gm.sum(axis=0)
    return custom_op(y, (x, w, b), _bw, op="conv3x3")


def conv1x1(x, w, b):
    """x: (H,W,Cin), w: (Cout,Cin), b: (Cout,)."""
    if x.data.ndim != 3 or w.data.ndim != 2 or w.data.shape[1] != x.data.shape[2]:
        raise AutogradError(
            f"conv1x1: shape mismatch {list(x.data.shape)} vs {list(w.data.shape)}")
    y = x.data @ w.data.T + b.data

    def _bw(g):
        H, W, Cout = g.shape
        gm = g.reshape(-1, Cout)
        xm = x.data.reshape(-1, x.data.shape[2])
        return (g @ w.data).reshape(x.data.shape), gm.T @ xm, gm.sum(axis=0)
    return custom_op(y, (x, w, b), _bw, op="conv1x1")


def upsample2x(x):
    """Nearest-neighbour 2x upsample over the two leading spatial axes."""
    y = np.repeat(np.repeat(x.data, 2, axis=0), 2, axis=1)

    def _bw(g):
        H, W = x.data.shape[:2]
        g4 = g.reshape(H, 2, W, 2, *x.data.shape[2:])
        return (g4.sum(axis=(1, 3)),)
    return custom_op(y, (x,), _bw, op="upsample2x")


def _bilinear_weights(n_src, n_dst):
    # align-corners-false sampling: src = (i + 0.5) * n_src / n_dst - 0.5
    pos = (np.arange(n_dst) + 0.5) * n_src / n_dst - 0.5
    pos = np.clip(pos, 0.0, n_src - 1.0)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_src - 1)
    w_hi = pos - lo
    return lo, hi, w_hi


def resize_bilinear(x, size):
    """Bilinear resize of an (H,W) or (H,W,C) tensor, align-corners-false."""
    Ho, Wo = int(size[0]), int(size[1])
    if Ho < 1 or Wo < 1:
        raise AutogradError(f"resize_bilinear: bad target size {size}")
    d = x.data
    if d.ndim not in (2, 3):
        raise AutogradError(f"resize_bilinear: expected 2-d or 3-d, got {list(d.shape)}")
    H, W = d.shape[:2]
    ylo, yhi, wy = _bilinear_weights(H, Ho)
    xlo, xhi, wx = _bilinear_weights(W, Wo)
    wy_ = wy.reshape(-1, 1) if d.ndim == 2 else wy.reshape(-1, 1, 1)
    wx_ = wx.reshape(1, -1) if d.ndim == 2 else wx.reshape(1, -1, 1)
    top = d[ylo][:, xlo] * (1 - wx_) + d[ylo][:, xhi] * wx_
    bot = d[yhi][:, xlo] * (1 - wx_) + d[yhi][:, xhi] * wx_
    y = (top * (1 - wy_) + bot * wy_).astype(d.dtype)

    def _bw(g):
        dx = np.zeros_like(d, dtype=g.dtype)
        for ys, wgy in ((ylo, 1 - wy), (yhi, wy)):
            for xs, wgx in ((xlo, 1 - wx), (xhi, wx)):
                wgt = wgy.reshape(-1, 1) * wgx.reshape(1, -1)
                if d.ndim == 3:
                    wgt = wgt[:, :, None]
                np.add.at(dx, (ys.reshape(-1, 1), xs.reshape(1, -1)), g * wgt)
        return (dx,)
    return custom_op(y, (x,), _bw, op="resize_bilinear")


FORWARD_OPS = {
    "add": add,
    "bias_add": bias_add,
    "scale": scale,
    "matmul": matmul,
    "relu": relu,
    "sigmoid": sigmoid,
    "conv3x3": conv3x3,
    "conv1x1": conv1x1,
    "upsample2x": upsample2x,
    "resize_bilinear": resize_bilinear,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "softmax": softmax_last,
    "bce": bce,
}


def forward(op_kind, inputs, params=None):
    """Generic dispatch over the fixed operator set."""
    if op_kind not in FORWARD_OPS:
        raise AutogradError(f"unknown op kind: {op_kind}")
    params = params or {}
    return FORWARD_OPS[op_kind](*inputs, **params)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def finite_diff_check(fn, x, eps=1e-4):
    """Max relative error between the tape gradient of fn and central
    finite differences, both evaluated in float64.

    fn maps a Tensor to a scalar Tensor on the Tensor's own tape.
    """
    if not (1e-5 <= eps <= 1e-2):
        raise AutogradError(f"eps {eps} outside [1e-5, 1e-2]")
    x0 = np.asarray(x, dtype=np.float64)

    tape = Tape()
    xt = Tensor(x0.copy(), tape=tape, requires_grad=True, dtype=np.float64)
    loss = fn(xt)
    if loss.data.size != 1 or not np.isfinite(loss.data).all():
        raise AutogradError("fn must return a finite scalar")
    backward(tape, loss)
    analytic = (xt.grad if xt.grad is not None else np.zeros_like(x0)).ravel()

    def value_at(arr):
        t = Tensor(arr, tape=Tape(), requires_grad=False, dtype=np.float64)
        out = fn(t)
        if not np.isfinite(out.data).all():
            raise AutogradError("fn returned a non-finite value during FD probe")
        return float(np.asarray(out.data).reshape(()))

    numeric = np.empty(x0.size)
    flat = x0.ravel()
    for i in range(x0.size):
        old = flat[i]
        flat[i] = old + eps
        up = value_at(x0)
        flat[i] = old - eps
        down = value_at(x0)
        flat[i] = old
        numeric[i] = (up - down) / (2 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0
