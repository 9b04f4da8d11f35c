"""Reverse-mode autodiff on float64 numpy arrays, sized for the mini detector.

Ops execute eagerly and append nodes to an implicit tape (each output tensor
remembers its parents and a backward closure). ``Tensor.backward`` walks the
tape in reverse topological order exactly once and returns the visited record,
so callers can inspect the computation graph after the fact.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

Number = Union[int, float]

# Finite-ness is an invariant of every op output; the check is a single pass
# over data that is tiny compared to the matmuls it guards.
CHECK_FINITE = True


class ShapeError(ValueError):
    """Operand shapes incompatible with the op; message names the op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf; message names the op."""


class TraceNode:
    """One recorded op: kind, parent tensor ids, output tensor id."""

    __slots__ = ("op", "parent_ids", "out_id")

    def __init__(self, op: str, parent_ids: tuple, out_id: int):
        self.op = op
        self.parent_ids = parent_ids
        self.out_id = out_id

    def __repr__(self):
        return f"TraceNode({self.op}, parents={self.parent_ids}, out={self.out_id})"


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """Dense float64 array with an optional grad slot and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _op: str = "leaf", _parents: tuple = (), _backward=None):
        self.data = _as_f64(data)
        if CHECK_FINITE and not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"{_op}: produced non-finite values")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._op = _op
        self._parents = _parents
        self._backward = _backward

    # ------------------------------------------------------------------ shape
    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, grad={'set' if self.grad is not None else 'none'})"

    # ------------------------------------------------------------------- grad
    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def detach(self) -> "Tensor":
        """Copy that is cut off from the tape (receives no gradient)."""
        return Tensor(self.data.copy())

    def backward(self) -> list[TraceNode]:
        """Backprop from this scalar; returns the op record in visit order.

        Gradients accumulate into ``.grad`` of every tensor on the tape that
        has ``requires_grad``. Raises ShapeError if this tensor is not scalar.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {self.shape}")
        # Iterative topological sort; tapes run to a few thousand nodes.
        order: list[Tensor] = []
        seen = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        record: list[TraceNode] = []
        for node in reversed(order):
            if node._backward is None:
                continue
            record.append(TraceNode(node._op, tuple(id(p) for p in node._parents), id(node)))
            if node.grad is not None:
                node._backward(node.grad)
        return record

    # -------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -float(other))

    def __rsub__(self, other):
        return add(-self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("div: tensor/tensor division not supported; multiply by reciprocal")
        return mul(self, 1.0 / float(other))

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])


def _make(data, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _op=op, _parents=tuple(parents), _backward=backward)


# ----------------------------------------------------------------- arithmetic

def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")

        def bwd(g):
            a._accumulate(g)
            b._accumulate(g)

        return _make(a.data + b.data, "add", (a, b), bwd)

    c = float(b)

    def bwd(g):
        a._accumulate(g)

    return _make(a.data + c, "add_const", (a,), bwd)


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")

        def bwd(g):
            a._accumulate(g * b.data)
            b._accumulate(g * a.data)

        return _make(a.data * b.data, "mul", (a, b), bwd)

    c = float(b)

    def bwd(g):
        a._accumulate(g * c)

    return _make(a.data * c, "mul_const", (a,), bwd)


def tsum(a: Tensor, axis=None) -> Tensor:
    def bwd(g):
        if axis is None:
            a._accumulate(np.full_like(a.data, float(g)))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _make(a.data.sum(axis=axis), "sum", (a,), bwd)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("mean: empty axis")
    return mul(tsum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    def bwd(g):
        a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), "reshape", (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    ts = tuple(tensors)

    def bwd(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accumulate(g[tuple(sl)])

    return _make(np.concatenate([t.data for t in ts], axis=axis), "concat", ts, bwd)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows along the first axis; backward scatter-adds (handles repeats)."""
    idx = np.asarray(idx, dtype=np.intp)

    def bwd(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        a._accumulate(acc)

    return _make(a.data[idx], "gather_rows", (a,), bwd)


# ---------------------------------------------------------------- activations

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        a._accumulate(g * mask)

    return _make(a.data * mask, "relu", (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    y = _stable_sigmoid(a.data)

    def bwd(g):
        a._accumulate(g * y * (1.0 - y))

    return _make(y, "sigmoid", (a,), bwd)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        a._accumulate(y * (g - dot))

    return _make(y, "softmax", (a,), bwd)


# -------------------------------------------------------------------- linear

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x: (N, F) @ w: (F, O) + b: (O,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: incompatible shapes x{x.shape} w{w.shape} b{b.shape}")

    def bwd(g):
        x._accumulate(g @ w.data.T)
        w._accumulate(x.data.T @ g)
        b._accumulate(g.sum(axis=0))

    return _make(x.data @ w.data + b.data, "linear", (x, w, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def bwd(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, "matmul", (a, b), bwd)


# --------------------------------------------------------------- convolution

def _im2col(xp: np.ndarray, kh: int, kw: int, s: int, oh: int, ow: int) -> np.ndarray:
    b, c, _, _ = xp.shape
    st = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (b, c, kh, kw, oh, ow), (st[0], st[1], st[2], st[3], st[2] * s, st[3] * s)
    )
    return view.transpose(0, 4, 5, 1, 2, 3).reshape(b * oh * ow, c * kh * kw)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """x: (B, C, H, W), w: (O, C, kh, kw), b: (O,) -> (B, O, OH, OW)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d operands, got x{x.shape} w{w.shape}")
    bs, c, h, wi = x.shape
    o, c2, kh, kw = w.shape
    if c != c2 or b.shape != (o,):
        raise ShapeError(f"conv2d: incompatible shapes x{x.shape} w{w.shape} b{b.shape}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wi + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for input {h}x{wi} (pad={pad})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wmat = w.data.reshape(o, -1)
    out = (cols @ wmat.T + b.data).reshape(bs, oh, ow, o).transpose(0, 3, 1, 2)

    def bwd(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(bs * oh * ow, o)
        w._accumulate((g2.T @ cols).reshape(o, c, kh, kw))
        b._accumulate(g2.sum(axis=0))
        dcols = (g2 @ wmat).reshape(bs, oh, ow, c, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        x._accumulate(dxp[:, :, pad:pad + h, pad:pad + wi] if pad else dxp)

    return _make(out, "conv2d", (x, w, b), bwd)


# ---------------------------------------------------------------- RoI pooling

def roi_max_pool(feat: Tensor, rois: np.ndarray, out_size: int) -> Tensor:
    """Adaptive max-pool of feature regions to (N, C, P, P).

    feat: (C, H, W) single-image feature map; rois: (N, 4) corner boxes
    (x0, y0, x1, y1) in feature-cell coordinates. Box coordinates are data,
    not differentiable; gradients flow into the pooled feature cells only.
    """
    if feat.ndim != 3:
        raise ShapeError(f"roi_max_pool: feat must be (C,H,W), got {feat.shape}")
    c, h, w = feat.shape
    rois = np.asarray(rois, dtype=np.float64)
    n = len(rois)
    p = out_size
    out = np.empty((n, c, p, p))
    argmax = np.empty((n, c, p, p), dtype=np.intp)  # flat index into (H*W)
    fdata = feat.data.reshape(c, h * w)
    for r in range(n):
        x0 = int(np.clip(np.floor(rois[r, 0]), 0, w - 1))
        y0 = int(np.clip(np.floor(rois[r, 1]), 0, h - 1))
        x1 = int(np.clip(np.ceil(rois[r, 2]), x0 + 1, w))
        y1 = int(np.clip(np.ceil(rois[r, 3]), y0 + 1, h))
        bw, bh = x1 - x0, y1 - y0
        for py in range(p):
            ya = y0 + (py * bh) // p
            yb = y0 + max((((py + 1) * bh) + p - 1) // p, (py * bh) // p + 1)
            for px in range(p):
                xa = x0 + (px * bw) // p
                xb = x0 + max((((px + 1) * bw) + p - 1) // p, (px * bw) // p + 1)
                cell = feat.data[:, ya:yb, xa:xb].reshape(c, -1)
                loc = cell.argmax(axis=1)
                yy = ya + loc // (xb - xa)
                xx = xa + loc % (xb - xa)
                flat = yy * w + xx
                out[r, :, py, px] = fdata[np.arange(c), flat]
                argmax[r, :, py, px] = flat

    def bwd(g):
        dflat = np.zeros((c, h * w))
        ch_idx = np.broadcast_to(np.arange(c)[None, :, None, None], argmax.shape)
        np.add.at(dflat, (ch_idx.ravel(), argmax.ravel()), g.ravel())
        feat._accumulate(dflat.reshape(c, h, w))

    return _make(out, "roi_max_pool", (feat,), bwd)


# -------------------------------------------------------------------- losses

def cross_entropy_logits(logits: Tensor, labels) -> Tensor:
    """Per-row softmax cross entropy; logits (N, K), labels (N,) ints -> (N,)."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = lse - z[np.arange(len(labels)), labels]
    sm = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)

    def bwd(g):
        d = sm.copy()
        d[np.arange(len(labels)), labels] -= 1.0
        logits._accumulate(d * g[:, None])

    return _make(loss, "cross_entropy_logits", (logits,), bwd)


def bce_logits(logits: Tensor, targets) -> Tensor:
    """Per-element binary cross entropy on logits -> same shape as input."""
    t = _as_f64(targets)
    if t.shape != logits.shape:
        raise ShapeError(f"bce_logits: logits {logits.shape} vs targets {t.shape}")
    z = logits.data
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))

    def bwd(g):
        logits._accumulate((_stable_sigmoid(z) - t) * g)

    return _make(loss, "bce_logits", (logits,), bwd)


def smooth_l1(pred: Tensor, target, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1 (Huber) against a constant target."""
    t = _as_f64(target)
    if t.shape != pred.shape:
        raise ShapeError(f"smooth_l1: pred {pred.shape} vs target {t.shape}")
    d = pred.data - t
    ad = np.abs(d)
    loss = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)

    def bwd(g):
        pred._accumulate(np.clip(d / beta, -1.0, 1.0) * g)

    return _make(loss, "smooth_l1", (pred,), bwd)
