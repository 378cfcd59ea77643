"""Dense float64 tensors with a minimal reverse-mode gradient tape.

Every differentiable operation used by the fusion model lives here. Ops
compute eagerly on numpy arrays; when a Tape is active and an input
requires gradients, a backward closure is recorded. Backward traverses
the tape in reverse execution order, which is a valid reverse
topological order because ops append nodes as they run.
"""

from __future__ import annotations

import threading
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "tensor",
    "backward",
    "matmul",
    "softmax",
    "relu",
    "exp",
    "log",
    "sqrt",
    "absolute",
    "pow_const",
    "reshape",
    "transpose",
    "concat",
    "narrow",
    "take_rows",
    "gather_pairs",
    "bilinear_sample",
    "trilinear_sample",
    "conv2d",
    "conv3d",
    "upsample_nearest2d",
    "upsample_nearest3d",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class TapeError(RuntimeError):
    """Tape misuse: nested tapes, backward off-tape, non-scalar loss."""


_TLS = threading.local()


def _active_tape() -> Optional["Tape"]:
    return getattr(_TLS, "tape", None)


class Tape:
    """Ordered record of operations for one reverse-mode sweep.

    One tape per thread; enter as a context manager. Nodes are stored in
    execution order so every node's parents precede it.
    """

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise TapeError("a tape is already active on this thread")
        _TLS.tape = self
        return self

    def __exit__(self, *exc):
        _TLS.tape = None
        return False

    def _record(self, out: "Tensor", bwd) -> None:
        out._tape = self
        self.nodes.append((out, bwd))


class Tensor:
    """Row-major float64 n-d array, optionally tracked for gradients.

    `grad` matches `data`'s shape once populated. Tensors are treated as
    immutable after construction; reading from multiple threads is safe.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        # Non-inplace add: backward closures may hand the same array to
        # several parents, so the stored grad must never be mutated.
        self.grad = g if self.grad is None else self.grad + g

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out_data: np.ndarray, parents: Sequence[Tensor], bwd) -> Tensor:
    """Wrap an op result; record on the active tape when grads are needed."""
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape._record(out, bwd)
    return out


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss; leaf grads accumulate.

    Repeated calls without zeroing grads add up. Intermediate grads are
    released after the sweep so a second backward re-propagates cleanly.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss is not on a tape (was it computed inside `with Tape()`?)")
    loss._accum(np.ones_like(loss.data))
    for out, bwd in reversed(tape.nodes):
        if out.grad is not None:
            bwd(out.grad)
    for out, _ in tape.nodes:
        out.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    nd = len(shape)
    while g.ndim > nd:
        g = g.sum(axis=0)
    axes = tuple(i for i in range(nd) if shape[i] == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def bwd(g, x=x, out=out):
        if x.requires_grad:
            x._accum(np.where(out > 0.0, g, 0.0))

    return _make(out, (x,), bwd)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bwd(g, x=x, out=out):
        if x.requires_grad:
            x._accum(g * out)

    return _make(out, (x,), bwd)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def bwd(g, x=x):
        if x.requires_grad:
            x._accum(g / x.data)

    return _make(out, (x,), bwd)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def bwd(g, x=x, out=out):
        if x.requires_grad:
            x._accum(g * (0.5 / out))

    return _make(out, (x,), bwd)


def absolute(x: Tensor) -> Tensor:
    out = np.abs(x.data)

    def bwd(g, x=x):
        if x.requires_grad:
            x._accum(g * np.sign(x.data))

    return _make(out, (x,), bwd)


def pow_const(x: Tensor, p: float) -> Tensor:
    out = x.data**p

    def bwd(g, x=x, p=p):
        if x.requires_grad:
            x._accum(g * p * x.data ** (p - 1.0))

    return _make(out, (x,), bwd)


# ---------------------------------------------------------------------------
# reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g, x=x, axis=axis, keepdims=keepdims):
        if not x.requires_grad:
            return
        if axis is None:
            x._accum(np.broadcast_to(g, x.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.data.shape).copy())

    return _make(np.asarray(out), (x,), bwd)


def mean_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        denom = x.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        denom = 1
        for a in ax:
            denom *= x.data.shape[a]

    def bwd(g, x=x, axis=axis, keepdims=keepdims, denom=denom):
        if not x.requires_grad:
            return
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g / denom, x.data.shape).copy())

    return _make(np.asarray(out), (x,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul expects (m,k)@(k,n); got {a.data.shape} @ {b.data.shape}"
        )
    out = a.data @ b.data

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _make(out, (a, b), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; output sums to 1 along `axis`."""
    if axis >= x.data.ndim or axis < -x.data.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {x.data.ndim}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g, x=x, out=out, axis=axis):
        if x.requires_grad:
            inner = (g * out).sum(axis=axis, keepdims=True)
            x._accum((g - inner) * out)

    return _make(out, (x,), bwd)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def bwd(g, x=x):
        if x.requires_grad:
            x._accum(g.reshape(x.data.shape))

    return _make(out, (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def bwd(g, x=x, inv=inv):
        if x.requires_grad:
            x._accum(g.transpose(inv))

    return _make(out, (x,), bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, parts=parts, axis=axis, offsets=offsets):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accum(g[tuple(idx)])

    return _make(out, tuple(parts), bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = np.ascontiguousarray(x.data[idx])

    def bwd(g, x=x, idx=idx):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[idx] = g
            x._accum(full)

    return _make(out, (x,), bwd)


def take_rows(x: Tensor, idx) -> Tensor:
    """Select rows of a 2-d tensor; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.intp)
    out = x.data[idx]

    def bwd(g, x=x, idx=idx):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            np.add.at(full, idx, g)
            x._accum(full)

    return _make(out, (x,), bwd)


def gather_pairs(x: Tensor, rows, cols) -> Tensor:
    """out[i] = x[rows[i], cols[i]] for a 2-d tensor."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out = x.data[rows, cols]

    def bwd(g, x=x, rows=rows, cols=cols):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            np.add.at(full, (rows, cols), g)
            x._accum(full)

    return _make(out, (x,), bwd)


# ---------------------------------------------------------------------------
# grid samplers
#
# Normalized coordinates follow the node convention: coordinate u in [0,1]
# maps linearly onto node indices [0, n-1] of that axis, so u=0 is the
# first cell and u=1 the last. Samples outside the grid draw on implicit
# zero padding; a point more than one cell outside returns exactly zero.

_CORNERS_2D = np.array([[i, j] for i in (0, 1) for j in (0, 1)], dtype=np.intp)
_CORNERS_3D = np.array(
    [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.intp
)


def _linear_sample(fmap: Tensor, pts, normalized: bool, corners: np.ndarray) -> Tensor:
    """Shared N-linear interpolation core (2D: 4 corners, 3D: 8 corners)."""
    pts_t = _as_tensor(pts)
    nd = corners.shape[1]
    single = pts_t.data.ndim == 1
    p = pts_t.data.reshape(-1, nd)
    C = fmap.data.shape[0]
    dims = np.array(fmap.data.shape[1:], dtype=np.intp)
    scale = (dims - 1.0) if normalized else np.ones(nd)
    xy = p * scale if normalized else p
    i0 = np.floor(xy).astype(np.intp)
    f = xy - i0

    idx = i0[None, :, :] + corners[:, None, :]  # (Q, P, nd)
    idx_c = np.minimum(np.maximum(idx, 0), dims - 1)
    inside = (idx == idx_c).all(axis=-1)  # (Q, P)
    all_inside = bool(inside.all())
    lin = idx_c[..., 0]
    for d in range(1, nd):
        lin = lin * dims[d] + idx_c[..., d]

    # per-axis interpolation factors and their sign for the position grad
    hi = corners.astype(np.float64)  # 1 where the corner is the upper node
    waxis = hi[:, None, :] * f[None, :, :] + (1.0 - hi[:, None, :]) * (
        1.0 - f[None, :, :]
    )  # (Q, P, nd)
    w = waxis.prod(axis=-1)  # (Q, P)
    if not all_inside:
        w = w * inside

    flat = fmap.data.reshape(C, -1)
    vals = flat[:, lin]  # (C, Q, P)
    if not all_inside:
        vals = vals * inside  # clipped gathers masked to zero
    out = np.einsum("cqp,qp->pc", vals, w, optimize=False)

    def bwd(g, fmap=fmap, pts_t=pts_t):
        if single:
            g = g.reshape(1, -1)
        if fmap.requires_grad:
            gflat = np.zeros((C, flat.shape[1]))
            contrib = g.T[:, None, :] * w[None, :, :]  # (C, Q, P)
            np.add.at(gflat, (slice(None), lin.reshape(-1)), contrib.reshape(C, -1))
            fmap._accum(gflat.reshape(fmap.data.shape))
        if pts_t.requires_grad:
            gdotv = np.einsum("cqp,pc->qp", vals, g, optimize=False)  # (Q, P)
            sign = 2.0 * hi - 1.0  # (Q, nd)
            gp = np.empty_like(p)
            for d in range(nd):
                others = [bool(dd != d) for dd in range(nd)]
                wother = waxis[:, :, others].prod(axis=-1)
                gp[:, d] = np.einsum(
                    "qp,qp,q->p", gdotv, wother, sign[:, d], optimize=False
                )
            gp *= scale
            pts_t._accum(gp.reshape(pts_t.data.shape))

    return _make(out[0] if single else out, (fmap, pts_t), bwd)


def bilinear_sample(fmap: Tensor, pts, normalized: bool = True) -> Tensor:
    """Sample a (C,H,W) map at P continuous points.

    pts: Tensor or array of shape (P,2) ordered (row, col) to match the
    map's index order, or shape (2,) for a single point. Differentiable
    in both the map and the points. Returns (P,C) or (C,).
    """
    if fmap.data.ndim != 3:
        raise ShapeError(f"bilinear_sample expects (C,H,W), got {fmap.data.shape}")
    return _linear_sample(fmap, pts, normalized, _CORNERS_2D)


def trilinear_sample(fcube: Tensor, pts, normalized: bool = True) -> Tensor:
    """Sample a (C,D0,D1,D2) cube at P continuous points; see bilinear_sample."""
    if fcube.data.ndim != 4:
        raise ShapeError(
            f"trilinear_sample expects (C,D0,D1,D2), got {fcube.data.shape}"
        )
    return _linear_sample(fcube, pts, normalized, _CORNERS_3D)


# ---------------------------------------------------------------------------
# convolution (im2col + GEMM), nearest upsampling

_COL_INDEX_CACHE: dict = {}


def _col_indices(spatial, ksize, stride, pad):
    """Gather indices for im2col, cached per shape signature.

    `lin[t, o]` is the padded-volume index read by kernel tap t at output
    cell o.
    """
    key = (spatial, ksize, stride, pad)
    cached = _COL_INDEX_CACHE.get(key)
    if cached is not None:
        return cached
    nd = len(spatial)
    padded = tuple(s + 2 * pad for s in spatial)
    out_sp = tuple((padded[i] - ksize) // stride + 1 for i in range(nd))
    grids = np.meshgrid(
        *[np.arange(o) * stride for o in out_sp], indexing="ij"
    )  # output cell origins
    offs = np.meshgrid(*[np.arange(ksize)] * nd, indexing="ij")
    # absolute index per (tap, cell) for each dim
    n_cells = int(np.prod(out_sp))
    lin = np.zeros((ksize**nd, n_cells), dtype=np.intp)
    mult = 1
    for d in reversed(range(nd)):
        pos = offs[d].reshape(-1, 1) + grids[d].reshape(1, -1)
        lin += pos * mult
        mult *= padded[d]
    result = (lin, padded, out_sp)
    _COL_INDEX_CACHE[key] = result
    return result


def _convnd(x: Tensor, w: Tensor, b: Optional[Tensor], stride: int, pad: int, nd: int):
    c_in = x.data.shape[0]
    spatial = x.data.shape[1:]
    if w.data.ndim != nd + 2 or w.data.shape[1] != c_in:
        raise ShapeError(
            f"conv{nd}d kernel shape {w.data.shape} incompatible with input {x.data.shape}"
        )
    ksize = w.data.shape[2]
    c_out = w.data.shape[0]
    lin, padded, out_sp = _col_indices(spatial, ksize, stride, pad)

    if pad:
        xp = np.zeros((c_in,) + padded)
        inner = (slice(None),) + tuple(slice(pad, pad + s) for s in spatial)
        xp[inner] = x.data
    else:
        xp = x.data
    xp_flat = xp.reshape(c_in, -1)
    # columns: (c_in * k^nd, n_cells)
    cols = xp_flat[:, lin].reshape(c_in * ksize**nd, -1)
    wmat = w.data.reshape(c_out, -1)
    out = wmat @ cols
    if b is not None:
        out = out + b.data[:, None]
    out = out.reshape((c_out,) + out_sp)

    def bwd(g, x=x, w=w, b=b):
        gmat = g.reshape(c_out, -1)
        if b is not None and b.requires_grad:
            b._accum(gmat.sum(axis=1))
        if w.requires_grad:
            w._accum((gmat @ cols.T).reshape(w.data.shape))
        if x.requires_grad:
            # col2im: accumulate each kernel tap into a strided view
            gcols = (wmat.T @ gmat).reshape((c_in,) + (ksize,) * nd + out_sp)
            gxp = np.zeros((c_in,) + padded)
            for tap in np.ndindex(*([ksize] * nd)):
                sl = (slice(None),) + tuple(
                    slice(tap[d], tap[d] + stride * out_sp[d], stride)
                    for d in range(nd)
                )
                gxp[sl] += gcols[(slice(None),) + tap]
            if pad:
                inner = (slice(None),) + tuple(slice(pad, pad + s) for s in spatial)
                gxp = gxp[inner]
            x._accum(gxp)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bwd)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 1) -> Tensor:
    """2-d convolution: x (C_in,H,W), w (C_out,C_in,k,k)."""
    return _convnd(x, w, b, stride, pad, nd=2)


def conv3d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 1) -> Tensor:
    """3-d convolution: x (C_in,D0,D1,D2), w (C_out,C_in,k,k,k)."""
    return _convnd(x, w, b, stride, pad, nd=3)


def upsample_nearest2d(x: Tensor, factor: int = 2) -> Tensor:
    C, H, W = x.data.shape
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def bwd(g, x=x, factor=factor):
        if x.requires_grad:
            x._accum(g.reshape(C, H, factor, W, factor).sum(axis=(2, 4)))

    return _make(out, (x,), bwd)


def upsample_nearest3d(x: Tensor, factor: int = 2) -> Tensor:
    C, D0, D1, D2 = x.data.shape
    out = x.data
    for ax in (1, 2, 3):
        out = np.repeat(out, factor, axis=ax)

    def bwd(g, x=x, factor=factor):
        if x.requires_grad:
            x._accum(
                g.reshape(C, D0, factor, D1, factor, D2, factor).sum(axis=(2, 4, 6))
            )

    return _make(out, (x,), bwd)
