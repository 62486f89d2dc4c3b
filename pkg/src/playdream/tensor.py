"""Dense float tensors with reverse-mode automatic differentiation.

numpy supplies storage and kernels; the graph is recorded dynamically as ops
execute and replayed in reverse topological order by ``Tensor.backward``.
Gradients accumulate into graph leaves only (parameters and inputs); the same
graph may be walked repeatedly and grads keep summing until cleared.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

LOG2 = math.log(2.0)
LOG_2PI = math.log(2.0 * math.pi)


class NonFiniteError(RuntimeError):
    """A NaN/Inf appeared somewhere the run cannot recover from."""


def _as_array(x):
    if isinstance(x, np.ndarray):
        return x if x.dtype.kind == "f" else x.astype(DEFAULT_DTYPE)
    if isinstance(x, (np.floating, np.integer)):
        return np.asarray(x, dtype=x.dtype if isinstance(x, np.floating) else DEFAULT_DTYPE)
    return np.asarray(x, dtype=DEFAULT_DTYPE)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- basic properties ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Constant view of this tensor; gradients do not flow past it."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- autograd -----------------------------------------------------------

    def backward(self):
        """Accumulate dSelf/dLeaf into every requires_grad leaf below self.

        Repeated calls keep accumulating; clear grads between optimization
        steps. Raises if self is not a connected scalar.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.data.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor with no gradient-tracked inputs")
        order = _topo_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                node._backward(g, grads)
            elif node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_(self, p)

    def __getitem__(self, idx):
        data = self.data[idx]

        def bwd(g, grads):
            buf = np.zeros_like(self.data)
            buf[idx] = g  # basic indexing never aliases, plain assignment is fine
            _accum(grads, self, buf)

        return _from_op(data, (self,), bwd)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _ensure(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_grad_enabled = True


class no_grad:
    """Context manager suppressing graph construction (frozen-model forwards)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _from_op(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(grads: dict, node: Tensor, g):
    if not node.requires_grad:
        return
    key = id(node)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


def _topo_order(root: Tensor):
    """Iterative post-order DFS; deep RNN graphs overflow Python recursion."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise binary ------------------------------------------------------


def add(a, b):
    a, b = _ensure(a), _ensure(b)

    def bwd(g, grads):
        _accum(grads, a, _unbroadcast(g, a.data.shape))
        _accum(grads, b, _unbroadcast(g, b.data.shape))

    return _from_op(a.data + b.data, (a, b), bwd)


def sub(a, b):
    a, b = _ensure(a), _ensure(b)

    def bwd(g, grads):
        _accum(grads, a, _unbroadcast(g, a.data.shape))
        _accum(grads, b, _unbroadcast(-g, b.data.shape))

    return _from_op(a.data - b.data, (a, b), bwd)


def mul(a, b):
    a, b = _ensure(a), _ensure(b)

    def bwd(g, grads):
        _accum(grads, a, _unbroadcast(g * b.data, a.data.shape))
        _accum(grads, b, _unbroadcast(g * a.data, b.data.shape))

    return _from_op(a.data * b.data, (a, b), bwd)


def div(a, b):
    a, b = _ensure(a), _ensure(b)

    def bwd(g, grads):
        _accum(grads, a, _unbroadcast(g / b.data, a.data.shape))
        _accum(grads, b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _from_op(a.data / b.data, (a, b), bwd)


def maximum(a, b):
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = _ensure(a), _ensure(b)
    pick_a = a.data >= b.data

    def bwd(g, grads):
        _accum(grads, a, _unbroadcast(g * pick_a, a.data.shape))
        _accum(grads, b, _unbroadcast(g * (~pick_a), b.data.shape))

    return _from_op(np.maximum(a.data, b.data), (a, b), bwd)


# -- elementwise unary -------------------------------------------------------


def neg(a):
    a = _ensure(a)

    def bwd(g, grads):
        _accum(grads, a, -g)

    return _from_op(-a.data, (a,), bwd)


def pow_(a, p: float):
    a = _ensure(a)
    p = float(p)

    def bwd(g, grads):
        _accum(grads, a, g * p * a.data ** (p - 1.0))

    return _from_op(a.data**p, (a,), bwd)


def exp(a):
    a = _ensure(a)
    out_data = np.exp(a.data)

    def bwd(g, grads):
        _accum(grads, a, g * out_data)

    return _from_op(out_data, (a,), bwd)


def log(a):
    a = _ensure(a)

    def bwd(g, grads):
        _accum(grads, a, g / a.data)

    return _from_op(np.log(a.data), (a,), bwd)


def tanh(a):
    a = _ensure(a)
    out_data = np.tanh(a.data)

    def bwd(g, grads):
        _accum(grads, a, g * (1.0 - out_data * out_data))

    return _from_op(out_data, (a,), bwd)


def sigmoid(a):
    a = _ensure(a)
    # stable: sigmoid(x) = exp(-relu(-x)) / (1 + exp(-|x|))
    out_data = np.exp(-np.maximum(-a.data, 0.0)) / (1.0 + np.exp(-np.abs(a.data)))

    def bwd(g, grads):
        _accum(grads, a, g * out_data * (1.0 - out_data))

    return _from_op(out_data, (a,), bwd)


def relu(a):
    a = _ensure(a)
    out_data = np.maximum(a.data, 0.0)

    def bwd(g, grads):
        _accum(grads, a, g * (a.data > 0))

    return _from_op(out_data, (a,), bwd)


def stop_gradient(a) -> Tensor:
    return _ensure(a).detach()


# -- matmul ------------------------------------------------------------------


def matmul(a, b):
    """2-D @ 2-D. Higher-rank inputs go through reshape or bmm."""
    a, b = _ensure(a), _ensure(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")

    def bwd(g, grads):
        _accum(grads, a, g @ b.data.T)
        _accum(grads, b, a.data.T @ g)

    return _from_op(a.data @ b.data, (a, b), bwd)


def affine(x, w, b):
    """x @ w + b in one graph node; x is 2-D, b broadcasts over rows."""
    x, w, b = _ensure(x), _ensure(w), _ensure(b)
    out_data = x.data @ w.data
    out_data += b.data

    def bwd(g, grads):
        _accum(grads, x, g @ w.data.T)
        _accum(grads, w, x.data.T @ g)
        _accum(grads, b, g.sum(axis=0))

    return _from_op(out_data, (x, w, b), bwd)


def _sigmoid_np(x):
    return np.exp(-np.maximum(-x, 0.0)) / (1.0 + np.exp(-np.abs(x)))


def linear_relu_chain(x, layers):
    """Dense stack w/ relu between layers (raw final output) as one graph node.

    `layers` is a list of (w, b) Tensor pairs. Deep actor/critic trunks call
    this every imagination step; per-op graph recording would dominate the
    arithmetic at these widths.
    """
    x = _ensure(x)
    ws = [(_ensure(w), _ensure(b)) for w, b in layers]
    n = len(ws)
    acts = [x.data]
    cur = x.data
    for i, (w, b) in enumerate(ws):
        cur = cur @ w.data
        cur += b.data
        if i < n - 1:
            np.maximum(cur, 0.0, out=cur)
            acts.append(cur)

    def bwd(g, grads):
        for i in reversed(range(n)):
            w, b = ws[i]
            _accum(grads, w, acts[i].T @ g)
            _accum(grads, b, g.sum(axis=0))
            g = g @ w.data.T
            if i > 0:
                g *= acts[i] > 0  # relu mask: post-relu input of layer i
        _accum(grads, x, g)

    parents = (x,) + tuple(t for pair in ws for t in pair)
    return _from_op(cur, parents, bwd)


def gru_cell(x, h, wx, wh, b):
    """Fused GRU step: one graph node instead of ~14.

    r = sigmoid((x@wx+b)[:, :H] + (h@wh)[:, :H]); u likewise on the middle
    block; candidate c = tanh(xz_c + r * hz_c); out = u*h + (1-u)*c.
    """
    x, h, wx, wh, b = _ensure(x), _ensure(h), _ensure(wx), _ensure(wh), _ensure(b)
    H = h.data.shape[1]
    xz = x.data @ wx.data
    xz += b.data
    hz = h.data @ wh.data
    r = _sigmoid_np(xz[:, :H] + hz[:, :H])
    u = _sigmoid_np(xz[:, H : 2 * H] + hz[:, H : 2 * H])
    hz_c = hz[:, 2 * H :]
    c = np.tanh(xz[:, 2 * H :] + r * hz_c)
    out_data = u * h.data + (1.0 - u) * c

    def bwd(g, grads):
        dc = g * (1.0 - u)
        da_c = dc * (1.0 - c * c)
        dr = da_c * hz_c
        da = np.empty_like(xz)
        da[:, :H] = dr * r * (1.0 - r)
        da[:, H : 2 * H] = g * (h.data - c) * u * (1.0 - u)
        da[:, 2 * H :] = da_c
        _accum(grads, x, da @ wx.data.T)
        _accum(grads, wx, x.data.T @ da)
        _accum(grads, b, da.sum(axis=0))
        dhz = da.copy()
        dhz[:, 2 * H :] = da_c * r
        _accum(grads, wh, h.data.T @ dhz)
        _accum(grads, h, dhz @ wh.data.T + g * u)

    return _from_op(out_data, (x, h, wx, wh, b), bwd)


def bmm(a, b):
    """Batched matmul: [B,n,m] @ [B,m,k] -> [B,n,k]."""
    a, b = _ensure(a), _ensure(b)
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ValueError(f"bmm expects 3-D operands, got {a.data.shape} @ {b.data.shape}")

    def bwd(g, grads):
        _accum(grads, a, g @ b.data.swapaxes(1, 2))
        _accum(grads, b, a.data.swapaxes(1, 2) @ g)

    return _from_op(a.data @ b.data, (a, b), bwd)


# -- reductions --------------------------------------------------------------


def _expand_reduced(g, axis, keepdims, shape):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(ax % len(shape) for ax in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False):
    a = _ensure(a)

    def bwd(g, grads):
        _accum(grads, a, _expand_reduced(g, axis, keepdims, a.data.shape))

    return _from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    a = _ensure(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out_data.size, 1)

    def bwd(g, grads):
        _accum(grads, a, _expand_reduced(g, axis, keepdims, a.data.shape) / count)

    return _from_op(out_data, (a,), bwd)


# -- shape ops ---------------------------------------------------------------


def reshape(a, *shape):
    a = _ensure(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.data.shape

    def bwd(g, grads):
        _accum(grads, a, g.reshape(old))

    return _from_op(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes=None):
    a = _ensure(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)

    def bwd(g, grads):
        _accum(grads, a, g.transpose(inv))

    return _from_op(a.data.transpose(axes), (a,), bwd)


def concat(tensors, axis=0):
    tensors = [_ensure(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, grads):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(grads, t, g[tuple(idx)])

    return _from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def stack(tensors, axis=0):
    tensors = [_ensure(t) for t in tensors]

    def bwd(g, grads):
        for i, t in enumerate(tensors):
            _accum(grads, t, np.take(g, i, axis=axis))

    return _from_op(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def gather_rows(a, idx):
    """Pick rows of a 2-D tensor by integer index array (embedding lookup)."""
    a = _ensure(a)
    idx = np.asarray(idx)

    def bwd(g, grads):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx.reshape(-1), g.reshape(-1, a.data.shape[-1]))
        _accum(grads, a, buf)

    return _from_op(a.data[idx], (a,), bwd)


# -- compositions ------------------------------------------------------------


def softmax(x, axis=-1):
    """Single-node softmax (max-shifted) with the closed-form Jacobian product."""
    x = _ensure(x)
    e = np.exp(x.data - np.max(x.data, axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def bwd(g, grads):
        _accum(grads, x, p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return _from_op(p, (x,), bwd)


def log_softmax(x, axis=-1):
    x = _ensure(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    out_data = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bwd(g, grads):
        _accum(grads, x, g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))

    return _from_op(out_data, (x,), bwd)


def softplus(x):
    """log(1 + e^x), computed as relu(x) + log1p(e^-|x|) for stability."""
    x = _ensure(x)
    ax = relu(x) + relu(neg(x))  # |x|
    return relu(x) + log(1.0 + exp(neg(ax)))


def clamp(x, lo: float, hi: float):
    """Hard clamp with unit gradient inside [lo, hi] and zero outside."""
    return lo + relu(x - lo) - relu(x - hi)


# -- image-layout ops --------------------------------------------------------


def im2col(x, ksize: int, stride: int, pad: int):
    """[B,H,W,C] -> ([B, oH*oW, k*k*C], oH, oW) patch matrix for conv-as-matmul.

    Channels-last keeps every gather/scatter below running over contiguous
    C-sized runs; patch entries are ordered (ky, kx, channel).
    """
    x = _ensure(x)
    B, H, W, C = x.data.shape
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if pad:
        xp = np.zeros((B, Hp, Wp, C), dtype=x.data.dtype)
        xp[:, pad:-pad, pad:-pad] = x.data
    else:
        xp = x.data
    win = sliding_window_view(xp, (ksize, ksize), axis=(1, 2))[:, ::stride, ::stride]
    oH, oW = win.shape[1], win.shape[2]
    # win is [B,oH,oW,C,ky,kx]; reorder so (ky,kx,C) flattens per patch
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B, oH * oW, ksize * ksize * C)

    def bwd(g, grads):
        gw = g.reshape(B, oH, oW, ksize, ksize, C)
        buf = np.zeros((B, Hp, Wp, C), dtype=g.dtype)
        for i in range(ksize):
            for j in range(ksize):
                buf[:, i : i + oH * stride : stride, j : j + oW * stride : stride] += gw[:, :, :, i, j]
        if pad:
            buf = buf[:, pad:-pad, pad:-pad]
        _accum(grads, x, buf)

    return _from_op(cols, (x,), bwd), oH, oW


def upsample2x(x):
    """Nearest-neighbor 2x upsample of [B,H,W,C]."""
    x = _ensure(x)
    B, H, W, C = x.data.shape
    out_data = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def bwd(g, grads):
        _accum(grads, x, g.reshape(B, H, 2, W, 2, C).sum(axis=(2, 4)))

    return _from_op(out_data, (x,), bwd)


# -- checks ------------------------------------------------------------------


def assert_finite(x, what: str = "value"):
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite {what} encountered")
    return x
