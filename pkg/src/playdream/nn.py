"""Network building blocks on top of the autodiff tensor core.

All parameters are plain Tensors discovered by attribute walking; a module tree
serializes to a flat {name: array} dict, which is what the checkpoint format
stores.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

LOG_STD_LO = -5.0
LOG_STD_HI = 2.0


class Module:
    """Minimal container: parameters are Tensor attributes, found recursively."""

    def named_params(self, prefix: str = ""):
        for name, val in vars(self).items():
            if name.startswith("_"):
                continue  # stashed state (e.g. frozen target copies), not params
            if isinstance(val, Tensor):
                yield f"{prefix}{name}", val
            elif isinstance(val, Module):
                yield from val.named_params(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Tensor):
                        yield f"{prefix}{name}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_params(f"{prefix}{name}.{i}.")

    def params(self):
        return [p for _, p in self.named_params()]

    def export_arrays(self, prefix: str = "") -> dict:
        return {n: p.data for n, p in self.named_params(prefix)}

    def load_arrays(self, arrays: dict, prefix: str = ""):
        for n, p in self.named_params(prefix):
            if n not in arrays:
                raise KeyError(f"missing parameter '{n}' in checkpoint")
            src = arrays[n]
            if tuple(src.shape) != tuple(p.data.shape):
                raise ValueError(f"shape mismatch for '{n}': {src.shape} vs {p.data.shape}")
            p.data = src.astype(p.data.dtype, copy=True)

    def set_requires_grad(self, flag: bool):
        for _, p in self.named_params():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def zero_grad(self):
        for _, p in self.named_params():
            p.grad = None

    def n_params(self) -> int:
        return sum(p.data.size for _, p in self.named_params())


def _uniform(rng, fan_in: int, shape, scale: float = 1.0):
    bound = scale / math.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32), requires_grad=True)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng, bias: bool = True, scale: float = 1.0):
        self.w = _uniform(rng, in_dim, (in_dim, out_dim), scale)
        self.b = _uniform(rng, in_dim, (out_dim,), scale) if bias else None
        self.in_dim, self.out_dim = in_dim, out_dim

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = x.reshape((-1, self.in_dim)) if x.ndim != 2 else x
        out = T.affine(flat, self.w, self.b) if self.b is not None else flat @ self.w
        if x.ndim != 2:
            out = out.reshape(lead + (self.out_dim,))
        return out


class MLP(Module):
    """Fully connected stack; relu between layers, optional final activation."""

    def __init__(self, dims, rng, out_act=None, out_scale: float = 1.0):
        self.layers = [
            Linear(dims[i], dims[i + 1], rng, scale=out_scale if i == len(dims) - 2 else 1.0)
            for i in range(len(dims) - 1)
        ]
        self.out_act = out_act

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = x.reshape((-1, self.layers[0].in_dim)) if x.ndim != 2 else x
        out = T.linear_relu_chain(flat, [(l.w, l.b) for l in self.layers])
        if x.ndim != 2:
            out = out.reshape(lead + (self.layers[-1].out_dim,))
        if self.out_act is not None:
            out = self.out_act(out)
        return out


class GRUCell(Module):
    """Standard GRU; the reset gate scales the hidden contribution to the candidate."""

    def __init__(self, in_dim: int, hidden: int, rng):
        self.wx = _uniform(rng, hidden, (in_dim, 3 * hidden))
        self.wh = _uniform(rng, hidden, (hidden, 3 * hidden))
        self.b = _uniform(rng, hidden, (3 * hidden,))
        self.hidden = hidden

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        return T.gru_cell(x, h, self.wx, self.wh, self.b)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.g = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.b = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        m = x.mean(axis=-1, keepdims=True)
        d = x - m
        var = (d * d).mean(axis=-1, keepdims=True)
        return d / (var + self.eps) ** 0.5 * self.g + self.b


class Embedding(Module):
    def __init__(self, vocab: int, dim: int, rng):
        self.w = Tensor(rng.normal(0.0, 0.1, size=(vocab, dim)).astype(np.float32), requires_grad=True)

    def __call__(self, idx: np.ndarray) -> Tensor:
        return T.gather_rows(self.w, idx)


# -- convolution -------------------------------------------------------------


class Conv2d(Module):
    """3x3-style conv on channels-last [B,H,W,C] via im2col + matmul.

    Weight rows follow the patch ordering (ky, kx, in_c).
    """

    def __init__(self, in_c: int, out_c: int, rng, ksize: int = 3, stride: int = 1, pad: int = 1):
        fan = in_c * ksize * ksize
        self.w = _uniform(rng, fan, (fan, out_c))
        self.b = _uniform(rng, fan, (out_c,))
        self.in_c, self.out_c = in_c, out_c
        self.ksize, self.stride, self.pad = ksize, stride, pad

    def __call__(self, x: Tensor) -> Tensor:
        B = x.shape[0]
        cols, oH, oW = T.im2col(x, self.ksize, self.stride, self.pad)
        out = T.affine(cols.reshape((-1, cols.shape[-1])), self.w, self.b)
        return out.reshape((B, oH, oW, self.out_c))


class ConvEncoder(Module):
    """Stride-2 conv stack mapping [B,H,W,3] to a flat feature vector."""

    def __init__(self, hw: int, channels, rng):
        self.convs = []
        c = 3
        size = hw
        for out_c in channels:
            self.convs.append(Conv2d(c, out_c, rng, ksize=3, stride=2, pad=1))
            c = out_c
            size = (size + 2 - 3) // 2 + 1
        self.out_dim = c * size * size

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = T.relu(conv(x))
        return x.reshape((x.shape[0], -1))


class ConvDecoder(Module):
    """Mirror of ConvEncoder: dense stem, then (2x nearest upsample + conv) per level."""

    def __init__(self, in_dim: int, hw: int, channels, rng):
        n = len(channels)  # one 2x upsample per conv, last conv maps to RGB
        self.base = hw // (2 ** n)
        if self.base < 1:
            raise ValueError(f"too many decoder levels for {hw}x{hw} output")
        self.c0 = channels[0]
        self.stem = Linear(in_dim, self.c0 * self.base * self.base, rng)
        self.convs = []
        cs = list(channels) + [3]
        for c_in, c_out in zip(cs[:-1], cs[1:]):
            self.convs.append(Conv2d(c_in, c_out, rng, ksize=3, stride=1, pad=1))

    def __call__(self, z: Tensor) -> Tensor:
        x = T.relu(self.stem(z)).reshape((-1, self.base, self.base, self.c0))
        for i, conv in enumerate(self.convs):
            x = T.upsample2x(x)
            x = conv(x)
            if i < len(self.convs) - 1:
                x = T.relu(x)
        return x  # [B, hw, hw, 3], unsquashed mean


# -- attention ---------------------------------------------------------------


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over [B,T,d] with an optional key mask [B,T]."""
    d = q.shape[-1]
    scores = T.bmm(q, k.transpose((0, 2, 1))) * (1.0 / math.sqrt(d))  # [B,Tq,Tk]
    if mask is not None:
        scores = scores + Tensor((mask[:, None, :] - 1.0) * 1e9)
    return T.bmm(T.softmax(scores, axis=-1), v)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)
        self.heads = heads
        self.hd = dim // heads

    def _split(self, x: Tensor, B: int, L: int) -> Tensor:
        return x.reshape((B, L, self.heads, self.hd)).transpose((0, 2, 1, 3)).reshape((B * self.heads, L, self.hd))

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        B, L, D = x.shape
        q, k, v = self._split(self.q(x), B, L), self._split(self.k(x), B, L), self._split(self.v(x), B, L)
        hmask = np.repeat(mask, self.heads, axis=0) if mask is not None else None
        out = attention(q, k, v, hmask)
        out = out.reshape((B, self.heads, L, self.hd)).transpose((0, 2, 1, 3)).reshape((B, L, D))
        return self.o(out)


class TransformerBlock(Module):
    """Pre-norm residual block: x + attn(ln(x)), then x + ff(ln(x))."""

    def __init__(self, dim: int, heads: int, ff_hidden: int, rng):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ff1 = Linear(dim, ff_hidden, rng)
        self.ff2 = Linear(ff_hidden, dim, rng)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.ln1(x), mask)
        return x + self.ff2(T.relu(self.ff1(self.ln2(x))))


class TransformerEncoder(Module):
    """Blocks over a [B,T,d] sequence with learned absolute position embeddings."""

    def __init__(self, dim: int, heads: int, ff_hidden: int, n_blocks: int, max_len: int, rng):
        self.pos = Tensor(rng.normal(0.0, 0.02, size=(max_len, dim)).astype(np.float32), requires_grad=True)
        self.blocks = [TransformerBlock(dim, heads, ff_hidden, rng) for _ in range(n_blocks)]
        self.max_len = max_len

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        B, L, D = x.shape
        if L > self.max_len:
            raise ValueError(f"sequence length {L} exceeds max {self.max_len}")
        if mask is not None and not np.all(mask.sum(axis=-1) > 0):
            raise ValueError("fully masked sequence")
        x = x + self.pos[:L]
        for blk in self.blocks:
            x = blk(x, mask)
        return x


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Average [B,T,d] over valid T positions given a {0,1} mask [B,T]."""
    m = mask[:, :, None]
    return (x * Tensor(m)).sum(axis=1) / Tensor(np.maximum(m.sum(axis=1), 1.0))


# -- stochastic heads --------------------------------------------------------


def st_categorical_sample(logits: Tensor, rng, relaxed: bool = False) -> Tensor:
    """Sample one-hot vectors over the last axis with straight-through gradients.

    Forward emits exact one-hots; backward behaves as if the forward had been
    softmax(logits), i.e. out = probs + const(onehot - probs). relaxed=True
    skips sampling and returns the probs themselves (used by the
    finite-difference harness, where a piecewise-constant forward would make
    the check meaningless).
    """
    probs = T.softmax(logits, axis=-1)
    if relaxed:
        return probs
    return _st_from_probs(probs, rng.random(probs.data.shape[:-1]))


def st_onehot_from_uniforms(logits: Tensor, uniforms: np.ndarray) -> Tensor:
    """st_categorical_sample with caller-supplied uniform draws.

    `uniforms` has the logits' shape minus the class axis. Lets episode-batched
    evaluation keep one RNG stream per episode regardless of batch makeup.
    """
    return _st_from_probs(T.softmax(logits, axis=-1), uniforms)


def _st_from_probs(probs: Tensor, u: np.ndarray) -> Tensor:
    p = probs.data
    C = p.shape[-1]
    idx = np.minimum((u[..., None] > np.cumsum(p, axis=-1)).sum(axis=-1), C - 1)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    onehot -= p
    return probs + Tensor(onehot)


def categorical_kl(q_logits: Tensor, p_logits: Tensor) -> Tensor:
    """KL(q || p) per batch row, summed over the trailing group/class axes."""
    q = T.softmax(q_logits, axis=-1)
    diff = T.log_softmax(q_logits, axis=-1) - T.log_softmax(p_logits, axis=-1)
    kl = q * diff
    axes = tuple(range(1, q_logits.ndim))
    return kl.sum(axis=axes)


def balanced_kl(q_logits: Tensor, p_logits: Tensor, delta: float) -> Tensor:
    """delta * KL(q || sg(p)) + (1-delta) * KL(sg(q) || p), per batch row.

    Terms with a zero coefficient are skipped entirely, so at delta in {0,1}
    the untouched head receives exactly no gradient.
    """
    parts = []
    if delta > 0.0:
        parts.append(delta * categorical_kl(q_logits, p_logits.detach()))
    if delta < 1.0:
        parts.append((1.0 - delta) * categorical_kl(q_logits.detach(), p_logits))
    out = parts[0]
    for p in parts[1:]:
        out = out + p
    return out


def tanh_gaussian_action(mean: Tensor, log_std: Tensor, noise: np.ndarray) -> Tensor:
    """tanh(mean + exp(clamp(log_std)) * noise) as one fused graph node.

    The imagination loop calls this once per step per batch; building the
    composite op-by-op costs more in graph bookkeeping than the math itself.
    """
    mean, log_std = T._ensure(mean), T._ensure(log_std)
    ls = np.clip(log_std.data, LOG_STD_LO, LOG_STD_HI)
    std = np.exp(ls)
    a = np.tanh(mean.data + std * noise)

    def bwd(g, grads):
        dm = g * (1.0 - a * a)
        T._accum(grads, mean, dm)
        inside = (log_std.data > LOG_STD_LO) & (log_std.data <= LOG_STD_HI)
        T._accum(grads, log_std, dm * noise * std * inside)

    return T._from_op(a, (mean, log_std), bwd)


def tanh_gaussian_sample(mean: Tensor, log_std: Tensor, noise: np.ndarray):
    """Reparameterized squashed-Gaussian sample.

    Returns (action, log_prob) with action = tanh(mean + std * noise) and the
    change-of-variables correction log(1 - tanh(u)^2) computed in the stable
    form 2*(log 2 - u - softplus(-2u)). log_std is hard-clamped before use.
    """
    log_std = T.clamp(log_std, LOG_STD_LO, LOG_STD_HI)
    std = T.exp(log_std)
    eps = Tensor(noise)
    u = mean + std * eps
    action = T.tanh(u)
    base = -0.5 * eps * eps - log_std - 0.5 * T.LOG_2PI
    corr = 2.0 * (T.LOG2 - u - T.softplus(-2.0 * u))
    log_prob = (base - corr).sum(axis=-1)
    return action, log_prob


def tanh_gaussian_log_prob(mean: Tensor, log_std: Tensor, action: np.ndarray) -> Tensor:
    """Log-density of given actions in (-1, 1) under the squashed Gaussian."""
    log_std = T.clamp(log_std, LOG_STD_LO, LOG_STD_HI)
    a = np.clip(action, -1.0 + 1e-6, 1.0 - 1e-6)
    u = np.arctanh(a)
    z = (Tensor(u) - mean) / T.exp(log_std)
    base = -0.5 * z * z - log_std - 0.5 * T.LOG_2PI
    corr = 2.0 * (T.LOG2 - Tensor(u) - T.softplus(Tensor(-2.0 * u)))
    return (base - corr).sum(axis=-1)
