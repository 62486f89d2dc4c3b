"""Adam with decoupled weight decay, plus global-norm gradient clipping."""

from __future__ import annotations

import math

import numpy as np

from .tensor import NonFiniteError, Tensor


def clip_global_norm(grads: list, max_norm: float):
    """Rescale grads in place so the joint L2 norm is at most max_norm.

    Returns the norm observed *before* clipping. Empty input is a no-op with
    norm 0. The norm is accumulated in float64 so the operation is idempotent
    to rounding: a second call sees norm <= max_norm and leaves grads alone.
    """
    total = 0.0
    for g in grads:
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm > 0.0:
        scale = max_norm / norm
        for g in grads:
            g *= np.asarray(scale, dtype=g.dtype)
    return norm


class Adam:
    """Bias-corrected Adam; weight decay is decoupled (applied after the step).

    `params` is a list of (name, Tensor) pairs; names key the moment arrays so
    optimizer state can ride along in checkpoints for exact resume.
    """

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-5,
                 weight_decay: float = 0.0, clip_norm: float | None = None):
        self.params = [(n, p) for n, p in params]
        names = [n for n, _ in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self) -> float:
        """One update over all params; returns the pre-clip gradient norm.

        Missing grads count as zero (the moments still decay and weight decay
        still applies). NaN/Inf grads abort the step. Clipping never mutates
        the stored grads; the scale folds into the moment updates instead.
        """
        total = 0.0
        for n, p in self.params:
            g = p.grad
            if g is None:
                continue
            ss = float(np.vdot(g, g))
            if not math.isfinite(ss):
                if not np.all(np.isfinite(g)):
                    raise NonFiniteError(f"non-finite gradient for parameter '{n}'")
                ss = float(np.vdot(g.astype(np.float64), g))  # f32 square-sum overflowed
            total += ss
        norm = math.sqrt(total)
        scale = self.clip_norm / norm if self.clip_norm and norm > self.clip_norm > 0.0 else 1.0
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        k1 = (1.0 - self.b1) * scale
        k2 = (1.0 - self.b2) * scale * scale
        step_scale = self.lr / c1
        decay = 1.0 - self.lr * self.weight_decay
        for n, p in self.params:
            g = p.grad
            m = self.m[n]
            v = self.v[n]
            m *= self.b1
            v *= self.b2
            if g is not None:
                m += k1 * g
                gg = np.multiply(g, g)
                gg *= k2
                v += gg
            u = np.empty_like(v)  # keeps 0-d params as arrays through the out= chain
            np.divide(v, c2, out=u)
            np.sqrt(u, out=u)
            u += self.eps
            np.divide(m, u, out=u)
            u *= step_scale
            p.data -= u
            if self.weight_decay:
                p.data *= decay
        return norm

    # -- persistence --------------------------------------------------------

    def state_arrays(self) -> dict:
        out = {"t": np.asarray([self.t], dtype=np.int64)}
        for n in self.m:
            out[f"m.{n}"] = self.m[n]
            out[f"v.{n}"] = self.v[n]
        return out

    def load_state(self, arrays: dict):
        self.t = int(arrays["t"][0])
        for n in self.m:
            self.m[n][...] = arrays[f"m.{n}"]
            self.v[n][...] = arrays[f"v.{n}"]
