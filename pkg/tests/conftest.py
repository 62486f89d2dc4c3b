"""Shared test helpers: finite-difference oracle and small utilities."""

import contextlib

import numpy as np
import pytest

from playdream import tensor as T


def numeric_grad(build, leaf, eps=1e-5):
    """Central finite differences of build() w.r.t. one leaf tensor's data.

    build must re-run the forward pass from the same leaf objects and return a
    scalar Tensor; leaf.data is perturbed in place (float64 recommended).
    """
    num = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    out = num.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = build().item()
        flat[i] = old - eps
        fm = build().item()
        flat[i] = old
        out[i] = (fp - fm) / (2.0 * eps)
    return num


def check_grads(build, leaves, eps=1e-5, rtol=1e-4, atol=1e-7):
    """Backprop through build() and compare each leaf grad to central FD."""
    for t in leaves:
        t.grad = None
    build().backward()
    for t in leaves:
        got = t.grad if t.grad is not None else np.zeros_like(t.data)
        want = numeric_grad(build, t, eps)
        np.testing.assert_allclose(got, want, rtol=rtol, atol=atol)


@contextlib.contextmanager
def pinned_stop_grads():
    """Freeze detached values across repeated builds of the same graph.

    Backprop treats a detached branch as a constant, but the branch's forward
    value still shifts when finite differences perturb an upstream parameter,
    so a naive probe measures a different derivative than backprop defines.
    The first build records every detached array; later builds replay them in
    call order (deterministic for a fixed build closure).
    """
    store = {"vals": [], "capturing": True, "i": 0}
    orig = T.Tensor.detach

    def detach(self):
        if store["capturing"]:
            store["vals"].append(self.data.copy())
            return T.Tensor(store["vals"][-1])
        v = store["vals"][store["i"]]
        store["i"] += 1
        return T.Tensor(v)

    T.Tensor.detach = detach
    try:
        yield store
    finally:
        T.Tensor.detach = orig


def check_grads_pinned(build, leaves, eps=1e-5, rtol=1e-4, atol=1e-7):
    """check_grads for losses containing stop-gradients."""
    with pinned_stop_grads() as store:

        def pinned():
            store["i"] = 0
            out = build()
            store["capturing"] = False
            return out

        check_grads(pinned, leaves, eps, rtol, atol)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
