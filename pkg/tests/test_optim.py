"""Optimizer and gradient-clipping contracts."""

import numpy as np
import pytest

from playdream.optim import Adam, clip_global_norm
from playdream.tensor import NonFiniteError, Tensor


def test_clip_empty_is_noop():
    assert clip_global_norm([], 10.0) == 0.0


def test_clip_below_threshold_unchanged(rng):
    g = rng.normal(size=(4, 3)).astype(np.float32)
    orig = g.copy()
    norm = clip_global_norm([g], 1e6)
    np.testing.assert_array_equal(g, orig)
    assert norm == pytest.approx(np.linalg.norm(orig.astype(np.float64)), rel=1e-6)


def test_clip_scales_to_max_norm(rng):
    gs = [rng.normal(size=(5,)).astype(np.float32) * 10 for _ in range(3)]
    clip_global_norm(gs, 1.0)
    total = np.sqrt(sum(np.sum(g.astype(np.float64) ** 2) for g in gs))
    assert total == pytest.approx(1.0, rel=1e-6)


def test_clip_idempotent(rng):
    gs = [rng.normal(size=(7,)).astype(np.float32) * 5 for _ in range(2)]
    clip_global_norm(gs, 2.0)
    snap = [g.copy() for g in gs]
    clip_global_norm(gs, 2.0)
    for g, s in zip(gs, snap):
        np.testing.assert_allclose(g, s, rtol=1e-6)


def test_adam_first_step_closed_form(rng):
    """t=1: m-hat = g, v-hat = g^2, so the update is exactly -lr*g/(|g|+eps)."""
    lr, eps = 1e-3, 1e-5
    p = Tensor(rng.normal(size=(20,)).astype(np.float32), requires_grad=True)
    g = rng.normal(size=(20,)).astype(np.float32)
    before = p.data.copy()
    p.grad = g.copy()
    Adam([("p", p)], lr=lr, eps=eps).step()
    want = before - lr * g / (np.abs(g) + eps)
    np.testing.assert_allclose(p.data, want, atol=1e-6)


def test_decoupled_decay_with_zero_grads(rng):
    lr, wd = 1e-3, 0.05
    p = Tensor(rng.normal(size=(8,)).astype(np.float32), requires_grad=True)
    before = p.data.copy()
    p.grad = np.zeros(8, dtype=np.float32)
    Adam([("p", p)], lr=lr, weight_decay=wd).step()
    np.testing.assert_allclose(p.data, before * (1.0 - lr * wd), rtol=1e-7)


def test_missing_grad_treated_as_zero(rng):
    p = Tensor(rng.normal(size=(4,)).astype(np.float32), requires_grad=True)
    q = Tensor(rng.normal(size=(4,)).astype(np.float32), requires_grad=True)
    before = p.data.copy()
    q.grad = np.ones(4, dtype=np.float32)
    Adam([("p", p), ("q", q)], lr=1e-2).step()
    np.testing.assert_array_equal(p.data, before)  # no grad, no decay, no move


def test_nan_grad_aborts():
    p = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    p.grad = np.array([1.0, np.nan, 0.0], dtype=np.float32)
    opt = Adam([("p", p)], lr=1e-3)
    with pytest.raises(NonFiniteError):
        opt.step()


def test_duplicate_names_rejected():
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError):
        Adam([("p", p), ("p", p)], lr=1e-3)


def _run(steps, seed, opt_state=None, start=None):
    rng = np.random.default_rng(seed)
    p = Tensor(np.ones(6, dtype=np.float32) if start is None else start.copy(),
               requires_grad=True)
    opt = Adam([("p", p)], lr=1e-2, weight_decay=0.01, clip_norm=1.0)
    if opt_state is not None:
        opt.load_state(opt_state)
    for i in range(steps):
        p.grad = rng.normal(size=6).astype(np.float32)
        opt.step()
    return p.data, opt.state_arrays()


def test_update_determinism():
    a, _ = _run(10, seed=3)
    b, _ = _run(10, seed=3)
    np.testing.assert_array_equal(a, b)


def test_state_roundtrip_resumes_exactly():
    """3 steps, snapshot, 2 more == 5 straight steps, bit for bit."""
    full, _ = _run(5, seed=7)
    part, state = _run(3, seed=7)
    # replay the remaining grads with the same rng stream
    rng = np.random.default_rng(7)
    for _ in range(3):
        rng.normal(size=6)
    p = Tensor(part.copy(), requires_grad=True)
    opt = Adam([("p", p)], lr=1e-2, weight_decay=0.01, clip_norm=1.0)
    state = {k: v.copy() for k, v in state.items()}
    opt.load_state(state)
    for _ in range(2):
        p.grad = rng.normal(size=6).astype(np.float32)
        opt.step()
    np.testing.assert_array_equal(p.data, full)
