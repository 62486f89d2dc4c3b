"""Two-phase orchestration: determinism, resume, freeze, ablation contracts.

Training here runs a heavily shrunken config (tiny nets, handfuls of steps)
so the whole file stays in seconds; the desk-scale learning results live in
the acceptance tests.
"""

import numpy as np
import pytest

from playdream import agent as A
from playdream import checkpoint as ck
from playdream import config as C
from playdream import trainer as TR

TINY = dict(
    env_static_size=8, env_ego_size=4,
    collect_streams=1, collect_steps=260, holdout_steps=60,
    annotate_fraction=1.0,
    wm_h_dim=8, wm_z_groups=2, wm_z_classes=3, wm_embed_dim=8, wm_gru_in=8,
    wm_head_hidden=8, wm_enc_static=(4,), wm_enc_ego=(4,), wm_dec_static=(4,),
    wm_dec_ego=(4,), wm_batch=2, wm_seq_len=6, wm_steps=4,
    agent_batch=2, agent_window_min=5, agent_window_max=6,
    agent_d=6, agent_g=4, agent_plan_groups=2, agent_plan_classes=2,
    agent_percept_hidden=8, agent_goal_hidden=8, agent_lang_embed=6,
    agent_tf_blocks=1, agent_tf_heads=2, agent_tf_ff=8,
    agent_proposal_hidden=8, agent_proposal_layers=2,
    agent_actor_width=8, agent_actor_layers=2,
    agent_critic_width=8, agent_critic_layers=2,
    agent_target_interval=3, agent_steps=4,
    log_every=1, ckpt_every=2,
)


def tiny_cfg(tmp_path, **over):
    return C.make_config("desk", out_dir=str(tmp_path / "run"), **{**TINY, **over})


@pytest.fixture(scope="module")
def shared(tmp_path_factory):
    """One collected dataset + trained WM reused by the cheap assertions."""
    root = tmp_path_factory.mktemp("shared")
    cfg = C.make_config("desk", out_dir=str(root), **TINY)
    streams, annotations = TR.collect_data(cfg)
    wm_ckpt = TR.train_world_model(cfg, streams)
    return cfg, streams, annotations, wm_ckpt


# -- metrics log -------------------------------------------------------------


def test_metrics_log_roundtrip(tmp_path):
    p = tmp_path / "m.csv"
    log = TR.MetricsLog(p)
    log.log("wm", 1, {"loss": 2.5, "kl": 0.5})
    log.log("wm", 2, {"loss": 2.0})
    log.close()
    rows = TR.MetricsLog.read(p)
    assert rows[0] == (1, "wm", "kl", 0.5)  # metrics within a step are name-sorted
    assert (2, "wm", "loss", 2.0) in rows


def test_metrics_log_steps_increase_per_phase(tmp_path):
    log = TR.MetricsLog(tmp_path / "m.csv")
    log.log("wm", 5, {"a": 1.0})
    with pytest.raises(ValueError):
        log.log("wm", 5, {"a": 1.0})
    log.log("agent", 1, {"a": 1.0})  # separate phase restarts the clock
    log.close()


def test_metrics_log_truncate_for_resume(tmp_path):
    p = tmp_path / "m.csv"
    log = TR.MetricsLog(p)
    for s in (1, 2, 3):
        log.log("wm", s, {"x": float(s)})
    log.close()
    log = TR.MetricsLog(p)
    log.truncate("wm", 1)
    log.log("wm", 2, {"x": 9.0})
    log.close()
    rows = TR.MetricsLog.read(p)
    assert (2, "wm", "x", 9.0) in rows and (3, "wm", "x", 3.0) not in rows


# -- world-model phase -------------------------------------------------------


def test_collect_writes_streams_and_annotations(shared):
    cfg, streams, annotations, _ = shared
    assert len(streams) == 1 and streams[0].length == 260
    loaded, ann = TR.load_training_data(cfg)
    assert len(loaded) == 1
    np.testing.assert_array_equal(loaded[0].actions, streams[0].actions)
    assert len(ann) == len(annotations)


def test_wm_budget_zero_checkpoint_equals_init(tmp_path):
    cfg = tiny_cfg(tmp_path, wm_steps=0)
    streams, _ = TR.collect_data(cfg)
    path = TR.train_world_model(cfg, streams)
    _, wm, meta = TR.load_world_model(path)
    assert meta["step"] == 0
    from playdream.worldmodel import WorldModel
    fresh = WorldModel(cfg, np.random.default_rng((cfg.seed, TR.TAG_WM_INIT)))
    loaded = wm.export_arrays()
    for name, arr in fresh.export_arrays().items():
        np.testing.assert_array_equal(arr, loaded[name])


def assert_same_arrays(p1, p2):
    """Every stored array (parameters, target nets, optimizer moments) equal."""
    a, b = ck.load(p1)[1], ck.load(p2)[1]
    assert set(a) == set(b)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k], err_msg=k)


def test_wm_rerun_bit_identical(tmp_path):
    # identical (config, seed) in the same directory: bytes must match
    cfg = tiny_cfg(tmp_path)
    streams = TR.collect_data(cfg)[0]
    p = TR.train_world_model(cfg, streams)
    first = p.read_bytes()
    first_metrics = (p.parent / "metrics.csv").read_text()
    p2 = TR.train_world_model(tiny_cfg(tmp_path), streams)
    assert p2.read_bytes() == first
    assert (p2.parent / "metrics.csv").read_text() == first_metrics


def test_wm_resume_matches_uninterrupted(tmp_path):
    cfg_a = tiny_cfg(tmp_path / "a", wm_steps=4, ckpt_every=2)
    straight = TR.train_world_model(cfg_a, TR.collect_data(cfg_a)[0])

    cfg_b = tiny_cfg(tmp_path / "b", wm_steps=2, ckpt_every=10)
    streams = TR.collect_data(cfg_b)[0]
    mid = TR.train_world_model(cfg_b, streams)
    cfg_b.wm_steps = 4
    resumed = TR.train_world_model(cfg_b, streams, resume_from=mid)
    assert_same_arrays(straight, resumed)
    assert (straight.parent / "metrics.csv").read_text() == \
        (resumed.parent / "metrics.csv").read_text()


def test_wm_resume_rejects_wrong_phase(shared, tmp_path):
    cfg, streams, annotations, wm_ckpt = shared
    agent_ckpt = TR.train_agent(
        C.from_dict(cfg.to_dict()), "full", wm_ckpt, streams, annotations)
    with pytest.raises(ck.CheckpointError):
        TR.train_world_model(cfg, streams, resume_from=agent_ckpt)


# -- agent phase -------------------------------------------------------------


def test_agent_freeze_and_determinism(shared, tmp_path):
    cfg, streams, annotations, wm_ckpt = shared
    before = {n: a.copy() for n, a in TR.load_world_model(wm_ckpt)[1].export_arrays().items()}

    c1 = C.from_dict(cfg.to_dict())
    c1.out_dir = str(tmp_path / "x")
    p1 = TR.train_agent(c1, "full", wm_ckpt, streams, annotations)
    c2 = C.from_dict(cfg.to_dict())
    c2.out_dir = str(tmp_path / "y")
    p2 = TR.train_agent(c2, "full", wm_ckpt, streams, annotations)
    assert_same_arrays(p1, p2)
    assert (p1.parent / "metrics.csv").read_text() == \
        (p2.parent / "metrics.csv").read_text()

    after = TR.load_world_model(wm_ckpt)[1].export_arrays()
    for name, arr in after.items():
        np.testing.assert_array_equal(arr, before[name])


def test_agent_resume_matches_uninterrupted(shared, tmp_path):
    cfg, streams, annotations, wm_ckpt = shared
    ca = C.from_dict(cfg.to_dict())
    ca.out_dir, ca.agent_steps, ca.ckpt_every = str(tmp_path / "a"), 4, 2
    straight = TR.train_agent(ca, "full", wm_ckpt, streams, annotations)

    cb = C.from_dict(cfg.to_dict())
    cb.out_dir, cb.agent_steps, cb.ckpt_every = str(tmp_path / "b"), 2, 10
    mid = TR.train_agent(cb, "full", wm_ckpt, streams, annotations)
    cb.agent_steps = 4
    resumed = TR.train_agent(cb, "full", wm_ckpt, streams, annotations,
                             resume_from=mid)
    assert_same_arrays(straight, resumed)
    assert (straight.parent / "metrics.csv").read_text() == \
        (resumed.parent / "metrics.csv").read_text()


def test_agent_rejects_incompatible_wm(shared, tmp_path):
    cfg, streams, annotations, wm_ckpt = shared
    bad = C.from_dict(cfg.to_dict())
    bad.out_dir = str(tmp_path)
    bad.wm_z_groups = 3
    with pytest.raises(ck.CheckpointError, match="incompatible"):
        TR.train_agent(bad, "full", wm_ckpt, streams, annotations)


def test_agent_unknown_variant(shared):
    cfg, streams, annotations, wm_ckpt = shared
    with pytest.raises(ValueError, match="variant"):
        TR.train_agent(cfg, "no_world_model", wm_ckpt, streams, annotations)
    with pytest.raises(ValueError, match="variant"):
        TR.ablation_run("full", cfg)  # full is not an ablation


# -- ablation contracts ------------------------------------------------------


def test_no_alignment_never_computes_contrastive(shared, tmp_path, monkeypatch):
    cfg, streams, annotations, wm_ckpt = shared
    calls = []
    orig = A.contrastive_alignment
    monkeypatch.setattr(A, "contrastive_alignment",
                        lambda *a, **k: calls.append(1) or orig(*a, **k))
    c = C.from_dict(cfg.to_dict())
    c.out_dir = str(tmp_path / "na")
    TR.ablation_run("no_alignment", c, wm_ckpt=wm_ckpt, streams=streams,
                    annotations=annotations)
    assert calls == []
    c.out_dir = str(tmp_path / "full")
    TR.train_agent(c, "full", wm_ckpt, streams, annotations)
    assert len(calls) > 0  # same probe sees the full variant use it


def test_no_plan_drops_plan_slot(shared, tmp_path):
    cfg, streams, annotations, wm_ckpt = shared
    c = C.from_dict(cfg.to_dict())
    c.out_dir = str(tmp_path)
    path = TR.ablation_run("no_plan", c, wm_ckpt=wm_ckpt, streams=streams,
                           annotations=annotations)
    _, ag, _ = TR.load_agent(path)
    full = A.Agent(c, np.random.default_rng(0), variant="full")
    assert ag.plan_dim == 0
    assert ag.actor.layers[0].in_dim == full.actor.layers[0].in_dim - full.plan_dim


def test_no_intrinsic_leaves_critic_at_init(shared, tmp_path):
    cfg, streams, annotations, wm_ckpt = shared
    c = C.from_dict(cfg.to_dict())
    c.out_dir = str(tmp_path)
    path = TR.ablation_run("no_intrinsic", c, wm_ckpt=wm_ckpt, streams=streams,
                           annotations=annotations)
    _, ag, meta = TR.load_agent(path)
    fresh = A.Agent(c, np.random.default_rng((c.seed, TR.TAG_AG_INIT)),
                    variant="no_intrinsic")
    got = ag.export_arrays()
    trained_something = False
    for name, arr in fresh.export_arrays().items():
        if name.startswith("critic"):
            np.testing.assert_array_equal(got[name], arr)
        elif not np.array_equal(got[name], arr):
            trained_something = True
    assert trained_something
    assert meta["critic_updates"] == 0
