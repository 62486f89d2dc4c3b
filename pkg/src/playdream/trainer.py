"""Two-phase training: world model on play streams, then the agent inside it.

Every step draws a fresh RNG from (seed, phase tag, step), so a run's sampling
path is a pure function of (config, seed) and resuming from a checkpoint
replays the remaining steps bit-for-bit. Checkpoints carry model arrays,
optimizer moments, and the full config echo.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import checkpoint as ck
from . import config as C
from . import data as D
from .agent import VARIANTS, Agent
from .optim import Adam
from .worldmodel import WorldModel

TAG_COLLECT = 0xC0
TAG_WM_INIT = 0x10
TAG_WM_STEP = 0x11
TAG_AG_INIT = 0x20
TAG_AG_STEP = 0x21

_SEED_SPACING = 100_003  # keeps derived stream seeds from colliding across runs


class MetricsLog:
    """Append-only long-format CSV: step,phase,metric,value."""

    HEADER = "step,phase,metric,value\n"

    def __init__(self, path):
        self.path = Path(path)
        self._last = {}
        if self.path.exists():
            for step, phase, _, _ in self.read(self.path):
                self._last[phase] = max(self._last.get(phase, 0), step)
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(self.HEADER)
        self._fh = open(self.path, "a")

    def log(self, phase: str, step: int, metrics: dict):
        if step <= self._last.get(phase, 0):
            raise ValueError(f"step {step} not increasing for phase {phase!r}")
        self._last[phase] = step
        for key in sorted(metrics):
            self._fh.write(f"{step},{phase},{key},{float(metrics[key])!r}\n")
        self._fh.flush()

    def truncate(self, phase: str, step: int):
        """Drop rows of `phase` past `step` (crash recovery on resume)."""
        self._fh.close()
        rows = [r for r in self.read(self.path) if r[1] != phase or r[0] <= step]
        with open(self.path, "w") as fh:
            fh.write(self.HEADER)
            for s, p, k, v in rows:
                fh.write(f"{s},{p},{k},{v!r}\n")
        self._last[phase] = step
        self._fh = open(self.path, "a")

    def close(self):
        self._fh.close()

    @staticmethod
    def read(path) -> list:
        rows = []
        with open(path) as fh:
            header = fh.readline()
            if header != MetricsLog.HEADER:
                raise ValueError(f"unrecognized metrics file {path}")
            for line in fh:
                step, phase, key, val = line.rstrip("\n").split(",")
                rows.append((int(step), phase, key, float(val)))
        return rows


# -- data collection ---------------------------------------------------------


def stream_seed(base_seed: int, index: int) -> int:
    return base_seed * _SEED_SPACING + index


def collect_data(cfg: C.RunConfig) -> tuple:
    """Record play streams plus a held-out stream, and annotate a fraction.

    Returns (streams, annotations); everything lands under out_dir so the
    training phases can run in separate processes.
    """
    out = Path(cfg.out_dir)
    store = D.StreamStore(out / "data")
    streams = []
    for i in range(cfg.collect_streams):
        s = D.collect_stream(
            f"play{i:03d}", stream_seed(cfg.seed, i), cfg.collect_steps,
            static_size=cfg.env_static_size, ego_size=cfg.env_ego_size,
            action_dim=cfg.env_action_dim, noise=cfg.collect_noise)
        store.add(s)
        streams.append(s)
    hold_store = D.StreamStore(out / "holdout")
    hold_store.add(D.collect_stream(
        "holdout000", stream_seed(cfg.seed, cfg.collect_streams),
        cfg.holdout_steps, static_size=cfg.env_static_size,
        ego_size=cfg.env_ego_size, action_dim=cfg.env_action_dim,
        noise=cfg.collect_noise))
    annotations = D.annotate(streams, cfg.annotate_fraction, cfg.seed,
                             cfg.agent_window_min, cfg.agent_window_max)
    D.save_annotations(out / "data" / "annotations.jsonl", annotations)
    return streams, annotations


def load_training_data(cfg: C.RunConfig) -> tuple:
    out = Path(cfg.out_dir)
    store = D.StreamStore(out / "data")
    streams = store.load_all()
    if not streams:
        raise FileNotFoundError(f"no play streams under {store.root}; collect first")
    ann_path = out / "data" / "annotations.jsonl"
    annotations = D.load_annotations(ann_path) if ann_path.exists() else []
    return streams, annotations


# -- world model phase -------------------------------------------------------


def save_wm_checkpoint(path, cfg: C.RunConfig, step: int, wm: WorldModel, opt: Adam):
    arrays = dict(wm.export_arrays())
    arrays.update({f"opt.{k}": v for k, v in opt.state_arrays().items()})
    ck.save(path, {"phase": "wm", "step": step, "config": cfg.to_dict()}, arrays)


def load_world_model(path) -> tuple:
    """Rebuild a world model from its checkpoint; returns (cfg, model, meta)."""
    meta, arrays = ck.load(path)
    if meta.get("phase") != "wm":
        raise ck.CheckpointError(f"{path} is not a world-model checkpoint")
    cfg = C.from_dict(meta["config"])
    wm = WorldModel(cfg, np.random.default_rng(0))
    wm.load_arrays(arrays)
    return cfg, wm, meta


def train_world_model(cfg: C.RunConfig, streams: list | None = None,
                      resume_from=None) -> Path:
    if streams is None:
        streams, _ = load_training_data(cfg)
    wm_dir = Path(cfg.out_dir) / "wm"
    wm_dir.mkdir(parents=True, exist_ok=True)
    wm = WorldModel(cfg, np.random.default_rng((cfg.seed, TAG_WM_INIT)))
    opt = Adam(wm.named_params(), cfg.wm_lr, eps=cfg.wm_adam_eps,
               weight_decay=cfg.wm_weight_decay, clip_norm=cfg.wm_clip)
    start = 0
    if resume_from is not None:
        meta, arrays = ck.load(resume_from)
        if meta.get("phase") != "wm":
            raise ck.CheckpointError("resume checkpoint is not a world-model one")
        wm.load_arrays(arrays)
        opt.load_state({k[4:]: v for k, v in arrays.items() if k.startswith("opt.")})
        start = int(meta["step"])
    log = MetricsLog(wm_dir / "metrics.csv")
    log.truncate("wm", start)
    final = wm_dir / "wm.ckpt"
    for step in range(start + 1, cfg.wm_steps + 1):
        srng = np.random.default_rng((cfg.seed, TAG_WM_STEP, step))
        batch = D.sample_wm_sequences(streams, cfg.wm_batch, cfg.wm_seq_len,
                                      cfg.wm_zeta, srng)
        wm.zero_grad()
        loss, metrics, _ = wm.elbo_loss(batch, srng)
        loss.backward()
        metrics["grad_norm"] = opt.step()
        if step % cfg.log_every == 0 or step == cfg.wm_steps:
            log.log("wm", step, metrics)
        if cfg.ckpt_every and step % cfg.ckpt_every == 0 and step < cfg.wm_steps:
            save_wm_checkpoint(wm_dir / f"wm_{step:06d}.ckpt", cfg, step, wm, opt)
    save_wm_checkpoint(final, cfg, max(start, cfg.wm_steps), wm, opt)
    log.close()
    return final


# -- agent phase -------------------------------------------------------------


def save_agent_checkpoint(path, cfg: C.RunConfig, variant: str, step: int,
                          critic_updates: int, ag: Agent,
                          opt_actor: Adam, opt_critic: Adam):
    arrays = dict(ag.export_arrays())  # includes log_tau (a plain Tensor attr)
    arrays.update(ag.target_arrays())
    arrays.update({f"opta.{k}": v for k, v in opt_actor.state_arrays().items()})
    arrays.update({f"optc.{k}": v for k, v in opt_critic.state_arrays().items()})
    meta = {"phase": "agent", "variant": variant, "step": step,
            "critic_updates": critic_updates, "config": cfg.to_dict()}
    ck.save(path, meta, arrays)


def load_agent(path) -> tuple:
    """Rebuild an agent from its checkpoint; returns (cfg, agent, meta)."""
    meta, arrays = ck.load(path)
    if meta.get("phase") != "agent":
        raise ck.CheckpointError(f"{path} is not an agent checkpoint")
    cfg = C.from_dict(meta["config"])
    ag = Agent(cfg, np.random.default_rng(0), variant=meta["variant"])
    ag.load_arrays(arrays)
    ag.load_target_arrays(arrays)
    return cfg, ag, meta


def _check_wm_compat(cfg: C.RunConfig, wm_cfg: C.RunConfig):
    same = (cfg.latent_dim == wm_cfg.latent_dim
            and cfg.env_action_dim == wm_cfg.env_action_dim
            and cfg.env_static_size == wm_cfg.env_static_size
            and cfg.env_ego_size == wm_cfg.env_ego_size)
    if not same:
        raise ck.CheckpointError(
            f"world-model checkpoint is incompatible: latent {wm_cfg.latent_dim} "
            f"vs {cfg.latent_dim}, action {wm_cfg.env_action_dim} vs "
            f"{cfg.env_action_dim}")


def train_agent(cfg: C.RunConfig, variant: str = "full", wm_ckpt=None,
                streams: list | None = None, annotations: list | None = None,
                resume_from=None) -> Path:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if streams is None:
        streams, annotations = load_training_data(cfg)
    annotations = annotations or []
    if wm_ckpt is None:
        wm_ckpt = Path(cfg.out_dir) / "wm" / "wm.ckpt"
    wm_cfg, wm, _ = load_world_model(wm_ckpt)
    _check_wm_compat(cfg, wm_cfg)
    wm.set_requires_grad(False)

    run_dir = Path(cfg.out_dir) / f"agent_{variant}"
    run_dir.mkdir(parents=True, exist_ok=True)
    ag = Agent(cfg, np.random.default_rng((cfg.seed, TAG_AG_INIT)), variant=variant)
    opt_actor = Adam(ag.actor_side_params(), cfg.agent_actor_lr,
                     eps=cfg.agent_adam_eps, clip_norm=cfg.agent_clip)
    opt_critic = Adam(ag.critic_params(), cfg.agent_critic_lr,
                      eps=cfg.agent_adam_eps, clip_norm=cfg.agent_clip)
    start = 0
    critic_updates = 0
    if resume_from is not None:
        meta, arrays = ck.load(resume_from)
        if meta.get("phase") != "agent" or meta.get("variant") != variant:
            raise ck.CheckpointError("resume checkpoint does not match this phase")
        ag.load_arrays(arrays)
        ag.load_target_arrays(arrays)
        opt_actor.load_state({k[5:]: v for k, v in arrays.items() if k.startswith("opta.")})
        opt_critic.load_state({k[5:]: v for k, v in arrays.items() if k.startswith("optc.")})
        start = int(meta["step"])
        critic_updates = int(meta["critic_updates"])

    log = MetricsLog(run_dir / "metrics.csv")
    log.truncate("agent", start)
    final = run_dir / "agent.ckpt"
    wm_before = {n: a.copy() for n, a in wm.export_arrays().items()}
    for step in range(start + 1, cfg.agent_steps + 1):
        srng = np.random.default_rng((cfg.seed, TAG_AG_STEP, step))
        batch = D.sample_agent_windows(streams, annotations, cfg.agent_batch,
                                       cfg.lang_ratio, srng,
                                       cfg.agent_window_min, cfg.agent_window_max)
        ag.zero_grad()
        loss, cache, metrics = ag.rollout_and_losses(wm, batch, srng)
        loss.backward()
        metrics["actor_grad_norm"] = opt_actor.step()
        if cache is not None:
            ag.zero_grad()
            closs = ag.critic_loss(cache)
            closs.backward()
            metrics["critic_loss"] = closs.item()
            metrics["critic_grad_norm"] = opt_critic.step()
            critic_updates += 1
            if critic_updates % cfg.agent_target_interval == 0:
                ag.sync_target()
        if step % cfg.log_every == 0 or step == cfg.agent_steps:
            log.log("agent", step, metrics)
        if cfg.ckpt_every and step % cfg.ckpt_every == 0 and step < cfg.agent_steps:
            save_agent_checkpoint(run_dir / f"agent_{step:06d}.ckpt", cfg, variant,
                                  step, critic_updates, ag, opt_actor, opt_critic)
    for name, arr in wm.export_arrays().items():
        if not np.array_equal(arr, wm_before[name]):  # pragma: no cover
            raise RuntimeError(f"frozen world-model parameter {name!r} changed")
    save_agent_checkpoint(final, cfg, variant, max(start, cfg.agent_steps),
                          critic_updates, ag, opt_actor, opt_critic)
    log.close()
    return final


def ablation_run(variant: str, cfg: C.RunConfig, **kwargs) -> Path:
    """train_agent under an ablated objective; see VARIANTS for the names."""
    if variant not in ("no_intrinsic", "no_plan", "no_alignment"):
        raise ValueError(f"unknown ablation variant {variant!r}")
    return train_agent(cfg, variant=variant, **kwargs)
