"""Run configuration: flat key=value files over two presets (desk, paper).

Unknown keys are rejected loudly. The only environment override honored is
PLAYDREAM_OUT_DIR, which replaces out_dir (handy on shared machines); every
other setting must be explicit in the file or CLI so runs stay reproducible.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

ENV_OUT_DIR = "PLAYDREAM_OUT_DIR"


@dataclass
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    out_dir: str = "runs/dev"

    # environment / rendering
    env_static_size: int = 16
    env_ego_size: int = 8
    env_action_dim: int = 3

    # play collection
    collect_steps: int = 5000
    collect_streams: int = 3
    collect_noise: float = 0.3
    holdout_steps: int = 600

    # annotation
    annotate_fraction: float = 0.01
    lang_ratio: float = 0.5

    # world model
    wm_h_dim: int = 128
    wm_z_groups: int = 8
    wm_z_classes: int = 8
    wm_embed_dim: int = 128
    wm_gru_in: int = 128
    wm_head_hidden: int = 128
    wm_enc_static: tuple = (8, 16, 16)
    wm_enc_ego: tuple = (8, 16, 32)
    wm_dec_static: tuple = (16, 16, 8)
    wm_dec_ego: tuple = (32, 16, 8)
    wm_batch: int = 16
    wm_seq_len: int = 16
    wm_lr: float = 3e-4
    wm_beta: float = 0.3
    wm_delta: float = 0.8
    wm_zeta: float = 0.01
    wm_clip: float = 100.0
    wm_weight_decay: float = 0.05
    wm_adam_eps: float = 1e-5
    wm_steps: int = 2000

    # agent
    agent_batch: int = 8
    agent_window_min: int = 20
    agent_window_max: int = 32
    agent_d: int = 32
    agent_g: int = 16
    agent_plan_groups: int = 4
    agent_plan_classes: int = 4
    agent_percept_hidden: int = 256
    agent_goal_hidden: int = 256
    agent_lang_embed: int = 32
    agent_tf_blocks: int = 2
    agent_tf_heads: int = 8
    agent_tf_ff: int = 256
    agent_proposal_hidden: int = 256
    agent_proposal_layers: int = 4
    agent_actor_layers: int = 8
    agent_actor_width: int = 64
    agent_critic_layers: int = 8
    agent_critic_width: int = 256
    agent_alpha_kl: float = 0.1
    agent_alpha_align: float = 3.0
    agent_delta: float = 0.8
    agent_gamma: float = 0.995
    agent_lambda: float = 0.95
    agent_actor_lr: float = 2e-4
    agent_critic_lr: float = 3e-4
    agent_target_interval: int = 100
    agent_clip: float = 100.0
    agent_adam_eps: float = 1e-5
    agent_steps: int = 2000

    # evaluation
    eval_chains: int = 100
    eval_chain_len: int = 5
    eval_budget: int = 64
    eval_openloop_context: int = 5
    eval_openloop_horizon: int = 64
    eval_openloop_clips: int = 5

    # bookkeeping
    log_every: int = 25
    ckpt_every: int = 1000

    def __post_init__(self):
        override = os.environ.get(ENV_OUT_DIR)
        if override:
            self.out_dir = override

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out

    @property
    def latent_dim(self) -> int:
        """Flattened model-state size k = |h| + |z|."""
        return self.wm_h_dim + self.wm_z_groups * self.wm_z_classes


# Paper-resolution overrides, kept constructible but not exercised at desk scale.
PAPER_OVERRIDES = {
    "preset": "paper",
    "env_static_size": 64,
    "env_ego_size": 64,
    "env_action_dim": 7,
    "wm_h_dim": 1024,
    "wm_z_groups": 32,
    "wm_z_classes": 32,
    "wm_embed_dim": 1024,
    "wm_gru_in": 1024,
    "wm_head_hidden": 1024,
    "wm_enc_static": (32, 64, 128, 256),
    "wm_enc_ego": (32, 64, 128, 256),
    "wm_dec_static": (256, 128, 64, 32),
    "wm_dec_ego": (256, 128, 64, 32),
    "wm_batch": 50,
    "wm_seq_len": 50,
    "wm_steps": 200_000,
    "agent_batch": 512,
    "agent_d": 128,
    "agent_g": 32,
    "agent_plan_groups": 32,
    "agent_plan_classes": 32,
    "agent_percept_hidden": 1024,
    "agent_goal_hidden": 1024,
    "agent_lang_embed": 128,
    "agent_tf_ff": 2048,
    "agent_proposal_hidden": 2048,
    "agent_actor_width": 256,
    "agent_critic_width": 1024,
    "agent_steps": 100_000,
    "eval_openloop_horizon": 200,
}

_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


class ConfigError(ValueError):
    pass


def make_config(preset: str = "desk", **overrides) -> RunConfig:
    if preset not in ("desk", "paper"):
        raise ConfigError(f"unknown preset {preset!r}")
    base = {} if preset == "desk" else dict(PAPER_OVERRIDES)
    base.update(overrides)
    for k in base:
        if k not in _FIELDS:
            raise ConfigError(f"unknown config key {k!r}")
    return RunConfig(**base)


def _coerce(key: str, raw: str):
    f = _FIELDS[key]
    raw = raw.strip()
    if f.type in ("int", int):
        return int(raw)
    if f.type in ("float", float):
        return float(raw)
    if f.type in ("tuple", tuple):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return raw


def parse_kv_text(text: str) -> dict:
    """key=value lines; '#' comments and blank lines ignored."""
    out = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {ln}: unknown config key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def from_file(path, **cli_overrides) -> RunConfig:
    kv = parse_kv_text(Path(path).read_text())
    preset = kv.pop("preset", "desk")
    kv.update({k: v for k, v in cli_overrides.items() if v is not None})
    return make_config(preset, **kv)


def from_dict(d: dict) -> RunConfig:
    """Rebuild from a checkpoint's config echo."""
    kv = {}
    for k, v in d.items():
        if k not in _FIELDS:
            raise ConfigError(f"unknown config key {k!r} in checkpoint meta")
        kv[k] = tuple(v) if isinstance(v, list) else v
    preset = kv.pop("preset", "desk")
    cfg = make_config("desk", **kv)  # echo already contains all preset values
    cfg.preset = preset
    return cfg
