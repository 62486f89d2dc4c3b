"""Evaluators for trained runs.

Three jobs: (1) chained-instruction rollouts in the real environment —
the agent acts closed-loop from observations through the model's posterior
filter, advancing to the next instruction only on predicate success;
(2) open-loop video-prediction fidelity against a freeze-frame baseline;
(3) comparison tables and plots across finished runs.

All chains run in lockstep on parallel environment instances. Each chain
owns an RNG stream keyed by (seed, tag, chain index), so results do not
depend on how chains are batched together.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from . import env as E
from . import nn
from . import tensor as T
from .tensor import Tensor
from .trainer import MetricsLog, _check_wm_compat, load_agent, load_world_model

TAG_ENV = 0xE0
TAG_POLICY = 0xE1
TAG_CHAIN = 0xE5
TAG_OPENLOOP = 0xE6


# -- chain construction ------------------------------------------------------


@dataclass(frozen=True)
class ChainSpec:
    """Up to five instructions plus the layout seed of the episode."""

    instructions: tuple
    env_seed: int


def _env_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence((seed, TAG_ENV, i)).generate_state(1)[0])


def sample_chains(n: int, seed: int, length: int = 5) -> list:
    """Draw instruction chains whose tasks stay satisfiable in sequence.

    Three constraints keep every position reachable for a competent policy
    regardless of the table state the previous instruction left behind:
    no immediate task repeats (a just-lifted block is already held, a
    just-moved slider is already there), no slider direction twice in a row
    without the opposite move in between, and at most one zone placement
    per chain (two would eventually strand both blocks inside the zone).
    """
    rng = np.random.default_rng((seed, TAG_CHAIN))
    chains = []
    for i in range(n):
        tasks: list[str] = []
        slider_last = None
        placed = 0
        for _ in range(length):
            cands = []
            for t in E.TASKS:
                if tasks and t == tasks[-1]:
                    continue
                if t == "place_in_zone" and placed >= 1:
                    continue
                if t in ("open_slider", "close_slider") and slider_last == t:
                    continue
                cands.append(t)
            task = str(rng.choice(cands))
            tasks.append(task)
            if task == "place_in_zone":
                placed += 1
            if task in ("open_slider", "close_slider"):
                slider_last = task
        instrs = tuple(E.sample_instruction(t, rng) for t in tasks)
        chains.append(ChainSpec(instrs, _env_seed(seed, i)))
    return chains


# -- results -----------------------------------------------------------------


@dataclass
class ChainReport:
    """Per-position success counts plus the average completed length."""

    n_chains: int
    successes: tuple  # successes[j] = chains that completed >= j+1 instructions
    avg_len: float
    lift_instructions: int = 0
    wrong_color: int = 0

    def __post_init__(self):
        for a, b in zip(self.successes, self.successes[1:]):
            if b > a:
                raise ValueError("success counts must be non-increasing")

    @property
    def rates(self) -> tuple:
        return tuple(s / self.n_chains for s in self.successes)

    @property
    def wrong_color_rate(self) -> float:
        return self.wrong_color / max(self.lift_instructions, 1)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["metric,value", f"n_chains,{self.n_chains}"]
        for j, s in enumerate(self.successes, 1):
            lines.append(f"success_{j},{s}")
        lines.append(f"avg_len,{self.avg_len!r}")
        lines.append(f"lift_instructions,{self.lift_instructions}")
        lines.append(f"wrong_color,{self.wrong_color}")
        path.write_text("\n".join(lines) + "\n")

    @staticmethod
    def load(path) -> "ChainReport":
        kv = {}
        with open(path) as fh:
            if fh.readline().strip() != "metric,value":
                raise ValueError(f"unrecognized chain report {path}")
            for line in fh:
                k, v = line.strip().split(",")
                kv[k] = v
        n_pos = sum(1 for k in kv if k.startswith("success_"))
        return ChainReport(
            n_chains=int(kv["n_chains"]),
            successes=tuple(int(kv[f"success_{j}"]) for j in range(1, n_pos + 1)),
            avg_len=float(kv["avg_len"]),
            lift_instructions=int(kv.get("lift_instructions", 0)),
            wrong_color=int(kv.get("wrong_color", 0)),
        )


# -- policies ----------------------------------------------------------------


class AgentPolicy:
    """Observation -> action adapter over a frozen model and trained agent.

    Never reads environment state: per step the observation is posterior-
    filtered into (h, z) and the actor's tanh mean is executed. Goals come
    from instruction tokens; plans are sampled from the proposal head once
    per instruction (the recognition encoder is a training-time device).
    """

    def __init__(self, wm, agent, n: int, seed: int):
        self.wm, self.agent = wm, agent
        self.rngs = [np.random.default_rng((seed, TAG_POLICY, i)) for i in range(n)]
        self.h = np.zeros((n, wm.h_dim), np.float32)
        self.z = np.zeros((n, wm.z_dim), np.float32)
        self.prev_a = np.zeros((n, agent.cfg.env_action_dim), np.float32)
        self.goals = np.zeros((n, agent.cfg.agent_g), np.float32)
        P = agent.plan_dim
        self.plans = np.zeros((n, P), np.float32) if P else None

    def begin(self, rows: list, instructions: list):
        toks = np.stack([ins.tokens for ins in instructions])
        with T.no_grad():
            self.goals[rows] = self.agent.lang_goal(toks).data
            if self.plans is not None:
                sv = Tensor(np.concatenate([self.h[rows], self.z[rows]], axis=1))
                feat = self.agent.percept(sv)
                logits = self.agent.plan_prior(feat, Tensor(self.goals[rows]))
                u = np.stack([self.rngs[i].random(logits.shape[1]) for i in rows])
                onehot = nn.st_onehot_from_uniforms(logits, u).data
                self.plans[rows] = onehot.reshape(len(rows), -1)

    def act(self, rows: list, obs_list: list) -> np.ndarray:
        static = np.stack([o.static for o in obs_list])
        ego = np.stack([o.ego for o in obs_list])
        proprio = np.stack([o.proprio for o in obs_list])
        u = np.stack([self.rngs[i].random(self.wm.G) for i in rows])
        with T.no_grad():
            h, z = self.wm.filter_batch(Tensor(self.h[rows]), Tensor(self.z[rows]),
                                        self.prev_a[rows], static, ego, proprio, u)
            self.h[rows], self.z[rows] = h.data, z.data
            feat = self.agent.percept(self.wm.state_vector(h, z))
            plan = Tensor(self.plans[rows]) if self.plans is not None else None
            mean, _ = self.agent.policy_head(feat, Tensor(self.goals[rows]), plan)
        acts = np.tanh(mean.data)
        self.prev_a[rows] = acts
        return acts


class OraclePolicy:
    """Noise-free scripted controller; upper-bound harness check only.

    Reads ground-truth state by design — the learned-policy invariant
    (observations only) applies to AgentPolicy, not to this probe.
    """

    def __init__(self, envs: list, seed: int):
        self.players = [
            E.ScriptedPlayer(env, np.random.default_rng((seed, TAG_POLICY, i)), noise=0.0)
            for i, env in enumerate(envs)
        ]

    def begin(self, rows, instructions):
        for i, ins in zip(rows, instructions):
            self.players[i].set_task(ins.task)

    def act(self, rows, obs_list):
        return np.stack([self.players[i].act() for i in rows])


class RandomPolicy:
    def __init__(self, n: int, seed: int, action_dim: int = 3):
        self.rngs = [np.random.default_rng((seed, TAG_POLICY, i)) for i in range(n)]
        self.action_dim = action_dim

    def begin(self, rows, instructions):
        pass

    def act(self, rows, obs_list):
        return np.stack([self.rngs[i].uniform(-1.0, 1.0, self.action_dim) for i in rows])


# -- chained rollouts --------------------------------------------------------


def run_chains(chains: list, budget: int, make_policy, static_size: int = 16,
               ego_size: int = 8, action_dim: int = 3) -> ChainReport:
    """Roll every chain to completion or first failure; aggregate per position.

    make_policy(envs) -> policy with begin(rows, instructions) and
    act(rows, observations). A chain advances when its current instruction's
    predicate (judged against the state at instruction start) fires, and
    stops when an instruction exhausts `budget` env steps.
    """
    n = len(chains)
    envs = [E.PlayTable(static_size, ego_size, action_dim) for _ in range(n)]
    obs = [env.reset(c.env_seed) for env, c in zip(envs, chains)]
    policy = make_policy(envs)

    idx = np.zeros(n, dtype=int)
    step_in = np.zeros(n, dtype=int)
    done = np.zeros(n, dtype=bool)
    completed = np.zeros(n, dtype=int)
    before = [env.state.copy() for env in envs]
    wrong_flag = [False] * n
    lift_n = 0
    wrong = 0

    def count_lifts(instructions):
        return sum(1 for ins in instructions if ins.task.startswith("lift_"))

    first = [c.instructions[0] for c in chains]
    lift_n += count_lifts(first)
    policy.begin(list(range(n)), first)

    while True:
        rows = [i for i in range(n) if not done[i]]
        if not rows:
            break
        acts = policy.act(rows, [obs[i] for i in rows])
        start_rows: list[int] = []
        start_instr = []
        for r, i in enumerate(rows):
            obs[i] = envs[i].step(acts[r])
            task = chains[i].instructions[idx[i]].task
            held_wrong = ((task == "lift_red" and envs[i].state.blue_held)
                          or (task == "lift_blue" and envs[i].state.red_held))
            if held_wrong and not wrong_flag[i]:
                wrong += 1
                wrong_flag[i] = True
            step_in[i] += 1
            if E.evaluate_success(task, before[i], envs[i].state):
                completed[i] += 1
                idx[i] += 1
                step_in[i] = 0
                if idx[i] >= len(chains[i].instructions):
                    done[i] = True
                else:
                    before[i] = envs[i].state.copy()
                    wrong_flag[i] = False
                    start_rows.append(i)
                    start_instr.append(chains[i].instructions[idx[i]])
            elif step_in[i] >= budget:
                done[i] = True
        if start_rows:
            lift_n += count_lifts(start_instr)
            policy.begin(start_rows, start_instr)

    length = max(len(c.instructions) for c in chains)
    successes = tuple(int((completed >= j + 1).sum()) for j in range(length))
    return ChainReport(n_chains=n, successes=successes,
                       avg_len=float(completed.mean()),
                       lift_instructions=lift_n, wrong_color=wrong)


def eval_chains(agent_ckpt, wm_ckpt, n_chains: int = 100, seed: int = 0,
                out_csv=None) -> ChainReport:
    """Load checkpoints, run the chain protocol, optionally persist the report."""
    wm_cfg, wm, _ = load_world_model(wm_ckpt)
    cfg, agent, _ = load_agent(agent_ckpt)
    _check_wm_compat(cfg, wm_cfg)
    wm.set_requires_grad(False)
    agent.set_requires_grad(False)
    chains = sample_chains(n_chains, seed, cfg.eval_chain_len)
    report = run_chains(
        chains, cfg.eval_budget,
        lambda envs: AgentPolicy(wm, agent, len(envs), seed),
        cfg.env_static_size, cfg.env_ego_size, cfg.env_action_dim)
    if out_csv is not None:
        report.save(out_csv)
    return report


# -- open-loop fidelity ------------------------------------------------------


def _clips_from_stream(stream, n_clips: int, length: int) -> dict:
    if stream.length < length:
        raise ValueError(
            f"stream too short: {stream.length} steps < {length} needed")
    span = stream.length - length
    starts = [0] if n_clips == 1 else [round(i * span / (n_clips - 1)) for i in range(n_clips)]
    pa = stream.prev_actions()
    return {
        "static": np.stack([stream.static[s:s + length] for s in starts]),
        "ego": np.stack([stream.ego[s:s + length] for s in starts]),
        "proprio": np.stack([stream.proprio[s:s + length] for s in starts]),
        "prev_actions": np.stack([pa[s:s + length] for s in starts]),
    }


def _decode_context(wm, clip: dict, rng):
    """Posterior-filter and reconstruct a clip (the horizon-0 degenerate case)."""
    B, L = clip["static"].shape[:2]
    ctx = dict(clip)
    ctx["resets"] = np.zeros((B, L), dtype=np.float32)
    seq = wm.observe_sequence(ctx, rng)
    states = [wm.state_vector(seq["h"][t], seq["z"][t]) for t in range(L)]
    rec_s, rec_e = wm.decode(T.concat(states, axis=0))
    H, h_e = wm.cfg.env_static_size, wm.cfg.env_ego_size
    rs = rec_s.data.reshape(L, B, H, H, 3).transpose(1, 0, 2, 3, 4)
    re = rec_e.data.reshape(L, B, h_e, h_e, 3).transpose(1, 0, 2, 3, 4)
    return rs, re


def eval_openloop(wm, stream, horizon: int, context: int = 5, n_clips: int = 5,
                  seed: int = 0, out_dir=None) -> dict:
    """Context-primed rollout accuracy vs. repeating the last context frame.

    Returns per-step MSE columns for both views alongside the freeze-frame
    baseline, plus aggregates over the prediction span. With out_dir set,
    writes openloop.csv and a truth/prediction strip image per view.
    """
    clip = _clips_from_stream(stream, n_clips, context + horizon)
    rng = np.random.default_rng((seed, TAG_OPENLOOP))
    with T.no_grad():
        if horizon > 0:
            rs, re = wm.openloop_predict(clip, context, rng)
        else:
            rs, re = _decode_context(wm, clip, rng)

    def per_step(pred, truth):
        return ((pred - truth) ** 2).mean(axis=(0, 2, 3, 4))

    base_s = clip["static"][:, context - 1 : context]
    base_e = clip["ego"][:, context - 1 : context]
    rows = {
        "static_mse": per_step(rs, clip["static"]),
        "ego_mse": per_step(re, clip["ego"]),
        "baseline_static": per_step(base_s, clip["static"]),
        "baseline_ego": per_step(base_e, clip["ego"]),
    }
    report = {"context": context, "horizon": horizon, "n_clips": n_clips,
              "steps": rows}
    if horizon > 0:
        report["pred_mse"] = float(rows["static_mse"][context:].mean()
                                   + rows["ego_mse"][context:].mean())
        report["baseline_mse"] = float(rows["baseline_static"][context:].mean()
                                       + rows["baseline_ego"][context:].mean())
        report["ratio"] = report["pred_mse"] / report["baseline_mse"]

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        keys = ("static_mse", "ego_mse", "baseline_static", "baseline_ego")
        lines = ["step," + ",".join(keys)]
        for t in range(context + horizon):
            lines.append(f"{t + 1}," + ",".join(repr(float(rows[k][t])) for k in keys))
        (out / "openloop.csv").write_text("\n".join(lines) + "\n")
        _save_strip(out / "openloop_static.png", clip["static"], rs, context)
        _save_strip(out / "openloop_ego.png", clip["ego"], re, context)
    return report


def _save_strip(path, truth, pred, context: int, scale: int = 6, max_cols: int = 24):
    """Truth row over prediction row per clip; context columns get a dim border."""
    N, L, H, W, _ = truth.shape
    stride = max(1, -(-L // max_cols))
    cols = list(range(0, L, stride))
    gap, border = 2, 1
    tile_h, tile_w = H + 2 * border, W + 2 * border
    img = np.ones((N * (2 * tile_h + gap) - gap, len(cols) * tile_w, 3), np.float32)

    def put(r0, c0, frame, in_context):
        tile = np.full((tile_h, tile_w, 3), 0.6 if in_context else 0.1, np.float32)
        tile[border:border + H, border:border + W] = np.clip(frame, 0.0, 1.0)
        img[r0:r0 + tile_h, c0:c0 + tile_w] = tile

    for nidx in range(N):
        top = nidx * (2 * tile_h + gap)
        for ci, t in enumerate(cols):
            put(top, ci * tile_w, truth[nidx, t], t < context)
            put(top + tile_h, ci * tile_w, pred[nidx, t], t < context)
    big = img.repeat(scale, axis=0).repeat(scale, axis=1)
    Image.fromarray((big * 255).astype(np.uint8)).save(path)


# -- cross-run reporting -----------------------------------------------------


def report(run_dirs: list, out_dir) -> Path:
    """Comparison table plus success/training curves over finished run dirs.

    Each run dir must hold a chains.csv (chain evaluation) and may hold a
    metrics.csv (training log). File names in out_dir are fixed:
    report.csv, success_curves.png, training_curves.png.
    """
    if not run_dirs:
        raise ValueError("need at least one run directory")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = []
    for d in run_dirs:
        d = Path(d)
        path = d / "chains.csv"
        if not path.exists():
            raise FileNotFoundError(f"missing chain report {path}")
        runs.append((d.name, ChainReport.load(path), d / "metrics.csv"))

    n_pos = max(len(rep.successes) for _, rep, _ in runs)
    lines = ["run," + ",".join(str(j) for j in range(1, n_pos + 1))
             + ",avg_len,wrong_color_rate"]
    for name, rep, _ in runs:
        rates = ",".join(repr(float(r)) for r in rep.rates)
        lines.append(f"{name},{rates},{rep.avg_len!r},{rep.wrong_color_rate!r}")
    table = out / "report.csv"
    table.write_text("\n".join(lines) + "\n")

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, rep, _ in runs:
        ax.plot(range(1, len(rep.successes) + 1), rep.rates, marker="o", label=name)
    ax.set_xlabel("instructions in a row")
    ax.set_ylabel("success rate")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "success_curves.png", dpi=110)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, _, metrics_path in runs:
        if not metrics_path.exists():
            continue
        rows = MetricsLog.read(metrics_path)
        for key in ("reward", "bc", "loss"):  # first metric the run actually logged
            series = [(s, v) for s, p, k, v in rows if k == key]
            if series:
                ax.plot([s for s, _ in series], [v for _, v in series],
                        label=f"{name}:{key}")
                break
    ax.set_xlabel("step")
    ax.set_ylabel("training metric")
    if ax.has_data():
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "training_curves.png", dpi=110)
    plt.close(fig)
    return table
