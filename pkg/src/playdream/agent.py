"""Goal-conditioned actor-critic trained entirely inside the frozen world model.

A window of demonstrator experience is posterior-filtered into expert latents;
the policy re-dreams the same window from its first state and is rewarded for
keeping its imagined latents close to the expert's (cosine-like latent match).
Goals are either the window's final latent (hindsight) or an annotated
instruction; a discrete plan variable (CVAE over the window) absorbs the
many-ways-to-do-it ambiguity, and a contrastive term aligns language and
latent goal embeddings in one space.

Variants: "full", "no_intrinsic" (behavior cloning on expert latents),
"no_plan" (no plan variable or KL), "no_alignment" (contrastive off).
"""

from __future__ import annotations

import math

import numpy as np

from . import env as E
from . import nn
from . import tensor as T
from .config import RunConfig
from .tensor import Tensor
from .worldmodel import WorldModel

VARIANTS = ("full", "no_intrinsic", "no_plan", "no_alignment")


# -- reward ------------------------------------------------------------------


def intrinsic_reward(expert: Tensor, policy: Tensor) -> Tensor:
    """Latent-matching reward over the last axis: <e,s> / max(|e|,|s|)^2.

    Bounded to [-1, 1] by Cauchy-Schwarz; equals 1 iff the vectors coincide
    (and are nonzero); defined as 0 when both are zero. max of the squared
    norms avoids a sqrt so r(a,a) == 1.0 and r(a,2a) == 0.5 hold exactly.
    """
    expert, policy = T._ensure(expert), T._ensure(policy)
    dot = (expert * policy).sum(axis=-1)
    denom = T.maximum((expert * expert).sum(axis=-1),
                      (policy * policy).sum(axis=-1))
    safe = denom + Tensor((denom.data == 0.0).astype(denom.data.dtype))
    return dot / safe


# -- lambda returns ----------------------------------------------------------


def lambda_targets(rewards, values, gamma: float, lam: float):
    """V-lambda targets for t = 1..H-1 given r_{1..H} and v_{1..H}.

    Recursion V_t = r_t + gamma * ((1-lam) * v_{t+1} + lam * V_{t+1}) with
    boundary V_H = v_H. rewards[0] is r_1; r_H and v_1 are never read.
    Inputs are lists of [B] tensors (or scalars); output matches.
    """
    H = len(rewards)
    if len(values) != H:
        raise ValueError("rewards and values must have equal length")
    if H < 2:
        raise ValueError("need a horizon of at least 2 to form targets")
    out = [None] * (H - 1)
    v_next = values[H - 1]  # V_H = v_H
    for t in range(H - 1, 0, -1):  # t is 1-indexed time; list index t-1
        v_next = rewards[t - 1] + gamma * ((1.0 - lam) * values[t] + lam * v_next)
        out[t - 1] = v_next
    return out


def lambda_targets_masked(rewards, values, gamma: float, lam: float, horizons):
    """Per-element-horizon variant: element b bootstraps at its own H_b.

    rewards/values: lists of [B] tensors for t = 1..H_max. horizons: int [B]
    with 2 <= H_b <= H_max. Returns (targets, valid): targets a list of [B]
    tensors for t = 1..H_max-1, valid a float [B, H_max-1] mask that is 1
    exactly where t <= H_b - 1 (positions past an element's horizon are zero).
    """
    H = len(rewards)
    if H < 2:
        raise ValueError("need a horizon of at least 2 to form targets")
    B = horizons.shape[0]
    dt = values[0].data.dtype
    t_grid = np.arange(1, H + 1)
    is_last = (t_grid[None, :] == horizons[:, None]).astype(dt)  # [B,H]
    inner = (t_grid[None, :] < horizons[:, None]).astype(dt)
    out = [None] * (H - 1)
    v_next = Tensor(np.zeros(B, dtype=dt))
    for t in range(H, 0, -1):
        last_t = Tensor(is_last[:, t - 1])
        v_t1 = values[t] if t < H else Tensor(np.zeros(B, dtype=dt))
        vb_t1 = v_next  # V_{t+1} from the previous iteration (garbage where invalid)
        v_next = last_t * values[t - 1] + Tensor(inner[:, t - 1]) * (
            rewards[t - 1] + gamma * ((1.0 - lam) * v_t1 + lam * vb_t1))
        if t - 1 < H - 1:
            out[t - 1] = v_next
    valid = (t_grid[None, : H - 1] <= (horizons[:, None] - 1)).astype(np.float32)
    return out, valid


def _lambda_targets_fused(r2d: Tensor, v2d: Tensor, gamma: float,
                          lam: float, horizons):
    """One-node `lambda_targets_masked` for stacked [H, B] reward/value tensors.

    The recursion is linear in both inputs, so its backward is a single
    forward sweep of the adjoint; the bootstrap values keep their gradient
    path (the value net reads imagined states, so the actor feels it).
    Forward arithmetic mirrors the list-based recursion op-for-op.
    """
    H, B = r2d.shape
    if H < 2:
        raise ValueError("need a horizon of at least 2 to form targets")
    values = v2d.data
    dt = values.dtype
    t_grid = np.arange(1, H + 1)
    is_last = (t_grid[None, :] == horizons[:, None]).astype(dt)  # [B,H]
    inner = (t_grid[None, :] < horizons[:, None]).astype(dt)
    r = r2d.data
    out = np.empty((H - 1, B), dtype=r.dtype)
    v_next = np.zeros(B, dtype=dt)
    for t in range(H, 0, -1):
        v_t1 = values[t] if t < H else np.zeros(B, dtype=dt)
        v_next = is_last[:, t - 1] * values[t - 1] + inner[:, t - 1] * (
            r[t - 1] + gamma * ((1.0 - lam) * v_t1 + lam * v_next))
        if t - 1 < H - 1:
            out[t - 1] = v_next

    def bwd(g, grads):
        gr = np.empty((H, B), dtype=g.dtype)
        gv = np.zeros((H, B), dtype=g.dtype)
        carry = np.zeros(B, dtype=g.dtype)
        for t in range(1, H + 1):
            a = carry + g[t - 1] if t <= H - 1 else carry
            gv[t - 1] += a * is_last[:, t - 1]
            m = a * inner[:, t - 1]
            gr[t - 1] = m
            mg = m * gamma
            if t < H:
                gv[t] += mg * (1.0 - lam)
            carry = mg * lam
        T._accum(grads, r2d, gr)
        T._accum(grads, v2d, gv)

    valid = (t_grid[None, : H - 1] <= (horizons[:, None] - 1)).astype(np.float32)
    return T._from_op(out, (r2d, v2d), bwd), valid


# -- contrastive alignment ---------------------------------------------------


def contrastive_alignment(x: Tensor, y: Tensor, log_tau: Tensor) -> Tensor:
    """Symmetric InfoNCE over row-aligned pairs; logits are cosine * exp(tau)."""
    M = x.shape[0]
    if M == 0:
        return Tensor(np.zeros(()))
    xn = x / ((x * x).sum(axis=-1, keepdims=True) + 1e-12) ** 0.5
    yn = y / ((y * y).sum(axis=-1, keepdims=True) + 1e-12) ** 0.5
    logits = (xn @ yn.transpose()) * T.exp(log_tau)
    eye = Tensor(np.eye(M, dtype=logits.data.dtype))
    row_ce = -(T.log_softmax(logits, axis=1) * eye).sum(axis=1).mean()
    col_ce = -(T.log_softmax(logits, axis=0) * eye).sum(axis=0).mean()
    return 0.5 * (row_ce + col_ce)


# -- agent -------------------------------------------------------------------


class Agent(nn.Module):
    def __init__(self, cfg: RunConfig, rng, variant: str = "full",
                 vocab_size: int = len(E.VOCAB)):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        c = cfg
        self.cfg = cfg
        self.variant = variant
        k = cfg.latent_dim
        d, g = c.agent_d, c.agent_g
        self.plan_dim = 0 if variant == "no_plan" else c.agent_plan_groups * c.agent_plan_classes

        self.percept = nn.MLP([k, c.agent_percept_hidden, d], rng)
        self.goal_latent = nn.MLP([k, c.agent_goal_hidden, g], rng)
        self.lang_embed = nn.Embedding(vocab_size, c.agent_lang_embed, rng)
        self.lang_mlp = nn.MLP([c.agent_lang_embed, c.agent_goal_hidden, g], rng)
        if self.plan_dim:
            self.plan_rec_tf = nn.TransformerEncoder(
                d, c.agent_tf_heads, c.agent_tf_ff, c.agent_tf_blocks,
                max_len=c.agent_window_max, rng=rng)
            self.plan_rec_out = nn.Linear(d, self.plan_dim, rng)
            prop_dims = [d + g] + [c.agent_proposal_hidden] * c.agent_proposal_layers + [self.plan_dim]
            self.plan_prop = nn.MLP(prop_dims, rng)
        actor_in = d + g + self.plan_dim
        actor_dims = [actor_in] + [c.agent_actor_width] * c.agent_actor_layers + [2 * c.env_action_dim]
        self.actor = nn.MLP(actor_dims, rng, out_scale=0.01)
        critic_dims = [k + g] + [c.agent_critic_width] * c.agent_critic_layers + [1]
        self.critic = nn.MLP(critic_dims, rng)
        self.log_tau = Tensor(np.float32(math.log(1.0 / 0.07)), requires_grad=True)

        self._critic_target = nn.MLP(critic_dims, np.random.default_rng(0))
        self.sync_target()

    # -- parameter groups ---------------------------------------------------

    def actor_side_params(self):
        return [(n, p) for n, p in self.named_params() if not n.startswith("critic.")]

    def critic_params(self):
        return [(n, p) for n, p in self.named_params() if n.startswith("critic.")]

    def sync_target(self):
        """Target critic becomes an exact copy of the online critic."""
        self._critic_target.load_arrays(self.critic.export_arrays())
        self._critic_target.set_requires_grad(False)

    def target_arrays(self) -> dict:
        return self._critic_target.export_arrays("target.")

    def load_target_arrays(self, arrays: dict):
        self._critic_target.load_arrays(arrays, "target.")
        self._critic_target.set_requires_grad(False)

    # -- encoders ------------------------------------------------------------

    def lang_goal(self, tokens: np.ndarray) -> Tensor:
        """[B, MAX_TOKENS] int tokens -> [B, g]; mean over non-pad embeddings."""
        emb = self.lang_embed(tokens)  # [B, L, E]
        mask = (tokens != 0).astype(np.float32)
        pooled = nn.masked_mean(emb, mask)
        return self.lang_mlp(pooled)

    def goal_embedding(self, batch: dict, expert_final: np.ndarray) -> Tensor:
        """Mix hindsight-latent and language goals per the is_lang flags."""
        g_lat = self.goal_latent(Tensor(expert_final))
        if not batch["is_lang"].any():
            return g_lat
        g_lang = self.lang_goal(batch["tokens"])
        m = Tensor(batch["is_lang"].astype(np.float32)[:, None])
        return g_lang * m + g_lat * (1.0 - m)

    def plan_posterior(self, feats: Tensor, mask: np.ndarray) -> Tensor:
        """Recognition logits from the whole expert-feature window [B,T,d]."""
        enc = self.plan_rec_tf(feats, mask)
        pooled = nn.masked_mean(enc, mask)
        B = pooled.shape[0]
        return self.plan_rec_out(pooled).reshape((B, self.cfg.agent_plan_groups,
                                                  self.cfg.agent_plan_classes))

    def plan_prior(self, feat0: Tensor, goal: Tensor) -> Tensor:
        B = feat0.shape[0]
        return self.plan_prop(T.concat([feat0, goal], axis=1)).reshape(
            (B, self.cfg.agent_plan_groups, self.cfg.agent_plan_classes))

    def policy_head(self, feat: Tensor, goal: Tensor, plan: Tensor | None):
        parts = [feat, goal] + ([plan] if self.plan_dim else [])
        out = self.actor(T.concat(parts, axis=1))
        A = self.cfg.env_action_dim
        return out[:, :A], out[:, A:]  # mean, raw log_std

    def value(self, states: Tensor, goal: Tensor, target: bool = False) -> Tensor:
        net = self._critic_target if target else self.critic
        return net(T.concat([states, goal], axis=1)).reshape((states.shape[0],))

    # -- losses --------------------------------------------------------------

    def rollout_and_losses(self, wm: WorldModel, batch: dict, rng,
                           relaxed: bool = False):
        """Build the actor loss graph for one window batch.

        Returns (actor_loss, critic_cache, metrics). critic_cache carries the
        detached states/goals/targets the critic update needs, or None for the
        behavior-cloning variant.
        """
        c = self.cfg
        B, L = batch["mask"].shape
        lengths = batch["lengths"]
        with T.no_grad():  # frozen model; only the filtered values are kept
            seq = wm.observe_sequence(batch, rng, relaxed=relaxed)
        e_states = np.stack(
            [np.concatenate([seq["h"][t].data, seq["z"][t].data], axis=1) for t in range(L)],
            axis=1)  # [B, L, k]
        dt = e_states.dtype
        k = e_states.shape[-1]

        feats_e = self.percept(Tensor(e_states.reshape(B * L, k))).reshape((B, L, c.agent_d))
        e_final = e_states[np.arange(B), lengths - 1]
        goal = self.goal_embedding(batch, e_final)

        plan = None
        plan_kl = Tensor(np.zeros((), dtype=dt))
        if self.plan_dim:
            post = self.plan_posterior(feats_e, batch["mask"])
            prior = self.plan_prior(feats_e[:, 0], goal)
            plan_kl = nn.balanced_kl(post, prior, c.agent_delta).mean()
            plan = nn.st_categorical_sample(post, rng, relaxed=relaxed).reshape((B, self.plan_dim))

        align = Tensor(np.zeros((), dtype=dt))
        n_pairs = int(batch["is_lang"].sum())
        if self.variant != "no_alignment" and n_pairs > 0:
            idx = np.where(batch["is_lang"])[0]
            x = self.goal_latent(Tensor(e_final[idx]))
            y = T.gather_rows(self.lang_goal(batch["tokens"]), idx)
            align = contrastive_alignment(x, y, self.log_tau)

        metrics = {"plan_kl": float(plan_kl.item()), "align": float(align.item()),
                   "lang_frac": float(batch["is_lang"].mean())}

        if self.variant == "no_intrinsic":
            # behavior cloning on expert features; no imagination, no critic
            feats_tm = feats_e.transpose((1, 0, 2)).reshape((L * B, c.agent_d))
            mean, _ = self.policy_head(feats_tm, _tile(goal, L), _tile(plan, L))
            pred = T.tanh(mean).reshape((L, B, c.env_action_dim))
            err = pred - Tensor(batch["actions"].transpose(1, 0, 2).astype(dt))
            bc = ((err * err).sum(axis=-1) * Tensor(batch["mask"].T)).sum(axis=0).mean()
            loss = bc + c.agent_alpha_kl * plan_kl + c.agent_alpha_align * align
            metrics.update({"bc": float(bc.item()), "actor_loss": float(loss.item())})
            return loss, None, metrics

        # imagined rollout from the window's first expert state
        H = int(lengths.max()) - 1
        h = Tensor(np.ascontiguousarray(seq["h"][0].data))
        z = Tensor(np.ascontiguousarray(seq["z"][0].data))
        noises = rng.normal(size=(H, B, c.env_action_dim))
        step = [0]

        def policy(state):
            feat = self.percept(state)
            mean, log_std = self.policy_head(feat, goal, plan)
            a = nn.tanh_gaussian_action(mean, log_std, noises[step[0]].astype(dt))
            step[0] += 1
            return a

        states, _ = wm.imagine(h, z, policy, H, rng, relaxed=relaxed)  # states[0..H]

        all_states = T.concat(states[1:], axis=0)  # [H*B, k] time-major
        e_flat = np.ascontiguousarray(
            e_states[:, 1 : H + 1].transpose(1, 0, 2).reshape(H * B, k))
        r2d = intrinsic_reward(Tensor(e_flat), all_states).reshape((H, B))
        goal_rep = _tile(goal, H)
        v2d = self.value(all_states, goal_rep, target=True).reshape((H, B))

        t2d, valid = _lambda_targets_fused(r2d, v2d, c.agent_gamma,
                                           c.agent_lambda, lengths - 1)
        vmask = Tensor(valid.T.astype(dt))  # [H-1, B]
        value_term = -(t2d * vmask).sum(axis=0).mean()
        loss = value_term + c.agent_alpha_kl * plan_kl + c.agent_alpha_align * align

        r_mask = batch["mask"][:, 1 : H + 1]
        r_mean = float((r2d.data.T * r_mask).sum() / max(r_mask.sum(), 1.0))
        metrics.update({"reward": r_mean, "value": float(-value_term.item()),
                        "actor_loss": float(loss.item())})
        cache = {
            "states": all_states.data.reshape(H, B, k)[: H - 1].reshape((H - 1) * B, k).copy(),
            "goal": goal_rep.data[: (H - 1) * B].copy(),
            "targets": t2d.data.copy(),  # [H-1, B]
            "valid": valid.T.copy(),     # [H-1, B]
        }
        return loss, cache, metrics

    def critic_loss(self, cache: dict) -> Tensor:
        """Regress the online critic onto detached lambda targets."""
        v = self.value(Tensor(cache["states"]), Tensor(cache["goal"]))
        n = cache["targets"].shape[1]  # batch size
        err = v.reshape(cache["targets"].shape) - Tensor(cache["targets"])
        per_t = 0.5 * err * err * Tensor(cache["valid"])
        return per_t.sum() / float(n)

    # -- evaluation-time acting ---------------------------------------------

    def propose_plan(self, state_vec: Tensor, goal: Tensor, rng) -> Tensor | None:
        if not self.plan_dim:
            return None
        feat = self.percept(state_vec)
        logits = self.plan_prior(feat, goal)
        return nn.st_categorical_sample(logits, rng).reshape((1, self.plan_dim))

    def act(self, state_vec: Tensor, goal: Tensor, plan: Tensor | None) -> np.ndarray:
        feat = self.percept(state_vec)
        mean, _ = self.policy_head(feat, goal, plan)
        return np.tanh(mean.data[0])


def _tile(x: Tensor | None, reps: int) -> Tensor | None:
    """Stack reps copies of [B, d] along the batch axis -> [reps*B, d]."""
    if x is None:
        return None
    return T.concat([x] * reps, axis=0)
