"""Recurrent state-space world model with discrete latents.

State is (h, z): h carried by a GRU fed the previous state and action, z a
straight-through categorical sampled from the posterior (given h and the
fused camera/proprio embedding) during filtering or from the prior (given h
alone) during imagination. The decoder reconstructs both camera views from
the concatenated state; the loss is squared-error reconstruction plus a
balanced KL between posterior and prior.
"""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .config import RunConfig
from .tensor import Tensor


class WorldModel(nn.Module):
    def __init__(self, cfg: RunConfig, rng):
        c = cfg
        self.cfg = cfg
        self.G, self.C = c.wm_z_groups, c.wm_z_classes
        self.z_dim = self.G * self.C
        self.h_dim = c.wm_h_dim
        self.k = self.h_dim + self.z_dim

        self.enc_static = nn.ConvEncoder(c.env_static_size, c.wm_enc_static, rng)
        self.enc_ego = nn.ConvEncoder(c.env_ego_size, c.wm_enc_ego, rng)
        fused_in = self.enc_static.out_dim + self.enc_ego.out_dim + 3
        self.fuse = nn.Linear(fused_in, c.wm_embed_dim, rng)
        self.gru_in = nn.Linear(self.z_dim + c.env_action_dim, c.wm_gru_in, rng)
        self.gru = nn.GRUCell(c.wm_gru_in, self.h_dim, rng)
        self.post_head = nn.MLP([self.h_dim + c.wm_embed_dim, c.wm_head_hidden, self.z_dim], rng)
        self.prior_head = nn.MLP([self.h_dim, c.wm_head_hidden, self.z_dim], rng)
        self.dec_static = nn.ConvDecoder(self.k, c.env_static_size, c.wm_dec_static, rng)
        self.dec_ego = nn.ConvDecoder(self.k, c.env_ego_size, c.wm_dec_ego, rng)

    # -- pieces --------------------------------------------------------------

    def embed(self, static: Tensor, ego: Tensor, proprio: Tensor) -> Tensor:
        """Fuse per-view conv encodings and proprio into one embedding [N, E]."""
        feats = T.concat([self.enc_static(static), self.enc_ego(ego), proprio], axis=1)
        return T.relu(self.fuse(feats))

    def dynamics(self, h: Tensor, z: Tensor, action: Tensor) -> Tensor:
        """h_t from (h_{t-1}, z_{t-1}, a_{t-1}); never sees the observation."""
        x = T.relu(self.gru_in(T.concat([z, action], axis=1)))
        return self.gru(x, h)

    def prior_logits(self, h: Tensor) -> Tensor:
        return self.prior_head(h).reshape((h.shape[0], self.G, self.C))

    def posterior_logits(self, h: Tensor, embed: Tensor) -> Tensor:
        out = self.post_head(T.concat([h, embed], axis=1))
        return out.reshape((h.shape[0], self.G, self.C))

    def state_vector(self, h: Tensor, z: Tensor) -> Tensor:
        return T.concat([h, z], axis=1)

    def decode(self, state: Tensor):
        return self.dec_static(state), self.dec_ego(state)

    def embed_batch(self, batch: dict) -> Tensor:
        """Embed a [B,L,...] window batch; returns [B,L,E]."""
        static, ego = batch["static"], batch["ego"]
        B, L = static.shape[:2]
        flat = self.embed(
            Tensor(static.reshape((B * L,) + static.shape[2:])),
            Tensor(ego.reshape((B * L,) + ego.shape[2:])),
            Tensor(batch["proprio"].reshape(B * L, -1)),
        )
        return flat.reshape((B, L, flat.shape[-1]))

    # -- filtering -----------------------------------------------------------

    def observe_sequence(self, batch: dict, rng, relaxed: bool = False) -> dict:
        """Posterior-filter a [B,L] window; returns per-step tensor lists.

        Hidden state starts at zeros; a reset flag at step t zeroes the carried
        state and the incoming action. Keys: h, z (post samples), post, prior
        (logits [B,G,C] each), each a list of length L; h_all [L,B,H] and
        prior_all [L,B,G,C] carry the same values stacked.
        """
        B, L = batch["static"].shape[:2]
        embeds = self.embed_batch(batch)
        dt = embeds.data.dtype
        resets = batch.get("resets")
        h = Tensor(np.zeros((B, self.h_dim), dtype=dt))
        z = Tensor(np.zeros((B, self.z_dim), dtype=dt))
        out = {"h": [], "z": [], "post": []}
        for t in range(L):
            prev_a = Tensor(batch["prev_actions"][:, t].astype(dt))
            if resets is not None and resets[:, t].any():
                keep = Tensor((1.0 - resets[:, t])[:, None].astype(dt))
                h, z, prev_a = h * keep, z * keep, prev_a * keep
            h = self.dynamics(h, z, prev_a)
            post = self.posterior_logits(h, embeds[:, t])
            z = nn.st_categorical_sample(post, rng, relaxed=relaxed).reshape((B, self.z_dim))
            out["h"].append(h)
            out["z"].append(z)
            out["post"].append(post)
        # the prior head only reads h, so it can run once over the whole window
        h_all = T.stack(out["h"], axis=0)
        prior_all = self.prior_head(h_all.reshape((L * B, self.h_dim)))
        out["prior_all"] = prior_all.reshape((L, B, self.G, self.C))
        out["prior"] = [out["prior_all"][t] for t in range(L)]
        out["h_all"] = h_all
        return out

    def filter_step(self, h: Tensor, z: Tensor, prev_action: np.ndarray, obs, rng):
        """Single online filtering step (used by the closed-loop evaluator)."""
        u = rng.random((1, self.G))
        return self.filter_batch(h, z, prev_action[None], obs.static[None],
                                 obs.ego[None], obs.proprio[None], u)

    def filter_batch(self, h: Tensor, z: Tensor, prev_actions, static, ego,
                     proprio, uniforms):
        """Batched filtering over [B, ...] observation arrays.

        `uniforms` [B, G] are the categorical draws, passed in so callers that
        interleave rows from independent episodes keep per-episode streams.
        """
        dt = h.data.dtype
        embed = self.embed(Tensor(static), Tensor(ego), Tensor(proprio.astype(dt)))
        h = self.dynamics(h, z, Tensor(prev_actions.astype(dt)))
        post = self.posterior_logits(h, embed)
        z = nn.st_onehot_from_uniforms(post, uniforms).reshape((h.shape[0], self.z_dim))
        return h, z

    def initial_state(self, batch: int = 1, dtype=np.float32):
        return (Tensor(np.zeros((batch, self.h_dim), dtype=dtype)),
                Tensor(np.zeros((batch, self.z_dim), dtype=dtype)))

    # -- training loss -------------------------------------------------------

    def elbo_loss(self, batch: dict, rng, relaxed: bool = False):
        """Reconstruction NLL (both views) + beta * balanced KL.

        Sums over time and pixels/groups, averages over batch. Returns
        (loss, metrics, filtered) where filtered is the observe_sequence output.
        """
        c = self.cfg
        B, L = batch["static"].shape[:2]
        seq = self.observe_sequence(batch, rng, relaxed=relaxed)
        # stack time-major then flatten: decoder runs once over all L*B states
        z_all = T.stack(seq["z"], axis=0)    # [L, B, Z]
        flat = T.concat([seq["h_all"].reshape((L * B, self.h_dim)),
                         z_all.reshape((L * B, self.z_dim))], axis=1)
        rec_static, rec_ego = self.decode(flat)

        target_s = Tensor(np.ascontiguousarray(
            batch["static"].transpose(1, 0, 2, 3, 4).reshape((L * B,) + rec_static.shape[1:])))
        target_e = Tensor(np.ascontiguousarray(
            batch["ego"].transpose(1, 0, 2, 3, 4).reshape((L * B,) + rec_ego.shape[1:])))

        ds = rec_static - target_s
        de = rec_ego - target_e
        recon = 0.5 * ((ds * ds).sum() + (de * de).sum()) / float(B)

        post_all = T.stack(seq["post"], axis=0).reshape((L * B, self.G, self.C))
        prior_all = seq["prior_all"].reshape((L * B, self.G, self.C))
        kl = nn.balanced_kl(post_all, prior_all, c.wm_delta).reshape((L, B)).sum(axis=0).mean()

        loss = recon + c.wm_beta * kl
        T.assert_finite(loss, "world-model loss")
        px = batch["static"].size / B + batch["ego"].size / B
        metrics = {
            "recon": float(recon.item()),
            "recon_px": float(recon.item() / px * 2.0),  # mean squared error per pixel
            "kl": float(kl.item() / L),
            "loss": float(loss.item()),
        }
        return loss, metrics, seq

    # -- imagination ---------------------------------------------------------

    def imagine(self, h: Tensor, z: Tensor, policy, horizon: int, rng,
                relaxed: bool = False):
        """Roll the prior forward under `policy(state) -> action Tensor`.

        Returns (states, actions): states[i] is the [B,k] state after i steps
        (states[0] is the start), actions[i] the action taken from states[i].
        Gradients flow through the whole unroll; freeze the model to train
        only the policy.
        """
        states = [self.state_vector(h, z)]
        actions = []
        B = h.shape[0]
        for _ in range(horizon):
            a = policy(states[-1])
            h = self.dynamics(h, z, a)
            logits = self.prior_logits(h)
            z = nn.st_categorical_sample(logits, rng, relaxed=relaxed).reshape((B, self.z_dim))
            states.append(self.state_vector(h, z))
            actions.append(a)
        return states, actions

    # -- open-loop evaluation ------------------------------------------------

    def openloop_predict(self, clip: dict, context: int, rng):
        """Filter `context` steps, then predict with the prior and recorded
        actions only. Returns decoded (static, ego) numpy frames for all steps.
        """
        B, L = clip["static"].shape[:2]
        if context >= L:
            raise ValueError("context must be shorter than the clip")
        ctx = {k: v[:, :context] for k, v in clip.items() if k != "resets"}
        ctx["resets"] = np.zeros((B, context), dtype=np.float32)
        seq = self.observe_sequence(ctx, rng)
        h, z = seq["h"][-1], seq["z"][-1]
        states = [self.state_vector(seq["h"][t], seq["z"][t]) for t in range(context)]
        for t in range(context, L):
            prev_a = Tensor(clip["prev_actions"][:, t].astype(h.data.dtype))
            h = self.dynamics(h, z, prev_a)
            logits = self.prior_logits(h)
            z = nn.st_categorical_sample(logits, rng).reshape((B, self.z_dim))
            states.append(self.state_vector(h, z))
        flat = T.concat(states, axis=0)  # [L*B, k] time-major
        rec_s, rec_e = self.decode(flat)
        H = self.cfg.env_static_size
        h_e = self.cfg.env_ego_size
        rs = rec_s.data.reshape(L, B, H, H, 3).transpose(1, 0, 2, 3, 4)
        re = rec_e.data.reshape(L, B, h_e, h_e, 3).transpose(1, 0, 2, 3, 4)
        return rs, re
