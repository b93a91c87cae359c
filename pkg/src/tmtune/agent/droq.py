"""Masked soft actor-critic with dropout Q-networks and several critic updates per step."""
from __future__ import annotations

import numpy as np

from .. import nncore as nn
from ..nncore import Tensor
from .config import AgentConfig
from .networks import Actor, Encoder, QNetwork, squashed_gaussian
from .replay import BufferUnderflow

__all__ = ["DroQAgent"]


def _batch_tensors(ctx, sig, img):
    return Tensor(ctx), Tensor(sig), Tensor(img)


class DroQAgent:
    """Shared encoder trained through the critic loss; the actor sees a detached latent.

    Target copies exist for the encoder and both Q-networks and only ever move by
    Polyak averaging.
    """

    def __init__(self, cfg: AgentConfig = AgentConfig(), n_window: int = 128):
        self.cfg = cfg
        self.n_window = int(n_window)
        init = np.random.default_rng([cfg.seed, 0])
        # every stochastic component gets its own stream
        self.rng_noise = np.random.default_rng([cfg.seed, 1])
        self.rng_batch = np.random.default_rng([cfg.seed, 2])
        self.rng_act = np.random.default_rng([cfg.seed, 3])
        drop = np.random.default_rng([cfg.seed, 4])
        drop_t = np.random.default_rng([cfg.seed, 5])

        self.encoder = Encoder(cfg, init)
        self.actor = Actor(cfg, self.encoder.dim, init)
        self.q = [QNetwork(cfg, self.encoder.dim, init) for _ in range(2)]
        self.encoder_t = Encoder(cfg, init)
        self.q_t = [QNetwork(cfg, self.encoder.dim, init) for _ in range(2)]
        for src, dst in zip([self.encoder, *self.q], [self.encoder_t, *self.q_t]):
            dst.load_state_dict(src.state_dict())
            for p in dst.parameters():
                p.requires_grad = False
        for net in (self.encoder, *self.q):
            _set_dropout_rng(net, drop)
        for net in (self.encoder_t, *self.q_t):
            _set_dropout_rng(net, drop_t)
        self.log_alpha = Tensor(np.log([cfg.init_alpha]), requires_grad=True)

        self.critic_params = self.encoder.parameters() + [p for q in self.q for p in q.parameters()]
        self.critic_opt = nn.Adam(self.critic_params, lr=cfg.lr)
        self.actor_opt = nn.Adam(self.actor.parameters(), lr=cfg.actor_lr or cfg.lr)
        self.alpha_opt = nn.Adam([self.log_alpha], lr=cfg.lr)
        self.n_critic_updates = 0
        self.n_actor_updates = 0

    # ------------------------------------------------------------------ acting
    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.data[0]))

    def _policy(self, z: Tensor, fp: np.ndarray, stochastic: bool, rng=None):
        mu, log_std = self.actor(z)
        noise = None
        if stochastic:
            noise = (rng or self.rng_noise).standard_normal(mu.shape)
        return squashed_gaussian(mu, log_std, fp, noise, self.cfg.log_std_min, self.cfg.log_std_max)

    def act(self, ctx, sig, img, fp, stochastic: bool = True, rng=None) -> np.ndarray:
        """Actions for a batch of encoded observations; entries outside ``fp`` are exactly 0."""
        single = np.ndim(ctx) == 1
        if single:
            ctx, sig, img, fp = ctx[None], sig[None], img[None], fp[None]
        self.encoder.eval()
        self.actor.eval()
        with nn.no_grad():
            z = self.encoder(*_batch_tensors(ctx, sig, img))
            a, _ = self._policy(z, fp, stochastic, rng or self.rng_act)
        self.encoder.train()
        self.actor.train()
        out = a.data.astype(np.float64)
        out[np.asarray(fp) == 0] = 0.0
        return out[0] if single else out

    def act_on(self, encoded, stochastic: bool = True) -> np.ndarray:
        ctx, sig, img, fp = (np.stack(x) for x in zip(*encoded))
        return self.act(ctx, sig, img, fp, stochastic)

    # ---------------------------------------------------------------- updates
    def target_entropy(self, fp: np.ndarray) -> np.ndarray:
        n_active = fp.reshape(fp.shape[0], -1).sum(axis=1)
        return -self.cfg.target_entropy_scale * n_active

    def critic_update(self, batch: dict) -> float:
        cfg = self.cfg
        if batch is None or len(batch["rew"]) < 1:
            raise BufferUnderflow("empty batch")
        with nn.no_grad():
            z2 = self.encoder(*_batch_tensors(batch["ctx2"], batch["sig2"], batch["img2"]))
            a2, logp2 = self._policy(z2, batch["fp2"], True)
            z2_t = self.encoder_t(*_batch_tensors(batch["ctx2"], batch["sig2"], batch["img2"]))
            q_next = nn.minimum(self.q_t[0](z2_t, a2), self.q_t[1](z2_t, a2)).data
            y = cfg.reward_scale * batch["rew"] + cfg.gamma * (q_next - self.alpha * logp2.data)
        y = Tensor(y)
        z = self.encoder(*_batch_tensors(batch["ctx"], batch["sig"], batch["img"]))
        a = Tensor(batch["act"])
        loss = ((self.q[0](z, a) - y) ** 2).mean() + ((self.q[1](z, a) - y) ** 2).mean()
        self.critic_opt.zero_grad()
        loss.backward()
        self.critic_opt.step()
        self._polyak()
        self.n_critic_updates += 1
        return 0.5 * loss.item()

    def actor_update(self, batch: dict):
        """Returns ``(actor loss, alpha loss, mean log-density)``."""
        if batch is None or len(batch["rew"]) < 1:
            raise BufferUnderflow("empty batch")
        with nn.no_grad():
            z = self.encoder(*_batch_tensors(batch["ctx"], batch["sig"], batch["img"]))
        a, logp = self._policy(z, batch["fp"], True)
        q_params = [p for net in self.q for p in net.parameters()]
        for p in q_params:
            p.requires_grad = False    # gradient reaches the actor through the action only
        try:
            q = nn.minimum(self.q[0](z, a), self.q[1](z, a))
            loss = (logp * self.alpha - q).mean()
            self.actor_opt.zero_grad()
            loss.backward()
        finally:
            for p in q_params:
                p.requires_grad = True
        self.actor_opt.step()
        gap = logp.data + self.target_entropy(batch["fp"])
        alpha_loss = -float(self.log_alpha.data[0] * gap.mean())
        if self.cfg.autotune_alpha:
            self.log_alpha.grad = np.array([-gap.mean()], dtype=self.log_alpha.data.dtype)
            self.alpha_opt.step()
        self.n_actor_updates += 1
        return loss.item(), alpha_loss, float(logp.data.mean())

    def _polyak(self) -> None:
        tau = self.cfg.tau
        for src, dst in zip([self.encoder, *self.q], [self.encoder_t, *self.q_t]):
            for p, pt in zip(src.parameters(), dst.parameters()):
                pt.data = (1.0 - tau) * pt.data + tau * p.data

    def update(self, buffer) -> dict:
        """The per-environment-step update round (critic updates first, then actor)."""
        cfg = self.cfg
        out = {"critic_loss": 0.0, "actor_loss": 0.0, "alpha_loss": 0.0, "logp": 0.0}
        for _ in range(cfg.critic_updates):
            out["critic_loss"] = self.critic_update(buffer.sample(cfg.batch_size, self.rng_batch))
        for _ in range(cfg.actor_updates):
            out["actor_loss"], out["alpha_loss"], out["logp"] = self.actor_update(
                buffer.sample(cfg.batch_size, self.rng_batch))
        return out

    # ------------------------------------------------------------ persistence
    def networks(self) -> dict:
        return {"encoder": self.encoder, "actor": self.actor, "q0": self.q[0], "q1": self.q[1],
                "encoder_t": self.encoder_t, "q0_t": self.q_t[0], "q1_t": self.q_t[1]}

    def state_dict(self) -> dict:
        out = {}
        for key, net in self.networks().items():
            for name, p in net.named_parameters():
                out[f"{key}.{name}"] = p.data
        out["log_alpha"] = self.log_alpha.data
        return out

    def load_state_dict(self, state: dict) -> None:
        for key, net in self.networks().items():
            for name, p in net.named_parameters():
                p.data = np.array(state[f"{key}.{name}"], dtype=p.data.dtype)
        self.log_alpha.data = np.array(state["log_alpha"], dtype=self.log_alpha.data.dtype)


def _set_dropout_rng(net: nn.Module, rng) -> None:
    for m in net.modules():
        if isinstance(m, nn.Dropout):
            m.rng = rng

