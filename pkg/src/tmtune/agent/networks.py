"""Encoder, masked decoder (actor head) and Q-networks."""
from __future__ import annotations

import math

import numpy as np

from .. import nncore as nn
from ..nncore import Tensor
from .config import AgentConfig

__all__ = ["Encoder", "Actor", "QNetwork", "ACTION_SHAPE", "squashed_gaussian"]

ACTION_SHAPE = (2, 8, 8)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class Encoder(nn.Module):
    """Context MLP, signal LSTM and parameter CNN; outputs the latent vector."""

    def __init__(self, cfg: AgentConfig, rng: np.random.Generator, n_context: int = 3,
                 n_signals: int = 4):
        self.context = nn.MLP((n_context, *cfg.context_hidden, cfg.z_context), rng,
                              dropout=cfg.dropout, final_activation=True)
        self.lstm = nn.LSTM(n_signals, cfg.lstm_hidden, cfg.lstm_layers, rng)
        ch, ks = cfg.encoder_channels, cfg.encoder_kernels
        self.convs = [nn.Conv2d(a, b, k, rng) for a, b, k in zip(ch[:-1], ch[1:], ks)]
        self.dim = cfg.z_context + cfg.lstm_hidden + ch[-1]

    def forward(self, ctx: Tensor, sig: Tensor, img: Tensor) -> Tensor:
        z_c = self.context(ctx)
        z_s = self.lstm(sig)
        x = img
        for conv in self.convs:
            x = nn.relu(conv(x))
        z_p = x.reshape(x.shape[0], -1)
        return nn.concat([z_c, z_s, z_p], axis=1)


class Actor(nn.Module):
    """Decoder from the latent vector to per-entry mean and log-std over the 2x8x8 action."""

    def __init__(self, cfg: AgentConfig, latent: int, rng: np.random.Generator):
        ch, k = cfg.decoder_channels, cfg.decoder_kernel
        self.c0 = ch[0]
        self.proj = nn.Linear(latent, ch[0], rng)
        self.convs = [nn.Conv2d(ch[0], ch[1], k, rng, "same"),
                      nn.Conv2d(ch[1], ch[2], k, rng, "same")]
        self.mu_head = nn.Conv2d(ch[2], ch[3], k, rng, "same")
        self.log_std_head = nn.Conv2d(ch[2], ch[3], k, rng, "same")
        # near-zero heads: start from a spatially flat, zero-mean policy
        for head in (self.mu_head, self.log_std_head):
            head.w.data = head.w.data * cfg.head_init_scale
            head.b.data = head.b.data * cfg.head_init_scale

    def forward(self, z: Tensor):
        x = nn.relu(self.proj(z)).reshape(z.shape[0], self.c0, 1, 1)
        for conv in self.convs:
            x = nn.relu(conv(nn.upsample_nearest2x(x)))
        x = nn.upsample_nearest2x(x)
        return self.mu_head(x), self.log_std_head(x)


class QNetwork(nn.Module):
    def __init__(self, cfg: AgentConfig, latent: int, rng: np.random.Generator):
        n_act = int(np.prod(ACTION_SHAPE))
        self.mlp = nn.MLP((latent + n_act, *cfg.critic_hidden, 1), rng, dropout=cfg.dropout,
                          layer_norm=True)

    def forward(self, z: Tensor, a: Tensor) -> Tensor:
        x = nn.concat([z, a.reshape(a.shape[0], -1)], axis=1)
        return self.mlp(x).reshape(-1)


def squashed_gaussian(mu: Tensor, log_std: Tensor, footprint: np.ndarray, noise: np.ndarray | None,
                      log_std_min: float = -20.0, log_std_max: float = 2.0):
    """Masked tanh-Gaussian sample and its log-density.

    Entries outside ``footprint`` get mean 0 and log-std ``log_std_min`` and the
    sampled value there is set to exactly 0; the log-density sums over the
    remaining entries only. ``noise=None`` returns the deterministic action
    ``tanh(mu)`` and a zero log-density.
    """
    m = Tensor(footprint, dtype=mu.data.dtype)
    mu_m = mu * m
    if noise is None:
        return nn.tanh(mu_m) * m, None
    log_std_c = nn.clip(log_std, log_std_min, log_std_max)
    ls = log_std_c * m + (1.0 - m) * log_std_min
    eps = Tensor(noise, dtype=mu.data.dtype)
    u = mu_m + nn.exp(ls) * eps
    a = nn.tanh(u) * m
    # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
    log_jac = (math.log(2.0) - u - nn.softplus(u * -2.0)) * 2.0
    logp_entry = eps * eps * -0.5 - ls - _HALF_LOG_2PI - log_jac
    logp = (logp_entry * m).reshape(mu.shape[0], -1).sum(axis=1)
    return a, logp
