from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..tsenv import ActionMask, Observation
from .networks import ACTION_SHAPE

__all__ = ["BufferUnderflow", "EpisodeRecord", "ReplayBuffer", "encode_observation"]


class BufferUnderflow(RuntimeError):
    pass


def encode_observation(obs: Observation, mask: ActionMask, signal_clip: float = 10.0):
    """Arrays fed to the networks: context, normalised signals, image and action footprint."""
    sig = np.clip(obs.signals, -signal_clip, signal_clip)
    return (np.asarray(obs.context, dtype=np.float64), sig, np.asarray(obs.image),
            mask.footprint.astype(np.float64))


@dataclass
class EpisodeRecord:
    """One transition plus bookkeeping for logs."""

    obs: Observation
    mask: ActionMask
    action: np.ndarray
    reward: float
    next_obs: Observation
    next_mask: ActionMask
    episode: int = 0
    env: int = 0
    step: int = 0
    info: dict = field(default_factory=dict)


class ReplayBuffer:
    """Fixed-capacity ring buffer of encoded transitions."""

    def __init__(self, capacity: int, n_window: int, n_context: int = 3, n_signals: int = 4):
        self.capacity = int(capacity)
        self.size = 0
        self.head = 0
        f = np.float32
        self.ctx = np.zeros((capacity, n_context), f)
        self.sig = np.zeros((capacity, n_window, n_signals), f)
        self.img = np.zeros((capacity, *ACTION_SHAPE), f)
        self.fp = np.zeros((capacity, *ACTION_SHAPE), f)
        self.act = np.zeros((capacity, *ACTION_SHAPE), f)
        self.rew = np.zeros(capacity, f)
        self.ctx2 = np.zeros_like(self.ctx)
        self.sig2 = np.zeros_like(self.sig)
        self.img2 = np.zeros_like(self.img)
        self.fp2 = np.zeros_like(self.fp)

    def __len__(self):
        return self.size

    def add(self, enc, action, reward: float, enc_next) -> None:
        i = self.head
        self.ctx[i], self.sig[i], self.img[i], self.fp[i] = enc
        self.ctx2[i], self.sig2[i], self.img2[i], self.fp2[i] = enc_next
        self.act[i] = action
        self.rew[i] = reward
        self.head = (self.head + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def add_record(self, rec: EpisodeRecord, signal_clip: float = 10.0) -> None:
        self.add(encode_observation(rec.obs, rec.mask, signal_clip), rec.action, rec.reward,
                 encode_observation(rec.next_obs, rec.next_mask, signal_clip))

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict:
        if self.size < batch_size or self.size == 0:
            raise BufferUnderflow(f"buffer holds {self.size} transitions, batch needs {batch_size}")
        idx = rng.choice(self.size, size=batch_size, replace=False)
        return {"ctx": self.ctx[idx], "sig": self.sig[idx], "img": self.img[idx],
                "fp": self.fp[idx], "act": self.act[idx], "rew": self.rew[idx],
                "ctx2": self.ctx2[idx], "sig2": self.sig2[idx], "img2": self.img2[idx],
                "fp2": self.fp2[idx]}
