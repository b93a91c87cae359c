from __future__ import annotations

import numpy as np

from ..controller import ParameterSet, ParameterTable, conservative_parameter_set
from ..tsenv import (ActionMask, EvalConfig, Observation, SignalWindow, apply_action,
                     context_vector, upsample_tables)

__all__ = ["QuadraticBowlEnv", "default_bowl_target"]


def default_bowl_target(cfg: EvalConfig = EvalConfig()) -> ParameterSet:
    """Smooth interior target: 30 % to 60 % of the gain limits across each table."""
    i, j = np.meshgrid(np.arange(5), np.arange(5), indexing="ij")
    frac = 0.3 + 0.3 * (i + j) / 8.0
    bank = (ParameterTable(frac * cfg.phi_max[0]), ParameterTable(frac * cfg.phi_max[1]))
    return ParameterSet((bank, bank))


class QuadraticBowlEnv:
    """Tuning environment with a known optimum.

    The reward is minus the squared, gain-limit-normalised distance between the
    bank-0 tables and a fixed target; every cell is always unmasked.
    """

    def __init__(self, target: ParameterSet | None = None, episode_length: int = 6,
                 n_window: int = 16, seed: int = 0, init_scale=(0.75, 1.25),
                 cfg: EvalConfig = EvalConfig()):
        self.cfg = cfg
        self.target = target or default_bowl_target(cfg)
        self.episode_length = int(episode_length)
        self.n_window = int(n_window)
        self.seed = int(seed)
        self.init_scale = tuple(init_scale)
        self.episode = -1
        self.k = 0
        self.phi = None
        self.phi0 = None
        self._mask = ActionMask(0, np.ones((2, 5, 5)))

    def distance(self, ps: ParameterSet | None = None) -> float:
        ps = self.phi if ps is None else ps
        d = 0.0
        for c in range(2):
            diff = (ps.banks[0][c].values - self.target.banks[0][c].values) / self.cfg.phi_max[c]
            d += float(np.sum(diff * diff))
        return float(np.sqrt(d))

    def _obs(self):
        window = SignalWindow(np.zeros((self.n_window, 4)))
        return Observation(context_vector(0, self.cfg.T_ref_nominal),
                           upsample_tables(self.phi, 0, self.cfg.phi_max), window)

    def reset(self, episode: int | None = None):
        self.episode = self.episode + 1 if episode is None else int(episode)
        rng = np.random.default_rng([self.seed, self.episode])
        self.phi0 = conservative_parameter_set(float(rng.uniform(*self.init_scale)))
        self.phi = self.phi0
        self.k = 0
        return self._obs(), self._mask

    def step(self, action):
        if self.phi is None:
            raise RuntimeError("call reset() first")
        self.phi = apply_action(self.phi, 0, action, self._mask, self.cfg)
        self.k += 1
        d = self.distance()
        done = self.k >= self.episode_length
        return self._obs(), self._mask, -d * d, done, {"distance": d, "failed": False}
