"""Episodic training loop with synchronised parallel environments."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..controller import ParameterSet
from ..evalkit import rolling_stats
from .config import AgentConfig
from .droq import DroQAgent
from .replay import ReplayBuffer, encode_observation

__all__ = ["TrainResult", "LOG_COLUMNS", "train", "stabilization_episode", "select_best",
           "write_log_header", "format_log_row", "read_log"]

LOG_COLUMNS = ("episode", "steps", "reward_mean", "reward_std", "reward_sum", "baseline_mean",
               "alpha", "critic_loss", "actor_loss", "alpha_loss", "logp", "failures")


@dataclass
class TrainResult:
    log: list
    agent: DroQAgent
    best: ParameterSet | None
    best_episode: int
    best_env: int
    best_reward: float
    stabilized_at: int
    final_phi: list = field(default_factory=list)   # per episode, per env


def stabilization_episode(rewards, window: int = 15, fraction: float = 0.9) -> int:
    """First episode whose trailing rolling mean has covered ``fraction`` of the
    rolling mean's total range (low to high); 0 for logs shorter than the window."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size < window:
        return 0
    rm, _ = rolling_stats(rewards, window)
    valid = rm[window - 1:]
    lo, hi = float(valid.min()), float(valid.max())
    thr = lo + fraction * (hi - lo)
    return int(np.argmax(valid >= thr - 1e-12)) + window - 1


def select_best(candidates, start_episode: int):
    """Highest accumulated-reward ``(episode, env, reward, phi)`` from ``start_episode`` on."""
    pool = [c for c in candidates if c[0] >= start_episode] or list(candidates)
    return max(pool, key=lambda c: (c[2], -c[0], -c[1]))


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_log_header(fh) -> None:
    fh.write("# format=tmtune-trainlog version=1\n")
    fh.write("\t".join(LOG_COLUMNS) + "\n")


def format_log_row(row: dict) -> str:
    return "\t".join(_fmt(row[c]) for c in LOG_COLUMNS) + "\n"


def read_log(path) -> list:
    from ..scenario import FormatError
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("# format=tmtune-trainlog version=1"):
        raise FormatError(f"{path}:1: not a tmtune-trainlog v1 file")
    if len(lines) < 2 or tuple(lines[1].split("\t")) != LOG_COLUMNS:
        raise FormatError(f"{path}:2: unexpected columns")
    rows = []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != len(LOG_COLUMNS):
            raise FormatError(f"{path}:{lineno}: expected {len(LOG_COLUMNS)} fields")
        try:
            row = {c: float(p) for c, p in zip(LOG_COLUMNS, parts)}
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric field") from None
        row["episode"] = int(row["episode"])
        row["steps"] = int(row["steps"])
        row["failures"] = int(row["failures"])
        rows.append(row)
    return rows


def train(envs, cfg: AgentConfig, n_episodes: int, log_path=None, agent: DroQAgent | None = None,
          stabilization_window: int = 15, progress=None, pool=None) -> TrainResult:
    """Run the tuning loop.

    Every episode each environment resets (new plant variant, start calibration
    and scenario batch), then all environments step in lockstep until done.
    After each vector step the agent runs its update round once the buffer
    holds ``cfg.warmup`` transitions. With an executor ``pool`` the environments
    step concurrently; every environment owns its random streams, so the log
    is the same as in the sequential case.
    """
    envs = list(envs)
    if not envs:
        raise ValueError("need at least one environment")
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    first = [env.reset(episode=0) for env in envs]
    n_window = first[0][0].signals.shape[0]
    agent = agent or DroQAgent(cfg, n_window)
    buffer = ReplayBuffer(cfg.buffer_size, n_window)
    log, candidates, finals = [], [], []
    steps = 0
    losses = {"critic_loss": math.nan, "actor_loss": math.nan, "alpha_loss": math.nan,
              "logp": math.nan}
    fh = None
    if log_path is not None:
        fh = open(log_path, "w")
        write_log_header(fh)
    try:
        for ep in range(n_episodes):
            obs = first if ep == 0 else [env.reset(episode=ep) for env in envs]
            first = None
            enc = [encode_observation(o, m, cfg.signal_clip) for o, m in obs]
            rewards = [[] for _ in envs]
            baseline = []
            failures = 0
            done = False
            while not done:
                actions = agent.act_on(enc, stochastic=True)
                done_flags = []
                if pool is None:
                    results = [env.step(a) for env, a in zip(envs, actions)]
                else:
                    results = list(pool.map(lambda ea: ea[0].step(ea[1]), zip(envs, actions)))
                for i, (o2, m2, r, d, info) in enumerate(results):
                    e2 = encode_observation(o2, m2, cfg.signal_clip)
                    buffer.add(enc[i], actions[i], r, e2)
                    enc[i] = e2
                    rewards[i].append(r)
                    failures += bool(info.get("failed", False))
                    if "baseline_reward" in info:
                        baseline.append(info["baseline_reward"])
                    done_flags.append(d)
                steps += len(envs)
                if len(buffer) >= max(cfg.warmup, cfg.batch_size):
                    losses = agent.update(buffer)
                if any(done_flags) != all(done_flags):
                    raise RuntimeError("environments must share the episode length")
                done = all(done_flags)
            per_env_mean = [float(np.mean(r)) for r in rewards]
            row = {"episode": ep, "steps": steps,
                   "reward_mean": float(np.mean(per_env_mean)),
                   "reward_std": float(np.std(per_env_mean)),
                   "reward_sum": float(np.mean([np.sum(r) for r in rewards])),
                   "baseline_mean": float(np.mean(baseline)) if baseline else math.nan,
                   "alpha": agent.alpha, "failures": failures, **losses}
            log.append(row)
            finals.append([env.phi for env in envs])
            for i, env in enumerate(envs):
                candidates.append((ep, i, float(np.sum(rewards[i])), env.phi))
            if fh is not None:
                fh.write(format_log_row(row))
                fh.flush()
            if progress is not None:
                progress(row)
    finally:
        if fh is not None:
            fh.close()
    stab = stabilization_episode([r["reward_mean"] for r in log], stabilization_window)
    ep_b, env_b, rew_b, phi_b = select_best(candidates, stab)
    return TrainResult(log, agent, phi_b, ep_b, env_b, rew_b, stab, finals)
