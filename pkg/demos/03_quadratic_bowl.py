"""Sanity run of the agent on a tuning task with a known optimum.

The reward is minus the squared distance to a fixed target calibration; the
printed distance should fall to well under half its first-episode value.
Usage: python 03_quadratic_bowl.py [episodes] [seed]
"""
import sys
import time

import numpy as np

from tmtune.agent import AgentConfig, QuadraticBowlEnv, train

episodes = int(sys.argv[1]) if len(sys.argv) > 1 else 200
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0
envs = [QuadraticBowlEnv(seed=seed * 100 + i) for i in range(4)]
dist = []
t0 = time.time()


def progress(row):
    dist.append(np.mean([e.distance() for e in envs]))
    if row["episode"] % 20 == 0 or row["episode"] == episodes - 1:
        print(f"episode {row['episode']:4d}  distance {dist[-1]:.3f}  reward {row['reward_mean']:8.3f}  "
              f"alpha {row['alpha']:.1e}  {time.time() - t0:5.0f}s", flush=True)


train(envs, AgentConfig.desk(seed=seed), episodes, progress=progress)
n = max(1, episodes // 10)
print(f"final-decile distance / first-episode distance = {np.mean(dist[-n:]) / dist[0]:.2f}")
