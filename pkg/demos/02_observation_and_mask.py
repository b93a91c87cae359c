"""What the agent sees after one evaluation: context, parameter image, signals and the mask."""
import numpy as np

from tmtune.controller import conservative_parameter_set
from tmtune.plant import PlantParams
from tmtune.scenario import bundled_usage, fit_layer_statistics, sample_scenario
from tmtune.tsenv import apply_action, eval_scenario

np.set_printoptions(precision=3, suppress=True)
stats = fit_layer_statistics(bundled_usage("moderate"))
sc = sample_scenario(stats, p_edge=0.0, rng_seed=3)
ps = conservative_parameter_set()
res = eval_scenario(sc, PlantParams(), ps)

obs = res.observation
print("context (bank one-hot, setpoint):", obs.context)
print("P image channel (8x8, scaled by phi_max):\n", obs.image[0])
print("signal window", obs.signals.shape, "normalized ranges:",
      obs.signals.min(axis=0), obs.signals.max(axis=0))
print("reward", round(res.reward, 3), "bank", res.bank)
print("visited cells of the P table:\n", res.mask.values[0].astype(int))

# a uniform +1 action only moves the visited cells, by 0.1 phi_max
new = apply_action(ps, res.bank, np.ones((2, 8, 8)), res.mask)
print("P table after one step:\n", new.banks[res.bank][0].values)
