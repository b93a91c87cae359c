"""Closed-loop response of the coolant loop under two calibrations.

Samples one drive from the bundled statistics, runs it with the low-gain
start calibration and with a hand-tuned constant PI, and prints the metrics.
"""
import numpy as np

from tmtune.controller import conservative_parameter_set, constant_parameter_set
from tmtune.evalkit import metrics_from_trajectory
from tmtune.plant import PlantParams
from tmtune.scenario import bundled_usage, fit_layer_statistics, sample_scenario
from tmtune.tsenv import compute_reward, simulate

stats = fit_layer_statistics(bundled_usage("all"))
sc = sample_scenario(stats, p_edge=0.0, rng_seed=11)
print("scenario:", {k: round(v, 2) for k, v in sc.layers.items()})

for label, ps in [("conservative", conservative_parameter_set()),
                  ("constant P=1 I=0.1", constant_parameter_set(1.0, 0.1))]:
    traj = simulate(sc, PlantParams(), ps)
    rep = metrics_from_trajectory(traj, label=label)
    r = compute_reward(traj.e_T, traj.u_vlv)
    print(f"{label:<20} MAE {rep.MAE:.3f} K  RMSE {rep.RMSE:.3f} K  "
          f"MS_udot {rep.MS_udot:.2e}  MTV {rep.MTV_y:.2e}  reward {r:.2f}")

# one trace, decimated to 10 s for the console
traj = simulate(sc, PlantParams(), conservative_parameter_set())
every = int(10 / traj.dt)
print("\n  t[s]    v[m/s]   T_D[C]   e_T[K]   u_vlv")
for k in range(0, len(traj), every):
    print(f"{traj.time[k]:6.0f} {traj.v[k]:9.2f} {traj.T_D[k]:8.2f} {traj.e_T[k]:8.3f} {traj.u_vlv[k]:7.3f}")
print("\nbank-1 share of the run:", np.mean(traj.bank == 1).round(3))
