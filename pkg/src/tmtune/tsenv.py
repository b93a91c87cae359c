"""Closed-loop tuning environment.

One environment step applies a masked parameter change, simulates a freshly
drawn scenario with the plant and the gain-scheduled controller, and returns
the agent observation (context, parameter image, signal window), the action
mask of the visited table cells, and the clipped dense reward.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .controller import (DT_AMB_AXIS, E_AXIS, PHI_MAX_I, PHI_MAX_P, TABLE_SHAPE, WINDUP_BOUND,
                         ParameterSet, _cell, _control_step, _lookup,
                         conservative_parameter_set)
from .plant import PlantParams, VehicleParams, _derivatives, _lag_steps
from .scenario import DEFAULT_EDGE_CASES, DriveConfig, Scenario, sample_scenario, synthesize_drive

__all__ = [
    "IMAGE_SIZE",
    "N_CHANNELS",
    "SIGNAL_NAMES",
    "EmptyTrajectory",
    "NonFiniteSignal",
    "EvalConfig",
    "Trajectory",
    "SignalWindow",
    "Observation",
    "ActionMask",
    "EvalResult",
    "upsample_tables",
    "downsample_action",
    "action_footprint",
    "build_mask",
    "apply_action",
    "compute_reward",
    "context_vector",
    "eval_scenario",
    "simulate",
    "ParameterDataset",
    "EnvConfig",
    "TuningEnv",
    "save_trajectory",
    "load_trajectory",
]

IMAGE_SIZE = 8
N_CHANNELS = 2
SIGNAL_NAMES = ("T_D", "e_T", "dT_amb", "u_vlv")
# affine normalisation (x - offset) / scale -> [-1, 1] for in-range signals:
# T_D in [-40, 120] degC, e_T in [-20, 20] K, dT_amb in [-40, 100] K, u_vlv in [0, 1]
SIGNAL_OFFSET = np.array([40.0, 0.0, 30.0, 0.5])
SIGNAL_SCALE = np.array([80.0, 20.0, 70.0, 0.5])
T_REF_OFFSET, T_REF_SCALE = 50.0, 20.0


class EmptyTrajectory(ValueError):
    pass


class NonFiniteSignal(FloatingPointError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    """Closed-loop evaluation settings, including the supervisory TM rule."""

    T_ref_nominal: float = 55.0     # degC, configuration A
    T_ref_warmup: float = 60.0      # degC, configuration B (raised)
    warmup_threshold: float = 40.0  # degC on T_U1
    T_init: float | None = None     # initial coolant temperature, default T_ref_nominal
    u_pmp: float = 0.4
    fan_on: float = 60.0            # degC on T_U1 where the fan starts
    fan_band: float = 10.0          # K to full fan
    n_window: int = 128
    b1: float = 25.0
    b2: float = 0.1
    r_min: float = -100.0
    phi_max: tuple = (PHI_MAX_P, PHI_MAX_I)
    step_fraction: float = 0.1      # max parameter change per step, fraction of phi_max
    windup_bound: float = WINDUP_BOUND

    def __post_init__(self):
        object.__setattr__(self, "phi_max", tuple(float(x) for x in self.phi_max))
        if len(self.phi_max) != 2 or min(self.phi_max) <= 0:
            raise ValueError("phi_max needs two positive limits (P, I)")
        if self.n_window < 1:
            raise ValueError("n_window must be >= 1")
        if not 0.0 <= self.u_pmp <= 1.0:
            raise ValueError("u_pmp must lie in [0, 1]")
        if self.fan_band <= 0 or self.windup_bound <= 0:
            raise ValueError("fan_band and windup_bound must be > 0")
        if self.b1 < 0 or self.b2 < 0 or not self.r_min < 0:
            raise ValueError("need b1, b2 >= 0 and r_min < 0")
        if not 0.0 < self.step_fraction <= 1.0:
            raise ValueError("step_fraction must lie in (0, 1]")
        if self.T_init is not None and not math.isfinite(self.T_init):
            raise ValueError("T_init must be finite")

    @property
    def delta_max(self) -> np.ndarray:
        return self.step_fraction * np.asarray(self.phi_max, dtype=np.float64)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["phi_max"] = list(self.phi_max)
        return d


# --------------------------------------------------------------------------
# corner-aligned bilinear resampling between the 5x5 tables and the 8x8 image

def _resample_weights(n_src: int, n_dst: int):
    x = np.arange(n_dst) * (n_src - 1) / (n_dst - 1)
    i0 = np.minimum(np.floor(x).astype(int), n_src - 2)
    w1 = x - i0
    return i0, i0 + 1, 1.0 - w1, w1


_UP = _resample_weights(TABLE_SHAPE[0], IMAGE_SIZE)
_DOWN = _resample_weights(IMAGE_SIZE, TABLE_SHAPE[0])


def _resample(x: np.ndarray, weights) -> np.ndarray:
    # separable: rows first, then columns; plain elementwise ops so that a
    # scalar loop in the same order reproduces the result bit for bit
    i0, i1, w0, w1 = weights
    rows = w0[:, None] * x[..., i0, :] + w1[:, None] * x[..., i1, :]
    return w0 * rows[..., :, i0] + w1 * rows[..., :, i1]


def upsample_tables(ps: ParameterSet, bank: int, phi_max=(PHI_MAX_P, PHI_MAX_I)) -> np.ndarray:
    """2x8x8 parameter image of the bank's (P, I) tables, scaled by ``phi_max``."""
    P, I = ps.banks[bank]
    return np.stack([_resample(P.values, _UP) / phi_max[0],
                     _resample(I.values, _UP) / phi_max[1]])


def downsample_action(delta: np.ndarray, delta_max=None) -> np.ndarray:
    """Map a 2x8x8 action back onto two 5x5 tables, scaled per channel."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (N_CHANNELS, IMAGE_SIZE, IMAGE_SIZE):
        raise ValueError(f"action must have shape (2, 8, 8), got {delta.shape}")
    if delta_max is None:
        delta_max = EvalConfig().delta_max
    out = _resample(delta, _DOWN)
    return out * np.asarray(delta_max, dtype=np.float64)[:, None, None]


def action_footprint(mask: np.ndarray) -> np.ndarray:
    """8x8 entries whose downsampled footprint touches at least one unmasked cell."""
    mask = np.asarray(mask, dtype=np.float64)
    i0, i1, w0, w1 = _DOWN
    src = np.zeros((TABLE_SHAPE[0], IMAGE_SIZE))
    src[np.arange(TABLE_SHAPE[0]), i0] += w0
    src[np.arange(TABLE_SHAPE[0]), i1] += w1
    touch = (src > 0).astype(np.float64)
    return (touch.T @ mask @ touch) > 0


@dataclass(frozen=True)
class ActionMask:
    """Visited-cell masks for the (P, I) tables of the active bank."""

    bank: int
    values: np.ndarray   # (2, 5, 5) of {0, 1}

    @property
    def footprint(self) -> np.ndarray:
        return np.stack([action_footprint(m) for m in self.values])


def _cells(axis, x):
    axis = np.asarray(axis, dtype=np.float64)
    k = np.searchsorted(axis, x, side="left") - 1
    return np.clip(k, 0, axis.size - 2)


def build_mask(e_T, dT_amb, axis_i=E_AXIS, axis_j=DT_AMB_AXIS) -> np.ndarray:
    """Mark the four corners of every table cell the trajectory passes through."""
    e_T = np.atleast_1d(np.asarray(e_T, dtype=np.float64))
    dT_amb = np.atleast_1d(np.asarray(dT_amb, dtype=np.float64))
    if e_T.size == 0:
        raise EmptyTrajectory("cannot build a mask from an empty trajectory")
    ci = _cells(axis_i, e_T)
    cj = _cells(axis_j, dT_amb)
    m = np.zeros((len(axis_i), len(axis_j)))
    for i, j in set(zip(ci.tolist(), cj.tolist())):
        m[i:i + 2, j:j + 2] = 1.0
    return m


def apply_action(ps: ParameterSet, bank: int, delta: np.ndarray, mask,
                 cfg: EvalConfig = EvalConfig()) -> ParameterSet:
    """Masked additive update of the bank's tables, clipped to ``[0, phi_max]``."""
    m = mask.values if isinstance(mask, ActionMask) else np.asarray(mask, dtype=np.float64)
    if m.shape == TABLE_SHAPE:
        m = np.stack([m, m])
    if m.shape != (N_CHANNELS,) + TABLE_SHAPE:
        raise ValueError(f"mask must have shape (2, 5, 5), got {m.shape}")
    step = downsample_action(delta, cfg.delta_max)
    tables = []
    for c, table in enumerate(ps.banks[bank]):
        new = np.clip(table.values + step[c] * m[c], 0.0, cfg.phi_max[c])
        new = np.where(m[c] != 0, new, table.values)
        tables.append(table.with_values(new))
    return ps.with_bank(bank, *tables)


def compute_reward(e_T, u_vlv, b1: float = 25.0, b2: float = 0.1, r_min: float = -100.0) -> float:
    """Dense control-quality reward over a signal window, clipped below at ``r_min``."""
    e = np.asarray(e_T, dtype=np.float64)
    u = np.asarray(u_vlv, dtype=np.float64)
    if e.size < 1 or e.shape != u.shape:
        raise ValueError("reward needs equal-length, non-empty windows")
    if not (np.all(np.isfinite(e)) and np.all(np.isfinite(u))):
        raise NonFiniteSignal("non-finite signal in reward window")
    cost = b1 * (np.sqrt(np.abs(e)) + e * e) + b2 * u * u
    r = -float(np.mean(cost))
    return max(r, r_min)


# --------------------------------------------------------------------------
# closed-loop simulation

@numba.njit(cache=True, nogil=True)
def _closed_loop(v, p_ed, T_amb, T_init, tables, axis_i, axis_j, eta,
                 k_hyd, C_1, C_2, C_mix, rho_cp, k_HE0, Vair_ref, c_fan, c_shu, k_drag,
                 pipe_vol_1, pipe_vol_2, dt, cap,
                 T_ref_nom, T_ref_warm, warm_thr, u_pmp, fan_on, fan_band, windup):
    n = v.shape[0]
    out = np.full((9, n), np.nan)   # T_D, T_ref, e_T, u_vlv, dT_amb, T_U1, T_U2, bank, xi_el
    line1 = np.full(cap, T_init)
    line2 = np.full(cap, T_init)
    head = 0
    T_D = T_init
    T_U1 = T_init
    T_U2 = T_init
    integ = 0.0
    prev_bank = -1
    vdot = k_hyd * u_pmp
    lag1 = _lag_steps(pipe_vol_1, vdot, dt, cap)
    lag2 = _lag_steps(pipe_vol_2, vdot, dt, cap)
    for k in range(n):
        bank = 1 if T_U1 < warm_thr else 0
        T_ref = T_ref_warm if bank == 1 else T_ref_nom
        if bank != prev_bank:
            integ = 0.0
            prev_bank = bank
        e = T_D - T_ref
        dT = T_U1 - T_amb
        kp = _lookup(tables[bank, 0], axis_i, axis_j, e, dT)
        ki = _lookup(tables[bank, 1], axis_i, axis_j, e, dT)
        u, integ = _control_step(integ, kp, ki, e, dt, windup)
        # swapped ports: reverse-acting valve keeps negative feedback
        u_vlv = u if bank == 0 else 1.0 - u
        xi_el = 1 if p_ed[k] < 0.0 else 0
        u_fan = min(max((T_U1 - fan_on) / fan_band, 0.0), 1.0)
        u_shu = 1.0 if bank == 0 else 0.0
        out[0, k] = T_D
        out[1, k] = T_ref
        out[2, k] = e
        out[3, k] = u_vlv
        out[4, k] = dT
        out[5, k] = T_U1
        out[6, k] = T_U2
        out[7, k] = bank
        out[8, k] = xi_el
        d1 = line1[(head - lag1) % cap]
        d2 = line2[(head - lag1) % cap]
        d12 = line1[(head - lag2) % cap]
        dT_D, dT_U1, dT_U2 = _derivatives(
            T_D, T_U1, T_U2, d1, d2, d12, u_vlv, u_pmp, u_fan, u_shu, v[k], p_ed[k],
            T_amb, bank, eta[xi_el], k_hyd, C_1, C_2, C_mix, rho_cp, k_HE0, Vair_ref,
            c_fan, c_shu, k_drag)
        T_D = T_D + dt * dT_D
        T_U1 = T_U1 + dt * dT_U1
        T_U2 = T_U2 + dt * dT_U2
        if not (math.isfinite(T_D) and math.isfinite(T_U1) and math.isfinite(T_U2)):
            return out, k + 1, True
        head = (head + 1) % cap
        line1[head] = T_U1
        line2[head] = T_U2
    return out, n, False


@dataclass
class Trajectory:
    """Closed-loop signals sampled at the plant step (one row per step)."""

    dt: float
    T_D: np.ndarray
    T_ref: np.ndarray
    e_T: np.ndarray
    u_vlv: np.ndarray
    dT_amb: np.ndarray
    T_U1: np.ndarray
    T_U2: np.ndarray
    bank: np.ndarray
    xi_el: np.ndarray
    v: np.ndarray
    failed: bool = False

    def __len__(self):
        return self.e_T.size

    @property
    def time(self) -> np.ndarray:
        return np.arange(len(self)) * self.dt


def _tables_array(ps: ParameterSet) -> np.ndarray:
    return np.array([[t.values for t in bank] for bank in ps.banks], dtype=np.float64)


def simulate(sc: Scenario, theta: PlantParams, ps: ParameterSet,
             cfg: EvalConfig = EvalConfig(), veh: VehicleParams = VehicleParams(),
             drive: DriveConfig = DriveConfig()) -> Trajectory:
    """Run the closed loop over one scenario (synthesising the drive if needed)."""
    if not sc.synthesized or sc.dt != theta.dt:
        sc = synthesize_drive(sc, veh, theta.dt, drive)
    P0 = ps.banks[0][0]
    T_init = cfg.T_ref_nominal if cfg.T_init is None else cfg.T_init
    out, n, failed = _closed_loop(
        np.ascontiguousarray(sc.v, dtype=np.float64), np.ascontiguousarray(sc.P_ED, dtype=np.float64),
        float(sc.T_amb), float(T_init), _tables_array(ps),
        np.asarray(P0.axis_i, dtype=np.float64), np.asarray(P0.axis_j, dtype=np.float64),
        np.asarray(theta.eta_el, dtype=np.float64),
        theta.k_hyd, theta.C_1, theta.C_2, theta.C_mix, theta.rho_cp, theta.k_HE0, theta.Vair_ref,
        theta.c_fan, theta.c_shu, theta.k_drag, theta.pipe_vol_1, theta.pipe_vol_2, theta.dt,
        theta.delay_capacity, cfg.T_ref_nominal, cfg.T_ref_warmup, cfg.warmup_threshold,
        cfg.u_pmp, cfg.fan_on, cfg.fan_band, cfg.windup_bound)
    out = out[:, :n]
    return Trajectory(theta.dt, out[0], out[1], out[2], out[3], out[4], out[5], out[6],
                      out[7].astype(np.int64), out[8].astype(np.int64),
                      np.asarray(sc.v[:n], dtype=np.float64), bool(failed))


# --------------------------------------------------------------------------
# observation

@dataclass
class SignalWindow:
    """``n`` bin-averaged samples of (T_D, e_T, dT_amb, u_vlv), raw and normalised."""

    raw: np.ndarray          # (n, 4) physical units

    @property
    def normalized(self) -> np.ndarray:
        return (self.raw - SIGNAL_OFFSET) / SIGNAL_SCALE

    @property
    def e_T(self) -> np.ndarray:
        return self.raw[:, 1]

    @property
    def u_vlv(self) -> np.ndarray:
        return self.raw[:, 3]

    @classmethod
    def from_trajectory(cls, traj: Trajectory, n: int) -> "SignalWindow":
        length = len(traj)
        if length < 1:
            raise EmptyTrajectory("no samples to window")
        sig = np.stack([traj.T_D, traj.e_T, traj.dT_amb, traj.u_vlv], axis=1)
        starts = (np.arange(n) * length) // n
        ends = np.maximum(((np.arange(n) + 1) * length) // n, starts + 1)
        csum = np.vstack([np.zeros((1, 4)), np.cumsum(sig, axis=0)])
        raw = (csum[ends] - csum[starts]) / (ends - starts)[:, None]
        return cls(raw)


def context_vector(xi_th: int, T_ref: float) -> np.ndarray:
    c = np.zeros(3)
    c[int(xi_th)] = 1.0
    c[2] = (T_ref - T_REF_OFFSET) / T_REF_SCALE
    return c


@dataclass
class Observation:
    context: np.ndarray      # (3,) one-hot thermal state + normalised setpoint
    image: np.ndarray        # (2, 8, 8)
    window: SignalWindow

    @property
    def signals(self) -> np.ndarray:
        return self.window.normalized


@dataclass
class EvalResult:
    observation: Observation
    mask: ActionMask
    trajectory: Trajectory
    reward: float
    bank: int

    @property
    def failed(self) -> bool:
        return self.trajectory.failed


def eval_scenario(sc: Scenario, theta: PlantParams, ps: ParameterSet,
                  cfg: EvalConfig = EvalConfig(), veh: VehicleParams = VehicleParams(),
                  drive: DriveConfig = DriveConfig()) -> EvalResult:
    """Simulate one scenario and assemble observation, mask and reward.

    The active bank is the one in use for most samples (ties go to bank 0);
    observation, mask and the subsequent update refer to it. A diverging run
    yields ``r_min`` and a mask from the partial trajectory.
    """
    traj = simulate(sc, theta, ps, cfg, veh, drive)
    counts = np.bincount(traj.bank, minlength=2)
    bank = int(np.argmax(counts))
    P0 = ps.banks[bank][0]
    sel = traj.bank == bank
    e_sel, d_sel = traj.e_T[sel], traj.dT_amb[sel]
    finite = np.isfinite(e_sel) & np.isfinite(d_sel)
    if not np.any(finite):
        raise EmptyTrajectory("simulation produced no usable samples")
    m = build_mask(e_sel[finite], d_sel[finite], P0.axis_i, P0.axis_j)
    mask = ActionMask(bank, np.stack([m, m]))
    window = SignalWindow.from_trajectory(traj, cfg.n_window)
    if traj.failed:
        # samples are logged before each update, so the partial record is finite
        reward = cfg.r_min
    else:
        reward = compute_reward(window.e_T, window.u_vlv, cfg.b1, cfg.b2, cfg.r_min)
    T_ref_last = float(traj.T_ref[sel][-1])
    obs = Observation(context_vector(bank, T_ref_last), upsample_tables(ps, bank, cfg.phi_max),
                      window)
    return EvalResult(obs, mask, traj, reward, bank)


# --------------------------------------------------------------------------
# plant/parameter dataset and the gym-style environment

@dataclass(frozen=True)
class ParameterDataset:
    """Plant variants around a nominal model plus conservative start calibrations.

    Each listed plant field is scaled by a factor drawn uniformly from
    ``[1 - spread, 1 + spread]``; the start calibration is the conservative set
    scaled by a factor from ``init_scale``.
    """

    nominal: PlantParams = PlantParams()
    spread: dict = field(default_factory=lambda: {
        "k_hyd": 0.1, "C_1": 0.15, "C_2": 0.15, "C_mix": 0.15, "k_HE0": 0.15,
        "pipe_vol_1": 0.2, "pipe_vol_2": 0.2, "k_drag": 0.2})
    init_scale: tuple = (0.75, 1.25)

    def sample(self, rng: np.random.Generator):
        factors = {k: float(rng.uniform(1.0 - s, 1.0 + s)) for k, s in sorted(self.spread.items())}
        theta = self.nominal.scaled(**factors)
        phi0 = conservative_parameter_set(float(rng.uniform(*self.init_scale)))
        return theta, phi0


@dataclass(frozen=True)
class EnvConfig:
    episode_length: int = 125
    scenario_batch: int = 16
    p_edge: float = 0.05
    eval: EvalConfig = EvalConfig()
    drive: DriveConfig = DriveConfig()
    shadow_baseline: bool = False   # also score the frozen start calibration each step

    def __post_init__(self):
        if self.episode_length < 1 or self.scenario_batch < 1:
            raise ValueError("episode_length and scenario_batch must be >= 1")
        if not 0.0 <= self.p_edge <= 1.0:
            raise ValueError("p_edge must lie in [0, 1]")


class TuningEnv:
    """Gym-style wrapper: ``reset() -> (obs, mask)``, ``step(a) -> (obs, mask, r, done, info)``."""

    def __init__(self, stats: dict, dataset: ParameterDataset = ParameterDataset(),
                 cfg: EnvConfig = EnvConfig(), seed: int = 0, edge_cases=DEFAULT_EDGE_CASES,
                 veh: VehicleParams = VehicleParams()):
        self.stats = stats
        self.dataset = dataset
        self.cfg = cfg
        self.seed = int(seed)
        self.edge_cases = edge_cases
        self.veh = veh
        self.episode = -1
        self.k = 0
        self.theta = None
        self.phi = None
        self.phi0 = None
        self.last = None
        self._rng = None
        self._batch = []

    def _evaluate(self, sc, ps):
        return eval_scenario(sc, self.theta, ps, self.cfg.eval, self.veh, self.cfg.drive)

    def _draw(self):
        return self._batch[int(self._rng.integers(len(self._batch)))]

    def reset(self, episode: int | None = None):
        self.episode = self.episode + 1 if episode is None else int(episode)
        self._rng = np.random.default_rng([self.seed, self.episode])
        self.theta, self.phi0 = self.dataset.sample(self._rng)
        self.phi = self.phi0
        seeds = self._rng.integers(0, 2**31 - 1, size=self.cfg.scenario_batch)
        self._batch = [synthesize_drive(sample_scenario(self.stats, self.edge_cases,
                                                        self.cfg.p_edge, int(s)),
                                        self.veh, self.theta.dt, self.cfg.drive)
                       for s in seeds]
        self.k = 0
        self.last = self._evaluate(self._draw(), self.phi)
        return self.last.observation, self.last.mask

    def step(self, action: np.ndarray):
        if self.last is None:
            raise RuntimeError("call reset() first")
        self.phi = apply_action(self.phi, self.last.bank, action, self.last.mask, self.cfg.eval)
        sc = self._draw()
        res = self._evaluate(sc, self.phi)
        self.k += 1
        info = {"scenario_seed": sc.seed, "is_edge_case": sc.is_edge_case, "bank": res.bank,
                "failed": res.failed}
        if self.cfg.shadow_baseline:
            info["baseline_reward"] = self._evaluate(sc, self.phi0).reward
        self.last = res
        done = self.k >= self.cfg.episode_length
        return res.observation, res.mask, res.reward, done, info


# --------------------------------------------------------------------------
# trajectory dump: column-oriented text

TRAJ_COLUMNS = ("time", "T_D", "T_D_ref", "e_T", "u_vlv", "v", "dT")


def save_trajectory(traj: Trajectory, path) -> None:
    cols = [traj.time, traj.T_D, traj.T_ref, traj.e_T, traj.u_vlv, traj.v, traj.dT_amb]
    with open(path, "w") as fh:
        fh.write("# format=tmtune-trajectory version=1 dt=%r failed=%d\n" % (traj.dt, traj.failed))
        fh.write("\t".join(TRAJ_COLUMNS) + "\n")
        for row in zip(*cols):
            fh.write("\t".join(repr(float(x)) for x in row) + "\n")


def load_trajectory(path) -> dict:
    from .scenario import FormatError
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# format=tmtune-trajectory version=1"):
            raise FormatError(f"{path}:1: not a tmtune-trajectory v1 file")
        header = fh.readline().split()
        if tuple(header) != TRAJ_COLUMNS:
            raise FormatError(f"{path}:2: unexpected columns {header}")
        rows = []
        for lineno, line in enumerate(fh, start=3):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != len(TRAJ_COLUMNS):
                raise FormatError(f"{path}:{lineno}: expected {len(TRAJ_COLUMNS)} fields")
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric field") from None
    arr = np.array(rows).reshape(-1, len(TRAJ_COLUMNS))
    return {name: arr[:, i] for i, name in enumerate(TRAJ_COLUMNS)}
