"""Reference coolant-circuit model: mixing valve, pump, fan/shutter, radiator,
electric-drive heat source and flow-dependent transport delays.

The scalar kernels are numba-compiled so that the closed-loop simulation in
:mod:`tmtune.tsenv` and the Python-level :func:`step` share one code path.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, fields, asdict

import numba
import numpy as np

__all__ = [
    "ThermalState",
    "PlantParams",
    "PlantState",
    "ActuatorCommand",
    "ExogenousInput",
    "VehicleParams",
    "NonFiniteState",
    "valve_fraction",
    "initial_state",
    "step",
    "delayed_inputs",
    "longitudinal_power",
]

VDOT_MIN = 0.01  # L/s, floor for the transport-delay computation


class NonFiniteState(FloatingPointError):
    """Raised when an integration step produces a non-finite temperature."""


class ThermalState(enum.IntEnum):
    CONFIG_A = 0  # ports {1, 2, 3}
    CONFIG_B = 1  # ports {1, 3, 4}, valve ports swapped


@dataclass(frozen=True)
class PlantParams:
    k_hyd: float = 0.5          # L/s per unit pump command
    C_1: float = 10e3           # J/K, drive-side thermal mass
    C_2: float = 20e3           # J/K, radiator-side thermal mass
    C_mix: float = 3.6e3        # J/K, mixing volume downstream of the valve
    rho_cp: float = 3600.0      # J/(L K)
    k_HE0: float = 500.0        # W/K
    Vair_ref: float = 500.0     # L/s
    c_fan: float = 800.0        # L/s at full fan
    c_shu: float = 30.0         # L/s per (m/s) at open shutter
    eta_el: tuple = (0.82, 0.78)
    k_drag: float = 60.0        # W per m/s
    pipe_vol_1: float = 2.0     # L
    pipe_vol_2: float = 4.0     # L
    dt: float = 0.1             # s
    max_delay: float = 60.0     # s, capacity of the delay queues

    def __post_init__(self):
        positive = ("k_hyd", "C_1", "C_2", "C_mix", "rho_cp", "k_HE0", "Vair_ref",
                    "c_fan", "c_shu", "k_drag", "pipe_vol_1", "pipe_vol_2", "dt",
                    "max_delay")
        for name in positive:
            val = getattr(self, name)
            if not (math.isfinite(val) and val > 0):
                raise ValueError(f"PlantParams.{name} must be finite and > 0, got {val!r}")
        object.__setattr__(self, "eta_el", tuple(float(e) for e in self.eta_el))
        if not self.eta_el or any(not (0.0 < e < 1.0) for e in self.eta_el):
            raise ValueError(f"PlantParams.eta_el entries must lie in (0, 1), got {self.eta_el}")

    @property
    def delay_capacity(self) -> int:
        return int(math.floor(self.max_delay / self.dt + 0.5)) + 1

    def scaled(self, **factors) -> "PlantParams":
        """Copy with the named fields multiplied by the given factors."""
        kw = {}
        for name, f in factors.items():
            kw[name] = getattr(self, name) * f
        return self.replace(**kw)

    def replace(self, **kw) -> "PlantParams":
        d = asdict(self)
        d.update(kw)
        return PlantParams(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eta_el"] = list(self.eta_el)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PlantParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown PlantParams keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class ActuatorCommand:
    u_vlv: float = 0.0
    u_pmp: float = 1.0
    u_fan: float = 0.0
    u_shu: float = 1.0

    def clamped(self) -> "ActuatorCommand":
        return ActuatorCommand(*(min(max(float(u), 0.0), 1.0)
                                 for u in (self.u_vlv, self.u_pmp, self.u_fan, self.u_shu)))


@dataclass(frozen=True)
class ExogenousInput:
    v_veh: float = 0.0
    P_ED: float = 0.0
    T_amb: float = 20.0
    xi_th: ThermalState = ThermalState.CONFIG_A
    xi_el: int = 0

    def __post_init__(self):
        if not self.v_veh >= 0:
            raise ValueError(f"v_veh must be >= 0, got {self.v_veh}")
        object.__setattr__(self, "xi_th", ThermalState(self.xi_th))


@dataclass
class PlantState:
    """Plant temperatures plus transport-delay histories.

    ``delay_line_1[j]`` is the drive-side temperature ``T_U1`` from ``j``
    steps ago (index 0 is the current value); ``delay_line_2`` holds ``T_U2``.
    """

    T_D: float
    T_U1: float
    T_U2: float
    delay_line_1: np.ndarray = field(repr=False)
    delay_line_2: np.ndarray = field(repr=False)
    t: float = 0.0

    def __post_init__(self):
        self.delay_line_1 = np.asarray(self.delay_line_1, dtype=np.float64)
        self.delay_line_2 = np.asarray(self.delay_line_2, dtype=np.float64)
        if self.delay_line_1.size < 1 or self.delay_line_2.size < 1:
            raise ValueError("delay lines need capacity >= 1")
        if not all(math.isfinite(x) for x in (self.T_D, self.T_U1, self.T_U2)):
            raise NonFiniteState("non-finite plant temperature")

    def copy(self) -> "PlantState":
        return PlantState(self.T_D, self.T_U1, self.T_U2,
                          self.delay_line_1.copy(), self.delay_line_2.copy(), self.t)


def initial_state(params: PlantParams, T_D: float, T_U1: float | None = None,
                  T_U2: float | None = None) -> PlantState:
    """Plant at rest with delay queues pre-filled with the current values."""
    T_U1 = T_D if T_U1 is None else T_U1
    T_U2 = T_D if T_U2 is None else T_U2
    cap = params.delay_capacity
    return PlantState(float(T_D), float(T_U1), float(T_U2),
                      np.full(cap, float(T_U1)), np.full(cap, float(T_U2)), 0.0)


# --------------------------------------------------------------------------
# compiled kernels

@numba.njit(cache=True)
def _smoothstep_valve(alpha, config_b):
    x = min(max(alpha, 0.0), 1.0)
    beta = 3.0 * x * x - 2.0 * x * x * x
    if config_b:
        return 1.0 - beta
    return beta


@numba.njit(cache=True)
def _lag_steps(pipe_vol, vdot, dt, cap):
    tau = pipe_vol / max(vdot, VDOT_MIN)
    lag = int(math.floor(tau / dt + 0.5))
    return min(lag, cap - 1)


@numba.njit(cache=True)
def _derivatives(T_D, T_U1, T_U2, T_U1_d1, T_U2_d1, T_U1_d2,
                 u_vlv, u_pmp, u_fan, u_shu, v_veh, P_ED, T_amb, config_b, eta,
                 k_hyd, C_1, C_2, C_mix, rho_cp, k_HE0, Vair_ref, c_fan, c_shu, k_drag):
    vdot = k_hyd * u_pmp
    vdot_air = c_fan * u_fan + c_shu * u_shu * v_veh
    q_ed = (1.0 - eta) * abs(P_ED) + k_drag * v_veh
    q_he = k_HE0 * (1.0 - math.exp(-vdot_air / Vair_ref)) * (T_U2 - T_amb)
    beta = _smoothstep_valve(u_vlv, config_b)
    dT_D = (rho_cp * vdot / C_mix) * (beta * T_U2_d1 + (1.0 - beta) * T_U1_d1 - T_D)
    dT_U1 = (q_ed - rho_cp * vdot * (T_U1 - T_D)) / C_1
    dT_U2 = (-q_he + rho_cp * beta * vdot * (T_U1_d2 - T_U2)) / C_2
    return dT_D, dT_U1, dT_U2


# --------------------------------------------------------------------------
# public API

def valve_fraction(alpha: float, xi_th: ThermalState) -> float:
    """Share of the radiator stream ``T_U2`` in the mixed flow.

    Smoothstep ``3x^2 - 2x^3`` of the clamped piston angle; the port swap of
    ``CONFIG_B`` mirrors it to ``1 - beta``.
    """
    return float(_smoothstep_valve(float(alpha), int(ThermalState(xi_th))))


def _clamp01(u):
    return min(max(float(u), 0.0), 1.0)


def delayed_inputs(state: PlantState, u_pmp: float, params: PlantParams):
    """Delayed stream temperatures seen by the next step.

    Returns ``(T_U1 at lag tau_1, T_U2 at lag tau_1, T_U1 at lag tau_2)``;
    the last one is the radiator inlet.
    """
    cap = state.delay_line_1.size
    vdot = params.k_hyd * _clamp01(u_pmp)
    lag1 = _lag_steps(params.pipe_vol_1, vdot, params.dt, cap)
    lag2 = _lag_steps(params.pipe_vol_2, vdot, params.dt, cap)
    return (float(state.delay_line_1[lag1]), float(state.delay_line_2[lag1]),
            float(state.delay_line_1[lag2]))


def step(state: PlantState, cmd: ActuatorCommand, exo: ExogenousInput,
         params: PlantParams) -> PlantState:
    """Advance the plant by one explicit-Euler step of ``params.dt``."""
    cmd = cmd.clamped()
    d1, d2, d12 = delayed_inputs(state, cmd.u_pmp, params)
    eta = params.eta_el[int(exo.xi_el)]
    dT_D, dT_U1, dT_U2 = _derivatives(
        state.T_D, state.T_U1, state.T_U2, d1, d2, d12,
        cmd.u_vlv, cmd.u_pmp, cmd.u_fan, cmd.u_shu,
        float(exo.v_veh), float(exo.P_ED), float(exo.T_amb), int(exo.xi_th), eta,
        params.k_hyd, params.C_1, params.C_2, params.C_mix, params.rho_cp,
        params.k_HE0, params.Vair_ref, params.c_fan, params.c_shu, params.k_drag)
    dt = params.dt
    T_D = state.T_D + dt * dT_D
    T_U1 = state.T_U1 + dt * dT_U1
    T_U2 = state.T_U2 + dt * dT_U2
    if not (math.isfinite(T_D) and math.isfinite(T_U1) and math.isfinite(T_U2)):
        raise NonFiniteState(f"plant diverged at t={state.t + dt:.1f}s")
    line1 = np.empty_like(state.delay_line_1)
    line1[0] = T_U1
    line1[1:] = state.delay_line_1[:-1]
    line2 = np.empty_like(state.delay_line_2)
    line2[0] = T_U2
    line2[1:] = state.delay_line_2[:-1]
    return PlantState(T_D, T_U1, T_U2, line1, line2, state.t + dt)


# --------------------------------------------------------------------------
# vehicle

@dataclass(frozen=True)
class VehicleParams:
    mass: float = 2000.0     # kg
    g: float = 9.81
    c_rr: float = 0.01
    cd_A: float = 0.6        # m^2, drag coefficient times frontal area
    rho_air: float = 1.2     # kg/m^3
    eta_drive: float = 0.9
    eta_regen: float = 0.6

    def __post_init__(self):
        for name in ("mass", "g", "cd_A", "rho_air"):
            if not getattr(self, name) > 0:
                raise ValueError(f"VehicleParams.{name} must be > 0")
        if self.c_rr < 0 or not (0 < self.eta_drive <= 1 and 0 <= self.eta_regen <= 1):
            raise ValueError("need c_rr >= 0, eta_drive in (0, 1], eta_regen in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@numba.njit(cache=True)
def _longitudinal_power(v, a, grade, mass, g, c_rr, cd_A, rho_air, eta_drive, eta_regen):
    force = (mass * a + mass * g * math.sin(grade) + c_rr * mass * g * math.cos(grade)
             + 0.5 * rho_air * cd_A * v * v)
    p = force * v
    if p >= 0.0:
        return p / eta_drive
    return p * eta_regen


def longitudinal_power(v: float, a: float, grade: float, veh: VehicleParams) -> float:
    """Electrical traction power (W) from the road-load balance; negative when recuperating."""
    if v < 0:
        raise ValueError(f"speed must be >= 0, got {v}")
    return float(_longitudinal_power(float(v), float(a), float(grade), veh.mass, veh.g,
                                     veh.c_rr, veh.cd_A, veh.rho_air, veh.eta_drive,
                                     veh.eta_regen))
