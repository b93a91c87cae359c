"""Gain-scheduled PI valve controller with lookup-table gains.

Both gains are bilinear lookups over (control error, drive-to-ambient
temperature difference). Two banks exist; the thermal configuration picks one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .plant import ThermalState

__all__ = [
    "E_AXIS",
    "DT_AMB_AXIS",
    "PHI_MAX_P",
    "PHI_MAX_I",
    "TABLE_SHAPE",
    "N_PARAMETERS",
    "ParameterTable",
    "ParameterSet",
    "ControllerState",
    "lookup",
    "control_step",
    "select_bank",
    "conservative_parameter_set",
    "constant_parameter_set",
]

E_AXIS = (-10.0, -3.0, 0.0, 3.0, 10.0)          # K
DT_AMB_AXIS = (0.0, 10.0, 25.0, 45.0, 70.0)     # K
PHI_MAX_P = 2.0     # valve command per K
PHI_MAX_I = 0.2     # valve command per K s
TABLE_SHAPE = (5, 5)
N_BANKS = 2
N_PARAMETERS = N_BANKS * 2 * TABLE_SHAPE[0] * TABLE_SHAPE[1]
WINDUP_BOUND = 2000.0   # K s


@dataclass(frozen=True)
class ParameterTable:
    values: np.ndarray
    axis_i: tuple = E_AXIS
    axis_j: tuple = DT_AMB_AXIS

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64)
        ai = tuple(float(a) for a in self.axis_i)
        aj = tuple(float(a) for a in self.axis_j)
        if vals.shape != (len(ai), len(aj)):
            raise ValueError(f"table shape {vals.shape} does not match axes ({len(ai)}, {len(aj)})")
        if len(ai) < 2 or len(aj) < 2:
            raise ValueError("each axis needs at least two breakpoints")
        for axis in (ai, aj):
            if any(b <= a for a, b in zip(axis, axis[1:])):
                raise ValueError(f"breakpoints must be strictly increasing: {axis}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("table values must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "axis_i", ai)
        object.__setattr__(self, "axis_j", aj)

    def with_values(self, values) -> "ParameterTable":
        return ParameterTable(values, self.axis_i, self.axis_j)

    def __eq__(self, other):
        if not isinstance(other, ParameterTable):
            return NotImplemented
        return (self.axis_i == other.axis_i and self.axis_j == other.axis_j
                and np.array_equal(self.values, other.values))

    __hash__ = None


@dataclass(frozen=True)
class ParameterSet:
    """Two controller banks, each a ``(P, I)`` pair of tables."""

    banks: tuple

    def __post_init__(self):
        banks = tuple((b[0], b[1]) for b in self.banks)
        if len(banks) != N_BANKS:
            raise ValueError(f"expected {N_BANKS} banks, got {len(banks)}")
        object.__setattr__(self, "banks", banks)
        if self.size != N_PARAMETERS:
            raise ValueError(f"parameter set must hold {N_PARAMETERS} values, got {self.size}")

    @property
    def size(self) -> int:
        return sum(t.values.size for bank in self.banks for t in bank)

    def table(self, bank: int, kind: str) -> ParameterTable:
        return self.banks[bank]["PI".index(kind)]

    def with_bank(self, bank: int, P: ParameterTable, I: ParameterTable) -> "ParameterSet":
        banks = list(self.banks)
        banks[bank] = (P, I)
        return ParameterSet(tuple(banks))

    def flat(self) -> np.ndarray:
        """All 100 values, ordered bank, table (P, I), row-major."""
        return np.concatenate([t.values.ravel() for bank in self.banks for t in bank])

    def __eq__(self, other):
        if not isinstance(other, ParameterSet):
            return NotImplemented
        return all(a == b for ba, bb in zip(self.banks, other.banks) for a, b in zip(ba, bb))

    __hash__ = None


@dataclass(frozen=True)
class ControllerState:
    integrator: float = 0.0
    u: float = 0.0


def constant_parameter_set(p: float, i: float, p_bank1: float | None = None,
                           i_bank1: float | None = None) -> ParameterSet:
    p1 = p if p_bank1 is None else p_bank1
    i1 = i if i_bank1 is None else i_bank1
    mk = lambda c: ParameterTable(np.full(TABLE_SHAPE, float(c)))
    return ParameterSet(((mk(p), mk(i)), (mk(p1), mk(i1))))


def conservative_parameter_set(scale: float = 1.0) -> ParameterSet:
    """Deliberately low-gain, stable calibration used to start every episode."""
    return constant_parameter_set(0.08 * scale, 0.002 * scale)


# --------------------------------------------------------------------------
# compiled kernels

@numba.njit(cache=True)
def _cell(axis, x):
    # lower cell on ties; flat beyond the extremes
    n = axis.shape[0]
    if x <= axis[0]:
        return 0, 0.0
    if x >= axis[n - 1]:
        return n - 2, 1.0
    k = np.searchsorted(axis, x, side="left") - 1
    if k < 0:
        k = 0
    if k > n - 2:
        k = n - 2
    return k, (x - axis[k]) / (axis[k + 1] - axis[k])


@numba.njit(cache=True)
def _lookup(values, axis_i, axis_j, x, y):
    i, fx = _cell(axis_i, x)
    j, fy = _cell(axis_j, y)
    v00 = values[i, j]
    v10 = values[i + 1, j]
    v01 = values[i, j + 1]
    v11 = values[i + 1, j + 1]
    return ((1.0 - fx) * (1.0 - fy) * v00 + fx * (1.0 - fy) * v10
            + (1.0 - fx) * fy * v01 + fx * fy * v11)


@numba.njit(cache=True)
def _control_step(integrator, kp, ki, e, dt, windup_bound):
    candidate = integrator + e * dt
    u_try = kp * e + ki * candidate
    if (u_try > 1.0 and e > 0.0) or (u_try < 0.0 and e < 0.0):
        candidate = integrator
    candidate = min(max(candidate, -windup_bound), windup_bound)
    u_raw = kp * e + ki * candidate
    u = min(max(u_raw, 0.0), 1.0)
    return u, candidate


# --------------------------------------------------------------------------
# public API

def lookup(table: ParameterTable, e_T: float, dT_amb: float) -> float:
    """Bilinear table interpolation with flat extrapolation."""
    return float(_lookup(table.values, np.asarray(table.axis_i), np.asarray(table.axis_j),
                         float(e_T), float(dT_amb)))


def select_bank(xi_th, xi_el: int = 0) -> int:
    # xi_el is accepted for interface symmetry; the thermal state alone decides
    return int(ThermalState(xi_th))


def control_step(cs: ControllerState, ps: ParameterSet, bank: int, e_T: float,
                 dT_amb: float, dt: float, windup_bound: float = WINDUP_BOUND):
    """One PI update; returns ``(u, new_state)`` with ``u`` clamped to [0, 1].

    Integration halts while the output is saturated and the error pushes
    further into saturation.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    P, I = ps.banks[bank]
    kp = lookup(P, e_T, dT_amb)
    ki = lookup(I, e_T, dT_amb)
    u, integ = _control_step(float(cs.integrator), kp, ki, float(e_T), float(dt),
                             float(windup_bound))
    u = float(u)
    return u, ControllerState(float(integ), u)

