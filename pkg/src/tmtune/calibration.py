"""Line-oriented calibration files for the two PI banks.

Grammar (one statement per line, ``#`` starts a comment, blank lines ignored)::

    format tmtune-calibration 1
    label <free text>                       (optional)
    bank <0|1>
    table <P|I> unit <unit text>
    axis_i e_T K <5 breakpoints>
    axis_j dT_amb K <5 breakpoints>
    row <5 values>                          (five rows, first row = first e_T breakpoint)
    ... (second table, then the second bank)
    end

Both banks must appear with both tables; the file must hold exactly 100 gain
values. Numbers are written with ``repr`` so that a file round-trips exactly.
"""
from __future__ import annotations

import numpy as np

from .controller import (N_BANKS, N_PARAMETERS, PHI_MAX_I, PHI_MAX_P,
                         TABLE_SHAPE, ParameterSet, ParameterTable)

__all__ = ["CalibrationError", "UNITS", "dumps", "loads", "save_calibration", "load_calibration"]

HEADER = "format tmtune-calibration 1"
UNITS = {"P": "1/K", "I": "1/(K*s)"}


class CalibrationError(ValueError):
    pass


def _num(x: float) -> str:
    return repr(float(x))


def dumps(ps: ParameterSet, label: str = "") -> str:
    lines = [HEADER]
    if label:
        lines.append(f"label {label}")
    for b, bank in enumerate(ps.banks):
        lines.append(f"bank {b}")
        for kind, table in zip("PI", bank):
            lines.append(f"table {kind} unit {UNITS[kind]}")
            lines.append("axis_i e_T K " + " ".join(_num(a) for a in table.axis_i))
            lines.append("axis_j dT_amb K " + " ".join(_num(a) for a in table.axis_j))
            for row in table.values:
                lines.append("row " + " ".join(_num(v) for v in row))
    lines.append("end")
    return "\n".join(lines) + "\n"


def loads(text: str, source: str = "<calibration>", phi_max=(PHI_MAX_P, PHI_MAX_I),
          check_limits: bool = True):
    """Parse a calibration; returns ``(ParameterSet, label)``."""
    lines = [(n, ln.split("#", 1)[0].strip()) for n, ln in enumerate(text.splitlines(), start=1)]
    lines = [(n, ln) for n, ln in lines if ln]

    def err(n, msg):
        return CalibrationError(f"{source}:{n}: {msg}")

    if not lines or lines[0][1] != HEADER:
        n = lines[0][0] if lines else 1
        raise err(n, f"expected header {HEADER!r}")
    label = ""
    banks: dict = {}
    bank = kind = None
    tables: dict = {}
    n_values = 0
    ended = False
    for n, ln in lines[1:]:
        if ended:
            raise err(n, "content after 'end'")
        key, _, rest = ln.partition(" ")
        if key == "label":
            label = rest.strip()
        elif key == "bank":
            try:
                bank = int(rest)
            except ValueError:
                raise err(n, f"bad bank index {rest!r}") from None
            if bank not in range(N_BANKS) or bank in banks:
                raise err(n, f"bank {bank} invalid or repeated")
            banks[bank] = {}
            kind = None
        elif key == "table":
            parts = rest.split()
            if bank is None:
                raise err(n, "table before any bank")
            if len(parts) < 3 or parts[0] not in UNITS or parts[1] != "unit":
                raise err(n, "expected 'table <P|I> unit <unit>'")
            kind = parts[0]
            if parts[2] != UNITS[kind]:
                raise err(n, f"unit for {kind} must be {UNITS[kind]!r}, got {parts[2]!r}")
            if kind in banks[bank]:
                raise err(n, f"table {kind} repeated in bank {bank}")
            tables = {"axis_i": None, "axis_j": None, "rows": []}
            banks[bank][kind] = tables
        elif key in ("axis_i", "axis_j"):
            if kind is None:
                raise err(n, f"{key} outside a table")
            parts = rest.split()
            want = ("e_T", "K") if key == "axis_i" else ("dT_amb", "K")
            if tuple(parts[:2]) != want:
                raise err(n, f"{key} must start with '{want[0]} {want[1]}'")
            try:
                vals = [float(p) for p in parts[2:]]
            except ValueError:
                raise err(n, f"non-numeric breakpoint in {key}") from None
            if len(vals) != TABLE_SHAPE[0 if key == "axis_i" else 1]:
                raise err(n, f"{key} needs {TABLE_SHAPE[0]} breakpoints, got {len(vals)}")
            if any(b <= a for a, b in zip(vals, vals[1:])):
                raise err(n, f"{key} breakpoints must be strictly increasing")
            tables[key] = vals
        elif key == "row":
            if kind is None:
                raise err(n, "row outside a table")
            try:
                vals = [float(p) for p in rest.split()]
            except ValueError:
                raise err(n, "non-numeric table value") from None
            if not all(np.isfinite(vals)):
                raise err(n, "table values must be finite")
            if check_limits and any(v < 0 or v > phi_max["PI".index(kind)] for v in vals):
                raise err(n, f"{kind} value outside [0, {phi_max['PI'.index(kind)]}]")
            tables["rows"].append((n, vals))
            n_values += len(vals)
        elif key == "end":
            ended = True
        else:
            raise err(n, f"unknown statement {key!r}")
    last = lines[-1][0]
    if not ended:
        raise err(last, "missing 'end'")
    if n_values != N_PARAMETERS:
        raise err(last, f"expected {N_PARAMETERS} parameter values, found {n_values}")
    out = []
    for b in range(N_BANKS):
        if b not in banks:
            raise err(last, f"bank {b} missing")
        pair = []
        for k in "PI":
            t = banks[b].get(k)
            if t is None:
                raise err(last, f"table {k} missing in bank {b}")
            if t["axis_i"] is None or t["axis_j"] is None:
                raise err(last, f"axes missing for table {k} in bank {b}")
            rows = t["rows"]
            if len(rows) != TABLE_SHAPE[0] or any(len(r) != TABLE_SHAPE[1] for _, r in rows):
                n0 = rows[0][0] if rows else last
                raise err(n0, f"table {k} in bank {b} must be {TABLE_SHAPE[0]}x{TABLE_SHAPE[1]}")
            pair.append(ParameterTable(np.array([r for _, r in rows]), tuple(t["axis_i"]),
                                       tuple(t["axis_j"])))
        out.append(tuple(pair))
    return ParameterSet(tuple(out)), label


def save_calibration(ps: ParameterSet, path, label: str = "") -> None:
    with open(path, "w") as fh:
        fh.write(dumps(ps, label))


def load_calibration(path, **kw):
    with open(path) as fh:
        return loads(fh.read(), source=str(path), **kw)

