"""Thermal-system scenario generation.

Usage records are reduced to per-variable normal fits; scenarios are drawn
inside the 10 %/90 % quantile band (rejection sampling), with an occasional
predefined edge case. A proportional driver model and the road-load balance
turn the sampled layer values into speed, gradient and traction-power series.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numba
import numpy as np
from scipy.stats import norm

from .plant import VehicleParams, _longitudinal_power

__all__ = [
    "VARIABLES",
    "QUANTILE_Z",
    "InsufficientData",
    "FormatError",
    "UsageDataset",
    "LayerStatistics",
    "Scenario",
    "DriveConfig",
    "DEFAULT_EDGE_CASES",
    "fit_layer_statistics",
    "sample_scenario",
    "sample_scenarios",
    "synthesize_drive",
    "make_synthetic_usage",
    "bundled_usage",
    "save_usage",
    "load_usage",
    "save_stats",
    "load_stats",
    "save_scenarios",
    "load_scenarios",
]

# name -> (scenario layer, unit)
VARIABLES = {
    "grade_mean": (1, "rad"),
    "v_mean": (2, "m/s"),
    "v_var": (2, "(m/s)^2"),
    "duration": (2, "s"),
    "T_amb": (5, "degC"),
    "humidity": (5, "%"),
}
QUANTILE_Z = float(norm.ppf(0.9))   # 1.2815515655...


class InsufficientData(ValueError):
    pass


class FormatError(ValueError):
    """Malformed data file; the message carries the offending line number."""


@dataclass
class UsageDataset:
    records: list            # list of dicts keyed by VARIABLES
    provenance: str = ""

    def __post_init__(self):
        for n, rec in enumerate(self.records):
            missing = set(VARIABLES) - set(rec)
            if missing:
                raise ValueError(f"record {n}: missing {sorted(missing)}")
            if not all(math.isfinite(float(rec[k])) for k in VARIABLES):
                raise ValueError(f"record {n}: non-finite value")
            if float(rec["duration"]) <= 0:
                raise ValueError(f"record {n}: duration must be > 0")

    def column(self, name: str) -> np.ndarray:
        return np.array([float(r[name]) for r in self.records])

    def __len__(self):
        return len(self.records)


@dataclass(frozen=True)
class LayerStatistics:
    name: str
    layer: int
    unit: str
    mu: float
    sigma: float
    clip_lo: float
    clip_hi: float

    @classmethod
    def from_normal(cls, name: str, mu: float, sigma: float) -> "LayerStatistics":
        layer, unit = VARIABLES[name]
        return cls(name, layer, unit, float(mu), float(sigma),
                   float(mu - QUANTILE_Z * sigma), float(mu + QUANTILE_Z * sigma))

    def contains(self, x: float) -> bool:
        return self.clip_lo <= x <= self.clip_hi


@dataclass
class Scenario:
    layers: dict                 # sampled layer values keyed by VARIABLES
    seed: int
    is_edge_case: bool = False
    name: str = ""
    dt: float | None = None
    v: np.ndarray | None = field(default=None, repr=False)
    grade: np.ndarray | None = field(default=None, repr=False)
    P_ED: np.ndarray | None = field(default=None, repr=False)

    @property
    def duration(self) -> float:
        return float(self.layers["duration"])

    @property
    def T_amb(self) -> float:
        return float(self.layers["T_amb"])

    @property
    def synthesized(self) -> bool:
        return self.v is not None


# Desert and sub-polar extremes at high load.
DEFAULT_EDGE_CASES = (
    Scenario({"grade_mean": 0.0, "v_mean": 45.0, "v_var": 4.0, "duration": 420.0,
              "T_amb": 45.0, "humidity": 15.0}, seed=0, is_edge_case=True, name="desert-high-speed"),
    Scenario({"grade_mean": 0.06, "v_mean": 30.0, "v_var": 9.0, "duration": 420.0,
              "T_amb": -20.0, "humidity": 85.0}, seed=0, is_edge_case=True, name="subpolar-high-load"),
)


def fit_layer_statistics(data: UsageDataset) -> dict:
    """Normal fit (sample mean, n-1 standard deviation) per layer variable."""
    if len(data) < 2:
        raise InsufficientData(f"need at least 2 usage records, got {len(data)}")
    stats = {}
    for name in VARIABLES:
        col = data.column(name)
        stats[name] = LayerStatistics.from_normal(name, col.mean(), col.std(ddof=1))
    return stats


def _draw_clipped(rng, st: LayerStatistics) -> float:
    if st.sigma == 0.0:
        return st.mu
    while True:
        x = float(rng.normal(st.mu, st.sigma))
        if st.clip_lo <= x <= st.clip_hi:
            return x


def sample_scenario(stats: dict, edge_cases=DEFAULT_EDGE_CASES, p_edge: float = 0.05,
                    rng_seed: int = 0) -> Scenario:
    """Draw one scenario; deterministic in ``rng_seed``."""
    missing = set(VARIABLES) - set(stats)
    if missing:
        raise ValueError(f"statistics missing for {sorted(missing)}")
    if not 0.0 <= p_edge <= 1.0:
        raise ValueError("p_edge must lie in [0, 1]")
    rng = np.random.default_rng(rng_seed)
    if edge_cases and rng.random() < p_edge:
        base = edge_cases[int(rng.integers(len(edge_cases)))]
        return Scenario(dict(base.layers), seed=int(rng_seed), is_edge_case=True, name=base.name)
    layers = {name: _draw_clipped(rng, stats[name]) for name in VARIABLES}
    return Scenario(layers, seed=int(rng_seed))


def sample_scenarios(stats: dict, n: int, seed: int, p_edge: float = 0.05,
                     edge_cases=DEFAULT_EDGE_CASES) -> list:
    seeds = np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32)
    return [sample_scenario(stats, edge_cases, p_edge, int(s)) for s in seeds]


# --------------------------------------------------------------------------
# drive synthesis

@dataclass(frozen=True)
class DriveConfig:
    segment_length: float = 60.0   # s, piecewise-constant target speed
    k_drv: float = 0.5             # 1/s, driver proportional gain
    a_min: float = -3.0            # m/s^2
    a_max: float = 2.5             # m/s^2
    v_max: float = 60.0            # m/s
    grade_knot_spacing: float = 60.0   # s
    grade_spread: float = 0.01     # rad, knot scatter around the sampled mean
    grade_limit: float = 0.12      # rad

    def __post_init__(self):
        for name in ("segment_length", "k_drv", "a_max", "v_max", "grade_knot_spacing",
                     "grade_limit"):
            if not getattr(self, name) > 0:
                raise ValueError(f"DriveConfig.{name} must be > 0")
        if not self.a_min < 0 or self.grade_spread < 0:
            raise ValueError("need a_min < 0 and grade_spread >= 0")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@numba.njit(cache=True)
def _drive(target, grade, v0, k_drv, a_min, a_max, dt,
           mass, g, c_rr, cd_A, rho_air, eta_drive, eta_regen):
    n = target.shape[0]
    v = np.empty(n)
    p = np.empty(n)
    vel = v0
    for k in range(n):
        a = min(max(k_drv * (target[k] - vel), a_min), a_max)
        v[k] = vel
        p[k] = _longitudinal_power(vel, a, grade[k], mass, g, c_rr, cd_A, rho_air,
                                   eta_drive, eta_regen)
        vel = max(vel + a * dt, 0.0)
    return v, p


def synthesize_drive(sc: Scenario, veh: VehicleParams = VehicleParams(), dt: float = 0.1,
                     cfg: DriveConfig = DriveConfig(), target: np.ndarray | None = None,
                     grade: np.ndarray | None = None, v0: float | None = None) -> Scenario:
    """Return a copy of ``sc`` with ``v``, ``grade`` and ``P_ED`` filled at ``dt``.

    ``target``/``grade`` override the profiles generated from the layer values,
    which is mainly useful for tests and hand-made drives.
    """
    n = max(int(math.floor(sc.duration / dt + 0.5)), 1)
    rng = np.random.default_rng([int(sc.seed), 0x5eed])
    t = np.arange(n) * dt
    if target is None:
        n_seg = int(math.ceil(n * dt / cfg.segment_length)) + 1
        sd = math.sqrt(max(float(sc.layers["v_var"]), 0.0))
        levels = np.clip(rng.normal(float(sc.layers["v_mean"]), sd, n_seg), 0.0, cfg.v_max)
        target = levels[np.minimum((t // cfg.segment_length).astype(int), n_seg - 1)]
    target = np.ascontiguousarray(target, dtype=np.float64)
    if grade is None:
        n_knot = int(math.ceil(n * dt / cfg.grade_knot_spacing)) + 1
        knots = np.clip(rng.normal(float(sc.layers["grade_mean"]), cfg.grade_spread, n_knot),
                        -cfg.grade_limit, cfg.grade_limit)
        grade = np.interp(t, np.arange(n_knot) * cfg.grade_knot_spacing, knots)
    grade = np.ascontiguousarray(grade, dtype=np.float64)
    if target.shape != (n,) or grade.shape != (n,):
        raise ValueError(f"profiles must have {n} samples")
    start = float(target[0]) if v0 is None else float(v0)
    v, p = _drive(target, grade, start, cfg.k_drv, cfg.a_min, cfg.a_max, dt,
                  veh.mass, veh.g, veh.c_rr, veh.cd_A, veh.rho_air, veh.eta_drive, veh.eta_regen)
    return replace(sc, dt=dt, v=v, grade=grade, P_ED=p)


# --------------------------------------------------------------------------
# bundled synthetic usage data (stand-in for fleet and development drives)

_CLIMATES = {
    #            T_amb        humidity     v_mean      v_var      grade          duration
    "hot":      ((36.0, 4.0), (40.0, 12.0), (24.0, 6.0), (20.0, 6.0), (0.0, 0.01), (420.0, 80.0)),
    "cold":     ((-6.0, 6.0), (80.0, 8.0), (20.0, 6.0), (16.0, 6.0), (0.01, 0.012), (420.0, 80.0)),
    "moderate": ((19.0, 5.0), (60.0, 10.0), (22.0, 7.0), (18.0, 6.0), (0.005, 0.015), (420.0, 80.0)),
}


def make_synthetic_usage(climate: str, n: int = 200, seed: int = 0) -> UsageDataset:
    (ta, hu, vm, vv, gr, du) = _CLIMATES[climate]
    rng = np.random.default_rng([seed, sorted(_CLIMATES).index(climate)])
    records = []
    for _ in range(n):
        records.append({
            "grade_mean": float(rng.normal(*gr)),
            "v_mean": float(max(rng.normal(*vm), 3.0)),
            "v_var": float(max(rng.normal(*vv), 1.0)),
            "duration": float(max(rng.normal(*du), 120.0)),
            "T_amb": float(rng.normal(*ta)),
            "humidity": float(min(max(rng.normal(*hu), 5.0), 100.0)),
        })
    return UsageDataset(records, provenance=f"synthetic-{climate}")


_DATA_DIR = Path(__file__).parent / "data"
BUNDLED_SEED = 2024     # the bundled files are make_synthetic_usage(climate, 200, BUNDLED_SEED)


def bundled_usage(climate: str = "all") -> UsageDataset:
    """Bundled synthetic development-drive data: ``hot``, ``cold``, ``moderate`` or ``all``."""
    if climate == "all":
        parts = [load_usage(_DATA_DIR / f"usage_{c}.csv") for c in ("hot", "cold", "moderate")]
        return UsageDataset([r for p in parts for r in p.records], provenance="synthetic-all")
    return load_usage(_DATA_DIR / f"usage_{climate}.csv")


# --------------------------------------------------------------------------
# file formats: CSV with a leading "# format=<kind> version=<n>" line

def _header_line(kind: str, version: int = 1, **extra) -> str:
    parts = [f"format={kind}", f"version={version}"] + [f"{k}={v}" for k, v in extra.items()]
    return "# " + " ".join(parts) + "\n"


def _read_table(path, kind: str, version: int = 1):
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise FormatError(f"{path}:1: missing '# format={kind} version={version}' header")
    meta = dict(tok.split("=", 1) for tok in lines[0][1:].split() if "=" in tok)
    if meta.get("format") != kind:
        raise FormatError(f"{path}:1: expected format={kind}, got {meta.get('format')!r}")
    if meta.get("version") != str(version):
        raise FormatError(f"{path}:1: unsupported {kind} version {meta.get('version')!r}")
    reader = csv.reader(io.StringIO("\n".join(lines[1:])))
    rows = [(n + 2, row) for n, row in enumerate(reader) if row and not row[0].startswith("#")]
    if not rows:
        return meta, [], []
    header = rows[0][1]
    body = []
    for lineno, row in rows[1:]:
        if len(row) != len(header):
            raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        body.append((lineno, dict(zip(header, row))))
    return meta, header, body


def _float(path, lineno, key, s):
    try:
        x = float(s)
    except ValueError:
        raise FormatError(f"{path}:{lineno}: field {key!r} is not a number: {s!r}") from None
    if not math.isfinite(x):
        raise FormatError(f"{path}:{lineno}: field {key!r} is not finite")
    return x


def save_usage(data: UsageDataset, path) -> None:
    cols = list(VARIABLES)
    with open(path, "w", newline="") as fh:
        fh.write(_header_line("tmtune-usage", provenance=data.provenance or "unknown"))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in data.records:
            w.writerow([repr(float(r[c])) for c in cols])


def load_usage(path) -> UsageDataset:
    meta, header, body = _read_table(path, "tmtune-usage")
    if header:
        missing = set(VARIABLES) - set(header)
        if missing:
            raise FormatError(f"{path}:2: missing columns {sorted(missing)}")
    records = []
    for lineno, row in body:
        rec = {k: _float(path, lineno, k, row[k]) for k in VARIABLES}
        if rec["duration"] <= 0:
            raise FormatError(f"{path}:{lineno}: duration must be > 0")
        records.append(rec)
    return UsageDataset(records, provenance=meta.get("provenance", ""))


def save_stats(stats: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(_header_line("tmtune-layer-stats"))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variable", "layer", "unit", "mu", "sigma", "clip_lo", "clip_hi"])
        for name in VARIABLES:
            s = stats[name]
            w.writerow([s.name, s.layer, s.unit, repr(s.mu), repr(s.sigma),
                        repr(s.clip_lo), repr(s.clip_hi)])


def load_stats(path) -> dict:
    _, header, body = _read_table(path, "tmtune-layer-stats")
    stats = {}
    for lineno, row in body:
        name = row.get("variable")
        if name not in VARIABLES:
            raise FormatError(f"{path}:{lineno}: unknown variable {name!r}")
        vals = [_float(path, lineno, k, row[k]) for k in ("mu", "sigma", "clip_lo", "clip_hi")]
        layer, unit = VARIABLES[name]
        if vals[1] < 0 or vals[2] > vals[3]:
            raise FormatError(f"{path}:{lineno}: inconsistent sigma/clip bounds")
        stats[name] = LayerStatistics(name, layer, unit, *vals)
    missing = set(VARIABLES) - set(stats)
    if missing:
        raise FormatError(f"{path}: statistics missing for {sorted(missing)}")
    return stats


def save_scenarios(scenarios, path) -> None:
    cols = ["name", "seed", "is_edge_case"] + list(VARIABLES)
    with open(path, "w", newline="") as fh:
        fh.write(_header_line("tmtune-scenarios"))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for sc in scenarios:
            w.writerow([sc.name, int(sc.seed), int(sc.is_edge_case)]
                       + [repr(float(sc.layers[c])) for c in VARIABLES])


def load_scenarios(path) -> list:
    _, header, body = _read_table(path, "tmtune-scenarios")
    out = []
    for lineno, row in body:
        try:
            seed = int(row["seed"])
            edge = bool(int(row["is_edge_case"]))
        except (KeyError, ValueError):
            raise FormatError(f"{path}:{lineno}: bad seed/is_edge_case field") from None
        layers = {k: _float(path, lineno, k, row[k]) for k in VARIABLES}
        if layers["duration"] <= 0:
            raise FormatError(f"{path}:{lineno}: duration must be > 0")
        out.append(Scenario(layers, seed=seed, is_edge_case=edge, name=row.get("name", "")))
    return out
