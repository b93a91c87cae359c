"""Control-quality metrics and the calibration comparison harness."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .controller import ParameterSet
from .plant import PlantParams, VehicleParams
from .scenario import DriveConfig, Scenario
from .tsenv import EvalConfig, eval_scenario

__all__ = [
    "TooShort",
    "MetricReport",
    "METRICS",
    "metrics",
    "metrics_from_trajectory",
    "compare",
    "ComparisonRow",
    "win_rate",
    "rolling_stats",
    "write_report",
    "read_report",
    "stability_sweep",
]

METRICS = ("MAE", "RMSE", "MS_udot", "MTV_y")


class TooShort(ValueError):
    pass


@dataclass(frozen=True)
class MetricReport:
    MAE: float
    RMSE: float
    MS_udot: float
    MTV_y: float
    scenario: str = ""
    label: str = ""

    def values(self) -> tuple:
        return tuple(getattr(self, m) for m in METRICS)


def metrics(e_T, u_vlv, T_D, dt: float, scenario: str = "", label: str = "") -> MetricReport:
    """MAE and RMSE of the error, mean-square valve rate and mean total variation of T_D.

    The valve-rate sum runs over the N-1 first differences but is divided by N.
    """
    e = np.asarray(e_T, dtype=np.float64)
    u = np.asarray(u_vlv, dtype=np.float64)
    y = np.asarray(T_D, dtype=np.float64)
    n = e.size
    if n < 2 or u.size != n or y.size != n:
        raise TooShort("metrics need at least 2 equally long samples")
    if dt <= 0:
        raise ValueError("dt must be positive")
    with np.errstate(over="ignore"):     # diverged runs legitimately give inf
        mae = float(np.mean(np.abs(e)))
        rmse = float(np.sqrt(np.mean(e * e)))
        du = np.diff(u) / dt
        ms = float(np.sum(du * du) / n)
        mtv = float(np.sum(np.abs(np.diff(y))) / (n - 1))
    return MetricReport(mae, rmse, ms, mtv, scenario, label)


def metrics_from_trajectory(traj, scenario: str = "", label: str = "") -> MetricReport:
    return metrics(traj.e_T, traj.u_vlv, traj.T_D, traj.dt, scenario, label)


@dataclass(frozen=True)
class ComparisonRow:
    report: MetricReport
    reward: float
    failed: bool
    best: tuple     # metric names where this label is (jointly) lowest for the scenario


def _scenario_id(sc: Scenario, k: int) -> str:
    return sc.name or f"s{k:03d}-{sc.seed}"


def compare(param_sets, suite, theta: PlantParams = PlantParams(), cfg: EvalConfig = EvalConfig(),
            veh: VehicleParams = VehicleParams(), drive: DriveConfig = DriveConfig()):
    """Score every labelled parameter set on every scenario.

    ``param_sets`` is a sequence of ``(label, ParameterSet)``. Rows come out in
    scenario-major order. Best flags are only assigned when at least two sets
    are compared; a failed (diverged) run never wins.
    """
    param_sets = list(param_sets)
    suite = list(suite)
    if not param_sets or not suite:
        raise ValueError("compare needs at least one parameter set and one scenario")
    labels = [lab for lab, _ in param_sets]
    if len(set(labels)) != len(labels):
        raise ValueError("labels must be unique")
    rows = []
    for k, sc in enumerate(suite):
        sid = _scenario_id(sc, k)
        block = []
        for label, ps in param_sets:
            res = eval_scenario(sc, theta, ps, cfg, veh, drive)
            rep = metrics_from_trajectory(res.trajectory, sid, label)
            block.append((rep, res.reward, res.failed))
        flags = [[] for _ in block]
        if len(block) > 1:
            for m in METRICS:
                vals = [getattr(r, m) if not f and math.isfinite(getattr(r, m)) else math.inf
                        for r, _, f in block]
                lo = min(vals)
                if math.isfinite(lo):
                    for i, v in enumerate(vals):
                        if v == lo:
                            flags[i].append(m)
        rows.extend(ComparisonRow(rep, rew, failed, tuple(fl))
                    for (rep, rew, failed), fl in zip(block, flags))
    return rows


def win_rate(rows, label: str, against: str, metric: str = "MAE") -> float:
    """Share of scenarios where ``label`` scores strictly lower than ``against``."""
    by = {}
    for r in rows:
        by.setdefault(r.report.scenario, {})[r.report.label] = getattr(r.report, metric)
    pairs = [(d[label], d[against]) for d in by.values() if label in d and against in d]
    if not pairs:
        raise ValueError("no scenarios contain both labels")
    return sum(a < b for a, b in pairs) / len(pairs)


def rolling_stats(x, window: int = 15):
    """Trailing rolling mean and (population) standard deviation; NaN until the window is full."""
    x = np.asarray(x, dtype=np.float64)
    mean = np.full(x.size, np.nan)
    std = np.full(x.size, np.nan)
    if window < 1:
        raise ValueError("window must be >= 1")
    for i in range(window - 1, x.size):
        w = x[i - window + 1:i + 1]
        mean[i] = w.mean()
        std[i] = w.std()
    return mean, std


REPORT_COLUMNS = ("scenario", "label", *METRICS, "reward", "failed", "best")


def write_report(rows, tsv_path, json_path=None) -> None:
    """Tab-separated table plus an optional JSON summary (per-label means and win counts)."""
    with open(tsv_path, "w") as fh:
        fh.write("# format=tmtune-report version=1\n")
        fh.write("\t".join(REPORT_COLUMNS) + "\n")
        for r in rows:
            rep = r.report
            vals = [rep.scenario, rep.label, *(repr(v) for v in rep.values()), repr(r.reward),
                    str(int(r.failed)), ",".join(r.best) or "-"]
            fh.write("\t".join(vals) + "\n")
    if json_path is None:
        return
    labels = list(dict.fromkeys(r.report.label for r in rows))
    summary = {"format": "tmtune-report-summary", "version": 1, "labels": {}}
    for lab in labels:
        sel = [r for r in rows if r.report.label == lab]
        entry = {m: float(np.mean([getattr(r.report, m) for r in sel])) for m in METRICS}
        entry["reward"] = float(np.mean([r.reward for r in sel]))
        entry["n_scenarios"] = len(sel)
        entry["n_failed"] = sum(r.failed for r in sel)
        entry["best_counts"] = {m: sum(m in r.best for r in sel) for m in METRICS}
        summary["labels"][lab] = entry
    with open(json_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_report(path) -> list:
    from .scenario import FormatError
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("# format=tmtune-report version=1"):
        raise FormatError(f"{path}:1: not a tmtune-report v1 file")
    if len(lines) < 2 or tuple(lines[1].split("\t")) != REPORT_COLUMNS:
        raise FormatError(f"{path}:2: unexpected columns")
    out = []
    for lineno, line in enumerate(lines[2:], start=3):
        parts = line.split("\t")
        if len(parts) != len(REPORT_COLUMNS):
            raise FormatError(f"{path}:{lineno}: expected {len(REPORT_COLUMNS)} fields")
        rep = MetricReport(*(float(v) for v in parts[2:6]), scenario=parts[0], label=parts[1])
        best = () if parts[8] == "-" else tuple(parts[8].split(","))
        out.append(ComparisonRow(rep, float(parts[6]), bool(int(parts[7])), best))
    return out


def stability_sweep(ps: ParameterSet, scenario: Scenario, theta: PlantParams = PlantParams(),
                    field: str = "C_mix",
                    factors=(1.0, 0.5, 0.2, 0.1, 0.05, 0.02, 0.01, 0.005, 0.002),
                    cfg: EvalConfig = EvalConfig()):
    """Shrink one plant parameter step by step and record reward and divergence.

    Returns a list of dicts ``{factor, reward, failed}``; the first failing factor
    is the adversarial plant used to exercise the divergence path.
    """
    out = []
    for f in factors:
        res = eval_scenario(scenario, theta.scaled(**{field: f}), ps, cfg)
        out.append({"factor": float(f), "reward": res.reward, "failed": res.failed})
    return out

