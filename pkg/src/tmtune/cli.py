"""``tmtune`` command line: one subcommand per pipeline stage.

Every command writes into ``<output root>/<command>-<digest>/`` together with a
``manifest.json`` listing inputs, seeds and sha256 hashes of all files. The
digest covers the command arguments and input contents, so identical
invocations land in the same directory and produce identical bytes.

Exit codes: 0 success, 1 runtime failure, 2 usage, configuration or input
format error. ``TMTUNE_OUTPUT_DIR`` overrides the output root.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import calibration as cal
from .agent import read_log, train
from .config import ConfigError, RunConfig
from .controller import constant_parameter_set, conservative_parameter_set
from .evalkit import compare, rolling_stats, write_report
from .nncore import CheckpointError, save_checkpoint
from .scenario import (VARIABLES, FormatError, InsufficientData, bundled_usage,
                       fit_layer_statistics, load_scenarios, load_stats, load_usage,
                       sample_scenarios, save_scenarios, save_stats)
from .tsenv import (EvalConfig, ParameterDataset, TuningEnv, load_trajectory, save_trajectory,
                    simulate)

__all__ = ["main", "build_parser", "load_stats_source"]

OUTPUT_ENV = "TMTUNE_OUTPUT_DIR"
DEFAULT_ROOT = "tmtune-runs"
USER_ERRORS = (ConfigError, FormatError, cal.CalibrationError, InsufficientData, CheckpointError,
               FileNotFoundError, IsADirectoryError)


class UsageError(ValueError):
    pass


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _is_bundled(src: str) -> bool:
    return src.startswith("bundled:")


class Run:
    """Run directory plus manifest bookkeeping."""

    def __init__(self, command: str, args: dict, inputs, root=None, seeds=None):
        self.command = command
        self.args = args
        self.inputs = {}
        for p in inputs:
            self.inputs[str(p)] = p if _is_bundled(str(p)) else _sha256(p)
        self.seeds = dict(seeds or {})
        key = json.dumps({"command": command, "args": args, "inputs": sorted(self.inputs.values()),
                          "seeds": self.seeds}, sort_keys=True)
        digest = hashlib.sha256(key.encode()).hexdigest()[:12]
        root = os.environ.get(OUTPUT_ENV) or root or DEFAULT_ROOT
        self.dir = Path(root) / f"{command}-{digest}"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.outputs = []

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.dir / name

    def finish(self) -> Path:
        manifest = {"command": self.command, "args": self.args, "seeds": self.seeds,
                    "inputs": self.inputs,
                    "outputs": {n: _sha256(self.dir / n) for n in sorted(set(self.outputs))}}
        with open(self.dir / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return self.dir


def load_stats_source(src: str) -> dict:
    """Layer statistics from ``bundled:<climate>``, a stats file, or a usage file."""
    if _is_bundled(src):
        climate = src.split(":", 1)[1]
        if climate not in ("hot", "cold", "moderate", "all"):
            raise UsageError(f"unknown bundled climate {climate!r}")
        return fit_layer_statistics(bundled_usage(climate))
    with open(src) as fh:
        first = fh.readline()
    if "format=tmtune-layer-stats" in first:
        return load_stats(src)
    return fit_layer_statistics(load_usage(src))


# --------------------------------------------------------------------------
# commands

def cmd_fit_stats(a) -> int:
    if _is_bundled(a.usage):
        data = bundled_usage(a.usage.split(":", 1)[1])
    elif not Path(a.usage).read_text().strip():
        raise InsufficientData(f"{a.usage}: file is empty, no usage records to fit")
    else:
        data = load_usage(a.usage)
    stats = fit_layer_statistics(data)
    run = Run("fit-stats", {"usage": a.usage}, [a.usage], a.output_dir)
    save_stats(stats, run.path("stats.csv"))
    print(f"{'variable':<10} {'layer':>5} {'mu':>12} {'sigma':>12} {'clip_lo':>12} {'clip_hi':>12}")
    for name in VARIABLES:
        s = stats[name]
        print(f"{name:<10} {s.layer:>5} {s.mu:12.4f} {s.sigma:12.4f} {s.clip_lo:12.4f} {s.clip_hi:12.4f}")
    print(run.finish())
    return 0


def cmd_gen_scenarios(a) -> int:
    if a.n < 1:
        raise UsageError("--n must be >= 1")
    if not 0.0 <= a.p_edge <= 1.0:
        raise UsageError("--p-edge must lie in [0, 1]")
    stats = load_stats_source(a.stats)
    scs = sample_scenarios(stats, a.n, a.seed, a.p_edge)
    run = Run("gen-scenarios", {"stats": a.stats, "n": a.n, "p_edge": a.p_edge}, [a.stats],
              a.output_dir, seeds={"seed": a.seed})
    save_scenarios(scs, run.path("scenarios.csv"))
    print(f"{len(scs)} scenarios, {sum(s.is_edge_case for s in scs)} edge cases")
    print(run.finish())
    return 0


def _config(path) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def cmd_simulate(a) -> int:
    cfg = _config(a.config)
    scs = load_scenarios(a.scenarios)
    ps, _ = cal.load_calibration(a.calibration, phi_max=cfg.eval.phi_max)
    picks = range(len(scs)) if a.index is None else [a.index]
    if a.index is not None and not 0 <= a.index < len(scs):
        raise UsageError(f"--index must lie in [0, {len(scs) - 1}]")
    inputs = [a.scenarios, a.calibration] + ([a.config] if a.config else [])
    run = Run("simulate", {"index": a.index}, inputs, a.output_dir or cfg.output_dir)
    for k in picks:
        traj = simulate(scs[k], cfg.plant, ps, cfg.eval, cfg.vehicle, cfg.drive)
        save_trajectory(traj, run.path(f"trajectory_{k:03d}.tsv"))
        print(f"scenario {k}: {traj.T_D.size} samples, failed={traj.failed}")
    print(run.finish())
    return 0


def cmd_train(a) -> int:
    cfg = RunConfig.load(a.config)
    stats = load_stats_source(cfg.stats)
    run = Run("train", {"config_digest": cfg.digest}, [a.config, cfg.stats],
              a.output_dir or cfg.output_dir, seeds={"env": cfg.seed, "agent": cfg.agent.seed})
    cfg.save(run.path("config.json"))
    env_cfg = cfg.env_config()
    dataset = ParameterDataset(nominal=cfg.plant)
    envs = [TuningEnv(stats, dataset, env_cfg, seed=cfg.seed * 1000 + i, veh=cfg.vehicle)
            for i in range(cfg.train.n_envs)]

    def progress(row):
        if not a.quiet:
            print(f"episode {row['episode']:4d}  steps {row['steps']:6d}  "
                  f"reward {row['reward_mean']:9.3f}  alpha {row['alpha']:.2e}", flush=True)

    pool = ThreadPoolExecutor(cfg.train.n_envs) if cfg.mode == "parallel" else None
    try:
        res = train(envs, cfg.agent, cfg.train.n_episodes, log_path=run.path("train_log.tsv"),
                    stabilization_window=cfg.train.stabilization_window, progress=progress,
                    pool=pool)
    finally:
        if pool is not None:
            pool.shutdown()
    save_checkpoint(run.path("checkpoint.bin"), res.agent.state_dict())
    label = f"best episode {res.best_episode} env {res.best_env}"
    cal.save_calibration(res.best, run.path("best.cal"), label=label)
    summary = {"best_episode": res.best_episode, "best_env": res.best_env,
               "best_reward": res.best_reward, "stabilized_at": res.stabilized_at,
               "episodes": len(res.log), "steps": res.log[-1]["steps"]}
    with open(run.path("summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"stabilized at episode {res.stabilized_at}; {label}, reward {res.best_reward:.3f}")
    print(run.finish())
    return 0


def cmd_evaluate(a) -> int:
    cfg = _config(a.config)
    sets = []
    for k, path in enumerate(a.calibrations):
        ps, label = cal.load_calibration(path, phi_max=cfg.eval.phi_max)
        sets.append((label or Path(path).stem or f"set{k}", ps))
    labels = [lab for lab, _ in sets]
    if len(set(labels)) != len(labels):
        sets = [(f"{lab}#{k}", ps) for k, (lab, ps) in enumerate(sets)]
    suite = load_scenarios(a.suite)
    inputs = list(a.calibrations) + [a.suite] + ([a.config] if a.config else [])
    run = Run("evaluate", {"n_sets": len(sets)}, inputs, a.output_dir or cfg.output_dir)
    rows = compare(sets, suite, cfg.plant, cfg.eval, cfg.vehicle, cfg.drive)
    write_report(rows, run.path("report.tsv"), run.path("report.json"))
    for lab, _ in sets:
        mine = [r for r in rows if r.report.label == lab]
        mae = np.mean([r.report.MAE for r in mine])
        print(f"{lab:<30} mean MAE {mae:8.4f}  failures {sum(r.failed for r in mine)}")
    print(run.finish())
    return 0


def cmd_export_calibration(a) -> int:
    if a.source == "conservative":
        ps, label = conservative_parameter_set(a.scale), f"conservative x{a.scale!r}"
        inputs = []
    elif a.source == "constant":
        if a.p is None or a.i is None:
            raise UsageError("constant export needs --p and --i")
        ps, label = constant_parameter_set(a.p, a.i), f"constant P={a.p!r} I={a.i!r}"
        inputs = []
    else:
        ps, label = cal.load_calibration(a.source)
        inputs = [a.source]
    phi_max = EvalConfig().phi_max
    cal.loads(cal.dumps(ps), phi_max=phi_max)      # enforces ranges before writing
    run = Run("export-calibration", {"source": a.source, "scale": a.scale, "p": a.p, "i": a.i},
              inputs, a.output_dir)
    cal.save_calibration(ps, run.path("calibration.cal"), label=label)
    print(run.finish())
    return 0


def _reward_curve(rows, window: int, out) -> None:
    rewards = np.array([r["reward_mean"] for r in rows])
    rm, rs = rolling_stats(rewards, window)
    with open(out, "w") as fh:
        fh.write(f"# format=tmtune-reward-curve version=1 window={window}\n")
        fh.write("episode\treward\trolling_mean\trolling_std\tlower\tupper\tbaseline\n")
        for r, m, s in zip(rows, rm, rs):
            vals = [r["reward_mean"], m, s, m - s, m + s, r["baseline_mean"]]
            fh.write(f"{r['episode']}\t" + "\t".join(repr(float(v)) for v in vals) + "\n")


def _signal_traces(traj: dict, out) -> None:
    cols = ("time", "e_T", "u_vlv", "v", "dT")
    with open(out, "w") as fh:
        fh.write("# format=tmtune-signals version=1\n")
        fh.write("\t".join(cols) + "\n")
        for row in zip(*(traj[c] for c in cols)):
            fh.write("\t".join(repr(float(x)) for x in row) + "\n")


def cmd_plot_data(a) -> int:
    if a.window < 1:
        raise UsageError("--window must be >= 1")
    with open(a.input) as fh:
        first = fh.readline()
    run = Run("plot-data", {"window": a.window}, [a.input], a.output_dir)
    if "format=tmtune-trainlog" in first:
        _reward_curve(read_log(a.input), a.window, run.path("reward_curve.tsv"))
    elif "format=tmtune-trajectory" in first:
        _signal_traces(load_trajectory(a.input), run.path("signals.tsv"))
    else:
        raise FormatError(f"{a.input}:1: expected a training log or a trajectory dump")
    print(run.finish())
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tmtune", description="Lookup-table PI tuning for a coolant loop.")
    p.add_argument("--output-dir", default=None,
                   help=f"output root (default from config, {OUTPUT_ENV} wins)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("fit-stats", help="fit per-layer Gaussian statistics to usage data")
    s.add_argument("usage", help="usage CSV file or bundled:<hot|cold|moderate|all>")
    s.set_defaults(func=cmd_fit_stats)

    s = sub.add_parser("gen-scenarios", help="sample a scenario suite")
    s.add_argument("stats", help="stats file, usage file or bundled:<climate>")
    s.add_argument("--n", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--p-edge", type=float, default=0.05)
    s.set_defaults(func=cmd_gen_scenarios)

    s = sub.add_parser("simulate", help="closed-loop simulation, dumps trajectories")
    s.add_argument("scenarios")
    s.add_argument("calibration")
    s.add_argument("--config")
    s.add_argument("--index", type=int, default=None, help="only this scenario")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="train the tuning agent")
    s.add_argument("config", help="run configuration (JSON)")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="compare calibrations on a scenario suite")
    s.add_argument("calibrations", nargs="+")
    s.add_argument("--suite", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("export-calibration", help="write a calibration file")
    s.add_argument("source", help="conservative, constant, or a calibration file to re-export")
    s.add_argument("--scale", type=float, default=1.0)
    s.add_argument("--p", type=float, default=None)
    s.add_argument("--i", type=float, default=None)
    s.set_defaults(func=cmd_export_calibration)

    s = sub.add_parser("plot-data", help="plot-ready series from a training log or trajectory")
    s.add_argument("input")
    s.add_argument("--window", type=int, default=15)
    s.set_defaults(func=cmd_plot_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, *USER_ERRORS) as exc:
        print(f"tmtune {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:    # runtime failure
        print(f"tmtune {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
