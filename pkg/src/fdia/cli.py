"""Command-line front end: ``fdia <subcommand> [flags]``.

Exit codes: 0 ok, 2 invalid input, 3 estimation or numerical failure,
4 attack synthesis failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import warnings
from fractions import Fraction
from pathlib import Path

from .attack import BaseValues, build_attack_vector, build_region, complete_malicious_state
from .dynamics import Trajectory, simulate
from .errors import AttackError, ConvergenceError, EstimationError, SimulationError
from .grid import resolve_case, solve_power_flow
from .harness import ExperimentConfig, export_results, load_results, run_sweep
from .measurement import PmuNoiseSpec, PmuSeries, sample_pmu
from .ou import RegionParams, identify_region

EXIT_OK, EXIT_INVALID, EXIT_ESTIMATION, EXIT_ATTACK = 0, 2, 3, 4


class UsageError(ValueError):
    pass


def _seconds(text: str) -> float:
    """Accept decimals or exact fractions such as ``1/600``."""
    try:
        return float(Fraction(text))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def _global_flags(parser: argparse.ArgumentParser, top: bool) -> None:
    d = {} if top else {"default": argparse.SUPPRESS}
    parser.add_argument("--config", type=Path, help="experiment config JSON (all fields optional)", **d)
    parser.add_argument("--seed", type=int, help="random seed (integer); fully determines stochastic output", **d)
    parser.add_argument("--out-dir", type=Path, help="directory for output files (default: current directory)", **d)
    parser.add_argument("--workers", type=int, help="worker processes for Monte Carlo trials (count)", **d)


def _pmu_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rate-hz", type=float, default=60.0, help="PMU reporting rate [Hz] (default 60)")
    p.add_argument("--pmu-noise", choices=["none", "relative", "tve"], default="relative",
                   help="PMU noise model (default relative)")
    p.add_argument("--pmu-level", type=float, default=0.1,
                   help="PMU noise level: fraction of the channel's largest change, or TVE phase std [rad] (default 0.1)")
    p.add_argument("--pmu-basis", choices=["range", "increment"], default="range",
                   help="scale for relative noise, in each channel's unit ([pu] or [rad]): "
                        "window range or largest one-sample step")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fdia", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    _global_flags(ap, top=True)
    sub = ap.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("simulate", help="integrate the stochastic grid and write a trajectory CSV")
    _global_flags(p, top=False)
    p.add_argument("--case", default="ieee39", help="case file path or bundled case name (default ieee39)")
    p.add_argument("--duration", type=_seconds, default=300.0, help="simulated time [s] (default 300)")
    p.add_argument("--dt", type=_seconds, default=1.0 / 600.0, help="integration step [s]; fractions allowed (default 1/600)")
    p.add_argument("--record-every", type=int, default=1, help="keep every k-th step (count, default 1)")
    p.add_argument("--sigma", type=float, default=None, help="override load noise intensity on every load bus (dimensionless)")
    p.add_argument("--scheme", choices=["exponential", "explicit"], default="exponential",
                   help="stochastic step scheme (default exponential)")
    p.add_argument("--out", type=Path, default=None, help="trajectory CSV path (columns t[s], bus_id, v[pu], delta[rad])")

    p = sub.add_parser("identify", help="estimate region line admittances and time constants from PMU data")
    _global_flags(p, top=False)
    p.add_argument("--case", default="ieee39", help="case file path or bundled case name")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--pmu", type=Path, help="PMU CSV (t[s], bus_id, v[pu], delta[rad], i[pu], theta[rad])")
    src.add_argument("--traj", type=Path, help="trajectory CSV to read PMU phasors from")
    p.add_argument("--target", type=int, default=28, help="target bus id (default 28)")
    p.add_argument("--lag-seconds", type=float, default=0.5, help="lag for the regression theorem [s] (default 0.5)")
    p.add_argument("--n-samples", type=int, default=None, help="use only the last N PMU samples (count)")
    p.add_argument("--n-small", type=int, default=10, help="samples for time-constant regression (count, default 10)")
    p.add_argument("--use-true-params", action="store_true", help="emit the case's ground-truth parameters instead")
    _pmu_flags(p)
    p.add_argument("--out", type=Path, default=None, help="RegionParams JSON path (admittances [pu], time constants [s])")

    p = sub.add_parser("attack", help="synthesise an attack vector for a target phasor")
    _global_flags(p, top=False)
    p.add_argument("--case", default="ieee39", help="case file path or bundled case name")
    p.add_argument("--params", type=Path, default=None, help="RegionParams JSON from `identify`")
    p.add_argument("--use-true-params", action="store_true",
                   help="use the case's ground-truth line parameters [pu] instead")
    p.add_argument("--target", type=int, default=28, help="target bus id (default 28)")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--factor", type=float, default=None, help="target magnitude as a multiple of its base value (dimensionless)")
    g.add_argument("--magnitude", type=float, default=None, help="absolute target magnitude [pu]")
    p.add_argument("--angle-deg", type=float, default=None, help="absolute target angle [deg]; base angle kept if omitted")
    p.add_argument("--pmu", type=Path, default=None,
                   help="PMU CSV whose last sample gives base phasors; power-flow equilibrium otherwise")
    p.add_argument("--out", type=Path, default=None, help="AttackVector JSON path (deltas [pu], angles [rad])")

    p = sub.add_parser("montecarlo", help="run a bypass-probability campaign and write figure tables")
    _global_flags(p, top=False)
    p.add_argument("--trials", type=int, default=None, help="number of trials (count); overrides the config")
    p.add_argument("--sweep", default=None,
                   help="dotted config key and comma-separated values, e.g. attack.factor=0.8,0.7 (JSON values)")
    p.add_argument("--use-true-params", action="store_true", help="skip identification and use ground truth")
    p.add_argument("--gamma", type=float, default=None, help="fixed detection threshold on the residual inf-norm [pu]")
    p.add_argument("--bins", type=int, default=30, help="histogram bins (count, default 30)")

    p = sub.add_parser("report", help="summarise saved results and regenerate figure tables")
    _global_flags(p, top=False)
    p.add_argument("results", nargs="+", type=Path, help="results JSON files written by `montecarlo`")
    p.add_argument("--bins", type=int, default=30, help="histogram bins (count, default 30)")
    return ap


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _out_path(args, given: Path | None, default_name: str) -> Path:
    if given is not None:
        path = given if given.is_absolute() or args.out_dir is None else args.out_dir / given
    else:
        path = (args.out_dir or Path(".")) / default_name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _config(args) -> ExperimentConfig:
    return ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_dict({})


def _seed(args, fallback: int = 0) -> int:
    return fallback if args.seed is None else args.seed


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, allow_nan=True))


def _histogram_table(path: Path, stats, bins: int) -> None:
    h = stats.histograms(bins)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count_pre", "count_post"])
        for k in range(len(h["pre"])):
            w.writerow([h["edges"][k], h["edges"][k + 1], h["pre"][k], h["post"][k]])


def _summary_line(label: str, s) -> str:
    return (f"{label or 'campaign'}: p_bypass={s.p_bypass:.4f} CI95=[{s.ci_95[0]:.4f}, {s.ci_95[1]:.4f}] "
            f"gamma={s.gamma:.5g} trials={s.n_trials} failed={s.n_failed}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    if not args.duration > 0:
        raise UsageError("--duration must be positive")
    if not args.dt > 0:
        raise UsageError("--dt must be positive")
    if args.duration < args.dt:
        raise UsageError("--duration must be at least one step --dt")
    if args.record_every < 1:
        raise UsageError("--record-every must be >= 1")
    net = resolve_case(args.case)
    if args.sigma is not None:
        net = net.with_sigma(args.sigma)
    traj = simulate(net, args.duration, args.dt, _seed(args), record_every=args.record_every,
                    scheme=args.scheme)
    out = _out_path(args, args.out, "trajectory.csv")
    traj.to_csv(out)
    print(f"wrote {traj.n_samples} samples x {len(traj.bus_ids)} buses to {out}")
    return EXIT_OK


def cmd_identify(args) -> int:
    net = resolve_case(args.case)
    region = build_region(net, args.target)
    out = _out_path(args, args.out, "params.json")
    if args.use_true_params:
        params = RegionParams.from_network(net, region.l_a, region.interior)
    else:
        if args.pmu is not None:
            series = PmuSeries.from_csv(args.pmu)
        elif args.traj is not None:
            traj = Trajectory.from_csv(args.traj)
            series = sample_pmu(traj, net, sorted(region.omega_a), args.rate_hz,
                                PmuNoiseSpec(args.pmu_noise, args.pmu_level, args.pmu_basis), _seed(args))
        else:
            raise UsageError("identify needs --pmu or --traj (or --use-true-params)")
        if args.n_samples is not None:
            if not 2 <= args.n_samples <= series.n_samples:
                raise UsageError(f"--n-samples must lie in [2, {series.n_samples}]")
            series = series.last(args.n_samples)
        missing = region.omega_a - set(series.bus_ids)
        if missing:
            raise UsageError(f"PMU data lacks region buses {sorted(missing)}")
        lag = int(round(args.lag_seconds * series.rate_hz))
        if lag < 1:
            raise UsageError("--lag-seconds is shorter than one PMU sample")
        params = identify_region(series, region, lag, args.n_small)
    _write_json(out, params.to_dict())
    print(f"region {sorted(region.omega_a)}; parameters written to {out}")
    return EXIT_OK


def cmd_attack(args) -> int:
    net = resolve_case(args.case)
    region = build_region(net, args.target)
    if args.use_true_params:
        params = RegionParams.from_network(net, region.l_a, region.interior)
    elif args.params is not None:
        if not args.params.exists():
            raise FileNotFoundError(f"params file not found: {args.params}")
        params = RegionParams.from_json(args.params.read_text())
    else:
        raise UsageError("attack needs --params or --use-true-params")
    if args.pmu is not None:
        base = BaseValues.from_pmu(PmuSeries.from_csv(args.pmu))
        missing = region.omega_a - set(base.phasors)
        if missing:
            raise UsageError(f"PMU data lacks region buses {sorted(missing)}")
    else:
        base = BaseValues.from_state(net, solve_power_flow(net), sorted(region.omega_a))
    v0, d0 = base.phasors[args.target]
    if args.magnitude is not None:
        vt = args.magnitude
    else:
        vt = (1.0 if args.factor is None else args.factor) * v0
    dt_ = math.radians(args.angle_deg) if args.angle_deg is not None else d0
    mal = complete_malicious_state(region, params, base.phasors, (vt, dt_))
    vec = build_attack_vector(net, region, params, base, mal)
    doc = vec.to_dict()
    doc["region"] = region.to_dict()
    doc["malicious_deg"] = {str(b): [v, math.degrees(d)] for b, (v, d) in sorted(mal.items())}
    out = _out_path(args, args.out, "attack.json")
    _write_json(out, doc)
    zi = ", ".join(f"{z}: {mal[z][0]:.4f} pu at {math.degrees(mal[z][1]):.3f} deg"
                   for z in sorted(region.zero_injection))
    print(f"attack on bus {args.target}: {len(vec.rtu_deltas)} RTU entries"
          + (f"; zero-injection buses {zi}" if zi else "") + f"; written to {out}")
    return EXIT_OK


def _parse_sweep(text: str) -> tuple[str, list]:
    if "=" not in text:
        raise UsageError("--sweep must look like key.path=v1,v2,...")
    key, vals = text.split("=", 1)
    out = []
    for v in vals.split(","):
        try:
            out.append(json.loads(v))
        except json.JSONDecodeError:
            out.append(v)
    if not out:
        raise UsageError("--sweep needs at least one value")
    return key.strip(), out


def cmd_montecarlo(args) -> int:
    cfg = _config(args)
    over: dict = {}
    if args.trials is not None:
        if args.trials < 1:
            raise UsageError("--trials must be >= 1")
        over["trials"] = args.trials
    if args.seed is not None:
        over["master_seed"] = args.seed
    if args.use_true_params:
        over["use_true_params"] = True
    if args.gamma is not None:
        over["bdd"] = {"gamma": args.gamma}
    cfg = cfg.with_overrides(over)
    variants = {"": {}}
    key = None
    if args.sweep:
        key, values = _parse_sweep(args.sweep)
        variants = {}
        for v in values:
            variants[f"{key}={v}"] = cfg.set_path(key, v).data
    out_dir = args.out_dir or Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    results = run_sweep(cfg, variants, args.workers)
    rows = []
    for n, (label, stats) in enumerate(results.items()):
        stem = out_dir / (f"results_{n:02d}" if label else "results")
        export_results(stats, stem)
        _histogram_table(stem.with_name(stem.name + "_hist.csv"), stats, args.bins)
        print(_summary_line(label, stats))
        rows.append((label.split("=", 1)[1] if label else "", stats))
    if key is not None:
        table = out_dir / f"sweep_{key.replace('.', '_')}.csv"
        with open(table, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([key, "p_bypass", "ci_lo", "ci_hi", "gamma", "n_trials", "n_failed"])
            for val, s in rows:
                w.writerow([val, s.p_bypass, s.ci_95[0], s.ci_95[1], s.gamma, s.n_trials, s.n_failed])
        print(f"sweep table written to {table}")
    return EXIT_OK


def cmd_report(args) -> int:
    out_dir = args.out_dir or Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in args.results:
        if not path.exists():
            raise FileNotFoundError(f"results file not found: {path}")
        stats = load_results(path)
        print(_summary_line(stats.label or path.stem, stats))
        fails = stats.failures_by_stage()
        if fails:
            print("  failures by stage: " + ", ".join(f"{k}={v}" for k, v in sorted(fails.items())))
        _histogram_table(out_dir / f"{path.stem}_hist.csv", stats, args.bins)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "identify": cmd_identify, "attack": cmd_attack,
            "montecarlo": cmd_montecarlo, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in ("config", "seed", "out_dir", "workers"):
        if not hasattr(args, name):
            setattr(args, name, None)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.command](args)
    except AttackError as exc:
        print(f"error (attack synthesis): {exc}", file=sys.stderr)
        return EXIT_ATTACK
    except (EstimationError, ConvergenceError, SimulationError) as exc:
        print(f"error (estimation): {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except (ValueError, KeyError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
