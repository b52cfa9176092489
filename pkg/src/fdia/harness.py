"""End-to-end attack trials and Monte Carlo campaigns.

One trial runs the attacker pipeline on a fresh stochastic trajectory:
simulate, read PMUs in the attacking region, identify region parameters,
synthesise the attack for the requested target phasor, then hand the
defender a clean and an attacked RTU snapshot (taken at the end of the PMU
window) and compare both residuals with the detection threshold.

Seeds: trial ``k`` of a campaign with master seed ``m`` derives all of its
random streams from ``numpy.random.SeedSequence(m, spawn_key=(0, k))``; the
base (no-attack) campaign that sets the threshold uses ``spawn_key=(1, k)``.
Adding trials therefore never changes earlier ones.
"""
from __future__ import annotations

import copy
import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .attack import (AttackRegion, BaseValues, apply_attack, build_attack_vector, build_region,
                     complete_malicious_state)
from .dynamics import simulate
from .errors import FdiaError
from .estimation import EstimatorOptions, PmuSnapshot, estimate, select_threshold
from .grid import NetworkModel, resolve_case, solve_power_flow
from .measurement import PmuNoiseSpec, pmu_from_states, sample_pmu, sample_rtu, PmuSeries
from .ou import RegionParams, identify_region

SCHEMA_VERSION = 1
CSV_COLUMNS = ["seed", "r_pre", "r_post", "bypassed", "v_err", "delta_err"]

DEFAULTS: dict[str, Any] = {
    "case_path": "ieee39",
    "case_overrides": {},
    "sigma": None,
    "target_bus": 28,
    "attack": {"factor": 0.8, "magnitude": None, "angle_deg": None},
    "sim": {"duration": 300.0, "dt": 1.0 / 600.0, "scheme": "exponential", "backend": None},
    "pmu": {"rate_hz": 60.0, "noise": "relative", "level": 0.1, "basis": "range",
            "N": 18000, "n_small": 10},
    "lag_seconds": 0.5,
    "rtu_noise_std": 0.05,
    "estimator": {},
    "se_pmu_buses": [],
    "bdd": {"quantile": 0.95, "base_trials": 1000, "gamma": None, "base_spacing": 1.0},
    "trials": 1000,
    "master_seed": 0,
    "use_true_params": False,
    "reuse_estimate": False,
    "workers": 1,
}


def _merge(base: dict, over: Mapping, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ValueError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and base[k] and isinstance(v, Mapping) and k != "case_overrides":
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment knobs; see :data:`DEFAULTS` for every field."""

    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __post_init__(self):
        d = self.data
        if int(d["trials"]) < 1:
            raise ValueError("trials must be >= 1")
        p = d["pmu"]
        if p["rate_hz"] <= 0:
            raise ValueError("pmu.rate_hz must be positive")
        if p["level"] < 0 or d["rtu_noise_std"] < 0:
            raise ValueError("noise levels must be non-negative")
        avail = int(round(d["sim"]["duration"] * p["rate_hz"]))
        if not 2 <= p["N"] <= avail:
            raise ValueError(f"pmu.N={p['N']} must lie in [2, duration x rate = {avail}]")
        if not 2 <= p["n_small"] <= p["N"]:
            raise ValueError("pmu.n_small must lie in [2, N]")
        if d["sim"]["duration"] <= 0 or d["sim"]["dt"] <= 0:
            raise ValueError("sim.duration and sim.dt must be positive")
        if d["lag_seconds"] <= 0:
            raise ValueError("lag_seconds must be positive")
        b = d["bdd"]
        if b["gamma"] is None and int(b["base_trials"]) < 1:
            raise ValueError("bdd.base_trials must be >= 1 when gamma is not fixed")
        if not 0 < b["quantile"] < 1:
            raise ValueError("bdd.quantile must lie in (0, 1)")
        a = d["attack"]
        if a["factor"] is None and a["magnitude"] is None:
            raise ValueError("attack needs a factor or an absolute magnitude")
        EstimatorOptions.from_dict(d["estimator"])
        PmuNoiseSpec(p["noise"], p["level"], p["basis"])

    @classmethod
    def from_dict(cls, doc: Mapping | None = None) -> "ExperimentConfig":
        return cls(_merge(DEFAULTS, doc or {}))

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        return cls.from_json(path.read_text())

    def with_overrides(self, over: Mapping) -> "ExperimentConfig":
        return ExperimentConfig(_merge(self.data, over))

    def set_path(self, dotted: str, value) -> "ExperimentConfig":
        keys = dotted.split(".")
        over: dict = {}
        cur = over
        for k in keys[:-1]:
            cur[k] = {}
            cur = cur[k]
        cur[keys[-1]] = value
        return self.with_overrides(over)

    def to_json(self) -> str:
        return json.dumps(self.data, indent=1, sort_keys=True)

    def __getitem__(self, key):
        return self.data[key]

    @property
    def estimator(self) -> EstimatorOptions:
        return EstimatorOptions.from_dict(self.data["estimator"])

    @property
    def pmu_noise(self) -> PmuNoiseSpec:
        p = self.data["pmu"]
        return PmuNoiseSpec(p["noise"], p["level"], p["basis"])


# ---------------------------------------------------------------------------
# network and seeds
# ---------------------------------------------------------------------------

@lru_cache(maxsize=16)
def _network_cached(case: str, overrides_json: str, sigma) -> tuple[NetworkModel, Any]:
    net = resolve_case(case)
    if sigma is not None:
        net = net.with_sigma(float(sigma))
    over = json.loads(overrides_json)
    if over:
        net = net.with_bus_updates({int(k): v for k, v in over.items()})
    return net, solve_power_flow(net)


def network_for(cfg: ExperimentConfig):
    d = cfg.data
    return _network_cached(str(d["case_path"]), json.dumps(d["case_overrides"], sort_keys=True), d["sigma"])


def trial_seeds(master_seed: int, index: int, domain: int = 0) -> dict[str, int]:
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(domain, int(index)))
    s = ss.generate_state(4, dtype=np.uint32)
    return {"trial": int(s[0]), "sim": int(s[1]), "pmu": int(s[2]), "rtu": int(s[3])}


def wilson_interval(k: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if n == 0:
        return (0.0, 1.0)
    p = k / n
    den = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return (max(0.0, centre - half), min(1.0, centre + half))


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------

@dataclass
class TrialResult:
    index: int
    seed: int
    r_pre: float
    r_post: float
    bypassed: bool
    v_err: float = float("nan")
    delta_err: float = float("nan")
    v_hat_post: float = float("nan")
    delta_hat_post: float = float("nan")
    intended: tuple = (float("nan"), float("nan"))
    params: dict | None = None
    stage_error: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intended"] = list(self.intended)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrialResult":
        d = dict(d)
        d["intended"] = tuple(d.get("intended", (float("nan"), float("nan"))))
        return cls(**d)


@dataclass
class SuccessStats:
    p_bypass: float
    ci_95: tuple
    gamma: float
    n_trials: int
    n_bypassed: int
    n_failed: int
    trials: list = field(default_factory=list)
    base_residuals: list = field(default_factory=list)
    label: str = ""
    config: dict = field(default_factory=dict)

    def histograms(self, bins: int = 30) -> dict:
        pre = np.array([t.r_pre for t in self.trials], dtype=float)
        post = np.array([t.r_post for t in self.trials], dtype=float)
        allv = np.concatenate([pre, post])
        allv = allv[np.isfinite(allv)]
        if allv.size == 0:
            return {"edges": [], "pre": [], "post": []}
        edges = np.histogram_bin_edges(allv, bins=bins)
        return {"edges": edges.tolist(),
                "pre": np.histogram(pre[np.isfinite(pre)], edges)[0].tolist(),
                "post": np.histogram(post[np.isfinite(post)], edges)[0].tolist()}

    @property
    def residual_histogram_pre(self):
        h = self.histograms()
        return h["edges"], h["pre"]

    @property
    def residual_histogram_post(self):
        h = self.histograms()
        return h["edges"], h["post"]

    def failures_by_stage(self) -> dict:
        out: dict[str, int] = {}
        for t in self.trials:
            if t.stage_error:
                stage = t.stage_error.split(":", 1)[0]
                out[stage] = out.get(stage, 0) + 1
        return out

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "label": self.label, "p_bypass": self.p_bypass,
                "ci_95": list(self.ci_95), "gamma": self.gamma, "n_trials": self.n_trials,
                "n_bypassed": self.n_bypassed, "n_failed": self.n_failed,
                "failures_by_stage": self.failures_by_stage(),
                "histograms": self.histograms(), "base_residuals": list(self.base_residuals),
                "trials": [t.to_dict() for t in self.trials], "config": self.config}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SuccessStats":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported results schema {d.get('schema_version')!r}")
        return cls(d["p_bypass"], tuple(d["ci_95"]), d["gamma"], d["n_trials"], d["n_bypassed"],
                   d["n_failed"], [TrialResult.from_dict(t) for t in d["trials"]],
                   list(d.get("base_residuals", [])), d.get("label", ""), d.get("config", {}))


def aggregate(trials: Sequence[TrialResult], gamma: float, label: str = "", config=None,
              base_residuals=()) -> SuccessStats:
    trials = sorted(trials, key=lambda t: t.index)
    n = len(trials)
    k = sum(1 for t in trials if t.bypassed)
    return SuccessStats(k / n if n else 0.0, wilson_interval(k, n), gamma, n, k,
                        sum(1 for t in trials if t.stage_error), list(trials),
                        list(base_residuals), label, dict(config or {}))


# ---------------------------------------------------------------------------
# per-seed pipeline with stage caching
# ---------------------------------------------------------------------------

class _StageError(Exception):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"{stage}: {exc}")
        self.stage = stage


class TrialContext:
    """Caches the expensive stages of one seed so sweeps can share them."""

    def __init__(self, index: int, master_seed: int):
        self.index = index
        self.seeds = trial_seeds(master_seed, index)
        self._cache: dict = {}

    def _memo(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def trajectory(self, cfg: ExperimentConfig):
        d = cfg.data
        net, eq = network_for(cfg)
        sim = d["sim"]
        rec = int(round(1.0 / (sim["dt"] * d["pmu"]["rate_hz"])))
        key = ("traj", d["case_path"], json.dumps(d["case_overrides"], sort_keys=True), d["sigma"],
               json.dumps(sim, sort_keys=True), rec)
        return self._memo(key, lambda: simulate(
            net, sim["duration"], sim["dt"], self.seeds["sim"], record_every=rec,
            scheme=sim["scheme"], equilibrium=eq, backend=sim["backend"]))

    def pmu(self, cfg: ExperimentConfig, region: AttackRegion) -> PmuSeries:
        d = cfg.data
        net, _ = network_for(cfg)
        traj = self.trajectory(cfg)
        key = ("pmu", id(traj), tuple(sorted(region.omega_a)), json.dumps(d["pmu"], sort_keys=True))

        def build():
            series = sample_pmu(traj, net, sorted(region.omega_a), d["pmu"]["rate_hz"],
                                cfg.pmu_noise, self.seeds["pmu"])
            return series.last(int(d["pmu"]["N"]))
        return self._memo(key, build)

    def params(self, cfg: ExperimentConfig, region: AttackRegion) -> RegionParams:
        d = cfg.data
        net, _ = network_for(cfg)
        if d["use_true_params"]:
            return RegionParams.from_network(net, region.l_a, region.interior)
        series = self.pmu(cfg, region)
        lag = int(round(d["lag_seconds"] * d["pmu"]["rate_hz"]))
        key = ("params", id(series), lag, d["pmu"]["n_small"])
        return self._memo(key, lambda: identify_region(series, region, lag, d["pmu"]["n_small"]))

    def snapshot(self, cfg: ExperimentConfig):
        net, _ = network_for(cfg)
        traj = self.trajectory(cfg)
        key = ("rtu", id(traj), cfg.data["rtu_noise_std"])
        return self._memo(key, lambda: sample_rtu(net, traj.state(-1), cfg.data["rtu_noise_std"],
                                                  self.seeds["rtu"]))

    def defender(self, cfg: ExperimentConfig, z, pmu_snap, tag):
        key = ("est", tag, json.dumps(cfg.data["estimator"], sort_keys=True))
        net, _ = network_for(cfg)
        return self._memo(key, lambda: estimate(net, z, pmu_snap, cfg.estimator))


def _target_phasor(cfg: ExperimentConfig, base_v: float, base_d: float) -> tuple[float, float]:
    a = cfg.data["attack"]
    v = a["magnitude"] if a["magnitude"] is not None else a["factor"] * base_v
    d = math.radians(a["angle_deg"]) if a["angle_deg"] is not None else base_d
    return float(v), float(d)


def _se_pmu_snapshot(cfg: ExperimentConfig, traj, pmu_bad: PmuSeries | None, region) -> PmuSnapshot | None:
    """Defender PMU readings (true values, attacked where the attacker overrides)."""
    buses = cfg.data["se_pmu_buses"]
    if not cfg.estimator.include_pmu:
        return None
    net, _ = network_for(cfg)
    buses = sorted(buses or region.omega_a)
    v, d, i, th = pmu_from_states(net, traj.angles[-1], traj.magnitudes[-1], buses)
    readings = {b: (float(v[0, c]), float(d[0, c]), float(i[0, c]), float(th[0, c]))
                for c, b in enumerate(buses)}
    if pmu_bad is not None:
        for b in buses:
            if b in pmu_bad.bus_ids:
                c = pmu_bad.column(b)
                readings[b] = (float(pmu_bad.v[-1, c]), float(pmu_bad.delta[-1, c]),
                               float(pmu_bad.i[-1, c]), float(pmu_bad.theta[-1, c]))
    return PmuSnapshot(readings)


def _run_in_context(cfg: ExperimentConfig, ctx: TrialContext, gamma: float,
                    shared_params: RegionParams | None = None) -> TrialResult:
    d = cfg.data
    net, _ = network_for(cfg)
    seed = ctx.seeds["trial"]
    stage = "region"
    try:
        region = build_region(net, d["target_bus"])
        stage = "simulate"
        traj = ctx.trajectory(cfg)
        stage = "pmu"
        series = ctx.pmu(cfg, region)
        stage = "estimation"
        params = shared_params if shared_params is not None else ctx.params(cfg, region)
        stage = "attack"
        base = BaseValues.from_pmu(series)
        t = d["target_bus"]
        target = _target_phasor(cfg, *base.phasors[t])
        mal = complete_malicious_state(region, params, base.phasors, target)
        vec = build_attack_vector(net, region, params, base, mal)
        stage = "state_estimation"
        z = ctx.snapshot(cfg)
        z_bad, pmu_bad = apply_attack(z, series, vec)
        pre = ctx.defender(cfg, z, _se_pmu_snapshot(cfg, traj, None, region), "pre")
        if vec.is_zero:
            post = pre
        else:
            post = estimate(net, z_bad, _se_pmu_snapshot(cfg, traj, pmu_bad, region), cfg.estimator)
    except FdiaError as exc:
        r_pre = float("nan")
        if stage in ("attack", "estimation"):
            try:
                z = ctx.snapshot(cfg)
                r_pre = ctx.defender(cfg, z, _se_pmu_snapshot(cfg, ctx.trajectory(cfg), None, region),
                                     "pre").residual_inf
            except FdiaError:
                pass
        return TrialResult(ctx.index, seed, r_pre, float("nan"), False,
                           stage_error=f"{stage}: {exc}")
    k = net.index[t]
    vh, dh = float(post.x_hat.magnitudes[k]), float(post.x_hat.angles[k])
    return TrialResult(ctx.index, seed, pre.residual_inf, post.residual_inf,
                       bool(post.residual_inf < gamma), abs(vh - target[0]), abs(dh - target[1]),
                       vh, dh, target, params.to_dict())


def run_trial(cfg: ExperimentConfig, seed: int, gamma: float | None = None) -> TrialResult:
    """Run one trial; ``seed`` is the trial index within ``cfg.master_seed``.

    Without ``gamma`` the fixed ``bdd.gamma`` is used, or infinity when the
    config leaves it to a base campaign (so ``bypassed`` is then vacuous).
    """
    if gamma is None:
        gamma = cfg.data["bdd"]["gamma"] if cfg.data["bdd"]["gamma"] is not None else math.inf
    return _run_in_context(cfg, TrialContext(seed, cfg.data["master_seed"]), gamma)


# ---------------------------------------------------------------------------
# threshold
# ---------------------------------------------------------------------------

def base_residuals(cfg: ExperimentConfig) -> list[float]:
    """Residuals of the defender on attack-free snapshots.

    Snapshots are taken every ``bdd.base_spacing`` seconds from one long
    simulation seeded from the base-campaign domain.
    """
    d = cfg.data
    b = d["bdd"]
    net, eq = network_for(cfg)
    n = int(b["base_trials"])
    sim = d["sim"]
    rec = max(1, int(round(b["base_spacing"] / sim["dt"])))
    seeds = trial_seeds(d["master_seed"], 0, domain=1)
    traj = simulate(net, (n + 1) * rec * sim["dt"], sim["dt"], seeds["sim"], record_every=rec,
                    scheme=sim["scheme"], equilibrium=eq, backend=sim["backend"])
    region = build_region(net, d["target_bus"])
    out = []
    for k in range(n):
        s = trial_seeds(d["master_seed"], k, domain=1)
        x = traj.state(k)
        z = sample_rtu(net, x, d["rtu_noise_std"], s["rtu"])
        snap = None
        if cfg.estimator.include_pmu:
            buses = sorted(d["se_pmu_buses"] or region.omega_a)
            v, dd, i, th = pmu_from_states(net, traj.angles[k], traj.magnitudes[k], buses)
            snap = PmuSnapshot({bb: (float(v[0, c]), float(dd[0, c]), float(i[0, c]), float(th[0, c]))
                                for c, bb in enumerate(buses)})
        try:
            out.append(estimate(net, z, snap, cfg.estimator).residual_inf)
        except FdiaError:
            continue
    return out


def threshold_for(cfg: ExperimentConfig) -> tuple[float, list[float]]:
    b = cfg.data["bdd"]
    if b["gamma"] is not None:
        return float(b["gamma"]), []
    try:
        res = base_residuals(cfg)
    except FdiaError:
        # no attack-free data means no threshold; every trial then counts as detected
        return float("nan"), []
    if not res:
        return float("nan"), []
    return select_threshold(res, b["quantile"]), res


# ---------------------------------------------------------------------------
# campaigns
# ---------------------------------------------------------------------------

def _chunk_worker(args):
    cfg_json, variants, indices, gammas = args
    cfg = ExperimentConfig.from_json(cfg_json)
    return _run_indices(cfg, [(lbl, ExperimentConfig.from_json(v)) for lbl, v in variants],
                        indices, gammas)


def _run_indices(cfg: ExperimentConfig, variants, indices, gammas, shared=None):
    out: dict[str, list[TrialResult]] = {lbl: [] for lbl, _ in variants}
    for i in indices:
        ctx = TrialContext(i, cfg.data["master_seed"])
        for lbl, vcfg in variants:
            out[lbl].append(_run_in_context(vcfg, ctx, gammas[lbl],
                                            shared.get(lbl) if shared else None))
    return out


def run_sweep(cfg: ExperimentConfig, variants: Mapping[str, Mapping] | None = None,
              workers: int | None = None) -> dict[str, SuccessStats]:
    """Run several config variants over the same seeds.

    Each variant is a partial config merged onto ``cfg``.  Stages whose
    inputs do not change between variants (simulation, PMU sampling,
    identification, RTU noise) are computed once per seed.  Each variant gets
    its threshold from its own base campaign unless ``bdd.gamma`` is fixed.
    """
    variants = dict(variants or {"": {}})
    vcfgs = [(lbl, cfg.with_overrides(v)) for lbl, v in variants.items()]
    gammas, bases = {}, {}
    cache: dict[str, tuple] = {}
    for lbl, vc in vcfgs:
        key = json.dumps({k: vc.data[k] for k in ("case_path", "case_overrides", "sigma", "sim",
                                                   "rtu_noise_std", "estimator", "bdd",
                                                   "master_seed", "target_bus", "se_pmu_buses")},
                         sort_keys=True)
        if key not in cache:
            cache[key] = threshold_for(vc)
        gammas[lbl], bases[lbl] = cache[key]
    n = int(cfg.data["trials"])
    shared = None
    if cfg.data["reuse_estimate"]:
        shared = {}
        ctx0 = TrialContext(0, cfg.data["master_seed"])
        for lbl, vc in vcfgs:
            net, _ = network_for(vc)
            try:
                shared[lbl] = ctx0.params(vc, build_region(net, vc.data["target_bus"]))
            except FdiaError:
                shared[lbl] = None
    workers = int(workers or cfg.data["workers"] or 1)
    if workers <= 1 or n == 1 or shared is not None:
        results = _run_indices(cfg, vcfgs, range(n), gammas, shared)
    else:
        chunks = [list(range(n))[w::workers] for w in range(workers)]
        payload = [(cfg.to_json(), [(lbl, vc.to_json()) for lbl, vc in vcfgs], ch, gammas)
                   for ch in chunks if ch]
        results = {lbl: [] for lbl, _ in vcfgs}
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for part in pool.map(_chunk_worker, payload):
                for lbl, trials in part.items():
                    results[lbl].extend(trials)
    return {lbl: aggregate(results[lbl], gammas[lbl], lbl, vc.data, bases[lbl])
            for lbl, vc in vcfgs}


def run_monte_carlo(cfg: ExperimentConfig, workers: int | None = None) -> SuccessStats:
    return run_sweep(cfg, {"": {}}, workers)[""]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def export_results(stats: SuccessStats, path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.json`` (summary) and ``<path>.csv`` (per-trial table)."""
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".json", ".csv") else path
    jpath, cpath = stem.with_suffix(".json"), stem.with_suffix(".csv")
    jpath.parent.mkdir(parents=True, exist_ok=True)
    jpath.write_text(json.dumps(stats.to_dict(), indent=1))
    with open(cpath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for t in stats.trials:
            w.writerow([t.seed, repr(t.r_pre), repr(t.r_post), int(t.bypassed), repr(t.v_err),
                        repr(t.delta_err)])
    return jpath, cpath


def load_results(path: str | Path) -> SuccessStats:
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    return SuccessStats.from_dict(json.loads(path.read_text()))


def empty_stats(gamma: float = float("nan")) -> SuccessStats:
    return aggregate([], gamma)
