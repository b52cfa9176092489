"""End-to-end acceptance checks, one PASS/FAIL line per criterion.

Trial counts default to the documented campaign sizes.  Setting
``FDIA_ACCEPTANCE_TRIALS`` shrinks the Monte Carlo campaigns for quick local
iterations; the verdicts are only meaningful at the default size.
"""
import math
import os
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdia.attack import BaseValues, build_region, complete_malicious_state, condition_report, region_injection
from fdia.dynamics import OUSystem, simulate, simulate_ou
from fdia.errors import FdiaError
from fdia.estimation import solve_gauss_newton
from fdia.grid import (StateVector, jacobian, line_flows, measurement_function, power_injections,
                       power_mismatch, solve_power_flow)
from fdia.harness import ExperimentConfig, TrialContext, network_for, run_sweep, run_trial
from fdia.measurement import PmuSeries
from fdia.ou import estimate_a, sample_stats

pytestmark = pytest.mark.filterwarnings("ignore::RuntimeWarning", "ignore::UserWarning")

TRIALS = int(os.environ.get("FDIA_ACCEPTANCE_TRIALS", "1000"))
WORKERS = os.cpu_count() or 1


def _fmt_p(stats):
    lo, hi = stats.ci_95
    return (f"{100 * stats.p_bypass:.1f}% [CI {100 * lo:.1f}-{100 * hi:.1f}], gamma={stats.gamma:.4f}, "
            f"{stats.n_trials} trials, {stats.n_failed} failed {stats.failures_by_stage()}")


# ---------------------------------------------------------------------------
# shared campaign: WLS/MES stealth, attack sweeps, region 2 and sample size
# ---------------------------------------------------------------------------

FACTORS = {0.8: 94.8, 0.7: 94.4, 0.6: 94.5, 0.2: 94.1}
ANGLES = {0.0: 93.5, 15.0: 94.9, 20.0: 95.0, 25.0: 94.5}
SAMPLE_SIZES = (21000, 18000, 15000, 12000, 9000)


@pytest.fixture(scope="module")
def campaign():
    # 350 s covers the largest window (N = 21000 at 60 Hz); each variant uses
    # the most recent N samples, so N = 18000 sees the same 300 s window length
    cfg = ExperimentConfig.from_dict({"sim": {"duration": 350.0}, "trials": TRIALS,
                                      "workers": WORKERS})
    variants = {f"factor={f}": {"attack": {"factor": f}} for f in FACTORS}
    variants.update({f"angle={a}": {"attack": {"factor": 1.0, "angle_deg": a}} for a in ANGLES})
    variants.update({f"N={n}": {"pmu": {"N": n}} for n in SAMPLE_SIZES})
    variants["region2"] = {"target_bus": 18, "attack": {"factor": None, "magnitude": 0.8, "angle_deg": 0.0}}
    variants["mes0.8"] = {"estimator": {"method": "mes"}}
    variants["mes0.7"] = {"estimator": {"method": "mes"}, "attack": {"factor": 0.7}}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return run_sweep(cfg, variants, WORKERS)


# ---------------------------------------------------------------------------
# identification over ten seeds (criteria 1 and 4)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def identified():
    cfg = ExperimentConfig.from_dict({"trials": 10})
    net, _ = network_for(cfg)
    regions = {t: build_region(net, t) for t in (28, 18)}
    out = []
    for seed in range(10):
        ctx = TrialContext(seed, 0)
        row = {}
        for t, region in regions.items():
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    row[t] = ctx.params(cfg, region)
            except FdiaError as exc:
                row[t] = exc
        out.append(row)
    return net, regions, out


def _rel(est, true):
    return abs(est - true) / abs(true)


def test_criterion_1_parameter_recovery(identified, acceptance):
    net, _, rows = identified
    good, notes = 0, []
    for seed, row in enumerate(rows):
        p = row[28]
        if isinstance(p, Exception):
            notes.append(f"seed {seed}: {p}")
            continue
        errs = []
        for i, j in ((26, 28), (28, 29)):
            ln = net.lines[net.line_index[(i, j)]]
            g, b = p.admittance(i, j)
            errs += [_rel(g, ln.g), _rel(b, ln.b)]
        errs += [_rel(p.tau_p_hat[28], net.bus(28).tau_p), _rel(p.tau_q_hat[28], net.bus(28).tau_q)]
        ok = max(errs) <= 0.10
        good += ok
        notes.append(f"seed {seed}: max rel err {max(errs):.3f}")
    acceptance(1, good >= 8, f"{good}/10 seeds with G, B (26-28, 28-29) and tau_p28, tau_q28 within 10% "
                             f"(need >= 8); " + "; ".join(notes))


def test_criterion_2_wls_stealth(campaign, acceptance):
    s = campaign["factor=0.8"]
    smoke = s.trials[:200]
    p_smoke = sum(t.bypassed for t in smoke) / len(smoke)
    passed = s.p_bypass >= 0.88 and (len(smoke) < 200 or p_smoke >= 0.85)
    acceptance(2, passed, f"0.8 V28 bypass {_fmt_p(s)} (need >= 88%); first-200 smoke "
                          f"{100 * p_smoke:.1f}% (need >= 85%)")


def test_criterion_3_attack_sweeps(campaign, acceptance):
    parts, ok = [], True
    for f, ref in FACTORS.items():
        p = 100 * campaign[f"factor={f}"].p_bypass
        ok &= abs(p - ref) <= 5
        parts.append(f"factor {f}: {p:.1f}% (ref {ref})")
    for a, ref in ANGLES.items():
        p = 100 * campaign[f"angle={a}"].p_bypass
        ok &= abs(p - ref) <= 5
        parts.append(f"angle {a:g} deg: {p:.1f}% (ref {ref})")
    acceptance(3, ok, "each within 5 points; " + "; ".join(parts))


def test_criterion_4_zero_injection_region(identified, campaign, acceptance):
    net, regions, rows = identified
    region = regions[18]
    region_ok = region.omega_a == {3, 16, 17, 18, 27}
    eq = solve_power_flow(net)
    base = BaseValues.from_state(net, eq, sorted(region.omega_a))
    solved, inj_ok, notes = 0, True, []
    for seed, row in enumerate(rows):
        p = row[18]
        if isinstance(p, Exception):
            notes.append(f"seed {seed}: {p}")
            continue
        try:
            mal = complete_malicious_state(region, p, base.phasors, (0.8, 0.0))
        except FdiaError as exc:
            notes.append(f"seed {seed}: {exc}")
            continue
        v, d = mal[17]
        inj = max(abs(x) for x in region_injection(region, p, mal, 17))
        inj_ok &= inj < 1e-6
        hit = abs(v - 0.893) <= 0.02 and abs(math.degrees(d) - 2.48) <= 0.3
        solved += hit
        notes.append(f"seed {seed}: V17={v:.4f} at {math.degrees(d):.3f} deg, |S17|={inj:.1e}")
    s = campaign["region2"]
    passed = region_ok and solved >= 8 and inj_ok and s.p_bypass >= 0.88
    acceptance(4, passed, f"region {sorted(region.omega_a)}; V17 within 0.02 pu / 0.3 deg of "
                          f"0.893 at 2.48 deg in {solved}/10 seeds (need >= 8); bypass {_fmt_p(s)} "
                          f"(need >= 88%); " + "; ".join(notes))


def test_criterion_5_theorem_exactness(acceptance):
    worst = [0.0]

    @settings(max_examples=200, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(2, 8))
    def prop(seed, n):
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((n, n)) + n * np.eye(n)
        k = rng.uniform(0.0, 0.2)

        def h(x):
            return A @ x + k * np.sin(x)

        def H(x):
            return A + k * np.diag(np.cos(x))

        x0 = np.zeros(n)
        z = h(rng.standard_normal(n) * 0.3) + 0.05 * rng.standard_normal(n)
        x, ok, *_ = solve_gauss_newton(h, H, z, x0, "dishonest_gauss_newton", tol_step=1e-13,
                                       max_iter=2000)
        c = rng.uniform(-1, 1, n)
        c *= 1e-4 / np.max(np.abs(c))
        Hf = H(x0)
        z_bad = z + Hf @ c
        xb, okb, *_ = solve_gauss_newton(h, H, z_bad, x0, "dishonest_gauss_newton", tol_step=1e-13,
                                         max_iter=2000)
        assert ok and okb
        assert condition_report(Hf, Hf @ c, c, frozen=True).perfect
        d = abs(np.max(np.abs(z_bad - h(xb))) - np.max(np.abs(z - h(x))))
        worst[0] = max(worst[0], d)
        assert d < 1e-8

    try:
        prop()
        passed = True
    except AssertionError:
        passed = False
    acceptance(5, passed, f"square full-rank H, dishonest GN, a = Hc with |c|inf = 1e-4: "
                          f"max |r_bad - r| = {worst[0]:.2e} over 200 random systems (need < 1e-8)")


def _random_drift(rng):
    re = rng.uniform(-5.0, -0.1, 4)
    im = rng.uniform(0.2, 2.0, 2)
    D = np.zeros((6, 6))
    D[0, 0], D[1, 1] = re[0], re[1]
    for k, (r, w) in enumerate(zip(re[2:], im)):
        i = 2 + 2 * k
        D[i:i + 2, i:i + 2] = [[r, w], [-w, r]]
    P = rng.standard_normal((6, 6)) + 3 * np.eye(6)
    return P @ D @ np.linalg.inv(P)


def test_criterion_6_ou_identification(acceptance):
    errs = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        A = _random_drift(rng)
        sys_ = OUSystem(A, np.eye(6), StateVector(np.zeros(3), np.full(3, 100.0)), (1, 2, 3))
        tr = simulate_ou(sys_, 18000, 1 / 60, seed=seed)
        one = np.ones_like(tr.angles)
        series = PmuSeries(60.0, (1, 2, 3), tr.magnitudes, tr.angles, one, 0 * one)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                a_hat = estimate_a(sample_stats(series, 30)).a_hat
            errs.append(float(np.linalg.norm(a_hat - A) / np.linalg.norm(a_hat)))
        except FdiaError:
            errs.append(math.inf)
    med = float(np.median(errs))
    acceptance(6, med < 0.1, f"median |A_hat - A|_F / |A_hat|_F = {med:.3f} over 20 seeds "
                             f"(N=18000 at 60 Hz, lag 0.5 s; need < 0.1)")


def test_criterion_7_sample_size(campaign, acceptance):
    stats = [campaign[f"N={n}"] for n in SAMPLE_SIZES]
    ps = [s.p_bypass for s in stats]
    drop = ps[1] - ps[4]
    monotone = all(ps[k + 1] <= stats[k].ci_95[1] for k in range(len(ps) - 1))
    detail = ", ".join(f"N={n}: {100 * p:.1f}%" for n, p in zip(SAMPLE_SIZES, ps))
    acceptance(7, drop >= 0.20 and monotone,
               f"{detail}; drop 18000->9000 = {100 * drop:.1f} points (need >= 20); "
               f"non-increasing within CI: {monotone}")


def test_criterion_8_tve_sensitivity(acceptance):
    fast = {"26": {"tau_p": 3.24, "tau_q": 6.814}, "28": {"tau_p": 0.8, "tau_q": 1.2},
            "29": {"tau_p": 5.14, "tau_q": 0.894}}
    cfg = ExperimentConfig.from_dict({"case_overrides": fast, "sigma": 4.0, "trials": TRIALS,
                                      "pmu": {"noise": "tve"}})
    variants = {"tve=0.2%": {"pmu": {"level": 0.002}}, "tve=2%": {"pmu": {"level": 0.02}}}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        out = run_sweep(cfg, variants, WORKERS)
    lo, hi = out["tve=0.2%"], out["tve=2%"]
    drop = lo.p_bypass - hi.p_bypass
    acceptance(8, drop >= 0.30, f"TVE 0.2%: {_fmt_p(lo)}; TVE 2%: {_fmt_p(hi)}; "
                                f"drop {100 * drop:.1f} points (need >= 30)")


def test_criterion_9_mes(campaign, acceptance):
    s8, s7 = campaign["mes0.8"], campaign["mes0.7"]
    done = [t for t in s7.trials if t.stage_error is None]
    dev = [abs(t.v_hat_post - t.intended[0]) / t.intended[0] > 0.05 for t in done]
    frac = sum(dev) / len(dev) if dev else float("nan")
    passed = s8.p_bypass >= 0.88 and bool(dev) and frac >= 0.5
    acceptance(9, passed, f"MES 0.8 V28 bypass {_fmt_p(s8)} (need >= 88%); MES 0.7 V28 estimate off "
                          f"by > 5% in {sum(dev)}/{len(done)} completed trials (need >= 50%)")


def test_criterion_10_numerical_hygiene(ieee39, ieee39_eq, acceptance):
    rng = np.random.default_rng(0)
    x = StateVector(ieee39_eq.angles + 0.05 * rng.standard_normal(ieee39.n_bus),
                    ieee39_eq.magnitudes * (1 + 0.02 * rng.standard_normal(ieee39.n_bus)))
    H = jacobian(ieee39, x)
    v0 = x.to_vector(ieee39)
    ref = x.angles[ieee39.ref_pos]
    fd = np.empty_like(H)
    eps = 1e-6
    for c in range(v0.size):
        vp, vm = v0.copy(), v0.copy()
        vp[c] += eps
        vm[c] -= eps
        fd[:, c] = (measurement_function(ieee39, StateVector.from_vector(ieee39, vp, ref))
                    - measurement_function(ieee39, StateVector.from_vector(ieee39, vm, ref))) / (2 * eps)
    jac_rel = float(np.max(np.abs(fd - H)) / np.max(np.abs(H)))
    mismatch = float(np.max(np.abs(power_mismatch(ieee39, ieee39_eq))))
    p, q = power_injections(ieee39, x)
    pft, qft, ptf, qtf = line_flows(ieee39, x)
    ps, qs = np.zeros(ieee39.n_bus), np.zeros(ieee39.n_bus)
    np.add.at(ps, ieee39.f_idx, pft)
    np.add.at(ps, ieee39.t_idx, ptf)
    np.add.at(qs, ieee39.f_idx, qft)
    np.add.at(qs, ieee39.t_idx, qtf)
    kcl = float(max(np.max(np.abs(ps - p)), np.max(np.abs(qs - q))))
    t1 = simulate(ieee39, 2.0, seed=7)
    t2 = simulate(ieee39, 2.0, seed=7)
    sim_det = np.array_equal(t1.angles, t2.angles) and np.array_equal(t1.magnitudes, t2.magnitudes)
    cfg = ExperimentConfig.from_dict({"sim": {"duration": 20.0}, "pmu": {"N": 1200},
                                      "use_true_params": True})
    trial_det = run_trial(cfg, 3, gamma=1.0).to_dict() == run_trial(cfg, 3, gamma=1.0).to_dict()
    passed = jac_rel < 1e-6 and mismatch < 1e-8 and kcl < 1e-12 and sim_det and trial_det
    acceptance(10, passed, f"Jacobian vs FD rel err {jac_rel:.1e} (need < 1e-6); power-flow mismatch "
                           f"{mismatch:.1e} (need < 1e-8); KCL closure {kcl:.1e}; simulation "
                           f"deterministic {sim_det}; trial deterministic {trial_det}")
