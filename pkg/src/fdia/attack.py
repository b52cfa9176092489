"""Attacking-region construction and attack-vector synthesis."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import AttackError
from .grid import MeasurementLayout, NetworkModel, StateVector, jacobian, power_injections
from .measurement import PmuSeries, RtuMeasurementSet
from .ou import RegionParams

V_BOUNDS = (0.5, 1.5)


@dataclass(frozen=True)
class AttackRegion:
    target: int
    omega_a: frozenset
    omega_b: frozenset
    omega_c: frozenset
    l_a: frozenset
    zero_injection: frozenset = frozenset()

    @property
    def interior(self) -> frozenset:
        return self.omega_a - self.omega_b

    @property
    def undirected_lines(self) -> list[tuple[int, int]]:
        return sorted({(min(i, j), max(i, j)) for i, j in self.l_a})

    def to_dict(self) -> dict:
        return {"target": self.target, "omega_a": sorted(self.omega_a),
                "omega_b": sorted(self.omega_b), "omega_c": sorted(self.omega_c),
                "l_a": [list(p) for p in self.undirected_lines]}


def build_region(net: NetworkModel, target: int) -> AttackRegion:
    """Grow the region from ``target`` through zero-injection buses.

    Every neighbour of an expanding bus joins the region; neighbours that are
    zero-injection buses expand in turn, the rest form the boundary.
    """
    bus = net.bus(target)
    if bus.kind == "generator":
        raise AttackError(f"target bus {target} is a generator")
    omega_a = {target}
    omega_b: set[int] = set()
    l_a: set[tuple[int, int]] = set()
    frontier = [target]
    expanded = set()
    while frontier:
        t = frontier.pop()
        expanded.add(t)
        for i in sorted(net.neighbors(t)):
            if net.bus(i).kind == "generator":
                raise AttackError(
                    f"region for target {target} reaches generator bus {i} via {t}; "
                    "generators cannot be attacked")
            l_a.add((t, i))
            l_a.add((i, t))
            if i not in omega_a:
                omega_a.add(i)
                omega_b.add(i)
        for j in sorted(omega_b):
            if net.bus(j).kind == "zero_injection" and j not in expanded:
                omega_b.discard(j)
                frontier.append(j)
    zi = {i for i in omega_a if net.bus(i).kind == "zero_injection"}
    return AttackRegion(target, frozenset(omega_a), frozenset(omega_b),
                        frozenset(omega_a - zi), frozenset(l_a), frozenset(zi))


# ---------------------------------------------------------------------------
# malicious state
# ---------------------------------------------------------------------------

def _flow(vi, vj, di, dj, g, b):
    """Flow ``i -> j`` on a series admittance ``g + jb``."""
    c, s = np.cos(di - dj), np.sin(di - dj)
    p = vi * vi * g - vi * vj * (g * c + b * s)
    q = -vi * vi * b - vi * vj * (g * s - b * c)
    return p, q


def region_injection(region: AttackRegion, params: RegionParams, phasors: Mapping, bus: int):
    """Injection at ``bus`` summed over its lines in ``L_A``."""
    p = q = 0.0
    for i, j in region.l_a:
        if i != bus:
            continue
        g, b = params.admittance(i, j)
        vi, di = phasors[i]
        vj, dj = phasors[j]
        fp, fq = _flow(vi, vj, di, dj, g, b)
        p += fp
        q += fq
    return p, q


def complete_malicious_state(region: AttackRegion, params: RegionParams,
                             base: Mapping[int, tuple[float, float]],
                             target_phasor: tuple[float, float],
                             tol: float = 1e-10, max_iter: int = 50) -> dict[int, tuple[float, float]]:
    """Solve zero-injection phasors for the requested target phasor.

    ``base`` maps each region bus to its ``(V, delta)``.  Boundary and other
    non-zero-injection buses keep their base phasors, the target takes
    ``target_phasor`` and all zero-injection buses are solved jointly so that
    their injections vanish under ``params``.
    """
    missing = region.omega_a - set(base)
    if missing:
        raise AttackError(f"base phasors missing for buses {sorted(missing)}")
    if not params.covers(region.l_a):
        raise AttackError("parameters do not cover every line of the attacking region")
    out = {i: (float(base[i][0]), float(base[i][1])) for i in region.omega_a}
    vt, dt_ = target_phasor
    if not V_BOUNDS[0] <= vt <= V_BOUNDS[1]:
        warnings.warn(f"target magnitude {vt:.3f} pu outside {V_BOUNDS}", RuntimeWarning, stacklevel=2)
    out[region.target] = (float(vt), float(dt_))
    zi = sorted(region.zero_injection)
    if not zi:
        return out

    def residual(vals):
        cur = dict(out)
        for k, z in enumerate(zi):
            cur[z] = (vals[2 * k], vals[2 * k + 1])
        r = []
        for z in zi:
            p, q = region_injection(region, params, cur, z)
            r += [p, q]
        return np.array(r)

    x = np.array([c for z in zi for c in out[z]], dtype=float)
    r = residual(x)
    iters = 0
    for iters in range(max_iter):
        if np.max(np.abs(r)) < tol:
            break
        J = np.empty((len(x), len(x)))
        for c in range(len(x)):
            h = 1e-7 * max(1.0, abs(x[c]))
            xp = x.copy()
            xp[c] += h
            xm = x.copy()
            xm[c] -= h
            J[:, c] = (residual(xp) - residual(xm)) / (2 * h)
        try:
            dx = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            raise AttackError("zero-injection Newton solve hit a singular Jacobian") from None
        x = x + dx
        r = residual(x)
    if np.max(np.abs(r)) >= tol or not np.all(np.isfinite(x)):
        raise AttackError(
            f"zero-injection Newton solve did not converge: max |S_z| = {np.max(np.abs(r)):.3e} "
            f"after {max_iter} iterations")
    for k, z in enumerate(zi):
        v = x[2 * k]
        if not V_BOUNDS[0] <= v <= V_BOUNDS[1]:
            raise AttackError(f"solved |V_{z}| = {v:.4f} pu outside {V_BOUNDS} (Newton: {iters} "
                              f"iterations, max |S_z| = {np.max(np.abs(r)):.2e})")
        out[z] = (float(v), float(x[2 * k + 1]))
    return out


# ---------------------------------------------------------------------------
# attack vector
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BaseValues:
    """Attacker-side baseline: region phasors and PMU-derived injections."""

    phasors: Mapping[int, tuple[float, float]]
    injections: Mapping[int, tuple[float, float]]

    @classmethod
    def from_pmu(cls, series: PmuSeries, k: int = -1) -> "BaseValues":
        ph, inj = {}, {}
        for c, b in enumerate(series.bus_ids):
            v, d = float(series.v[k, c]), float(series.delta[k, c])
            s = v * series.i[k, c] * np.exp(1j * (d - series.theta[k, c]))
            ph[b] = (v, d)
            inj[b] = (float(s.real), float(s.imag))
        return cls(ph, inj)

    @classmethod
    def from_state(cls, net: NetworkModel, x: StateVector, buses) -> "BaseValues":
        p, q = power_injections(net, x)
        ph = {b: (float(x.magnitudes[net.index[b]]), float(x.angles[net.index[b]])) for b in buses}
        inj = {b: (float(p[net.index[b]]), float(q[net.index[b]])) for b in buses}
        return cls(ph, inj)


@dataclass(frozen=True, eq=False)
class AttackVector:
    rtu_deltas: dict = field(default_factory=dict)
    pmu_overrides: dict = field(default_factory=dict)
    intended_c: dict = field(default_factory=dict)
    malicious: dict = field(default_factory=dict)

    @property
    def is_zero(self) -> bool:
        return all(d == 0.0 for d in self.rtu_deltas.values())

    def dense(self, n_meas: int) -> np.ndarray:
        a = np.zeros(n_meas)
        for k, d in self.rtu_deltas.items():
            a[k] += d
        return a

    def to_dict(self) -> dict:
        return {
            "rtu_deltas": [{"index": int(k), "delta": float(d)} for k, d in sorted(self.rtu_deltas.items())],
            "pmu_overrides": [{"bus": int(b), **{k: float(v) for k, v in o.items()}}
                              for b, o in sorted(self.pmu_overrides.items())],
            "intended_c": {k: float(v) for k, v in self.intended_c.items()},
            "malicious": {str(b): [float(v), float(d)] for b, (v, d) in sorted(self.malicious.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "AttackVector":
        d = json.loads(text)
        return cls({int(e["index"]): float(e["delta"]) for e in d["rtu_deltas"]},
                   {int(o["bus"]): {k: float(v) for k, v in o.items() if k != "bus"}
                    for o in d.get("pmu_overrides", [])},
                   dict(d.get("intended_c", {})),
                   {int(b): (float(v), float(dd)) for b, (v, dd) in d.get("malicious", {}).items()})


def build_attack_vector(net: NetworkModel, region: AttackRegion, params: RegionParams,
                        base: BaseValues, malicious: Mapping[int, tuple[float, float]]) -> AttackVector:
    """Assemble RTU deltas and PMU overrides for a malicious region state.

    Flows on ``L_A`` are recomputed with the supplied parameters for both the
    base and the malicious phasors; their differences are the flow deltas,
    and each non-zero-injection bus receives the sum of the deltas of its
    region lines as its injection delta.
    """
    missing = region.omega_a - set(malicious)
    if missing:
        raise AttackError(f"malicious phasors missing for buses {sorted(missing)}")
    missing = region.omega_a - set(base.phasors)
    if missing:
        raise AttackError(f"base phasors missing for buses {sorted(missing)}")
    missing = region.omega_c - set(base.injections)
    if missing:
        raise AttackError(f"base injections missing for buses {sorted(missing)}")
    layout = MeasurementLayout(net)
    deltas: dict[int, float] = {}
    dinj = {i: [0.0, 0.0] for i in region.omega_a}
    for i, j in sorted(region.l_a):
        g, b = params.admittance(i, j)
        p0, q0 = _flow(base.phasors[i][0], base.phasors[j][0], base.phasors[i][1],
                       base.phasors[j][1], g, b)
        p1, q1 = _flow(malicious[i][0], malicious[j][0], malicious[i][1], malicious[j][1], g, b)
        kp, kq = layout.flow(i, j)
        deltas[kp] = p1 - p0
        deltas[kq] = q1 - q0
        dinj[i][0] += p1 - p0
        dinj[i][1] += q1 - q0
    for i in sorted(region.omega_c):
        deltas[layout.p_inj(i)] = dinj[i][0]
        deltas[layout.q_inj(i)] = dinj[i][1]
    overrides: dict[int, dict] = {}
    for i in sorted(region.omega_a):
        if i in region.omega_c:
            p = base.injections[i][0] + dinj[i][0]
            q = base.injections[i][1] + dinj[i][1]
        else:
            p = q = 0.0
        v, d = malicious[i]
        cur = np.conj(complex(p, q) / (v * np.exp(1j * d)))
        o = {"i": float(abs(cur)), "theta": float(np.angle(cur))}
        if i not in region.omega_b:
            o["v"], o["delta"] = float(v), float(d)
        overrides[i] = o
    t = region.target
    c = {"dV": malicious[t][0] - base.phasors[t][0], "ddelta": malicious[t][1] - base.phasors[t][1]}
    return AttackVector(deltas, overrides, c, {i: tuple(malicious[i]) for i in region.omega_a})


def apply_attack(z: RtuMeasurementSet, pmu: PmuSeries | None, a: AttackVector):
    """``z_bad = z + a``; PMU overrides replace the latest sample of each bus."""
    vals = np.array(z.values, dtype=float)
    for k, d in a.rtu_deltas.items():
        vals[k] += d
    z_bad = z.with_values(vals)
    if pmu is None:
        return z_bad, None
    arrays = {name: getattr(pmu, name).copy() for name in ("v", "delta", "i", "theta")}
    for b, o in a.pmu_overrides.items():
        if b not in pmu.bus_ids:
            continue
        c = pmu.column(b)
        for name, val in o.items():
            arrays[name][-1, c] = val
    return z_bad, PmuSeries(pmu.rate_hz, pmu.bus_ids, arrays["v"], arrays["delta"], arrays["i"],
                            arrays["theta"], pmu.start_time)


def malicious_full_state(net: NetworkModel, x: StateVector, malicious: Mapping) -> StateVector:
    """``x`` with region buses replaced by their malicious phasors."""
    return x.replace(net, {b: (v, d) for b, (v, d) in malicious.items()})


# ---------------------------------------------------------------------------
# perfect-attack conditions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConditionReport:
    linearity_proxy: float
    frozen_jacobian: bool
    square_full_rank: bool
    residual_bound: float
    n_meas: int
    n_state: int

    @property
    def perfect(self) -> bool:
        return self.frozen_jacobian and self.square_full_rank

    def to_dict(self) -> dict:
        return {**self.__dict__, "perfect": self.perfect}


def condition_report(H: np.ndarray, a: np.ndarray, c: np.ndarray, frozen: bool,
                     H_hat: np.ndarray | None = None) -> ConditionReport:
    """Evaluate the perfect-attack conditions for a generic model.

    ``residual_bound`` is ``||(I - H (H^T H)^-1 H^T) H_hat c||_inf``; with
    ``H_hat`` omitted the defender's own ``H`` is used.
    """
    H = np.asarray(H, dtype=float)
    a = np.asarray(a, dtype=float)
    c = np.asarray(c, dtype=float)
    m, p = H.shape
    rank = np.linalg.matrix_rank(H)
    lin = a - H @ c
    na = np.max(np.abs(a)) if a.size else 0.0
    proxy = float(np.max(np.abs(lin)) / na) if na > 0 else 0.0
    Hh = H if H_hat is None else np.asarray(H_hat, dtype=float)
    v = Hh @ c
    # projector onto the orthogonal complement of range(H)
    coef, *_ = np.linalg.lstsq(H, v, rcond=None)
    bound = float(np.max(np.abs(v - H @ coef))) if v.size else 0.0
    return ConditionReport(proxy, bool(frozen), bool(m == p and rank == p), bound, m, p)


def verify_perfect_conditions(net: NetworkModel, region: AttackRegion, opts, x: StateVector,
                              attack: AttackVector, params: RegionParams | None = None) -> ConditionReport:
    """Perfect-attack report for an attack built around the state ``x``."""
    H = jacobian(net, x)
    xm = malicious_full_state(net, x, attack.malicious)
    c = xm.to_vector(net) - x.to_vector(net)
    H_hat = None
    if params is not None:
        H_hat = jacobian(net.with_line_params(
            {k: params.admittance(*k) for k in params.g_hat}), x)
    a = attack.dense(net.n_meas)
    return condition_report(H, a, c, opts.method == "dishonest_gauss_newton", H_hat)
