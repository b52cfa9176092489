"""Defender-side AC state estimation and residual-based bad data detection."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import EstimationError
from .grid import NetworkModel, StateVector, jacobian, measurement_function

METHODS = ("gauss_newton", "dishonest_gauss_newton", "mes")


@dataclass(frozen=True)
class EstimatorOptions:
    method: str = "gauss_newton"
    tol_step: float = 1e-8
    max_iter: int = 50
    flat_start: bool = True
    mes_window: float = 0.5
    include_pmu: bool = False
    pmu_weight: float = 10.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown estimator {self.method!r}; choose from {METHODS}")
        if not self.tol_step > 0:
            raise ValueError("tol_step must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.mes_window > 0:
            raise ValueError("mes_window must be positive")
        if not self.pmu_weight > 0:
            raise ValueError("pmu_weight must be positive")

    @classmethod
    def from_dict(cls, doc: Mapping) -> "EstimatorOptions":
        allowed = set(cls.__dataclass_fields__)
        extra = set(doc) - allowed
        if extra:
            raise ValueError(f"unknown estimator options {sorted(extra)}")
        return cls(**doc)


@dataclass(frozen=True, eq=False)
class PmuSnapshot:
    """Single-instant PMU readings: bus -> ``(V, delta, I, theta)``."""

    readings: Mapping[int, tuple[float, float, float, float]]

    @classmethod
    def from_series(cls, series, k: int = -1) -> "PmuSnapshot":
        return cls({b: (float(series.v[k, c]), float(series.delta[k, c]),
                        float(series.i[k, c]), float(series.theta[k, c]))
                    for c, b in enumerate(series.bus_ids)})


@dataclass(frozen=True, eq=False)
class EstimationResult:
    x_hat: StateVector
    residual_inf: float
    converged: bool
    iterations: int
    step_norms: list = field(default_factory=list)
    method: str = "gauss_newton"

    def to_dict(self) -> dict:
        return {"angles": self.x_hat.angles.tolist(), "magnitudes": self.x_hat.magnitudes.tolist(),
                "residual_inf": self.residual_inf, "converged": self.converged,
                "iterations": self.iterations, "step_norms": list(self.step_norms),
                "method": self.method}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "EstimationResult":
        d = json.loads(text)
        return cls(StateVector(d["angles"], d["magnitudes"]), d["residual_inf"], d["converged"],
                   d["iterations"], d["step_norms"], d.get("method", "gauss_newton"))


# ---------------------------------------------------------------------------
# PMU rows
# ---------------------------------------------------------------------------

def _pmu_rows(net: NetworkModel, snap: PmuSnapshot):
    """Return ``(z, h_fn, H_fn)`` for PMU voltage/current rows.

    Each PMU bus contributes ``V, delta, Re I, Im I`` with ``I`` the bus
    injection current.
    """
    buses = sorted(snap.readings)
    pos = np.array([net.index[b] for b in buses], dtype=np.intp)
    z = []
    for b in buses:
        v, d, i, th = snap.readings[b]
        cur = i * np.exp(1j * th)
        z.append([v, d, cur.real, cur.imag])
    z = np.array(z).T.reshape(-1)  # [V..., delta..., ReI..., ImI...]
    Y = net.ybus[pos]
    k = len(buses)

    def h(x: StateVector) -> np.ndarray:
        cur = Y @ x.phasors
        return np.concatenate([x.magnitudes[pos], x.angles[pos], cur.real, cur.imag])

    def H(x: StateVector) -> np.ndarray:
        n = net.n_bus
        out = np.zeros((4 * k, 2 * n))
        out[np.arange(k), n + pos] = 1.0
        out[k + np.arange(k), pos] = 1.0
        e = np.exp(1j * x.angles)
        di_dd = Y * (1j * x.phasors)[None, :]
        di_dv = Y * e[None, :]
        out[2 * k:3 * k, :n] = di_dd.real
        out[2 * k:3 * k, n:] = di_dv.real
        out[3 * k:, :n] = di_dd.imag
        out[3 * k:, n:] = di_dv.imag
        return out[:, net.state_columns]

    return z, h, H


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------

def residual_inf(net: NetworkModel, z, x: StateVector) -> float:
    """``max_i |z_i - h_i(x)|``."""
    z = np.asarray(getattr(z, "values", z), dtype=float)
    h = measurement_function(net, x)
    if z.shape != h.shape:
        raise ValueError(f"measurement vector has {z.size} entries, network expects {h.size}")
    return float(np.max(np.abs(z - h)))


def _weighted_step(H: np.ndarray, r: np.ndarray, w: np.ndarray,
                   allow_deficient: bool = False) -> tuple[np.ndarray, bool]:
    """Weighted Gauss-Newton step; returns ``(dx, full_rank)``.

    A rank-deficient gain matrix raises unless ``allow_deficient``, in which
    case the minimum-norm step is returned.
    """
    sw = np.sqrt(w)
    A = H * sw[:, None]
    dx, _, rank, sv = np.linalg.lstsq(A, sw * r, rcond=1e-12)
    full = rank == H.shape[1]
    if not full and not allow_deficient:
        cond = sv[0] ** 2 / sv[-1] ** 2 if sv[-1] > 0 else np.inf
        raise EstimationError(f"singular gain matrix H^T W H (condition estimate {cond:.3e}, "
                              f"rank {rank} of {H.shape[1]})")
    return dx, full


def solve_gauss_newton(h, H, z, x0, method: str = "gauss_newton", tol_step: float = 1e-8,
                       max_iter: int = 50, mes_window: float = 0.5, weights=None, check=None):
    """Gauss-Newton family on a generic model ``z ~ h(x)`` with Jacobian ``H(x)``.

    Returns ``(x, converged, iterations, step_norms)``.  ``check(x)`` may
    raise to reject an iterate (e.g. non-positive magnitudes).
    """
    if method not in METHODS:
        raise ValueError(f"unknown estimator {method!r}; choose from {METHODS}")
    z = np.asarray(z, dtype=float)
    w_base = np.ones(z.size) if weights is None else np.asarray(weights, dtype=float)
    x = np.array(x0, dtype=float)
    steps: list[float] = []
    it_offset = 0
    if method == "mes":
        x, _, it_offset, steps = solve_gauss_newton(h, H, z, x, "gauss_newton", tol_step, max_iter,
                                                    mes_window, w_base, check)
    H_frozen = None
    if method == "dishonest_gauss_newton":
        H_frozen = H(x)
        if np.linalg.matrix_rank(H_frozen * np.sqrt(w_base)[:, None]) < H_frozen.shape[1]:
            # a flat start without line charging cannot see a uniform voltage
            # scaling; take one relinearised step before freezing
            dx, _ = _weighted_step(H_frozen, z - h(x), w_base, allow_deficient=True)
            x = x + dx
            steps.append(float(np.max(np.abs(dx))))
            it_offset += 1
            H_frozen = H(x)
    converged = False
    it = 0
    w = w_base
    for it in range(1, max_iter + 1):
        r = z - h(x)
        Hk = H_frozen if H_frozen is not None else H(x)
        if method == "mes":
            w = w_base * np.exp(-(r ** 2) / (2 * mes_window ** 2))
            if not np.any(w > 1e-300):
                raise EstimationError("MES weights vanished: every residual exceeds the kernel width")
        dx, _ = _weighted_step(Hk, r, w, allow_deficient=(it == 1 and it_offset == 0))
        x = x + dx
        if not np.all(np.isfinite(x)):
            raise EstimationError("state estimate diverged (non-finite iterate)")
        if check is not None:
            check(x)
        step = float(np.max(np.abs(dx)))
        steps.append(step)
        if step < tol_step:
            converged = True
            break
    return x, converged, it + it_offset, steps


def estimate(net: NetworkModel, z, pmu: PmuSnapshot | None = None,
             opts: EstimatorOptions | None = None, start: StateVector | None = None) -> EstimationResult:
    """Gauss-Newton family state estimator.

    ``gauss_newton`` relinearises every iteration, ``dishonest_gauss_newton``
    keeps the first Jacobian, ``mes`` runs iteratively reweighted least
    squares on the exponential-square objective
    ``sum_i exp(-r_i^2 / (2 w^2))`` starting from the WLS solution.
    """
    opts = opts or EstimatorOptions()
    zr = np.asarray(getattr(z, "values", z), dtype=float)
    if zr.shape != (net.n_meas,):
        raise ValueError(f"measurement vector has {zr.size} entries, network expects {net.n_meas}")
    rows = [(zr, lambda x: measurement_function(net, x), lambda x: jacobian(net, x),
             np.ones(net.n_meas))]
    if opts.include_pmu:
        if pmu is None or not pmu.readings:
            raise ValueError("include_pmu requested but no PMU snapshot supplied")
        zp, hp, Hp = _pmu_rows(net, pmu)
        rows.append((zp, hp, Hp, np.full(zp.size, opts.pmu_weight)))
    z_all = np.concatenate([r[0] for r in rows])
    w_base = np.concatenate([r[3] for r in rows])
    x0 = start if (start is not None and not opts.flat_start) else StateVector.flat(net)
    ref = x0.angles[net.ref_pos]

    def state(v):
        return StateVector.from_vector(net, v, ref)

    def h_vec(v):
        x = state(v)
        return np.concatenate([r[1](x) for r in rows])

    def H_vec(v):
        x = state(v)
        return np.vstack([r[2](x) for r in rows])

    def check(v):
        if np.any(v[net.n_bus - 1:] <= 0):
            raise EstimationError("state estimate diverged (non-positive magnitude)")

    vec, converged, iters, steps = solve_gauss_newton(
        h_vec, H_vec, z_all, x0.to_vector(net), opts.method, opts.tol_step, opts.max_iter,
        opts.mes_window, w_base, check)
    res = float(np.max(np.abs(z_all - h_vec(vec))))
    return EstimationResult(state(vec), res, converged, iters, steps, opts.method)


def bdd_check(r: float, gamma: float) -> str:
    """``"normal"`` when ``r < gamma`` (strict), else ``"bad_data"``."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    return "normal" if r < gamma else "bad_data"


def select_threshold(residual_samples: Sequence[float], quantile: float = 0.95) -> float:
    """Empirical quantile with linear interpolation between order statistics."""
    s = np.asarray(list(residual_samples), dtype=float)
    if s.size == 0:
        raise ValueError("cannot select a threshold from an empty sample")
    if not 0 < quantile < 1:
        raise ValueError("quantile must lie strictly between 0 and 1")
    return float(np.quantile(s, quantile, method="linear"))
