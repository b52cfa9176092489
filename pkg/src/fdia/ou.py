"""Parameter identification from PMU data via the OU regression theorem.

The attacker stacks region states as ``x = [delta_1..delta_k, V_1..V_k]``,
estimates the lag-0 and lag-``dt`` covariances, recovers the drift matrix
``A_hat = log(C(dt) C(0)^-1) / dt`` and then unscales interior rows with
time constants fitted on a short window to get Jacobian entries, from which
line admittances follow by a small least-squares fit per line.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import EstimationError
from .measurement import PmuSeries, injections_from_pmu

IMAG_WARN_RATIO = 0.05
COND_LIMIT = 1e12


class DataQualityWarning(UserWarning):
    """Estimate was produced but the data look unreliable."""


@dataclass(frozen=True, eq=False)
class OUEstimate:
    mean: np.ndarray
    c0: np.ndarray
    c_lag: np.ndarray
    lag_seconds: float
    lag_samples: int
    n_samples: int
    bus_ordering: tuple[int, ...]
    a_hat: np.ndarray | None = None
    imag_ratio: float = 0.0

    @property
    def k(self) -> int:
        return len(self.bus_ordering)

    def state_index(self, bus: int, which: str) -> int:
        """Row of ``delta`` (``which='d'``) or ``V`` (``'v'``) for ``bus``."""
        c = self.bus_ordering.index(bus)
        return c if which == "d" else self.k + c


def _stack(series: PmuSeries, buses: Sequence[int] | None) -> tuple[np.ndarray, tuple[int, ...]]:
    buses = tuple(series.bus_ids if buses is None else buses)
    cols = [series.column(b) for b in buses]
    return np.hstack([series.delta[:, cols], series.v[:, cols]]), buses


def sample_stats(series: PmuSeries, lag_samples: int, buses: Sequence[int] | None = None) -> OUEstimate:
    """Sample mean, covariance and lag covariance with ``1/(N-1)`` scaling.

    The lag matrix pairs ``x_{t+K}`` with ``x_t`` (both centred on the full
    sample mean), so its ``(i, j)`` entry estimates ``E[x_i(t+dt) x_j(t)]``.
    """
    if lag_samples < 1:
        raise ValueError("lag must be a positive number of samples")
    F, buses = _stack(series, buses)
    N = F.shape[0]
    if N <= lag_samples:
        raise ValueError(f"need more than {lag_samples} samples, got {N}")
    mu = F.mean(axis=0)
    D = F - mu
    c0 = D.T @ D / (N - 1)
    c0 = (c0 + c0.T) / 2
    c_lag = D[lag_samples:].T @ D[:-lag_samples] / (N - 1)
    if not np.any(c0):
        raise EstimationError("degenerate covariance: PMU series is constant")
    return OUEstimate(mu, c0, c_lag, lag_samples / series.rate_hz, lag_samples, N, buses)


def estimate_a(est: OUEstimate) -> OUEstimate:
    """Principal matrix log of ``C(dt) C(0)^-1`` divided by ``dt``.

    Raises :class:`EstimationError` for an ill-conditioned covariance or when
    an eigenvalue of the ratio matrix has modulus >= 1 or sits on the closed
    negative real axis (no stable real logarithm exists).
    """
    c0 = est.c0
    if not np.any(c0):
        raise EstimationError("degenerate covariance: C(0) is zero")
    cond = np.linalg.cond(c0)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise EstimationError(f"degenerate covariance: cond(C(0)) = {cond:.3e} exceeds {COND_LIMIT:.0e}")
    R = np.linalg.solve(c0.T, est.c_lag.T).T
    w, U = np.linalg.eig(R)
    mod = np.abs(w)
    if np.any(mod > 1.0 + 1e-12):
        raise EstimationError(
            f"log branch failure: ratio eigenvalue modulus {mod.max():.6f} > 1 (growing mode)")
    neg = (np.abs(w.imag) <= 1e-12 * np.maximum(mod, 1e-300)) & (w.real <= 0)
    if np.any(neg):
        raise EstimationError(
            f"log branch failure: ratio eigenvalue {w[neg][0].real:.3e} on the negative real axis")
    L = U @ np.diag(np.log(w)) @ np.linalg.inv(U)
    a = L.real / est.lag_seconds
    denom = np.linalg.norm(L.real)
    ratio = float(np.linalg.norm(L.imag) / denom) if denom > 0 else 0.0
    if ratio > IMAG_WARN_RATIO:
        warnings.warn(f"matrix log has imaginary/real norm ratio {ratio:.3f}", DataQualityWarning,
                      stacklevel=2)
    return replace(est, a_hat=a, imag_ratio=ratio)


def wls_solve(X: np.ndarray, Y: np.ndarray, W: np.ndarray | None = None,
              rcond: float = 1e-10) -> np.ndarray:
    """``beta = (X^T W X)^-1 X^T W Y`` with an explicit rank check."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 1 and np.ndim(Y) == 1 and len(Y) != 1:
        X = X.T
    Y = np.asarray(Y, dtype=float).reshape(-1)
    n, p = X.shape
    if Y.shape[0] != n:
        raise ValueError(f"X has {n} rows but Y has {Y.shape[0]}")
    if n < p:
        raise EstimationError(f"underdetermined WLS: {n} rows for {p} unknowns")
    if W is None:
        Xw, Yw = X, Y
    else:
        W = np.asarray(W, dtype=float)
        if W.ndim == 1:
            W = np.diag(W)
        Lw = np.linalg.cholesky((W + W.T) / 2)
        Xw, Yw = Lw.T @ X, Lw.T @ Y
    s = np.linalg.svd(Xw, compute_uv=False)
    rank = int(np.sum(s > rcond * (s[0] if s.size and s[0] > 0 else 1.0))) if s.size else 0
    if s.size == 0 or s[0] == 0 or rank < p:
        raise EstimationError(f"rank-deficient WLS design: effective rank {rank} < {p}")
    beta, *_ = np.linalg.lstsq(Xw, Yw, rcond=None)
    return beta


def estimate_time_constants(series: PmuSeries, bus: int, n_small: int = 10,
                            check_positive: bool = True, start: int | None = None) -> tuple[float, float]:
    """Fit ``1/tau_p`` and ``1/tau_q`` by forward-difference regression.

    ``n_small`` consecutive samples beginning at ``start`` (default: the most
    recent ones) form the regression; the mean injection over the whole
    series stands in for the scheduled power.
    """
    if n_small < 2:
        raise ValueError("n_small must be at least 2")
    if n_small > series.n_samples:
        raise ValueError(f"n_small={n_small} exceeds the {series.n_samples} available samples")
    c = series.column(bus)
    P, Q = injections_from_pmu(series, bus)
    dt = 1.0 / series.rate_hz
    first = series.n_samples - n_small if start is None else start
    if not 0 <= first <= series.n_samples - n_small:
        raise ValueError(f"window [{first}, {first + n_small}) exceeds {series.n_samples} samples")
    sl = slice(first, first + n_small)
    d, v = series.delta[sl, c], series.v[sl, c]
    p, q = P[sl], Q[sl]
    out = []
    for name, x, s, mu in (("tau_p", d, p, P.mean()), ("tau_q", v, q, Q.mean())):
        Y = np.diff(x) / dt
        X = (mu - s[:-1])[:, None]
        inv_tau = float(wls_solve(X, Y)[0])
        if check_positive and not inv_tau > 0:
            raise EstimationError(
                f"bus {bus}: estimated 1/{name} = {inv_tau:.4g} <= 0 (noise-dominated window)")
        out.append(1.0 / inv_tau)
    return out[0], out[1]


def _design_rows(vi: float, vj: float, di: float, dj: float) -> np.ndarray:
    """d(P_i, P_i, Q_i, Q_i)/d(delta_j, V_j, delta_j, V_j) as linear maps of (g, b)."""
    c = np.cos(di - dj)
    s = np.sin(di - dj)
    vv = vi * vj
    return np.array([[-vv * s, vv * c],
                     [-vi * c, -vi * s],
                     [vv * c, vv * s],
                     [-vi * s, vi * c]])


def jacobian_design(vi: float, vj: float, di: float, dj: float) -> np.ndarray:
    return _design_rows(vi, vj, di, dj)


@dataclass(frozen=True, eq=False)
class RegionParams:
    """Estimated admittances keyed by sorted bus pair, time constants by bus."""

    g_hat: dict = field(default_factory=dict)
    b_hat: dict = field(default_factory=dict)
    tau_p_hat: dict = field(default_factory=dict)
    tau_q_hat: dict = field(default_factory=dict)
    source: OUEstimate | None = None

    def admittance(self, i: int, j: int) -> tuple[float, float]:
        key = (min(i, j), max(i, j))
        if key not in self.g_hat:
            raise KeyError(f"no parameters for line {i}-{j}")
        return self.g_hat[key], self.b_hat[key]

    def covers(self, pairs) -> bool:
        return all((min(i, j), max(i, j)) in self.g_hat for i, j in pairs)

    def to_dict(self) -> dict:
        return {"g_hat": {f"{i}-{j}": v for (i, j), v in sorted(self.g_hat.items())},
                "b_hat": {f"{i}-{j}": v for (i, j), v in sorted(self.b_hat.items())},
                "tau_p_hat": {str(k): v for k, v in sorted(self.tau_p_hat.items())},
                "tau_q_hat": {str(k): v for k, v in sorted(self.tau_q_hat.items())}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "RegionParams":
        def pair(key: str) -> tuple[int, int]:
            i, j = (int(t) for t in key.split("-"))
            return (min(i, j), max(i, j))
        try:
            return cls({pair(k): float(v) for k, v in doc["g_hat"].items()},
                       {pair(k): float(v) for k, v in doc["b_hat"].items()},
                       {int(k): float(v) for k, v in doc.get("tau_p_hat", {}).items()},
                       {int(k): float(v) for k, v in doc.get("tau_q_hat", {}).items()})
        except (KeyError, ValueError, AttributeError) as exc:
            raise ValueError(f"malformed region parameter document: {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "RegionParams":
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_network(cls, net, lines, buses=()) -> "RegionParams":
        """Ground-truth parameters (for ablations)."""
        g, b = {}, {}
        for i, j in lines:
            ln = net.lines[net.line_index[(i, j)]]
            key = (min(i, j), max(i, j))
            g[key], b[key] = ln.g, ln.b
        return cls(g, b, {k: net.bus(k).tau_p for k in buses}, {k: net.bus(k).tau_q for k in buses})


def estimate_line_params(a_hat: np.ndarray, taus: Mapping[int, tuple[float, float]],
                         means: Mapping[int, tuple[float, float]], region,
                         bus_ordering: Sequence[int], W: np.ndarray | None = None) -> RegionParams:
    """Recover ``(G, B)`` of every line in ``region.l_a`` from ``A_hat``.

    ``means`` maps bus -> ``(V_bar, delta_bar)``.  For each directed pair
    ``(i, j)`` with ``i`` interior, the four Jacobian entries ``-tau * A_hat``
    are regressed on the linearisation design evaluated at the mean phasors.
    Estimates from both directions of a line are averaged.
    """
    order = tuple(bus_ordering)
    k = len(order)
    a_hat = np.asarray(a_hat, dtype=float)
    if a_hat.shape != (2 * k, 2 * k):
        raise EstimationError(f"A_hat is {a_hat.shape}, expected {(2 * k, 2 * k)} for buses {order}")
    interior = set(region.interior)
    per_dir: dict[tuple[int, int], list[np.ndarray]] = {}
    for i, j in sorted(region.l_a):
        if i not in interior:
            continue
        if i not in taus:
            raise EstimationError(f"missing time-constant estimate for interior bus {i}")
        if i not in order or j not in order:
            raise EstimationError(f"line {i}-{j} has an endpoint without PMU data")
        tp, tq = taus[i]
        ri, rj = order.index(i), order.index(j)
        Y = np.array([-tp * a_hat[ri, rj], -tp * a_hat[ri, k + rj],
                      -tq * a_hat[k + ri, rj], -tq * a_hat[k + ri, k + rj]])
        vi, di = means[i]
        vj, dj = means[j]
        beta = wls_solve(_design_rows(vi, vj, di, dj), Y, W)
        per_dir.setdefault((min(i, j), max(i, j)), []).append(beta)
    g, b = {}, {}
    for i, j in region.undirected_lines:
        key = (i, j)
        if key not in per_dir:
            raise EstimationError(f"line {i}-{j} has no interior endpoint; cannot identify it")
        est = np.mean(per_dir[key], axis=0)
        g[key], b[key] = float(est[0]), float(est[1])
    return RegionParams(g, b, {i: taus[i][0] for i in interior if i in taus},
                        {i: taus[i][1] for i in interior if i in taus})


def identify_region(series: PmuSeries, region, lag_samples: int, n_small: int = 10,
                    tau_override: Mapping[int, tuple[float, float]] | None = None) -> RegionParams:
    """Full attacker-side identification: statistics, ``A_hat``, taus, lines."""
    order = tuple(sorted(region.omega_a))
    est = estimate_a(sample_stats(series, lag_samples, order))
    if tau_override is not None:
        taus = dict(tau_override)
    else:
        taus = {i: estimate_time_constants(series, i, n_small) for i in sorted(region.interior)}
    means = {b: (float(est.mean[est.k + c]), float(est.mean[c])) for c, b in enumerate(order)}
    params = estimate_line_params(est.a_hat, taus, means, region, order)
    return replace(params, source=est)
