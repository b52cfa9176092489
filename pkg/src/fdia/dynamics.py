"""Stochastic load/generator dynamics and their linear Ornstein-Uhlenbeck model.

Non-generator buses are first-order dynamic loads::

    d(delta_i)/dt = (P_i^s (1 + sigma_p xi) - P_i(x)) / tau_p
    d(V_i)/dt     = (Q_i^s (1 + sigma_q xi) - Q_i(x)) / tau_q

Generators other than the reference follow the swing equation
``M domega/dt = P_m - P - D omega``, ``d(delta)/dt = omega`` with fixed
terminal magnitude.  The reference bus is held at its power-flow phasor.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import expm, solve_continuous_lyapunov

from .errors import CaseError, SimulationError
from .grid import NetworkModel, StateVector, injection_derivatives, solve_power_flow
from .kernels import get_kernel

SCHEMES = ("exponential", "explicit")
V_BAND = (0.2, 2.0)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Uniformly sampled bus phasors.

    ``angles`` and ``magnitudes`` have shape ``(n_samples, len(bus_ids))``;
    sample ``k`` is taken at ``start_time + k * dt``.
    """

    dt: float
    bus_ids: tuple[int, ...]
    angles: np.ndarray
    magnitudes: np.ndarray
    start_time: float = 0.0

    def __post_init__(self):
        a = np.asarray(self.angles, dtype=float)
        m = np.asarray(self.magnitudes, dtype=float)
        if a.shape != m.shape or a.ndim != 2 or a.shape[1] != len(self.bus_ids):
            raise ValueError("angles/magnitudes must be (n_samples, n_buses)")
        if a.shape[0] < 2:
            raise ValueError("a trajectory needs at least 2 samples")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "bus_ids", tuple(int(b) for b in self.bus_ids))
        object.__setattr__(self, "angles", a)
        object.__setattr__(self, "magnitudes", m)

    @property
    def n_samples(self) -> int:
        return self.angles.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.start_time + self.dt * np.arange(self.n_samples)

    def column(self, bus_id: int) -> int:
        try:
            return self.bus_ids.index(bus_id)
        except ValueError:
            raise KeyError(f"bus {bus_id} not in trajectory") from None

    def state(self, k: int) -> StateVector:
        return StateVector(self.angles[k], self.magnitudes[k])

    def __len__(self):
        return self.n_samples

    def __getitem__(self, k: int) -> StateVector:
        return self.state(k)

    def window(self, start: int, stop: int | None = None) -> "Trajectory":
        stop = self.n_samples if stop is None else stop
        return Trajectory(self.dt, self.bus_ids, self.angles[start:stop],
                          self.magnitudes[start:stop], self.start_time + start * self.dt)

    def decimate(self, factor: int) -> "Trajectory":
        if factor < 1:
            raise ValueError("decimation factor must be >= 1")
        sl = slice(factor - 1, None, factor)
        return Trajectory(self.dt * factor, self.bus_ids, self.angles[sl],
                          self.magnitudes[sl], self.start_time + (factor - 1) * self.dt)

    def to_csv(self, path: str | Path) -> None:
        """Long format with columns ``t, bus_id, v, delta`` (time-major)."""
        nb = len(self.bus_ids)
        t = np.repeat(self.times, nb)
        ids = np.tile(np.array(self.bus_ids, dtype=float), self.n_samples)
        table = np.column_stack([t, ids, self.magnitudes.reshape(-1), self.angles.reshape(-1)])
        write_table(path, ["t", "bus_id", "v", "delta"], table, ["%.17g", "%d", "%.17g", "%.17g"])

    @classmethod
    def from_csv(cls, path: str | Path) -> "Trajectory":
        cols = read_table(path, ["t", "bus_id", "v", "delta"])
        bus_ids, nb = bus_layout(cols["bus_id"], path)
        t = cols["t"].reshape(-1, nb)[:, 0]
        dt = float((t[-1] - t[0]) / (len(t) - 1)) if len(t) > 1 else 1.0
        return cls(dt, bus_ids, cols["delta"].reshape(-1, nb), cols["v"].reshape(-1, nb), float(t[0]))


def write_table(path: str | Path, header: Sequence[str], table: np.ndarray, fmt) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        step = 200_000
        for a in range(0, len(table), step):
            np.savetxt(fh, table[a:a + step], fmt=fmt, delimiter=",")


def read_table(path: str | Path, required: Sequence[str]) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    missing = [c for c in required if c not in header]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.size == 0:
        raise ValueError(f"{path}: empty table")
    return {c: data[:, header.index(c)] for c in required}


def bus_layout(ids: np.ndarray, path) -> tuple[tuple[int, ...], int]:
    bus_ids = tuple(dict.fromkeys(int(b) for b in ids[:1000]))
    nb = len(bus_ids)
    if ids.size % nb or not np.array_equal(ids.reshape(-1, nb), np.broadcast_to(bus_ids, (ids.size // nb, nb))):
        raise ValueError(f"{path}: ragged table (bus ids must repeat in a fixed order)")
    return bus_ids, nb


@dataclass(frozen=True, eq=False)
class OUSystem:
    """Linear model ``dx = A x dt + B dW`` over ``[delta_1..delta_k, V_1..V_k]``."""

    a_matrix: np.ndarray
    b_matrix: np.ndarray
    equilibrium: StateVector
    bus_ids: tuple[int, ...]

    def __post_init__(self):
        a = np.asarray(self.a_matrix, dtype=float)
        b = np.asarray(self.b_matrix, dtype=float)
        k2 = 2 * len(self.bus_ids)
        if a.shape != (k2, k2) or b.shape != (k2, k2):
            raise ValueError(f"A and B must be {k2}x{k2}")
        object.__setattr__(self, "a_matrix", a)
        object.__setattr__(self, "b_matrix", b)
        object.__setattr__(self, "bus_ids", tuple(self.bus_ids))

    @property
    def is_stable(self) -> bool:
        return bool(np.all(np.linalg.eigvals(self.a_matrix).real < 0))

    def stationary_covariance(self) -> np.ndarray:
        if not self.is_stable:
            raise SimulationError("A has eigenvalues with non-negative real part")
        q = self.b_matrix @ self.b_matrix.T
        c = solve_continuous_lyapunov(self.a_matrix, -q)
        return (c + c.T) / 2


# ---------------------------------------------------------------------------
# linearisation
# ---------------------------------------------------------------------------

def linearize(net: NetworkModel, eq: StateVector, bus_subset: Iterable[int]) -> OUSystem:
    """Linear OU model of the load dynamics restricted to ``bus_subset``.

    Buses outside the subset are frozen at ``eq``; rows follow the order of
    ``bus_subset`` (sorted when a set is given).
    """
    ids = sorted(bus_subset) if isinstance(bus_subset, (set, frozenset)) else list(bus_subset)
    for bid in ids:
        if net.bus(bid).kind == "generator":
            raise CaseError(f"bus {bid} is a generator; only load buses can be linearized")
    pos = np.array([net.index[b] for b in ids], dtype=np.intp)
    dp_dd, dp_dv, dq_dd, dq_dv = injection_derivatives(net, eq)
    J = np.block([[dp_dd[np.ix_(pos, pos)], dp_dv[np.ix_(pos, pos)]],
                  [dq_dd[np.ix_(pos, pos)], dq_dv[np.ix_(pos, pos)]]])
    buses = [net.bus(b) for b in ids]
    tau = np.array([b.tau_p for b in buses] + [b.tau_q for b in buses])
    A = -J / tau[:, None]
    B = np.diag([b.ps * b.sigma_p / b.tau_p for b in buses]
                + [b.qs * b.sigma_q / b.tau_q for b in buses])
    sys = OUSystem(A, B, StateVector(eq.angles[pos], eq.magnitudes[pos]), tuple(ids))
    if not sys.is_stable:
        warnings.warn("linearized A has eigenvalues with non-negative real part",
                      RuntimeWarning, stacklevel=2)
    return sys


# ---------------------------------------------------------------------------
# nonlinear simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class _StateLayout:
    """Maps the flat dynamic state onto per-bus angle/magnitude/speed slots."""

    ang_pos: np.ndarray
    mag_pos: np.ndarray
    om_pos: np.ndarray
    kind: np.ndarray
    size: int

    @classmethod
    def build(cls, net: NetworkModel) -> "_StateLayout":
        n = net.n_bus
        ang = np.full(n, -1, dtype=np.intp)
        mag = np.full(n, -1, dtype=np.intp)
        om = np.full(n, -1, dtype=np.intp)
        kind = np.zeros(n, dtype=np.intp)
        k = 0
        for i, bus in enumerate(net.buses):
            if i == net.ref_pos:
                continue
            if bus.kind == "generator":
                ang[i], om[i], kind[i] = k, k + 1, 2
            else:
                ang[i], mag[i], kind[i] = k, k + 1, 1
            k += 2
        return cls(ang, mag, om, kind, k)


def _drift_jacobian(net: NetworkModel, eq: StateVector, lay: _StateLayout) -> np.ndarray:
    dp_dd, dp_dv, dq_dd, dq_dv = injection_derivatives(net, eq)
    n = net.n_bus
    J = np.zeros((lay.size, lay.size))
    a_cols = [(j, lay.ang_pos[j]) for j in range(n) if lay.ang_pos[j] >= 0]
    m_cols = [(j, lay.mag_pos[j]) for j in range(n) if lay.mag_pos[j] >= 0]
    for i, bus in enumerate(net.buses):
        if lay.kind[i] == 1:
            ra, rm = lay.ang_pos[i], lay.mag_pos[i]
            for j, c in a_cols:
                J[ra, c] = -dp_dd[i, j] / bus.tau_p
                J[rm, c] = -dq_dd[i, j] / bus.tau_q
            for j, c in m_cols:
                J[ra, c] = -dp_dv[i, j] / bus.tau_p
                J[rm, c] = -dq_dv[i, j] / bus.tau_q
        elif lay.kind[i] == 2:
            ra, ro = lay.ang_pos[i], lay.om_pos[i]
            J[ra, ro] = 1.0
            J[ro, ro] = -bus.gen_damping / bus.gen_inertia
            for j, c in a_cols:
                J[ro, c] = -dp_dd[i, j] / bus.gen_inertia
            for j, c in m_cols:
                J[ro, c] = -dp_dv[i, j] / bus.gen_inertia
    return J


def _noise_gains(net: NetworkModel, lay: _StateLayout) -> np.ndarray:
    G = np.zeros(lay.size)
    for i, bus in enumerate(net.buses):
        if lay.kind[i] == 1:
            G[lay.ang_pos[i]] = bus.ps * bus.sigma_p / bus.tau_p
            G[lay.mag_pos[i]] = bus.qs * bus.sigma_q / bus.tau_q
    return G


def _psd_sqrt(q: np.ndarray) -> np.ndarray:
    w, U = np.linalg.eigh((q + q.T) / 2)
    return U * np.sqrt(np.clip(w, 0.0, None))


def step_operators(net: NetworkModel, eq: StateVector, dt: float,
                   scheme: str = "exponential") -> tuple[np.ndarray, np.ndarray]:
    """Return ``(E, L)`` for the update ``y <- y + E f(y) + L xi``.

    ``explicit`` is plain Euler-Maruyama (``E = dt I``, ``L = sqrt(dt) G``).
    ``exponential`` is the stochastic exponential Euler scheme built on the
    equilibrium Jacobian ``J0``: ``E = dt phi1(dt J0)`` and ``L L^T`` is the
    exact one-step covariance of the linear model.  It reduces to the exact
    discrete OU transition for linear drift and stays stable for the 0.1 s
    zero-injection time constants at any step size.
    """
    lay = _StateLayout.build(net)
    G = _noise_gains(net, lay)
    ns = lay.size
    if scheme == "explicit":
        return dt * np.eye(ns), np.sqrt(dt) * np.diag(G)
    if scheme != "exponential":
        raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
    J0 = _drift_jacobian(net, eq, lay)
    # phi1 via the augmented exponential, covariance via Van Loan's method
    aug = np.zeros((2 * ns, 2 * ns))
    aug[:ns, :ns] = J0
    aug[:ns, ns:] = np.eye(ns)
    E = expm(aug * dt)[:ns, ns:]
    vl = np.zeros((2 * ns, 2 * ns))
    vl[:ns, :ns] = -J0
    vl[:ns, ns:] = np.diag(G * G)
    vl[ns:, ns:] = J0.T
    F = expm(vl * dt)
    Qd = F[ns:, ns:].T @ F[:ns, ns:]
    return E, _psd_sqrt(Qd)


def simulate(net: NetworkModel, duration: float, dt: float = 1.0 / 600.0, seed: int = 0,
             record_every: int = 1, scheme: str = "exponential",
             equilibrium: StateVector | None = None, backend: str | None = None,
             chunk_steps: int = 6000) -> Trajectory:
    """Integrate the stochastic network from its power-flow equilibrium.

    Returns every ``record_every``-th state after the start, so a run of
    ``duration`` seconds yields ``round(duration / dt) // record_every``
    samples over all buses in network order.  Standard normal increments
    are drawn from ``numpy.random.default_rng(seed)`` in fixed-size chunks,
    so every backend sees identical noise.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not duration >= dt:
        raise ValueError("duration must be at least one step")
    if record_every < 1:
        raise ValueError("record_every must be >= 1")
    n_steps = int(round(duration / dt))
    n_rec = n_steps // record_every
    if n_rec < 2:
        raise ValueError("simulation too short: fewer than 2 recorded samples")
    eq = equilibrium if equilibrium is not None else solve_power_flow(net)
    lay = _StateLayout.build(net)
    E, L = step_operators(net, eq, dt, scheme)

    n = net.n_bus
    c1 = np.zeros(n)
    c2 = np.zeros(n)
    c3 = np.zeros(n)
    c4 = np.zeros(n)
    for i, bus in enumerate(net.buses):
        if lay.kind[i] == 1:
            c1[i], c2[i], c3[i], c4[i] = bus.ps, 1 / bus.tau_p, bus.qs, 1 / bus.tau_q
        elif lay.kind[i] == 2:
            c1[i], c2[i], c3[i] = bus.ps, 1 / bus.gen_inertia, bus.gen_damping
    y = np.zeros(lay.size)
    theta = eq.angles.copy()
    vm = eq.magnitudes.copy()
    has_a = lay.ang_pos >= 0
    has_m = lay.mag_pos >= 0
    y[lay.ang_pos[has_a]] = theta[has_a]
    y[lay.mag_pos[has_m]] = vm[has_m]

    kernel = get_kernel(backend)
    rng = np.random.default_rng(seed)
    out_t = np.empty((n_rec, n))
    out_v = np.empty((n_rec, n))
    written = 0
    done = 0
    args = (np.ascontiguousarray(E), np.ascontiguousarray(L), net.f_idx.astype(np.intp),
            net.t_idx.astype(np.intp), net.g, net.b, net.half_shunt)
    while done < n_steps:
        steps = min(chunk_steps, n_steps - done)
        xi = rng.standard_normal((steps, lay.size))
        res = kernel(y, xi, *args, theta, vm, lay.ang_pos, lay.mag_pos, lay.om_pos,
                     lay.kind, c1, c2, c3, c4, record_every, done,
                     out_t[written:], out_v[written:], V_BAND[0], V_BAND[1])
        if res < 0:
            t_fail = (done - res) * dt
            worst = net.bus_ids[int(np.argmax(np.abs(np.nan_to_num(vm, nan=1e9) - 1.0)))]
            raise SimulationError(
                f"integration left the voltage band {V_BAND} at t = {t_fail:.4f} s "
                f"(bus {worst}, |V| = {vm[net.index[worst]]:.4g}); scheme={scheme}, dt={dt}")
        written += res
        done += steps
    return Trajectory(dt * record_every, net.bus_ids, out_t[:written], out_v[:written],
                      dt * record_every)


# ---------------------------------------------------------------------------
# exact OU sampling
# ---------------------------------------------------------------------------

def simulate_ou(sys: OUSystem, n_samples: int, dt: float, seed: int = 0,
                x0: np.ndarray | None = None) -> Trajectory:
    """Exact discrete-time sampling of the OU model around its equilibrium.

    The first sample is drawn from the stationary law unless an initial
    deviation ``x0`` (``[delta; V]`` offsets) is supplied.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not sys.is_stable:
        raise SimulationError("cannot sample an OU process with unstable A")
    A = sys.a_matrix
    k2 = A.shape[0]
    rng = np.random.default_rng(seed)
    C0 = sys.stationary_covariance()
    Phi = expm(A * dt)
    Qd = C0 - Phi @ C0 @ Phi.T
    Lq = _psd_sqrt(Qd)
    xi = rng.standard_normal((n_samples, k2))
    x = np.empty((n_samples, k2))
    x[0] = _psd_sqrt(C0) @ xi[0] if x0 is None else np.asarray(x0, dtype=float)
    noise = xi[1:] @ Lq.T
    for k in range(1, n_samples):
        x[k] = Phi @ x[k - 1] + noise[k - 1]
    k = len(sys.bus_ids)
    eq = sys.equilibrium
    return Trajectory(dt, sys.bus_ids, x[:, :k] + eq.angles, x[:, k:] + eq.magnitudes, 0.0)


def restrict(traj: Trajectory, bus_ids: Sequence[int]) -> Trajectory:
    cols = [traj.column(b) for b in bus_ids]
    return Trajectory(traj.dt, tuple(bus_ids), traj.angles[:, cols], traj.magnitudes[:, cols],
                      traj.start_time)
