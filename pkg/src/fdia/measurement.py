"""Synthetic RTU snapshots and PMU phasor series."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .dynamics import Trajectory, bus_layout, read_table, write_table
from .grid import ORDERING_VERSION, NetworkModel, StateVector, measurement_function

PMU_NOISE_MODES = ("none", "relative", "tve")
PMU_COLUMNS = ["t", "bus_id", "v", "delta", "i", "theta"]


@dataclass(frozen=True, eq=False)
class RtuMeasurementSet:
    values: np.ndarray
    noise_std: float
    truth_state: StateVector | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)

    def with_values(self, values: np.ndarray) -> "RtuMeasurementSet":
        return RtuMeasurementSet(values, self.noise_std, self.truth_state)

    def to_json(self) -> str:
        return json.dumps({"z": [float(v) for v in self.values],
                           "ordering_version": ORDERING_VERSION,
                           "noise_std": self.noise_std})

    @classmethod
    def from_json(cls, text: str) -> "RtuMeasurementSet":
        doc = json.loads(text)
        if doc.get("ordering_version") != ORDERING_VERSION:
            raise ValueError(f"unsupported ordering_version {doc.get('ordering_version')!r}")
        return cls(np.array(doc["z"], dtype=float), float(doc.get("noise_std", 0.0)))


def sample_rtu(net: NetworkModel, x: StateVector, noise_std: float, seed: int) -> RtuMeasurementSet:
    """``z = h(x) + e`` with iid ``N(0, noise_std^2)`` errors."""
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    h = measurement_function(net, x)
    e = np.random.default_rng(seed).normal(0.0, 1.0, h.shape) * noise_std
    return RtuMeasurementSet(h + e, noise_std, x)


@dataclass(frozen=True)
class PmuNoiseSpec:
    """PMU error model.

    ``relative``: per channel Gaussian with std ``level * scale`` where the
    scale is the largest change of that noiseless channel over the window,
    either its range (``basis="range"``) or its largest one-sample step
    (``basis="increment"``).
    ``tve``: Gaussian phase error of std ``level`` rad on voltage and current
    angles; magnitudes untouched.
    """

    mode: str = "none"
    level: float = 0.0
    basis: str = "range"

    def __post_init__(self):
        if self.mode not in PMU_NOISE_MODES:
            raise ValueError(f"unknown PMU noise mode {self.mode!r}")
        if self.level < 0:
            raise ValueError("PMU noise level must be non-negative")
        if self.basis not in ("range", "increment"):
            raise ValueError(f"unknown relative-noise basis {self.basis!r}")


@dataclass(frozen=True, eq=False)
class PmuSeries:
    """Phasor series at ``rate_hz``; arrays are ``(n_samples, len(bus_ids))``."""

    rate_hz: float
    bus_ids: tuple[int, ...]
    v: np.ndarray
    delta: np.ndarray
    i: np.ndarray
    theta: np.ndarray
    start_time: float = 0.0

    def __post_init__(self):
        arrs = [np.asarray(a, dtype=float) for a in (self.v, self.delta, self.i, self.theta)]
        shape = arrs[0].shape
        if any(a.shape != shape for a in arrs) or len(shape) != 2 or shape[1] != len(self.bus_ids):
            raise ValueError("PMU arrays must share shape (n_samples, n_buses)")
        if np.any(arrs[0] <= 0):
            raise ValueError("PMU voltage magnitudes must be positive")
        object.__setattr__(self, "bus_ids", tuple(int(b) for b in self.bus_ids))
        for name, a in zip(("v", "delta", "i", "theta"), arrs):
            object.__setattr__(self, name, a)

    @property
    def n_samples(self) -> int:
        return self.v.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.start_time + np.arange(self.n_samples) / self.rate_hz

    def column(self, bus_id: int) -> int:
        try:
            return self.bus_ids.index(bus_id)
        except ValueError:
            raise KeyError(f"bus {bus_id} not in PMU series") from None

    def last(self, n: int) -> "PmuSeries":
        """The final ``n`` samples."""
        return self.window(self.n_samples - n, self.n_samples)

    def window(self, start: int, stop: int) -> "PmuSeries":
        if not 0 <= start < stop <= self.n_samples:
            raise ValueError(f"invalid window [{start}, {stop}) of {self.n_samples} samples")
        sl = slice(start, stop)
        return PmuSeries(self.rate_hz, self.bus_ids, self.v[sl], self.delta[sl], self.i[sl],
                         self.theta[sl], self.start_time + start / self.rate_hz)

    def to_csv(self, path: str | Path) -> None:
        """Long format with columns ``t, bus_id, v, delta, i, theta``."""
        nb = len(self.bus_ids)
        cols = [np.repeat(self.times, nb), np.tile(np.array(self.bus_ids, dtype=float), self.n_samples)]
        cols += [a.reshape(-1) for a in (self.v, self.delta, self.i, self.theta)]
        write_table(path, PMU_COLUMNS, np.column_stack(cols), ["%.17g", "%d"] + ["%.17g"] * 4)

    @classmethod
    def from_csv(cls, path: str | Path, rate_hz: float | None = None) -> "PmuSeries":
        cols = read_table(path, PMU_COLUMNS)
        bus_ids, nb = bus_layout(cols["bus_id"], path)
        t = cols["t"].reshape(-1, nb)[:, 0]
        if rate_hz is None:
            rate_hz = float(round(1.0 / np.median(np.diff(t)), 9)) if len(t) > 1 else 1.0
        return cls(rate_hz, bus_ids, *(cols[c].reshape(-1, nb) for c in ("v", "delta", "i", "theta")),
                   start_time=float(t[0]))


def pmu_from_states(net: NetworkModel, angles: np.ndarray, magnitudes: np.ndarray,
                    bus_ids: Iterable[int]) -> tuple[np.ndarray, ...]:
    """Noiseless ``(V, delta, I, theta)`` for full-network state rows."""
    angles = np.atleast_2d(angles)
    magnitudes = np.atleast_2d(magnitudes)
    cols = [net.index[b] for b in bus_ids]
    vph = magnitudes * np.exp(1j * angles)
    s = vph * np.conj(vph @ net.ybus.T)
    cur = np.conj(s[:, cols] / vph[:, cols])
    return magnitudes[:, cols], angles[:, cols], np.abs(cur), np.angle(cur)


def sample_pmu(traj: Trajectory, net: NetworkModel, buses: Iterable[int], rate_hz: float,
               noise: PmuNoiseSpec | None = None, seed: int = 0) -> PmuSeries:
    """Read PMU phasors at ``buses`` from a full-network trajectory."""
    buses = tuple(buses)
    if tuple(traj.bus_ids) != tuple(net.bus_ids):
        raise ValueError("trajectory must cover every network bus in network order")
    for b in buses:
        if b not in net.index:
            raise KeyError(f"bus {b} has no trajectory data")
    ratio = 1.0 / (traj.dt * rate_hz)
    step = int(round(ratio))
    if step < 1 or abs(ratio - step) > 1e-9 * max(1.0, ratio):
        raise ValueError(f"PMU rate {rate_hz} Hz does not divide the trajectory rate {1 / traj.dt} Hz")
    sl = slice(step - 1, None, step)
    v, d, i, th = pmu_from_states(net, traj.angles[sl], traj.magnitudes[sl], buses)
    series = PmuSeries(rate_hz, buses, v, d, i, th, traj.start_time + (step - 1) * traj.dt)
    return add_pmu_noise(series, noise or PmuNoiseSpec(), seed)


def add_pmu_noise(series: PmuSeries, noise: PmuNoiseSpec, seed: int) -> PmuSeries:
    if noise.mode == "none" or noise.level == 0.0:
        return series
    rng = np.random.default_rng(seed)
    shape = series.v.shape
    if noise.mode == "tve":
        d = series.delta + noise.level * rng.standard_normal(shape)
        th = series.theta + noise.level * rng.standard_normal(shape)
        return PmuSeries(series.rate_hz, series.bus_ids, series.v, d, series.i, th, series.start_time)
    out = []
    for a in (series.v, series.delta, series.i, series.theta):
        if noise.basis == "range":
            scale = a.max(axis=0) - a.min(axis=0)
        else:
            scale = np.abs(np.diff(a, axis=0)).max(axis=0)
        out.append(a + noise.level * scale * rng.standard_normal(shape))
    v = np.abs(out[0])
    return PmuSeries(series.rate_hz, series.bus_ids, v, out[1], out[2], out[3], series.start_time)


def injections_from_pmu(series: PmuSeries, bus: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample ``(P, Q)`` from ``S = V e^{j delta} (I e^{j theta})^*``."""
    c = series.column(bus)
    s = series.v[:, c] * series.i[:, c] * np.exp(1j * (series.delta[:, c] - series.theta[:, c]))
    return s.real, s.imag


def snapshot_state(traj: Trajectory, k: int = -1) -> StateVector:
    return StateVector(traj.angles[k], traj.magnitudes[k])

