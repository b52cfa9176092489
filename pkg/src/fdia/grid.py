"""Static network model, AC power-flow equations and Newton power flow.

Sign conventions
----------------
Lines carry their series admittance ``g + jb`` (``b < 0`` for an inductive
line) and an optional total charging susceptance ``shunt_b``.  The flow from
bus ``i`` to bus ``j`` is::

    P_ij = V_i^2 g - V_i V_j (g cos d_ij + b sin d_ij)
    Q_ij = -V_i^2 (b + shunt_b / 2) - V_i V_j (g sin d_ij - b cos d_ij)

and a bus injection is the sum of the flows leaving it.  Consumption is a
negative injection.

Measurement ordering
--------------------
``measurement_function`` returns ``2 n + 4 m`` values for ``n`` buses and
``m`` lines, in six blocks::

    [P_i (n) | Q_i (n) | P_ft (m) | Q_ft (m) | P_tf (m) | Q_tf (m)]

where ``f``/``t`` are the ``from``/``to`` ends of each line in case order.
:data:`ORDERING_VERSION` names this layout in exported files.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CaseError, ConvergenceError

BUS_KINDS = ("generator", "load", "zero_injection")
ORDERING_VERSION = "inj-P,inj-Q,Pft,Qft,Ptf,Qtf/v1"

_BUS_KEYS = {"id", "kind", "ps", "qs", "tau_p", "tau_q", "sigma_p", "sigma_q",
             "gen_inertia", "gen_damping", "v_set"}
_BUS_REQUIRED = {"id", "kind", "ps", "qs", "tau_p", "tau_q", "sigma_p", "sigma_q"}
_LINE_KEYS = {"from", "to", "g", "b", "shunt_b"}
_LINE_REQUIRED = {"from", "to", "g", "b"}
_TOP_KEYS = {"base_mva", "reference_bus", "buses", "lines"}


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    ps: float = 0.0
    qs: float = 0.0
    tau_p: float = 0.0
    tau_q: float = 0.0
    sigma_p: float = 0.0
    sigma_q: float = 0.0
    gen_inertia: float | None = None
    gen_damping: float | None = None
    v_set: float | None = None


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    g: float
    b: float
    shunt_b: float = 0.0

    @property
    def admittance(self) -> complex:
        return complex(self.g, self.b)


@dataclass(frozen=True, eq=False)
class NetworkModel:
    """Immutable grid description; validated on construction."""

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    reference_bus: int
    base_mva: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        _validate(self)

    # -- lookups ---------------------------------------------------------
    @cached_property
    def bus_ids(self) -> tuple[int, ...]:
        return tuple(b.id for b in self.buses)

    @cached_property
    def index(self) -> dict[int, int]:
        return {b.id: k for k, b in enumerate(self.buses)}

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_line(self) -> int:
        return len(self.lines)

    @property
    def n_meas(self) -> int:
        return 2 * self.n_bus + 4 * self.n_line

    @property
    def n_state(self) -> int:
        return 2 * self.n_bus - 1

    def bus(self, bus_id: int) -> Bus:
        try:
            return self.buses[self.index[bus_id]]
        except KeyError:
            raise CaseError(f"unknown bus {bus_id}") from None

    @cached_property
    def ref_pos(self) -> int:
        return self.index[self.reference_bus]

    @cached_property
    def line_index(self) -> dict[tuple[int, int], int]:
        """Map each *directed* pair ``(i, j)`` to its line position."""
        out = {}
        for k, ln in enumerate(self.lines):
            out[(ln.from_bus, ln.to_bus)] = k
            out[(ln.to_bus, ln.from_bus)] = k
        return out

    def neighbors(self, bus_id: int) -> set[int]:
        return self._adjacency[bus_id]

    @cached_property
    def _adjacency(self) -> dict[int, set[int]]:
        adj: dict[int, set[int]] = {b.id: set() for b in self.buses}
        for ln in self.lines:
            adj[ln.from_bus].add(ln.to_bus)
            adj[ln.to_bus].add(ln.from_bus)
        return adj

    # -- array views -----------------------------------------------------
    @cached_property
    def f_idx(self) -> np.ndarray:
        return np.array([self.index[ln.from_bus] for ln in self.lines], dtype=np.intp)

    @cached_property
    def t_idx(self) -> np.ndarray:
        return np.array([self.index[ln.to_bus] for ln in self.lines], dtype=np.intp)

    @cached_property
    def g(self) -> np.ndarray:
        return np.array([ln.g for ln in self.lines], dtype=float)

    @cached_property
    def b(self) -> np.ndarray:
        return np.array([ln.b for ln in self.lines], dtype=float)

    @cached_property
    def half_shunt(self) -> np.ndarray:
        return np.array([ln.shunt_b / 2.0 for ln in self.lines], dtype=float)

    @cached_property
    def ps(self) -> np.ndarray:
        return np.array([b.ps for b in self.buses], dtype=float)

    @cached_property
    def qs(self) -> np.ndarray:
        return np.array([b.qs for b in self.buses], dtype=float)

    @cached_property
    def kinds(self) -> np.ndarray:
        return np.array([b.kind for b in self.buses])

    @cached_property
    def is_gen(self) -> np.ndarray:
        return self.kinds == "generator"

    @cached_property
    def ybus(self) -> np.ndarray:
        n = self.n_bus
        y = self.g + 1j * self.b
        ysh = 1j * self.half_shunt
        Y = np.zeros((n, n), dtype=complex)
        np.add.at(Y, (self.f_idx, self.f_idx), y + ysh)
        np.add.at(Y, (self.t_idx, self.t_idx), y + ysh)
        np.add.at(Y, (self.f_idx, self.t_idx), -y)
        np.add.at(Y, (self.t_idx, self.f_idx), -y)
        return Y

    @cached_property
    def state_columns(self) -> np.ndarray:
        """Positions in ``[angles; magnitudes]`` that are free estimation states."""
        cols = np.arange(2 * self.n_bus)
        return np.delete(cols, self.ref_pos)

    # -- derived models --------------------------------------------------
    def with_bus_updates(self, updates: Mapping[int, Mapping[str, float]]) -> "NetworkModel":
        """Return a copy with selected bus fields replaced."""
        from dataclasses import replace

        buses = []
        for bus in self.buses:
            if bus.id in updates:
                bus = replace(bus, **dict(updates[bus.id]))
            buses.append(bus)
        for bid in updates:
            self.bus(bid)
        return NetworkModel(tuple(buses), self.lines, self.reference_bus, self.base_mva)

    def with_sigma(self, sigma: float) -> "NetworkModel":
        """Set ``sigma_p = sigma_q = sigma`` on every non-generator bus."""
        upd = {b.id: {"sigma_p": sigma, "sigma_q": sigma}
               for b in self.buses if b.kind != "generator"}
        return self.with_bus_updates(upd)

    def with_line_params(self, params: Mapping[tuple[int, int], tuple[float, float]]) -> "NetworkModel":
        """Return a copy where the listed lines carry new ``(g, b)`` values."""
        from dataclasses import replace

        lines = list(self.lines)
        for (i, j), (g, b) in params.items():
            k = self.line_index.get((i, j))
            if k is None:
                raise CaseError(f"({i}, {j}) is not a line")
            lines[k] = replace(lines[k], g=float(g), b=float(b))
        return NetworkModel(self.buses, tuple(lines), self.reference_bus, self.base_mva)


def _validate(net: NetworkModel) -> None:
    ids = [b.id for b in net.buses]
    if not ids:
        raise CaseError("network has no buses")
    seen = set()
    for k, b in enumerate(net.buses):
        where = f"buses[{k}] (id {b.id})"
        if b.id in seen:
            raise CaseError(f"{where}: duplicate bus id {b.id}")
        seen.add(b.id)
        if b.kind not in BUS_KINDS:
            raise CaseError(f"{where}: unknown kind {b.kind!r}")
        if b.kind != "generator" and (b.tau_p <= 0 or b.tau_q <= 0):
            raise CaseError(f"{where}: tau_p and tau_q must be positive")
        if b.sigma_p < 0 or b.sigma_q < 0:
            raise CaseError(f"{where}: noise intensities must be non-negative")
        if b.kind == "generator":
            if not (b.gen_inertia and b.gen_inertia > 0 and b.gen_damping and b.gen_damping > 0):
                raise CaseError(f"{where}: generator needs positive gen_inertia and gen_damping")
        if b.kind == "zero_injection" and (b.ps != 0.0 or b.qs != 0.0):
            raise CaseError(f"{where}: zero-injection bus must have ps = qs = 0")
        if b.v_set is not None and b.v_set <= 0:
            raise CaseError(f"{where}: v_set must be positive")
    pairs = set()
    for k, ln in enumerate(net.lines):
        where = f"lines[{k}] ({ln.from_bus}-{ln.to_bus})"
        for end in (ln.from_bus, ln.to_bus):
            if end not in seen:
                raise CaseError(f"{where}: unknown bus {end}")
        if ln.from_bus == ln.to_bus:
            raise CaseError(f"{where}: line endpoints must differ")
        if ln.g == 0.0 and ln.b == 0.0:
            raise CaseError(f"{where}: zero admittance")
        key = frozenset((ln.from_bus, ln.to_bus))
        if key in pairs:
            raise CaseError(f"{where}: duplicate line")
        pairs.add(key)
    if net.reference_bus not in seen:
        raise CaseError(f"missing reference bus {net.reference_bus}")
    ref = net.buses[ids.index(net.reference_bus)]
    if ref.kind != "generator":
        raise CaseError(f"reference bus {ref.id} must be a generator")
    # connectivity
    adj: dict[int, set[int]] = {i: set() for i in ids}
    for ln in net.lines:
        adj[ln.from_bus].add(ln.to_bus)
        adj[ln.to_bus].add(ln.from_bus)
    stack, reached = [ids[0]], {ids[0]}
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in reached:
                reached.add(nb)
                stack.append(nb)
    if len(reached) != len(ids):
        missing = sorted(set(ids) - reached)
        raise CaseError(f"disconnected network: buses {missing} unreachable")


# ---------------------------------------------------------------------------
# case files
# ---------------------------------------------------------------------------

def parse_case(text: str) -> NetworkModel:
    """Parse a JSON case document into a validated :class:`NetworkModel`."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseError(f"case file is not valid JSON: {exc}") from None
    return case_from_dict(doc)


def case_from_dict(doc: Mapping) -> NetworkModel:
    if not isinstance(doc, Mapping):
        raise CaseError("case document must be a JSON object")
    extra = set(doc) - _TOP_KEYS
    if extra:
        raise CaseError(f"unknown top-level keys: {sorted(extra)}")
    missing = _TOP_KEYS - set(doc)
    if missing:
        raise CaseError(f"missing top-level keys: {sorted(missing)}")
    buses = []
    for k, raw in enumerate(doc["buses"]):
        where = f"buses[{k}]"
        if not isinstance(raw, Mapping):
            raise CaseError(f"{where}: expected an object")
        extra = set(raw) - _BUS_KEYS
        if extra:
            raise CaseError(f"{where}: unknown keys {sorted(extra)}")
        missing = _BUS_REQUIRED - set(raw)
        if missing:
            raise CaseError(f"{where}: missing keys {sorted(missing)}")
        try:
            buses.append(Bus(
                id=_as_int(raw["id"], where),
                kind=str(raw["kind"]),
                ps=float(raw["ps"]), qs=float(raw["qs"]),
                tau_p=float(raw["tau_p"]), tau_q=float(raw["tau_q"]),
                sigma_p=float(raw["sigma_p"]), sigma_q=float(raw["sigma_q"]),
                gen_inertia=_opt_float(raw.get("gen_inertia")),
                gen_damping=_opt_float(raw.get("gen_damping")),
                v_set=_opt_float(raw.get("v_set")),
            ))
        except (TypeError, ValueError) as exc:
            raise CaseError(f"{where}: {exc}") from None
    lines = []
    for k, raw in enumerate(doc["lines"]):
        where = f"lines[{k}]"
        if not isinstance(raw, Mapping):
            raise CaseError(f"{where}: expected an object")
        extra = set(raw) - _LINE_KEYS
        if extra:
            raise CaseError(f"{where}: unknown keys {sorted(extra)}")
        missing = _LINE_REQUIRED - set(raw)
        if missing:
            raise CaseError(f"{where}: missing keys {sorted(missing)}")
        try:
            lines.append(Line(_as_int(raw["from"], where), _as_int(raw["to"], where),
                              float(raw["g"]), float(raw["b"]),
                              float(raw.get("shunt_b", 0.0))))
        except (TypeError, ValueError) as exc:
            raise CaseError(f"{where}: {exc}") from None
    return NetworkModel(tuple(buses), tuple(lines),
                        _as_int(doc["reference_bus"], "reference_bus"),
                        float(doc["base_mva"]))


def _as_int(v, where: str) -> int:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
        raise CaseError(f"{where}: expected an integer id, got {v!r}")
    return int(v)


def _opt_float(v):
    return None if v is None else float(v)


def case_to_dict(net: NetworkModel) -> dict:
    buses = []
    for b in net.buses:
        d = {"id": b.id, "kind": b.kind, "ps": b.ps, "qs": b.qs,
             "tau_p": b.tau_p, "tau_q": b.tau_q,
             "sigma_p": b.sigma_p, "sigma_q": b.sigma_q}
        for key in ("gen_inertia", "gen_damping", "v_set"):
            if getattr(b, key) is not None:
                d[key] = getattr(b, key)
        buses.append(d)
    lines = []
    for ln in net.lines:
        d = {"from": ln.from_bus, "to": ln.to_bus, "g": ln.g, "b": ln.b}
        if ln.shunt_b:
            d["shunt_b"] = ln.shunt_b
        lines.append(d)
    return {"base_mva": net.base_mva, "reference_bus": net.reference_bus,
            "buses": buses, "lines": lines}


def serialize_case(net: NetworkModel) -> str:
    return json.dumps(case_to_dict(net), indent=1)


def load_case(path: str | Path) -> NetworkModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"case file not found: {path}")
    return parse_case(path.read_text())


def builtin_case(name: str = "ieee39") -> NetworkModel:
    """Load a case bundled with the package (``"ieee39"``)."""
    try:
        text = resources.files("fdia.cases").joinpath(f"{name}.json").read_text()
    except FileNotFoundError:
        raise CaseError(f"no bundled case named {name!r}") from None
    return parse_case(text)


def resolve_case(spec: str | Path) -> NetworkModel:
    """Accept a bundled case name or a path to a case file."""
    s = str(spec)
    if s.startswith("builtin:"):
        return builtin_case(s.split(":", 1)[1])
    if not s.endswith(".json") and "/" not in s and not Path(s).exists():
        return builtin_case(s)
    path = Path(s)
    if not path.exists() and path.parent == Path(".") and path.stem in builtin_names():
        return builtin_case(path.stem)
    return load_case(s)


def builtin_names() -> list[str]:
    from importlib import resources

    return sorted(p.name[:-5] for p in resources.files("fdia.cases").iterdir()
                  if p.name.endswith(".json"))


# ---------------------------------------------------------------------------
# states and power-flow equations
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StateVector:
    """Per-bus voltage angles (rad) and magnitudes (pu) in network bus order."""

    angles: np.ndarray
    magnitudes: np.ndarray

    def __post_init__(self):
        a = np.array(self.angles, dtype=float)
        m = np.array(self.magnitudes, dtype=float)
        if a.shape != m.shape or a.ndim != 1:
            raise ValueError("angles and magnitudes must be 1-D and equal length")
        if np.any(m <= 0):
            raise ValueError("voltage magnitudes must be positive")
        a.flags.writeable = False
        m.flags.writeable = False
        object.__setattr__(self, "angles", a)
        object.__setattr__(self, "magnitudes", m)

    @classmethod
    def flat(cls, net: NetworkModel) -> "StateVector":
        return cls(np.zeros(net.n_bus), np.ones(net.n_bus))

    @classmethod
    def from_vector(cls, net: NetworkModel, x: np.ndarray, ref_angle: float = 0.0) -> "StateVector":
        """Build from the free-state vector used by estimation (reference angle removed)."""
        full = np.insert(np.asarray(x, dtype=float), net.ref_pos, ref_angle)
        n = net.n_bus
        return cls(full[:n], full[n:])

    def to_vector(self, net: NetworkModel) -> np.ndarray:
        return np.concatenate([self.angles, self.magnitudes])[net.state_columns]

    @property
    def phasors(self) -> np.ndarray:
        return self.magnitudes * np.exp(1j * self.angles)

    def replace(self, net: NetworkModel, values: Mapping[int, tuple[float, float]]) -> "StateVector":
        """Copy with ``{bus_id: (V, delta)}`` overrides."""
        a = self.angles.copy()
        m = self.magnitudes.copy()
        for bid, (v, d) in values.items():
            k = net.index[bid]
            m[k] = v
            a[k] = d
        return StateVector(a, m)


def power_injections(net: NetworkModel, x: StateVector) -> tuple[np.ndarray, np.ndarray]:
    """Active and reactive injections at every bus (complex nodal form)."""
    v = x.phasors
    s = v * np.conj(net.ybus @ v)
    return s.real, s.imag


def power_injection(net: NetworkModel, x: StateVector, i: int) -> tuple[float, float]:
    k = net.index.get(i)
    if k is None:
        raise CaseError(f"unknown bus {i}")
    p, q = power_injections(net, x)
    return float(p[k]), float(q[k])


def _flow_terms(net: NetworkModel, x: StateVector):
    vf = x.magnitudes[net.f_idx]
    vt = x.magnitudes[net.t_idx]
    d = x.angles[net.f_idx] - x.angles[net.t_idx]
    return vf, vt, np.cos(d), np.sin(d)


def line_flows(net: NetworkModel, x: StateVector):
    """Return ``(P_ft, Q_ft, P_tf, Q_tf)`` arrays, one entry per line."""
    g, b, hs = net.g, net.b, net.half_shunt
    vf, vt, c, s = _flow_terms(net, x)
    vv = vf * vt
    p_ft = vf**2 * g - vv * (g * c + b * s)
    q_ft = -vf**2 * (b + hs) - vv * (g * s - b * c)
    # reversed direction: sin flips sign
    p_tf = vt**2 * g - vv * (g * c - b * s)
    q_tf = -vt**2 * (b + hs) - vv * (-g * s - b * c)
    return p_ft, q_ft, p_tf, q_tf


def line_flow(net: NetworkModel, x: StateVector, i: int, j: int) -> tuple[float, float]:
    k = net.line_index.get((i, j))
    if k is None:
        raise CaseError(f"({i}, {j}) is not a line")
    p_ft, q_ft, p_tf, q_tf = line_flows(net, x)
    if net.lines[k].from_bus == i:
        return float(p_ft[k]), float(q_ft[k])
    return float(p_tf[k]), float(q_tf[k])


def measurement_function(net: NetworkModel, x: StateVector) -> np.ndarray:
    """h(x): injections and directed flows in the documented order."""
    p, q = power_injections(net, x)
    return np.concatenate([p, q, *line_flows(net, x)])


class MeasurementLayout:
    """Index arithmetic for the measurement vector of one network."""

    def __init__(self, net: NetworkModel):
        self.net = net
        self.n = net.n_bus
        self.m = net.n_line

    def p_inj(self, i: int) -> int:
        return self.net.index[i]

    def q_inj(self, i: int) -> int:
        return self.n + self.net.index[i]

    def flow(self, i: int, j: int) -> tuple[int, int]:
        """Indices of ``(P_ij, Q_ij)`` for the directed pair ``i -> j``."""
        k = self.net.line_index.get((i, j))
        if k is None:
            raise CaseError(f"({i}, {j}) is not a line")
        base = 2 * self.n
        if self.net.lines[k].from_bus == i:
            return base + k, base + self.m + k
        return base + 2 * self.m + k, base + 3 * self.m + k

    def labels(self) -> list[str]:
        ids = self.net.bus_ids
        out = [f"P{i}" for i in ids] + [f"Q{i}" for i in ids]
        out += [f"P{ln.from_bus}-{ln.to_bus}" for ln in self.net.lines]
        out += [f"Q{ln.from_bus}-{ln.to_bus}" for ln in self.net.lines]
        out += [f"P{ln.to_bus}-{ln.from_bus}" for ln in self.net.lines]
        out += [f"Q{ln.to_bus}-{ln.from_bus}" for ln in self.net.lines]
        return out


# ---------------------------------------------------------------------------
# derivatives
# ---------------------------------------------------------------------------

def injection_derivatives(net: NetworkModel, x: StateVector):
    """Dense ``(dP/dd, dP/dV, dQ/dd, dQ/dV)`` over all buses."""
    v = x.phasors
    vm = x.magnitudes
    Y = net.ybus
    i_inj = Y @ v
    diag_v = np.diag(v)
    ds_dd = 1j * diag_v @ np.conj(np.diag(i_inj) - Y @ diag_v)
    ds_dv = diag_v @ np.conj(Y @ np.diag(v / vm)) + np.diag(v / vm) @ np.conj(np.diag(i_inj))
    return ds_dd.real, ds_dv.real, ds_dd.imag, ds_dv.imag


def _flow_derivatives(net: NetworkModel, x: StateVector):
    """Partial derivatives of the four flow blocks w.r.t. (d_f, d_t, V_f, V_t)."""
    g, b, hs = net.g, net.b, net.half_shunt
    vf, vt, c, s = _flow_terms(net, x)
    vv = vf * vt
    gc_bs = g * c + b * s
    gs_bc = g * s - b * c
    # from -> to
    p_ft = (vv * gs_bc, -vv * gs_bc, 2 * vf * g - vt * gc_bs, -vf * gc_bs)
    q_ft = (-vv * gc_bs, vv * gc_bs, -2 * vf * (b + hs) - vt * gs_bc, -vf * gs_bc)
    # to -> from, with d_tf = -d_ft
    gc_bs_r = g * c - b * s
    gs_bc_r = -g * s - b * c
    p_tf = (-vv * gs_bc_r, vv * gs_bc_r, -vt * gc_bs_r, 2 * vt * g - vf * gc_bs_r)
    q_tf = (vv * gc_bs_r, -vv * gc_bs_r, -vt * gs_bc_r, -2 * vt * (b + hs) - vf * gs_bc_r)
    return p_ft, q_ft, p_tf, q_tf


def full_jacobian(net: NetworkModel, x: StateVector) -> np.ndarray:
    """dh/d[angles; magnitudes] including the reference-angle column."""
    n, m = net.n_bus, net.n_line
    H = np.zeros((net.n_meas, 2 * n))
    dp_dd, dp_dv, dq_dd, dq_dv = injection_derivatives(net, x)
    H[:n, :n] = dp_dd
    H[:n, n:] = dp_dv
    H[n:2 * n, :n] = dq_dd
    H[n:2 * n, n:] = dq_dv
    rows = np.arange(m)
    f, t = net.f_idx, net.t_idx
    for blk, (d_df, d_dt, d_vf, d_vt) in enumerate(_flow_derivatives(net, x)):
        r = 2 * n + blk * m + rows
        H[r, f] = d_df
        H[r, t] = d_dt
        H[r, n + f] = d_vf
        H[r, n + t] = d_vt
    return H


def jacobian(net: NetworkModel, x: StateVector) -> np.ndarray:
    """Measurement Jacobian H over the free states (reference angle dropped)."""
    return full_jacobian(net, x)[:, net.state_columns]


# ---------------------------------------------------------------------------
# power flow
# ---------------------------------------------------------------------------

def scheduled_voltages(net: NetworkModel) -> np.ndarray:
    vm = np.ones(net.n_bus)
    for k, b in enumerate(net.buses):
        if b.kind == "generator" and b.v_set is not None:
            vm[k] = b.v_set
    return vm


def power_mismatch(net: NetworkModel, x: StateVector) -> np.ndarray:
    """Injection minus schedule on every constrained quantity."""
    p, q = power_injections(net, x)
    pv_pq = np.array([k for k in range(net.n_bus) if k != net.ref_pos])
    pq = np.flatnonzero(~net.is_gen)
    return np.concatenate([(p - net.ps)[pv_pq], (q - net.qs)[pq]])


def solve_power_flow(net: NetworkModel, tol: float = 1e-10, max_iter: int = 50,
                     start: StateVector | None = None) -> StateVector:
    """Newton-Raphson power flow.

    Generator buses hold their ``v_set`` magnitude and scheduled ``ps``; the
    reference bus fixes the angle datum at 0 and balances the system.
    """
    n = net.n_bus
    pv_pq = np.array([k for k in range(n) if k != net.ref_pos])
    pq = np.flatnonzero(~net.is_gen)
    if start is None:
        vm = scheduled_voltages(net)
        va = np.zeros(n)
    else:
        vm = start.magnitudes.copy()
        va = start.angles - start.angles[net.ref_pos]
        vm[net.is_gen] = scheduled_voltages(net)[net.is_gen]
    for it in range(max_iter + 1):
        x = StateVector(va, vm)
        mis = power_mismatch(net, x)
        if np.max(np.abs(mis)) < tol:
            return x
        if it == max_iter:
            break
        dp_dd, dp_dv, dq_dd, dq_dv = injection_derivatives(net, x)
        J = np.block([[dp_dd[np.ix_(pv_pq, pv_pq)], dp_dv[np.ix_(pv_pq, pq)]],
                      [dq_dd[np.ix_(pq, pv_pq)], dq_dv[np.ix_(pq, pq)]]])
        dx = np.linalg.solve(J, -mis)
        va = va.copy()
        vm = vm.copy()
        va[pv_pq] += dx[:len(pv_pq)]
        vm[pq] += dx[len(pv_pq):]
        if np.any(vm <= 0) or not np.all(np.isfinite(dx)):
            break
    raise ConvergenceError(
        f"power flow did not converge in {max_iter} iterations "
        f"(max mismatch {np.max(np.abs(mis)):.3e} pu)")
