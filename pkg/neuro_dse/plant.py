"""
Networked-Microgrids Reference Plant
====================================

NM-3: three microgrids on six buses.

    MG1 (InSys)   bus 1 (DER1, frame reference) -- bus 2 (load)
    MG2 (InSys)   bus 3 (DER2, power-mix swap slot) -- bus 4 (load)
    MG3 (ExSys)   bus 5 (DER3) -- bus 6 (load)

    tie lines 2-3 and 1-4, boundary branch 4-5

Features:
- Reduced-order grid-forming inverter model (delta, P, Q, phi_D, phi_Q, i_D, i_Q)
  with droop, distributed-averaging secondary control or VSG swing dynamics
- Classical synchronous generator for the swap slot
- Quasi-static network solve V = Z * I_inj with constant-admittance loads
- Ground-truth simulation of the full plant (InSys plus hidden ExSys physics)
- InSys process function G(x_in, x_ex) that only sees the ExSys through the
  boundary injection x_ex
- Every dynamic function is vectorised over a leading batch axis
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from neuro_dse.config import OMEGA_BASE
from neuro_dse.errors import (
    ConfigurationError,
    EquilibriumError,
    NumericalDomainError,
    SimulationBlowUpError,
    SingularNetworkError,
)
from neuro_dse.models import DerKind, DerParams, NoiseConfig, PlantConfig
from utils.helpers import config_hash, make_rng

logger = logging.getLogger(__name__)

INVERTER_STATES = ("delta", "P", "Q", "phi_D", "phi_Q", "i_D", "i_Q")
SECONDARY_STATES = ("Omega", "e")
SG_STATES = ("delta", "omega")
BLOW_UP_LIMIT = 1e6


# --- Layout and state containers ---

class StateLayout:
    """Ordered name -> index map of a state vector"""

    def __init__(self, names: Sequence[str]):
        self.names: Tuple[str, ...] = tuple(names)
        if len(set(self.names)) != len(self.names):
            raise ConfigurationError("Duplicate state names in layout")
        self._index = {name: i for i, name in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, StateLayout) and self.names == other.names

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise ConfigurationError(f"Unknown state '{name}'") from None

    def indices(self, names: Sequence[str]) -> List[int]:
        return [self.index(n) for n in names]

    def to_dict(self) -> Dict[str, int]:
        return dict(self._index)

    def __repr__(self) -> str:
        return f"StateLayout({len(self.names)} states)"


@dataclass
class PartitionedState:
    """x_ex / x_in / optional parameter block; ``hidden`` carries ExSys internals in ground truth only"""
    x_ex: np.ndarray
    x_in: np.ndarray
    h_param: Optional[np.ndarray] = None
    hidden: Optional[np.ndarray] = None

    def as_vector(self) -> np.ndarray:
        """Estimator ordering: [x_ex; x_in; h]"""
        parts = [np.asarray(self.x_ex, float), np.asarray(self.x_in, float)]
        if self.h_param is not None:
            parts.append(np.atleast_1d(np.asarray(self.h_param, float)))
        return np.concatenate(parts)

    def copy(self) -> "PartitionedState":
        return PartitionedState(
            x_ex=np.array(self.x_ex, float),
            x_in=np.array(self.x_in, float),
            h_param=None if self.h_param is None else np.array(self.h_param, float),
            hidden=None if self.hidden is None else np.array(self.hidden, float),
        )


@dataclass
class Trajectory:
    """Uniformly sampled trajectory with its measurements"""
    dt: float
    times: np.ndarray
    x_ex: np.ndarray
    x_in: np.ndarray
    measurements: np.ndarray
    clean_measurements: np.ndarray
    ex_names: Tuple[str, ...]
    in_names: Tuple[str, ...]
    meas_names: Tuple[str, ...]
    hidden: Optional[np.ndarray] = None
    hidden_names: Tuple[str, ...] = ()
    h_param: Optional[np.ndarray] = None
    param_names: Tuple[str, ...] = ()
    meta: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.times)
        if not (len(self.x_ex) == len(self.x_in) == n):
            raise ConfigurationError("times, states and measurements must have equal length")
        if len(self.measurements) and len(self.measurements) != n:
            raise ConfigurationError("times, states and measurements must have equal length")

    def __len__(self) -> int:
        return len(self.times)

    @property
    def states(self) -> List[PartitionedState]:
        out = []
        for k in range(len(self.times)):
            out.append(PartitionedState(
                x_ex=self.x_ex[k],
                x_in=self.x_in[k],
                h_param=None if self.h_param is None else self.h_param[k],
                hidden=None if self.hidden is None else self.hidden[k],
            ))
        return out

    @property
    def state_names(self) -> Tuple[str, ...]:
        return self.ex_names + self.in_names + self.param_names

    def state_matrix(self) -> np.ndarray:
        """Estimator-ordered states, one row per sample"""
        parts = [self.x_ex, self.x_in]
        if self.h_param is not None:
            parts.append(self.h_param)
        return np.hstack(parts)


# --- Control laws ---

def droop_outputs(P, Q, params: DerParams, Omega=0.0, e_sig=0.0):
    """
    Frequency and voltage set by P-f / Q-V droop plus secondary offsets

    Returns:
        (omega, E) in pu
    """
    omega = params.omega_star - params.m_p * (P - params.P_star) + Omega
    E = params.E_star - params.n_q * (Q - params.Q_star) + e_sig
    return omega, E


def laplacian(adjacency: np.ndarray) -> np.ndarray:
    adjacency = np.asarray(adjacency, float)
    return np.diag(adjacency.sum(axis=1)) - adjacency


def secondary_derivatives(omega_all, Q_all, Omega_all, e_all, params, comm_graph, q_graph=None):
    """
    Distributed-averaging secondary control

        dOmega/dt = -alpha (omega - omega*) - A Omega
        de/dt     = -beta (E - E*) - B Q

    A = a_gain * Laplacian(comm_graph), B = b_gain * Laplacian(q_graph or comm_graph).

    Args:
        omega_all, Q_all, Omega_all, e_all: arrays whose last axis has one entry per DER
        params: one DerParams per DER (or a single shared instance)
        comm_graph: symmetric adjacency matrix over the same DERs
        q_graph: adjacency used for reactive-power sharing; defaults to comm_graph

    Returns:
        (dOmega/dt, de/dt)
    """
    omega_all, Q_all, Omega_all, e_all = (np.asarray(v, float) for v in (omega_all, Q_all, Omega_all, e_all))
    n = omega_all.shape[-1]
    if not (Q_all.shape[-1] == Omega_all.shape[-1] == e_all.shape[-1] == n):
        raise ConfigurationError("secondary_derivatives: one entry per DER is required in every vector")
    adjacency = np.asarray(comm_graph, float)
    if adjacency.shape != (n, n):
        raise ConfigurationError(f"secondary_derivatives: comm_graph must be {n}x{n}")
    q_adjacency = adjacency if q_graph is None else np.asarray(q_graph, float)
    if q_adjacency.shape != (n, n):
        raise ConfigurationError(f"secondary_derivatives: q_graph must be {n}x{n}")
    if isinstance(params, DerParams):
        params = [params] * n
    if len(params) != n:
        raise ConfigurationError("secondary_derivatives: one DerParams per DER is required")

    alpha = np.array([p.alpha for p in params])
    beta = np.array([p.beta for p in params])
    a_gain = np.array([p.a_gain for p in params])
    b_gain = np.array([p.b_gain for p in params])
    omega_star = np.array([p.omega_star for p in params])
    E_star = np.array([p.E_star for p in params])
    n_q = np.array([p.n_q for p in params])
    Q_star = np.array([p.Q_star for p in params])

    A = a_gain[:, None] * laplacian(adjacency)
    B = b_gain[:, None] * laplacian(q_adjacency)
    E_all = E_star - n_q * (Q_all - Q_star) + e_all

    d_Omega = -alpha * (omega_all - omega_star) - Omega_all @ A.T
    d_e = -beta * (E_all - E_star) - Q_all @ B.T
    return d_Omega, d_e


def vsg_derivative(omega, P, params: DerParams, H_override=None):
    """
    Virtual synchronous generator swing equation

        domega/dt = (P_ref - P + (omega* - omega)/m_p) / (2 H omega)

    Raises:
        NumericalDomainError: omega <= 0
    """
    omega = np.asarray(omega, float)
    if np.any(omega <= 0):
        raise NumericalDomainError("VSG angular speed must be positive")
    H = params.H if H_override is None else H_override
    if np.any(np.asarray(H) <= 0):
        raise NumericalDomainError("VSG inertia must be positive")
    return (params.P_star - P + (params.omega_star - omega) / params.m_p) / (2.0 * H * omega)


# --- Plant ---

@dataclass(frozen=True)
class UnitSpec:
    """A resolved DER: where it sits and where its states live"""
    name: str
    bus: int
    kind: DerKind
    params: DerParams
    subsystem: str
    offset: int
    state_names: Tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.state_names)

    @property
    def is_inverter(self) -> bool:
        return self.kind is not DerKind.SG

    @property
    def has_secondary(self) -> bool:
        return self.kind is DerKind.SECONDARY


@dataclass(frozen=True)
class Channel:
    """One measured scalar"""
    name: str
    branch: str
    source: str
    index: int
    ref: Optional[Tuple[int, int]] = None
    unit: Optional[str] = None


def _unit_state_names(kind: DerKind) -> Tuple[str, ...]:
    if kind is DerKind.SG:
        return SG_STATES
    names = INVERTER_STATES
    if kind is DerKind.SECONDARY:
        names = names + SECONDARY_STATES
    if kind is DerKind.VSG:
        names = names + ("omega",)
    return names


def _as_batch(x) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, float)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def rk4_step(f: Callable, x: np.ndarray, t: Optional[float], dt: float) -> np.ndarray:
    """Classical fixed-step Runge-Kutta; ``f(x, t)``. ``t=None`` stands for the pre-event network."""
    t2 = None if t is None else t + 0.5 * dt
    t3 = None if t is None else t + dt
    k1 = f(x, t)
    k2 = f(x + 0.5 * dt * k1, t2)
    k3 = f(x + 0.5 * dt * k2, t2)
    k4 = f(x + dt * k3, t3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


class PlantModel:
    """
    Reference networked-microgrids plant

    Holds the resolved topology, per-DER parameters, the pre/post-event
    network impedance matrices and the state layouts. Evaluation methods are
    pure and safe to call from several workers.
    """

    def __init__(self, config: PlantConfig):
        self.config = config
        self.topology = config.topology
        self.hash = config_hash(config.model_dump(mode="json"))
        self._validate_topology()
        self._resolve_units()
        self._build_networks()
        self._build_layouts()
        self._build_comm_graphs()

    # -- construction --

    def _validate_topology(self):
        topo = self.topology
        buses = list(topo.buses)
        bus_set = set(buses)
        ex_set = set(topo.exsys_buses)
        if not ex_set or not ex_set < bus_set:
            raise ConfigurationError("exsys_buses must be a non-empty strict subset of buses")
        for br in topo.branches:
            if br.from_bus not in bus_set or br.to_bus not in bus_set:
                raise ConfigurationError(f"Branch {br.from_bus}-{br.to_bus} references an unknown bus")
            if br.R == 0 and br.X == 0:
                raise ConfigurationError(f"Branch {br.from_bus}-{br.to_bus} has zero impedance")
        b_in, b_ex = topo.boundary_branch
        if b_in in ex_set or b_ex not in ex_set:
            raise ConfigurationError("boundary_branch must be (InSys bus, ExSys bus)")
        crossing = [br for br in topo.branches if (br.from_bus in ex_set) != (br.to_bus in ex_set)]
        if len(crossing) != 1 or {crossing[0].from_bus, crossing[0].to_bus} != {b_in, b_ex}:
            raise ConfigurationError("boundary branch missing: exactly one branch must connect ExSys and InSys")
        self.boundary = crossing[0]

        # reachability over branches
        adjacency = {b: set() for b in buses}
        for br in topo.branches:
            adjacency[br.from_bus].add(br.to_bus)
            adjacency[br.to_bus].add(br.from_bus)
        seen, stack = {buses[0]}, [buses[0]]
        while stack:
            for nxt in adjacency[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        if seen != bus_set:
            raise ConfigurationError(f"Unreachable buses: {sorted(bus_set - seen)}")
        self._bus_adjacency = adjacency

        for name, bus in topo.der_placements.items():
            if bus not in bus_set:
                raise ConfigurationError(f"{name} placed on unknown bus {bus}")
        for bus in topo.loads:
            if bus not in bus_set:
                raise ConfigurationError(f"Load on unknown bus {bus}")
        ref, swap = topo.reference_der, topo.swap_der
        if ref not in topo.der_placements or topo.der_placements[ref] in ex_set:
            raise ConfigurationError("reference_der must be an InSys DER")
        if swap not in topo.der_placements or topo.der_placements[swap] in ex_set:
            raise ConfigurationError("swap_der must be an InSys DER")
        for a, b in topo.comm_graph:
            if a not in topo.der_placements or b not in topo.der_placements or a == b:
                raise ConfigurationError(f"Invalid communication edge {a}-{b}")
        if not any(topo.der_placements[n] in ex_set for n in topo.der_placements):
            raise ConfigurationError("ExSys must host at least one DER")

    def _resolve_units(self):
        cfg = self.config
        topo = self.topology
        inverter_kind = DerKind.SECONDARY if cfg.control_mode == "secondary" else DerKind.DROOP
        ex_set = set(topo.exsys_buses)

        units_in, units_ex = [], []
        off_in = off_ex = 0
        for name in sorted(topo.der_placements):
            bus = topo.der_placements[name]
            kind, H = inverter_kind, None
            if name == topo.swap_der:
                if cfg.swap_kind is DerKind.VSG:
                    kind, H = DerKind.VSG, cfg.vsg_H
                elif cfg.swap_kind is DerKind.SG:
                    kind, H = DerKind.SG, cfg.sg_H
            values = {**cfg.der_defaults.model_dump(), **cfg.der_overrides.get(name, {}), "kind": kind}
            if H is not None:
                values["H"] = H
            try:
                params = DerParams(**values)
            except ValueError as e:
                raise ConfigurationError(f"Invalid parameters for {name}: {e}") from e
            names = _unit_state_names(kind)
            if bus in ex_set:
                units_ex.append(UnitSpec(name, bus, kind, params, "ex", off_ex, names))
                off_ex += len(names)
            else:
                units_in.append(UnitSpec(name, bus, kind, params, "in", off_in, names))
                off_in += len(names)
        if topo.reference_der not in {u.name for u in units_in if u.is_inverter and u.kind is not DerKind.VSG}:
            raise ConfigurationError("reference_der must be a droop or secondary inverter")
        self.units_in: List[UnitSpec] = units_in
        self.units_ex: List[UnitSpec] = units_ex
        self.units: List[UnitSpec] = units_in + units_ex
        self.unit_by_name = {u.name: u for u in self.units}
        self.reference = self.unit_by_name[topo.reference_der]

    def _admittance(self, buses: Sequence[int], branches, loads: Mapping[int, complex]) -> np.ndarray:
        index = {b: i for i, b in enumerate(buses)}
        Y = np.zeros((len(buses), len(buses)), dtype=complex)
        rs = self.config.resistance_scale
        for br in branches:
            y = 1.0 / complex(br.R * rs, br.X)
            i, j = index[br.from_bus], index[br.to_bus]
            Y[i, i] += y
            Y[j, j] += y
            Y[i, j] -= y
            Y[j, i] -= y
        for bus, y in loads.items():
            if bus in index:
                Y[index[bus], index[bus]] += y
        for unit in self.units:
            if unit.kind is DerKind.SG and unit.bus in index:
                Y[index[unit.bus], index[unit.bus]] += 1.0 / (1j * unit.params.X_d_prime)
        return Y

    def _invert(self, Y: np.ndarray, buses: Sequence[int]) -> np.ndarray:
        for i, bus in enumerate(buses):
            if np.all(np.abs(Y[i]) < 1e-14):
                raise SingularNetworkError(f"Singular network matrix: bus {bus} is isolated", bus=bus)
        if np.linalg.cond(Y) > 1e14:
            weakest = buses[int(np.argmin(np.abs(np.diag(Y))))]
            raise SingularNetworkError(
                f"Singular network matrix: bus {weakest} has no path to ground", bus=weakest
            )
        return np.linalg.inv(Y)

    def _build_networks(self):
        cfg = self.config
        topo = self.topology
        ex_set = set(topo.exsys_buses)
        self.buses_full: List[int] = list(topo.buses)
        self.buses_in: List[int] = [b for b in topo.buses if b not in ex_set]
        self.index_full = {b: i for i, b in enumerate(self.buses_full)}
        self.index_in = {b: i for i, b in enumerate(self.buses_in)}

        loads_pre = {}
        for bus, spec in topo.loads.items():
            loads_pre[bus] = cfg.load_scales.get(bus, 1.0) / complex(spec.R_load, spec.X_load)
        loads_post = dict(loads_pre)
        if cfg.load_step is not None:
            if cfg.load_step.bus not in loads_pre:
                raise ConfigurationError(f"Load step on bus {cfg.load_step.bus} which has no load")
            loads_post[cfg.load_step.bus] = loads_pre[cfg.load_step.bus] * cfg.load_step.scale

        in_branches = [br for br in topo.branches if br.from_bus not in ex_set and br.to_bus not in ex_set]
        self.in_lines = in_branches
        rs = cfg.resistance_scale
        self.y_boundary = 1.0 / complex(self.boundary.R * rs, self.boundary.X)
        self.line_admittance = {(br.from_bus, br.to_bus): 1.0 / complex(br.R * rs, br.X) for br in in_branches}

        self.Z_full = {
            False: self._invert(self._admittance(self.buses_full, topo.branches, loads_pre), self.buses_full),
            True: self._invert(self._admittance(self.buses_full, topo.branches, loads_post), self.buses_full),
        }
        self.Z_in = {
            False: self._invert(self._admittance(self.buses_in, in_branches, loads_pre), self.buses_in),
            True: self._invert(self._admittance(self.buses_in, in_branches, loads_post), self.buses_in),
        }
        b_in, b_ex = topo.boundary_branch
        self.boundary_in_bus, self.boundary_ex_bus = b_in, b_ex

    def _build_layouts(self):
        self.in_layout = StateLayout([f"{u.name}.{s}" for u in self.units_in for s in u.state_names])
        self.hidden_layout = StateLayout([f"{u.name}.{s}" for u in self.units_ex for s in u.state_names])
        ex_names = ["ex.i_D", "ex.i_Q"]
        self.ex_secondary_units = [u for u in self.units_ex if u.has_secondary]
        for u in self.ex_secondary_units:
            suffix = "" if len(self.ex_secondary_units) == 1 else f".{u.name}"
            ex_names += [f"ex.Omega{suffix}", f"ex.e{suffix}"]
        self.ex_layout = StateLayout(ex_names)

        # u_in: coupling currents of InSys inverters next to the boundary bus, plus InSys secondary signals
        neighbours = self._bus_adjacency[self.boundary_in_bus] | {self.boundary_in_bus}
        u_names = []
        for u in self.units_in:
            if u.is_inverter and u.bus in neighbours:
                u_names += [f"{u.name}.i_D", f"{u.name}.i_Q"]
        for u in self.units_in:
            if u.has_secondary:
                u_names += [f"{u.name}.Omega", f"{u.name}.e"]
        self.u_in_names: Tuple[str, ...] = tuple(u_names)
        self.u_in_indices = np.array(self.in_layout.indices(u_names), dtype=int)

    def _build_comm_graphs(self):
        secondary = [u for u in self.units if u.has_secondary]
        self.secondary_units = secondary
        n = len(secondary)
        pos = {u.name: i for i, u in enumerate(secondary)}
        adjacency = np.zeros((n, n))
        for a, b in self.topology.comm_graph:
            if a in pos and b in pos:
                adjacency[pos[a], pos[b]] = adjacency[pos[b], pos[a]] = 1.0
        if n > 1:
            reach, stack = {0}, [0]
            while stack:
                i = stack.pop()
                for j in np.nonzero(adjacency[i])[0]:
                    if int(j) not in reach:
                        reach.add(int(j))
                        stack.append(int(j))
            if len(reach) != n:
                raise ConfigurationError("comm_graph must connect every secondary-controlled DER")
        q_adjacency = adjacency.copy()
        for i, ui in enumerate(secondary):
            for j, uj in enumerate(secondary):
                if ui.subsystem != uj.subsystem:
                    q_adjacency[i, j] = 0.0
        self.comm_adjacency = adjacency
        self.q_adjacency = q_adjacency
        self.secondary_params = [u.params for u in secondary]

    # -- dimensions --

    @property
    def dim_ex(self) -> int:
        return len(self.ex_layout)

    @property
    def dim_in(self) -> int:
        return len(self.in_layout)

    @property
    def dim_hidden(self) -> int:
        return len(self.hidden_layout)

    @property
    def dim_full(self) -> int:
        return self.dim_in + self.dim_hidden

    def param_names_available(self) -> List[str]:
        return [f"{u.name}.H" for u in self.units_in if u.kind in (DerKind.VSG, DerKind.SG)]

    def nominal_param(self, name: str) -> float:
        unit_name, attr = name.rsplit(".", 1)
        if name not in self.param_names_available():
            raise ConfigurationError(f"Unknown parameter '{name}'")
        return float(getattr(self.unit_by_name[unit_name].params, attr))

    # -- network --

    def _post_event(self, t: Optional[float]) -> bool:
        step = self.config.load_step
        return step is not None and t is not None and t >= step.time - 1e-12

    def measurable_branches(self) -> List[str]:
        branches = [u.name for u in self.units_in]
        branches += [f"line{a}-{b}" for (a, b) in self.line_admittance]
        return branches

    # -- dynamics core --

    def _unit_states(self, block: np.ndarray, unit: UnitSpec) -> Dict[str, np.ndarray]:
        return {s: block[:, unit.offset + i] for i, s in enumerate(unit.state_names)}

    @staticmethod
    def _injection(unit: UnitSpec, s: Dict[str, np.ndarray]) -> np.ndarray:
        if unit.kind is DerKind.SG:
            return unit.params.E_star * np.exp(1j * s["delta"]) / (1j * unit.params.X_d_prime)
        return (s["i_D"] + 1j * s["i_Q"]) * np.exp(1j * s["delta"])

    @staticmethod
    def _outputs(unit: UnitSpec, s: Dict[str, np.ndarray], V_bus: np.ndarray) -> Dict[str, np.ndarray]:
        p = unit.params
        if unit.kind is DerKind.SG:
            E_int = p.E_star * np.exp(1j * s["delta"])
            I_s = (E_int - V_bus) / (1j * p.X_d_prime)
            return {"omega": s["omega"], "P_e": np.real(E_int * np.conj(I_s)), "I_s": I_s}
        i_loc = s["i_D"] + 1j * s["i_Q"]
        v_loc = V_bus * np.exp(-1j * s["delta"]) + complex(p.R_c, p.L_c) * i_loc
        vD, vQ = v_loc.real, v_loc.imag
        out = {
            "vD": vD,
            "vQ": vQ,
            "p": vD * s["i_D"] + vQ * s["i_Q"],
            "q": vQ * s["i_D"] - vD * s["i_Q"],
        }
        Omega = s.get("Omega", 0.0)
        e_sig = s.get("e", 0.0)
        omega, E = droop_outputs(s["P"], s["Q"], p, Omega, e_sig)
        if unit.kind is DerKind.VSG:
            omega = s["omega"]
        out["omega"], out["E"] = omega, E
        return out

    @staticmethod
    def _unit_rates(unit: UnitSpec, s, out, omega_com, H=None) -> Dict[str, np.ndarray]:
        p = unit.params
        d = {"delta": OMEGA_BASE * (out["omega"] - omega_com)}
        if unit.kind is DerKind.SG:
            H_eff = p.H if H is None else H
            d["omega"] = (p.P_star - out["P_e"] - p.D_damp * (s["omega"] - p.omega_star)) / (2.0 * H_eff)
            return d
        vD, vQ, E = out["vD"], out["vQ"], out["E"]
        d["P"] = p.omega_c * (out["p"] - s["P"])
        d["Q"] = p.omega_c * (out["q"] - s["Q"])
        d["phi_D"] = E - vD
        d["phi_Q"] = -vQ
        i_ref_D = p.K_pv * (E - vD) + p.K_iv * s["phi_D"]
        i_ref_Q = p.K_pv * (-vQ) + p.K_iv * s["phi_Q"]
        d["i_D"] = (i_ref_D - s["i_D"]) / p.tau_c + out["omega"] * s["i_Q"]
        d["i_Q"] = (i_ref_Q - s["i_Q"]) / p.tau_c - out["omega"] * s["i_D"]
        if unit.kind is DerKind.VSG:
            d["omega"] = vsg_derivative(s["omega"], s["P"], p, H)
        return d

    def _secondary_rates(self, outs, states, ex_signals=None):
        """Omega/e derivatives for every secondary unit; ExSys entries may come from x_ex"""
        units = self.secondary_units
        if not units:
            return {}
        batch = next(iter(outs.values()))["omega"].shape[0] if outs else ex_signals["batch"]
        cols = {"omega": [], "Q": [], "Omega": [], "e": []}
        for u in units:
            if u.name in outs:
                cols["omega"].append(np.broadcast_to(outs[u.name]["omega"], (batch,)))
                cols["Q"].append(states[u.name]["Q"])
                cols["Omega"].append(states[u.name]["Omega"])
                cols["e"].append(states[u.name]["e"])
            else:
                # ExSys unit seen from InSys: only its communicated signals are known
                zeros = np.zeros(batch)
                cols["omega"].append(zeros + u.params.omega_star)
                cols["Q"].append(zeros + u.params.Q_star)
                cols["Omega"].append(ex_signals[u.name][0])
                cols["e"].append(ex_signals[u.name][1])
        stacked = {k: np.stack(v, axis=-1) for k, v in cols.items()}
        d_Omega, d_e = secondary_derivatives(
            stacked["omega"], stacked["Q"], stacked["Omega"], stacked["e"],
            self.secondary_params, self.comm_adjacency, self.q_adjacency,
        )
        return {u.name: (d_Omega[:, i], d_e[:, i]) for i, u in enumerate(units)}

    def _assemble(self, units, rates, sec_rates, batch, size) -> np.ndarray:
        out = np.zeros((batch, size))
        for u in units:
            r = rates[u.name]
            for i, s in enumerate(u.state_names):
                if s == "Omega":
                    out[:, u.offset + i] = sec_rates[u.name][0]
                elif s == "e":
                    out[:, u.offset + i] = sec_rates[u.name][1]
                else:
                    out[:, u.offset + i] = r[s]
        return out

    # -- full plant (ground truth) --

    def _full_voltages(self, z: np.ndarray, t: Optional[float]):
        x_in, x_hid = z[:, :self.dim_in], z[:, self.dim_in:]
        states = {u.name: self._unit_states(x_in, u) for u in self.units_in}
        states.update({u.name: self._unit_states(x_hid, u) for u in self.units_ex})
        I = np.zeros((z.shape[0], len(self.buses_full)), dtype=complex)
        for u in self.units:
            I[:, self.index_full[u.bus]] += self._injection(u, states[u.name])
        V = I @ self.Z_full[self._post_event(t)].T
        return states, V

    def full_derivative(self, z, t: Optional[float] = None) -> np.ndarray:
        """Time derivative of the full plant state [x_in; hidden ExSys states]"""
        z, squeeze = _as_batch(z)
        states, V = self._full_voltages(z, t)
        outs = {u.name: self._outputs(u, states[u.name], V[:, self.index_full[u.bus]]) for u in self.units}
        omega_com = outs[self.reference.name]["omega"]
        rates = {u.name: self._unit_rates(u, states[u.name], outs[u.name], omega_com) for u in self.units}
        sec = self._secondary_rates(outs, states)
        batch = z.shape[0]
        dz = np.hstack([
            self._assemble(self.units_in, rates, sec, batch, self.dim_in),
            self._assemble(self.units_ex, rates, sec, batch, self.dim_hidden),
        ])
        return dz[0] if squeeze else dz

    def exsys_outputs(self, z, t: Optional[float] = None) -> np.ndarray:
        """x_ex implied by a full plant state: boundary injection into InSys plus ExSys secondary signals"""
        z, squeeze = _as_batch(z)
        states, V = self._full_voltages(z, t)
        i_b = (V[:, self.index_full[self.boundary_ex_bus]] - V[:, self.index_full[self.boundary_in_bus]]) \
            * self.y_boundary
        cols = [i_b.real, i_b.imag]
        for u in self.ex_secondary_units:
            cols += [states[u.name]["Omega"], states[u.name]["e"]]
        x_ex = np.stack(cols, axis=-1)
        return x_ex[0] if squeeze else x_ex

    def partition(self, z, t: Optional[float] = None) -> PartitionedState:
        z = np.asarray(z, float)
        return PartitionedState(
            x_ex=self.exsys_outputs(z, t),
            x_in=z[:self.dim_in].copy(),
            hidden=z[self.dim_in:].copy(),
        )

    def full_vector(self, state: PartitionedState) -> np.ndarray:
        if state.hidden is None:
            raise ConfigurationError("Ground-truth simulation needs the hidden ExSys states")
        x_in = np.asarray(state.x_in, float)
        hidden = np.asarray(state.hidden, float)
        if x_in.shape != (self.dim_in,) or hidden.shape != (self.dim_hidden,):
            raise ConfigurationError("State dimensions do not match the plant layout")
        return np.concatenate([x_in, hidden])

    # -- InSys process function G --

    def insys_voltages(self, x_in: np.ndarray, x_ex: np.ndarray, t: Optional[float]):
        states = {u.name: self._unit_states(x_in, u) for u in self.units_in}
        I = np.zeros((x_in.shape[0], len(self.buses_in)), dtype=complex)
        for u in self.units_in:
            I[:, self.index_in[u.bus]] += self._injection(u, states[u.name])
        I[:, self.index_in[self.boundary_in_bus]] += x_ex[:, 0] + 1j * x_ex[:, 1]
        V = I @ self.Z_in[self._post_event(t)].T
        return states, V

    def insys_rates(self, x_in, x_ex, h_param: Optional[Mapping[str, np.ndarray]] = None,
                    t: Optional[float] = None) -> np.ndarray:
        x_in, squeeze = _as_batch(x_in)
        x_ex, _ = _as_batch(x_ex)
        if x_in.shape[1] != self.dim_in or x_ex.shape[1] != self.dim_ex:
            raise ConfigurationError(
                f"insys_derivative expects x_in of {self.dim_in} and x_ex of {self.dim_ex} entries"
            )
        if x_ex.shape[0] != x_in.shape[0]:
            x_ex = np.broadcast_to(x_ex, (x_in.shape[0], x_ex.shape[1]))
        states, V = self.insys_voltages(x_in, x_ex, t)
        outs = {u.name: self._outputs(u, states[u.name], V[:, self.index_in[u.bus]]) for u in self.units_in}
        omega_com = outs[self.reference.name]["omega"]
        overrides = {}
        for name, value in (h_param or {}).items():
            unit_name, attr = name.rsplit(".", 1)
            if unit_name not in self.unit_by_name or attr != "H":
                raise ConfigurationError(f"Unknown parameter '{name}'")
            overrides[unit_name] = value
        rates = {
            u.name: self._unit_rates(u, states[u.name], outs[u.name], omega_com, overrides.get(u.name))
            for u in self.units_in
        }
        ex_signals = {"batch": x_in.shape[0]}
        for i, u in enumerate(self.ex_secondary_units):
            ex_signals[u.name] = (x_ex[:, 2 + 2 * i], x_ex[:, 3 + 2 * i])
        sec = self._secondary_rates(outs, states, ex_signals)
        dx = self._assemble(self.units_in, rates, sec, x_in.shape[0], self.dim_in)
        return dx[0] if squeeze else dx

    # -- equilibrium --

    def nominal_guess(self) -> np.ndarray:
        z = np.zeros(self.dim_full)
        for u in self.units:
            base = 0 if u.subsystem == "in" else self.dim_in
            p = u.params
            vals = {"delta": 0.0, "omega": p.omega_star, "Omega": 0.0, "e": 0.0}
            if u.is_inverter:
                i_D = p.P_star / p.E_star
                i_Q = -p.Q_star / p.E_star
                vals.update(P=p.P_star, Q=p.Q_star, i_D=i_D, i_Q=i_Q,
                            phi_D=i_D / p.K_iv, phi_Q=i_Q / p.K_iv)
            for i, s in enumerate(u.state_names):
                z[base + u.offset + i] = vals[s]
        return z

    def equilibrium(self, settle_time: float = 1.5, settle_dt: float = 2e-3,
                    tol: float = 1e-10, max_iter: int = 60) -> PartitionedState:
        """
        Operating point before any event

        The nominal guess is settled by a short RK4 run and then polished by a
        damped Newton iteration on the full derivative with the reference
        DER's angle pinned.

        Raises:
            EquilibriumError: the Newton iteration does not reach ``tol``
        """
        z = self.nominal_guess()
        f = lambda x, t: self.full_derivative(x, None)
        for k in range(int(round(settle_time / settle_dt))):
            z = rk4_step(f, z, None, settle_dt)
            if not np.all(np.isfinite(z)) or np.max(np.abs(z)) > BLOW_UP_LIMIT:
                raise EquilibriumError("Plant diverged while settling towards equilibrium", step=k)

        pin = self.in_layout.index(f"{self.reference.name}.delta")
        free = np.array([i for i in range(self.dim_full) if i != pin])

        def residual(zb):
            return self.full_derivative(zb, None)[..., free]

        r = residual(z)
        norm = np.max(np.abs(r))
        for it in range(max_iter):
            if norm < tol:
                break
            eps = 1e-7 * np.maximum(1.0, np.abs(z[free]))
            shifted = np.repeat(z[None, :], 2 * len(free), axis=0)
            for j, (idx, h) in enumerate(zip(free, eps)):
                shifted[2 * j, idx] += h
                shifted[2 * j + 1, idx] -= h
            vals = residual(shifted)
            J = ((vals[0::2] - vals[1::2]) / (2.0 * eps[:, None])).T
            step, *_ = np.linalg.lstsq(J, -r, rcond=None)
            lam = 1.0
            while lam > 1e-6:
                trial = z.copy()
                trial[free] += lam * step
                r_trial = residual(trial)
                n_trial = np.max(np.abs(r_trial))
                if np.isfinite(n_trial) and n_trial < norm:
                    z, r, norm = trial, r_trial, n_trial
                    break
                lam *= 0.5
            else:
                break
        if norm >= tol:
            raise EquilibriumError(f"Equilibrium search stalled at residual {norm:.3e}")
        logger.debug("Equilibrium found, residual %.2e", norm)
        return self.partition(z, None)


def build_reference_plant(config: Optional[PlantConfig] = None) -> PlantModel:
    """
    Build the NM-3 plant (or any topology described by ``config``)

    Raises:
        ConfigurationError: inconsistent topology or parameters
    """
    return PlantModel(config or PlantConfig())


def insys_derivative(x_in, x_ex, plant: PlantModel, h_param: Optional[Mapping[str, np.ndarray]] = None,
                     t: Optional[float] = None) -> np.ndarray:
    """
    dx_in/dt = G(x_in, x_ex)

    Args:
        x_in: InSys states (batch axis optional)
        x_ex: ExSys boundary states; the boundary injection enters the InSys network solve
        plant: plant model
        h_param: optional {"der2.H": value} overrides for augmented estimation
        t: time, selects the pre/post-event network (None = pre-event)
    """
    return plant.insys_rates(x_in, x_ex, h_param, t)


# --- Measurements ---

class MeasurementMap:
    """
    Measurement function M(x_ex, x_in) for a set of channels

    State-backed channels (boundary currents, DER coupling currents,
    secondary signals) are selections; line currents and SG stator currents
    come from the InSys network solve.
    """

    def __init__(self, plant: PlantModel, channels: Sequence[Channel]):
        if not channels:
            raise ConfigurationError("Empty measurement mask: the estimator would be blind")
        self.plant = plant
        self.channels: Tuple[Channel, ...] = tuple(channels)
        self.names: Tuple[str, ...] = tuple(c.name for c in channels)
        self._algebraic = [i for i, c in enumerate(channels) if c.source in ("line", "sg")]

    def __len__(self) -> int:
        return len(self.channels)

    @property
    def is_linear(self) -> bool:
        return not self._algebraic

    def __call__(self, x_ex, x_in, t: Optional[float] = None) -> np.ndarray:
        x_ex, squeeze = _as_batch(x_ex)
        x_in, _ = _as_batch(x_in)
        y = np.zeros((x_in.shape[0], len(self.channels)))
        V = states = None
        if self._algebraic:
            states, V = self.plant.insys_voltages(x_in, x_ex, t)
        for i, c in enumerate(self.channels):
            if c.source == "ex":
                y[:, i] = x_ex[:, c.index]
            elif c.source == "in":
                y[:, i] = x_in[:, c.index]
            elif c.source == "line":
                a, b = c.ref
                I = (V[:, self.plant.index_in[a]] - V[:, self.plant.index_in[b]]) * self.plant.line_admittance[c.ref]
                y[:, i] = I.real if c.index == 0 else I.imag
            else:
                unit = self.plant.unit_by_name[c.unit]
                out = self.plant._outputs(unit, states[unit.name], V[:, self.plant.index_in[unit.bus]])
                y[:, i] = out["I_s"].real if c.index == 0 else out["I_s"].imag
        return y[0] if squeeze else y

    def jacobian(self, x_ex, x_in, t: Optional[float] = None) -> np.ndarray:
        """dM/d[x_ex; x_in]: exact rows for selections, central differences for algebraic rows"""
        x_ex = np.asarray(x_ex, float)
        x_in = np.asarray(x_in, float)
        d_ex, d_in = len(x_ex), len(x_in)
        J = np.zeros((len(self.channels), d_ex + d_in))
        for i, c in enumerate(self.channels):
            if c.source == "ex":
                J[i, c.index] = 1.0
            elif c.source == "in":
                J[i, d_ex + c.index] = 1.0
        if self._algebraic:
            x = np.concatenate([x_ex, x_in])
            n = len(x)
            eps = 1e-6 * np.maximum(1.0, np.abs(x))
            shifted = np.repeat(x[None, :], 2 * n, axis=0)
            shifted[np.arange(0, 2 * n, 2), np.arange(n)] += eps
            shifted[np.arange(1, 2 * n, 2), np.arange(n)] -= eps
            vals = self(shifted[:, :d_ex], shifted[:, d_ex:], t)[:, self._algebraic]
            J[self._algebraic] = ((vals[0::2] - vals[1::2]) / (2.0 * eps[:, None])).T
        return J


def measurement_channels(plant: PlantModel, mask) -> List[Channel]:
    """
    Channels selected by a measurement mask, in a stable order:
    boundary currents, selected branches (plant order), secondary signals
    """
    selected = list(mask.selected_branches)
    known = plant.measurable_branches()
    for branch in selected:
        if branch not in known:
            raise ConfigurationError(f"Unknown branch '{branch}' in measurement mask")
    if not selected:
        raise ConfigurationError("Empty measurement mask: no InSys branch is measured")

    channels = [
        Channel("y.boundary.i_D", "boundary", "ex", plant.ex_layout.index("ex.i_D")),
        Channel("y.boundary.i_Q", "boundary", "ex", plant.ex_layout.index("ex.i_Q")),
    ]
    for branch in known:
        if branch not in selected:
            continue
        if branch in plant.unit_by_name:
            unit = plant.unit_by_name[branch]
            if unit.is_inverter:
                for comp in ("i_D", "i_Q"):
                    channels.append(Channel(f"y.{branch}.{comp}", branch, "in",
                                            plant.in_layout.index(f"{branch}.{comp}")))
            else:
                for idx, comp in enumerate(("I_D", "I_Q")):
                    channels.append(Channel(f"y.{branch}.{comp}", branch, "sg", idx, unit=branch))
        else:
            ref = tuple(int(b) for b in branch[len("line"):].split("-"))
            for idx, comp in enumerate(("I_D", "I_Q")):
                channels.append(Channel(f"y.{branch}.{comp}", branch, "line", idx, ref=ref))
    if plant.config.control_mode == "secondary" and mask.include_secondary_signals:
        for name in plant.ex_layout.names[2:]:
            channels.append(Channel(f"y.{name}", "secondary", "ex", plant.ex_layout.index(name)))
        for u in plant.units_in:
            if u.has_secondary:
                for comp in SECONDARY_STATES:
                    channels.append(Channel(f"y.{u.name}.{comp}", "secondary", "in",
                                            plant.in_layout.index(f"{u.name}.{comp}")))
    return channels


def measure(x: PartitionedState, plant: PlantModel, mask, noise: Optional[NoiseConfig],
            rng: np.random.Generator, t: Optional[float] = None):
    """
    y = M(x) + r, r ~ N(0, measurement_var I)

    Returns:
        (noisy y, clean M(x))

    Raises:
        ConfigurationError: empty mask
    """
    m_map = MeasurementMap(plant, measurement_channels(plant, mask))
    clean = m_map(x.x_ex, x.x_in, t)
    var = 0.0 if noise is None else noise.measurement_var
    y = clean + (rng.normal(0.0, np.sqrt(var), size=clean.shape) if var > 0 else 0.0)
    return y, clean


# --- Ground-truth simulation ---

def simulate_ground_truth(plant: PlantModel, x0: PartitionedState, dt: float, n_steps: int,
                          process_noise: Optional[NoiseConfig] = None, rng_seed: Optional[int] = None,
                          mask=None) -> Trajectory:
    """
    Integrate the full plant (InSys + hidden ExSys) with RK4

    Process noise w_k ~ N(0, process_var*dt*I) is added after every step and
    measurement noise N(0, measurement_var) on every sample. Deterministic
    for a given ``rng_seed``.

    Raises:
        SimulationBlowUpError: any |x| > 1e6 or non-finite state
    """
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    if mask is None:
        from neuro_dse.scenario_io import MeasurementMask
        mask = MeasurementMask.full(plant)
    m_map = MeasurementMap(plant, measurement_channels(plant, mask))
    rng = make_rng(rng_seed)
    w_std = 0.0 if process_noise is None else np.sqrt(process_noise.process_var * dt)
    r_std = 0.0 if process_noise is None else np.sqrt(process_noise.measurement_var)

    z = plant.full_vector(x0)
    n = n_steps + 1
    times = np.arange(n) * dt
    Z = np.zeros((n, plant.dim_full))
    X_ex = np.zeros((n, plant.dim_ex))
    Y_clean = np.zeros((n, len(m_map)))
    Y = np.zeros((n, len(m_map)))
    f = plant.full_derivative

    for k in range(n):
        if k > 0:
            z = rk4_step(f, z, times[k - 1], dt)
            if w_std > 0:
                z = z + rng.normal(0.0, w_std, size=z.shape)
            if not np.all(np.isfinite(z)) or np.max(np.abs(z)) > BLOW_UP_LIMIT:
                raise SimulationBlowUpError("Ground-truth simulation blew up", step=k)
        Z[k] = z
        X_ex[k] = plant.exsys_outputs(z, times[k])
        Y_clean[k] = m_map(X_ex[k], z[:plant.dim_in], times[k])
        noise = rng.normal(0.0, r_std, size=len(m_map)) if r_std > 0 else 0.0
        Y[k] = Y_clean[k] + noise

    return Trajectory(
        dt=dt,
        times=times,
        x_ex=X_ex,
        x_in=Z[:, :plant.dim_in],
        measurements=Y,
        clean_measurements=Y_clean,
        ex_names=plant.ex_layout.names,
        in_names=plant.in_layout.names,
        meas_names=m_map.names,
        hidden=Z[:, plant.dim_in:],
        hidden_names=plant.hidden_layout.names,
        meta={"plant_hash": plant.hash, "seed": rng_seed},
    )
