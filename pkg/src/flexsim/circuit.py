"""Netlist to per-topology state-space compilation.

Modified nodal analysis with capacitors treated as voltage sources of value
``v_C`` and inductors as current sources of value ``i_L``.  Solving the
resistive network for the node voltages and voltage-branch currents gives
every capacitor current and inductor voltage as a linear function of the
states, the independent sources and the nonlinear-block outputs, from which

    dx1/dt = A x1 + B1 u1 + B2 y,   u = C x1 + D1 u1 + D2 y

follows directly.  Ideal switches are two-valued resistors, so the state
vector is identical for every switch pattern.

Conventions: a branch current flows from the first node to the second node
through the element.  Current sources and current ports inject their value
into the *first* node.
"""

from __future__ import annotations

import threading
from collections import defaultdict, deque
from dataclasses import dataclass, field

import numpy as np

from .errors import CompileError
from .hybrid import TopologyMatrices

GROUND_NAMES = ("0", "gnd", "GND")
DEFAULT_R_ON = 1e-3
DEFAULT_R_OFF = 1e6

_KINDS = ("resistor", "capacitor", "inductor", "vsource", "isource", "switch",
          "port", "sensor")


@dataclass(frozen=True)
class Element:
    """One netlist element.

    ``value`` is R, C or L; ``initial`` the capacitor voltage or inductor
    current at t=0; ``ref`` the waveform name (sources), the y index (ports)
    or the u index (sensors); ``mode`` is ``"voltage"`` or ``"current"`` for
    ports and sensors; ``target`` names the element a current sensor reads.
    """

    kind: str
    name: str
    nodes: tuple = ()
    value: float = 0.0
    initial: float = 0.0
    ref: object = None
    mode: str = ""
    target: str = ""
    gain: float = 1.0
    r_on: float = DEFAULT_R_ON
    r_off: float = DEFAULT_R_OFF

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise CompileError(f"unknown element kind {self.kind!r} ({self.name})")


@dataclass
class Netlist:
    elements: list = field(default_factory=list)
    source_names: tuple = ()
    n_outputs: int = 0  # length of y
    n_inputs: int = 0   # length of u

    def __post_init__(self):
        names = [e.name for e in self.elements]
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise CompileError(f"duplicate element names {sorted(dup)}")
        self._by_name = {e.name: e for e in self.elements}

    # element groups in a fixed order
    def of(self, *kinds):
        return [e for e in self.elements if e.kind in kinds]

    def element(self, name):
        try:
            return self._by_name[name]
        except KeyError:
            raise CompileError(f"unknown element {name!r}") from None

    @property
    def switches(self):
        return self.of("switch")

    @property
    def states(self):
        return self.of("capacitor", "inductor")

    @property
    def state_names(self):
        return tuple(e.name for e in self.states)

    @property
    def initial_state(self):
        return tuple(float(e.initial) for e in self.states)

    def switch_index(self, name):
        for k, e in enumerate(self.switches):
            if e.name == name:
                return k
        raise CompileError(f"unknown switch {name!r}")

    @property
    def nodes(self):
        seen = []
        for e in self.elements:
            if e.kind == "sensor":
                continue
            for n in e.nodes:
                if n not in GROUND_NAMES and n not in seen:
                    seen.append(n)
        return seen

    def validate(self):
        for e in self.elements:
            if e.kind in ("capacitor", "inductor", "resistor") and not e.value > 0:
                raise CompileError(f"{e.kind} {e.name} must have a positive value")
            if e.kind == "switch" and not (e.r_on > 0 and e.r_off > 0):
                raise CompileError(f"switch {e.name} needs positive R_on/R_off")
            if e.kind != "sensor" or e.mode == "voltage":
                if len(e.nodes) != 2:
                    raise CompileError(f"{e.name} needs exactly two nodes")
            if e.kind in ("vsource", "isource") and e.ref not in self.source_names:
                raise CompileError(f"{e.name} references unknown waveform {e.ref!r}")
            if e.kind == "sensor" and e.mode == "current":
                tgt = self.element(e.target)
                if tgt.kind == "sensor":
                    raise CompileError(f"sensor {e.name} cannot read another sensor")
        ports = sorted(e.ref for e in self.of("port"))
        if ports != list(range(self.n_outputs)):
            raise CompileError("every nonlinear output must drive exactly one port")
        sensors = sorted(e.ref for e in self.of("sensor"))
        if sensors != list(range(self.n_inputs)):
            raise CompileError("every nonlinear input must read exactly one sensor")
        self._check_connectivity()

    def _check_connectivity(self):
        adj = defaultdict(set)
        for e in self.elements:
            if e.kind == "sensor":
                continue
            a, b = (("0" if n in GROUND_NAMES else n) for n in e.nodes)
            adj[a].add(b)
            adj[b].add(a)
        seen = {"0"}
        frontier = deque(["0"])
        while frontier:
            for nb in adj[frontier.popleft()]:
                if nb not in seen:
                    seen.add(nb)
                    frontier.append(nb)
        for n in self.nodes:
            if n not in seen:
                raise CompileError(f"node {n!r} is not connected to ground")


def compile_topology(netlist: Netlist, switch_state: int) -> TopologyMatrices:
    """Build ``TopologyMatrices`` for one switch bitmask."""
    n_sw = len(netlist.switches)
    if switch_state < 0 or switch_state >> n_sw:
        raise CompileError(f"bitmask {switch_state:#b} wider than {n_sw} switches")
    netlist.validate()

    nodes = netlist.nodes
    idx = {n: k for k, n in enumerate(nodes)}
    for g in GROUND_NAMES:
        idx[g] = -1
    vbranches = netlist.of("capacitor", "vsource") + [
        e for e in netlist.of("port") if e.mode == "voltage"]
    states = netlist.states
    s_idx = {e.name: k for k, e in enumerate(states)}
    src_idx = {n: k for k, n in enumerate(netlist.source_names)}
    N, nv = len(nodes), len(vbranches)
    nz = N + nv
    n1, l1 = len(states), len(netlist.source_names)
    m_nl, l_nl = netlist.n_outputs, netlist.n_inputs

    M = np.zeros((nz, nz))
    Kx = np.zeros((nz, n1))
    Ku = np.zeros((nz, l1))
    Ky = np.zeros((nz, m_nl))

    def stamp_g(a, b, g):
        ia, ib = idx[a], idx[b]
        if ia >= 0:
            M[ia, ia] += g
        if ib >= 0:
            M[ib, ib] += g
        if ia >= 0 and ib >= 0:
            M[ia, ib] -= g
            M[ib, ia] -= g

    def inject(node, col, K, sign):
        k = idx[node]
        if k >= 0:
            K[k, col] += sign

    sw_k = 0
    for e in netlist.elements:
        if e.kind == "resistor":
            stamp_g(*e.nodes, 1.0 / e.value)
        elif e.kind == "switch":
            closed = (switch_state >> sw_k) & 1
            stamp_g(*e.nodes, 1.0 / (e.r_on if closed else e.r_off))
            sw_k += 1
        elif e.kind == "inductor":
            # i_L leaves the first node
            inject(e.nodes[0], s_idx[e.name], Kx, -1.0)
            inject(e.nodes[1], s_idx[e.name], Kx, +1.0)
        elif e.kind == "isource":
            inject(e.nodes[0], src_idx[e.ref], Ku, +1.0)
            inject(e.nodes[1], src_idx[e.ref], Ku, -1.0)
        elif e.kind == "port" and e.mode == "current":
            inject(e.nodes[0], e.ref, Ky, +1.0)
            inject(e.nodes[1], e.ref, Ky, -1.0)

    for b, e in enumerate(vbranches):
        row = N + b
        ia, ib = idx[e.nodes[0]], idx[e.nodes[1]]
        # branch current leaves the first node
        if ia >= 0:
            M[ia, row] += 1.0
            M[row, ia] += 1.0
        if ib >= 0:
            M[ib, row] -= 1.0
            M[row, ib] -= 1.0
        if e.kind == "capacitor":
            Kx[row, s_idx[e.name]] = 1.0
        elif e.kind == "vsource":
            Ku[row, src_idx[e.ref]] = 1.0
        else:
            Ky[row, e.ref] = 1.0

    _check_regular(M, nodes, vbranches)
    Z = np.linalg.solve(M, np.hstack([Kx, Ku, Ky]))
    Zx, Zu, Zy = Z[:, :n1], Z[:, n1:n1 + l1], Z[:, n1 + l1:]

    vb_idx = {e.name: N + b for b, e in enumerate(vbranches)}

    def voltage_row(a, b):
        r = np.zeros(nz)
        if idx[a] >= 0:
            r[idx[a]] += 1.0
        if idx[b] >= 0:
            r[idx[b]] -= 1.0
        return r

    # state derivative readout
    Sd = np.zeros((n1, nz))
    for k, e in enumerate(states):
        if e.kind == "capacitor":
            Sd[k, vb_idx[e.name]] = 1.0 / e.value
        else:
            Sd[k] = voltage_row(*e.nodes) / e.value
    A, B1, B2 = Sd @ Zx, Sd @ Zu, Sd @ Zy

    # sensor readout: z-part plus direct terms
    R = np.zeros((l_nl, nz))
    Rx = np.zeros((l_nl, n1))
    Ru = np.zeros((l_nl, l1))
    Ry = np.zeros((l_nl, m_nl))
    sw_pos = {e.name: k for k, e in enumerate(netlist.switches)}
    for e in netlist.of("sensor"):
        j = e.ref
        if e.mode == "voltage":
            R[j] = voltage_row(*e.nodes)
        else:
            t = netlist.element(e.target)
            if t.kind in ("capacitor", "vsource") or (t.kind == "port" and t.mode == "voltage"):
                R[j, vb_idx[t.name]] = 1.0
            elif t.kind == "resistor":
                R[j] = voltage_row(*t.nodes) / t.value
            elif t.kind == "switch":
                closed = (switch_state >> sw_pos[t.name]) & 1
                R[j] = voltage_row(*t.nodes) / (t.r_on if closed else t.r_off)
            elif t.kind == "inductor":
                Rx[j, s_idx[t.name]] = 1.0
            elif t.kind == "isource":
                Ru[j, src_idx[t.ref]] = -1.0
            else:  # current port
                Ry[j, t.ref] = -1.0
        R[j] *= e.gain
        Rx[j] *= e.gain
        Ru[j] *= e.gain
        Ry[j] *= e.gain
    C = R @ Zx + Rx
    D1 = R @ Zu + Ru
    D2 = R @ Zy + Ry
    return TopologyMatrices(A, B1, B2, C, D1, D2)


def _check_regular(M, nodes, vbranches):
    if M.size == 0:
        return
    s = np.linalg.svd(M, compute_uv=False)
    if s[-1] <= 1e-13 * s[0]:
        _, _, vt = np.linalg.svd(M)
        k = int(np.argmax(np.abs(vt[-1])))
        where = (f"node {nodes[k]!r}" if k < len(nodes)
                 else f"branch {vbranches[k - len(nodes)].name!r}")
        raise CompileError(f"singular nodal matrix (floating subcircuit or "
                           f"voltage loop) near {where}")


class TopologyCache:
    """Compile-on-miss map from switch bitmask to matrices."""

    def __init__(self, netlist: Netlist):
        self.netlist = netlist
        self._store: dict[int, TopologyMatrices] = {}
        self._lock = threading.Lock()

    def __call__(self, switch_state: int) -> TopologyMatrices:
        return topology(self, self.netlist, switch_state)

    def __len__(self):
        return len(self._store)


def topology(cache: TopologyCache, netlist: Netlist, switch_state: int) -> TopologyMatrices:
    with cache._lock:
        hit = cache._store.get(switch_state)
    if hit is not None:
        return hit
    mats = compile_topology(netlist, switch_state)
    with cache._lock:
        return cache._store.setdefault(switch_state, mats)
