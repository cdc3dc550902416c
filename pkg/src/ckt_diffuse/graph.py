"""Attributed circuit graphs: typed device-block nodes, port-matrix edges.

A circuit is a small graph whose nodes are device blocks (single MOS,
matched differential pair, two-transistor current mirror, passives, bias
source).  Each ordered node pair (i, j) carries a k-by-k binary matrix
whose (p, q) entry says "port p of node i is wired to port q of node j".
External pins (INP, INN, OUT, VDD, VSS, IBIAS) are bound to (node, port)
pairs and live outside the tensor encoding.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

# Encoding dimensions.  MAX_PORTS is the widest port list over all kinds
# (the differential pair has five); narrower kinds simply never use the
# trailing rows/columns of an edge matrix.
MAX_PORTS = 5
KIND_COUNT = 9
PARAM_WIDTH = 4

EXTERNAL_PINS = ("INP", "INN", "OUT", "VDD", "VSS", "IBIAS")
REQUIRED_PINS = ("INP", "INN", "OUT", "VDD", "VSS")


@dataclass(frozen=True)
class ParamSlot:
    """One continuous parameter of a device kind, log-mapped onto [0, 1]."""

    name: str
    lo: float
    hi: float

    def normalize(self, value: float) -> float:
        if value <= 0:
            raise ValueError(f"{self.name} must be positive, got {value}")
        return math.log(value / self.lo) / math.log(self.hi / self.lo)

    def denormalize(self, u: float) -> float:
        return self.lo * (self.hi / self.lo) ** u


@dataclass(frozen=True)
class DeviceKind:
    """Static description of one node type."""

    name: str
    index: int
    ports: tuple[str, ...]
    required_ports: tuple[str, ...]
    polarity: str  # "n", "p", or "" for passives / sources
    slots: tuple[ParamSlot, ...]

    @property
    def port_count(self) -> int:
        return len(self.ports)

    def port_index(self, port: str) -> int:
        return self.ports.index(port)


_MOS_SLOTS = (
    ParamSlot("W", 0.2e-6, 200e-6),
    ParamSlot("L", 60e-9, 10e-6),
    ParamSlot("M", 1.0, 16.0),
)

KINDS = (
    DeviceKind("NMOS", 0, ("D", "G", "S", "B"), ("D", "G", "S"), "n", _MOS_SLOTS),
    DeviceKind("PMOS", 1, ("D", "G", "S", "B"), ("D", "G", "S"), "p", _MOS_SLOTS),
    DeviceKind(
        "NMOS_DIFF_PAIR", 2, ("OUTP", "OUTN", "INP", "INN", "TAIL"),
        ("OUTP", "OUTN", "INP", "INN", "TAIL"), "n", _MOS_SLOTS,
    ),
    DeviceKind(
        "PMOS_DIFF_PAIR", 3, ("OUTP", "OUTN", "INP", "INN", "TAIL"),
        ("OUTP", "OUTN", "INP", "INN", "TAIL"), "p", _MOS_SLOTS,
    ),
    DeviceKind(
        "NMOS_CURRENT_MIRROR", 4, ("SUPA", "SUPB", "IN", "OUT"),
        ("IN", "OUT"), "n", _MOS_SLOTS,
    ),
    DeviceKind(
        "PMOS_CURRENT_MIRROR", 5, ("SUPA", "SUPB", "IN", "OUT"),
        ("IN", "OUT"), "p", _MOS_SLOTS,
    ),
    DeviceKind("RESISTOR", 6, ("P", "N"), ("P", "N"), "", (ParamSlot("R", 100.0, 1e6),)),
    DeviceKind("CAPACITOR", 7, ("P", "N"), ("P", "N"), "", (ParamSlot("C", 10e-15, 20e-12),)),
    DeviceKind("BIAS_CURRENT", 8, ("P", "N"), ("P", "N"), "", (ParamSlot("I", 1e-6, 1e-3),)),
)

KIND_BY_NAME = {k.name: k for k in KINDS}

# Kinds that expand to MOS transistors (mirror supplies and bulk pins may
# default to a rail, so they are not in required_ports).
MOS_KINDS = frozenset(k.name for k in KINDS if k.slots is _MOS_SLOTS)


@dataclass(frozen=True)
class Node:
    """One device block: a kind plus PARAM_WIDTH normalized parameters.

    Unused trailing slots are kept at 0.0.  Values are only meaningful in
    [0, 1]; validate() flags anything outside.
    """

    kind: DeviceKind
    params: tuple[float, ...]

    def __post_init__(self):
        if len(self.params) != PARAM_WIDTH:
            raise ValueError(
                f"expected {PARAM_WIDTH} params, got {len(self.params)}")

    def param(self, name: str) -> float:
        """Denormalized value of the named parameter slot."""
        for i, slot in enumerate(self.kind.slots):
            if slot.name == name:
                return slot.denormalize(self.params[i])
        raise KeyError(f"{self.kind.name} has no parameter {name!r}")


def make_node(kind_name: str, **values: float) -> Node:
    """Build a node from denormalized parameter values, e.g. W=4e-6."""
    kind = KIND_BY_NAME[kind_name]
    params = [0.0] * PARAM_WIDTH
    seen = set()
    for i, slot in enumerate(kind.slots):
        if slot.name in values:
            params[i] = slot.normalize(values.pop(slot.name))
            seen.add(slot.name)
    if values:
        raise KeyError(f"unknown parameters for {kind_name}: {sorted(values)}")
    return Node(kind, tuple(params))


@dataclass(frozen=True, eq=False)
class CircuitGraph:
    """Immutable attributed circuit graph.

    edges has shape (n, n, MAX_PORTS, MAX_PORTS), dtype uint8, zero diagonal,
    and edges[j, i] should equal edges[i, j].T for a well-formed graph
    (validate() reports violations rather than the constructor enforcing
    them, so malformed candidates can be inspected).
    """

    nodes: tuple[Node, ...]
    edges: np.ndarray
    io_binding: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.nodes)
        if self.edges.shape != (n, n, MAX_PORTS, MAX_PORTS):
            raise ValueError(
                f"edges shape {self.edges.shape} does not match {n} nodes")
        self.edges.flags.writeable = False

    def __eq__(self, other) -> bool:
        if not isinstance(other, CircuitGraph):
            return NotImplemented
        return (self.nodes == other.nodes
                and np.array_equal(self.edges, other.edges)
                and self.io_binding == other.io_binding)

    @property
    def n(self) -> int:
        return len(self.nodes)

    def edge(self, i: int, j: int) -> np.ndarray:
        return self.edges[i, j]

    def params_matrix(self) -> np.ndarray:
        return np.array([node.params for node in self.nodes], dtype=float)

    def with_params(self, params: np.ndarray) -> "CircuitGraph":
        """Same structure and bindings, new normalized parameter matrix."""
        if params.shape != (self.n, PARAM_WIDTH):
            raise ValueError(f"params shape {params.shape} invalid")
        nodes = tuple(
            Node(node.kind, tuple(float(v) for v in row))
            for node, row in zip(self.nodes, params))
        return CircuitGraph(nodes, self.edges.copy(), dict(self.io_binding))


def empty_edges(n: int) -> np.ndarray:
    return np.zeros((n, n, MAX_PORTS, MAX_PORTS), dtype=np.uint8)


def add_edge(edges: np.ndarray, i: int, pi: int, j: int, pj: int) -> None:
    """Wire port pi of node i to port pj of node j (both directions)."""
    edges[i, j, pi, pj] = 1
    edges[j, i, pj, pi] = 1


@dataclass(frozen=True)
class Violation:
    code: str
    where: str
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation]

    @property
    def ok(self) -> bool:
        return not self.violations

    def by_code(self, code: str) -> list[Violation]:
        return [v for v in self.violations if v.code == code]


def _port_is_wired(g: CircuitGraph, i: int, p: int) -> bool:
    if g.edges[i, :, p, :].any() or g.edges[:, i, :, p].any():
        return True
    return any(binding == (i, p) for binding in g.io_binding.values())


def validate(g: CircuitGraph) -> ValidationReport:
    """Structural well-formedness check; returns all violations found."""
    out: list[Violation] = []
    n = g.n

    for i in range(n):
        if g.edges[i, i].any():
            out.append(Violation("self-edge", f"node {i}", "node wired to itself"))

    for i in range(n):
        for j in range(i + 1, n):
            if not np.array_equal(g.edges[j, i], g.edges[i, j].T):
                out.append(Violation(
                    "asymmetric-edge", f"nodes ({i},{j})",
                    "edge matrix (j,i) is not the transpose of (i,j)"))

    for i, node in enumerate(g.nodes):
        pc = node.kind.port_count
        if g.edges[i, :, pc:, :].any() or g.edges[:, i, :, pc:].any():
            out.append(Violation(
                "port-out-of-range", f"node {i}",
                f"{node.kind.name} has only {pc} ports"))
        for p, v in enumerate(node.params):
            if not (0.0 <= v <= 1.0) or not math.isfinite(v):
                out.append(Violation(
                    "param-out-of-range", f"node {i} slot {p}",
                    f"normalized parameter {v} outside [0, 1]"))

    for pin, (i, p) in g.io_binding.items():
        if pin not in EXTERNAL_PINS:
            out.append(Violation("unknown-pin", pin, "not an external pin"))
            continue
        if not (0 <= i < n) or not (0 <= p < g.nodes[i].kind.port_count):
            out.append(Violation(
                "binding-out-of-range", pin, f"({i},{p}) is not a valid port"))

    for pin in REQUIRED_PINS:
        if pin not in g.io_binding:
            out.append(Violation("missing-binding", pin, "external pin unbound"))

    # Required device ports must be wired somewhere (an edge or a binding).
    for i, node in enumerate(g.nodes):
        for port in node.kind.required_ports:
            p = node.kind.port_index(port)
            if not _port_is_wired(g, i, p):
                out.append(Violation(
                    "floating-port", f"node {i} port {port}",
                    f"required {node.kind.name}.{port} unwired"))

    # Every node must be reachable from some io-bound node over edges.
    if n:
        adj = g.edges.any(axis=(2, 3))
        seeds = {i for i, _ in g.io_binding.values() if 0 <= i < n}
        if seeds:
            seen = set()
            stack = list(seeds)
            while stack:
                i = stack.pop()
                if i in seen:
                    continue
                seen.add(i)
                stack.extend(int(j) for j in np.flatnonzero(adj[i]) if j not in seen)
            for i in range(n):
                if i not in seen:
                    out.append(Violation(
                        "unreachable-node", f"node {i}",
                        "no connection path to any bound pin"))

    return ValidationReport(out)


# Default sizing used by the built-in 5-transistor OTA and the template
# library: moderate overdrive at a 10 uA tail, healthy at 1.2 V supply.
def make_five_t_ota() -> CircuitGraph:
    """PMOS-mirror-loaded NMOS differential pair with an NMOS tail device."""
    mirror = make_node("PMOS_CURRENT_MIRROR", W=4e-6, L=0.4e-6, M=1)
    pair = make_node("NMOS_DIFF_PAIR", W=4e-6, L=0.4e-6, M=1)
    tail = make_node("NMOS", W=8e-6, L=0.8e-6, M=1)
    nodes = (mirror, pair, tail)

    edges = empty_edges(3)
    k_mir, k_pair, k_mos = mirror.kind, pair.kind, tail.kind
    # pair outputs into the mirror: OUTP drives the diode side, OUTN the
    # mirrored side (which is the amplifier output net)
    add_edge(edges, 1, k_pair.port_index("OUTP"), 0, k_mir.port_index("IN"))
    add_edge(edges, 1, k_pair.port_index("OUTN"), 0, k_mir.port_index("OUT"))
    add_edge(edges, 1, k_pair.port_index("TAIL"), 2, k_mos.port_index("D"))

    io = {
        "INP": (1, k_pair.port_index("INP")),
        "INN": (1, k_pair.port_index("INN")),
        "OUT": (0, k_mir.port_index("OUT")),
        "VDD": (0, k_mir.port_index("SUPA")),
        "VSS": (2, k_mos.port_index("S")),
        "IBIAS": (2, k_mos.port_index("G")),
    }
    return CircuitGraph(nodes, edges, io)


def to_discrete_tensor(g: CircuitGraph) -> tuple[np.ndarray, np.ndarray]:
    """Graph -> (node one-hots (n, KIND_COUNT), edge tensor (n, n, k, k))."""
    n = g.n
    v = np.zeros((n, KIND_COUNT), dtype=float)
    for i, node in enumerate(g.nodes):
        v[i, node.kind.index] = 1.0
    return v, g.edges.astype(float)


def from_discrete_tensor(
    v: np.ndarray,
    e: np.ndarray,
    params: np.ndarray | None = None,
    io_binding: dict[str, tuple[int, int]] | None = None,
) -> CircuitGraph:
    """Inverse of to_discrete_tensor.

    v must be exact one-hot rows and e binary with a zero diagonal and the
    transpose symmetry; anything else raises ValueError.  params defaults
    to all-zero slots (callers carrying parameters pass them through).
    """
    n = v.shape[0]
    if v.shape != (n, KIND_COUNT):
        raise ValueError(f"node tensor shape {v.shape} invalid")
    if e.shape != (n, n, MAX_PORTS, MAX_PORTS):
        raise ValueError(f"edge tensor shape {e.shape} invalid")
    if not np.array_equal(v, v.astype(bool).astype(float)) or not np.all(v.sum(axis=1) == 1):
        raise ValueError("node tensor rows are not one-hot")
    if not np.array_equal(e, e.astype(bool).astype(float)):
        raise ValueError("edge tensor is not binary")
    if np.any(e[np.arange(n), np.arange(n)]):
        raise ValueError("edge tensor has self edges")
    if not np.array_equal(e, np.transpose(e, (1, 0, 3, 2))):
        raise ValueError("edge tensor breaks transpose symmetry")

    kinds = [KINDS[int(idx)] for idx in v.argmax(axis=1)]
    if params is None:
        params = np.zeros((n, PARAM_WIDTH), dtype=float)
    nodes = tuple(
        Node(kind, tuple(float(x) for x in row)) for kind, row in zip(kinds, params))
    return CircuitGraph(nodes, e.astype(np.uint8), dict(io_binding or {}))


def graph_to_json(g: CircuitGraph) -> str:
    """Canonical JSON text (port indices are 0-based; i < j edges only)."""
    edges = []
    for i in range(g.n):
        for j in range(i + 1, g.n):
            pairs = [[int(p), int(q)] for p, q in zip(*np.nonzero(g.edges[i, j]))]
            if pairs:
                edges.append({"i": i, "j": j, "pairs": pairs})
    doc = {
        "nodes": [
            {"kind": node.kind.name, "params": [float(x) for x in node.params]}
            for node in g.nodes
        ],
        "edges": edges,
        "io": {pin: [int(i), int(p)] for pin, (i, p) in sorted(g.io_binding.items())},
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def graph_from_json(text: str) -> CircuitGraph:
    doc = json.loads(text)
    nodes = tuple(
        Node(KIND_BY_NAME[nd["kind"]], tuple(float(x) for x in nd["params"]))
        for nd in doc["nodes"])
    edges = empty_edges(len(nodes))
    for rec in doc["edges"]:
        i, j = rec["i"], rec["j"]
        for p, q in rec["pairs"]:
            add_edge(edges, i, p, j, q)
    io = {pin: (int(i), int(p)) for pin, (i, p) in doc.get("io", {}).items()}
    return CircuitGraph(nodes, edges, io)


def graph_hash(g: CircuitGraph) -> str:
    """Short stable content hash used in netlist headers and artifacts."""
    return hashlib.sha256(graph_to_json(g).encode()).hexdigest()[:12]
