"""Device-block library: topology templates and graph-to-netlist expansion.

Each graph node expands to one or two transistor cards (or one passive
card).  Port wiring plus external pin bindings induce the net names via
union-find; unwired optional ports (mirror supplies, MOS bulk) default to
the rail matching the device polarity.  A current source driving a net
that reaches only MOS gates has no DC path, so expansion plants a
diode-connected reference device on such nets; every gate on the net then
mirrors the reference current at its own W/L over the reference W/L.  A
bound IBIAS pin on a bare gate net gets the current card itself too.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .graph import (
    KIND_BY_NAME, CircuitGraph, Node, ValidationReport, add_edge,
    empty_edges, graph_hash, make_five_t_ota, make_node, validate,
)
from .netlist import MosCard, Netlist, TwoTerminalCard

DEFAULT_IBIAS = 10e-6

# sizing of the synthesized bias reference diode; mirror ratio of a
# programmed device is (W/L) / (REF_DIODE_W / REF_DIODE_L)
REF_DIODE_W = 8e-6
REF_DIODE_L = 0.4e-6

# violation codes expand() tolerates: a partial graph (unbound input pins)
# still has a well-defined netlist, it just will not evaluate as valid
_SOFT_CODES = {"missing-binding"}

_PIN_NET = {"INP": "inp", "INN": "inn", "OUT": "out",
            "VDD": "vdd", "VSS": "0", "IBIAS": "nb"}

_GATE_PORTS = {("NMOS", "G"), ("PMOS", "G"),
               ("NMOS_DIFF_PAIR", "INP"), ("NMOS_DIFF_PAIR", "INN"),
               ("PMOS_DIFF_PAIR", "INP"), ("PMOS_DIFF_PAIR", "INN")}


def _rail(polarity: str) -> str:
    return "vdd" if polarity == "p" else "0"


class _UnionFind:
    def __init__(self):
        self.parent: dict = {}

    def find(self, x):
        self.parent.setdefault(x, x)
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


class ExpandError(ValueError):
    """Graph cannot be lowered to a netlist."""

    def __init__(self, report: ValidationReport):
        self.report = report
        lines = "; ".join(f"{v.code} at {v.where}" for v in report.violations)
        super().__init__(f"graph rejected: {lines}")


def _net_map(g: CircuitGraph) -> dict[tuple[int, int], str]:
    """Resolve every (node, port) to a net name."""
    uf = _UnionFind()
    wired: set[tuple[int, int]] = set()

    ii, jj, pp, qq = np.nonzero(g.edges)
    for i, j, p, q in zip(ii, jj, pp, qq):
        uf.union((int(i), int(p)), (int(j), int(q)))
        wired.add((int(i), int(p)))
        wired.add((int(j), int(q)))
    for pin, (i, p) in g.io_binding.items():
        uf.union(("net", _PIN_NET[pin]), (i, p))
        wired.add((i, p))

    # rail defaults for optional ports left unwired
    for i, node in enumerate(g.nodes):
        kind = node.kind
        if kind.name.endswith("_CURRENT_MIRROR"):
            for port in ("SUPA", "SUPB"):
                key = (i, kind.port_index(port))
                if key not in wired:
                    uf.union(("net", _rail(kind.polarity)), key)
        elif kind.name in ("NMOS", "PMOS"):
            key = (i, kind.port_index("B"))
            if key not in wired:
                uf.union(("net", _rail(kind.polarity)), key)

    # name every class: a bound name wins, otherwise lowest member port
    classes: dict = {}
    for i, node in enumerate(g.nodes):
        for p in range(node.kind.port_count):
            classes.setdefault(uf.find((i, p)), []).append((i, p))
    names: dict[tuple[int, int], str] = {}
    for root, members in classes.items():
        named = sorted(name for kind, name in [root] if kind == "net")
        for key in list(uf.parent):
            if key[0] == "net" and uf.find(key) == root:
                named.append(key[1])
        named = sorted(set(named))
        if len(named) > 1:
            raise ValueError(f"external pins shorted together: {named}")
        net = named[0] if named else "n{}_{}".format(*min(members))
        for key in members:
            names[key] = net
    return names


def expand(g: CircuitGraph, ibias_ref: float = DEFAULT_IBIAS) -> Netlist:
    """Lower a circuit graph to a flat transistor-level netlist."""
    report = validate(g)
    hard = [v for v in report.violations if v.code not in _SOFT_CODES]
    if hard:
        raise ExpandError(ValidationReport(hard))

    nets = _net_map(g)
    cards: list = []
    counters = {"M": 0, "R": 0, "C": 0, "I": 0}

    def next_name(kind: str) -> str:
        counters[kind] += 1
        return f"{kind}{counters[kind]}"

    for i, node in enumerate(g.nodes):
        kind = node.kind

        def net(port: str) -> str:
            return nets[(i, kind.port_index(port))]

        if kind.name in ("NMOS", "PMOS"):
            cards.append(MosCard(
                next_name("M"), net("D"), net("G"), net("S"), net("B"),
                "nmos" if kind.polarity == "n" else "pmos",
                node.param("W"), node.param("L"), _fingers(node)))
        elif kind.name.endswith("_DIFF_PAIR"):
            model = "nmos" if kind.polarity == "n" else "pmos"
            bulk = _rail(kind.polarity)
            w, l, m = node.param("W"), node.param("L"), _fingers(node)
            cards.append(MosCard(next_name("M"), net("OUTP"), net("INP"),
                                 net("TAIL"), bulk, model, w, l, m))
            cards.append(MosCard(next_name("M"), net("OUTN"), net("INN"),
                                 net("TAIL"), bulk, model, w, l, m))
        elif kind.name.endswith("_CURRENT_MIRROR"):
            model = "nmos" if kind.polarity == "n" else "pmos"
            w, l, m = node.param("W"), node.param("L"), _fingers(node)
            cards.append(MosCard(next_name("M"), net("IN"), net("IN"),
                                 net("SUPA"), net("SUPA"), model, w, l, m))
            cards.append(MosCard(next_name("M"), net("OUT"), net("IN"),
                                 net("SUPB"), net("SUPB"), model, w, l, m))
        elif kind.name == "RESISTOR":
            cards.append(TwoTerminalCard(
                next_name("R"), net("P"), net("N"), node.param("R")))
        elif kind.name == "CAPACITOR":
            cards.append(TwoTerminalCard(
                next_name("C"), net("P"), net("N"), node.param("C")))
        elif kind.name == "BIAS_CURRENT":
            cards.append(TwoTerminalCard(
                next_name("I"), net("P"), net("N"), node.param("I")))
        else:  # pragma: no cover - registry and dispatch move together
            raise AssertionError(kind.name)

    cards.extend(_bias_fixups(g, nets, cards, next_name, ibias_ref))
    return Netlist(tuple(cards), (f"ckt {graph_hash(g)}",))


def _fingers(node: Node) -> int:
    return max(1, round(node.param("M")))


def _bias_fixups(g, nets, cards, next_name, ibias_ref):
    """Reference branch for mirror-programmed bias nets.

    Emits a diode-connected device for every gates-only net that receives
    current, and the current card itself when the net is a bare IBIAS pin.
    The diode polarity follows the listening gates: nmos gates hang the
    reference off ground, pmos gates off the supply.
    """
    gate_models: dict[str, list[str]] = {}
    hard: set[str] = set()   # nets with a channel, bulk or passive contact
    isrc: set[str] = set()
    for card in cards:
        if isinstance(card, MosCard):
            gate_models.setdefault(card.gate, []).append(card.model)
            hard.update((card.drain, card.source, card.bulk))
        elif card.kind == "I":
            isrc.update(card.terminals)
        else:
            hard.update(card.terminals)

    want: list[tuple[str, bool]] = []   # (net, also emit the current card)
    if "IBIAS" in g.io_binding:
        bias_net = nets[g.io_binding["IBIAS"]]
        if bias_net in gate_models and bias_net not in hard \
                and bias_net not in isrc:
            want.append((bias_net, True))
    for net in sorted(isrc):
        if net in gate_models and net not in hard and net not in ("0", "vdd"):
            want.append((net, False))

    extra = []
    for net, with_card in want:
        if gate_models[net][0] == "nmos":
            extra.append(MosCard(next_name("M"), net, net, "0", "0",
                                 "nmos", REF_DIODE_W, REF_DIODE_L, 1))
            if with_card:
                extra.append(TwoTerminalCard(
                    next_name("I"), "vdd", net, ibias_ref))
        else:
            extra.append(MosCard(next_name("M"), net, net, "vdd", "vdd",
                                 "pmos", REF_DIODE_W, REF_DIODE_L, 1))
            if with_card:
                extra.append(TwoTerminalCard(
                    next_name("I"), net, "0", ibias_ref))
    return extra


# ---------------------------------------------------------------------------
# external pin recovery

_DRAIN_PORTS = {("NMOS", "D"), ("PMOS", "D"),
                ("NMOS_CURRENT_MIRROR", "OUT"), ("PMOS_CURRENT_MIRROR", "OUT"),
                ("NMOS_DIFF_PAIR", "OUTP"), ("NMOS_DIFF_PAIR", "OUTN"),
                ("PMOS_DIFF_PAIR", "OUTP"), ("PMOS_DIFF_PAIR", "OUTN")}


def recover_io(g: CircuitGraph) -> dict[str, tuple[int, int]] | None:
    """Assign external pins to ports of a bare structure.

    Deterministic rules: the first differential pair provides the inputs;
    rails bind to mirror supplies or single-device sources by polarity; the
    output is the deepest drain net measured in gate-to-drain hops from the
    inputs; a leftover unwired gate takes the bias pin.  Returns None when
    a rule has no candidate.
    """
    pair_idx = next((i for i, nd in enumerate(g.nodes)
                     if nd.kind.name.endswith("_DIFF_PAIR")), None)
    if pair_idx is None:
        return None
    pk = g.nodes[pair_idx].kind
    io = {"INP": (pair_idx, pk.port_index("INP")),
          "INN": (pair_idx, pk.port_index("INN"))}

    uf = _UnionFind()
    wired = set()
    ii, jj, pp, qq = np.nonzero(g.edges)
    for i, j, p, q in zip(ii, jj, pp, qq):
        uf.union((int(i), int(p)), (int(j), int(q)))
        wired.add((int(i), int(p)))
        wired.add((int(j), int(q)))

    def find_port(kinds_ports, qualify=None):
        for i, node in enumerate(g.nodes):
            for port in node.kind.ports:
                if (node.kind.name, port) in kinds_ports:
                    key = (i, node.kind.port_index(port))
                    if qualify is None or qualify(key):
                        return key
        return None

    def unwired(key):
        return key not in wired

    def rail_like(key):
        # a MOS source can serve as a rail pin only if nothing on its net
        # is a drain (a source stacked on a drain is a cascode, not a rail)
        root = uf.find(key)
        for i, node in enumerate(g.nodes):
            for p in range(node.kind.port_count):
                if uf.find((i, p)) != root:
                    continue
                if (node.kind.name, node.kind.ports[p]) in _DRAIN_PORTS:
                    return False
        return True

    vdd = find_port({("PMOS_CURRENT_MIRROR", "SUPA")})
    if vdd is None:
        vdd = find_port({("PMOS", "S")}, qualify=rail_like)
    vss = find_port({("NMOS_CURRENT_MIRROR", "SUPA")})
    if vss is None:
        vss = find_port({("NMOS", "S")}, qualify=rail_like)
    if vdd is None or vss is None:
        return None
    io["VDD"], io["VSS"] = vdd, vss

    out = _deepest_drain_net(g, uf, io)
    if out is None:
        return None
    io["OUT"] = out

    bias = find_port({("NMOS", "G"), ("PMOS", "G")}, qualify=unwired)
    if bias is not None:
        io["IBIAS"] = bias
    return io


def _deepest_drain_net(g, uf, io):
    def net_of(i, port_name):
        kind = g.nodes[i].kind
        return uf.find((i, kind.port_index(port_name)))

    members: dict = {}
    for i, node in enumerate(g.nodes):
        for p in range(node.kind.port_count):
            members.setdefault(uf.find((i, p)), []).append((i, p))

    # gate-to-drain hops add one stage of depth, source-to-drain and
    # mirror-in-to-out keep it (cascodes and mirrors continue a stage)
    hops = []
    for i, node in enumerate(g.nodes):
        name = node.kind.name
        if name in ("NMOS", "PMOS"):
            hops.append((net_of(i, "G"), net_of(i, "D"), 1))
            hops.append((net_of(i, "S"), net_of(i, "D"), 0))
        elif name.endswith("_DIFF_PAIR"):
            for gate in ("INP", "INN"):
                for drain in ("OUTP", "OUTN"):
                    hops.append((net_of(i, gate), net_of(i, drain), 1))
        elif name.endswith("_CURRENT_MIRROR"):
            hops.append((net_of(i, "IN"), net_of(i, "OUT"), 0))

    depth = {root: None for root in members}
    for pin in ("INP", "INN"):
        depth[uf.find(io[pin])] = 0
    for _ in range(len(members) + 1):
        changed = False
        for src, dst, w in hops:
            if src == dst or depth.get(src) is None:
                continue
            cand = min(depth[src] + w, len(g.nodes) + 1)
            if depth.get(dst) is None or cand > depth[dst]:
                depth[dst] = cand
                changed = True
        if not changed:
            break

    excluded = {uf.find(io[pin]) for pin in ("INP", "INN", "VDD", "VSS")}
    best_key, best_port = None, None
    for root, ports in members.items():
        if root in excluded or not depth.get(root):
            continue
        drainish = sorted(
            (i, p) for i, p in ports
            if (g.nodes[i].kind.name, g.nodes[i].kind.ports[p]) in _DRAIN_PORTS)
        if not drainish:
            continue
        diode = _is_diode_net(g, uf, root)
        key = (depth[root], not diode, len(drainish),
               tuple(-c for pair in drainish for c in pair))
        if best_key is None or key > best_key:
            best_key, best_port = key, drainish[0]
    return best_port


def _is_diode_net(g, uf, root) -> bool:
    for i, node in enumerate(g.nodes):
        name = node.kind.name
        if name.endswith("_CURRENT_MIRROR"):
            if uf.find((i, node.kind.port_index("IN"))) == root:
                return True
        elif name in ("NMOS", "PMOS"):
            d = uf.find((i, node.kind.port_index("D")))
            if d == root and d == uf.find((i, node.kind.port_index("G"))):
                return True
    return False


# ---------------------------------------------------------------------------
# topology templates

@dataclass(frozen=True)
class TopologyTemplate:
    id: str
    polarity: str
    stage_counts: tuple[int, ...]
    build: Callable[[int], CircuitGraph]


def _finish(nodes, edges) -> CircuitGraph:
    bare = CircuitGraph(tuple(nodes), edges)
    io = recover_io(bare)
    assert io is not None, "template must bind all pins"
    return CircuitGraph(tuple(nodes), edges.copy(), io)


def _add_second_stage(nodes, edges, stage1_out, cs_kind, cs_w):
    """Common-source second stage: CS device, resistive load, Miller cap.

    stage1_out is the (node, port) whose net carries the first-stage
    output; cs_kind/cs_w pick the device whose Vgs matches that net's DC
    level so the open-loop bias point lands mid-rail against the load.
    """
    cs = make_node(cs_kind, W=cs_w, L=0.4e-6, M=1)
    rload = make_node("RESISTOR", R=60e3)
    cmiller = make_node("CAPACITOR", C=6.8e-12)

    cs_i = len(nodes)
    nodes.extend([cs, rload, cmiller])
    r_i, c_i = cs_i + 1, cs_i + 2
    new_edges = empty_edges(len(nodes))
    new_edges[:cs_i, :cs_i] = edges

    mos = cs.kind
    two = rload.kind
    add_edge(new_edges, cs_i, mos.port_index("G"), *stage1_out)
    # load resistor from the CS drain to the opposite rail's bound port is
    # resolved later by recover_io; wire it to the CS source rail peer here
    add_edge(new_edges, r_i, two.port_index("P"), cs_i, mos.port_index("D"))
    add_edge(new_edges, c_i, two.port_index("P"), *stage1_out)
    add_edge(new_edges, c_i, two.port_index("N"), cs_i, mos.port_index("D"))
    return nodes, new_edges, cs_i, r_i


def _build_ota5(stages: int, polarity: str) -> CircuitGraph:
    if polarity == "n":
        mirror = make_node("PMOS_CURRENT_MIRROR", W=4e-6, L=0.4e-6, M=1)
        pair = make_node("NMOS_DIFF_PAIR", W=4e-6, L=0.4e-6, M=1)
        tail = make_node("NMOS", W=8e-6, L=0.8e-6, M=1)
    else:
        mirror = make_node("NMOS_CURRENT_MIRROR", W=4e-6, L=0.4e-6, M=1)
        pair = make_node("PMOS_DIFF_PAIR", W=8e-6, L=0.4e-6, M=1)
        tail = make_node("PMOS", W=8e-6, L=0.8e-6, M=1)
    nodes = [mirror, pair, tail]
    edges = empty_edges(3)
    mk, pk, tk = mirror.kind, pair.kind, tail.kind
    add_edge(edges, 1, pk.port_index("OUTP"), 0, mk.port_index("IN"))
    add_edge(edges, 1, pk.port_index("OUTN"), 0, mk.port_index("OUT"))
    add_edge(edges, 1, pk.port_index("TAIL"), 2, tk.port_index("D"))

    if stages == 2:
        # mirror-side output sits one pmos Vsg under vdd for the n-input
        # flavor, one nmos Vgs above ground for the p-input flavor
        cs_kind, cs_w = ("PMOS", 8e-6) if polarity == "n" else ("NMOS", 4e-6)
        nodes, edges, cs_i, r_i = _add_second_stage(
            nodes, edges, (0, mk.port_index("OUT")), cs_kind, cs_w)
        cs_k = nodes[cs_i].kind
        r_k = nodes[r_i].kind
        # the CS source joins the load-mirror supply rail (its own rail);
        # the load resistor returns to the tail-device rail (the other one)
        add_edge(edges, cs_i, cs_k.port_index("S"), 0, mk.port_index("SUPA"))
        add_edge(edges, r_i, r_k.port_index("N"), 2, tk.port_index("S"))
    return _finish(nodes, edges)


def _build_telescopic(stages: int) -> CircuitGraph:
    mirror = make_node("PMOS_CURRENT_MIRROR", W=4e-6, L=0.4e-6, M=1)
    pair = make_node("NMOS_DIFF_PAIR", W=4e-6, L=0.4e-6, M=1)
    casc_a = make_node("NMOS", W=4e-6, L=0.4e-6, M=1)
    casc_b = make_node("NMOS", W=4e-6, L=0.4e-6, M=1)
    tail = make_node("NMOS", W=8e-6, L=0.8e-6, M=1)
    nodes = [mirror, pair, casc_a, casc_b, tail]
    edges = empty_edges(5)
    mk, pk, ck = mirror.kind, pair.kind, casc_a.kind
    add_edge(edges, 1, pk.port_index("OUTP"), 2, ck.port_index("S"))
    add_edge(edges, 1, pk.port_index("OUTN"), 3, ck.port_index("S"))
    # diode-cascode: casc_a drain and gate both ride the mirror input
    add_edge(edges, 2, ck.port_index("D"), 0, mk.port_index("IN"))
    add_edge(edges, 2, ck.port_index("G"), 0, mk.port_index("IN"))
    add_edge(edges, 3, ck.port_index("G"), 2, ck.port_index("G"))
    add_edge(edges, 3, ck.port_index("D"), 0, mk.port_index("OUT"))
    add_edge(edges, 1, pk.port_index("TAIL"), 4, ck.port_index("D"))

    if stages == 2:
        nodes, edges, cs_i, r_i = _add_second_stage(
            nodes, edges, (0, mk.port_index("OUT")), "PMOS", 8e-6)
        cs_k, r_k = nodes[cs_i].kind, nodes[r_i].kind
        add_edge(edges, cs_i, cs_k.port_index("S"), 0, mk.port_index("SUPA"))
        add_edge(edges, r_i, r_k.port_index("N"), 4, ck.port_index("S"))
    return _finish(nodes, edges)


def _build_cmirror_ota(stages: int) -> CircuitGraph:
    mir_a = make_node("PMOS_CURRENT_MIRROR", W=4e-6, L=0.4e-6, M=1)
    mir_b = make_node("PMOS_CURRENT_MIRROR", W=4e-6, L=0.4e-6, M=1)
    mir_c = make_node("NMOS_CURRENT_MIRROR", W=4e-6, L=0.4e-6, M=1)
    pair = make_node("NMOS_DIFF_PAIR", W=4e-6, L=0.4e-6, M=1)
    tail = make_node("NMOS", W=8e-6, L=0.8e-6, M=1)
    nodes = [mir_a, mir_b, mir_c, pair, tail]
    edges = empty_edges(5)
    mk, pk, tk = mir_a.kind, pair.kind, tail.kind
    add_edge(edges, 3, pk.port_index("OUTP"), 0, mk.port_index("IN"))
    add_edge(edges, 3, pk.port_index("OUTN"), 1, mk.port_index("IN"))
    add_edge(edges, 1, mk.port_index("OUT"), 2, mk.port_index("IN"))
    add_edge(edges, 0, mk.port_index("OUT"), 2, mk.port_index("OUT"))
    add_edge(edges, 3, pk.port_index("TAIL"), 4, tk.port_index("D"))
    # tail returns through the nmos mirror's ground rail
    add_edge(edges, 4, tk.port_index("S"), 2, mk.port_index("SUPA"))

    if stages == 2:
        # the folded output rides near the nmos mirror gate level, so the
        # second stage is an nmos device returned to the pmos rail
        nodes, edges, cs_i, r_i = _add_second_stage(
            nodes, edges, (0, mk.port_index("OUT")), "NMOS", 8e-6)
        cs_k, r_k = nodes[cs_i].kind, nodes[r_i].kind
        add_edge(edges, cs_i, cs_k.port_index("S"), 2, mk.port_index("SUPA"))
        add_edge(edges, r_i, r_k.port_index("N"), 0, mk.port_index("SUPA"))
    return _finish(nodes, edges)


TEMPLATES = (
    TopologyTemplate("ota5-n", "n", (1, 2), lambda s: _build_ota5(s, "n")),
    TopologyTemplate("ota5-p", "p", (1, 2), lambda s: _build_ota5(s, "p")),
    TopologyTemplate("telescopic-n", "n", (1, 2), _build_telescopic),
    TopologyTemplate("cm-ota-n", "n", (1, 2), _build_cmirror_ota),
)

TEMPLATE_BY_ID = {t.id: t for t in TEMPLATES}


def structure_ids() -> list[str]:
    """Flat list of template/stage combinations, e.g. 'ota5-n/1'."""
    return [f"{t.id}/{s}" for t in TEMPLATES for s in t.stage_counts]


def build_structure(sid: str) -> CircuitGraph:
    tid, _, stages = sid.partition("/")
    template = TEMPLATE_BY_ID[tid]
    s = int(stages)
    if s not in template.stage_counts:
        raise KeyError(f"{tid} has no {s}-stage form")
    return template.build(s)


def sample_structure(rng: np.random.Generator,
                     sids: list[str] | None = None) -> CircuitGraph:
    """Uniform draw over the available template/stage structures."""
    pool = sids if sids is not None else structure_ids()
    return build_structure(pool[int(rng.integers(len(pool)))])
