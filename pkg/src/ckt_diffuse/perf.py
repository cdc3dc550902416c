"""Analytic amplifier evaluation: square-law DC solve plus small-signal
nodal analysis.

The device model is the long-channel square law with channel-length
modulation, lambda = lambda_per_um / (L / 1um).  A damped Newton iteration
solves KCL for the internal net voltages; the same linearization provides
the conductance stamps for gain, CMRR and PSRR.  Poles are estimated per
net as g / (2 pi C) with oxide-area device capacitances; a capacitor
bridging two signal nets is treated as Miller compensation with the
classic pole split.  Deliberately coarse, but monotone in the directions
that matter and fully deterministic.

There is no minimum conductance to ground anywhere: a well-formed
netlist (graph expansion gives every bias net a diode-connected
reference) solves cleanly, and one with a floating subcircuit simply
fails to converge and comes back invalid.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .netlist import MosCard, Netlist, TwoTerminalCard

BOLTZMANN = 1.380649e-23

GROUND_NAMES = frozenset({"0", "gnd", "vss"})
SUPPLY_NAME = "vdd"
INPUT_P, INPUT_N, OUTPUT = "inp", "inn", "out"

METRIC_NAMES = (
    "pdiss", "gain_db", "gbw_hz", "pm_deg", "srp", "srn",
    "vol", "voh", "cmrr_db", "psrr_db", "noise_1k", "noise_1g", "cl",
)


@dataclass(frozen=True)
class PerfConfig:
    supply: float = 1.2
    vcm: float = 0.6
    vth: float = 0.4
    mu_n_cox: float = 200e-6
    mu_p_cox: float = 100e-6
    lambda_per_um: float = 0.1
    gamma: float = 2.0 / 3.0
    kf: float = 1e-22          # V^2 m^2 flicker coefficient
    cox_area: float = 5e-3     # F/m^2 gate capacitance
    cov: float = 2e-10         # F/m overlap capacitance per width
    temp: float = 300.0
    max_iter: int = 200
    tol: float = 1e-12
    step_clamp: float = 0.3


@dataclass(frozen=True)
class DeviceOp:
    name: str
    model: str
    id: float     # conducted current magnitude
    vgs: float    # polarity-normalized (Vsg for pmos)
    vds: float
    vov: float
    gm: float
    gds: float
    ro: float
    region: str

    @property
    def saturated(self) -> bool:
        return self.region == "saturation"


@dataclass
class OperatingPoint:
    converged: bool
    iterations: int
    volts: dict[str, float]
    devices: list[DeviceOp]
    supply_current: float

    def device(self, name: str) -> DeviceOp:
        return next(d for d in self.devices if d.name == name)


@dataclass(frozen=True)
class MetricsVector:
    pdiss: float
    gain_db: float
    gbw_hz: float
    pm_deg: float
    srp: float
    srn: float
    vol: float
    voh: float
    cmrr_db: float
    psrr_db: float
    noise_1k: float
    noise_1g: float
    cl: float

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in METRIC_NAMES], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "MetricsVector":
        return cls(**{n: float(v) for n, v in zip(METRIC_NAMES, arr)})


ZERO_METRICS = MetricsVector(*([0.0] * 13))


@dataclass
class EvalResult:
    metrics: MetricsVector
    op: OperatingPoint
    valid: bool
    reasons: list[str] = field(default_factory=list)


def _canon(net: str) -> str:
    low = net.lower()
    return "0" if low in GROUND_NAMES else low


def _canon_netlist(nl: Netlist) -> Netlist:
    cards = []
    for c in nl.cards:
        if isinstance(c, MosCard):
            cards.append(MosCard(c.name, _canon(c.drain), _canon(c.gate),
                                 _canon(c.source), _canon(c.bulk),
                                 c.model, c.w, c.l, c.m))
        else:
            cards.append(TwoTerminalCard(c.name, _canon(c.pos),
                                         _canon(c.neg), c.value))
    return Netlist(tuple(cards), nl.comments)


def _mos_params(card: MosCard, cfg: PerfConfig):
    mu = cfg.mu_n_cox if card.model == "nmos" else cfg.mu_p_cox
    k = 0.5 * mu * (card.w / card.l) * card.m
    lam = cfg.lambda_per_um * 1e-6 / card.l
    return k, lam


def _square_law(k: float, lam: float, vth: float, vgs: float, vds: float):
    """(id, gm, gds, region) with vds >= 0; NMOS sign convention."""
    vov = vgs - vth
    if vov <= 0.0:
        return 0.0, 0.0, 0.0, "cutoff"
    clm = 1.0 + lam * vds
    if vds >= vov:
        i = k * vov * vov * clm
        return i, 2.0 * k * vov * clm, k * vov * vov * lam, "saturation"
    i = k * (2.0 * vov * vds - vds * vds) * clm
    gm = 2.0 * k * vds * clm
    gds = (2.0 * k * (vov - vds) * clm
           + k * (2.0 * vov * vds - vds * vds) * lam)
    return i, gm, gds, "triode"


@dataclass(frozen=True)
class _MosEval:
    i_drain: float                 # current into the drain terminal
    parts: tuple[float, float, float]  # d(i_drain)/d(vd, vg, vs)
    vgs: float
    vds: float
    i_mag: float
    gm: float
    gds: float
    vov: float
    region: str


def _eval_mos(card: MosCard, volts, cfg: PerfConfig) -> _MosEval:
    k, lam = _mos_params(card, cfg)
    vd, vg, vs = volts[card.drain], volts[card.gate], volts[card.source]
    if card.model == "nmos":
        vgs, vds = vg - vs, vd - vs
    else:
        vgs, vds = vs - vg, vs - vd
    if vds >= 0.0:
        i, gm, gds, region = _square_law(k, lam, cfg.vth, vgs, vds)
        i_drain = i if card.model == "nmos" else -i
        parts = (gds, gm, -(gm + gds))
        vov = max(vgs - cfg.vth, 0.0)
    else:
        # conduction reverses: the source terminal acts as the drain
        i, gm, gds, region = _square_law(k, lam, cfg.vth, vgs - vds, -vds)
        i_drain = -i if card.model == "nmos" else i
        parts = (gm + gds, -gm, -gds)
        vov = max(vgs - vds - cfg.vth, 0.0)
    return _MosEval(i_drain, parts, vgs, vds, i, gm, gds, vov, region)


def _fixed_volts(nl: Netlist, cfg: PerfConfig) -> dict[str, float]:
    fixed = {"0": 0.0, SUPPLY_NAME: cfg.supply}
    nets = set(nl.nets)
    if INPUT_P in nets:
        fixed[INPUT_P] = cfg.vcm
    if INPUT_N in nets:
        fixed[INPUT_N] = cfg.vcm
    return fixed


def _kcl(nl: Netlist, volts: dict[str, float], cfg: PerfConfig):
    """KCL residual per net and Jacobian triplets (net currents leaving)."""
    f: dict[str, float] = {}
    trip: list[tuple[str, str, float]] = []

    def add_f(net, value):
        f[net] = f.get(net, 0.0) + value

    for card in nl.cards:
        if isinstance(card, MosCard):
            ev = _eval_mos(card, volts, cfg)
            d, g, s = card.drain, card.gate, card.source
            add_f(d, ev.i_drain)
            add_f(s, -ev.i_drain)
            for net, grad in zip((d, g, s), ev.parts):
                trip.append((d, net, grad))
                trip.append((s, net, -grad))
        elif card.kind == "R":
            p, n = card.pos, card.neg
            cond = 1.0 / card.value
            add_f(p, (volts[p] - volts[n]) * cond)
            add_f(n, (volts[n] - volts[p]) * cond)
            trip.extend([(p, p, cond), (p, n, -cond),
                         (n, n, cond), (n, p, -cond)])
        elif card.kind == "I":
            add_f(card.pos, card.value)
            add_f(card.neg, -card.value)
        # capacitors are open at DC
    return f, trip


def solve_dc(nl: Netlist, cfg: PerfConfig | None = None) -> OperatingPoint:
    """Damped Newton solve of the DC operating point."""
    cfg = cfg or PerfConfig()
    nl = _canon_netlist(nl)
    return _solve_dc_canon(nl, cfg)


def _solve_dc_canon(nl: Netlist, cfg: PerfConfig) -> OperatingPoint:
    fixed = _fixed_volts(nl, cfg)
    nets = sorted(set(nl.nets) | set(fixed))
    unknown = [n for n in nets if n not in fixed]
    idx = {n: i for i, n in enumerate(unknown)}

    best = None
    for start in (0.5, 0.25, 0.75):
        volts = dict(fixed)
        for n in unknown:
            volts[n] = start * cfg.supply
        iters = 0
        converged = not unknown
        try:
            for iters in range(1, cfg.max_iter + 1):
                if converged:
                    break
                f, trip = _kcl(nl, volts, cfg)
                fv = np.array([f.get(n, 0.0) for n in unknown])
                jac = np.zeros((len(unknown), len(unknown)))
                for row, col, val in trip:
                    if row in idx and col in idx:
                        jac[idx[row], idx[col]] += val
                # relative ridge: keeps the step well defined through
                # cutoff plateaus without disturbing the converged point
                ridge = 1e-12 * max(np.abs(jac).max(), 1e-30)
                jac += np.eye(len(unknown)) * ridge
                delta = np.linalg.solve(jac, -fv)
                if not np.all(np.isfinite(delta)):
                    break
                delta = np.clip(delta, -cfg.step_clamp, cfg.step_clamp)
                for n in unknown:
                    volts[n] += delta[idx[n]]
                if np.max(np.abs(delta)) < cfg.tol:
                    converged = True
        except np.linalg.LinAlgError:
            converged = False
        op = _finish_op(nl, volts, cfg, converged, iters)
        if op.converged:
            return op
        if best is None:
            best = op
    return best


def _finish_op(nl, volts, cfg, converged, iters) -> OperatingPoint:
    devices = []
    for card in nl.mos_cards():
        ev = _eval_mos(card, volts, cfg)
        k, lam = _mos_params(card, cfg)
        ro = 1.0 / (lam * ev.i_mag) if ev.i_mag else math.inf
        devices.append(DeviceOp(card.name, card.model, ev.i_mag,
                                ev.vgs, ev.vds, ev.vov,
                                ev.gm, ev.gds, ro, ev.region))

    f, _ = _kcl(nl, volts, cfg)
    supply_current = f.get(SUPPLY_NAME, 0.0)
    return OperatingPoint(converged, iters, dict(volts), devices,
                          supply_current)


# ---------------------------------------------------------------------------
# small-signal analysis

def _conductance(nl: Netlist, volts, cfg) -> tuple[list[str], np.ndarray]:
    nets = sorted(set(volts))
    pos = {n: i for i, n in enumerate(nets)}
    g = np.zeros((len(nets), len(nets)))
    for card in nl.cards:
        if isinstance(card, MosCard):
            ev = _eval_mos(card, volts, cfg)
            d, gt, s = card.drain, card.gate, card.source
            for net, grad in zip((d, gt, s), ev.parts):
                g[pos[d], pos[net]] += grad
                g[pos[s], pos[net]] -= grad
        elif card.kind == "R":
            p, n = pos[card.pos], pos[card.neg]
            cond = 1.0 / card.value
            g[p, p] += cond
            g[n, n] += cond
            g[p, n] -= cond
            g[n, p] -= cond
    return nets, g


def _net_caps(nl: Netlist, cl: float, cfg) -> dict[str, float]:
    caps: dict[str, float] = {}

    def add(net, c):
        caps[net] = caps.get(net, 0.0) + c

    for card in nl.cards:
        if isinstance(card, MosCard):
            cgs = (2.0 / 3.0) * cfg.cox_area * card.w * card.l * card.m
            cgd = cfg.cov * card.w * card.m
            add(card.gate, cgs + cgd)
            add(card.source, cgs)
            add(card.drain, cgd)
        elif card.kind == "C":
            add(card.pos, card.value)
            add(card.neg, card.value)
    add(OUTPUT, cl)
    return caps


def _solve_ac(nets, g, fixed_vac: dict[str, float]) -> dict[str, float]:
    pos = {n: i for i, n in enumerate(nets)}
    unknown = [n for n in nets if n not in fixed_vac]
    rows = [pos[n] for n in unknown]
    a = g[np.ix_(rows, rows)]
    b = np.zeros(len(unknown))
    for src, vac in fixed_vac.items():
        if vac and src in pos:
            b -= g[rows, pos[src]] * vac
    x = np.linalg.solve(a, b)
    out = dict(fixed_vac)
    out.update({n: float(v) for n, v in zip(unknown, x)})
    return out


def _swing_limits(nl, op, cfg) -> tuple[float, float]:
    """Dijkstra over conducting channels: min total Vov to each rail."""
    edges: dict[str, list[tuple[str, float]]] = {}

    def link(a, b, w):
        edges.setdefault(a, []).append((b, w))
        edges.setdefault(b, []).append((a, w))

    for card in nl.mos_cards():
        dev = op.device(card.name)
        if dev.region == "cutoff":
            continue
        link(card.drain, card.source, dev.vov)
    for card in nl.of_kind("R"):
        link(card.pos, card.neg, 0.0)

    def dist(target: str) -> float:
        seen: set[str] = set()
        heap = [(0.0, OUTPUT)]
        while heap:
            d, net = heapq.heappop(heap)
            if net in seen:
                continue
            seen.add(net)
            if net == target:
                return d
            for nxt, w in edges.get(net, ()):
                if nxt not in seen:
                    heapq.heappush(heap, (d + w, nxt))
        return math.inf

    d_vss, d_vdd = dist("0"), dist(SUPPLY_NAME)
    vol = min(d_vss, cfg.supply) if math.isfinite(d_vss) else cfg.supply
    voh = max(cfg.supply - d_vdd, 0.0) if math.isfinite(d_vdd) else 0.0
    return vol, voh


def _find_compensation(nl: Netlist) -> TwoTerminalCard | None:
    for card in nl.of_kind("C"):
        if (card.pos not in ("0", SUPPLY_NAME)
                and card.neg not in ("0", SUPPLY_NAME)
                and card.pos != card.neg):
            return card
    return None


def evaluate(nl: Netlist, cl: float, cfg: PerfConfig | None = None) -> EvalResult:
    """Thirteen-metric evaluation of an amplifier netlist loaded by cl."""
    cfg = cfg or PerfConfig()
    nl = _canon_netlist(nl)
    reasons: list[str] = []

    nets = set(nl.nets)
    if not {OUTPUT, INPUT_P, INPUT_N} <= nets:
        op = OperatingPoint(False, 0, {}, [], 0.0)
        return EvalResult(ZERO_METRICS, op, False, ["missing-io-nets"])

    op = _solve_dc_canon(nl, cfg)
    if not op.converged:
        return EvalResult(ZERO_METRICS, op, False, ["no-dc-convergence"])

    pair = [c for c in nl.mos_cards() if c.gate in (INPUT_P, INPUT_N)]
    if not pair:
        return EvalResult(ZERO_METRICS, op, False, ["no-input-devices"])
    gm1 = sum(op.device(c.name).gm for c in pair if c.gate == INPUT_P)
    if gm1 <= 0.0:
        return EvalResult(ZERO_METRICS, op, False, ["input-devices-off"])

    ac_nets, g = _conductance(nl, op.volts, cfg)

    def grounded(extra: dict[str, float]) -> dict[str, float]:
        base = {"0": 0.0, SUPPLY_NAME: 0.0, INPUT_P: 0.0, INPUT_N: 0.0}
        base.update(extra)
        return base

    try:
        vdm = _solve_ac(ac_nets, g, grounded({INPUT_P: 0.5, INPUT_N: -0.5}))
        vcmm = _solve_ac(ac_nets, g, grounded({INPUT_P: 1.0, INPUT_N: 1.0}))
        vps = _solve_ac(ac_nets, g, grounded({SUPPLY_NAME: 1.0}))
    except np.linalg.LinAlgError:
        return EvalResult(ZERO_METRICS, op, False, ["singular-small-signal"])

    av = abs(vdm[OUTPUT])
    if av <= 1.0:
        reasons.append("gain-below-unity")
    gain_db = 20.0 * math.log10(av) if av > 0 else -400.0
    acm = max(abs(vcmm[OUTPUT]), 1e-15)
    cmrr_db = gain_db - 20.0 * math.log10(acm)
    aps = max(abs(vps[OUTPUT]), 1e-15)
    psrr_db = gain_db - 20.0 * math.log10(aps)

    comp = _find_compensation(nl)
    c_load = cl + sum(
        c.value for c in nl.of_kind("C")
        if {c.pos, c.neg} & {OUTPUT} and {c.pos, c.neg} & {"0", SUPPLY_NAME})
    c_eff = comp.value if comp is not None else c_load
    gbw = gm1 / (2.0 * math.pi * c_eff)

    caps = _net_caps(nl, cl, cfg)
    pos = {n: i for i, n in enumerate(ac_nets)}
    fixed = grounded({})
    pole_skip = set()
    split_pole = None
    if comp is not None:
        # Miller split: the bridged nets collapse to one dominant pole and
        # one output pole at gm2 / (2 pi C_out)
        gm2 = 0.0
        out_side = None
        for card in nl.mos_cards():
            dev = op.device(card.name)
            if {card.gate, card.drain} == {comp.pos, comp.neg}:
                gm2 += dev.gm
                out_side = card.drain
        if gm2 > 0.0 and out_side is not None:
            pole_skip = {comp.pos, comp.neg}
            split_pole = gm2 / (2.0 * math.pi * caps.get(out_side, cl))
    poles = {}
    for net, c in caps.items():
        if net in fixed or net not in pos or net in pole_skip or c <= 0.0:
            continue
        gkk = g[pos[net], pos[net]]
        if gkk > 0.0:
            poles[net] = gkk / (2.0 * math.pi * c)
    if split_pole is not None:
        poles["miller-output"] = split_pole
        dominant = None  # the bridged net is the dominant pole by design
    else:
        dominant = min(poles, key=poles.get) if poles else None
    pm = 90.0 - sum(math.degrees(math.atan(gbw / p))
                    for net, p in poles.items() if net != dominant)
    if pm <= 0.0:
        reasons.append("non-positive-pm")

    itail = sum(op.device(c.name).id for c in pair)
    slew = itail / c_eff
    vol, voh = _swing_limits(nl, op, cfg)

    kt = BOLTZMANN * cfg.temp
    sv_thermal = 0.0
    sv_flick = 0.0
    for card in nl.mos_cards():
        dev = op.device(card.name)
        if dev.gm <= 0.0:
            continue
        ratio = (dev.gm / gm1) ** 2
        sv_thermal += ratio * 4.0 * kt * cfg.gamma / dev.gm
        sv_flick += ratio * cfg.kf / (card.w * card.l * card.m)
    noise_1k = math.sqrt(sv_thermal + sv_flick / 1e3)
    noise_1g = math.sqrt(sv_thermal + sv_flick / 1e9)

    pdiss = cfg.supply * op.supply_current

    not_sat = [d.name for d in op.devices if not d.saturated]
    if not_sat:
        reasons.append("unsaturated:" + ",".join(not_sat))

    metrics = MetricsVector(
        pdiss=pdiss, gain_db=gain_db, gbw_hz=gbw, pm_deg=pm,
        srp=slew, srn=slew, vol=vol, voh=voh,
        cmrr_db=cmrr_db, psrr_db=psrr_db,
        noise_1k=noise_1k, noise_1g=noise_1g, cl=cl)
    return EvalResult(metrics, op, not reasons, reasons)


def op_table(op: OperatingPoint) -> list[dict[str, object]]:
    """Rows for an operating-point dump (CSV-friendly)."""
    return [
        {"device": d.name, "model": d.model, "region": d.region,
         "id": d.id, "vov": d.vov, "gm": d.gm, "ro": d.ro}
        for d in op.devices
    ]
