"""Flat SPICE-subset netlists: M / R / C / I cards, comments, .end.

The subset is exactly what the device library emits: 4-terminal MOS cards
with a model name and W= L= M= parameters, plus two-terminal resistor,
capacitor and current-source cards with a single value.  Values accept the
usual engineering suffixes (f p n u m k meg, case-insensitive).
"""
from __future__ import annotations

import re
from dataclasses import dataclass

MOS_MODELS = ("nmos", "pmos")

# suffix -> decimal exponent; "meg" must be matched before "m"
_SUFFIXES = (("meg", 6), ("f", -15), ("p", -12), ("n", -9),
             ("u", -6), ("m", -3), ("k", 3))

_VALUE_RE = re.compile(
    r"^([+-]?(?:\d+\.?\d*|\.\d+))(?:[eE]([+-]?\d+))?([a-zA-Z]*)$")

_REPR_RE = re.compile(r"^(-?)(\d+)(?:\.(\d+))?(?:e([+-]?\d+))?$")


class ParseError(Exception):
    """Netlist syntax error carrying the 1-based source line number."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno
        self.message = message


def parse_value(text: str) -> float:
    """Parse a number with an optional engineering suffix, e.g. '200n'.

    The suffix is folded into the decimal exponent before the single
    string-to-float conversion, so '200n' and '2e-7' give the same float.
    """
    m = _VALUE_RE.match(text)
    if not m:
        raise ValueError(f"malformed value {text!r}")
    coef, mexp, suffix = m.group(1), int(m.group(2) or 0), m.group(3).lower()
    if suffix:
        for tag, exp in _SUFFIXES:
            if suffix == tag:
                mexp += exp
                break
        else:
            raise ValueError(f"unknown suffix {suffix!r} in {text!r}")
    return float(f"{coef}e{mexp}")


def format_value(value: float) -> str:
    """Engineering-suffixed text that parses back to exactly this float.

    Works on the repr digit string, shifting the decimal point textually;
    parse_value re-reads the same decimal number, so the binary value is
    preserved bit for bit.
    """
    if value == 0:
        return "0"
    m = _REPR_RE.match(repr(float(value)))
    sign, ip, fp, e = m.group(1), m.group(2), m.group(3) or "", m.group(4)
    digits = int(ip + fp)
    exp = int(e or 0) - len(fp)
    while digits % 10 == 0:
        digits //= 10
        exp += 1
    ds = str(digits)
    msd = len(ds) - 1 + exp
    group = max(-15, min(6, (msd // 3) * 3))
    shift = exp - group
    if shift >= 0:
        mant = ds + "0" * shift
    else:
        point = len(ds) + shift
        if point > 0:
            mant = ds[:point] + "." + ds[point:]
        else:
            mant = "0." + "0" * (-point) + ds
    tag = {exp: t for t, exp in _SUFFIXES}.get(group, "")
    return sign + mant + tag


@dataclass(frozen=True)
class MosCard:
    """M<name> drain gate source bulk model W= L= [M=]."""

    name: str
    drain: str
    gate: str
    source: str
    bulk: str
    model: str
    w: float
    l: float
    m: int = 1

    def __post_init__(self):
        if self.model not in MOS_MODELS:
            raise ValueError(f"{self.name}: unknown model {self.model!r}")
        if self.w <= 0 or self.l <= 0:
            raise ValueError(f"{self.name}: W and L must be positive")
        if self.m < 1:
            raise ValueError(f"{self.name}: M must be a positive integer")

    @property
    def terminals(self) -> tuple[str, ...]:
        return (self.drain, self.gate, self.source, self.bulk)

    def line(self) -> str:
        fields = [self.name, *self.terminals, self.model,
                  f"W={format_value(self.w)}", f"L={format_value(self.l)}"]
        if self.m != 1:
            fields.append(f"M={self.m}")
        return " ".join(fields)


@dataclass(frozen=True)
class TwoTerminalCard:
    """R/C/I card: <name> pos neg value."""

    name: str
    pos: str
    neg: str
    value: float

    def __post_init__(self):
        if self.kind not in ("R", "C", "I"):
            raise ValueError(f"{self.name}: unknown two-terminal kind")
        if self.kind in ("R", "C") and self.value <= 0:
            raise ValueError(f"{self.name}: value must be positive")

    @property
    def kind(self) -> str:
        return self.name[0].upper()

    @property
    def terminals(self) -> tuple[str, ...]:
        return (self.pos, self.neg)

    def line(self) -> str:
        return f"{self.name} {self.pos} {self.neg} {format_value(self.value)}"


Card = MosCard | TwoTerminalCard


@dataclass(frozen=True)
class Netlist:
    cards: tuple[Card, ...]
    comments: tuple[str, ...] = ()

    def __post_init__(self):
        names = [c.name for c in self.cards]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise ValueError(f"duplicate device names: {sorted(dupes)}")

    @property
    def nets(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for card in self.cards:
            for t in card.terminals:
                seen.setdefault(t)
        return tuple(seen)

    def mos_cards(self) -> list[MosCard]:
        return [c for c in self.cards if isinstance(c, MosCard)]

    def of_kind(self, kind: str) -> list[TwoTerminalCard]:
        return [c for c in self.cards
                if isinstance(c, TwoTerminalCard) and c.kind == kind]


def _parse_mos(lineno: int, tokens: list[str]) -> MosCard:
    if len(tokens) < 8:
        raise ParseError(lineno, f"M card needs 4 nets, a model and W=/L=, "
                                 f"got {len(tokens)} fields")
    name, d, g, s, b, model = tokens[:6]
    params: dict[str, float] = {}
    for tok in tokens[6:]:
        if "=" not in tok:
            raise ParseError(lineno, f"expected key=value, got {tok!r}")
        key, _, raw = tok.partition("=")
        key = key.upper()
        if key not in ("W", "L", "M"):
            raise ParseError(lineno, f"unknown MOS parameter {key!r}")
        if key in params:
            raise ParseError(lineno, f"duplicate parameter {key!r}")
        try:
            params[key] = parse_value(raw)
        except ValueError as exc:
            raise ParseError(lineno, str(exc)) from exc
    if "W" not in params or "L" not in params:
        raise ParseError(lineno, "M card missing W= or L=")
    mult = params.get("M", 1.0)
    if mult != int(mult) or mult < 1:
        raise ParseError(lineno, f"M= must be a positive integer, got {mult}")
    try:
        return MosCard(name, d, g, s, b, model.lower(),
                       params["W"], params["L"], int(mult))
    except ValueError as exc:
        raise ParseError(lineno, str(exc)) from exc


def _parse_two_terminal(lineno: int, tokens: list[str]) -> TwoTerminalCard:
    if len(tokens) != 4:
        raise ParseError(lineno, f"{tokens[0][0].upper()} card needs 2 nets "
                                 f"and a value, got {len(tokens)} fields")
    name, pos, neg, raw = tokens
    try:
        return TwoTerminalCard(name, pos, neg, parse_value(raw))
    except ValueError as exc:
        raise ParseError(lineno, str(exc)) from exc


def parse_netlist(text: str) -> Netlist:
    """Parse netlist text; raises ParseError with the offending line."""
    cards: list[Card] = []
    comments: list[str] = []
    ended = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("*"):
            comments.append(line.lstrip("*").strip())
            continue
        if ended:
            raise ParseError(lineno, "content after .end")
        if line.lower() == ".end":
            ended = True
            continue
        if line.startswith("."):
            raise ParseError(lineno, f"unsupported directive {line.split()[0]!r}")
        tokens = line.split()
        lead = tokens[0][0].upper()
        if lead == "M":
            cards.append(_parse_mos(lineno, tokens))
        elif lead in ("R", "C", "I"):
            cards.append(_parse_two_terminal(lineno, tokens))
        else:
            raise ParseError(lineno, f"unknown card type {tokens[0]!r}")
    try:
        return Netlist(tuple(cards), tuple(comments))
    except ValueError as exc:
        raise ParseError(0, str(exc)) from exc


def emit_netlist(nl: Netlist) -> str:
    """Canonical text: comments, one line per card, then .end."""
    lines = [f"* {c}" if c else "*" for c in nl.comments]
    lines.extend(card.line() for card in nl.cards)
    lines.append(".end")
    return "\n".join(lines) + "\n"
