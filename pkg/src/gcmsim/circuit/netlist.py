"""Netlist data model, stimulus waveforms and the line-oriented netlist grammar.

Grammar (element letter is case-insensitive, numbers take SI suffixes
f/p/n/u/m/k/meg)::

    R<name> n1 n2 <ohms>
    C<name> n1 n2 <farads>
    V<name> n+ n- dc <v> | pwl (t v)+ | ramp <t0> <tr> <vf>
    I<name> n+ n- dexp <i0> <tr> <td> | dc <a>
    M<name> d g s b <cardfile|gcm|gcmn|gcmp> [lg=<nm>] [wfin=<nm>] nfin=<k>
    .tran <tstop>
    .op
    .end

``*`` starts a comment line, ``;`` a trailing comment.  Node ``0`` (alias
``gnd``) is ground.  ``lg``/``wfin`` are nm; a bare number or an ``n``
suffix both mean nanometres.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from ..units import parse_si

GROUND = "0"


class NetlistError(ValueError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}" + (f", column {column}" if column is not None else "") + ": "
        super().__init__(where + message)


@dataclass(frozen=True)
class Stimulus:
    kind: str
    value: float = 0.0
    points: tuple[tuple[float, float], ...] = ()
    i0: float = 0.0
    tau_rise: float = 0.0
    tau_decay: float = 0.0
    t_start: float = 0.0
    t_rise: float = 0.0
    v_final: float = 0.0

    def __post_init__(self):
        if self.kind not in ("dc", "pwl", "dexp", "ramp"):
            raise ValueError(f"unknown stimulus kind {self.kind!r}")
        if self.kind == "pwl":
            if not self.points:
                raise ValueError("pwl needs at least one (t, v) point")
            ts = [p[0] for p in self.points]
            if any(b <= a for a, b in zip(ts, ts[1:])):
                raise ValueError("pwl times must be strictly increasing")
        if self.kind == "dexp" and not (self.tau_decay > self.tau_rise > 0):
            raise ValueError("dexp needs tau_decay > tau_rise > 0")
        if self.kind == "ramp" and (self.t_rise <= 0 or self.t_start < 0):
            raise ValueError("ramp needs t_rise > 0 and t_start >= 0")

    @classmethod
    def dc(cls, value: float) -> "Stimulus":
        return cls("dc", value=value)

    @classmethod
    def pwl(cls, points: Sequence[tuple[float, float]]) -> "Stimulus":
        return cls("pwl", points=tuple((float(t), float(v)) for t, v in points))

    @classmethod
    def dexp(cls, i0: float, tau_rise: float, tau_decay: float) -> "Stimulus":
        return cls("dexp", i0=i0, tau_rise=tau_rise, tau_decay=tau_decay)

    @classmethod
    def ramp(cls, t_start: float, t_rise: float, v_final: float) -> "Stimulus":
        return cls("ramp", t_start=t_start, t_rise=t_rise, v_final=v_final)

    def breakpoints(self) -> tuple[float, ...]:
        if self.kind == "pwl":
            return tuple(t for t, _ in self.points)
        if self.kind == "ramp":
            return (self.t_start, self.t_start + self.t_rise)
        return ()


def eval_stimulus(s: Stimulus, t: float) -> float:
    if s.kind == "dc":
        return s.value
    if s.kind == "dexp":
        if t <= 0:
            return 0.0
        return s.i0 * (math.exp(-t / s.tau_decay) - math.exp(-t / s.tau_rise))
    if s.kind == "ramp":
        if t <= s.t_start:
            return 0.0
        if t >= s.t_start + s.t_rise:
            return s.v_final
        return s.v_final * (t - s.t_start) / s.t_rise
    ts = [p[0] for p in s.points]
    vs = [p[1] for p in s.points]
    return float(np.interp(t, ts, vs))


def dexp_peak(i0: float, tau_rise: float, tau_decay: float) -> tuple[float, float]:
    """(time, value) of the double-exponential maximum."""
    tp = tau_rise * tau_decay / (tau_decay - tau_rise) * math.log(tau_decay / tau_rise)
    return tp, i0 * (math.exp(-tp / tau_decay) - math.exp(-tp / tau_rise))


@dataclass(frozen=True)
class Resistor:
    name: str
    n1: str
    n2: str
    value: float


@dataclass(frozen=True)
class Capacitor:
    name: str
    n1: str
    n2: str
    value: float


@dataclass(frozen=True)
class VoltageSource:
    name: str
    npos: str
    nneg: str
    stim: Stimulus


@dataclass(frozen=True)
class CurrentSource:
    name: str
    npos: str
    nneg: str
    stim: Stimulus


@dataclass(frozen=True)
class Mosfet:
    """Transistor bound to a card, a general model, or an unresolved reference.

    ``model`` is a ``ModelCard``/``GeneralModel`` once bound; the parser
    leaves it as the reference string (card file path or ``gcm*``).
    """
    name: str
    d: str
    g: str
    s: str
    b: str
    model: object
    nfin: float = 1.0
    lg: float | None = None
    wfin: float | None = None


Element = Union[Resistor, Capacitor, VoltageSource, CurrentSource, Mosfet]


@dataclass
class Netlist:
    elements: list = field(default_factory=list)
    analyses: list = field(default_factory=list)
    title: str = ""

    def add(self, el) -> "Netlist":
        if any(e.name.lower() == el.name.lower() for e in self.elements):
            raise NetlistError(f"duplicate element name {el.name!r}")
        self.elements.append(el)
        return self

    @property
    def nodes(self) -> list[str]:
        """Non-ground node names in first-appearance order."""
        seen: dict[str, None] = {}
        for el in self.elements:
            for n in terminals(el):
                if n != GROUND:
                    seen.setdefault(n, None)
        return list(seen)

    def by_name(self, name: str):
        for el in self.elements:
            if el.name.lower() == name.lower():
                return el
        raise KeyError(name)

    @property
    def voltage_sources(self) -> list[VoltageSource]:
        return [e for e in self.elements if isinstance(e, VoltageSource)]

    @property
    def mosfets(self) -> list[Mosfet]:
        return [e for e in self.elements if isinstance(e, Mosfet)]

    def validate(self) -> None:
        if not self.elements:
            raise NetlistError("netlist has no elements")
        names = [e.name.lower() for e in self.elements]
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise NetlistError(f"duplicate element names {sorted(dup)}")
        if len(self.elements) == 1:
            dangling = [n for n in terminals(self.elements[0]) if n != GROUND]
            if dangling:
                raise NetlistError(f"dangling node(s) {dangling} in a one-element netlist")
        if not any(GROUND in terminals(e) for e in self.elements):
            raise NetlistError("no element connects to ground node 0")


def terminals(el) -> tuple[str, ...]:
    if isinstance(el, (Resistor, Capacitor)):
        return (el.n1, el.n2)
    if isinstance(el, (VoltageSource, CurrentSource)):
        return (el.npos, el.nneg)
    return (el.d, el.g, el.s, el.b)


# ---------------------------------------------------------------------------
# parser

_TOKEN_RE = re.compile(r"\(|\)|[^\s()]+")


def _tokens(line: str) -> list[tuple[str, int]]:
    return [(m.group(0), m.start() + 1) for m in _TOKEN_RE.finditer(line)]


def _node(tok: str) -> str:
    t = tok.lower()
    return GROUND if t in ("0", "gnd") else t


def _num(tok: tuple[str, int], lineno: int) -> float:
    try:
        return parse_si(tok[0])
    except ValueError:
        raise NetlistError(f"malformed number {tok[0]!r}", lineno, tok[1]) from None


def _nm(tok: tuple[str, int], lineno: int) -> float:
    """Length in nm: '17.8', '17.8n' and '17.8nm' all mean 17.8 nm."""
    text = tok[0].lower()
    for suffix in ("nm", "n"):
        if text.endswith(suffix):
            text = text[: -len(suffix)]
            break
    try:
        v = float(text)
    except ValueError:
        raise NetlistError(f"malformed length {tok[0]!r}", lineno, tok[1]) from None
    if not (math.isfinite(v) and v > 0):
        raise NetlistError(f"length {tok[0]!r} must be positive", lineno, tok[1])
    return v


def _expect_end(toks, k, lineno):
    if k < len(toks):
        raise NetlistError(f"unexpected token {toks[k][0]!r}", lineno, toks[k][1])


def _source_stim(toks, k, lineno, allowed) -> Stimulus:
    if k >= len(toks):
        raise NetlistError("missing source specification", lineno)
    kind = toks[k][0].lower()
    if kind not in allowed:
        raise NetlistError(f"unsupported source kind {toks[k][0]!r}", lineno, toks[k][1])
    args = [t for t in toks[k + 1:] if t[0] not in ("(", ")")]
    try:
        if kind == "dc":
            if len(args) != 1:
                raise NetlistError("dc takes exactly one value", lineno,
                                   args[1][1] if len(args) > 1 else None)
            return Stimulus.dc(_num(args[0], lineno))
        if kind == "pwl":
            if len(args) < 2 or len(args) % 2:
                raise NetlistError("pwl needs (t v) pairs", lineno, toks[k][1])
            vals = [_num(a, lineno) for a in args]
            return Stimulus.pwl(list(zip(vals[::2], vals[1::2])))
        if kind == "ramp":
            if len(args) != 3:
                raise NetlistError("ramp takes <t0> <tr> <vf>", lineno,
                                   args[3][1] if len(args) > 3 else None)
            return Stimulus.ramp(*(_num(a, lineno) for a in args))
        if len(args) != 3:
            raise NetlistError("dexp takes <i0> <tr> <td>", lineno,
                               args[3][1] if len(args) > 3 else None)
        return Stimulus.dexp(*(_num(a, lineno) for a in args))
    except ValueError as exc:
        if isinstance(exc, NetlistError):
            raise
        raise NetlistError(str(exc), lineno) from None


def parse_netlist(text: str) -> Netlist:
    """Parse netlist text; errors carry 1-based line and column numbers."""
    net = Netlist()
    seen: dict[str, int] = {}
    first = True
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(";", 1)[0].rstrip()
        stripped = line.strip()
        if not stripped or stripped.startswith("*"):
            if first and stripped.startswith("*"):
                net.title = stripped[1:].strip()
            first = False if stripped else first
            continue
        first = False
        toks = _tokens(line)
        head, col = toks[0]
        key = head.lower()
        if key.startswith("."):
            if key == ".end":
                break
            if key == ".op":
                _expect_end(toks, 1, lineno)
                net.analyses.append(("op",))
            elif key == ".tran":
                if len(toks) < 2:
                    raise NetlistError(".tran needs <tstop>", lineno, col)
                tstop = _num(toks[1], lineno)
                if tstop <= 0:
                    raise NetlistError("tstop must be positive", lineno, toks[1][1])
                _expect_end(toks, 2, lineno)
                net.analyses.append(("tran", tstop))
            else:
                raise NetlistError(f"unknown directive {head!r}", lineno, col)
            continue
        letter = key[0]
        if key in seen:
            raise NetlistError(f"duplicate element name {head!r} (first on line {seen[key]})", lineno, col)
        seen[key] = lineno
        if letter in "rc":
            if len(toks) < 4:
                raise NetlistError(f"{head} needs two nodes and a value", lineno, col)
            value = _num(toks[3], lineno)
            _expect_end(toks, 4, lineno)
            cls = Resistor if letter == "r" else Capacitor
            if letter == "r" and value <= 0:
                raise NetlistError("resistance must be positive", lineno, toks[3][1])
            if letter == "c" and value < 0:
                raise NetlistError("capacitance must be non-negative", lineno, toks[3][1])
            el = cls(head, _node(toks[1][0]), _node(toks[2][0]), value)
        elif letter in "vi":
            if len(toks) < 4:
                raise NetlistError(f"{head} needs two nodes and a source spec", lineno, col)
            allowed = ("dc", "pwl", "ramp") if letter == "v" else ("dexp", "dc")
            stim = _source_stim(toks, 3, lineno, allowed)
            cls = VoltageSource if letter == "v" else CurrentSource
            el = cls(head, _node(toks[1][0]), _node(toks[2][0]), stim)
        elif letter == "m":
            if len(toks) < 6:
                raise NetlistError(f"{head} needs d g s b nodes and a model", lineno, col)
            model = toks[5][0]
            params: dict[str, float] = {}
            for tok, c in toks[6:]:
                if "=" not in tok:
                    raise NetlistError(f"unexpected token {tok!r}", lineno, c)
                k, v = tok.split("=", 1)
                k = k.lower()
                if k in params:
                    raise NetlistError(f"duplicate parameter {k!r}", lineno, c)
                if k in ("lg", "wfin"):
                    params[k] = _nm((v, c + len(k) + 1), lineno)
                elif k == "nfin":
                    params[k] = _num((v, c + len(k) + 1), lineno)
                    if params[k] < 1:
                        raise NetlistError("nfin must be >= 1", lineno, c)
                else:
                    raise NetlistError(f"unknown parameter {k!r}", lineno, c)
            if "nfin" not in params:
                raise NetlistError("transistor needs nfin=<k>", lineno, col)
            if model.lower().startswith("gcm") and ("lg" not in params or "wfin" not in params):
                raise NetlistError("general-model transistor needs lg= and wfin=", lineno, toks[5][1])
            el = Mosfet(head, *(_node(t[0]) for t in toks[1:5]), model=model,
                        nfin=params["nfin"], lg=params.get("lg"), wfin=params.get("wfin"))
        else:
            raise NetlistError(f"unknown element letter {head[0]!r}", lineno, col)
        net.elements.append(el)
    net.validate()
    return net


def _fmt(v: float) -> str:
    return repr(float(v))


def _stim_text(s: Stimulus) -> str:
    if s.kind == "dc":
        return f"dc {_fmt(s.value)}"
    if s.kind == "pwl":
        return "pwl " + " ".join(f"({_fmt(t)} {_fmt(v)})" for t, v in s.points)
    if s.kind == "ramp":
        return f"ramp {_fmt(s.t_start)} {_fmt(s.t_rise)} {_fmt(s.v_final)}"
    return f"dexp {_fmt(s.i0)} {_fmt(s.tau_rise)} {_fmt(s.tau_decay)}"


def netlist_to_text(net: Netlist) -> str:
    """Render a netlist in the grammar above (bound models print as ``gcmn``/``gcmp``)."""
    lines = [f"* {net.title}" if net.title else "* netlist"]
    for el in net.elements:
        if isinstance(el, (Resistor, Capacitor)):
            lines.append(f"{el.name} {el.n1} {el.n2} {_fmt(el.value)}")
        elif isinstance(el, (VoltageSource, CurrentSource)):
            lines.append(f"{el.name} {el.npos} {el.nneg} {_stim_text(el.stim)}")
        else:
            model = el.model
            if not isinstance(model, str):
                pol = getattr(model, "polarity", "N")
                model = "gcmp" if pol == "P" else "gcmn"
            extra = ""
            if el.lg is not None:
                extra += f" lg={_fmt(el.lg)}"
            if el.wfin is not None:
                extra += f" wfin={_fmt(el.wfin)}"
            lines.append(f"{el.name} {el.d} {el.g} {el.s} {el.b} {model}{extra} nfin={_fmt(el.nfin)}")
    for a in net.analyses:
        lines.append(".op" if a[0] == "op" else f".tran {_fmt(a[1])}")
    lines.append(".end")
    return "\n".join(lines) + "\n"
