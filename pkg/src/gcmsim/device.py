"""Surrogate FinFET compact model: terminal currents, charges and device metrics.

One ``ModelCard`` plays the role of one calibrated compact model at one
point of the (Lg, Wfin) plane.  The equation set is a single-piece,
EKV-flavoured charge-sheet form, smooth in every terminal voltage:

    phit   = k*T/q
    vt     = vt0 - dibl*|Vds|
    vp     = (Vgb - vt) / n_ss
    F(x)   = ln(1 + exp(x / (2*phit)))**2
    Ispec  = 2*n_ss*phit**2 * k_gain * Weff/lg * nfin
    Id     = Ispec*(F(vp - Vsb) - F(vp - Vdb)) * (1 + lambda_clm*|Vds|)/(1 + theta_sat*|Vds|)

Series resistance is resolved by a bracketed Newton solve for the
current through the internal drain/source nodes.  P-type devices evaluate the N-type equations on
negated voltages and negate the results.

Geometry follows the model-card convention: lg/wfin/hfin in nm, Weff = 2*hfin + wfin.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .units import format_kv, parse_si, read_kv_file

K_BOLTZMANN = 1.380649e-23
Q_ELECTRON = 1.602176634e-19
BIAS_LIMIT = 10.0
RS_MAX_ITERS = 60


def thermal_voltage(temp: float) -> float:
    return K_BOLTZMANN * temp / Q_ELECTRON


@dataclass(frozen=True)
class BiasPoint:
    vd: float
    vg: float
    vs: float = 0.0
    vb: float = 0.0

    def __post_init__(self):
        for name in ("vd", "vg", "vs", "vb"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"bias {name}={v} is not finite")
            if abs(v) > BIAS_LIMIT:
                raise ValueError(f"bias {name}={v} V exceeds the {BIAS_LIMIT} V guard")


@dataclass(frozen=True)
class ModelCard:
    polarity: str = "N"
    lg: float = 18.0
    wfin: float = 6.0
    hfin: float = 50.0
    nfin_unit: int = 1
    vt0: float = 0.30
    n_ss: float = 1.2
    dibl: float = 0.04
    k_gain: float = 1.0e-4
    theta_sat: float = 0.3
    lambda_clm: float = 0.05
    rs: float = 0.0
    rd: float = 0.0
    cov: float = 0.0
    cch_max: float = 0.0
    temp: float = 298.15

    def __post_init__(self):
        if self.polarity not in ("N", "P"):
            raise ValueError(f"polarity must be 'N' or 'P', got {self.polarity!r}")
        for name in CARD_FIELDS[1:]:
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"card field {name}={v} is not finite")
        checks = [
            ("lg", self.lg > 0),
            ("wfin", self.wfin > 0),
            ("hfin", self.hfin > 0),
            ("nfin_unit", self.nfin_unit >= 1),
            ("n_ss", self.n_ss >= 1),
            ("k_gain", self.k_gain > 0),
            ("cov", self.cov >= 0),
            ("cch_max", self.cch_max >= 0),
            ("theta_sat", self.theta_sat >= 0),
            ("dibl", self.dibl >= 0),
            ("lambda_clm", self.lambda_clm >= 0),
            ("rs", self.rs >= 0),
            ("rd", self.rd >= 0),
            ("temp", self.temp > 0),
        ]
        for name, ok in checks:
            if not ok:
                raise ValueError(f"invalid model card: {name}={getattr(self, name)}")

    @property
    def weff(self) -> float:
        return 2.0 * self.hfin + self.wfin

    def replace(self, **changes) -> "ModelCard":
        return dataclasses.replace(self, **changes)


CARD_FIELDS = tuple(f.name for f in dataclasses.fields(ModelCard))
_LENGTH_FIELDS = ("lg", "wfin", "hfin")


class TerminalCurrents(NamedTuple):
    id: float
    ig: float
    is_: float
    ib: float


class TerminalCharges(NamedTuple):
    qg: float
    qd: float
    qs: float
    qb: float


@dataclass
class CharReport:
    ioff: float
    ion: float
    ieff: float
    vt_lin: float
    vt_sat: float
    ss: float
    dibl_meas: float
    cgg: float
    cov_meas: float
    cch_meas: float
    ron: float
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def as_row(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in CHAR_COLUMNS}


CHAR_COLUMNS = (
    "ioff", "ion", "ieff", "vt_lin", "vt_sat", "ss", "dibl_meas",
    "cgg", "cov_meas", "cch_meas", "ron",
)


# ---------------------------------------------------------------------------
# vectorised core


class CardTable:
    """Column-wise parameter arrays for a batch of (card, weight) members.

    ``owner[k]`` is the index of the device that member ``k`` belongs to;
    outputs are weight-summed per owner in member order.
    """

    _COLS = ("vt0", "n_ss", "dibl", "k_gain", "theta_sat", "lambda_clm",
             "rs", "rd", "cov", "cch_max", "phit", "geom", "sign")

    def __init__(self, cards: Sequence[ModelCard], weights: Sequence[float],
                 owner: Sequence[int], nfin: Sequence[float]):
        self.n_members = len(cards)
        self.owner = np.asarray(owner, dtype=np.intp)
        self.n_devices = int(self.owner.max()) + 1 if self.n_members else 0
        self.weight = np.asarray(weights, dtype=float)
        nf = np.asarray(nfin, dtype=float)
        self.nfin = nf[self.owner] * np.array([c.nfin_unit for c in cards], dtype=float)
        for col in self._COLS[:10]:
            setattr(self, col, np.array([getattr(c, col) for c in cards], dtype=float))
        self.phit = np.array([thermal_voltage(c.temp) for c in cards])
        self.geom = np.array([c.weff / c.lg for c in cards])
        self.sign = np.array([1.0 if c.polarity == "N" else -1.0 for c in cards])
        self.has_rs = bool(np.any(self.rs > 0) or np.any(self.rd > 0))
        self.wmat = np.zeros((self.n_members, self.n_devices))
        self.wmat[np.arange(self.n_members), self.owner] = self.weight

    def reduce(self, values: np.ndarray) -> np.ndarray:
        """Weight-sum member values (last axis) onto devices."""
        return values @ self.wmat


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _intrinsic_id(vdb, vgb, vsb, t: CardTable, want_grad=False):
    """N-type drain current without series resistance (per member)."""
    vds = vdb - vsb
    a = np.abs(vds)
    vt = t.vt0 - t.dibl * a
    vp = (vgb - vt) / t.n_ss
    two_phit = 2.0 * t.phit
    us = (vp - vsb) / two_phit
    ud = (vp - vdb) / two_phit
    ls = _softplus(us)
    ld = _softplus(ud)
    ispec = 2.0 * t.n_ss * t.phit ** 2 * t.k_gain * t.geom * t.nfin
    core = ispec * (ls * ls - ld * ld)
    den = 1.0 + t.theta_sat * a
    mod = (1.0 + t.lambda_clm * a) / den
    i = core * mod
    if not want_grad:
        return i
    # dF/dx = L*sigmoid/phit
    fs = ls * _sigmoid(us) / t.phit
    fd = ld * _sigmoid(ud) / t.phit
    s = np.sign(vds)
    dvp = t.dibl * s / t.n_ss  # d vp / d vd ; d vp / d vs = -dvp
    dcore_dvd = ispec * ((fs - fd) * dvp + fd)
    dcore_dvs = ispec * (-(fs - fd) * dvp - fs)
    dmod = s * (t.lambda_clm - t.theta_sat) / (den * den)
    gd = dcore_dvd * mod + core * dmod
    gs = dcore_dvs * mod - core * dmod
    return i, gd, gs


def _n_currents(vdb, vgb, vsb, t: CardTable):
    if not t.has_rs:
        return _intrinsic_id(vdb, vgb, vsb, t)
    rd = t.rd / t.nfin
    rs = t.rs / t.nfin
    # h(I) = I - Id(vd - I*rd, vs + I*rs) is increasing with its root between
    # 0 and the resistance-free current; Newton steps that leave the bracket
    # fall back to bisection
    i0 = _intrinsic_id(vdb, vgb, vsb, t)
    lo, hi = np.minimum(i0, 0.0), np.maximum(i0, 0.0)
    i = i0 * 0.5
    for _ in range(RS_MAX_ITERS):
        f, gd, gs = _intrinsic_id(vdb - i * rd, vgb, vsb + i * rs, t, want_grad=True)
        h = i - f
        lo = np.where(h < 0.0, i, lo)
        hi = np.where(h > 0.0, i, hi)
        dh = 1.0 + gd * rd - gs * rs
        step = np.where(dh > 0.0, i - h / np.where(dh > 0.0, dh, 1.0), np.nan)
        inside = (step >= lo) & (step <= hi)
        nxt = np.where(inside, step, 0.5 * (lo + hi))
        done = np.abs(nxt - i) <= 1e-15 * np.abs(nxt) + 1e-300
        i = nxt
        if np.all(done):
            break
    return i


def _n_charges(vdb, vgb, vsb, t: CardTable):
    vds = vdb - vsb
    vt = t.vt0 - t.dibl * np.abs(vds)
    nphit = t.n_ss * t.phit
    x = (vgb - vt - 0.5 * (vdb + vsb)) / nphit
    # per-fin charges, scaled last so results are exactly linear in nfin;
    # qs is formed directly since -qg-qd cancels to noise in subthreshold
    qch = t.cch_max * nphit * _softplus(x)
    vgs = vgb - vsb
    vgd = vgb - vdb
    qg = t.cov * (vgs + vgd) + qch
    qd = -t.cov * vgd - 0.5 * qch
    qs = -t.cov * vgs - 0.5 * qch
    return qg * t.nfin, qd * t.nfin, qs * t.nfin


def eval_members(t: CardTable, vd, vg, vs, vb, charges=True):
    """Per-member (id, qg, qd, qs); voltages broadcast against the member axis."""
    sgn = t.sign
    vdb = sgn * (np.asarray(vd, dtype=float) - vb)
    vgb = sgn * (np.asarray(vg, dtype=float) - vb)
    vsb = sgn * (np.asarray(vs, dtype=float) - vb)
    i = sgn * _n_currents(vdb, vgb, vsb, t)
    if not charges:
        return i, None, None, None
    qg, qd, qs = _n_charges(vdb, vgb, vsb, t)
    return i, sgn * qg, sgn * qd, sgn * qs


def eval_devices(t: CardTable, vd, vg, vs, vb, charges=True):
    """Weight-summed (id, qg, qd, qs) per device."""
    i, qg, qd, qs = eval_members(t, vd, vg, vs, vb, charges)
    if not charges:
        return t.reduce(i), None, None, None
    return t.reduce(i), t.reduce(qg), t.reduce(qd), t.reduce(qs)


# ---------------------------------------------------------------------------
# scalar API


def _check_nfin(nfin):
    if not (nfin >= 1 and math.isfinite(nfin)):
        raise ValueError(f"nfin must be >= 1, got {nfin}")


def members_of(device) -> list[tuple[ModelCard, float]]:
    """(card, weight) pairs of a card or a general model."""
    if isinstance(device, ModelCard):
        return [(device, 1.0)]
    return list(device.members())


def _table(device, nfin) -> CardTable:
    mem = members_of(device)
    return CardTable([c for c, _ in mem], [w for _, w in mem], [0] * len(mem), [nfin])


def eval_terminal_currents(card: ModelCard, bias: BiasPoint, nfin: float = 1) -> TerminalCurrents:
    _check_nfin(nfin)
    t = _table(card, nfin)
    i, *_ = eval_devices(t, bias.vd, bias.vg, bias.vs, bias.vb, charges=False)
    idv = float(i[0])
    return TerminalCurrents(idv, 0.0, -idv, 0.0)


def eval_terminal_charges(card: ModelCard, bias: BiasPoint, nfin: float = 1) -> TerminalCharges:
    _check_nfin(nfin)
    t = _table(card, nfin)
    _, qg, qd, qs = eval_devices(t, bias.vd, bias.vg, bias.vs, bias.vb)
    return TerminalCharges(float(qg[0]), float(qd[0]), float(qs[0]), 0.0)


def drain_current(device, vd, vg, vs=0.0, vb=0.0, nfin: float = 1) -> np.ndarray:
    """Vectorised drain current of a card or general model over bias arrays."""
    t = _table(device, nfin)
    vd, vg, vs, vb = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (vd, vg, vs, vb)))
    i, *_ = eval_devices(t, vd[..., None], vg[..., None], vs[..., None], vb[..., None], charges=False)
    return i[..., 0]


def gate_charge(device, vd, vg, vs=0.0, vb=0.0, nfin: float = 1) -> np.ndarray:
    t = _table(device, nfin)
    vd, vg, vs, vb = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (vd, vg, vs, vb)))
    _, qg, _, _ = eval_devices(t, vd[..., None], vg[..., None], vs[..., None], vb[..., None])
    return qg[..., 0]


# ---------------------------------------------------------------------------
# characterization


def _geometry(device) -> tuple[float, float, str, float]:
    """(lg, weff, polarity, phit) of a card, or of a general model's query point."""
    mem = members_of(device)
    card = mem[0][0]
    if isinstance(device, ModelCard):
        return card.lg, card.weff, card.polarity, thermal_voltage(card.temp)
    q = device.query
    return q.axis1, 2.0 * card.hfin + q.axis2, card.polarity, thermal_voltage(card.temp)


def _crossing(vg: np.ndarray, logi: np.ndarray, target: float) -> float | None:
    """First gate voltage where log-current crosses ``target`` upward (linear interp)."""
    above = np.nonzero(logi >= target)[0]
    if above.size == 0 or above[0] == 0:
        return None
    k = above[0]
    x0, x1 = vg[k - 1], vg[k]
    y0, y1 = logi[k - 1], logi[k]
    return float(x0 + (target - y0) * (x1 - x0) / (y1 - y0))


def characterize(device, vdd: float, nfin: float = 1, dv: float = 1e-3) -> CharReport:
    """Device figures of merit at supply ``vdd`` for a card or a general model.

    Vt uses the constant-current criterion 100 nA * Weff*nfin/lg.  SS is the
    steepest point slope found at currents at least one decade below that
    criterion, at Vds = vdd.
    """
    if not vdd > 0:
        raise ValueError("vdd must be positive")
    lg, weff, pol, _ = _geometry(device)
    s = 1.0 if pol == "N" else -1.0
    failures: list[str] = []

    def idabs(vd, vg):
        return np.abs(drain_current(device, s * np.asarray(vd), s * np.asarray(vg), 0.0, 0.0, nfin))

    ioff = float(idabs(vdd, 0.0))
    ion = float(idabs(vdd, vdd))
    ih = float(idabs(0.5 * vdd, vdd))
    il = float(idabs(vdd, 0.5 * vdd))
    ieff = 0.5 * (ih + il)

    icrit = 100e-9 * weff * nfin / lg
    vg = np.arange(-0.5 * vdd, vdd + 0.5 * dv, dv)
    vt = {}
    logs = {}
    for tag, vds in (("lin", 0.05), ("sat", vdd)):
        logi = np.log10(np.maximum(idabs(vds, vg), 1e-300))
        logs[tag] = logi
        vt[tag] = _crossing(vg, logi, math.log10(icrit))
        if vt[tag] is None:
            failures.append(f"vt_{tag}: criterion current {icrit:.3g} A not bracketed by gate sweep")
    vt_lin = vt["lin"] if vt["lin"] is not None else math.nan
    vt_sat = vt["sat"] if vt["sat"] is not None else math.nan
    dibl_meas = (vt_lin - vt_sat) / (vdd - 0.05) * 1e3

    logi = logs["sat"]
    slope = np.diff(logi) / dv  # decades per volt
    mid = 0.5 * (logi[1:] + logi[:-1])
    sub = (mid <= math.log10(icrit) - 1.0) & (slope > 0)
    if np.any(sub):
        ss = 1e3 / float(np.max(slope[sub]))
    else:
        ss = math.nan
        failures.append("ss: no subthreshold points a decade below the Vt criterion")

    cgg = _numeric_cgg(device, s, vdd, vdd, nfin)
    cov_meas = _numeric_cgg(device, s, -0.5 * vdd, 0.0, nfin) / 2.0
    cch_meas = cgg - 2.0 * cov_meas

    vlin = 0.05
    ron = vlin / float(idabs(vlin, vdd))
    return CharReport(ioff, ion, ieff, vt_lin, vt_sat, ss, dibl_meas, cgg, cov_meas,
                      cch_meas, ron, failures)


def _numeric_cgg(device, s, vg, vd, nfin, h=1e-4):
    qp = gate_charge(device, s * vd, s * (vg + h), 0.0, 0.0, nfin)
    qm = gate_charge(device, s * vd, s * (vg - h), 0.0, 0.0, nfin)
    return float(np.abs(qp - qm) / (2 * h))


# ---------------------------------------------------------------------------
# model-card files (SI units: lengths in metres)


def card_to_text(card: ModelCard, header: str | None = None) -> str:
    items = {}
    for name in CARD_FIELDS:
        v = getattr(card, name)
        if name in _LENGTH_FIELDS:
            v = v / 1e9
        items[name] = v
    return format_kv(items, header)


def card_from_dict(raw: dict[str, str]) -> ModelCard:
    unknown = set(raw) - set(CARD_FIELDS)
    if unknown:
        raise ValueError(f"unknown model-card keys: {sorted(unknown)}")
    kw: dict[str, object] = {}
    for name, text in raw.items():
        if name == "polarity":
            kw[name] = text.strip().upper()
        elif name == "nfin_unit":
            kw[name] = int(parse_si(text))
        elif name in _LENGTH_FIELDS:
            # 1e-9 nm rounding makes nm -> m -> nm exact for decimal inputs
            kw[name] = round(parse_si(text) * 1e9, 9)
        else:
            kw[name] = parse_si(text)
    return ModelCard(**kw)


def write_card(card: ModelCard, path: str | Path, header: str | None = None) -> None:
    Path(path).write_text(card_to_text(card, header))


def read_card(path: str | Path) -> ModelCard:
    return card_from_dict(read_kv_file(path))
