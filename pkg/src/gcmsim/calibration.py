"""Reference data, fit metrics and card extraction.

``virtual_tcad`` is an analytic stand-in for a physics-based device
simulator: it evaluates the surrogate compact model with an *effective*
card whose parameters follow smooth trends in (Lg, Wfin):

    k_gain = k0 / (1 + (wc/wfin)**p)                 narrow-fin mobility collapse
    dibl   = d0 * exp(-lg/ell) * (wfin/6)**alpha     short-channel DIBL
    vt0    = vt_base - vt_roll * exp(-lg/ell_roll)   Vt roll-off
    n_ss   = n0 + n_sce * exp(-lg/ell) * (wfin/6)**alpha
    theta  = theta_ref * (18/lg)**theta_exp
    cch    = cch_ref * lg*Weff / (18*(2*hfin + 6))

Users with real TCAD or silicon exports can bypass the oracle and load
``vg,vd,id`` CSV files instead.
"""
from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .device import ModelCard, drain_current, gate_charge
from .grid import DesignPoint, ModelGrid
from .units import format_kv, parse_si, read_kv_file

LG_REF = 18.0
WFIN_REF = 6.0
LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class OracleParams:
    polarity: str = "N"
    hfin: float = 50.0
    vt_base: float = 0.33
    n0: float = 1.05
    k0: float = 1.0e-4
    theta_ref: float = 1.0
    theta_exp: float = 3.0
    lambda_clm: float = 0.05
    rs: float = 0.0
    cov: float = 0.02e-15
    cch_ref: float = 0.04e-15
    wc: float = 3.0
    p: float = 2.0
    d0: float = 0.5
    ell: float = 7.0
    alpha: float = 1.0
    vt_roll: float = 1.0
    ell_roll: float = 5.0
    n_sce: float = 2.0
    lg_min: float = 10.0
    lg_max: float = 30.0
    wfin_min: float = 3.0
    wfin_max: float = 12.0

    def __post_init__(self):
        for name in ("hfin", "wc", "ell", "ell_roll", "lg_min", "wfin_min"):
            if not getattr(self, name) > 0:
                raise ValueError(f"oracle length {name} must be > 0")
        if self.polarity not in ("N", "P"):
            raise ValueError("polarity must be 'N' or 'P'")

    def replace(self, **kw) -> "OracleParams":
        return dataclasses.replace(self, **kw)


DEFAULT_N_ORACLE = OracleParams()
DEFAULT_P_ORACLE = OracleParams(polarity="P", vt_base=0.35, k0=0.8e-4)

ORACLE_FIELDS = tuple(f.name for f in dataclasses.fields(OracleParams))


def oracle_card(params: OracleParams, point: DesignPoint) -> ModelCard:
    """Effective card the oracle evaluates at ``point``."""
    lg, wfin = point.axis1, point.axis2
    if not (params.lg_min <= lg <= params.lg_max and params.wfin_min <= wfin <= params.wfin_max):
        raise ValueError(
            f"design point ({lg}, {wfin}) outside the oracle validity box "
            f"[{params.lg_min}, {params.lg_max}] x [{params.wfin_min}, {params.wfin_max}] nm"
        )
    wrel = (wfin / WFIN_REF) ** params.alpha
    sce = math.exp(-lg / params.ell)
    weff = 2 * params.hfin + wfin
    return ModelCard(
        polarity=params.polarity,
        lg=lg,
        wfin=wfin,
        hfin=params.hfin,
        vt0=params.vt_base - params.vt_roll * math.exp(-lg / params.ell_roll),
        n_ss=params.n0 + params.n_sce * sce * wrel,
        dibl=params.d0 * sce * wrel,
        k_gain=params.k0 / (1.0 + (params.wc / wfin) ** params.p),
        theta_sat=params.theta_ref * (LG_REF / lg) ** params.theta_exp,
        lambda_clm=params.lambda_clm,
        rs=params.rs,
        rd=params.rs,
        cov=params.cov,
        cch_max=params.cch_ref * lg * weff / (LG_REF * (2 * params.hfin + WFIN_REF)),
    )


@dataclass
class IvDataset:
    point: DesignPoint
    vg: np.ndarray
    vd: np.ndarray
    id: np.ndarray
    vdd: float
    polarity: str = "N"

    def __post_init__(self):
        self.vg = np.asarray(self.vg, dtype=float)
        self.vd = np.asarray(self.vd, dtype=float)
        self.id = np.asarray(self.id, dtype=float)
        if not (self.vg.shape == self.vd.shape == self.id.shape):
            raise ValueError("vg, vd, id must have equal length")
        if not np.all(np.isfinite(self.id)):
            raise ValueError("dataset currents must be finite")
        if len(np.unique(self.vd)) < 2:
            raise ValueError("dataset needs at least two distinct vd values")

    def __len__(self) -> int:
        return self.id.size

    def scaled(self, factor: float) -> "IvDataset":
        return dataclasses.replace(self, id=self.id * factor)


@dataclass
class CggDataset:
    vg: np.ndarray
    cgg: np.ndarray
    vd: float = 0.0


@dataclass
class FitResult:
    card: ModelCard
    rms_lin: float
    rms_log: float
    iterations: int
    converged: bool
    evaluations: int = 0
    trace: list[float] = field(default_factory=list, repr=False)

    @property
    def objective(self) -> float:
        return self.rms_lin + 0.5 * self.rms_log


def bias_grid(vdd: float, polarity: str = "N", n_vg: int = 31,
              vd_values: Sequence[float] | None = None):
    """Rectangular (vg, vd) grid: transfer curves at linear, mid and saturated drain bias.

    Three drain biases are needed to separate the output-conductance terms
    (k_gain, theta_sat, lambda_clm); with two they trade off freely.
    """
    s = 1.0 if polarity == "N" else -1.0
    if vd_values is None:
        vd_values = (0.05, 0.5 * vdd, vdd)
    vg = np.linspace(0.0, vdd, n_vg)
    G, D = np.meshgrid(vg, np.asarray(vd_values, dtype=float))
    return s * G.ravel(), s * D.ravel()


def virtual_tcad(params: OracleParams, point: DesignPoint, vdd: float = 0.75,
                 n_vg: int = 31, vd_values: Sequence[float] | None = None,
                 ) -> tuple[IvDataset, CggDataset]:
    """Oracle I-V transfer curves and a Cgg(Vg) curve at Vds = 0."""
    card = oracle_card(params, point)
    vg, vd = bias_grid(vdd, params.polarity, n_vg, vd_values)
    ids = drain_current(card, vd, vg)
    s = 1.0 if params.polarity == "N" else -1.0
    cvg = s * np.linspace(-0.25 * vdd, vdd, 41)
    h = 1e-4
    cgg = np.abs(gate_charge(card, 0.0, cvg + h) - gate_charge(card, 0.0, cvg - h)) / (2 * h)
    return (IvDataset(point, vg, vd, ids, vdd, params.polarity), CggDataset(cvg, cgg))


def relative_rms(isim: np.ndarray, dataset: IvDataset) -> tuple[float, float]:
    """(linear %, log decades) fit error of ``isim`` against ``dataset``.

    Linear: RMS of (Isim - Iref)/max|Iref| on the same Vd curve, in percent.
    Log: RMS of log10|Isim| - log10|Iref| over points with |Iref| > 1 pA.
    """
    isim = np.asarray(isim, dtype=float)
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if isim.shape != dataset.id.shape:
        raise ValueError("simulated currents do not match the dataset bias grid")
    iref = dataset.id
    norm = np.empty_like(iref)
    for v in np.unique(dataset.vd):
        m = dataset.vd == v
        norm[m] = np.max(np.abs(iref[m]))
    norm = np.where(norm > 0, norm, 1.0)
    lin = math.sqrt(float(np.mean(((isim - iref) / norm) ** 2))) * 100.0
    keep = np.abs(iref) > LOG_FLOOR
    if not np.any(keep):
        return lin, 0.0
    with np.errstate(divide="ignore"):
        dlog = np.log10(np.maximum(np.abs(isim[keep]), 1e-300)) - np.log10(np.abs(iref[keep]))
    return lin, math.sqrt(float(np.mean(dlog ** 2)))


# ---------------------------------------------------------------------------
# extraction

FREE_DEFAULT = ("vt0", "n_ss", "dibl", "k_gain", "theta_sat", "lambda_clm")
FREE_ALLOWED = ("vt0", "n_ss", "dibl", "k_gain", "theta_sat", "lambda_clm", "rs", "cov", "cch_max")


@dataclass(frozen=True)
class ExtractConfig:
    free: tuple[str, ...] = FREE_DEFAULT
    max_evals: int = 2000
    step: float = 0.1
    tol: float = 1e-7
    restarts: int = 8


# x-space transforms keep every parameter inside its valid range
def _to_x(name: str, v: float) -> float:
    if name == "vt0":
        return v / 0.1
    if name == "n_ss":
        return math.log(max(v - 1.0, 1e-6))
    return math.log(max(v, 1e-12))


def _from_x(name: str, x: float) -> float:
    if name == "vt0":
        return 0.1 * x
    if name == "n_ss":
        return 1.0 + math.exp(x)
    return math.exp(x)


def _apply(card: ModelCard, free: Sequence[str], x: np.ndarray) -> ModelCard:
    kw = {}
    for name, xi in zip(free, x):
        v = _from_x(name, float(xi))
        if name == "rs":
            kw["rs"] = kw["rd"] = v
        else:
            kw[name] = v
    return card.replace(**kw)


def fit_errors(card: ModelCard, dataset: IvDataset) -> tuple[float, float]:
    return relative_rms(drain_current(card, dataset.vd, dataset.vg), dataset)


def extract_card(dataset: IvDataset, init: ModelCard, config: ExtractConfig = ExtractConfig(),
                 cgg: CggDataset | None = None) -> FitResult:
    """Fit the free card parameters to ``dataset`` by Nelder-Mead on rms_lin + 0.5*rms_log.

    The simplex restarts from the best point while restarts keep improving
    and evaluations remain.  Overlap and channel capacitance are fitted
    afterwards by linear least squares against ``cgg``.
    """
    bad = set(config.free) - set(FREE_ALLOWED)
    if bad:
        raise ValueError(f"parameters not extractable: {sorted(bad)}")
    if init.polarity != dataset.polarity:
        raise ValueError("initial card polarity does not match the dataset")
    iv_free = tuple(n for n in config.free if n not in ("cov", "cch_max"))
    trace: list[float] = []
    best = {"f": math.inf, "x": None}

    def objective(x):
        try:
            card = _apply(init, iv_free, x)
        except ValueError:
            return 1e6
        lin, log = fit_errors(card, dataset)
        f = lin + 0.5 * log
        if not math.isfinite(f):
            f = 1e6
        if f < best["f"]:
            best["f"], best["x"] = f, np.array(x, dtype=float)
        trace.append(best["f"])
        return f

    x0 = np.array([_to_x(n, getattr(init, n)) for n in iv_free])
    f0 = objective(x0)
    iterations = 0
    converged = f0 <= config.tol
    if iv_free and not converged:
        x = x0
        for _ in range(config.restarts + 1):
            budget = config.max_evals - len(trace)
            if budget <= len(iv_free) + 1:
                break
            simplex = np.vstack([x] + [x + config.step * e for e in np.eye(len(x))])
            f_start = best["f"]
            res = minimize(objective, x, method="Nelder-Mead",
                           options={"initial_simplex": simplex, "maxfev": budget,
                                    "xatol": 1e-9, "fatol": config.tol * 0.1})
            iterations += int(res.nit)
            x = best["x"]
            if best["f"] <= config.tol or f_start - best["f"] <= config.tol:
                converged = bool(res.success) or best["f"] <= config.tol
                break
    card = _apply(init, iv_free, best["x"]) if best["x"] is not None else init
    if cgg is not None and ("cov" in config.free or "cch_max" in config.free):
        card = fit_capacitance(card, cgg)
    lin, log = fit_errors(card, dataset)
    return FitResult(card, lin, log, iterations, converged, len(trace), trace)


def fit_capacitance(card: ModelCard, data: CggDataset) -> ModelCard:
    """Least-squares (cov, cch_max): Cgg is linear in both for fixed I-V parameters."""
    h = 1e-4
    base = card.replace(cov=1.0, cch_max=0.0)
    chan = card.replace(cov=0.0, cch_max=1.0)

    def cgg_of(c):
        return np.abs(gate_charge(c, data.vd, data.vg + h) - gate_charge(c, data.vd, data.vg - h)) / (2 * h)

    A = np.column_stack([cgg_of(base), cgg_of(chan)])
    coef, *_ = np.linalg.lstsq(A, data.cgg, rcond=None)
    cov, cch = (max(float(c), 0.0) for c in coef)
    return card.replace(cov=cov, cch_max=cch)


def initial_card(params: OracleParams) -> ModelCard:
    """Generic starting card for extraction: the oracle's long-channel baseline."""
    return ModelCard(
        polarity=params.polarity, lg=LG_REF, wfin=WFIN_REF, hfin=params.hfin,
        vt0=params.vt_base, n_ss=params.n0 + 0.1, dibl=0.03, k_gain=params.k0 * 0.8,
        theta_sat=params.theta_ref, lambda_clm=params.lambda_clm,
        rs=params.rs, rd=params.rs, cov=params.cov, cch_max=params.cch_ref,
    )


def calibrate_point(params: OracleParams, point: DesignPoint, vdd: float = 0.75,
                    config: ExtractConfig = ExtractConfig(), init: ModelCard | None = None,
                    ) -> FitResult:
    iv, cgg = virtual_tcad(params, point, vdd)
    if init is None:
        init = initial_card(params)
    init = init.replace(lg=point.axis1, wfin=point.axis2)
    free = config.free + tuple(n for n in ("cov", "cch_max") if n not in config.free)
    return extract_card(iv, init, dataclasses.replace(config, free=free), cgg)


def calibrate_grid(params: OracleParams, axis1: Sequence[float], axis2: Sequence[float],
                   vdd: float = 0.75, config: ExtractConfig = ExtractConfig(),
                   labels: tuple[str, str] = ("lg", "wfin"),
                   datasets: dict | None = None) -> tuple[ModelGrid, list[tuple[DesignPoint, FitResult]]]:
    """One extraction per lattice node.

    ``datasets`` may map (axis1, axis2) to user-supplied (IvDataset, CggDataset)
    pairs that replace the oracle at those nodes.
    """
    rows = []
    fits = []
    for x in axis1:
        row = []
        for y in axis2:
            pt = DesignPoint(float(x), float(y), labels)
            if datasets and (x, y) in datasets:
                iv, cgg = datasets[(x, y)]
                init = initial_card(params).replace(lg=float(x), wfin=float(y))
                free = config.free + ("cov", "cch_max")
                fit = extract_card(iv, init, dataclasses.replace(config, free=free), cgg)
            else:
                fit = calibrate_point(params, pt, vdd, config)
            row.append(fit.card)
            fits.append((pt, fit))
        rows.append(tuple(row))
    grid = ModelGrid(tuple(float(v) for v in axis1), tuple(float(v) for v in axis2), tuple(rows), labels)
    return grid, fits


# ---------------------------------------------------------------------------
# file formats


def write_iv_csv(ds: IvDataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vg", "vd", "id"])
        for g, d, i in zip(ds.vg, ds.vd, ds.id):
            w.writerow([repr(float(g)), repr(float(d)), repr(float(i))])


def read_iv_csv(path: str | Path, point: DesignPoint, vdd: float, polarity: str = "N") -> IvDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip().lower() for c in rows[0]] != ["vg", "vd", "id"]:
        raise ValueError(f"{path}: header must be 'vg,vd,id'")
    data = np.array([[float(c) for c in r] for r in rows[1:] if r], dtype=float)
    if data.size == 0:
        raise ValueError(f"{path}: no data rows")
    return IvDataset(point, data[:, 0], data[:, 1], data[:, 2], vdd, polarity)


def write_cgg_csv(ds: CggDataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vg", "cgg"])
        for g, c in zip(ds.vg, ds.cgg):
            w.writerow([repr(float(g)), repr(float(c))])


def read_cgg_csv(path: str | Path) -> CggDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip().lower() for c in rows[0]] != ["vg", "cgg"]:
        raise ValueError(f"{path}: header must be 'vg,cgg'")
    data = np.array([[float(c) for c in r] for r in rows[1:] if r], dtype=float)
    return CggDataset(data[:, 0], data[:, 1])


def oracle_to_text(params: OracleParams) -> str:
    return format_kv({n: getattr(params, n) for n in ORACLE_FIELDS})


def read_oracle(path: str | Path) -> OracleParams:
    raw = read_kv_file(path)
    unknown = set(raw) - set(ORACLE_FIELDS)
    if unknown:
        raise ValueError(f"unknown oracle keys: {sorted(unknown)}")
    kw: dict[str, object] = {}
    for k, v in raw.items():
        kw[k] = v.strip().upper() if k == "polarity" else parse_si(v)
    return OracleParams(**kw)


def ieff_at_ioff(device, vdd: float, ioff_target: float, nfin: float = 1) -> float:
    """Ieff after shifting the gate work function so that Ioff hits ``ioff_target``."""
    from scipy.optimize import brentq

    pol = device.polarity if hasattr(device, "polarity") else device.members()[0][0].polarity
    s = 1.0 if pol == "N" else -1.0

    def i(vd, vg):
        return abs(float(drain_current(device, s * vd, s * vg, 0.0, 0.0, nfin)))

    shift = brentq(lambda d: math.log(i(vdd, d)) - math.log(ioff_target), -1.5, 1.5, xtol=1e-12)
    return 0.5 * (i(0.5 * vdd, vdd + shift) + i(vdd, 0.5 * vdd + shift))
