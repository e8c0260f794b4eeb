"""RC-triggered ESD power clamp: netlist builder, metrics, sweeps and Monte Carlo.

Topology: a resistor from VDD to the trigger node and a capacitor from
there to ground form the timer; an odd chain of inverters (P/N pairs on
the VDD rail) drives the gate of a wide NMOS shunt (the BigFET) between
VDD and ground.  Every transistor uses the general model at the
configured (lg, wfin).
"""
from __future__ import annotations

import csv
import dataclasses
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .circuit.mna import Circuit, ModelLibrary, SimulationError, SimOptions
from .circuit.netlist import (
    Capacitor,
    CurrentSource,
    Mosfet,
    Netlist,
    Resistor,
    Stimulus,
    VoltageSource,
    dexp_peak,
)
from .grid import OutOfHullError
from .units import digest, format_kv, parse_si, read_kv_file

METRICS = ("clamp_voltage", "leakage", "peak_powerup_current", "recovery_time")
CSV_COLUMNS = ("clamp_v", "leak_a", "peak_a", "recovery_s")
EVENT_KINDS = ("esd_pulse", "powerup", "false_trigger", "leakage")


@dataclass(frozen=True)
class ClampConfig:
    r_timer: float = 3e6
    c_timer: float = 1e-12
    stages: int = 3
    n_nfin: int = 4
    p_nfin: int = 8
    stage_scale: int = 4
    bigfet_nfin: int = 20000
    vdd: float = 0.75
    lg: float = 18.0
    wfin: float = 6.0
    por_lg: float = 18.0
    por_wfin: float = 6.0
    t_ramp: float = 10e-6
    false_trigger_from: float = 0.0

    def __post_init__(self):
        if self.stages < 1 or self.stages % 2 == 0:
            raise ValueError(f"inverter stage count must be odd and >= 1, got {self.stages}")
        for name in ("n_nfin", "p_nfin", "stage_scale", "bigfet_nfin"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("r_timer", "c_timer", "vdd", "lg", "wfin", "por_lg", "por_wfin", "t_ramp"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and > 0, got {v}")
        if not 0 <= self.false_trigger_from < 1:
            raise ValueError("false_trigger_from must lie in [0, 1)")

    def at(self, lg: float, wfin: float) -> "ClampConfig":
        return dataclasses.replace(self, lg=float(lg), wfin=float(wfin))

    def at_por(self) -> "ClampConfig":
        return self.at(self.por_lg, self.por_wfin)

    def replace(self, **kw) -> "ClampConfig":
        return dataclasses.replace(self, **kw)

    def stage_nfin(self, k: int) -> tuple[int, int]:
        """(N, P) fin counts of inverter stage ``k`` (0-based)."""
        s = self.stage_scale ** k
        return self.n_nfin * s, self.p_nfin * s

    def to_text(self) -> str:
        return format_kv({f.name: getattr(self, f.name) for f in dataclasses.fields(self)})

    def digest(self) -> str:
        return digest(self.to_text())


_INT_FIELDS = {"stages", "n_nfin", "p_nfin", "stage_scale", "bigfet_nfin"}


def read_clamp_config(path: str | Path) -> ClampConfig:
    raw = read_kv_file(path)
    names = {f.name for f in dataclasses.fields(ClampConfig)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ValueError(f"{path}: unknown clamp config keys {unknown}")
    kw = {}
    for k, v in raw.items():
        x = parse_si(v)
        if k in _INT_FIELDS:
            if x != int(x):
                raise ValueError(f"{path}: {k} must be an integer")
            x = int(x)
        kw[k] = x
    return ClampConfig(**kw)


def write_clamp_config(cfg: ClampConfig, path: str | Path) -> None:
    Path(path).write_text(cfg.to_text())


@dataclass(frozen=True)
class EsdEventSpec:
    kind: str
    peak: float = 1.33
    tau_rise: float = 10e-9
    tau_decay: float = 150e-9
    pulse_window: float = 1e-6
    t_ramp: float = 10e-6
    powerup_tail: float = 5e-6
    settle: float = 10e-6
    step_rise: float = 1e-9
    step_from: float = 0.0
    hold: float = 50e-9
    recovery_window: float = 50e-6

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}; expected one of {EVENT_KINDS}")
        for f in dataclasses.fields(self):
            if f.name not in ("kind", "step_from") and not getattr(self, f.name) > 0:
                raise ValueError(f"event parameter {f.name} must be > 0")
        if not 0 <= self.step_from < 1:
            raise ValueError("step_from must lie in [0, 1)")
        if self.tau_decay <= self.tau_rise:
            raise ValueError("tau_decay must exceed tau_rise")

    @property
    def i0(self) -> float:
        """Double-exponential amplitude giving the requested peak current."""
        return self.peak / dexp_peak(1.0, self.tau_rise, self.tau_decay)[1]

    @property
    def t_stop(self) -> float:
        return {
            "esd_pulse": self.pulse_window,
            "powerup": self.t_ramp + self.powerup_tail,
            "false_trigger": self.settle + self.step_rise + self.recovery_window,
            "leakage": 0.0,
        }[self.kind]


def event_for(kind: str, cfg: ClampConfig) -> EsdEventSpec:
    return EsdEventSpec(kind, t_ramp=cfg.t_ramp, step_from=cfg.false_trigger_from)


def build_clamp_netlist(cfg: ClampConfig, event: EsdEventSpec) -> Netlist:
    net = Netlist(title=f"rc clamp {event.kind} lg={cfg.lg} wfin={cfg.wfin}")
    net.add(Resistor("Rtimer", "vdd", "trig", cfg.r_timer))
    net.add(Capacitor("Ctimer", "trig", "0", cfg.c_timer))
    node = "trig"
    for k in range(cfg.stages):
        out = "gate" if k == cfg.stages - 1 else f"inv{k + 1}"
        nn, pn = cfg.stage_nfin(k)
        net.add(Mosfet(f"MP{k + 1}", out, node, "vdd", "vdd", "gcmp", pn, cfg.lg, cfg.wfin))
        net.add(Mosfet(f"MN{k + 1}", out, node, "0", "0", "gcmn", nn, cfg.lg, cfg.wfin))
        node = out
    net.add(Mosfet("Mbig", "vdd", "gate", "0", "0", "gcmn", cfg.bigfet_nfin, cfg.lg, cfg.wfin))
    vdd = cfg.vdd
    if event.kind == "esd_pulse":
        net.add(CurrentSource("Iesd", "0", "vdd", Stimulus.dexp(event.i0, event.tau_rise, event.tau_decay)))
    elif event.kind == "powerup":
        net.add(VoltageSource("Vdd", "vdd", "0", Stimulus.ramp(0.0, event.t_ramp, vdd)))
    elif event.kind == "false_trigger":
        t1 = event.settle
        t2 = event.settle + event.step_rise
        net.add(VoltageSource("Vdd", "vdd", "0", Stimulus.pwl(
            [(0.0, event.step_from * vdd), (t1, event.step_from * vdd), (t2, vdd)])))
    else:
        net.add(VoltageSource("Vdd", "vdd", "0", Stimulus.dc(vdd)))
    net.analyses.append(("op",) if event.kind == "leakage" else ("tran", event.t_stop))
    net.validate()
    return net


@dataclass(frozen=True)
class MetricsReport:
    lg: float
    wfin: float
    clamp_voltage: float
    leakage: float
    peak_powerup_current: float
    recovery_time: float
    recovery_resolved: bool = True
    config_digest: str = ""
    max_residual: float = 0.0

    def values(self) -> tuple[float, float, float, float]:
        return tuple(getattr(self, m) for m in METRICS)  # type: ignore[return-value]


class MeasurementError(SimulationError):
    pass


def _library(library: ModelLibrary | None) -> ModelLibrary:
    if library is not None:
        return library
    from .library import default_library

    return default_library()


def _run(cfg: ClampConfig, event: EsdEventSpec, library: ModelLibrary, options: SimOptions):
    net = build_clamp_netlist(cfg, event)
    circ = Circuit(net, library, options)
    try:
        if event.kind == "leakage":
            return circ, circ.solve_dc()
        return circ, circ.solve_transient(event.t_stop, uic=event.kind == "esd_pulse")
    except SimulationError as exc:
        raise MeasurementError(f"{event.kind} at ({cfg.lg}, {cfg.wfin}): {exc}") from exc


def _recovery(times, idrain, t0, threshold, hold, t_end):
    """First time after ``t0`` the current drops below ``threshold`` and stays there for ``hold``."""
    below = idrain < threshold
    k0 = int(np.searchsorted(times, t0, side="left"))
    for k in range(k0, len(times)):
        if not below[k]:
            continue
        if k > k0 and not below[k - 1]:
            # log-linear interpolation of the crossing
            a, b = math.log(idrain[k - 1]), math.log(max(idrain[k], 1e-300))
            f = (a - math.log(threshold)) / (a - b)
            tc = times[k - 1] + f * (times[k] - times[k - 1])
        else:
            tc = times[k]
        if tc + hold > t_end:
            return None
        stop = int(np.searchsorted(times, tc + hold, side="right"))
        if np.all(below[k:stop]):
            return tc - t0
    return None


class _Measurer:
    def __init__(self, cfg: ClampConfig, library: ModelLibrary | None, options: SimOptions):
        self.cfg = cfg
        self.library = _library(library)
        self.options = options
        self.residual = 0.0
        self._leak = None

    def _track(self, res):
        r = float(np.max(res.residuals)) if hasattr(res, "residuals") else res.residual
        self.residual = max(self.residual, r)

    def leakage(self) -> float:
        if self._leak is None:
            circ, op = _run(self.cfg, event_for("leakage", self.cfg), self.library, self.options)
            self._track(op)
            self._leak = abs(op.currents["Vdd"])
        return self._leak

    def clamp_voltage(self) -> float:
        _, res = _run(self.cfg, event_for("esd_pulse", self.cfg), self.library, self.options)
        self._track(res)
        return float(np.max(res.v("vdd")))

    def peak_powerup_current(self) -> float:
        _, res = _run(self.cfg, event_for("powerup", self.cfg), self.library, self.options)
        self._track(res)
        return float(np.max(np.abs(res.i("Vdd"))))

    def recovery_time(self) -> tuple[float, bool]:
        ev = event_for("false_trigger", self.cfg)
        thr = 1.5 * self.leakage()
        circ, res = _run(self.cfg, ev, self.library, self.options)
        self._track(res)
        idrain = np.abs(circ.mos_currents(res.x)[:, circ.mos_index("Mbig")])
        t0 = ev.settle + ev.step_rise
        rec = _recovery(res.times, idrain, t0, thr, ev.hold, res.times[-1])
        if rec is None:
            return ev.recovery_window, False
        return float(rec), True


def measure(cfg: ClampConfig, metric: str, library: ModelLibrary | None = None,
            options: SimOptions = SimOptions()) -> float:
    """One metric at ``cfg``'s design point."""
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
    m = _Measurer(cfg, library, options)
    out = getattr(m, metric)()
    return out[0] if metric == "recovery_time" else out


def measure_all(cfg: ClampConfig, library: ModelLibrary | None = None,
                options: SimOptions = SimOptions()) -> MetricsReport:
    m = _Measurer(cfg, library, options)
    leak = m.leakage()
    vc = m.clamp_voltage()
    peak = m.peak_powerup_current()
    rec, ok = m.recovery_time()
    return MetricsReport(cfg.lg, cfg.wfin, vc, leak, peak, rec, ok, cfg.digest(), m.residual)


# ---------------------------------------------------------------------------
# sweeps


def _check_hull(library: ModelLibrary, lg: float, wfin: float) -> None:
    for pol, grid in library.grids.items():
        if not grid.contains(lg, wfin):
            raise OutOfHullError(
                f"({lg}, {wfin}) is outside the {pol}-type grid hull "
                f"[{grid.axis1_values[0]}, {grid.axis1_values[-1]}] x "
                f"[{grid.axis2_values[0]}, {grid.axis2_values[-1]}] nm")


_WORKER: dict = {}


def _worker_init(library, options):
    _WORKER["library"] = library
    _WORKER["options"] = options


def _worker_measure(cfg: ClampConfig) -> MetricsReport:
    return measure_all(cfg, _WORKER["library"], _WORKER["options"])


def _map_measure(cfgs: list[ClampConfig], library: ModelLibrary, options: SimOptions,
                 jobs: int) -> list[MetricsReport]:
    if jobs <= 1 or len(cfgs) <= 1:
        return [measure_all(c, library, options) for c in cfgs]
    with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init,
                             initargs=(library, options)) as pool:
        return list(pool.map(_worker_measure, cfgs))


@dataclass
class SweepResult:
    reports: list[MetricsReport]
    skipped: list[tuple[float, float, str]]
    por: MetricsReport
    best: dict[str, MetricsReport] = field(default_factory=dict)
    improvement: dict[str, float] = field(default_factory=dict)

    def grid(self, metric: str, lgs: Sequence[float], wfins: Sequence[float]) -> np.ndarray:
        """Metric laid out as (len(lgs), len(wfins)); NaN where skipped."""
        out = np.full((len(lgs), len(wfins)), np.nan)
        for r in self.reports:
            i = min(range(len(lgs)), key=lambda k: abs(lgs[k] - r.lg))
            j = min(range(len(wfins)), key=lambda k: abs(wfins[k] - r.wfin))
            out[i, j] = getattr(r, metric)
        return out


def run_sweep(cfg: ClampConfig, lgs: Sequence[float], wfins: Sequence[float],
              library: ModelLibrary | None = None, options: SimOptions = SimOptions(),
              jobs: int = 1, por: MetricsReport | None = None) -> SweepResult:
    """All four metrics at every (lg, wfin); out-of-hull points are skipped."""
    library = _library(library)
    cfgs, skipped = [], []
    for lg in lgs:
        for w in wfins:
            try:
                _check_hull(library, lg, w)
            except OutOfHullError as exc:
                skipped.append((float(lg), float(w), str(exc)))
                continue
            cfgs.append(cfg.at(lg, w))
    if por is None:
        por_cfg = cfg.at_por()
        hit = [k for k, c in enumerate(cfgs) if (c.lg, c.wfin) == (por_cfg.lg, por_cfg.wfin)]
        cfgs_all = cfgs + ([] if hit else [por_cfg])
        reports = _map_measure(cfgs_all, library, options, jobs)
        por = reports[hit[0]] if hit else reports[-1]
        reports = reports[: len(cfgs)]
    else:
        reports = _map_measure(cfgs, library, options, jobs)
    result = SweepResult(reports, skipped, por)
    for m in METRICS:
        if reports:
            best = min(reports, key=lambda r: getattr(r, m))
            result.best[m] = best
            base = getattr(por, m)
            result.improvement[m] = (base - getattr(best, m)) / base
    return result


def sweep_to_csv(result: SweepResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lg_nm", "wfin_nm", *CSV_COLUMNS])
    for r in result.reports:
        w.writerow([repr(r.lg), repr(r.wfin), *(repr(float(v)) for v in r.values())])
    return buf.getvalue()


def improvements_to_csv(result: SweepResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "por", "best", "best_lg_nm", "best_wfin_nm", "improvement"])
    for m, col in zip(METRICS, CSV_COLUMNS):
        if m in result.best:
            b = result.best[m]
            w.writerow([col, repr(getattr(result.por, m)), repr(getattr(b, m)), repr(b.lg),
                        repr(b.wfin), repr(result.improvement[m])])
    return buf.getvalue()


@dataclass(frozen=True)
class CorrelationMatrix:
    names: tuple[str, ...]
    r: np.ndarray
    undefined: tuple[str, ...]


def correlation_matrix(rows: Sequence[MetricsReport] | np.ndarray,
                       names: Sequence[str] = METRICS) -> CorrelationMatrix:
    """Pearson r between metrics over sweep samples; zero-variance metrics give NaN rows."""
    if isinstance(rows, np.ndarray):
        data = np.asarray(rows, dtype=float)
    else:
        data = np.array([r.values() for r in rows], dtype=float)
    if data.ndim != 2 or data.shape[0] < 3:
        raise ValueError("correlation needs at least 3 samples")
    if data.shape[1] != len(names):
        raise ValueError("column count does not match metric names")
    dev = data - data.mean(axis=0)
    ss = np.sqrt(np.sum(dev * dev, axis=0))
    ok = ss > 0
    r = np.full((data.shape[1],) * 2, np.nan)
    idx = np.flatnonzero(ok)
    z = dev[:, idx] / ss[idx]
    sub = z.T @ z
    sub = 0.5 * (sub + sub.T)
    np.fill_diagonal(sub, 1.0)
    r[np.ix_(idx, idx)] = np.clip(sub, -1.0, 1.0)
    return CorrelationMatrix(tuple(names), r, tuple(n for n, o in zip(names, ok) if not o))


# ---------------------------------------------------------------------------
# Monte Carlo


def skewness(x: np.ndarray) -> float:
    """Sample skewness m3 / m2**1.5; NaN when the sample has no spread."""
    x = np.asarray(x, dtype=float)
    d = x - x.mean()
    m2 = np.mean(d * d)
    if m2 == 0 or not np.isfinite(m2):
        return math.nan
    return float(np.mean(d ** 3) / m2 ** 1.5)


@dataclass
class McResult:
    samples: list[MetricsReport]
    seed: int
    sigma_lg: float
    sigma_wfin: float
    clipped: int
    summary: dict[str, tuple[float, float, float]] = field(default_factory=dict)

    @property
    def undefined_skew(self) -> list[str]:
        return [m for m, (_, _, g) in self.summary.items() if math.isnan(g)]

    def column(self, metric: str) -> np.ndarray:
        return np.array([getattr(s, metric) for s in self.samples])


def summarize(samples: Sequence[MetricsReport]) -> dict[str, tuple[float, float, float]]:
    out = {}
    for m in METRICS:
        x = np.array([getattr(s, m) for s in samples], dtype=float)
        std = float(x.std(ddof=1)) if x.size > 1 else 0.0
        out[m] = (float(x.mean()), std, skewness(x))
    return out


def draw_points(cfg: ClampConfig, n: int, sigma_lg: float, sigma_wfin: float, seed: int,
                hull: tuple[float, float, float, float]) -> tuple[list[tuple[float, float]], int]:
    """Gaussian (lg, wfin) draws around POR; sample ``i`` uses substream (seed, i)."""
    lo1, hi1, lo2, hi2 = hull
    pts, clipped = [], 0
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        z = rng.standard_normal(2)
        lg = cfg.por_lg + sigma_lg * z[0]
        w = cfg.por_wfin + sigma_wfin * z[1]
        if not (lo1 <= lg <= hi1 and lo2 <= w <= hi2):
            clipped += 1
        pts.append((float(min(max(lg, lo1), hi1)), float(min(max(w, lo2), hi2))))
    return pts, clipped


def _hull(library: ModelLibrary) -> tuple[float, float, float, float]:
    g = list(library.grids.values())
    return (max(x.axis1_values[0] for x in g), min(x.axis1_values[-1] for x in g),
            max(x.axis2_values[0] for x in g), min(x.axis2_values[-1] for x in g))


def monte_carlo(cfg: ClampConfig, n: int, sigma_lg: float = 0.5, sigma_wfin: float = 0.4,
                seed: int = 2024, library: ModelLibrary | None = None,
                options: SimOptions = SimOptions(), jobs: int = 1) -> McResult:
    if n < 1:
        raise ValueError(f"Monte Carlo sample count n must be >= 1, got {n}")
    if sigma_lg < 0 or sigma_wfin < 0:
        raise ValueError("sigma values must be >= 0")
    library = _library(library)
    pts, clipped = draw_points(cfg, n, sigma_lg, sigma_wfin, seed, _hull(library))
    # identical design points share one simulation
    unique = sorted(set(pts))
    reports = _map_measure([cfg.at(*p) for p in unique], library, options, jobs)
    by_point = dict(zip(unique, reports))
    samples = [by_point[p] for p in pts]
    res = McResult(samples, seed, sigma_lg, sigma_wfin, clipped)
    res.summary = summarize(samples)
    return res


def mc_to_csv(res: McResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "lg_nm", "wfin_nm", *CSV_COLUMNS])
    for k, s in enumerate(res.samples):
        w.writerow([k, repr(s.lg), repr(s.wfin), *(repr(float(v)) for v in s.values())])
    buf.write("# summary\n")
    w.writerow(["metric", "mean", "std", "skewness"])
    for m, col in zip(METRICS, CSV_COLUMNS):
        mean, std, g = res.summary[m]
        w.writerow([col, repr(mean), repr(std), "undefined" if math.isnan(g) else repr(g)])
    buf.write(f"# n={len(res.samples)} seed={res.seed} sigma_lg_nm={res.sigma_lg!r} "
              f"sigma_wfin_nm={res.sigma_wfin!r} clipped={res.clipped}\n")
    return buf.getvalue()
