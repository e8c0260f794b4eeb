"""Modified nodal analysis: Newton DC operating point and adaptive transient.

Unknowns are the non-ground node voltages followed by one branch current
per voltage source (positive from the + node through the source to the
- node).  Every element contributes a static current ``i(x, t)`` and a
charge ``q(x)`` at its terminals; the circuit equations are

    i(x, t) + dq(x)/dt = 0

Transistor conductances and capacitances come from finite differences of
the device model at its own terminals, so any card or general model can be
plugged in without derivatives.  Charges are integrated directly
(trapezoidal, with backward Euler on the first step after every source
breakpoint).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..device import CardTable, ModelCard, eval_members, read_card, members_of
from ..grid import DesignPoint, GeneralModel, ModelGrid, locate_and_weigh
from .netlist import (
    GROUND,
    Capacitor,
    CurrentSource,
    Mosfet,
    Netlist,
    Resistor,
    VoltageSource,
    eval_stimulus,
    terminals,
)


class SimulationError(RuntimeError):
    pass


class SingularCircuitError(SimulationError):
    def __init__(self, nodes):
        self.nodes = list(nodes)
        super().__init__(f"singular circuit: no DC path to ground from node(s) {self.nodes}")


class ConvergenceError(SimulationError):
    def __init__(self, message, x=None, time=None):
        self.x = x
        self.time = time
        super().__init__(message)


@dataclass(frozen=True)
class SimOptions:
    vntol: float = 1e-6
    reltol: float = 1e-3
    abstol_i: float = 1e-9
    fd_rel: float = 1e-6
    fd_abs: float = 1e-9
    max_newton_dc: int = 100
    max_newton_tran: int = 50
    vlimit: float = 1.0
    gmin_steps: tuple[float, ...] = tuple(10.0 ** -k for k in range(3, 13))
    source_steps: int = 10
    # transient
    lte_reltol: float = 1e-3
    lte_abstol: float = 1e-6
    shrink: float = 0.5
    grow: float = 1.5
    min_step: float = 1e-15
    max_step: float = math.inf
    first_step_frac: float = 1e-2


class ModelLibrary:
    """Resolves netlist model references to cards and general models.

    ``grids`` maps polarity ('N'/'P') to a ``ModelGrid``; ``gcm``/``gcmn``
    bind to the N grid and ``gcmp`` to the P grid.  Any other model name
    is read as a card file relative to ``base_dir``.
    """

    def __init__(self, grids: dict[str, ModelGrid] | None = None, base_dir: str | Path = "."):
        self.grids = dict(grids or {})
        self.base_dir = Path(base_dir)

    def bind(self, m: Mosfet):
        model = m.model
        if isinstance(model, (ModelCard, GeneralModel)):
            return model
        name = str(model)
        low = name.lower()
        if low in ("gcm", "gcmn", "gcmp"):
            pol = "P" if low == "gcmp" else "N"
            if pol not in self.grids:
                raise SimulationError(f"{m.name}: no {pol}-type model grid loaded for {name!r}")
            grid = self.grids[pol]
            return locate_and_weigh(grid, DesignPoint(m.lg, m.wfin, grid.labels))
        card = read_card(self.base_dir / name)
        if m.lg is not None or m.wfin is not None:
            card = card.replace(lg=m.lg or card.lg, wfin=m.wfin or card.wfin)
        return card


@dataclass
class OperatingPoint:
    node_names: list[str]
    branch_names: list[str]
    x: np.ndarray
    residual: float
    iterations: int
    method: str

    @property
    def voltages(self) -> dict[str, float]:
        n = len(self.node_names)
        return dict(zip(self.node_names, map(float, self.x[:n])))

    @property
    def currents(self) -> dict[str, float]:
        n = len(self.node_names)
        return dict(zip(self.branch_names, map(float, self.x[n:])))


@dataclass
class TransientResult:
    node_names: list[str]
    branch_names: list[str]
    times: np.ndarray
    x: np.ndarray
    residuals: np.ndarray
    newton_iterations: int = 0
    rejected_steps: int = 0
    stats: dict = field(default_factory=dict)

    def v(self, node: str) -> np.ndarray:
        if node == GROUND:
            return np.zeros_like(self.times)
        return self.x[:, self.node_names.index(node.lower())]

    def i(self, source: str) -> np.ndarray:
        k = [b.lower() for b in self.branch_names].index(source.lower())
        return self.x[:, len(self.node_names) + k]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"v({n})" for n in self.node_names] +
                       [f"i({b})" for b in self.branch_names])
            for t, row in zip(self.times, self.x):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


class Circuit:
    """A netlist compiled to index arrays and constant matrices."""

    def __init__(self, netlist: Netlist, library: ModelLibrary | None = None,
                 options: SimOptions = SimOptions()):
        netlist.validate()
        self.netlist = netlist
        self.options = options
        self.node_names = netlist.nodes
        self.index = {name: k for k, name in enumerate(self.node_names)}
        n = self.n = len(self.node_names)
        vsrc = netlist.voltage_sources
        self.m = len(vsrc)
        self.size = N = n + self.m
        self.gnd = N  # extended index for ground
        self.branch_names = [v.name for v in vsrc]

        def ix(node):
            return self.gnd if node == GROUND else self.index[node]

        G = np.zeros((N + 1, N + 1))
        C = np.zeros((N + 1, N + 1))
        self.isrc = []
        self.vsrc = []
        mos = []
        for el in netlist.elements:
            if isinstance(el, Resistor):
                a, b = ix(el.n1), ix(el.n2)
                g = 1.0 / el.value
                G[a, a] += g
                G[b, b] += g
                G[a, b] -= g
                G[b, a] -= g
            elif isinstance(el, Capacitor):
                a, b = ix(el.n1), ix(el.n2)
                c = el.value
                C[a, a] += c
                C[b, b] += c
                C[a, b] -= c
                C[b, a] -= c
            elif isinstance(el, CurrentSource):
                self.isrc.append((ix(el.npos), ix(el.nneg), el.stim))
            elif isinstance(el, VoltageSource):
                k = n + len(self.vsrc)
                a, b = ix(el.npos), ix(el.nneg)
                G[a, k] += 1.0
                G[b, k] -= 1.0
                G[k, a] += 1.0
                G[k, b] -= 1.0
                self.vsrc.append((k, el.stim))
            elif isinstance(el, Mosfet):
                mos.append(el)
        self.G = G[:N, :N].copy()
        self.C = C[:N, :N].copy()

        library = library or ModelLibrary()
        self.mos = mos
        self.mos_models = [library.bind(m) for m in mos]
        self.mos_term = np.array([[ix(m.d), ix(m.g), ix(m.s), ix(m.b)] for m in mos],
                                 dtype=np.intp).reshape(-1, 4)
        cards, weights, owner = [], [], []
        for k, model in enumerate(self.mos_models):
            for card, w in members_of(model):
                cards.append(card)
                weights.append(w)
                owner.append(k)
        self.table = CardTable(cards, weights, owner, [m.nfin for m in mos]) if mos else None
        self._breakpoints = sorted({t for el in netlist.elements
                                    if isinstance(el, (VoltageSource, CurrentSource))
                                    for t in el.stim.breakpoints()})
        self._build_stamps()

    # -- stamping helpers ---------------------------------------------------

    def _build_stamps(self):
        N1 = self.size + 1
        term = self.mos_term
        M = term.shape[0]
        # current rows: drain (+id), source (-id); charge rows: g, d, s
        cur_rows = np.concatenate([term[:, 0], term[:, 2]]) if M else np.zeros(0, np.intp)
        self._cur_rows = cur_rows
        self._q_rows = np.concatenate([term[:, 1], term[:, 0], term[:, 2]]) if M else np.zeros(0, np.intp)
        jr, jc, qr, qc = [], [], [], []
        for k in range(4):
            jr.append(cur_rows)
            jc.append(np.concatenate([term[:, k], term[:, k]]))
            qr.append(self._q_rows)
            qc.append(np.concatenate([term[:, k]] * 3))
        self._jflat = (np.concatenate(jr) * N1 + np.concatenate(jc)) if M else None
        self._qflat = (np.concatenate(qr) * N1 + np.concatenate(qc)) if M else None

    def connectivity_check(self, include_caps: bool = False) -> None:
        """Raise SingularCircuitError for nodes with no conductive path to ground."""
        parent = list(range(self.n + 1))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        def union(a, b):
            parent[find(a)] = find(b)

        g = self.n

        def ix(node):
            return g if node == GROUND else self.index[node]

        for el in self.netlist.elements:
            if isinstance(el, (Resistor, VoltageSource)) or (include_caps and isinstance(el, Capacitor)):
                a, b = terminals(el)
                union(ix(a), ix(b))
            elif isinstance(el, Mosfet):
                union(ix(el.d), ix(el.s))
                if include_caps:
                    union(ix(el.g), ix(el.s))
        floating = [name for name, k in self.index.items() if find(k) != find(g)]
        if floating:
            raise SingularCircuitError(floating)

    def source_values(self, t: float, scale: float = 1.0):
        return ([scale * eval_stimulus(s, t) for _, s in self.vsrc],
                [scale * eval_stimulus(s, t) for _, _, s in self.isrc])

    def evaluate(self, x: np.ndarray, t: float, jac: bool = True, scale: float = 1.0,
                 gmin: float = 0.0):
        """Static residual, terminal charges and (optionally) their Jacobians."""
        N = self.size
        N1 = N + 1
        r = self.G @ x
        q = self.C @ x
        vs, cs = self.source_values(t, scale)
        for (k, _), val in zip(self.vsrc, vs):
            r[k] -= val
        rext = np.zeros(N1)
        for (a, b, _), val in zip(self.isrc, cs):
            rext[a] += val
            rext[b] -= val
        r += rext[:N]
        if gmin:
            r[: self.n] += gmin * x[: self.n]
        J = Cj = None
        if jac:
            J = self.G.copy()
            Cj = self.C.copy()
            if gmin:
                J[np.arange(self.n), np.arange(self.n)] += gmin
        if self.table is None:
            return r, q, J, Cj
        xe = np.append(x, 0.0)
        vt = xe[self.mos_term]  # (M, 4)
        t_ = self.table
        own = t_.owner
        base = vt[own]  # (P, 4)
        if jac:
            opt = self.options
            h = np.maximum(opt.fd_rel * np.abs(vt), opt.fd_abs)  # (M, 4)
            V = np.broadcast_to(base, (5,) + base.shape).copy()
            for k in range(4):
                V[k + 1, :, k] += h[own, k]
        else:
            V = base[None]
        i, qg, qd, qs = eval_members(t_, V[..., 0], V[..., 1], V[..., 2], V[..., 3])
        i = t_.reduce(i)
        qg = t_.reduce(qg)
        qd = t_.reduce(qd)
        qs = t_.reduce(qs)
        cur = np.concatenate([i[0], -i[0]])
        r += np.bincount(self._cur_rows, cur, minlength=N1)[:N]
        qv = np.concatenate([qg[0], qd[0], qs[0]])
        q += np.bincount(self._q_rows, qv, minlength=N1)[:N]
        if jac:
            hm = h.T  # (4, M)
            di = (i[1:] - i[0]) / hm
            dcur = np.concatenate([di, -di], axis=1).ravel()
            J += np.bincount(self._jflat, dcur, minlength=N1 * N1).reshape(N1, N1)[:N, :N]
            dq = np.concatenate([(qg[1:] - qg[0]) / hm, (qd[1:] - qd[0]) / hm,
                                 (qs[1:] - qs[0]) / hm], axis=1).ravel()
            Cj += np.bincount(self._qflat, dq, minlength=N1 * N1).reshape(N1, N1)[:N, :N]
        return r, q, J, Cj

    def mos_currents(self, X: np.ndarray) -> np.ndarray:
        """Drain currents (T, M) of every transistor for solution rows ``X``."""
        if self.table is None:
            return np.zeros((X.shape[0], 0))
        xe = np.concatenate([X, np.zeros((X.shape[0], 1))], axis=1)
        vt = xe[:, self.mos_term]  # (T, M, 4)
        base = vt[:, self.table.owner]
        i, *_ = eval_members(self.table, base[..., 0], base[..., 1], base[..., 2], base[..., 3],
                             charges=False)
        return self.table.reduce(i)

    def mos_index(self, name: str) -> int:
        for k, m in enumerate(self.mos):
            if m.name.lower() == name.lower():
                return k
        raise KeyError(name)

    # -- Newton -------------------------------------------------------------

    def _converged_step(self, dx, x):
        n = self.n
        o = self.options
        dv = np.abs(dx[:n])
        return bool(np.all(dv <= o.vntol + o.reltol * np.abs(x[:n])))

    def _residual_ok(self, r):
        return bool(np.all(np.abs(r) <= self.options.abstol_i))

    def newton(self, x0: np.ndarray, residual_fn: Callable, max_iter: int):
        """Solve residual_fn(x) = 0; returns (x, iterations, |r|max) or raises."""
        x = x0.copy()
        for it in range(1, max_iter + 1):
            r, J = residual_fn(x)
            if not np.all(np.isfinite(r)):
                raise ConvergenceError("non-finite residual", x)
            try:
                dx = np.linalg.solve(J, -r)
            except np.linalg.LinAlgError:
                self._raise_singular(J)
            if not np.all(np.isfinite(dx)):
                self._raise_singular(J)
            if self._residual_ok(r) and self._converged_step(dx, x):
                return x, it, float(np.max(np.abs(r))) if r.size else 0.0
            big = np.max(np.abs(dx[: self.n])) if self.n else 0.0
            if big > self.options.vlimit:
                dx *= self.options.vlimit / big
            x = x + dx
        raise ConvergenceError(f"Newton did not converge in {max_iter} iterations", x)

    def _raise_singular(self, J):
        bad = [self.node_names[k] for k in range(self.n)
               if not np.any(J[k]) or not np.any(J[:, k])]
        raise SingularCircuitError(bad or self.node_names)

    # -- DC -----------------------------------------------------------------

    def solve_dc(self, t: float = 0.0, x0: np.ndarray | None = None) -> OperatingPoint:
        """Newton, then gmin stepping, then source stepping."""
        self.connectivity_check()
        x0 = np.zeros(self.size) if x0 is None else np.asarray(x0, dtype=float)
        o = self.options

        def fn(scale=1.0, gmin=0.0):
            def f(x):
                r, _, J, _ = self.evaluate(x, t, True, scale, gmin)
                return r, J
            return f

        total = 0
        try:
            x, it, res = self.newton(x0, fn(), o.max_newton_dc)
            return OperatingPoint(self.node_names, self.branch_names, x, res, it, "newton")
        except ConvergenceError as exc:
            last = exc.x
        try:
            x = x0
            for g in o.gmin_steps:
                x, it, _ = self.newton(x, fn(gmin=g), o.max_newton_dc)
                total += it
            x, it, res = self.newton(x, fn(), o.max_newton_dc)
            return OperatingPoint(self.node_names, self.branch_names, x, res, total + it, "gmin")
        except ConvergenceError as exc:
            last = exc.x
        try:
            x = np.zeros(self.size)
            for k in range(1, o.source_steps + 1):
                x, it, res = self.newton(x, fn(scale=k / o.source_steps), o.max_newton_dc)
                total += it
            return OperatingPoint(self.node_names, self.branch_names, x, res, total, "source")
        except ConvergenceError as exc:
            last = exc.x
        raise ConvergenceError("DC operating point did not converge after gmin and source stepping", last)

    # -- transient ----------------------------------------------------------

    def solve_transient(self, t_stop: float, x0: np.ndarray | None = None, uic: bool = False,
                        extra_breakpoints=()) -> TransientResult:
        """Adaptive trapezoidal integration from t=0 to ``t_stop``.

        With ``uic`` the run starts from ``x0`` (default all zero) instead of
        the DC operating point.
        """
        if not t_stop > 0:
            raise ValueError("t_stop must be positive")
        o = self.options
        if uic:
            self.connectivity_check(include_caps=True)
            x = np.zeros(self.size) if x0 is None else np.asarray(x0, dtype=float).copy()
            # consistent start: charges stay at their initial values over a
            # min_step, source-driven nodes jump to the source value
            _, q0, _, _ = self.evaluate(x, 0.0, jac=False)
            a0 = 1.0 / o.min_step

            def f0(xv):
                r_, q_, J_, C_ = self.evaluate(xv, 0.0, True)
                return r_ + a0 * (q_ - q0), J_ + a0 * C_

            x, _, res0 = self.newton(x, f0, o.max_newton_dc)
            r, q, _, _ = self.evaluate(x, 0.0, jac=False)
        else:
            op = self.solve_dc(0.0, x0)
            x = op.x
            r, q, _, _ = self.evaluate(x, 0.0, jac=False)
            res0 = op.residual
        # charge derivative consistent with the initial state
        qdot = -r
        bps = sorted({b for b in list(self._breakpoints) + list(extra_breakpoints) if 0 < b < t_stop})
        bps.append(t_stop)
        times = [0.0]
        xs = [x.copy()]
        residuals = [res0]
        hist_t = [0.0]
        hist_v = [x[: self.n].copy()]
        t = 0.0
        bp_i = 0
        h = min(o.first_step_frac * bps[0], o.max_step)
        after_bp = True
        n_newton = 0
        n_reject = 0
        while t < t_stop * (1 - 1e-12):
            while bps[bp_i] <= t * (1 + 1e-12) + 1e-30:
                bp_i += 1
            nxt = bps[bp_i]
            h = min(h, o.max_step)
            if t + h >= nxt * (1 - 1e-12):
                h = nxt - t
            elif t + 1.5 * h > nxt:
                h = 0.5 * (nxt - t)
            if h < o.min_step:
                raise ConvergenceError(f"time step underflow at t={t:.6g} s", x, time=t)
            be = after_bp or len(hist_t) < 2
            a = 1.0 / h if be else 2.0 / h
            qdot_prev = qdot
            q_prev = q
            t_new = t + h

            def fn(xv, t_new=t_new, a=a, be=be):
                r_, q_, J_, C_ = self.evaluate(xv, t_new, True)
                qd = a * (q_ - q_prev) - (0.0 if be else qdot_prev)
                return r_ + qd, J_ + a * C_

            if len(hist_t) >= 2:
                slope = (hist_v[-1] - hist_v[-2]) / (hist_t[-1] - hist_t[-2])
                guess = x.copy()
                guess[: self.n] += slope * h
            else:
                guess = x
            try:
                x_new, it, res = self.newton(guess, fn, o.max_newton_tran)
            except (ConvergenceError, SingularCircuitError):
                n_reject += 1
                h *= o.shrink
                continue
            n_newton += it
            v_new = x_new[: self.n]
            ratio = self._lte_ratio(hist_t, hist_v, t_new, v_new, be)
            if ratio > 1.0:
                n_reject += 1
                h *= o.shrink
                continue
            r_new, q_new, _, _ = self.evaluate(x_new, t_new, jac=False)
            qdot = (a * (q_new - q_prev) - (0.0 if be else qdot_prev))
            q = q_new
            x = x_new
            t = t_new
            times.append(t)
            xs.append(x.copy())
            residuals.append(res)
            hit_bp = abs(t - nxt) <= 1e-12 * max(nxt, 1e-30)
            if hit_bp:
                hist_t = [t]
                hist_v = [v_new.copy()]
                after_bp = True
                h = min(h, o.first_step_frac * (self._next_gap(bps, t)))
                h = max(h, o.min_step)
            else:
                hist_t = (hist_t + [t])[-4:]
                hist_v = (hist_v + [v_new.copy()])[-4:]
                after_bp = False
                if ratio < (1.0 / o.grow) ** 3:
                    h *= o.grow
        return TransientResult(self.node_names, self.branch_names, np.array(times),
                               np.array(xs), np.array(residuals), n_newton, n_reject,
                               {"steps": len(times) - 1})

    @staticmethod
    def _next_gap(bps, t):
        for b in bps:
            if b > t * (1 + 1e-12):
                return b - t
        return bps[-1]

    def _lte_ratio(self, hist_t, hist_v, t_new, v_new, be) -> float:
        """Max over nodes of estimated LTE / tolerance (0 when history is short)."""
        o = self.options
        ts = hist_t + [t_new]
        vs = hist_v + [v_new]
        if be or len(ts) < 4:
            if len(ts) < 3:
                return 0.0
            # second divided difference -> BE error h^2/2 * x''
            (t0, t1, t2), (v0, v1, v2) = ts[-3:], vs[-3:]
            dd2 = ((v2 - v1) / (t2 - t1) - (v1 - v0) / (t1 - t0)) / (t2 - t0)
            h = t2 - t1
            lte = np.abs(dd2) * h * h if be else np.zeros_like(v2)
        else:
            t0, t1, t2, t3 = ts[-4:]
            v0, v1, v2, v3 = vs[-4:]
            d01 = (v1 - v0) / (t1 - t0)
            d12 = (v2 - v1) / (t2 - t1)
            d23 = (v3 - v2) / (t3 - t2)
            d012 = (d12 - d01) / (t2 - t0)
            d123 = (d23 - d12) / (t3 - t1)
            dd3 = (d123 - d012) / (t3 - t0)  # x'''/6
            h = t3 - t2
            lte = np.abs(dd3) * 0.5 * h ** 3  # h^3/12 * x'''
        tol = o.lte_reltol * np.maximum(np.abs(v_new), np.abs(vs[-2])) + o.lte_abstol
        return float(np.max(lte / tol)) if lte.size else 0.0


def solve_dc(netlist: Netlist, library: ModelLibrary | None = None,
             options: SimOptions = SimOptions()) -> OperatingPoint:
    return Circuit(netlist, library, options).solve_dc()


def solve_transient(netlist: Netlist, t_stop: float, library: ModelLibrary | None = None,
                    options: SimOptions = SimOptions(), uic: bool = False) -> TransientResult:
    return Circuit(netlist, library, options).solve_transient(t_stop, uic=uic)
