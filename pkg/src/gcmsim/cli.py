"""Command-line entry point: ``gcmsim <subcommand> [options]``.

Exit status: 0 success, 1 validation error, 2 solver failure.  Every run
writes ``run_manifest.txt`` into the output directory with the config
digest and master seed.
"""
from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from pathlib import Path

from . import __version__
from .units import digest, format_kv

OUT_ENV = "GCMSIM_OUT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message} (see --help)")


def parse_range(text: str) -> list[float]:
    """``start:stop:step`` (stop included when it lands within 1e-9), ``a,b,c`` or one value."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"range {text!r} must be start:stop:step")
        start, stop, step = (float(p) for p in parts)
        if step <= 0 or stop < start:
            raise ValueError(f"range {text!r} needs step > 0 and stop >= start")
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + k * step, 9) for k in range(count)]
    return [float(v) for v in text.split(",") if v.strip()]


def parse_point(text: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise ValueError(f"design point {text!r} must be 'lg,wfin' in nm")
    return float(parts[0]), float(parts[1])


def _existing(path: str | None, what: str) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} file not found: {p}")
    return p


def _library(args):
    from .circuit.mna import ModelLibrary
    from .grid import read_manifest
    from .library import calibrated_grid
    from .calibration import DEFAULT_N_ORACLE, DEFAULT_P_ORACLE

    gn = _existing(getattr(args, "grid_n", None), "N grid manifest")
    gp = _existing(getattr(args, "grid_p", None), "P grid manifest")
    return ModelLibrary({
        "N": read_manifest(gn) if gn else calibrated_grid(DEFAULT_N_ORACLE),
        "P": read_manifest(gp) if gp else calibrated_grid(DEFAULT_P_ORACLE),
    })


def _clamp_config(args):
    from .clamp import ClampConfig, read_clamp_config

    p = _existing(args.config, "clamp config")
    return read_clamp_config(p) if p else ClampConfig()


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in r])


# ---------------------------------------------------------------------------
# subcommands; each returns (config text for the digest, seed or None)


def cmd_calibrate(args, out: Path):
    from .calibration import (
        DEFAULT_N_ORACLE, DEFAULT_P_ORACLE, ExtractConfig, calibrate_grid, oracle_to_text,
        read_cgg_csv, read_iv_csv, read_oracle,
    )
    from .grid import DesignPoint, write_manifest

    if args.oracle == "defaults":
        params = DEFAULT_P_ORACLE if args.polarity == "P" else DEFAULT_N_ORACLE
    else:
        params = read_oracle(_existing(args.oracle, "oracle config"))
        if params.polarity != args.polarity:
            params = params.replace(polarity=args.polarity)
    lgs, wfins = parse_range(args.lg), parse_range(args.wfin)
    datasets = {}
    if args.ref_dir:
        ref = _existing(args.ref_dir, "reference directory")
        for lg in lgs:
            for w in wfins:
                iv = ref / f"iv_{lg:g}_{w:g}.csv"
                cg = ref / f"cgg_{lg:g}_{w:g}.csv"
                if iv.exists() and cg.exists():
                    pt = DesignPoint(lg, w)
                    datasets[(lg, w)] = (read_iv_csv(iv, pt, args.vdd, params.polarity), read_cgg_csv(cg))
    config = ExtractConfig(max_evals=args.max_evals)
    grid, fits = calibrate_grid(params, lgs, wfins, args.vdd, config, datasets=datasets)
    stem = f"grid_{params.polarity.lower()}"
    manifest = write_manifest(grid, out, stem)
    _write_csv(out / f"fits_{params.polarity.lower()}.csv",
               ["lg_nm", "wfin_nm", "rms_lin_pct", "rms_log_dec", "evaluations", "converged", "source"],
               [(pt.axis1, pt.axis2, f.rms_lin, f.rms_log, f.evaluations, int(f.converged),
                 "csv" if (pt.axis1, pt.axis2) in datasets else "oracle") for pt, f in fits])
    worst = max(f.rms_lin for _, f in fits)
    print(f"calibrated {grid.shape[0]}x{grid.shape[1]} {params.polarity}-type grid -> {manifest} "
          f"(worst rms_lin {worst:.3g}%)")
    return oracle_to_text(params) + f"lg = {args.lg}\nwfin = {args.wfin}\nvdd = {args.vdd}\n", None


def cmd_characterize(args, out: Path):
    from .device import CHAR_COLUMNS, characterize, read_card
    from .grid import DesignPoint, locate_and_weigh

    if args.card:
        device = read_card(_existing(args.card, "card"))
        label = str(args.card)
    elif args.point:
        lg, w = parse_point(args.point)
        grid = _library(args).grids[args.polarity]
        device = locate_and_weigh(grid, DesignPoint(lg, w, grid.labels))
        label = f"{args.polarity}@{lg:g},{w:g}"
    else:
        raise ValueError("characterize needs --card FILE or --point LG,WFIN")
    rep = characterize(device, args.vdd, args.nfin)
    row = rep.as_row()
    _write_csv(out / "characterize.csv", ["device", *CHAR_COLUMNS, "failures"],
               [(label, *(row[c] for c in CHAR_COLUMNS), ";".join(rep.failures))])
    for c in CHAR_COLUMNS:
        print(f"{c:10s} {row[c]:.6g}")
    for f in rep.failures:
        print(f"warning: {f}")
    return f"device = {label}\nvdd = {args.vdd}\nnfin = {args.nfin}\n", None


def cmd_clamp(args, out: Path):
    from .clamp import METRICS, CSV_COLUMNS, _check_hull, measure, measure_all

    cfg = _clamp_config(args)
    if args.point:
        cfg = cfg.at(*parse_point(args.point))
    lib = _library(args)
    _check_hull(lib, cfg.lg, cfg.wfin)
    if args.metric == "all":
        rep = measure_all(cfg, lib)
        values = dict(zip(METRICS, rep.values()))
        extra = {"recovery_resolved": int(rep.recovery_resolved)}
    else:
        values = {args.metric: measure(cfg, args.metric, lib)}
        extra = {}
    cols = [CSV_COLUMNS[METRICS.index(m)] for m in values]
    _write_csv(out / "clamp.csv", ["lg_nm", "wfin_nm", *cols, *extra, "config_digest"],
               [(cfg.lg, cfg.wfin, *values.values(), *extra.values(), cfg.digest())])
    for m, v in values.items():
        print(f"{m:22s} {v:.6g}")
    return cfg.to_text() + f"metric = {args.metric}\n", None


def cmd_sweep(args, out: Path):
    from .clamp import correlation_matrix, improvements_to_csv, run_sweep, sweep_to_csv, CSV_COLUMNS

    cfg = _clamp_config(args)
    lgs, wfins = parse_range(args.lg), parse_range(args.wfin)
    res = run_sweep(cfg, lgs, wfins, _library(args), jobs=args.jobs)
    (out / "sweep.csv").write_text(sweep_to_csv(res))
    (out / "improvement.csv").write_text(improvements_to_csv(res))
    for lg, w, msg in res.skipped:
        print(f"skipped ({lg:g}, {w:g}): {msg}")
    if len(res.reports) >= 3:
        cm = correlation_matrix(res.reports)
        _write_csv(out / "correlation.csv", ["metric", *CSV_COLUMNS],
                   [(n, *(float(x) for x in row)) for n, row in zip(CSV_COLUMNS, cm.r)])
    print(f"{len(res.reports)} points -> {out / 'sweep.csv'}")
    for m, v in res.improvement.items():
        print(f"improvement {m:22s} {100 * v:.2f}%")
    return cfg.to_text() + f"lg = {args.lg}\nwfin = {args.wfin}\n", None


def cmd_mc(args, out: Path):
    from .clamp import mc_to_csv, monte_carlo

    if args.n < 1:
        raise ValueError(f"--n must be >= 1 (got {args.n}): Monte Carlo needs at least one sample")
    cfg = _clamp_config(args)
    res = monte_carlo(cfg, args.n, args.sigma_lg, args.sigma_wfin, args.seed, _library(args),
                      jobs=args.jobs)
    (out / "mc.csv").write_text(mc_to_csv(res))
    print(f"{args.n} samples ({res.clipped} clipped to the grid hull) -> {out / 'mc.csv'}")
    for m, (mean, std, g) in res.summary.items():
        gs = "undefined" if math.isnan(g) else f"{g:.3f}"
        print(f"{m:22s} mean {mean:.6g}  std {std:.3g}  skew {gs}")
    text = cfg.to_text() + f"n = {args.n}\nsigma_lg = {args.sigma_lg}\nsigma_wfin = {args.sigma_wfin}\n"
    return text, args.seed


def cmd_seam_check(args, out: Path):
    import numpy as np

    from .device import BiasPoint
    from .grid import seam_gap

    lib = _library(args)
    grid = lib.grids[args.polarity]
    s = 1.0 if args.polarity == "N" else -1.0
    vg = np.linspace(0.0, args.vdd, 7)
    bias = [BiasPoint(s * vd, s * g) for vd in (0.05, args.vdd) for g in vg]
    gaps = seam_gap(grid, bias)
    _write_csv(out / "seam.csv", ["axis", "edge_index", "segment", "gap"],
               [(g.axis, g.edge_index, g.segment, g.gap) for g in gaps])
    worst = max((g.gap for g in gaps), default=0.0)
    print(f"{len(gaps)} seam probes, worst relative gap {worst:.3g} -> {out / 'seam.csv'}")
    return f"polarity = {args.polarity}\nvdd = {args.vdd}\n", None


def cmd_simulate(args, out: Path):
    from .circuit.mna import Circuit, ModelLibrary
    from .circuit.netlist import parse_netlist

    path = _existing(args.netlist, "netlist")
    text = path.read_text()
    net = parse_netlist(text)
    needs_grid = any(isinstance(m.model, str) and m.model.lower().startswith("gcm") for m in net.mosfets)
    lib = _library(args) if needs_grid else ModelLibrary()
    lib.base_dir = path.parent
    circ = Circuit(net, lib)
    analyses = net.analyses or [("op",)]
    for an in analyses:
        if an[0] == "op":
            op = circ.solve_dc()
            rows = [(f"v({k})", v) for k, v in op.voltages.items()] + \
                   [(f"i({k})", v) for k, v in op.currents.items()]
            _write_csv(out / "op.csv", ["quantity", "value"], rows)
            print(f"operating point ({op.method}, {op.iterations} iterations) -> {out / 'op.csv'}")
        else:
            res = circ.solve_transient(an[1], uic=args.uic)
            res.to_csv(out / "tran.csv")
            print(f"transient: {len(res.times)} points, {res.rejected_steps} rejected steps "
                  f"-> {out / 'tran.csv'}")
    return text, None


COMMANDS = {
    "calibrate": cmd_calibrate,
    "characterize": cmd_characterize,
    "clamp": cmd_clamp,
    "sweep": cmd_sweep,
    "mc": cmd_mc,
    "seam-check": cmd_seam_check,
    "simulate": cmd_simulate,
}


def build_parser() -> argparse.ArgumentParser:
    from .clamp import METRICS

    p = _Parser(prog="gcmsim", description="General compact model and ESD clamp toolkit.")
    p.add_argument("--version", action="version", version=f"gcmsim {__version__}")
    p.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./gcmsim_out)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def grids(sp):
        sp.add_argument("--grid-n", help="N-type grid manifest (default: built-in calibrated grid)")
        sp.add_argument("--grid-p", help="P-type grid manifest (default: built-in calibrated grid)")

    sp = sub.add_parser("calibrate", help="fit cards at every lattice node")
    sp.add_argument("--oracle", default="defaults", help="'defaults' or an oracle key=value file")
    sp.add_argument("--polarity", choices=("N", "P"), default="N")
    sp.add_argument("--lg", default="14.5:18.5:1.0", help="start:stop:step or a,b,c (nm)")
    sp.add_argument("--wfin", default="4.1:7.1:1.0", help="start:stop:step or a,b,c (nm)")
    sp.add_argument("--vdd", type=float, default=0.75)
    sp.add_argument("--ref-dir", help="directory of iv_<lg>_<wfin>.csv / cgg_<lg>_<wfin>.csv overrides")
    sp.add_argument("--max-evals", type=int, default=2000)

    sp = sub.add_parser("characterize", help="figures of merit of a card or grid point")
    sp.add_argument("--card")
    sp.add_argument("--point", help="lg,wfin in nm (general model)")
    sp.add_argument("--polarity", choices=("N", "P"), default="N")
    sp.add_argument("--vdd", type=float, default=0.75)
    sp.add_argument("--nfin", type=float, default=1.0)
    grids(sp)

    sp = sub.add_parser("clamp", help="ESD clamp metrics at one design point")
    sp.add_argument("--config", help="clamp key=value config file")
    sp.add_argument("--point", help="lg,wfin in nm (default: config design point)")
    sp.add_argument("--metric", choices=("all",) + METRICS, default="all")
    grids(sp)

    sp = sub.add_parser("sweep", help="clamp metrics over an (lg, wfin) sweep")
    sp.add_argument("--config")
    sp.add_argument("--lg", default="14.5:18.5:1.0")
    sp.add_argument("--wfin", default="4.1:7.1:1.0")
    sp.add_argument("--jobs", type=int, default=1)
    grids(sp)

    sp = sub.add_parser("mc", help="Monte Carlo over lg/wfin variation at POR")
    sp.add_argument("--config")
    sp.add_argument("--n", type=int, default=500)
    sp.add_argument("--sigma-lg", type=float, default=0.5)
    sp.add_argument("--sigma-wfin", type=float, default=0.4)
    sp.add_argument("--seed", type=int, default=2024)
    sp.add_argument("--jobs", type=int, default=1)
    grids(sp)

    sp = sub.add_parser("seam-check", help="current jumps across grid cell edges")
    sp.add_argument("--polarity", choices=("N", "P"), default="N")
    sp.add_argument("--vdd", type=float, default=0.75)
    grids(sp)

    sp = sub.add_parser("simulate", help="run a netlist (.op / .tran)")
    sp.add_argument("netlist")
    sp.add_argument("--uic", action="store_true", help="start transients from zero state")
    grids(sp)
    return p


def _write_run_manifest(out: Path, command: str, argv: list[str], config_text: str, seed) -> None:
    items = {
        "command": command,
        "argv": " ".join(argv),
        "config_digest": digest(config_text),
        "seed": "none" if seed is None else seed,
        "version": __version__,
    }
    (out / "run_manifest.txt").write_text(format_kv(items))


def run(argv: list[str] | None = None) -> int:
    from .circuit.mna import SimulationError

    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("gcmsim: a subcommand is required (see --help)")
        out = Path(args.out or os.environ.get(OUT_ENV) or "gcmsim_out")
        out.mkdir(parents=True, exist_ok=True)
        config_text, seed = COMMANDS[args.command](args, out)
        _write_run_manifest(out, args.command, argv, config_text, seed)
        return 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SimulationError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
