"""Fit N and P cards on the default lattice and report the per-node errors."""
import argparse
from pathlib import Path

from gcmsim.calibration import DEFAULT_N_ORACLE, DEFAULT_P_ORACLE, calibrate_grid
from gcmsim.grid import write_manifest
from gcmsim.library import DEFAULT_LG, DEFAULT_WFIN


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results/grids")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for params in (DEFAULT_N_ORACLE, DEFAULT_P_ORACLE):
        grid, fits = calibrate_grid(params, DEFAULT_LG, DEFAULT_WFIN)
        path = write_manifest(grid, out, f"grid_{params.polarity.lower()}")
        print(f"{params.polarity}-type -> {path}")
        for pt, fit in fits:
            print(f"  lg {pt.axis1:5.1f}  wfin {pt.axis2:4.1f}  rms_lin {fit.rms_lin:9.3g}%  "
                  f"rms_log {fit.rms_log:9.3g}  evals {fit.evaluations}")


if __name__ == "__main__":
    main()
