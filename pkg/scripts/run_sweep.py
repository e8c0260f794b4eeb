"""Clamp metrics over the default (lg, wfin) lattice, with trend and correlation summary."""
import argparse
from pathlib import Path

import numpy as np

from gcmsim.clamp import ClampConfig, correlation_matrix, improvements_to_csv, run_sweep, sweep_to_csv
from gcmsim.library import DEFAULT_LG, DEFAULT_WFIN, default_library


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results/sweep")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    lgs, ws = list(DEFAULT_LG), list(DEFAULT_WFIN)
    res = run_sweep(ClampConfig(), lgs, ws, default_library(), jobs=args.jobs)
    (out / "sweep.csv").write_text(sweep_to_csv(res))
    (out / "improvement.csv").write_text(improvements_to_csv(res))

    for metric in ("leakage", "clamp_voltage"):
        g = res.grid(metric, lgs, ws)
        print(f"{metric}: falls with lg {bool(np.all(np.diff(g, axis=0) < 0))}, "
              f"falls with wfin {bool(np.all(np.diff(g, axis=1) < 0))}")
    cm = correlation_matrix(res.reports)
    print("correlation (" + ", ".join(cm.names) + ")")
    print(np.array2string(cm.r, precision=3))
    for m, v in res.improvement.items():
        print(f"best vs POR {m:22s} {100 * v:6.1f}%")


if __name__ == "__main__":
    main()
