"""Default N/P model grids calibrated against the built-in oracles.

Calibration takes a few seconds per grid, so results are memoized per
process and, when ``GCMSIM_CACHE`` names a directory, written there as
manifests and reused on later runs.
"""
from __future__ import annotations

import os
from functools import lru_cache
from pathlib import Path

from .calibration import (
    DEFAULT_N_ORACLE,
    DEFAULT_P_ORACLE,
    ExtractConfig,
    OracleParams,
    bias_grid,
    calibrate_grid,
    oracle_to_text,
)
from .circuit.mna import ModelLibrary
from .grid import ModelGrid, read_manifest, write_manifest
from .units import digest

DEFAULT_LG = (14.5, 15.5, 16.5, 17.5, 18.5)
DEFAULT_WFIN = (4.1, 5.1, 6.1, 7.1)
DEFAULT_VDD = 0.75


def _cache_dir() -> Path | None:
    d = os.environ.get("GCMSIM_CACHE")
    return Path(d) if d else None


@lru_cache(maxsize=8)
def calibrated_grid(params: OracleParams, axis1: tuple[float, ...] = DEFAULT_LG,
                    axis2: tuple[float, ...] = DEFAULT_WFIN, vdd: float = DEFAULT_VDD) -> ModelGrid:
    # the key covers everything that changes the fitted cards
    recipe = repr((axis1, axis2, vdd, ExtractConfig(), [v.tolist() for v in bias_grid(vdd)]))
    key = digest(oracle_to_text(params) + recipe)
    cache = _cache_dir()
    if cache is not None:
        manifest = cache / f"grid_{key}.manifest"
        if manifest.exists():
            return read_manifest(manifest)
    grid, _ = calibrate_grid(params, axis1, axis2, vdd)
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
        write_manifest(grid, cache, f"grid_{key}")
    return grid


def default_library() -> ModelLibrary:
    return ModelLibrary({"N": calibrated_grid(DEFAULT_N_ORACLE), "P": calibrated_grid(DEFAULT_P_ORACLE)})
