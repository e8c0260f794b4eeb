"""General compact model: a rectangular lattice of cards blended by inverse distance.

A query design point picks the four corners of its enclosing lattice cell;
each corner card contributes with weight proportional to 1/distance, with
the Euclidean distance taken in raw nm on both axes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .device import (
    BiasPoint,
    CardTable,
    ModelCard,
    TerminalCharges,
    TerminalCurrents,
    eval_devices,
    read_card,
    write_card,
)

COINCIDENCE_NM = 1e-9


class OutOfHullError(ValueError):
    """Query outside the lattice; the model never extrapolates."""


@dataclass(frozen=True)
class DesignPoint:
    axis1: float
    axis2: float
    labels: tuple[str, str] = ("lg", "wfin")

    def __post_init__(self):
        for name, v in (("axis1", self.axis1), ("axis2", self.axis2)):
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"design point {name}={v} must be finite and > 0")


@dataclass(frozen=True)
class WeightVector:
    nodes: tuple[int, int, int, int]
    weights: tuple[float, float, float, float]

    def __iter__(self):
        return iter(zip(self.nodes, self.weights))


@dataclass(frozen=True)
class ModelGrid:
    axis1_values: tuple[float, ...]
    axis2_values: tuple[float, ...]
    cards: tuple[tuple[ModelCard, ...], ...]
    labels: tuple[str, str] = ("lg", "wfin")

    def __post_init__(self):
        a1 = np.asarray(self.axis1_values, dtype=float)
        a2 = np.asarray(self.axis2_values, dtype=float)
        for name, a in (("axis1", a1), ("axis2", a2)):
            if a.size < 2:
                raise ValueError(f"{name} needs at least two lattice values")
            if not np.all(np.diff(a) > 0):
                raise ValueError(f"{name} values must be strictly ascending")
        if len(self.cards) != a1.size or any(len(row) != a2.size for row in self.cards):
            raise ValueError("card table shape does not match the axes")
        for i, x in enumerate(a1):
            for j, y in enumerate(a2):
                c = self.cards[i][j]
                if abs(c.lg - x) > 1e-9 or abs(c.wfin - y) > 1e-9:
                    raise ValueError(
                        f"card at node ({i},{j}) has (lg, wfin)=({c.lg}, {c.wfin}), "
                        f"expected ({x}, {y})"
                    )
        pols = {c.polarity for row in self.cards for c in row}
        if len(pols) != 1:
            raise ValueError("all cards in a grid must share one polarity")

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.axis1_values), len(self.axis2_values)

    @property
    def polarity(self) -> str:
        return self.cards[0][0].polarity

    @property
    def spacing(self) -> tuple[np.ndarray, np.ndarray]:
        return np.diff(self.axis1_values), np.diff(self.axis2_values)

    def node_index(self, i: int, j: int) -> int:
        return i * len(self.axis2_values) + j

    def node_coords(self, k: int) -> tuple[int, int]:
        return divmod(k, len(self.axis2_values))

    def card(self, k: int) -> ModelCard:
        i, j = self.node_coords(k)
        return self.cards[i][j]

    def contains(self, axis1: float, axis2: float) -> bool:
        return (self.axis1_values[0] <= axis1 <= self.axis1_values[-1]
                and self.axis2_values[0] <= axis2 <= self.axis2_values[-1])

    def point(self, axis1: float, axis2: float) -> DesignPoint:
        return DesignPoint(axis1, axis2, self.labels)

    def nodes(self) -> Iterable[tuple[int, DesignPoint, ModelCard]]:
        for i, x in enumerate(self.axis1_values):
            for j, y in enumerate(self.axis2_values):
                yield self.node_index(i, j), self.point(x, y), self.cards[i][j]


@dataclass(frozen=True)
class GeneralModel:
    query: DesignPoint
    weights: WeightVector
    grid: ModelGrid = field(repr=False)

    def members(self) -> list[tuple[ModelCard, float]]:
        """Corner (card, weight) pairs sorted by node index."""
        return [(self.grid.card(k), w) for k, w in sorted(self.weights)]

    @property
    def polarity(self) -> str:
        return self.grid.polarity


def _cell_index(values: Sequence[float], x: float) -> int:
    # lower-index cell wins on a shared edge
    k = int(np.searchsorted(values, x, side="left")) - 1
    return min(max(k, 0), len(values) - 2)


def locate_and_weigh(grid: ModelGrid, query: DesignPoint) -> GeneralModel:
    """Enclosing-cell corners and normalized inverse-distance weights.

    Corner order is (i, j), (i, j+1), (i+1, j+1), (i+1, j): low/low,
    low/high, high/high, high/low in (axis1, axis2).
    """
    a1, a2 = grid.axis1_values, grid.axis2_values
    for name, v, vals in (("axis1", query.axis1, a1), ("axis2", query.axis2, a2)):
        if not vals[0] <= v <= vals[-1]:
            label = grid.labels[0 if name == "axis1" else 1]
            raise OutOfHullError(
                f"{name} ({label}) = {v} nm is outside the lattice range "
                f"[{vals[0]}, {vals[-1]}] nm"
            )
    i = _cell_index(a1, query.axis1)
    j = _cell_index(a2, query.axis2)
    corners = ((i, j), (i, j + 1), (i + 1, j + 1), (i + 1, j))
    dist = [math.hypot(query.axis1 - a1[ci], query.axis2 - a2[cj]) for ci, cj in corners]
    nodes = tuple(grid.node_index(ci, cj) for ci, cj in corners)
    hit = [k for k, d in enumerate(dist) if d < COINCIDENCE_NM]
    if hit:
        w = [0.0] * 4
        w[hit[0]] = 1.0
    else:
        inv = [1.0 / d for d in dist]
        tot = sum(inv)
        w = [x / tot for x in inv]
    return GeneralModel(query, WeightVector(nodes, tuple(w)), grid)


def corner_distances(gm: GeneralModel) -> tuple[float, ...]:
    g = gm.grid
    out = []
    for k in gm.weights.nodes:
        i, j = g.node_coords(k)
        out.append(math.hypot(gm.query.axis1 - g.axis1_values[i], gm.query.axis2 - g.axis2_values[j]))
    return tuple(out)


def ensemble_eval(gm: GeneralModel, bias: BiasPoint, nfin: float = 1):
    """Weight-sum of the corner cards' terminal currents and charges."""
    mem = gm.members()
    t = CardTable([c for c, _ in mem], [w for _, w in mem], [0] * len(mem), [nfin])
    i, qg, qd, qs = eval_devices(t, bias.vd, bias.vg, bias.vs, bias.vb)
    idv = float(i[0])
    return (TerminalCurrents(idv, 0.0, -idv, 0.0),
            TerminalCharges(float(qg[0]), float(qd[0]), float(qs[0]), 0.0))


@dataclass(frozen=True)
class SeamGap:
    axis: int          # 1 or 2: the axis the edge is perpendicular to
    edge_index: int    # lattice index of the edge along that axis
    segment: int       # cell index along the other axis
    gap: float


def seam_gap(grid: ModelGrid, bias_set: Sequence[BiasPoint], nfin: float = 1) -> list[SeamGap]:
    """Relative drain-current jump across every interior cell edge.

    Each edge is probed at its segment midpoint, a half-spacing*1e-6 to
    either side; the gap is max |dId| / max(|Id|, 1 pA) over ``bias_set``.
    """
    from .device import drain_current

    a = (np.asarray(grid.axis1_values), np.asarray(grid.axis2_values))
    vd = np.array([b.vd for b in bias_set])
    vg = np.array([b.vg for b in bias_set])
    vs = np.array([b.vs for b in bias_set])
    vb = np.array([b.vb for b in bias_set])
    report = []
    for axis in (0, 1):
        edge_vals, other = a[axis], a[1 - axis]
        for k in range(1, len(edge_vals) - 1):
            eps = 0.5 * min(edge_vals[k] - edge_vals[k - 1], edge_vals[k + 1] - edge_vals[k]) * 1e-6
            for seg in range(len(other) - 1):
                mid = 0.5 * (other[seg] + other[seg + 1])
                ids = []
                for side in (-1.0, 1.0):
                    x = edge_vals[k] + side * eps
                    pt = grid.point(x, mid) if axis == 0 else grid.point(mid, x)
                    gm = locate_and_weigh(grid, pt)
                    ids.append(drain_current(gm, vd, vg, vs, vb, nfin))
                denom = np.maximum(np.maximum(np.abs(ids[0]), np.abs(ids[1])), 1e-12)
                gap = float(np.max(np.abs(ids[1] - ids[0]) / denom))
                report.append(SeamGap(axis + 1, k, seg, gap))
    return report


# ---------------------------------------------------------------------------
# manifest files


def write_manifest(grid: ModelGrid, directory: str | Path, stem: str = "grid") -> Path:
    """Write one card file per node plus a manifest listing them row-major."""
    directory = Path(directory)
    card_dir = directory / f"{stem}_cards"
    card_dir.mkdir(parents=True, exist_ok=True)
    lines = [
        "# general-model grid manifest",
        f"labels = {grid.labels[0]} {grid.labels[1]}",
        "axis1 = " + " ".join(repr(float(v)) for v in grid.axis1_values),
        "axis2 = " + " ".join(repr(float(v)) for v in grid.axis2_values),
        "cards:",
    ]
    for k, pt, card in grid.nodes():
        name = f"node_{k:03d}.card"
        write_card(card, card_dir / name,
                   header=f"node {k}: {grid.labels[0]}={pt.axis1} {grid.labels[1]}={pt.axis2}")
        lines.append(f"{card_dir.name}/{name}")
    path = directory / f"{stem}.manifest"
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path: str | Path) -> ModelGrid:
    path = Path(path)
    header: dict[str, str] = {}
    card_paths: list[str] = []
    in_cards = False
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if in_cards:
            card_paths.append(line)
        elif line == "cards:":
            in_cards = True
        elif "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            header[k] = v
        else:
            raise ValueError(f"{path}:{lineno}: unexpected line {line!r}")
    missing = {"labels", "axis1", "axis2"} - set(header)
    if missing:
        raise ValueError(f"{path}: manifest header lacks {sorted(missing)}")
    labels = tuple(header["labels"].split())
    if len(labels) != 2:
        raise ValueError(f"{path}: labels needs exactly two names")
    a1 = tuple(float(x) for x in header["axis1"].split())
    a2 = tuple(float(x) for x in header["axis2"].split())
    if len(card_paths) != len(a1) * len(a2):
        raise ValueError(f"{path}: expected {len(a1) * len(a2)} card paths, found {len(card_paths)}")
    cards = [read_card(path.parent / p) for p in card_paths]
    rows = tuple(tuple(cards[i * len(a2):(i + 1) * len(a2)]) for i in range(len(a1)))
    return ModelGrid(a1, a2, rows, labels)  # type: ignore[arg-type]
