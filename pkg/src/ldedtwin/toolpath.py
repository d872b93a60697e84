"""Motion segments and zigzag raster generation over cell footprints."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .session import fmt

DEPOSIT = "DEPOSIT"
MACHINE = "MACHINE"


@dataclass(frozen=True)
class Segment:
    mode: str
    start: tuple
    end: tuple
    laser_on: bool
    power: float
    feed: float
    pass_index: int = -1  # -1 for connector moves

    def __post_init__(self):
        if self.mode not in (DEPOSIT, MACHINE):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not self.laser_on and self.power != 0:
            raise ValueError("power must be 0 when the laser is off")

    @property
    def midpoint(self) -> tuple:
        return tuple((a + b) / 2 for a, b in zip(self.start, self.end))

    @property
    def length(self) -> float:
        return math.dist(self.start, self.end)


@dataclass(frozen=True)
class Footprint:
    """A set of (i, j) cells on a regular xy grid."""

    cells: frozenset
    origin: tuple  # (x0, y0) mm
    cell_size: float

    def bounds(self) -> tuple:
        ii = [c[0] for c in self.cells]
        jj = [c[1] for c in self.cells]
        s = self.cell_size
        x0, y0 = self.origin
        return (x0 + min(ii) * s, y0 + min(jj) * s, x0 + (max(ii) + 1) * s, y0 + (max(jj) + 1) * s)

    def contains(self, x: float, y: float) -> bool:
        i = math.floor((x - self.origin[0]) / self.cell_size)
        j = math.floor((y - self.origin[1]) / self.cell_size)
        return (i, j) in self.cells


def pass_ys(ymin: float, ymax: float, hatch: float) -> list:
    """Pass centerlines: ceil(extent/hatch) passes at half-hatch offsets."""
    if hatch <= 0:
        raise ValueError("hatch must be > 0")
    extent = ymax - ymin
    n = max(1, math.ceil(extent / hatch - 1e-9))
    ys = []
    for p in range(n):
        y = ymin + (p + 0.5) * hatch
        if y >= ymax:
            # last, partial strip
            y = (ymin + p * hatch + ymax) / 2
        ys.append(y)
    return ys


def raster(fp: Footprint, hatch: float, z: float, mode: str, power: float, feed: float,
           laser_inside: bool = True) -> list:
    """Zigzag passes along x over the footprint's bounding box.

    With ``laser_inside`` the laser is on exactly over footprint cells;
    otherwise every segment is laser-off (machining).  Consecutive passes
    alternate direction and are joined by laser-off connectors.
    """
    if not fp.cells:
        return []
    xmin, ymin, xmax, ymax = fp.bounds()
    s = fp.cell_size
    x0, y0 = fp.origin
    i_lo = round((xmin - x0) / s)
    i_hi = round((xmax - x0) / s)
    segs = []
    prev_end = None
    for p, y in enumerate(pass_ys(ymin, ymax, hatch)):
        j = math.floor((y - y0) / s)
        inside = [(i, j) in fp.cells for i in range(i_lo, i_hi)]
        # runs of equal inside-state along +x
        runs = []
        start = 0
        for k in range(1, len(inside) + 1):
            if k == len(inside) or inside[k] != inside[start]:
                runs.append((x0 + (i_lo + start) * s, x0 + (i_lo + k) * s, inside[start]))
                start = k
        if p % 2:
            runs = [(b, a, st) for a, b, st in reversed(runs)]
        first = (runs[0][0], y, z)
        if prev_end is not None:
            segs.append(Segment(mode, prev_end, first, False, 0.0, feed))
        for a, b, st in runs:
            on = bool(st and laser_inside)
            segs.append(Segment(mode, (a, y, z), (b, y, z), on, power if on else 0.0, feed, p))
        prev_end = (runs[-1][1], y, z)
    return segs


def count_passes(segments) -> int:
    return len({s.pass_index for s in segments if s.pass_index >= 0})


CSV_HEADER = ["seq", "mode", "x0", "y0", "z0", "x1", "y1", "z1", "laser_on", "power_w", "feed_mm_s"]


def write_toolpath_csv(segments, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for i, s in enumerate(segments):
            w.writerow([i, s.mode, *map(fmt, s.start), *map(fmt, s.end), int(s.laser_on), fmt(s.power), fmt(s.feed)])


def read_toolpath_csv(path) -> list:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header")
        for row in reader:
            if not row:
                continue
            v = [float(x) for x in row[2:8]]
            out.append(Segment(row[1], tuple(v[:3]), tuple(v[3:]), row[8] == "1", float(row[9]), float(row[10])))
    return out


def footprint_from_points(xy, cell_size: float, origin=(0.0, 0.0)) -> Footprint:
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    ij = np.floor((xy - np.asarray(origin)) / cell_size).astype(int)
    return Footprint(frozenset(map(tuple, ij.tolist())), tuple(origin), cell_size)
