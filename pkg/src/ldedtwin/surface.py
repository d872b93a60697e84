"""Point-cloud filtering, height maps and over/under-built detection."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import toolpath as tp
from .session import fmt

log = logging.getLogger(__name__)

OK, UNDER_BUILT, OVER_BUILT, NO_DATA = 0, 1, 2, -1
KIND_NAMES = {OK: "ok", UNDER_BUILT: "under_built", OVER_BUILT: "over_built", NO_DATA: "no_data"}


def filter_point_cloud(points, box_min, box_max, k: int = 8, sigma_mult: float = 2.0,
                       z_floor: float | None = None) -> np.ndarray:
    """Crop to the build box, then drop statistical outliers.

    A point is an outlier when its mean distance to its ``k`` nearest
    neighbors exceeds the global mean of that statistic by more than
    ``sigma_mult`` standard deviations.  Input order is preserved.
    ``z_floor`` (default: the box floor) removes substrate points.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    lo = np.array(box_min, dtype=float)
    hi = np.array(box_max, dtype=float)
    if z_floor is not None:
        lo[2] = z_floor
    keep = np.all((pts >= lo) & (pts <= hi), axis=1)
    pts = pts[keep]
    if len(pts) > 1:
        kk = min(k, len(pts) - 1)
        dist, _ = cKDTree(pts).query(pts, k=kk + 1)
        mean_d = dist[:, 1:].mean(axis=1)
        pts = pts[mean_d <= mean_d.mean() + sigma_mult * mean_d.std()]
    if len(pts) == 0:
        log.warning("point cloud empty after filtering")
    return pts


@dataclass(frozen=True)
class HeightMap:
    origin: tuple  # (x0, y0) mm
    cell_size: float
    height: np.ndarray  # (ny, nx), NaN where empty
    count: np.ndarray  # (ny, nx)

    @property
    def shape(self):
        return self.height.shape


def rasterize_heightmap(points, cell_size: float, origin=None, shape=None) -> HeightMap:
    """Max-z height per cell; cells cover [x0 + i*s, x0 + (i+1)*s).

    The default origin snaps the cloud minimum down to a multiple of
    ``cell_size`` so maps from different scans share one lattice.
    """
    if cell_size <= 0:
        raise ValueError("cell_size must be > 0")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("cannot rasterize an empty cloud")
    if origin is None:
        origin = tuple(float(v) for v in np.floor(pts[:, :2].min(axis=0) / cell_size) * cell_size)
    ij = np.floor((pts[:, :2] - np.asarray(origin)) / cell_size).astype(int)
    if shape is None:
        shape = (int(ij[:, 1].max()) + 1, int(ij[:, 0].max()) + 1)
    ny, nx = shape
    inside = (ij[:, 0] >= 0) & (ij[:, 0] < nx) & (ij[:, 1] >= 0) & (ij[:, 1] < ny)
    ij, z = ij[inside], pts[inside, 2]
    flat = ij[:, 1] * nx + ij[:, 0]
    height = np.full(ny * nx, -np.inf)
    np.maximum.at(height, flat, z)
    count = np.bincount(flat, minlength=ny * nx)
    height[count == 0] = np.nan
    return HeightMap(tuple(origin), float(cell_size), height.reshape(ny, nx), count.reshape(ny, nx))


@dataclass(frozen=True)
class DeviationMap:
    origin: tuple
    cell_size: float
    deviation: np.ndarray  # NaN where no data
    kind: np.ndarray  # OK / UNDER_BUILT / OVER_BUILT / NO_DATA
    nominal: float
    tau: float


def deviation_map(h: HeightMap, nominal: float, tau: float) -> DeviationMap:
    if tau <= 0:
        raise ValueError("tau must be > 0")
    dev = h.height - nominal
    kind = np.full(dev.shape, NO_DATA, dtype=int)
    has = np.isfinite(dev)
    kind[has] = OK
    kind[has & (dev < -tau)] = UNDER_BUILT
    kind[has & (dev > tau)] = OVER_BUILT
    return DeviationMap(h.origin, h.cell_size, dev, kind, float(nominal), float(tau))


@dataclass(frozen=True)
class SurfaceRegion:
    kind: str
    cells: frozenset  # (i, j) grid indices
    boundary: tuple  # polygons as (n, 2) arrays in mm
    mean_deviation: float
    origin: tuple
    cell_size: float
    nominal: float
    layer: int = -1

    @property
    def footprint(self) -> tp.Footprint:
        return tp.Footprint(self.cells, self.origin, self.cell_size)

    def bounds(self) -> tuple:
        return self.footprint.bounds()


def trace_outline(cells, origin=(0.0, 0.0), cell_size: float = 1.0) -> list:
    """Closed outline polygons of a cell set (region on the left, CCW outer).

    Collinear vertices are removed; holes come out clockwise.
    """
    cells = set(cells)
    edges = {}
    for i, j in cells:
        if (i, j - 1) not in cells:
            edges.setdefault((i, j), []).append((i + 1, j))
        if (i + 1, j) not in cells:
            edges.setdefault((i + 1, j), []).append((i + 1, j + 1))
        if (i, j + 1) not in cells:
            edges.setdefault((i + 1, j + 1), []).append((i, j + 1))
        if (i - 1, j) not in cells:
            edges.setdefault((i, j + 1), []).append((i, j))
    loops = []
    while edges:
        start = min(edges)
        loop = [start]
        v = start
        while True:
            nxt = edges[v].pop()
            if not edges[v]:
                del edges[v]
            if nxt == start:
                break
            loop.append(nxt)
            v = nxt
        # drop collinear vertices
        simple = []
        n = len(loop)
        for k in range(n):
            a, b, c = loop[k - 1], loop[k], loop[(k + 1) % n]
            if (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]) != 0:
                simple.append(b)
        poly = np.array(simple, dtype=float) * cell_size + np.asarray(origin, dtype=float)
        loops.append(poly)
    return loops


def extract_surface_regions(d: DeviationMap, min_cells: int = 4, layer: int = -1) -> list:
    """4-connected defect components of at least ``min_cells`` cells, largest first."""
    if min_cells < 1:
        raise ValueError("min_cells must be >= 1")
    regions = []
    for code in (UNDER_BUILT, OVER_BUILT):
        labels, n = ndimage.label(d.kind == code)
        for lab in range(1, n + 1):
            jj, ii = np.nonzero(labels == lab)
            if len(ii) < min_cells:
                continue
            cells = frozenset(zip(ii.tolist(), jj.tolist()))
            regions.append(
                SurfaceRegion(
                    kind=KIND_NAMES[code],
                    cells=cells,
                    boundary=tuple(trace_outline(cells, d.origin, d.cell_size)),
                    mean_deviation=float(d.deviation[jj, ii].mean()),
                    origin=d.origin,
                    cell_size=d.cell_size,
                    nominal=d.nominal,
                    layer=layer,
                )
            )
    regions.sort(key=lambda r: (-len(r.cells), r.kind, min(r.cells)))
    return regions


def fill_toolpath(r: SurfaceRegion, hatch: float, feed: float, power: float, z: float | None = None) -> list:
    """Zigzag deposit raster over an under-built region; laser on over region cells."""
    if r.kind != "under_built":
        raise ValueError(f"fill_toolpath needs an under_built region, got {r.kind}")
    if hatch <= 0:
        raise ValueError("hatch must be > 0")
    return tp.raster(r.footprint, hatch, r.nominal if z is None else z, tp.DEPOSIT, power, feed)


REGION_CSV_HEADER = ["region_id", "kind", "cells", "mean_dev_mm", "min_x", "min_y", "max_x", "max_y"]


def write_regions_csv(regions, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REGION_CSV_HEADER)
        for i, r in enumerate(regions):
            w.writerow([i, r.kind, len(r.cells), fmt(r.mean_deviation), *map(fmt, r.bounds())])


def scan_regions(points, nominal: float, box_min, box_max, cell_size: float = 1.0, tau: float = 0.125,
                 min_cells: int = 4, k: int = 8, sigma_mult: float = 2.0, z_floor=None, layer: int = -1):
    """Filter -> rasterize -> deviation -> regions for one scan."""
    pts = filter_point_cloud(points, box_min, box_max, k, sigma_mult, z_floor)
    if len(pts) == 0:
        return None, []
    origin = tuple(math.floor(v / cell_size) * cell_size for v in box_min[:2])
    h = rasterize_heightmap(pts, cell_size, origin=origin)
    dm = deviation_map(h, nominal, tau)
    return dm, extract_surface_regions(dm, min_cells, layer)
