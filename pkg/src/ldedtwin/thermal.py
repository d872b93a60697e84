"""Emissivity correction, ROI segmentation and temperature statistics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .session import check_timestamps, fmt

EMISSIVITY_MELT = 0.3
EMISSIVITY_HAZ = 0.5
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class ThermalConfig:
    melt_threshold: float = 1000.0  # K, apparent
    haz_threshold: float = 500.0  # K, apparent
    eps_melt: float = EMISSIVITY_MELT
    eps_haz: float = EMISSIVITY_HAZ

    def __post_init__(self):
        if self.melt_threshold <= 0 or self.haz_threshold <= 0:
            raise ValueError("temperature thresholds must be > 0 K")
        for e in (self.eps_melt, self.eps_haz):
            if not 0 < e <= 1:
                raise ValueError(f"emissivity must be in (0, 1], got {e}")


@dataclass(frozen=True)
class ThermalFeatures:
    t: float
    peak: float = math.nan
    mean: float = math.nan
    variance: float = math.nan
    kurtosis: float = math.nan
    roi_pixels: int = 0
    valid: bool = False
    degenerate: bool = False  # zero variance, kurtosis undefined

    def channels(self) -> tuple:
        return (self.peak, self.mean, self.variance, self.kurtosis)


def segment_roi(grid, haz_threshold: float) -> np.ndarray:
    """Largest 8-connected component of cells at or above ``haz_threshold``."""
    if haz_threshold <= 0:
        raise ValueError("haz_threshold must be > 0")
    hot = np.asarray(grid) >= haz_threshold
    labels, n = ndimage.label(hot, structure=_EIGHT)
    if n == 0:
        return np.zeros(hot.shape, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == int(np.argmax(sizes)) + 1


def build_emissivity_map(grid, melt_threshold: float, roi=None,
                         eps_melt: float = EMISSIVITY_MELT, eps_haz: float = EMISSIVITY_HAZ) -> np.ndarray:
    """Molten cells (apparent T >= melt_threshold) get ``eps_melt``, other ROI
    cells ``eps_haz``, everything else 1.0 (no correction)."""
    if melt_threshold <= 0:
        raise ValueError("melt_threshold must be > 0")
    grid = np.asarray(grid, dtype=float)
    eps = np.ones(grid.shape)
    if roi is not None:
        eps[np.asarray(roi, dtype=bool)] = eps_haz
    eps[grid >= melt_threshold] = eps_melt
    return eps


def correct_emissivity(grid, eps) -> np.ndarray:
    """Graybody total-radiance correction T_true = T_apparent * eps**(-1/4)."""
    grid = np.asarray(grid)
    eps = np.asarray(eps, dtype=float)
    if grid.shape != eps.shape:
        raise ValueError(f"frame {grid.shape} and emissivity map {eps.shape} differ")
    if np.any(eps <= 0) or np.any(eps > 1):
        raise ValueError("emissivity must be in (0, 1]")
    out = np.array(grid, dtype=float)
    scaled = eps != 1.0
    out[scaled] = out[scaled] * eps[scaled] ** -0.25
    return out


def thermal_stats(t, grid, roi) -> ThermalFeatures:
    """Peak, mean, population variance and Pearson kurtosis over the ROI."""
    vals = np.asarray(grid, dtype=float)[np.asarray(roi, dtype=bool)]
    n = vals.size
    if n == 0:
        return ThermalFeatures(t=float(t))
    mean = vals.mean()
    d = vals - mean
    m2 = float(np.mean(d * d))
    m4 = float(np.mean(d**4))
    if m2 == 0.0:
        return ThermalFeatures(float(t), float(vals.max()), float(mean), 0.0, math.nan, n, True, True)
    return ThermalFeatures(float(t), float(vals.max()), float(mean), m2, m4 / (m2 * m2), n, True)


def extract_thermal_features(t, grid, config: ThermalConfig | None = None) -> ThermalFeatures:
    """Segment on apparent temperature, correct emissivity, then take statistics."""
    config = config or ThermalConfig()
    roi = segment_roi(grid, config.haz_threshold)
    eps = build_emissivity_map(grid, config.melt_threshold, roi, config.eps_melt, config.eps_haz)
    return thermal_stats(t, correct_emissivity(grid, eps), roi)


def extract_series(times, frames, config: ThermalConfig | None = None) -> list:
    return [extract_thermal_features(t, g, config) for t, g in zip(times, frames)]


CSV_HEADER = ["t", "peak", "mean", "variance", "kurtosis", "roi_pixels", "valid"]


def write_features_csv(features, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for f in features:
            stats = [fmt(v) if f.valid and math.isfinite(v) else "" for v in f.channels()]
            w.writerow([fmt(f.t), *stats, f.roi_pixels, int(f.valid)])


def read_features_csv(path) -> list:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header")
        for row in reader:
            if not row:
                continue
            v = [float(s) if s != "" else math.nan for s in row[:5]]
            valid = row[6] == "1"
            out.append(ThermalFeatures(v[0], v[1], v[2], v[3], v[4], int(row[5]), valid,
                                       valid and not math.isfinite(v[4])))
    check_timestamps([f.t for f in out], "thermal_features")
    return out

