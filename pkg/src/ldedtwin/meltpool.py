"""Melt-pool morphology from coaxial camera frames.

Coordinates follow the pixel-center convention: pixel (row r, column c)
is the point (x=c, y=r) and every pixel has unit area.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, astuple, fields

import numpy as np
from scipy import ndimage

from .session import check_timestamps, fmt

_EIGHT = np.ones((3, 3), dtype=bool)


class NoMeltPool(ValueError):
    """Raised when a mask or image carries no melt-pool pixels."""


class EllipseFitError(ValueError):
    pass


@dataclass(frozen=True)
class MeltPoolConfig:
    threshold: int | None = None  # None selects Otsu
    min_pixels: int = 5
    weighting: str = "binary"  # or "intensity"
    min_contrast: float = 50.0  # fg/bg mean gap below which a frame holds no melt pool

    def __post_init__(self):
        if self.threshold is not None and not 0 <= self.threshold <= 255:
            raise ValueError(f"threshold must be in [0, 255], got {self.threshold}")
        if self.min_pixels < 1:
            raise ValueError("min_pixels must be >= 1")
        if self.weighting not in ("binary", "intensity"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.min_contrast < 0:
            raise ValueError("min_contrast must be >= 0")


@dataclass(frozen=True)
class Ellipse:
    width_a: float  # minor semi-axis
    length_b: float  # major semi-axis
    angle: float  # major-axis direction, degrees in [0, 180)
    center: tuple


@dataclass(frozen=True)
class MeltPoolFeatures:
    t: float
    area: float = math.nan
    cx: float = math.nan
    cy: float = math.nan
    mu20: float = math.nan
    mu02: float = math.nan
    mu11: float = math.nan
    hull_area: float = math.nan
    width: float = math.nan
    length: float = math.nan
    valid: bool = False

    def channels(self) -> tuple:
        """Values fused downstream (centroid excluded)."""
        return (self.area, self.mu20, self.mu02, self.mu11, self.hull_area, self.width, self.length)


def otsu_threshold(img) -> int:
    """Threshold T maximizing between-class variance of {< T} vs {>= T}."""
    hist = np.bincount(np.asarray(img, dtype=np.uint8).ravel(), minlength=256).astype(float)
    levels = np.arange(256, dtype=float)
    total = hist.sum()
    # class "low" holds levels < T for T = 0..255
    w0 = np.concatenate([[0.0], np.cumsum(hist)[:-1]])
    s0 = np.concatenate([[0.0], np.cumsum(hist * levels)[:-1]])
    w1 = total - w0
    s1 = (hist * levels).sum() - s0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = w0 * w1 * (s0 / w0 - s1 / w1) ** 2
    between = np.where((w0 > 0) & (w1 > 0), between, -1.0)
    if between.max() < 0:
        # single-level image: no contrast, so no foreground
        return int(np.flatnonzero(hist)[0]) + 1 if total else 0
    return int(np.argmax(between))


def binarize(img, method="otsu") -> np.ndarray:
    """Boolean mask of pixels at or above the threshold.

    ``method`` is ``"otsu"`` or an integer threshold in [0, 255].
    """
    img = np.asarray(img)
    if isinstance(method, str):
        if method != "otsu":
            raise ValueError(f"unknown binarization method {method!r}")
        thr = otsu_threshold(img)
    else:
        thr = method
        if not 0 <= thr <= 255:
            raise ValueError(f"fixed threshold must be in [0, 255], got {thr}")
    return img >= thr


def _check_dims(img, mask):
    if np.shape(img) != np.shape(mask):
        raise ValueError(f"image {np.shape(img)} and mask {np.shape(mask)} differ in shape")


def contour_area_moment(img, mask) -> float:
    """Zeroth-order moment: sum of intensities over masked pixels."""
    _check_dims(img, mask)
    return float(np.sum(np.asarray(img, dtype=float) * np.asarray(mask, dtype=bool)))


def central_moments(img, mask) -> tuple:
    """Return (xbar, ybar, mu20, mu02, mu11) over masked pixels.

    Sums are taken in coordinates local to the mask's bounding box so that
    integer translations reproduce the central moments bit for bit.
    """
    _check_dims(img, mask)
    mask = np.asarray(mask, dtype=bool)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise NoMeltPool("empty mask")
    w = np.asarray(img, dtype=float)[rows, cols]
    m00 = w.sum()
    if m00 <= 0:
        raise NoMeltPool("zero total intensity under mask")
    r0, c0 = rows.min(), cols.min()
    u = (cols - c0).astype(float)
    v = (rows - r0).astype(float)
    ub = (w * u).sum() / m00
    vb = (w * v).sum() / m00
    du, dv = u - ub, v - vb
    mu20 = float((w * du * du).sum())
    mu02 = float((w * dv * dv).sum())
    mu11 = float((w * du * dv).sum())
    return float(c0 + ub), float(r0 + vb), mu20, mu02, mu11


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def hull_of_points(points) -> np.ndarray:
    """Andrew's monotone chain; counter-clockwise, collinear points dropped."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=float).reshape(-1, 2))))
    if len(pts) <= 2:
        return np.array(pts, dtype=float).reshape(-1, 2)
    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=float)


def polygon_area(poly) -> float:
    poly = np.asarray(poly, dtype=float).reshape(-1, 2)
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def convex_hull(mask) -> tuple:
    """Convex hull of masked pixel centers: (vertices, area)."""
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        raise NoMeltPool("empty mask")
    # per-row extreme pixels span the same hull as the full set
    sub = mask[rows]
    first = sub.argmax(axis=1)
    last = sub.shape[1] - 1 - sub[:, ::-1].argmax(axis=1)
    pts = np.concatenate([np.column_stack([first, rows]), np.column_stack([last, rows])])
    hull = hull_of_points(pts)
    return hull, polygon_area(hull)


def boundary_pixels(mask) -> np.ndarray:
    """(n, 2) x/y of masked pixels touching an unmasked 4-neighbor or the frame edge."""
    mask = np.asarray(mask, dtype=bool)
    p = np.pad(mask, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    rows, cols = np.nonzero(mask & ~interior)
    return np.column_stack([cols, rows]).astype(float)


def fit_ellipse_points(points) -> Ellipse:
    """Direct least-squares ellipse fit (ellipse-specific constraint).

    Uses the numerically stable partitioned formulation on centered,
    RMS-normalized coordinates.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < 5:
        raise EllipseFitError(f"need >= 5 points, got {len(pts)}")
    mean = pts.mean(axis=0)
    q = pts - mean
    scale = math.sqrt(float((q**2).sum(axis=1).mean()))
    if scale == 0:
        raise EllipseFitError("all points coincide")
    q = q / scale
    x, y = q[:, 0], q[:, 1]
    d1 = np.column_stack([x * x, x * y, y * y])
    d2 = np.column_stack([x, y, np.ones_like(x)])
    s1, s2, s3 = d1.T @ d1, d1.T @ d2, d2.T @ d2
    try:
        tmat = -np.linalg.solve(s3, s2.T)
    except np.linalg.LinAlgError:
        raise EllipseFitError("degenerate point set (collinear)") from None
    m = s1 + s2 @ tmat
    m = np.vstack([m[2] / 2.0, -m[1], m[0] / 2.0])
    evals, evecs = np.linalg.eig(m)
    evecs = np.real(evecs)
    cond = 4 * evecs[0] * evecs[2] - evecs[1] ** 2
    ok = np.flatnonzero(cond > 0)
    if ok.size == 0:
        raise EllipseFitError("no ellipse-constrained solution")
    a1 = evecs[:, ok[np.argmin(np.abs(np.real(evals[ok])))]]
    A, B, C = a1
    D, E, F = tmat @ a1

    det = 4 * A * C - B * B
    if det <= 0:
        raise EllipseFitError("conic is not an ellipse")
    x0 = (B * E - 2 * C * D) / det
    y0 = (B * D - 2 * A * E) / det
    f0 = A * x0 * x0 + B * x0 * y0 + C * y0 * y0 + D * x0 + E * y0 + F
    lam, vec = np.linalg.eigh(np.array([[A, B / 2], [B / 2, C]]))
    axes_sq = -f0 / lam
    if np.any(axes_sq <= 0) or not np.all(np.isfinite(axes_sq)):
        raise EllipseFitError("imaginary or degenerate ellipse")
    axes = np.sqrt(axes_sq) * scale
    major = int(np.argmax(axes))
    vx, vy = vec[:, major]
    angle = math.degrees(math.atan2(vy, vx)) % 180.0
    return Ellipse(
        width_a=float(axes.min()),
        length_b=float(axes.max()),
        angle=angle,
        center=(float(x0 * scale + mean[0]), float(y0 * scale + mean[1])),
    )


def contour_points(mask) -> np.ndarray:
    """Midpoints of pixel edges separating masked from unmasked pixels.

    These lie on the region outline itself, half a pixel outside the
    boundary pixel centers, so fitted axes are not shrunk by the raster.
    """
    mask = np.asarray(mask, dtype=bool)
    p = np.pad(mask, 1, constant_values=False)
    h, w = mask.shape
    pts = []
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        outside = ~p[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
        rows, cols = np.nonzero(mask & outside)
        pts.append(np.column_stack([cols + 0.5 * dc, rows + 0.5 * dr]))
    return np.concatenate(pts).astype(float)


def fit_ellipse(mask) -> Ellipse:
    """Fit an ellipse to the outline of ``mask``.

    Requires at least 5 non-collinear boundary pixels.
    """
    edge = boundary_pixels(mask)
    if len(edge) < 5:
        raise EllipseFitError(f"need >= 5 boundary pixels, got {len(edge)}")
    if np.linalg.matrix_rank(edge - edge.mean(axis=0)) < 2:
        raise EllipseFitError("boundary pixels are collinear")
    return fit_ellipse_points(contour_points(mask))


def largest_component(mask) -> np.ndarray:
    """Largest 8-connected component; ties go to the first in raster order."""
    labels, n = ndimage.label(mask, structure=_EIGHT)
    if n == 0:
        return np.zeros_like(np.asarray(mask, dtype=bool))
    sizes = np.bincount(labels.ravel())[1:]
    return labels == int(np.argmax(sizes)) + 1


def extract_meltpool_features(t, img, config: MeltPoolConfig | None = None) -> MeltPoolFeatures:
    config = config or MeltPoolConfig()
    img = np.asarray(img)
    mask = binarize(img, "otsu" if config.threshold is None else config.threshold)
    if not mask.any() or mask.all() or img[mask].mean() - img[~mask].mean() < config.min_contrast:
        return MeltPoolFeatures(t=float(t))
    blob = largest_component(mask)
    if int(blob.sum()) < config.min_pixels:
        return MeltPoolFeatures(t=float(t))
    weights = blob if config.weighting == "binary" else img
    try:
        area = contour_area_moment(weights, blob)
        cx, cy, mu20, mu02, mu11 = central_moments(weights, blob)
        _, hull_area = convex_hull(blob)
        ell = fit_ellipse(blob)
    except (NoMeltPool, EllipseFitError):
        return MeltPoolFeatures(t=float(t))
    return MeltPoolFeatures(
        t=float(t),
        area=area,
        cx=cx,
        cy=cy,
        mu20=mu20,
        mu02=mu02,
        mu11=mu11,
        hull_area=hull_area,
        width=ell.width_a,
        length=ell.length_b,
        valid=True,
    )


def extract_series(times, frames, config: MeltPoolConfig | None = None) -> list:
    return [extract_meltpool_features(t, f, config) for t, f in zip(times, frames)]


CSV_HEADER = ["t", "area", "cx", "cy", "mu20", "mu02", "mu11", "hull_area", "width", "length", "valid"]


def write_features_csv(features, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for f in features:
            vals = astuple(f)
            row = [fmt(vals[0])] + [fmt(v) if f.valid else "" for v in vals[1:-1]] + [int(f.valid)]
            w.writerow(row)


def read_features_csv(path) -> list:
    out = []
    names = [f.name for f in fields(MeltPoolFeatures)]
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        for row in reader:
            if not row:
                continue
            vals = [float(v) if v != "" else math.nan for v in row[:-1]]
            out.append(MeltPoolFeatures(**dict(zip(names, vals)), valid=row[-1] == "1"))
    check_timestamps([f.t for f in out], "meltpool_features")
    return out
