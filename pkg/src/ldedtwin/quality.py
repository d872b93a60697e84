"""Voxel quality labels, defect regions and correction planning."""

from __future__ import annotations

import csv
import math
import warnings
from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import toolpath as tp
from .fusion import DigitalTwin
from .session import fmt

OK = "ok"
KEYHOLE = "keyhole_pore"
CRACK = "crack"
UNDER_BUILT = "under_built"
OVER_BUILT = "over_built"
LABELS = (OK, KEYHOLE, CRACK, UNDER_BUILT, OVER_BUILT)
LABEL_ORDER = {lab: i for i, lab in enumerate(LABELS)}
INTERNAL = (CRACK, KEYHOLE)

MACHINE_REMOVE = "machine_remove"
DEPOSIT_RESTORE = "deposit_restore"

MAD_SCALE = 1.4826  # MAD -> stddev for normal data


@dataclass(frozen=True)
class RuleThresholds:
    width_spike_z: float = 3.0
    area_high_z: float = 2.0
    baseline_window: int = 1  # layers pooled for the per-layer width baseline
    isolation_fraction: float = 0.25
    min_rel_scale: float = 0.02  # robust scale floor as a fraction of |median|
    width_channel: str = "mp_width"
    area_channel: str = "mp_area"

    def __post_init__(self):
        if self.width_spike_z <= 0 or self.area_high_z <= 0:
            raise ValueError("rule thresholds must be > 0")
        if self.baseline_window < 1:
            raise ValueError("baseline_window must be >= 1")
        if self.min_rel_scale < 0:
            raise ValueError("min_rel_scale must be >= 0")
        if not 0 < self.isolation_fraction <= 1:
            raise ValueError("isolation_fraction must be in (0, 1]")


def robust_z(values, reference, min_rel_scale: float = 0.0) -> np.ndarray:
    """(x - median) / (1.4826 * MAD) against ``reference``.

    The scale is floored at ``min_rel_scale * |median|`` so sub-resolution
    jitter in a very quiet baseline does not read as a spike.
    """
    ref = np.asarray(reference, dtype=float)
    ref = ref[np.isfinite(ref)]
    x = np.asarray(values, dtype=float)
    if ref.size == 0:
        return np.full(x.shape, np.nan)
    med = np.median(ref)
    scale = MAD_SCALE * np.median(np.abs(ref - med))
    scale = max(scale, min_rel_scale * abs(med), 1e-9 * abs(med), 1e-12)
    return (x - med) / scale


def label_rules(twin: DigitalTwin, th: RuleThresholds | None = None) -> DigitalTwin:
    """Crack: isolated per-layer melt-pool width spikes.  Keyhole: melt-pool
    area high against the whole build, in the upper half of the layers."""
    th = th or RuleThresholds()
    if len(twin) == 0:
        raise ValueError("cannot label an empty twin")
    width = twin.mean[:, twin.channel(th.width_channel)]
    area = twin.mean[:, twin.channel(th.area_channel)]
    layer = twin.layer
    layers = np.unique(layer)

    crack = np.zeros(len(twin), dtype=bool)
    half = th.baseline_window // 2
    for L in layers:
        members = layer == L
        pool = (layer >= L - half) & (layer <= L - half + th.baseline_window - 1)
        z = robust_z(width[members], width[pool], th.min_rel_scale)
        flagged = np.nan_to_num(z, nan=-np.inf) > th.width_spike_z
        if flagged.sum() < th.isolation_fraction * members.sum():
            crack[np.flatnonzero(members)[flagged]] = True

    mid = (layers.min() + layers.max()) / 2
    za = np.nan_to_num(robust_z(area, area, th.min_rel_scale), nan=-np.inf)
    keyhole = (za > th.area_high_z) & (layer > mid)

    labels = np.where(crack, CRACK, np.where(keyhole, KEYHOLE, OK))
    return twin.with_labels(labels.tolist())


# ---------------------------------------------------------------------------
# nearest-neighbor baseline


@dataclass(frozen=True)
class Classifier:
    k: int
    features: tuple  # names of the retained features
    mean: np.ndarray
    std: np.ndarray
    x: np.ndarray  # raw training rows, retained features only
    y: tuple
    dropped: tuple = ()

    def standardize(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.std


def fit_knn(x, y, k: int = 5, feature_names=None) -> Classifier:
    """Store z-scoring parameters and training rows.

    Zero-variance features are dropped with a warning.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError("training matrix must be 2-D")
    y = tuple(y)
    names = tuple(feature_names) if feature_names is not None else tuple(f"f{i}" for i in range(x.shape[1]))
    if len(y) != len(x) or len(names) != x.shape[1]:
        raise ValueError("labels / feature names do not match the training matrix")
    if k < 1 or k > len(x):
        raise ValueError(f"k={k} is invalid for {len(x)} training records")
    if not np.all(np.isfinite(x)):
        raise ValueError("training features must be finite")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    keep = std > 0
    dropped = tuple(n for n, kp in zip(names, keep) if not kp)
    if dropped:
        warnings.warn(f"dropping zero-variance features: {', '.join(dropped)}", stacklevel=2)
    return Classifier(
        k=k,
        features=tuple(n for n, kp in zip(names, keep) if kp),
        mean=mean[keep],
        std=std[keep],
        x=x[:, keep],
        y=y,
        dropped=dropped,
    )


def _vote(labels, dists) -> str:
    votes = Counter(labels)
    top = max(votes.values())
    tied = [lab for lab, c in votes.items() if c == top]
    if len(tied) == 1:
        return tied[0]
    summed = {lab: sum(d for l2, d in zip(labels, dists) if l2 == lab) for lab in tied}
    return min(tied, key=lambda lab: (summed[lab], LABEL_ORDER.get(lab, len(LABELS)), lab))


def predict_labels(clf: Classifier, xq, chunk: int = 256) -> list:
    """Majority label among the k nearest training rows (Euclidean, z-scored).

    Neighbors at equal distance are taken in training order; vote ties go
    to the smallest summed distance, then to the label order.
    """
    xq = np.asarray(xq, dtype=float).reshape(-1, len(clf.features))
    q = clf.standardize(xq)
    q = np.where(np.isfinite(q), q, 0.0)
    train = clf.standardize(clf.x)
    out = []
    for c0 in range(0, len(q), chunk):
        block = q[c0 : c0 + chunk]
        d = np.sqrt(((block[:, None, :] - train[None, :, :]) ** 2).sum(axis=2))
        order = np.argsort(d, axis=1, kind="stable")[:, : clf.k]
        for r in range(len(block)):
            nn = order[r]
            out.append(_vote([clf.y[i] for i in nn], d[r, nn].tolist()))
    return out


def predict(clf: Classifier, twin: DigitalTwin) -> DigitalTwin:
    missing = [f for f in clf.features if f not in twin.channels]
    if missing:
        raise ValueError(f"twin lacks classifier features: {missing}")
    cols = [twin.channel(f) for f in clf.features]
    return twin.with_labels(predict_labels(clf, twin.mean[:, cols]))


def training_set(fused, labels, channels) -> tuple:
    """Rows of fully valid laser-on fused records with their labels."""
    feats = fused.features
    ok = fused.laser_on & fused.valid_mp & fused.valid_ac & fused.valid_th & np.all(np.isfinite(feats), axis=1)
    idx = np.flatnonzero(ok)
    return feats[idx], [labels[i] for i in idx], tuple(channels)


CLASSIFIER_HEADER = ["row", "label"]


def write_classifier(clf: Classifier, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CLASSIFIER_HEADER + list(clf.features))
        w.writerow(["k", clf.k] + [""] * len(clf.features))
        w.writerow(["mean", ""] + [repr(float(v)) for v in clf.mean])
        w.writerow(["std", ""] + [repr(float(v)) for v in clf.std])
        for row, lab in zip(clf.x, clf.y):
            w.writerow(["train", lab] + [repr(float(v)) for v in row])


def read_classifier(path) -> Classifier:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != CLASSIFIER_HEADER:
            raise ValueError(f"{path}: not a classifier file")
        k, mean, std, xs, ys = None, None, None, [], []
        for row in reader:
            if not row:
                continue
            if row[0] == "k":
                k = int(row[1])
            elif row[0] == "mean":
                mean = np.array([float(v) for v in row[2:]])
            elif row[0] == "std":
                std = np.array([float(v) for v in row[2:]])
            elif row[0] == "train":
                ys.append(row[1])
                xs.append([float(v) for v in row[2:]])
    names = tuple(header[2:])
    return Classifier(k, names, mean, std, np.array(xs).reshape(len(xs), len(names)), tuple(ys))


# ---------------------------------------------------------------------------
# regions


@dataclass(frozen=True)
class DefectRegion3D:
    label: str
    voxels: np.ndarray  # (n, 3) int, sorted
    boundary: np.ndarray  # subset of voxels with a face outside the region
    centroid: tuple  # mm
    bbox: tuple  # ((ix, iy, iz) min, (ix, iy, iz) max)
    origin: tuple
    voxel_size: float

    @property
    def min_layer(self) -> int:
        return int(self.bbox[0][2])

    @property
    def max_layer(self) -> int:
        return int(self.bbox[1][2])

    def footprint(self) -> tp.Footprint:
        cells = frozenset(map(tuple, self.voxels[:, :2].tolist()))
        return tp.Footprint(cells, tuple(self.origin[:2]), self.voxel_size)


def extract_regions_3d(twin: DigitalTwin) -> list:
    """6-connected components of equally labeled non-ok voxels, largest first."""
    regions = []
    if len(twin) == 0:
        return regions
    labels = np.array(twin.labels, dtype=object)
    lo = twin.keys.min(axis=0)
    shape = tuple(twin.keys.max(axis=0) - lo + 1)
    for lab in sorted({lb for lb in twin.labels if lb not in (OK, "")}, key=lambda s: LABEL_ORDER.get(s, 99)):
        grid = np.zeros(shape, dtype=bool)
        sel = twin.keys[labels == lab] - lo
        grid[tuple(sel.T)] = True
        comp, n = ndimage.label(grid)  # default structure: face adjacency
        for c in range(1, n + 1):
            mask = comp == c
            vox = np.argwhere(mask)
            padded = np.pad(mask, 1)
            interior = np.ones_like(mask)
            for axis in range(3):
                for step in (-1, 1):
                    interior &= np.roll(padded, step, axis=axis)[1:-1, 1:-1, 1:-1]
            bnd = np.argwhere(mask & ~interior)
            vox_abs = vox + lo
            centers = np.asarray(twin.origin) + (vox_abs + 0.5) * twin.voxel_size
            regions.append(
                DefectRegion3D(
                    label=lab,
                    voxels=vox_abs,
                    boundary=bnd + lo,
                    centroid=tuple(float(v) for v in centers.mean(axis=0)),
                    bbox=(tuple(vox_abs.min(axis=0).tolist()), tuple(vox_abs.max(axis=0).tolist())),
                    origin=tuple(twin.origin),
                    voxel_size=twin.voxel_size,
                )
            )
    regions.sort(key=lambda r: (-len(r.voxels), LABEL_ORDER.get(r.label, 99), tuple(r.voxels[0])))
    return regions


REGION3D_HEADER = ["region_id", "label", "voxels", "cx", "cy", "cz", "min_layer", "max_layer"]


def write_regions3d_csv(regions, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REGION3D_HEADER)
        for i, r in enumerate(regions):
            w.writerow([i, r.label, len(r.voxels), *map(fmt, r.centroid), r.min_layer, r.max_layer])


# ---------------------------------------------------------------------------
# planning


@dataclass(frozen=True)
class Action:
    region_id: str
    label: str
    action: str
    z_floor: float
    z_top: float
    footprint: tp.Footprint

    @property
    def depth(self) -> float:
        return self.z_top - self.z_floor


def plan_correction(regions, surface_regions, z_surface: float | None = None) -> list:
    """Order removal and restoration actions.

    Internal defects are machined from ``z_surface`` (default: the region's
    own top) down to the floor of their lowest layer and then rebuilt to the
    same height.  Surface regions are machined (over-built) or filled
    (under-built) by their mean deviation.  All removals come first, then
    all restorations; each group runs bottom-up.
    """
    removals, restores = [], []
    for n, r in enumerate(regions):
        if r.label not in INTERNAL:
            continue
        floor = r.origin[2] + r.min_layer * r.voxel_size
        top = z_surface if z_surface is not None else r.origin[2] + (r.max_layer + 1) * r.voxel_size
        fp = r.footprint()
        removals.append(Action(f"V{n}", r.label, MACHINE_REMOVE, floor, top, fp))
        restores.append(Action(f"V{n}", r.label, DEPOSIT_RESTORE, floor, top, fp))
    for n, s in enumerate(surface_regions):
        dev = s.mean_deviation
        if s.kind == OVER_BUILT:
            removals.append(Action(f"S{n}", s.kind, MACHINE_REMOVE, s.nominal, s.nominal + dev, s.footprint))
        elif s.kind == UNDER_BUILT:
            restores.append(Action(f"S{n}", s.kind, DEPOSIT_RESTORE, s.nominal - abs(dev), s.nominal, s.footprint))
    key = lambda a: (a.z_floor, a.region_id)  # noqa: E731
    return sorted(removals, key=key) + sorted(restores, key=key)


@dataclass(frozen=True)
class ToolpathParams:
    hatch: float = 1.0
    layer_height: float = 0.5
    base_power: float = 800.0  # W
    power_gain: float = 0.1
    deposit_feed: float = 10.0  # mm/s
    machine_feed: float = 20.0

    def __post_init__(self):
        if self.hatch <= 0 or self.layer_height <= 0:
            raise ValueError("hatch and layer_height must be > 0")
        if self.base_power <= 0 or self.deposit_feed <= 0 or self.machine_feed <= 0:
            raise ValueError("power and feeds must be > 0")


def power_multiplier(depth: float, layer_height: float, gain: float = 0.1) -> float:
    return min(1.2, max(0.8, 1.0 + gain * (depth / layer_height - 1.0)))


def _layer_steps(depth, layer_height):
    n = max(1, math.ceil(depth / layer_height - 1e-9))
    return n, depth / n


def generate_toolpath(plan, params: ToolpathParams | None = None) -> list:
    """Machining and deposition rasters for every action of the plan, in order."""
    params = params or ToolpathParams()
    if not plan:
        raise ValueError("empty correction plan")
    segs = []
    for a in plan:
        n, step = _layer_steps(a.depth, params.layer_height)
        if a.action == MACHINE_REMOVE:
            for i in range(n):
                segs += tp.raster(a.footprint, params.hatch, a.z_top - (i + 1) * step, tp.MACHINE, 0.0,
                                  params.machine_feed, laser_inside=False)
        elif a.action == DEPOSIT_RESTORE:
            power = params.base_power * power_multiplier(step, params.layer_height, params.power_gain)
            for i in range(n):
                segs += tp.raster(a.footprint, params.hatch, a.z_floor + (i + 1) * step, tp.DEPOSIT, power,
                                  params.deposit_feed)
        else:
            raise ValueError(f"unknown action {a.action!r}")
    return segs


PLAN_HEADER = ["seq", "action", "region_id", "label", "z_floor", "z_top", "depth_mm", "min_x", "min_y", "max_x", "max_y"]


def write_plan_csv(plan, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PLAN_HEADER)
        for i, a in enumerate(plan):
            w.writerow([i, a.action, a.region_id, a.label, fmt(a.z_floor), fmt(a.z_top), fmt(a.depth),
                        *map(fmt, a.footprint.bounds())])


# ---------------------------------------------------------------------------
# evaluation


def label_metrics(predicted: dict, truth: dict, labels=(CRACK, KEYHOLE)) -> dict:
    """Per-label voxel precision/recall over the union of keys."""
    keys = set(predicted) | set(truth)
    out = {}
    for lab in labels:
        tp_ = sum(1 for k in keys if predicted.get(k) == lab and truth.get(k) == lab)
        fp = sum(1 for k in keys if predicted.get(k) == lab and truth.get(k) != lab)
        fn = sum(1 for k in keys if predicted.get(k) != lab and truth.get(k) == lab)
        out[lab] = {
            "tp": tp_,
            "fp": fp,
            "fn": fn,
            "precision": tp_ / (tp_ + fp) if tp_ + fp else math.nan,
            "recall": tp_ / (tp_ + fn) if tp_ + fn else math.nan,
        }
    return out
