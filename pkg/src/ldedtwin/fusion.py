"""Spatiotemporal fusion on the robot grid and the voxelized digital twin."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .session import (
    AC_CHANNELS,
    FEATURE_CHANNELS,
    FUSED_HZ,
    MP_CHANNELS,
    TH_CHANNELS,
    FusedDataset,
    RobotStream,
    fmt,
)

LINEAR = "linear"
HOLD = "hold"
GRID_TOLERANCE = 1e-6  # s
SNAP = 1e-9  # s; source samples this close to a tick count as on it


class GridError(ValueError):
    pass


def series_arrays(features) -> tuple:
    """(t, values, valid) arrays from a list of per-frame feature records."""
    t = np.array([f.t for f in features], dtype=float)
    width = len(features[0].channels()) if features else 0
    values = np.array([f.channels() for f in features], dtype=float).reshape(len(features), width)
    valid = np.array([f.valid for f in features], dtype=bool)
    return t, values, valid


def resample_features(t_src, values, valid, ticks, mode: str = LINEAR, max_gap: float = 0.1,
                      offset: float = 0.0) -> tuple:
    """Resample a feature series onto ``ticks``.

    Inside the source span, linear mode interpolates between the bracketing
    samples and hold mode takes the latest sample at or before the tick.
    When a bracketing sample is invalid, the nearest valid sample within
    ``max_gap`` seconds is held instead; failing that the tick is invalid.
    Ticks outside the span are invalid.  Samples with non-finite values
    count as invalid.  Returns (values, valid) with NaN rows where invalid.
    """
    if mode not in (LINEAR, HOLD):
        raise ValueError(f"unknown resample mode {mode!r}")
    t = np.asarray(t_src, dtype=float) + offset
    v = np.asarray(values, dtype=float)
    v = v[:, None] if v.ndim == 1 else v.reshape(len(t), v.shape[-1])
    ticks = np.asarray(ticks, dtype=float)
    m, width = len(ticks), v.shape[1]
    out = np.full((m, width), np.nan)
    ok = np.zeros(m, dtype=bool)
    n = len(t)
    if n == 0 or m == 0:
        return out, ok
    if n > 1 and np.any(np.diff(t) <= 0):
        raise ValueError("source timestamps must be strictly increasing")
    good = np.asarray(valid, dtype=bool) & np.all(np.isfinite(v), axis=1)

    span = (ticks >= t[0] - SNAP) & (ticks <= t[-1] + SNAP)
    i = np.clip(np.searchsorted(t, ticks, side="right") - 1, 0, n - 1)
    # a tick within SNAP of the next sample is that sample (decimal text timestamps)
    ahead = (i + 1 < n) & (np.abs(t[np.minimum(i + 1, n - 1)] - ticks) <= SNAP)
    i = np.where(ahead, i + 1, i)
    j = np.minimum(i + 1, n - 1)
    exact = np.abs(t[i] - ticks) <= SNAP

    if mode == LINEAR:
        direct = span & good[i] & (exact | good[j])
        dt = t[j] - t[i]
        w = np.where(exact | (dt == 0), 0.0, (ticks - t[i]) / np.where(dt == 0, 1.0, dt))
        interp = v[i] + w[:, None] * (v[j] - v[i])
        interp[exact] = v[i[exact]]
    else:
        direct = span & good[i]
        interp = v[i]
    out[direct] = interp[direct]
    ok[direct] = True

    fallback = span & ~direct
    if fallback.any():
        idx = np.arange(n)
        prev_valid = np.maximum.accumulate(np.where(good, idx, -1))
        next_valid = np.minimum.accumulate(np.where(good, idx, n)[::-1])[::-1]
        for k in np.flatnonzero(fallback):
            cands = []
            p = prev_valid[i[k]]
            if p >= 0:
                cands.append((ticks[k] - t[p], p))
            q = next_valid[i[k] + 1] if i[k] + 1 < n else n
            if q < n:
                cands.append((t[q] - ticks[k], q))
            if cands:
                gap, src = min(cands)
                if gap <= max_gap:
                    out[k] = v[src]
                    ok[k] = True
    return out, ok


def grid_indices(t, rate: int = FUSED_HZ) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    k = np.rint(t * rate).astype(np.int64)
    off = np.abs(t - k / rate)
    if np.any(off > GRID_TOLERANCE):
        bad = int(np.argmax(off > GRID_TOLERANCE))
        raise GridError(f"robot sample {bad} at t={t[bad]!r} is off the {rate} Hz grid")
    return k


def fuse(robot: RobotStream, mp, ac, th, rate: int = FUSED_HZ) -> FusedDataset:
    """Attach resampled channels to robot samples.

    ``mp``/``ac``/``th`` are (values, valid) pairs already on the robot grid.
    Positions and laser state are copied, never interpolated.
    """
    k = grid_indices(robot.t, rate)
    n = len(k)
    for name, (vals, ok), width in (("mp", mp, len(MP_CHANNELS)), ("ac", ac, len(AC_CHANNELS)),
                                   ("th", th, len(TH_CHANNELS))):
        if np.shape(vals) != (n, width) or len(ok) != n:
            raise GridError(f"{name} channel is {np.shape(vals)}, expected ({n}, {width}) on the robot grid")
    return FusedDataset(
        t=k / rate,
        position=robot.positions,
        laser_on=robot.laser_on,
        mp=mp[0],
        ac=ac[0],
        th=th[0],
        valid_mp=mp[1],
        valid_ac=ac[1],
        valid_th=th[1],
        rate=rate,
    )


def fuse_streams(robot: RobotStream, mp_features, ac_features, th_features, mode: str = LINEAR,
                 max_gap: float = 0.1, offsets=(0.0, 0.0, 0.0), rate: int = FUSED_HZ) -> FusedDataset:
    """Resample the three feature streams onto the robot grid and fuse."""
    ticks = grid_indices(robot.t, rate) / rate
    channels = []
    for feats, width, off in zip((mp_features, ac_features, th_features),
                                 (len(MP_CHANNELS), len(AC_CHANNELS), len(TH_CHANNELS)), offsets):
        if feats:
            t, v, ok = series_arrays(feats)
        else:
            t, v, ok = np.zeros(0), np.zeros((0, width)), np.zeros(0, bool)
        channels.append(resample_features(t, v, ok, ticks, mode, max_gap, off))
    return fuse(robot, *channels, rate=rate)


# ---------------------------------------------------------------------------
# digital twin


@dataclass(frozen=True)
class DigitalTwin:
    """Sparse voxel grid of per-channel feature statistics.

    Occupied voxels are rows of the arrays, sorted by (ix, iy, iz).
    Channel statistics are NaN where a voxel saw no valid value.
    """

    origin: tuple
    voxel_size: float
    dims: tuple
    keys: np.ndarray  # (m, 3) int
    count: np.ndarray  # (m,)
    n_valid: np.ndarray  # (m, C)
    mean: np.ndarray
    max: np.ndarray
    var: np.ndarray
    labels: tuple = ()
    out_of_bounds: int = 0
    channels: tuple = FEATURE_CHANNELS
    index: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.labels:
            object.__setattr__(self, "labels", ("",) * len(self.keys))
        if self.index is None:
            object.__setattr__(self, "index", {tuple(k): i for i, k in enumerate(self.keys.tolist())})

    def __len__(self):
        return len(self.keys)

    @property
    def layer(self) -> np.ndarray:
        return self.keys[:, 2]

    def centers(self) -> np.ndarray:
        return np.asarray(self.origin) + (self.keys + 0.5) * self.voxel_size

    def channel(self, name: str) -> int:
        return self.channels.index(name)

    def with_labels(self, labels) -> "DigitalTwin":
        labels = tuple(labels)
        if len(labels) != len(self):
            raise ValueError("one label per occupied voxel required")
        return replace(self, labels=labels, index=self.index)


def voxel_of(positions, origin, voxel_size) -> np.ndarray:
    return np.floor((np.asarray(positions, dtype=float) - np.asarray(origin, dtype=float)) / voxel_size).astype(np.int64)


def voxelize(d: FusedDataset, origin, voxel_size: float, dims) -> DigitalTwin:
    """Aggregate laser-on records into voxels with one-pass (Welford) statistics."""
    if voxel_size <= 0:
        raise ValueError("voxel_size must be > 0")
    dims = tuple(int(v) for v in dims)
    if len(dims) != 3 or min(dims) <= 0:
        raise ValueError(f"dims must be three positive integers, got {dims}")
    nc = len(FEATURE_CHANNELS)
    nm, na = len(MP_CHANNELS), len(AC_CHANNELS)
    feats = d.features
    chan_valid = np.zeros((len(d), nc), dtype=bool)
    chan_valid[:, :nm] = d.valid_mp[:, None]
    chan_valid[:, nm : nm + na] = d.valid_ac[:, None]
    chan_valid[:, nm + na :] = d.valid_th[:, None]
    ijk = voxel_of(d.position, origin, voxel_size)

    acc = {}
    oob = 0
    for r in np.flatnonzero(d.laser_on):
        key = tuple(ijk[r].tolist())
        if not all(0 <= key[a] < dims[a] for a in range(3)):
            oob += 1
            continue
        st = acc.get(key)
        if st is None:
            st = acc[key] = [0, np.zeros(nc), np.zeros(nc), np.zeros(nc), np.full(nc, -np.inf)]
        st[0] += 1
        ok = chan_valid[r]
        if not ok.any():
            continue
        x = feats[r]
        n, mean, m2, mx = st[1], st[2], st[3], st[4]
        n[ok] += 1
        delta = x[ok] - mean[ok]
        mean[ok] += delta / n[ok]
        m2[ok] += delta * (x[ok] - mean[ok])
        mx[ok] = np.maximum(mx[ok], x[ok])

    keys = sorted(acc)
    m = len(keys)
    count = np.array([acc[k][0] for k in keys], dtype=np.int64)
    n_valid = np.array([acc[k][1] for k in keys]).reshape(m, nc)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(n_valid > 0, np.array([acc[k][2] for k in keys]).reshape(m, nc), np.nan)
        var = np.where(n_valid > 0, np.array([acc[k][3] for k in keys]).reshape(m, nc) / n_valid, np.nan)
        mx = np.where(n_valid > 0, np.array([acc[k][4] for k in keys]).reshape(m, nc), np.nan)
    return DigitalTwin(
        origin=tuple(float(v) for v in origin),
        voxel_size=float(voxel_size),
        dims=dims,
        keys=np.array(keys, dtype=np.int64).reshape(m, 3),
        count=count,
        n_valid=n_valid.astype(np.int64),
        mean=mean,
        max=mx,
        var=var,
        out_of_bounds=oob,
    )


def twin_geometry(box_min, box_max, voxel_size: float) -> tuple:
    """(origin, dims) covering a build box."""
    origin = tuple(float(v) for v in box_min)
    dims = tuple(max(1, math.ceil((hi - lo) / voxel_size - 1e-9)) for lo, hi in zip(box_min, box_max))
    return origin, dims


def twin_header(channels=FEATURE_CHANNELS) -> list:
    head = ["ix", "iy", "iz", "cx", "cy", "cz", "count"]
    for c in channels:
        head += [f"mean_{c}", f"max_{c}", f"var_{c}"]
    return head + ["label"]


def export_twin(twin: DigitalTwin, path, meta_path=None) -> None:
    """Write ``twin.csv`` and its JSON metadata sidecar."""
    path = Path(path)
    meta_path = Path(meta_path) if meta_path else path.with_name(path.stem + "_meta.json")
    centers = twin.centers()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(twin_header(twin.channels))
        for r in range(len(twin)):
            row = [*twin.keys[r].tolist(), *map(fmt, centers[r]), int(twin.count[r])]
            for c in range(len(twin.channels)):
                for v in (twin.mean[r, c], twin.max[r, c], twin.var[r, c]):
                    row.append(fmt(v) if math.isfinite(v) else "")
            row.append(twin.labels[r])
            w.writerow(row)
    meta = {
        "origin": list(twin.origin),
        "voxel_size": twin.voxel_size,
        "dims": list(twin.dims),
        "out_of_bounds": twin.out_of_bounds,
        "channels": list(twin.channels),
    }
    meta_path.write_text(json.dumps(meta, indent=2) + "\n")


def read_twin(path, meta_path=None) -> DigitalTwin:
    path = Path(path)
    meta_path = Path(meta_path) if meta_path else path.with_name(path.stem + "_meta.json")
    meta = json.loads(meta_path.read_text())
    channels = tuple(meta["channels"])
    nc = len(channels)
    keys, count, stats, labels = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader) != twin_header(channels):
            raise ValueError(f"{path}: unexpected header")
        for row in reader:
            if not row:
                continue
            keys.append([int(v) for v in row[:3]])
            count.append(int(row[6]))
            stats.append([float(v) if v != "" else math.nan for v in row[7 : 7 + 3 * nc]])
            labels.append(row[-1])
    m = len(keys)
    stats = np.array(stats, dtype=float).reshape(m, nc, 3)
    count = np.array(count, dtype=np.int64)
    n_valid = np.where(np.isfinite(stats[:, :, 0]), count[:, None], 0)
    return DigitalTwin(
        origin=tuple(meta["origin"]),
        voxel_size=float(meta["voxel_size"]),
        dims=tuple(meta["dims"]),
        keys=np.array(keys, dtype=np.int64).reshape(m, 3),
        count=count,
        n_valid=n_valid,
        mean=stats[:, :, 0],
        max=stats[:, :, 1],
        var=stats[:, :, 2],
        labels=tuple(labels),
        out_of_bounds=int(meta["out_of_bounds"]),
        channels=channels,
    )
