"""Deterministic synthetic thin-wall build with all sensor streams and ground truth.

The wall runs along x at y = 0.  Every layer starts with a laser-off dwell
at the pass start point, followed by one laser-on pass; passes alternate
direction.  All randomness comes from one seeded generator, consumed in a
fixed order, so equal specs give bit-identical sessions.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .session import (
    AUDIO_HZ,
    MELTPOOL_HZ,
    ROBOT_HZ,
    THERMAL_HZ,
    Manifest,
    RobotStream,
    Scan,
    Session,
    write_session,
)

OK = "ok"
CRACK = "crack"
KEYHOLE = "keyhole_pore"
_PRIORITY = {OK: 0, KEYHOLE: 1, CRACK: 2}

MELTPOOL_SIZE = (64, 64)  # (W, H)
THERMAL_SIZE = (32, 24)
AMBIENT_K = 300.0


@dataclass(frozen=True)
class Window:
    """Defect window: layers plus a time span relative to the pass start (s)."""

    kind: str
    layers: tuple
    t0: float
    t1: float

    def covers(self, layer: int, tau: float) -> bool:
        return layer in self.layers and self.t0 <= tau < self.t1


@dataclass(frozen=True)
class Dent:
    """Rectangular depression [x0, x1) x [y0, y1) in one layer's scan."""

    layer: int
    x0: float
    y0: float
    x1: float
    y1: float
    depth: float

    def contains(self, x, y):
        return (x >= self.x0) & (x < self.x1) & (y >= self.y0) & (y < self.y1)


@dataclass(frozen=True)
class BuildSpec:
    wall_length: float = 40.0  # mm
    n_layers: int = 12
    layer_height: float = 0.5  # mm
    speed: float = 10.0  # mm/s
    dwell: float = 1.0  # s laser-off before each pass
    wall_width: float = 12.0  # mm, as seen by the scanner
    windows: tuple = (
        Window(CRACK, (4, 5), 1.5, 2.1),
        Window(KEYHOLE, (9, 10, 11), 0.5, 3.0),
    )
    dents: tuple = (Dent(6, 16.0, -4.0, 24.0, 4.0, 0.5),)
    growth: float = 0.04  # melt-pool axis growth per layer
    temp_drift: float = 15.0  # K per layer
    crack_width_gain: float = 1.5
    keyhole_axis_gain: float = 1.35
    seed: int = 7

    def __post_init__(self):
        object.__setattr__(self, "windows", tuple(self.windows))
        object.__setattr__(self, "dents", tuple(self.dents))
        if self.n_layers < 3:
            raise ValueError("need at least 3 layers")
        for name in ("wall_length", "layer_height", "speed", "wall_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.dwell < 0:
            raise ValueError("dwell must be >= 0")
        for w in self.windows:
            if w.kind not in (CRACK, KEYHOLE):
                raise ValueError(f"unknown window kind {w.kind!r}")
            if not 0 <= w.t0 < w.t1 <= self.pass_time:
                raise ValueError(f"window span [{w.t0}, {w.t1}] outside the {self.pass_time} s pass")
            if any(not 0 <= layer < self.n_layers for layer in w.layers):
                raise ValueError(f"window layers {w.layers} outside the build")
        for a in range(len(self.windows)):
            for b in range(a + 1, len(self.windows)):
                wa, wb = self.windows[a], self.windows[b]
                shared = set(wa.layers) & set(wb.layers)
                if wa.kind != wb.kind and shared and wa.t0 < wb.t1 and wb.t0 < wa.t1:
                    raise ValueError(f"contradictory windows overlap on layers {sorted(shared)}")
        for d in self.dents:
            if not 0 <= d.layer < self.n_layers or d.depth <= 0 or d.x1 <= d.x0 or d.y1 <= d.y0:
                raise ValueError(f"invalid dent {d}")

    @property
    def pass_time(self) -> float:
        return self.wall_length / self.speed

    @property
    def layer_time(self) -> float:
        return self.dwell + self.pass_time

    @property
    def duration(self) -> float:
        return self.n_layers * self.layer_time

    @property
    def box_min(self) -> tuple:
        return (-1.0, -math.ceil(self.wall_width / 2 + 1), 0.0)

    @property
    def box_max(self) -> tuple:
        return (self.wall_length + 1, math.ceil(self.wall_width / 2 + 1), (self.n_layers + 2) * self.layer_height)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "BuildSpec":
        d = dict(d)
        d["windows"] = tuple(Window(w["kind"], tuple(w["layers"]), w["t0"], w["t1"]) for w in d.get("windows", ()))
        d["dents"] = tuple(Dent(**x) for x in d.get("dents", ()))
        return cls(**d)


def clean_spec(**kw) -> BuildSpec:
    """Default build with no defect windows or dents."""
    return BuildSpec(**{"windows": (), "dents": (), **kw})


# ---------------------------------------------------------------------------
# timeline


@dataclass(frozen=True)
class State:
    """Process state at sample times (vectorized)."""

    layer: np.ndarray
    tau: np.ndarray  # time since pass start (negative during dwell)
    laser_on: np.ndarray
    x: np.ndarray
    z: np.ndarray


def process_state(spec: BuildSpec, t) -> State:
    t = np.asarray(t, dtype=float)
    # rounding guards against k/rate landing a hair below a layer boundary
    layer = np.minimum(np.floor(np.round(t / spec.layer_time, 9)).astype(int), spec.n_layers - 1)
    tau = t - layer * spec.layer_time - spec.dwell
    tau = np.round(tau, 9)
    laser_on = (tau >= 0) & (tau < spec.pass_time)
    s = np.clip(tau, 0, spec.pass_time) * spec.speed
    x = np.where(layer % 2 == 0, s, spec.wall_length - s)
    z = (layer + 0.5) * spec.layer_height
    return State(layer, tau, laser_on, x, z)


def window_labels(spec: BuildSpec, st: State) -> np.ndarray:
    """Ground-truth label of every sample (laser-off samples are ok)."""
    lab = np.full(st.layer.shape, OK, dtype=object)
    for w in spec.windows:
        hit = st.laser_on & np.isin(st.layer, w.layers) & (st.tau >= w.t0) & (st.tau < w.t1)
        lab[hit] = w.kind
    return lab


def _factors(spec: BuildSpec, st: State):
    """Melt-pool (width, length) gains and keyhole mask."""
    wg = np.ones(st.layer.shape)
    lg = np.ones(st.layer.shape)
    lab = window_labels(spec, st)
    wg[lab == CRACK] *= spec.crack_width_gain
    kh = lab == KEYHOLE
    wg[kh] *= spec.keyhole_axis_gain
    lg[kh] *= spec.keyhole_axis_gain
    return wg, lg, lab


# ---------------------------------------------------------------------------
# streams


def _robot(spec: BuildSpec) -> RobotStream:
    n = int(round(spec.duration * ROBOT_HZ))
    t = np.arange(n + 1) / ROBOT_HZ
    st = process_state(spec, t)
    return RobotStream(t, st.x, np.zeros_like(t), st.z, st.laser_on, np.where(st.laser_on, spec.speed, 0.0))


def _meltpool(spec: BuildSpec, rng) -> tuple:
    n = int(math.floor(spec.duration * MELTPOOL_HZ))
    t = np.arange(n + 1) / MELTPOOL_HZ
    st = process_state(spec, t)
    wg, lg, _ = _factors(spec, st)
    w, h = MELTPOOL_SIZE
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    cx, cy = (w - 1) / 2, (h - 1) / 2
    frames = np.empty((len(t), h, w), dtype=np.uint8)
    jitter = rng.normal(0.0, 0.02, size=(len(t), 2))
    noise = rng.normal(0.0, 3.0, size=(len(t), h, w))
    spatter = rng.random(len(t)) < 0.05
    spatter_xy = rng.integers(2, 8, size=(len(t), 2))
    for k in range(len(t)):
        img = 20.0 + noise[k]
        if st.laser_on[k]:
            trend = (1 + spec.growth) ** st.layer[k]
            a = 6.0 * trend * wg[k] * (1 + jitter[k, 0])  # semi-axis across the track
            b = 10.0 * trend * lg[k] * (1 + jitter[k, 1])  # along the track
            q = ((xx - cx) / b) ** 2 + ((yy - cy) / a) ** 2
            img = img + 200.0 * np.exp(-(q**3))
            if spatter[k]:
                sx, sy = spatter_xy[k]
                img[sy : sy + 2, sx : sx + 2] += 150.0
        frames[k] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return t, frames


def _thermal(spec: BuildSpec, rng) -> tuple:
    n = int(math.floor(spec.duration * THERMAL_HZ))
    t = np.arange(n + 1) / THERMAL_HZ
    st = process_state(spec, t)
    _, _, lab = _factors(spec, st)
    w, h = THERMAL_SIZE
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    r2 = (xx - (w - 1) / 2) ** 2 + (yy - (h - 1) / 2) ** 2
    peak = np.where(st.laser_on, 1300.0 + spec.temp_drift * st.layer, 450.0)
    peak = peak + np.where(lab == KEYHOLE, 150.0, 0.0)
    sigma = np.where(st.laser_on, 3.0, 4.0)
    field = AMBIENT_K + (peak - AMBIENT_K)[:, None, None] * np.exp(-r2[None] / (2 * sigma[:, None, None] ** 2))
    field = field + rng.normal(0.0, 2.0, size=field.shape)
    return t, field.astype(np.float32)


def _audio(spec: BuildSpec, rng) -> np.ndarray:
    n = int(round(spec.duration * AUDIO_HZ)) + 1
    t = np.arange(n) / AUDIO_HZ
    st = process_state(spec, t)
    lab = window_labels(spec, st)
    env = rng.normal(0.0, 0.005, n)
    raw = rng.normal(0.0, 0.1, n)
    # process noise: one-pole low-pass; a weaker pole inside defect windows
    # tilts the spectrum upward
    normal = signal.lfilter([1 - 0.9], [1, -0.9], raw) * 3.0
    defect = signal.lfilter([1 - 0.7], [1, -0.7], raw) * 2.0
    proc = np.where(lab != OK, defect, normal)
    x = env + np.where(st.laser_on, proc, 0.0)
    return np.clip(x, -1.0, 1.0)


def _scans(spec: BuildSpec, rng) -> tuple:
    xs = np.arange(0.0, spec.wall_length + 1e-9, 0.5)
    half = spec.wall_width / 2
    ys = np.arange(-half, half + 1e-9, 0.5)
    gx, gy = np.meshgrid(xs, ys)
    gx, gy = gx.ravel(), gy.ravel()
    scans = []
    for layer in range(spec.n_layers):
        top = (layer + 1) * spec.layer_height
        z = top + rng.normal(0.0, 0.01, gx.size)
        for d in spec.dents:
            if d.layer == layer:
                z = np.where(d.contains(gx, gy), z - d.depth, z)
        pts = np.column_stack([gx, gy, z])
        # substrate returns beside the wall and sparse outliers above it
        sub_x = rng.uniform(0.0, spec.wall_length, 40)
        sub_y = np.where(rng.random(40) < 0.5, -half - 0.5, half + 0.5)
        substrate = np.column_stack([sub_x, sub_y, rng.normal(0.0, 0.01, 40)])
        out_n = 10
        outliers = np.column_stack([
            rng.uniform(0.0, spec.wall_length, out_n),
            rng.uniform(-half, half, out_n),
            top + rng.uniform(2.0, 4.0, out_n),
        ])
        scans.append(Scan((layer + 1) * spec.layer_time, layer, np.vstack([pts, substrate, outliers])))
    return tuple(scans)


# ---------------------------------------------------------------------------
# ground truth


@dataclass(frozen=True)
class GroundTruth:
    spec: BuildSpec
    windows: tuple = field(default=())
    dents: tuple = field(default=())

    def to_json(self) -> dict:
        return {
            "spec": self.spec.to_json(),
            "windows": [asdict(w) for w in self.windows],
            "dents": [asdict(d) for d in self.dents],
            "voxel_labels": "derived from windows intersected with the deposition path",
        }

    @classmethod
    def from_json(cls, d: dict) -> "GroundTruth":
        spec = BuildSpec.from_json(d["spec"])
        return cls(spec, spec.windows, spec.dents)

    def dent_cells(self, layer: int, origin, cell_size: float) -> set:
        """Height-map cells whose every scan point lies inside a dent."""
        cells = set()
        for d in self.dents:
            if d.layer != layer:
                continue
            i0 = math.ceil((d.x0 - origin[0]) / cell_size - 1e-9)
            i1 = math.floor((d.x1 - origin[0]) / cell_size + 1e-9)
            j0 = math.ceil((d.y0 - origin[1]) / cell_size - 1e-9)
            j1 = math.floor((d.y1 - origin[1]) / cell_size + 1e-9)
            cells |= {(i, j) for i in range(i0, i1) for j in range(j0, j1)}
        return cells


def write_ground_truth(gt: GroundTruth, path) -> None:
    Path(path).write_text(json.dumps(gt.to_json(), indent=2, sort_keys=True) + "\n")


def read_ground_truth(path) -> GroundTruth:
    return GroundTruth.from_json(json.loads(Path(path).read_text()))


def ground_truth_twin(gt: GroundTruth, origin, voxel_size: float, dims) -> dict:
    """Voxel key -> majority label of the laser-on robot samples inside it.

    Ties go to the defect label (crack over keyhole over ok).
    """
    spec = gt.spec
    robot = _robot(spec)
    on = np.asarray(robot.laser_on)
    st = process_state(spec, robot.t)
    lab = window_labels(spec, st)[on]
    ijk = np.floor((robot.positions[on] - np.asarray(origin, dtype=float)) / voxel_size).astype(int)
    if np.any(ijk < 0) or np.any(ijk >= np.asarray(dims)):
        raise ValueError("twin geometry does not cover the simulated deposition path")
    votes = {}
    for key, lb in zip(map(tuple, ijk.tolist()), lab):
        votes.setdefault(key, Counter())[lb] += 1
    return {k: max(c.items(), key=lambda kv: (kv[1], _PRIORITY[kv[0]]))[0] for k, c in votes.items()}


# ---------------------------------------------------------------------------


def simulate_build(spec: BuildSpec | None = None) -> tuple:
    """Generate a complete session and its ground truth."""
    spec = spec or BuildSpec()
    rng = np.random.default_rng(spec.seed)
    robot = _robot(spec)
    mp_t, mp_frames = _meltpool(spec, rng)
    th_t, th_frames = _thermal(spec, rng)
    audio = _audio(spec, rng)
    scans = _scans(spec, rng)
    manifest = Manifest(
        meltpool_size=MELTPOOL_SIZE,
        thermal_size=THERMAL_SIZE,
        box_min=tuple(float(v) for v in spec.box_min),
        box_max=tuple(float(v) for v in spec.box_max),
        layer_height=spec.layer_height,
    )
    session = Session(manifest, audio, mp_t, mp_frames, th_t, th_frames, robot, scans)
    return session, GroundTruth(spec, spec.windows, spec.dents)


def write_simulation(spec: BuildSpec, directory) -> tuple:
    session, gt = simulate_build(spec)
    write_session(session, directory)
    write_ground_truth(gt, Path(directory) / "ground_truth.json")
    return session, gt
