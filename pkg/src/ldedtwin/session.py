"""Session data model, on-disk formats and validated load/store.

A session directory holds one recorded (or simulated) build::

    manifest.json
    audio.wav                    PCM s16le mono
    meltpool/index.csv           t,filename
    meltpool/frame_NNNNNN.pgm    binary P5, 8-bit
    thermal.bin                  u32 W, u32 H, u32 N, then N x (f64 t, W*H f32)
    robot.csv                    t,x,y,z,laser_on,feed
    scans/index.csv              t,layer,filename
    scans/scan_NNN.xyz           ascii "x y z" per line

All timestamps are seconds since session start.  Text formats carry them
with 9 significant digits.
"""

from __future__ import annotations

import csv
import json
import math
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

AUDIO_HZ = 44100
MELTPOOL_HZ = 30
THERMAL_HZ = 120
ROBOT_HZ = 250
FUSED_HZ = ROBOT_HZ

RATE_TOLERANCE = 0.01

MP_CHANNELS = ("area", "mu20", "mu02", "mu11", "hull_area", "width", "length")
AC_CHANNELS = ("ae", "sc", "sbw", "sr") + tuple(f"mfcc{i:02d}" for i in range(20))
TH_CHANNELS = ("peak", "mean", "variance", "kurtosis")
FEATURE_CHANNELS = (
    tuple(f"mp_{c}" for c in MP_CHANNELS)
    + tuple(f"ac_{c}" for c in AC_CHANNELS)
    + tuple(f"th_{c}" for c in TH_CHANNELS)
)


class SessionFormatError(ValueError):
    """Malformed or inconsistent session content.

    ``stream`` names the offending stream and ``index`` the first bad
    record (zero-based, data rows only) when that is meaningful.
    """

    def __init__(self, message, stream=None, index=None):
        if stream is not None:
            where = f"{stream}" if index is None else f"{stream}[{index}]"
            message = f"{where}: {message}"
        super().__init__(message)
        self.stream = stream
        self.index = index


def fmt(value) -> str:
    """Format a real for text output: 9 significant digits."""
    return format(float(value), ".9g")


def _frozen(a, dtype=None):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Manifest:
    audio_hz: int = AUDIO_HZ
    meltpool_hz: int = MELTPOOL_HZ
    thermal_hz: int = THERMAL_HZ
    robot_hz: int = ROBOT_HZ
    meltpool_size: tuple = (64, 64)  # (W, H)
    thermal_size: tuple = (32, 24)
    box_min: tuple = (0.0, 0.0, 0.0)
    box_max: tuple = (1.0, 1.0, 1.0)
    layer_height: float = 0.5
    emissivity_melt: float = 0.3
    emissivity_haz: float = 0.5
    melt_threshold_k: float = 1000.0
    haz_threshold_k: float = 500.0

    def to_json(self) -> dict:
        return {
            "rates": {
                "audio_hz": self.audio_hz,
                "meltpool_hz": self.meltpool_hz,
                "thermal_hz": self.thermal_hz,
                "robot_hz": self.robot_hz,
            },
            "image_dims": {
                "meltpool": {"width": self.meltpool_size[0], "height": self.meltpool_size[1]},
                "thermal": {"width": self.thermal_size[0], "height": self.thermal_size[1]},
            },
            "build_box_mm": {"min": list(self.box_min), "max": list(self.box_max)},
            "layer_height_mm": self.layer_height,
            "emissivity": {"melt_pool": self.emissivity_melt, "haz": self.emissivity_haz},
            "thermal_thresholds_k": {"melt": self.melt_threshold_k, "haz": self.haz_threshold_k},
        }

    @classmethod
    def from_json(cls, d: dict) -> "Manifest":
        try:
            rates = d["rates"]
            dims = d["image_dims"]
            box = d["build_box_mm"]
            emis = d.get("emissivity", {})
            thr = d.get("thermal_thresholds_k", {})
            return cls(
                audio_hz=int(rates["audio_hz"]),
                meltpool_hz=int(rates["meltpool_hz"]),
                thermal_hz=int(rates["thermal_hz"]),
                robot_hz=int(rates["robot_hz"]),
                meltpool_size=(int(dims["meltpool"]["width"]), int(dims["meltpool"]["height"])),
                thermal_size=(int(dims["thermal"]["width"]), int(dims["thermal"]["height"])),
                box_min=tuple(float(v) for v in box["min"]),
                box_max=tuple(float(v) for v in box["max"]),
                layer_height=float(d["layer_height_mm"]),
                emissivity_melt=float(emis.get("melt_pool", 0.3)),
                emissivity_haz=float(emis.get("haz", 0.5)),
                melt_threshold_k=float(thr.get("melt", 1000.0)),
                haz_threshold_k=float(thr.get("haz", 500.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SessionFormatError(f"bad manifest field: {exc}", "manifest") from exc


@dataclass(frozen=True)
class RobotStream:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    laser_on: np.ndarray
    feed: np.ndarray

    def __post_init__(self):
        for name in ("t", "x", "y", "z", "feed"):
            object.__setattr__(self, name, _frozen(getattr(self, name), float))
        object.__setattr__(self, "laser_on", _frozen(self.laser_on, bool))

    def __len__(self):
        return len(self.t)

    @property
    def positions(self) -> np.ndarray:
        return np.column_stack([self.x, self.y, self.z])


@dataclass(frozen=True)
class Scan:
    t: float
    layer: int
    points: np.ndarray  # (n, 3) mm

    def __post_init__(self):
        object.__setattr__(self, "points", _frozen(np.reshape(self.points, (-1, 3)), float))


@dataclass(frozen=True)
class Session:
    manifest: Manifest
    audio: np.ndarray  # float samples in [-1, 1]
    meltpool_t: np.ndarray
    meltpool_frames: np.ndarray  # (N, H, W) uint8
    thermal_t: np.ndarray
    thermal_frames: np.ndarray  # (N, H, W) float32 kelvin, apparent
    robot: RobotStream
    scans: tuple = ()
    audio_rate: int = AUDIO_HZ

    def __post_init__(self):
        object.__setattr__(self, "audio", _frozen(self.audio, float))
        object.__setattr__(self, "meltpool_t", _frozen(self.meltpool_t, float))
        object.__setattr__(self, "meltpool_frames", _frozen(self.meltpool_frames, np.uint8))
        object.__setattr__(self, "thermal_t", _frozen(self.thermal_t, float))
        object.__setattr__(self, "thermal_frames", _frozen(self.thermal_frames, np.float32))
        object.__setattr__(self, "scans", tuple(self.scans))

    @property
    def duration(self) -> float:
        return float(self.robot.t[-1]) if len(self.robot) else 0.0


@dataclass(frozen=True)
class Violation:
    kind: str
    stream: str
    message: str

    def __str__(self):
        return f"[{self.kind}] {self.stream}: {self.message}"


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    def __bool__(self):
        # truthy when the session is valid
        return not self.violations

    def __str__(self):
        if not self.violations:
            return "session valid"
        return "\n".join(str(v) for v in self.violations)


# ---------------------------------------------------------------------------
# low-level readers / writers


def check_timestamps(t, stream: str) -> None:
    """Raise SessionFormatError unless ``t`` is finite, >= 0, strictly increasing."""
    t = np.asarray(t, dtype=float)
    bad = np.flatnonzero(~np.isfinite(t) | (t < 0))
    if bad.size:
        raise SessionFormatError("timestamp not finite or negative", stream, int(bad[0]))
    if t.size > 1:
        back = np.flatnonzero(np.diff(t) <= 0)
        if back.size:
            raise SessionFormatError("timestamps not strictly increasing", stream, int(back[0]) + 1)


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) 8-bit PGM into an (H, W) uint8 array."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise SessionFormatError(f"truncated PGM header in {path}", "meltpool")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise SessionFormatError(f"{path} is not a binary PGM (P5)", "meltpool")
    w, h, maxval = (int(v) for v in tokens[1:])
    if maxval != 255:
        raise SessionFormatError(f"{path}: only 8-bit PGM supported", "meltpool")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos) if len(data) - pos >= w * h else None
    if pixels is None:
        raise SessionFormatError(f"{path}: truncated pixel data", "meltpool")
    return pixels.reshape(h, w).copy()


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_wav(path) -> tuple:
    """Return (samples in [-1, 1], rate) from a mono 16-bit PCM WAV."""
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getnchannels() != 1 or wf.getsampwidth() != 2:
                raise SessionFormatError("audio must be mono 16-bit PCM", "audio")
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise SessionFormatError(f"bad WAV file: {exc}", "audio") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(float) / 32768.0
    return samples, rate


def write_wav(path, samples, rate: int = AUDIO_HZ) -> None:
    pcm = np.clip(np.round(np.asarray(samples, dtype=float) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(rate)
        wf.writeframes(pcm.tobytes())


def _thermal_dtype(w, h):
    return np.dtype([("t", "<f8"), ("T", "<f4", (h, w))])


def read_thermal(path) -> tuple:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise SessionFormatError("thermal.bin header truncated", "thermal")
    w, h, n = np.frombuffer(data, dtype="<u4", count=3)
    dt = _thermal_dtype(int(w), int(h))
    if len(data) - 12 != n * dt.itemsize:
        raise SessionFormatError(
            f"thermal.bin size mismatch: header says {n} frames of {w}x{h}", "thermal"
        )
    blocks = np.frombuffer(data, dtype=dt, count=int(n), offset=12)
    return blocks["t"].astype(float), blocks["T"].astype(np.float32)


def write_thermal(path, t, frames) -> None:
    frames = np.asarray(frames, dtype="<f4")
    n, h, w = frames.shape
    blocks = np.empty(n, dtype=_thermal_dtype(w, h))
    blocks["t"] = t
    blocks["T"] = frames
    with open(path, "wb") as fh:
        fh.write(np.array([w, h, n], dtype="<u4").tobytes())
        fh.write(blocks.tobytes())


def _read_csv_rows(path, stream: str, header: list) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            got = next(reader)
        except StopIteration:
            raise SessionFormatError(f"{path} is empty", stream) from None
        if [h.strip() for h in got] != header:
            raise SessionFormatError(f"expected header {','.join(header)}, got {','.join(got)}", stream)
        return [row for row in reader if row]


def read_robot(path) -> RobotStream:
    header = ["t", "x", "y", "z", "laser_on", "feed"]
    rows = _read_csv_rows(path, "robot", header)
    vals = np.empty((len(rows), 6))
    for i, row in enumerate(rows):
        if len(row) != 6:
            raise SessionFormatError(f"expected 6 fields, got {len(row)}", "robot", i)
        try:
            vals[i] = [float(v) for v in row]
        except ValueError as exc:
            raise SessionFormatError(str(exc), "robot", i) from None
        if row[4].strip() not in ("0", "1"):
            raise SessionFormatError(f"laser_on must be 0 or 1, got {row[4]!r}", "robot", i)
    check_timestamps(vals[:, 0], "robot")
    return RobotStream(vals[:, 0], vals[:, 1], vals[:, 2], vals[:, 3], vals[:, 4] > 0.5, vals[:, 5])


def write_robot(path, robot: RobotStream) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x", "y", "z", "laser_on", "feed"])
        for t, x, y, z, on, f in zip(robot.t, robot.x, robot.y, robot.z, robot.laser_on, robot.feed):
            w.writerow([fmt(t), fmt(x), fmt(y), fmt(z), int(on), fmt(f)])


def read_xyz(path) -> np.ndarray:
    try:
        pts = np.loadtxt(path, dtype=float, ndmin=2)
    except ValueError as exc:
        raise SessionFormatError(f"{path}: {exc}", "scans") from None
    if pts.size == 0:
        return np.empty((0, 3))
    if pts.shape[1] != 3:
        raise SessionFormatError(f"{path}: expected 3 columns", "scans")
    return pts


def write_xyz(path, points) -> None:
    with open(path, "w") as fh:
        for x, y, z in np.asarray(points, dtype=float).reshape(-1, 3):
            fh.write(f"{fmt(x)} {fmt(y)} {fmt(z)}\n")


# ---------------------------------------------------------------------------
# session level


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing session file: {path}")
    return path


def load_session(directory) -> Session:
    """Parse a session directory, checking per-stream timestamp discipline."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"session directory not found: {d}")
    try:
        manifest = Manifest.from_json(json.loads(_require(d / "manifest.json").read_text()))
    except json.JSONDecodeError as exc:
        raise SessionFormatError(f"manifest.json: {exc}", "manifest") from None

    audio, rate = read_wav(_require(d / "audio.wav"))

    rows = _read_csv_rows(_require(d / "meltpool" / "index.csv"), "meltpool", ["t", "filename"])
    mp_t = np.empty(len(rows))
    frames = []
    for i, row in enumerate(rows):
        try:
            mp_t[i] = float(row[0])
        except (ValueError, IndexError):
            raise SessionFormatError(f"malformed row {row!r}", "meltpool", i) from None
        frames.append(read_pgm(_require(d / "meltpool" / row[1].strip())))
    check_timestamps(mp_t, "meltpool")
    w, h = manifest.meltpool_size
    for i, f in enumerate(frames):
        if f.shape != (h, w):
            raise SessionFormatError(f"frame is {f.shape[1]}x{f.shape[0]}, manifest says {w}x{h}", "meltpool", i)
    mp_frames = np.stack(frames) if frames else np.zeros((0, h, w), np.uint8)

    th_t, th_frames = read_thermal(_require(d / "thermal.bin"))
    check_timestamps(th_t, "thermal")

    robot = read_robot(_require(d / "robot.csv"))
    if len(robot) == 0:
        raise SessionFormatError("robot stream is empty", "robot")

    scans = []
    scan_index = d / "scans" / "index.csv"
    if scan_index.exists():
        rows = _read_csv_rows(scan_index, "scans", ["t", "layer", "filename"])
        for i, row in enumerate(rows):
            try:
                t, layer = float(row[0]), int(row[1])
            except (ValueError, IndexError):
                raise SessionFormatError(f"malformed row {row!r}", "scans", i) from None
            scans.append(Scan(t, layer, read_xyz(_require(d / "scans" / row[2].strip()))))
        check_timestamps([s.t for s in scans], "scans")

    return Session(
        manifest=manifest,
        audio=audio,
        meltpool_t=mp_t,
        meltpool_frames=mp_frames,
        thermal_t=th_t,
        thermal_frames=th_frames,
        robot=robot,
        scans=tuple(scans),
        audio_rate=rate,
    )


def write_session(s: Session, directory) -> None:
    d = Path(directory)
    (d / "meltpool").mkdir(parents=True, exist_ok=True)
    (d / "scans").mkdir(parents=True, exist_ok=True)
    (d / "manifest.json").write_text(json.dumps(s.manifest.to_json(), indent=2, sort_keys=True) + "\n")
    write_wav(d / "audio.wav", s.audio, s.audio_rate)
    with open(d / "meltpool" / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "filename"])
        for i, (t, img) in enumerate(zip(s.meltpool_t, s.meltpool_frames)):
            name = f"frame_{i:06d}.pgm"
            write_pgm(d / "meltpool" / name, img)
            w.writerow([fmt(t), name])
    write_thermal(d / "thermal.bin", s.thermal_t, s.thermal_frames)
    write_robot(d / "robot.csv", s.robot)
    with open(d / "scans" / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "layer", "filename"])
        for i, scan in enumerate(s.scans):
            name = f"scan_{i:03d}.xyz"
            write_xyz(d / "scans" / name, scan.points)
            w.writerow([fmt(scan.t), scan.layer, name])


def _rate_violation(stream, t, declared):
    if len(t) < 2:
        return None
    observed = (len(t) - 1) / (t[-1] - t[0])
    if abs(observed - declared) > RATE_TOLERANCE * declared:
        return Violation(
            "rate_mismatch", stream, f"observed {observed:.4g} Hz vs declared {declared} Hz"
        )
    return None


def validate_session(s: Session, frame_size: int = 2048) -> ValidationReport:
    """Collect invariant violations without raising or mutating ``s``."""
    report = ValidationReport()
    m = s.manifest
    streams = {
        "robot": (np.asarray(s.robot.t), m.robot_hz),
        "meltpool": (np.asarray(s.meltpool_t), m.meltpool_hz),
        "thermal": (np.asarray(s.thermal_t), m.thermal_hz),
    }
    for name, (t, declared) in streams.items():
        try:
            check_timestamps(t, name)
        except SessionFormatError as exc:
            report.violations.append(Violation("timestamps", name, str(exc)))
            continue
        v = _rate_violation(name, t, declared)
        if v:
            report.violations.append(v)
    if len(s.robot) == 0:
        report.violations.append(Violation("empty", "robot", "robot stream is empty"))
    if s.audio_rate != m.audio_hz:
        report.violations.append(
            Violation("rate_mismatch", "audio", f"WAV rate {s.audio_rate} Hz vs declared {m.audio_hz} Hz")
        )
    if not np.all(np.isfinite(s.audio)):
        report.violations.append(Violation("non_finite", "audio", "non-finite samples"))
    if len(s.robot):
        expected = s.duration * m.audio_hz
        short = expected - len(s.audio)
        if abs(short) > frame_size:
            report.violations.append(
                Violation(
                    "duration_mismatch",
                    "audio",
                    f"{len(s.audio)} samples ({len(s.audio) / m.audio_hz:.4g} s) vs robot duration {s.duration:.4g} s",
                )
            )
    th = s.thermal_frames
    if th.size and (not np.all(np.isfinite(th)) or th.min() <= 0):
        report.violations.append(Violation("range", "thermal", "temperatures must be finite and > 0 K"))
    w, h = m.thermal_size
    if th.ndim == 3 and th.shape[1:] != (h, w):
        report.violations.append(Violation("dims", "thermal", f"frames {th.shape[2]}x{th.shape[1]} vs manifest {w}x{h}"))
    for i, scan in enumerate(s.scans):
        if not np.all(np.isfinite(scan.points)):
            report.violations.append(Violation("non_finite", "scans", f"scan {i} has non-finite points"))
    return report


# ---------------------------------------------------------------------------
# fused dataset


@dataclass(frozen=True)
class FusedDataset:
    """Feature channels aligned on the 250 Hz robot grid.

    Columnar: ``mp`` (N, 7), ``ac`` (N, 24), ``th`` (N, 4); invalid
    channel rows hold NaN.
    """

    t: np.ndarray
    position: np.ndarray  # (N, 3)
    laser_on: np.ndarray
    mp: np.ndarray
    ac: np.ndarray
    th: np.ndarray
    valid_mp: np.ndarray
    valid_ac: np.ndarray
    valid_th: np.ndarray
    rate: int = FUSED_HZ

    def __post_init__(self):
        n = len(self.t)
        for name, width, dtype in (
            ("t", None, float),
            ("position", 3, float),
            ("laser_on", None, bool),
            ("mp", len(MP_CHANNELS), float),
            ("ac", len(AC_CHANNELS), float),
            ("th", len(TH_CHANNELS), float),
            ("valid_mp", None, bool),
            ("valid_ac", None, bool),
            ("valid_th", None, bool),
        ):
            a = np.asarray(getattr(self, name), dtype=dtype)
            if width is not None:
                a = a.reshape(n, width)
            if len(a) != n:
                raise ValueError(f"column {name} has {len(a)} rows, expected {n}")
            object.__setattr__(self, name, _frozen(a, dtype))

    def __len__(self):
        return len(self.t)

    @property
    def features(self) -> np.ndarray:
        """(N, 35) matrix in FEATURE_CHANNELS order."""
        return np.hstack([self.mp, self.ac, self.th])

    @classmethod
    def empty(cls) -> "FusedDataset":
        z = np.zeros(0)
        return cls(z, np.zeros((0, 3)), z, np.zeros((0, 7)), np.zeros((0, 24)), np.zeros((0, 4)), z, z, z)


FUSED_HEADER = ["t", "x", "y", "z", "laser_on", *FEATURE_CHANNELS, "valid_mp", "valid_ac", "valid_th"]


def write_fused(d: FusedDataset, path) -> None:
    """Write ``fused.csv``; invalid channel values are left empty."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FUSED_HEADER)
        for i in range(len(d)):
            row = [fmt(d.t[i]), *(fmt(v) for v in d.position[i]), int(d.laser_on[i])]
            for vals, ok in ((d.mp[i], d.valid_mp[i]), (d.ac[i], d.valid_ac[i]), (d.th[i], d.valid_th[i])):
                row.extend(fmt(v) if ok else "" for v in vals)
            row.extend([int(d.valid_mp[i]), int(d.valid_ac[i]), int(d.valid_th[i])])
            w.writerow(row)


def read_fused(path) -> FusedDataset:
    rows = _read_csv_rows(path, "fused", FUSED_HEADER)
    n = len(rows)
    if n == 0:
        return FusedDataset.empty()
    ncol = len(FUSED_HEADER)
    vals = np.full((n, ncol), np.nan)
    for i, row in enumerate(rows):
        if len(row) != ncol:
            raise SessionFormatError(f"expected {ncol} fields, got {len(row)}", "fused", i)
        try:
            vals[i] = [float(v) if v != "" else math.nan for v in row]
        except ValueError as exc:
            raise SessionFormatError(str(exc), "fused", i) from None
    nm, na, nt = len(MP_CHANNELS), len(AC_CHANNELS), len(TH_CHANNELS)
    c = 5
    return FusedDataset(
        t=vals[:, 0],
        position=vals[:, 1:4],
        laser_on=vals[:, 4] > 0.5,
        mp=vals[:, c : c + nm],
        ac=vals[:, c + nm : c + nm + na],
        th=vals[:, c + nm + na : c + nm + na + nt],
        valid_mp=vals[:, -3] > 0.5,
        valid_ac=vals[:, -2] > 0.5,
        valid_th=vals[:, -1] > 0.5,
    )
