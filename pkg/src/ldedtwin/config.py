"""Pipeline tunables: defaults, JSON loading and range checks."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .fusion import HOLD, LINEAR


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    # melt-pool vision
    meltpool_threshold: int | None = None  # None selects Otsu
    min_pixels: int = 5
    min_contrast: float = 50.0
    weighting: str = "binary"
    # acoustics
    frame_size: int = 2048
    hop: int = 512
    rolloff: float = 0.85
    window: str = "hann"
    denoise: bool = True
    gate_k: float = 1.5
    # thermal; None takes the session manifest value
    melt_threshold: float | None = None
    haz_threshold: float | None = None
    eps_melt: float | None = None
    eps_haz: float | None = None
    # fusion
    mode: str = LINEAR
    max_gap: float = 0.1
    voxel_size: float = 0.5
    # labeling
    width_spike_z: float = 3.0
    area_high_z: float = 2.0
    baseline_window: int = 1
    k: int = 5
    # surface scans; tau None means a quarter of the layer height
    cell_size: float = 1.0
    tau: float | None = None
    min_cells: int = 4
    sor_k: int = 8
    sor_sigma: float = 2.0
    # correction
    hatch: float = 1.0
    base_power: float = 800.0
    power_gain: float = 0.1
    deposit_feed: float = 10.0
    machine_feed: float = 20.0
    # simulation
    seed: int = 7

    def __post_init__(self):
        positive = ("frame_size", "hop", "voxel_size", "width_spike_z", "area_high_z", "baseline_window", "k",
                    "cell_size", "min_cells", "sor_k", "sor_sigma", "hatch", "base_power", "deposit_feed",
                    "machine_feed", "min_pixels")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ("melt_threshold", "haz_threshold", "tau"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(f"{name} must be > 0, got {v}")
        for name in ("eps_melt", "eps_haz"):
            v = getattr(self, name)
            if v is not None and not 0 < v <= 1:
                raise ConfigError(f"{name} must be in (0, 1], got {v}")
        if self.meltpool_threshold is not None and not 0 <= self.meltpool_threshold <= 255:
            raise ConfigError("meltpool_threshold must be in [0, 255]")
        if self.hop > self.frame_size:
            raise ConfigError("hop must not exceed frame_size")
        if not 0 < self.rolloff <= 1:
            raise ConfigError("rolloff must be in (0, 1]")
        if self.window not in ("hann", "none"):
            raise ConfigError(f"unknown window {self.window!r}")
        if self.weighting not in ("binary", "intensity"):
            raise ConfigError(f"unknown weighting {self.weighting!r}")
        if self.mode not in (LINEAR, HOLD):
            raise ConfigError(f"unknown resample mode {self.mode!r}")
        for name in ("min_contrast", "gate_k", "max_gap", "power_gain", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    def to_json(self) -> dict:
        return asdict(self)

    def override(self, **kw) -> "PipelineConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


FIELD_NAMES = tuple(f.name for f in fields(PipelineConfig))


def load_config(path=None, **overrides) -> PipelineConfig:
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        unknown = sorted(set(data) - set(FIELD_NAMES))
        if unknown:
            raise ConfigError(f"{path}: unknown keys {unknown}")
    try:
        cfg = PipelineConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.override(**overrides)
