"""File-to-file pipeline stages shared by the CLI subcommands.

Each stage reads its inputs from the session and output directories and
writes its artifacts to the output directory, so chaining stages through
files is the same as running them one by one.
"""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path

import numpy as np

from . import acoustic, fusion, meltpool, quality, sim, surface, thermal
from . import toolpath as tp
from .config import PipelineConfig
from .session import FusedDataset, fmt, load_session, read_fused, validate_session, write_fused

log = logging.getLogger(__name__)

MP_CSV = "meltpool_features.csv"
AC_CSV = "acoustic_features.csv"
TH_CSV = "thermal_features.csv"
FUSED_CSV = "fused.csv"
TWIN_CSV = "twin.csv"
LABELED_CSV = "twin_labeled.csv"
REGIONS_CSV = "regions.csv"
METRICS_CSV = "metrics.csv"
SURFACE_CSV = "surface_regions.csv"
PLAN_CSV = "plan.csv"
TOOLPATH_CSV = "toolpath.csv"
GROUND_TRUTH = "ground_truth.json"


class ValidationFailed(ValueError):
    def __init__(self, report):
        super().__init__(str(report))
        self.report = report


def _session(session_dir):
    s = load_session(session_dir)
    report = validate_session(s)
    if not report:
        raise ValidationFailed(report)
    return s


def _out(out) -> Path:
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def thermal_config(cfg: PipelineConfig, manifest) -> thermal.ThermalConfig:
    pick = lambda v, default: default if v is None else v  # noqa: E731
    return thermal.ThermalConfig(
        melt_threshold=pick(cfg.melt_threshold, manifest.melt_threshold_k),
        haz_threshold=pick(cfg.haz_threshold, manifest.haz_threshold_k),
        eps_melt=pick(cfg.eps_melt, manifest.emissivity_melt),
        eps_haz=pick(cfg.eps_haz, manifest.emissivity_haz),
    )


def acoustic_series(s, cfg: PipelineConfig) -> list:
    ac_cfg = acoustic.AcousticConfig(cfg.frame_size, cfg.hop, cfg.rolloff, cfg.window, cfg.denoise, cfg.gate_k)
    x = np.asarray(s.audio)
    if cfg.denoise:
        span = acoustic.noise_interval(s.robot.t, s.robot.laser_on)
        if span is None:
            log.warning("no laser-off interval of 0.5 s for a noise profile; using raw audio")
        else:
            a, b = (int(round(v * s.audio_rate)) for v in span)
            x = acoustic.denoise_spectral_gate(x, x[a:b], cfg.gate_k, s.audio_rate, cfg.frame_size, cfg.hop)
    return acoustic.extract_acoustic_features(x, s.audio_rate, ac_cfg)


def run_features(session_dir, out, cfg: PipelineConfig) -> None:
    s = _session(session_dir)
    o = _out(out)
    mp_cfg = meltpool.MeltPoolConfig(cfg.meltpool_threshold, cfg.min_pixels, cfg.weighting, cfg.min_contrast)
    meltpool.write_features_csv(meltpool.extract_series(s.meltpool_t, s.meltpool_frames, mp_cfg), o / MP_CSV)
    acoustic.write_features_csv(acoustic_series(s, cfg), o / AC_CSV)
    th_cfg = thermal_config(cfg, s.manifest)
    thermal.write_features_csv(thermal.extract_series(s.thermal_t, s.thermal_frames, th_cfg), o / TH_CSV)


def run_fuse(session_dir, out, cfg: PipelineConfig) -> FusedDataset:
    s = _session(session_dir)
    o = _out(out)
    d = fusion.fuse_streams(
        s.robot,
        meltpool.read_features_csv(o / MP_CSV),
        acoustic.read_features_csv(o / AC_CSV),
        thermal.read_features_csv(o / TH_CSV),
        mode=cfg.mode,
        max_gap=cfg.max_gap,
    )
    write_fused(d, o / FUSED_CSV)
    return d


def run_twin(session_dir, out, cfg: PipelineConfig) -> fusion.DigitalTwin:
    s = load_session(session_dir)
    o = _out(out)
    origin, dims = fusion.twin_geometry(s.manifest.box_min, s.manifest.box_max, cfg.voxel_size)
    twin = fusion.voxelize(read_fused(o / FUSED_CSV), origin, cfg.voxel_size, dims)
    if twin.out_of_bounds:
        log.warning("%d laser-on records fell outside the build box", twin.out_of_bounds)
    fusion.export_twin(twin, o / TWIN_CSV)
    return twin


def rule_thresholds(cfg: PipelineConfig) -> quality.RuleThresholds:
    return quality.RuleThresholds(cfg.width_spike_z, cfg.area_high_z, cfg.baseline_window)


METRICS_HEADER = ["label", "tp", "fp", "fn", "precision", "recall"]


def write_metrics(metrics: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for lab, m in metrics.items():
            w.writerow([lab, m["tp"], m["fp"], m["fn"], fmt(m["precision"]), fmt(m["recall"])])


def run_detect(session_dir, out, cfg: PipelineConfig):
    o = _out(out)
    twin = fusion.read_twin(o / TWIN_CSV)
    labeled = quality.label_rules(twin, rule_thresholds(cfg))
    fusion.export_twin(labeled, o / LABELED_CSV)
    regions = quality.extract_regions_3d(labeled)
    quality.write_regions3d_csv(regions, o / REGIONS_CSV)
    metrics = None
    gt_path = Path(session_dir) / GROUND_TRUTH
    if gt_path.exists():
        gt = sim.read_ground_truth(gt_path)
        truth = sim.ground_truth_twin(gt, labeled.origin, labeled.voxel_size, labeled.dims)
        predicted = dict(zip(map(tuple, labeled.keys.tolist()), labeled.labels))
        metrics = quality.label_metrics(predicted, truth)
        write_metrics(metrics, o / METRICS_CSV)
    return labeled, regions, metrics


def surface_regions(s, cfg: PipelineConfig) -> list:
    m = s.manifest
    h = m.layer_height
    tau = cfg.tau if cfg.tau is not None else 0.25 * h
    out = []
    for scan in s.scans:
        nominal = (scan.layer + 1) * h
        _, regions = surface.scan_regions(
            scan.points, nominal, m.box_min, m.box_max, cfg.cell_size, tau, cfg.min_cells, cfg.sor_k,
            cfg.sor_sigma, z_floor=m.box_min[2] + 0.5 * h, layer=scan.layer,
        )
        out.extend(regions)
    return out


def toolpath_params(cfg: PipelineConfig, layer_height: float) -> quality.ToolpathParams:
    return quality.ToolpathParams(cfg.hatch, layer_height, cfg.base_power, cfg.power_gain, cfg.deposit_feed,
                                  cfg.machine_feed)


def run_correct(session_dir, out, cfg: PipelineConfig):
    s = load_session(session_dir)
    o = _out(out)
    labeled = fusion.read_twin(o / LABELED_CSV)
    regions = quality.extract_regions_3d(labeled)
    surf = surface_regions(s, cfg)
    surface.write_regions_csv(surf, o / SURFACE_CSV)
    z_top = None
    if len(labeled):
        z_top = labeled.origin[2] + (int(labeled.layer.max()) + 1) * labeled.voxel_size
    plan = quality.plan_correction(regions, surf, z_top)
    quality.write_plan_csv(plan, o / PLAN_CSV)
    segs = quality.generate_toolpath(plan, toolpath_params(cfg, s.manifest.layer_height)) if plan else []
    tp.write_toolpath_csv(segs, o / TOOLPATH_CSV)
    return plan, segs


def _long_rows(features, names, getter):
    for f in features:
        if not f.valid:
            continue
        for name in names:
            v = getter(f, name)
            if math.isfinite(v):
                yield [fmt(f.t), name, fmt(v)]


def run_report(session_dir, out, cfg: PipelineConfig) -> None:
    """Long-format (t, feature, value) traces plus per-layer medians."""
    o = _out(out)
    header = ["t", "feature", "value"]
    mp = meltpool.read_features_csv(o / MP_CSV)
    ac = acoustic.read_features_csv(o / AC_CSV)
    th = thermal.read_features_csv(o / TH_CSV)
    sources = (
        ("report_meltpool.csv", mp, ("area", "mu20", "mu02", "mu11", "hull_area", "width", "length"), getattr),
        ("report_acoustic.csv", ac, ("ae", "sc", "sbw", "sr", "mfcc00", "mfcc01", "mfcc02"),
         lambda f, n: f.mfcc[int(n[4:])] if n.startswith("mfcc") else getattr(f, n)),
        ("report_thermal.csv", th, ("peak", "mean", "variance", "kurtosis"), getattr),
    )
    for name, feats, names, getter in sources:
        with open(o / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(_long_rows(feats, names, getter))

    twin = fusion.read_twin(o / TWIN_CSV)
    with open(o / "report_layers.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "feature", "median"])
        for layer in np.unique(twin.layer).tolist():
            sel = twin.layer == layer
            for ch in ("mp_width", "mp_length", "mp_area", "th_peak", "ac_sc"):
                v = twin.mean[sel, twin.channel(ch)]
                v = v[np.isfinite(v)]
                if v.size:
                    w.writerow([layer, ch, fmt(np.median(v))])


STAGES = ("features", "fuse", "twin", "detect", "correct", "report")
RUNNERS = {
    "features": run_features,
    "fuse": run_fuse,
    "twin": run_twin,
    "detect": run_detect,
    "correct": run_correct,
    "report": run_report,
}


def run_all(session_dir, out, cfg: PipelineConfig) -> None:
    for name in STAGES:
        RUNNERS[name](session_dir, out, cfg)
