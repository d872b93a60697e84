"""Command-line entry point: ``ldedtwin <subcommand> [options]``.

Exit codes: 0 success, 1 validation / format failure, 2 I/O error,
64 usage error (unknown subcommand or bad flags).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from . import sim
from .config import ConfigError, load_config
from .fusion import GridError
from .session import SessionFormatError

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_USAGE = 0, 1, 2, 64
SUBCOMMANDS = ("simulate", "features", "fuse", "twin", "detect", "correct", "report", "all")

# flag -> (config key, type)
OVERRIDES = {
    "--mode": ("mode", str),
    "--voxel-size": ("voxel_size", float),
    "--max-gap": ("max_gap", float),
    "--meltpool-threshold": ("meltpool_threshold", int),
    "--min-contrast": ("min_contrast", float),
    "--frame-size": ("frame_size", int),
    "--hop": ("hop", int),
    "--rolloff": ("rolloff", float),
    "--gate-k": ("gate_k", float),
    "--melt-threshold": ("melt_threshold", float),
    "--haz-threshold": ("haz_threshold", float),
    "--width-spike-z": ("width_spike_z", float),
    "--area-high-z": ("area_high_z", float),
    "--k": ("k", int),
    "--cell-size": ("cell_size", float),
    "--tau": ("tau", float),
    "--min-cells": ("min_cells", int),
    "--hatch": ("hatch", float),
    "--base-power": ("base_power", float),
    "--power-gain": ("power_gain", float),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ldedtwin", description="Multisensor LDED fusion and digital-twin toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")

    s = sub.add_parser("simulate", help="write a synthetic session plus ground truth")
    s.add_argument("--spec", default="default", help="default | clean | path to a BuildSpec JSON file")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)

    helps = {
        "features": "per-modality feature CSVs",
        "fuse": "fused.csv on the robot grid",
        "twin": "voxelized twin.csv",
        "detect": "labeled twin, region report and metrics",
        "correct": "correction plan and toolpath",
        "report": "plot-ready long-format CSVs",
        "all": "every stage in order",
    }
    for name in SUBCOMMANDS[1:]:
        c = sub.add_parser(name, help=helps[name])
        c.add_argument("--session", required=True)
        c.add_argument("--out", help="output directory (default: SESSION/out)")
        c.add_argument("--config", help="JSON file of pipeline settings")
        c.add_argument("--seed", type=int)
        c.add_argument("--raw-audio", action="store_true", help="skip spectral-gate denoising")
        for flag, (_, typ) in OVERRIDES.items():
            c.add_argument(flag, type=typ, dest=flag[2:].replace("-", "_"))
    return p


def _spec(arg: str, seed) -> sim.BuildSpec:
    if arg == "default":
        spec = sim.BuildSpec()
    elif arg == "clean":
        spec = sim.clean_spec()
    else:
        spec = sim.BuildSpec.from_json(json.loads(Path(arg).read_text()))
    if seed is not None:
        spec = sim.BuildSpec.from_json({**spec.to_json(), "seed": seed})
    return spec


def _run(args) -> None:
    if args.command == "simulate":
        sim.write_simulation(_spec(args.spec, args.seed), args.out)
        return
    overrides = {key: getattr(args, flag[2:].replace("-", "_")) for flag, (key, _) in OVERRIDES.items()}
    overrides["seed"] = args.seed
    if args.raw_audio:
        overrides["denoise"] = False
    cfg = load_config(args.config, **overrides)
    session = Path(args.session)
    if not session.is_dir():
        raise FileNotFoundError(f"session directory not found: {session}")
    out = Path(args.out) if args.out else session / "out"
    if args.command == "all":
        pl.run_all(session, out, cfg)
        return
    result = pl.RUNNERS[args.command](session, out, cfg)
    if args.command == "detect" and result[2]:
        for lab, m in result[2].items():
            print(f"{lab}: precision={m['precision']:.3f} recall={m['recall']:.3f} "
                  f"(tp={m['tp']} fp={m['fp']} fn={m['fn']})")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    first = next((a for a in argv if not a.startswith("-")), None)
    if first is None or first not in SUBCOMMANDS:
        if first is not None:
            print(f"ldedtwin: unknown subcommand {first!r}", file=sys.stderr)
        print(parser.format_usage(), end="", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        print(parser.format_usage(), end="", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _run(args)
    except pl.ValidationFailed as exc:
        print("session validation failed:", file=sys.stderr)
        print(exc.report, file=sys.stderr)
        return EXIT_INVALID
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SessionFormatError, GridError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
