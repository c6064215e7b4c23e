"""Command-line entry point: ``auglidar <command> ...``.

Exit codes: 0 success, 2 invalid input, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError
from .pipeline import (
    ValidationError,
    cmd_build_map,
    cmd_calibrate,
    cmd_clean_background,
    cmd_simulate,
    cmd_stats,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

LOGGER = logging.getLogger("auglidar")


def _bounds(text: str):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError("bounds must be xmin,ymin,xmax,ymax") from None
    if len(vals) != 4:
        raise argparse.ArgumentTypeError("bounds must be xmin,ymin,xmax,ymax")
    return tuple(vals)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="auglidar",
                                     description="Simulate labeled LiDAR frames from scanned "
                                                 "backgrounds and placed obstacle models.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("clean-background",
                       help="remove movable objects from a labeled scan and fill ground holes")
    p.add_argument("input", type=Path, help="labeled PLY or PCD scan")
    p.add_argument("output", type=Path, help="background bundle directory to write")
    p.add_argument("--movable", default=",".join(("car", "truck", "cyclist", "pedestrian",
                                                   "other")),
                   help="comma-separated class names to remove (default: %(default)s)")
    p.add_argument("--ground-cell", type=float, default=0.5, help="ground grid cell in meters")
    p.add_argument("--fill-spacing", type=float, default=0.03,
                   help="spacing of synthesized ground points in meters")
    p.add_argument("--normal-radius", type=float, default=None,
                   help="neighborhood radius for normal estimation in meters")
    p.add_argument("--reflectivity", type=float, default=0.5,
                   help="reflectivity of background surfaces (default: %(default)s)")

    p = sub.add_parser("build-map", help="build per-category placement probability maps")
    p.add_argument("annotations", type=Path, help="text file of 'category x y z yaw' lines")
    p.add_argument("output", type=Path, help="directory for <category>.pmap files")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--bounds", type=_bounds, help="map area as xmin,ymin,xmax,ymax")
    g.add_argument("--background", type=Path, help="take the map area from this bundle's ground")
    p.add_argument("--cell", type=float, default=0.5, help="map cell size in meters")
    p.add_argument("--k", type=int, default=2, help="template half-width in cells")
    p.add_argument("--sigma", type=float, default=None,
                   help="template sigma in cells (default: k/2)")

    p = sub.add_parser("calibrate", help="fit per-beam elevation angles and noise")
    p.add_argument("input", type=Path,
                   help="CSV with x,y,z,beam columns (sensor frame) or a native frame bundle")
    p.add_argument("output", type=Path, help="beam table CSV to write")
    p.add_argument("--min-points", type=int, default=10, help="minimum points per beam")

    p = sub.add_parser("simulate", help="simulate frames from a run config")
    p.add_argument("config", type=Path, help="run config file (key = value)")

    p = sub.add_parser("stats", help="summarize a simulated run")
    p.add_argument("run", type=Path, help="run output directory or frames directory")
    p.add_argument("--csv", type=Path, default=None, help="also write a per-frame CSV")

    p = sub.add_parser("demo", help="generate a synthetic street scene, library and run config")
    p.add_argument("output", type=Path, help="directory to create")
    p.add_argument("--frames", type=int, default=2, help="frames in the generated run config")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--run", action="store_true",
                   help="also clean the background, build maps and simulate")
    return parser


def _demo(args) -> int:
    from .io import write_point_cloud
    from .placement import write_annotations
    from .procedural import demo_annotations, demo_street_scan, write_demo_library

    out = args.output
    out.mkdir(parents=True, exist_ok=True)
    write_point_cloud(demo_street_scan(rng_seed=args.seed), out / "scan.ply")
    write_demo_library(out / "library")
    write_annotations(demo_annotations(400, args.seed), out / "annotations.txt")
    (out / "run.cfg").write_text(
        "# demo run: 0.15 m scan spacing needs wider splats than a real scan\n"
        "version = 1\n"
        "background = background\n"
        "library = library/library.csv\n"
        "maps = maps\n"
        "output = run\n"
        f"frames = {args.frames}\n"
        f"master_seed = {args.seed}\n"
        "splat_radius = 0.12\n"
        "dropout = 0.128\n"
        "target.car = 10\n"
        "target.pedestrian = 6\n"
        "target.cyclist = 3\n"
        "target.truck = 1\n"
    )
    print(f"wrote demo inputs to {out}")
    if args.run:
        stats = cmd_clean_background(out / "scan.ply", out / "background", fill_spacing=0.15,
                                     normal_radius=0.4)
        print(f"background: {stats}")
        cmd_build_map(out / "annotations.txt", out / "maps", background=out / "background")
        manifest = cmd_simulate(out / "run.cfg")
        print(f"simulated {len(manifest['frames'])} frames into {out / 'run'}")
        print(cmd_stats(out / "run"), end="")
    return EXIT_OK


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "clean-background":
            movable = tuple(c.strip() for c in args.movable.split(",") if c.strip())
            stats = cmd_clean_background(args.input, args.output, movable, args.ground_cell,
                                         args.fill_spacing, args.normal_radius, args.reflectivity)
            print(f"input points: {stats['input_points']}")
            for name, count in sorted(stats["removed_per_class"].items()):
                print(f"removed {name}: {count}")
            print(f"filled ground points: {stats['filled_points']}")
            print(f"output points: {stats['output_points']}")
        elif args.command == "build-map":
            for path in cmd_build_map(args.annotations, args.output, args.bounds, args.background,
                                      args.cell, args.k, args.sigma):
                print(path)
        elif args.command == "calibrate":
            table = cmd_calibrate(args.input, args.output, args.min_points)
            print(f"calibrated {len(table)} beams -> {args.output}")
        elif args.command == "simulate":
            manifest = cmd_simulate(args.config)
            print(f"simulated {len(manifest['frames'])} frames "
                  f"(config {manifest['config_hash']})")
        elif args.command == "stats":
            print(cmd_stats(args.run, args.csv), end="")
        elif args.command == "demo":
            return _demo(args)
    except (ValidationError, ConfigError) as exc:
        print(f"auglidar: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"auglidar: runtime error: {exc}", file=sys.stderr)
        if args.verbose:
            LOGGER.exception("traceback")
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
