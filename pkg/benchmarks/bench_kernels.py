"""Compare the compiled and numpy rasterization kernels on the demo street scene.

    python benchmarks/bench_kernels.py --resolutions 256 512 1024 --repeat 3
"""

from __future__ import annotations

import argparse
import math
import time

import numpy as np

from auglidar.background import build_background
from auglidar.geometry import Material, RigidPose
from auglidar.procedural import car_mesh, demo_street_scan, pedestrian_mesh
from auglidar.render import SceneGeometry, SplatParams, render_cube_maps
from auglidar.render.kernels import BACKENDS


def demo_scene() -> tuple[SceneGeometry, RigidPose]:
    background = build_background(demo_street_scan(rng_seed=0), fill_spacing=0.15,
                                  normal_radius=0.4)
    materials = [Material(0.4, name="paint"), Material(0.1, name="glass", transparent=True),
                 Material(0.05, name="tire")]
    obstacles = []
    for k, (x, y, yaw) in enumerate([(8.0, -3.0, 0.0), (-12.0, 3.5, math.pi), (20.0, 3.0, 0.1),
                                     (-4.0, -3.2, 0.05)], start=1):
        obstacles.append((k, car_mesh().transformed(RigidPose.from_yaw(yaw, (x, y, 0.0))), 1,
                          materials))
    obstacles.append((5, pedestrian_mesh().transformed(RigidPose.from_yaw(0.0, (5.0, 6.0, 0.0))),
                      2, materials))
    scene = SceneGeometry.build(background, obstacles)
    return scene, RigidPose.from_yaw(0.0, (0.0, 0.0, 1.73))


def best_of(fn, repeat: int) -> tuple[float, object]:
    best, out = math.inf, None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--resolutions", type=int, nargs="+", default=[256, 512, 1024])
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--splat-radius", type=float, default=0.12)
    args = parser.parse_args(argv)

    scene, pose = demo_scene()
    splat = SplatParams(args.splat_radius)
    print(f"scene: {len(scene.points)} points, {len(scene.triangles)} triangles; "
          f"backends: {', '.join(sorted(BACKENDS))}")
    print(f"{'res':>6} {'backend':>8} {'seconds':>9} {'speedup':>8}  identical")
    for res in args.resolutions:
        timings, maps = {}, {}
        for name in ("python", "cython"):
            if name not in BACKENDS:
                continue
            timings[name], maps[name] = best_of(
                lambda: render_cube_maps(scene, pose, splat, res, backend=name), args.repeat)
        same = ""
        if len(maps) == 2:
            a, b = maps["python"], maps["cython"]
            same = str(np.array_equal(a.depth, b.depth) and np.array_equal(a.source, b.source)
                       and np.array_equal(a.normal, b.normal))
        for name, t in timings.items():
            speedup = timings["python"] / t if "python" in timings else float("nan")
            print(f"{res:>6} {name:>8} {t:>9.3f} {speedup:>7.1f}x  {same if name == 'cython' else ''}")


if __name__ == "__main__":
    main()
