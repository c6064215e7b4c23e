from __future__ import annotations

import numpy as np
import pytest

from auglidar.background import build_background
from auglidar.pipeline import cmd_build_map, cmd_clean_background
from auglidar.placement import CategoryPrior, ObstacleLibrary, build_probability_map, write_annotations
from auglidar.procedural import demo_annotations, demo_street_scan, write_demo_library
from auglidar.io import write_point_cloud


@pytest.fixture(scope="session")
def demo_scan():
    return demo_street_scan(rng_seed=0)


@pytest.fixture(scope="session")
def demo_background(demo_scan):
    return build_background(demo_scan, fill_spacing=0.15, normal_radius=0.4)


@pytest.fixture(scope="session")
def demo_library(tmp_path_factory):
    return ObstacleLibrary.load(write_demo_library(tmp_path_factory.mktemp("library")))


@pytest.fixture(scope="session")
def demo_maps(demo_background):
    anns = demo_annotations(400, 0)
    return build_probability_map(anns, demo_background.ground.bounds, 0.5)


@pytest.fixture(scope="session")
def demo_prior(demo_library):
    return CategoryPrior.from_annotations(demo_annotations(400, 0), demo_library)


@pytest.fixture(scope="session")
def demo_inputs(tmp_path_factory, demo_scan):
    """On-disk demo inputs: background bundle, library, maps."""
    root = tmp_path_factory.mktemp("demo")
    write_point_cloud(demo_scan, root / "scan.ply")
    write_demo_library(root / "library")
    write_annotations(demo_annotations(400, 0), root / "annotations.txt")
    cmd_clean_background(root / "scan.ply", root / "background", fill_spacing=0.15,
                         normal_radius=0.4)
    cmd_build_map(root / "annotations.txt", root / "maps", background=root / "background")
    return root


def run_config_text(root, output="run", frames=2, seed=0, **extra) -> str:
    lines = [
        "version = 1",
        f"background = {root / 'background'}",
        f"library = {root / 'library' / 'library.csv'}",
        f"maps = {root / 'maps'}",
        f"output = {output}",
        f"frames = {frames}",
        f"master_seed = {seed}",
        "splat_radius = 0.12",
        "target.car = 4",
        "target.pedestrian = 2",
    ]
    lines += [f"{k} = {v}" for k, v in extra.items()]
    return "\n".join(lines) + "\n"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
