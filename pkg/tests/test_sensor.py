from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from auglidar.config import ConfigError
from auglidar.sensor import (
    BeamTable,
    EnergyModel,
    SensorConfig,
    SensorModel,
    TooFewPoints,
    calibrate,
    fit_beam_cone,
    generate_beam_directions,
    ideal_beam_table,
    perturbed_beam_table,
    return_energy,
)

LIT = EnergyModel(1.0, 0.004, 0.0)


def cone_points(angle_deg, n, sigma_deg=0.0, seed=0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    el = np.radians(angle_deg + rng.normal(0.0, sigma_deg, n) if sigma_deg else
                    np.full(n, angle_deg))
    az = rng.uniform(-math.pi, math.pi, n)
    r = rng.uniform(3.0, 80.0, n)
    return np.column_stack([r * np.cos(el) * np.cos(az), r * np.cos(el) * np.sin(az),
                            r * np.sin(el)])


def test_all_unity_factors():
    # cos(pi/2) is 6e-17 in floating point
    assert abs(return_energy(EnergyModel(1.0, 0.004), 1.0, math.pi / 2, 0.0) - 1.0) <= 1e-15


def test_attenuation_at_100m():
    assert abs(return_energy(LIT, 1.0, math.pi / 2, 100.0) - math.exp(-0.4)) <= 1e-9
    assert round(math.exp(-0.4), 6) == 0.670320


def test_literal_form_is_zero_at_normal_incidence():
    assert return_energy(LIT, 1.0, 0.0, 10.0) == 0.0


def test_cosine_convention():
    model = EnergyModel(1.0, 0.0, 0.0, "cosine")
    assert return_energy(model, 1.0, 0.0, 5.0) == 1.0
    assert abs(return_energy(model, 1.0, math.pi / 3, 0.0) - math.sqrt(0.5)) < 1e-15


@given(st.floats(0.0, 1.0), st.floats(0.0, math.pi / 2), st.floats(0.0, 200.0),
       st.floats(0.0, 50.0))
def test_energy_monotonicity(refl, theta, dist, extra):
    e = return_energy(LIT, refl, theta, dist)
    assert return_energy(LIT, refl, theta, dist + extra) <= e
    assert return_energy(LIT, refl, min(theta + extra / 50.0, math.pi / 2), dist) >= e
    assert return_energy(LIT, min(refl + extra / 50.0, 1.0), theta, dist) >= e


def test_default_threshold_drops_dim_grazing_target():
    cfg = SensorConfig()
    model = EnergyModel.from_config(cfg)
    grazing = return_energy(model, 0.05, math.pi / 2, cfg.max_range)
    assert grazing < model.threshold
    assert return_energy(model, 0.06, math.pi / 2, cfg.max_range) >= model.threshold


def test_ideal_table_64_beams():
    table = ideal_beam_table(SensorConfig())
    assert len(table) == 64
    assert table.angles_deg[0] == -24.33
    assert table.angles_deg[-1] == 2.0
    assert np.allclose(np.diff(table.angles_deg), 26.33 / 63, atol=1e-12)
    assert np.allclose(table.variances_deg2, 0.05 ** 2)


def test_single_beam_table():
    table = ideal_beam_table(SensorConfig(channels=1))
    assert table.angles_deg.tolist() == [-24.33]


@given(st.integers(1, 256), st.floats(-45, 0), st.floats(0.1, 40))
def test_ideal_table_increasing_with_exact_endpoints(n, lo, span):
    table = ideal_beam_table(SensorConfig(channels=n, vertical_min_deg=lo,
                                          vertical_max_deg=lo + span))
    assert len(table) == n
    assert np.all(np.diff(table.angles_deg) > 0)
    assert table.angles_deg[0] == lo
    if n > 1:
        assert table.angles_deg[-1] == lo + span


def test_perturbed_table_is_sorted_and_seeded():
    cfg = SensorConfig()
    a, b = perturbed_beam_table(cfg), perturbed_beam_table(cfg)
    assert np.array_equal(a.angles_deg, b.angles_deg)
    assert np.all(np.diff(a.angles_deg) > 0)
    offsets = np.sort(a.angles_deg) - ideal_beam_table(cfg).angles_deg
    assert 0.3 < np.std(offsets) < 3.0


def test_beam_table_rejects_unsorted():
    with pytest.raises(ValueError):
        BeamTable([1.0, 0.5], [0.0, 0.0])


def test_beam_table_csv_round_trip(tmp_path):
    table = BeamTable([-3.0, 1.0, 2.5], [0.01, 0.0, 0.02], [2, 0, 1])
    table.write_csv(tmp_path / "t.csv")
    back = BeamTable.read_csv(tmp_path / "t.csv")
    assert np.array_equal(back.angles_deg, table.angles_deg)
    assert np.array_equal(back.variances_deg2, table.variances_deg2)
    assert back.ids.tolist() == [2, 0, 1]


def test_noiseless_cone_fit_exact():
    angle, var = fit_beam_cone(cone_points(5.0, 500))
    assert abs(angle - 5.0) <= 1e-9
    assert var <= 1e-18


@given(st.floats(-30.0, 30.0), st.integers(0, 2 ** 32 - 1))
def test_cone_fit_recovers_noiseless_angle(angle, seed):
    fit, var = fit_beam_cone(cone_points(angle, 50, seed=seed))
    assert abs(fit - angle) <= 1e-9
    assert var <= 1e-18


def test_noisy_cone_fit():
    angle, var = fit_beam_cone(cone_points(-7.5, 10_000, 0.05, seed=3))
    assert abs(angle + 7.5) < 0.005
    assert abs(math.sqrt(var) / 0.05 - 1.0) < 0.15


def test_cone_fit_needs_ten_points():
    with pytest.raises(TooFewPoints):
        fit_beam_cone(cone_points(1.0, 5))


def test_cone_fit_rejects_apex_point():
    pts = np.vstack([cone_points(1.0, 20), np.zeros((1, 3))])
    with pytest.raises(ValueError):
        fit_beam_cone(pts)


def test_calibrate_keeps_beam_ids():
    pts = np.vstack([cone_points(a, 100, seed=i) for i, a in enumerate((3.0, -2.0, 0.5))])
    ids = np.repeat([7, 8, 9], 100)
    table = calibrate(pts, ids)
    assert table.ids.tolist() == [8, 9, 7]
    assert np.allclose(table.angles_deg, [-2.0, 0.5, 3.0], atol=1e-9)


def test_direction_count_default():
    cfg = SensorConfig()
    batch = generate_beam_directions(ideal_beam_table(cfg), cfg, 0)
    assert len(batch) == 64 * 1800 == 115_200


@given(st.integers(1, 32), st.floats(0.5, 10.0), st.floats(10.0, 360.0))
def test_direction_count_property(channels, step, hfov):
    cfg = SensorConfig(channels=channels, azimuth_step_deg=step, horizontal_fov_deg=hfov)
    batch = generate_beam_directions(ideal_beam_table(cfg), cfg, 1)
    assert len(batch) == channels * round(hfov / step)
    assert np.allclose(np.linalg.norm(batch.directions, axis=1), 1.0)


def test_zero_noise_directions_are_nominal():
    cfg = SensorConfig(channels=4, azimuth_step_deg=30.0, azimuth_noise_deg=0.0,
                       vertical_noise_deg=0.0)
    table = ideal_beam_table(cfg)
    batch = generate_beam_directions(table, cfg, 5)
    d = batch.directions
    el = np.degrees(np.arcsin(d[:, 2]))
    az = np.degrees(np.arctan2(d[:, 1], d[:, 0]))
    assert np.allclose(el, table.angles_deg[batch.beam], atol=1e-9)
    nominal = -180.0 + batch.azimuth_index * 30.0
    assert np.allclose(np.cos(np.radians(az - nominal)), 1.0, atol=1e-12)


def test_directions_deterministic_per_seed():
    model = SensorModel(SensorConfig(channels=8))
    a, b, c = model.directions(9), model.directions(9), model.directions(10)
    assert np.array_equal(a.directions, b.directions)
    assert not np.array_equal(a.directions, c.directions)


def test_noise_statistics():
    cfg = SensorConfig(channels=1, azimuth_step_deg=0.01, azimuth_noise_deg=0.0,
                       vertical_noise_deg=0.05)
    batch = generate_beam_directions(ideal_beam_table(cfg), cfg, 2)
    el = np.degrees(np.arcsin(batch.directions[:, 2]))
    assert abs(np.std(el) / 0.05 - 1.0) < 0.03


@pytest.mark.parametrize("kwargs", [dict(channels=0), dict(vertical_min_deg=3.0),
                                    dict(azimuth_step_deg=0.0), dict(distance_noise=-1.0),
                                    dict(energy_threshold=-0.1),
                                    dict(incidence_convention="other")])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        SensorConfig(**kwargs)


def test_sensor_config_file_round_trip(tmp_path):
    cfg = SensorConfig(channels=32, max_range=80.0, energy_threshold=0.01)
    (tmp_path / "s.cfg").write_text(cfg.to_text())
    assert SensorConfig.from_file(tmp_path / "s.cfg") == cfg


def test_sensor_config_unknown_key(tmp_path):
    (tmp_path / "s.cfg").write_text("version = 1\nchanels = 32\n")
    with pytest.raises(ConfigError):
        SensorConfig.from_file(tmp_path / "s.cfg")


def test_sensor_model_reads_calibration_table(tmp_path):
    table = BeamTable([-10.0, 0.0], [0.0, 0.0])
    table.write_csv(tmp_path / "beams.csv")
    (tmp_path / "s.cfg").write_text("version = 1\nchannels = 2\nbeam_table = beams.csv\n")
    model = SensorModel(SensorConfig.from_file(tmp_path / "s.cfg"))
    assert model.table.angles_deg.tolist() == [-10.0, 0.0]
