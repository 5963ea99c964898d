import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from srcspace import sim
from srcspace.errors import InvalidConfigError, InvalidInputError


def test_template_structure(template):
    assert template.lattice_shape == (10, 10, 10)
    assert sim.in_voxel_band(template)
    assert len(template.region_ids()) == 8
    assert np.all(np.linalg.norm(template.centers, axis=1) < sim.BRAIN_MARGIN * template.head_radius_mm)
    # centres sit on the lattice
    back = (template.centers - template.lattice_origin) / template.voxel_size_mm
    assert np.array_equal(back, template.lattice_index)


def test_template_is_deterministic(template):
    again = sim.build_template_anatomy(15.0, 80.0, seed=0)
    assert again.same_as(template)


def test_voxel_size_bounds():
    with pytest.raises(InvalidConfigError):
        sim.build_template_anatomy(3.0)
    with pytest.raises(InvalidConfigError):
        sim.build_template_anatomy(15.0, head_radius_mm=25.0)


def test_subject_anatomy_differs_and_keeps_labels(template, subject):
    assert not subject.same_as(template)
    assert set(subject.region_ids()) <= set(template.region_ids())
    assert 400 <= subject.n_voxels <= 900


def test_zero_distortion_is_template_copy(template):
    s = sim.derive_subject_anatomy(template, 3, 0.0)
    assert s.same_as(template)


def test_distortion_out_of_range(template):
    with pytest.raises(InvalidConfigError):
        sim.derive_subject_anatomy(template, 1, 0.5)


def test_band_violation_raises(template):
    with pytest.raises(InvalidConfigError):
        sim.derive_subject_anatomy(template, 1, 0.1, band=(10, 20))


def test_named_regions_are_extremal(template):
    right = sim.resolve_region(template, "right")
    left = sim.resolve_region(template, "left")
    assert template.region_centroid(right)[0] > template.region_centroid(left)[0]
    assert right != left
    with pytest.raises(InvalidConfigError):
        sim.resolve_region(template, "sideways")
    with pytest.raises(InvalidConfigError):
        sim.resolve_region(template, 99)


def test_sensor_array_shape_and_shell(sensors):
    assert sensors.n_sensors == 64
    assert np.allclose(np.linalg.norm(sensors.positions, axis=1), 110.0)
    assert np.all(sensors.positions[:, 2] >= 0)
    assert np.allclose(np.linalg.norm(sensors.orientations, axis=1), 1.0)


def test_sensor_array_errors():
    with pytest.raises(InvalidConfigError):
        sim.build_sensor_array("x", 4, 110.0)
    with pytest.raises(InvalidConfigError):
        sim.build_sensor_array("x", 32, 70.0)


def test_layouts_differ_by_id():
    a = sim.build_sensor_array("A", 32, 110.0)
    b = sim.build_sensor_array("B", 32, 110.0)
    assert not np.allclose(a.positions, b.positions)


def test_center_dipole_field_is_exactly_zero(sensors):
    assert np.all(sim.dipole_field([0.0, 0.0, 0.0], [3.0, -1.0, 2.0], sensors) == 0.0)


@given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=3, max_size=3))
@settings(max_examples=40, deadline=None)
def test_radial_dipole_field_is_exactly_zero(pos):
    r0 = np.asarray(pos)
    if np.linalg.norm(r0) < 1e-3:
        return
    arr = sim.build_sensor_array("R", 32, 110.0)
    # moment equal to the position vector is radial; q x r0 vanishes exactly
    assert np.all(sim.dipole_field(r0, r0, arr) == 0.0)


def test_lead_field_radial_columns_vanish(template, sensors):
    lf = sim.compute_lead_field(template, sensors)
    for v in range(0, template.n_voxels, 37):
        r_hat = template.centers[v] / np.linalg.norm(template.centers[v])
        radial = lf.voxel_block(v) @ r_hat
        scale = np.abs(lf.voxel_block(v)).max()
        assert np.max(np.abs(radial)) <= 1e-12 * scale


def test_center_voxel_column_is_zero(sensors):
    mask = np.ones((3, 3, 3), bool)
    anat = sim.Anatomy(10.0, 80.0, np.array([-10.0, -10.0, -10.0]), mask, np.zeros(27, int), np.eye(4))
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        lf = sim.compute_lead_field(anat, sensors)
    assert any("centre" in str(x.message) for x in w)
    centre = int(np.flatnonzero(np.all(anat.centers == 0, axis=1))[0])
    assert np.all(lf.voxel_block(centre) == 0.0)
    assert list(lf.zero_voxels) == [centre]


def test_lead_field_matches_direct_dipole(template, sensors):
    lf = sim.compute_lead_field(template, sensors)
    q = np.array([1.0, -2.0, 0.5])
    for v in (0, 100, 400):
        direct = sim.dipole_field(template.centers[v], q, sensors)
        assert np.allclose(lf.voxel_block(v) @ q, direct, rtol=1e-9, atol=1e-12 * np.abs(direct).max())


def test_forward_is_linear(template, sensors, rng):
    lf = sim.compute_lead_field(template, sensors)
    a = rng.normal(size=(template.n_voxels * 3, 5))
    b = rng.normal(size=(template.n_voxels * 3, 5))
    lhs = sim.forward(lf, 2.0 * a - 3.0 * b)
    rhs = 2.0 * sim.forward(lf, a) - 3.0 * sim.forward(lf, b)
    assert np.max(np.abs(lhs - rhs)) <= 1e-9 * np.max(np.abs(lhs))
    assert np.allclose(sim.forward(lf, a.reshape(-1, 3, 5)), sim.forward(lf, a))


def test_lead_field_rejects_bad_geometry(template):
    inner = sim.SensorArray(np.array([[0.0, 0.0, 50.0]] * 16), np.tile([0.0, 0.0, 1.0], (16, 1)), "x")
    with pytest.raises(InvalidInputError):
        sim.compute_lead_field(template, inner)


def test_stimulus_track_properties():
    st_ = sim.make_stimulus_track(60.0, 100.0, 0.5, 2.0, seed=3)
    assert len(st_) == 6000
    assert st_.labels[0] == 0
    assert 0.3 < st_.labels.mean() < 0.7
    assert np.all(st_.labels[st_.onsets] == 1) and np.all(st_.labels[st_.onsets - 1] == 0)
    with pytest.raises(InvalidConfigError):
        sim.make_stimulus_track(10, 100, 1.0)


def test_response_drive_peaks_after_onset():
    stim = sim.StimulusTrack(np.r_[np.zeros(100), np.ones(300)].astype(np.int8), 100.0)
    cfg = sim.ResponseConfig(latency_s=0.25, onset_gain=1.0, sustained_gain=0.0)
    d = sim.response_drive(stim, cfg)
    assert np.all(d[:100] == 0)
    assert np.argmax(d) == 100 + 25


def test_response_sources_confined_to_regions(template):
    rid = sim.resolve_region(template, "right")
    cfg = sim.ResponseConfig(regions={rid: 1.0}, amplitude=2.0)
    src = sim.response_sources(template, cfg)
    active = np.linalg.norm(src, axis=1) > 0
    assert np.all(template.atlas[active] == rid)
    # tangential orientation
    radial = np.sum(src * template.centers, axis=1)
    assert np.allclose(radial, 0.0, atol=1e-9)
    with pytest.raises(InvalidConfigError):
        sim.response_sources(template, sim.ResponseConfig(regions={77: 1.0}))


def test_simulation_deterministic_and_seed_sensitive(template, sensors):
    lf = sim.compute_lead_field(template, sensors)
    stim = sim.make_stimulus_track(2.0, 100.0, 0.5, 0.5, seed=0)
    r1 = sim.simulate_recording(template, lf, sensors, stim, seed=5)
    r2 = sim.simulate_recording(template, lf, sensors, stim, seed=5)
    r3 = sim.simulate_recording(template, lf, sensors, stim, seed=6)
    assert np.array_equal(r1.data, r2.data)
    assert not np.array_equal(r1.data, r3.data)


def test_noise_free_recording_is_the_planted_response(template, sensors):
    lf = sim.compute_lead_field(template, sensors)
    stim = sim.make_stimulus_track(3.0, 100.0, 0.5, 0.5, seed=0)
    rid = sim.resolve_region(template, "right")
    resp = sim.ResponseConfig(regions={rid: 1.0})
    noise = sim.NoiseConfig(background_std=0.0, sensor_noise_rel=0.0)
    rec = sim.simulate_recording(template, lf, sensors, stim, noise, resp)
    expected = np.outer(lf.matrix @ sim.response_sources(template, resp).ravel(), sim.response_drive(stim, resp))
    assert np.allclose(rec.data, expected)


def test_recording_shape_checks(template, sensors):
    stim = sim.make_stimulus_track(1.0, 100.0, 0.5, 0.5)
    with pytest.raises(InvalidInputError):
        sim.SensorRecording(np.zeros((3, 100)), 100.0, stim, sensors)
    lf = sim.compute_lead_field(template, sensors)
    other = sim.build_sensor_array("Q", 20, 110.0)
    with pytest.raises(InvalidInputError):
        sim.simulate_recording(template, lf, other, stim)
