import numpy as np
import pytest

from obsmae.core import GridSpec, ModalityKind, ModalitySpec, ObservationCube
from obsmae.synthgen import (
    apply_coverage,
    generate_latent,
    generate_soundings,
    geo_disk_mask,
    leo_swath_mask,
    observe,
    render_modality,
    swath_center,
)

GLOBAL_1DEG = GridSpec(resolution_deg=1.0, n_lat=180, n_lon=360, window=48, patch=16, lat_origin=-89.5)


def test_latent_is_deterministic(small_grid):
    a = generate_latent(3, small_grid, 4, 5)
    b = generate_latent(3, small_grid, 4, 5)
    np.testing.assert_array_equal(a.temperature, b.temperature)
    np.testing.assert_array_equal(a.humidity, b.humidity)
    np.testing.assert_array_equal(a.land, b.land)
    c = generate_latent(4, small_grid, 4, 5)
    assert not np.array_equal(a.temperature, c.temperature)


def test_latent_minimal_and_invalid_dims(small_grid):
    s = generate_latent(0, small_grid, 1, 1)
    assert s.temperature.shape == (1, 1) + small_grid.shape
    for T, L in [(0, 1), (1, 0)]:
        with pytest.raises(ValueError):
            generate_latent(0, small_grid, T, L)


def test_latent_physical_invariants(small_grid):
    s = generate_latent(1, small_grid, 6, 6)
    assert np.all(s.humidity >= 0)
    # [DERIVED] adjacent-frame RMS difference below spatial std of frame 0
    rms = np.sqrt(np.mean((s.temperature[:, 1:] - s.temperature[:, :-1]) ** 2))
    assert rms < s.temperature[:, 0].std()
    # lapse: upper levels colder on average
    assert s.temperature[0].mean() < s.temperature[-1].mean()


def test_latent_chunks_are_independent(small_grid):
    whole = generate_latent(5, small_grid, 6, 3)
    tail = generate_latent(5, small_grid, 3, 3, hour_offset=3)
    np.testing.assert_allclose(whole.temperature[:, 3:], tail.temperature, rtol=1e-12)
    np.testing.assert_array_equal(whole.times[3:], tail.times)


def test_render_profile_identity(small_grid):
    s = generate_latent(2, small_grid, 2, 4, pressures=[100, 300, 500, 850])
    spec = ModalitySpec("p", ModalityKind.PROFILE, 2, levels=(300, 850))
    c = render_modality(s, spec, 0, {"field": "temperature", "noise_sigma": 0})
    np.testing.assert_array_equal(c.values, s.temperature[[1, 3]].astype(np.float32))


def test_render_static_is_elevation_and_land(small_grid):
    s = generate_latent(2, small_grid, 3, 2)
    spec = ModalitySpec("s", ModalityKind.STATIC, 2, temporal=False)
    c = render_modality(s, spec, 0)
    assert c.values.shape[1] == 1
    np.testing.assert_array_equal(c.values[0, 0], s.elevation.astype(np.float32))
    np.testing.assert_array_equal(c.values[1, 0], s.land.astype(np.float32))
    assert 0.2 < s.land.mean() < 0.4


def test_identical_weights_give_identical_channels(small_grid):
    s = generate_latent(2, small_grid, 2, 3)
    spec = ModalitySpec("g", ModalityKind.GEO, 2)
    w = [[0.2, 0.5, 0.3]] * 2
    c = render_modality(s, spec, 0, {"weights": w, "noise_sigma": 0})
    np.testing.assert_array_equal(c.values[0], c.values[1])


def test_render_missing_level_errors(small_grid):
    s = generate_latent(2, small_grid, 1, 3, pressures=[100, 500, 1000])
    with pytest.raises(ValueError, match="level"):
        render_modality(s, ModalitySpec("p", ModalityKind.PROFILE, 1, levels=(250,)), 0)


def test_noise_sigma_matches_request(small_grid):
    s = generate_latent(2, small_grid, 3, 3)
    spec = ModalitySpec("g", ModalityKind.GEO, 1)
    clean = render_modality(s, spec, 0, {"noise_sigma": 0})
    noisy = render_modality(s, spec, 0, {"noise_sigma": 0.5})
    d = (noisy.values - clean.values).astype(np.float64)
    assert d.std() == pytest.approx(0.5, rel=0.05)


def test_full_coverage_is_noop(small_grid):
    s = generate_latent(0, small_grid, 2, 2)
    c = render_modality(s, ModalitySpec("g", ModalityKind.GEO, 1), 0)
    out = apply_coverage(c, "full", 1.0, 0, small_grid)
    np.testing.assert_array_equal(out.valid, c.valid)


def test_geo_disk_fraction_and_constant_in_time():
    m = geo_disk_mask(GLOBAL_1DEG, 0.6, sub_satellite_lon=-75.0)
    assert 0.55 <= m.mean() <= 0.65
    c = ObservationCube.from_values("g", np.datetime64("2024-01-01T00", "h") + np.arange(3).astype("timedelta64[h]"), np.zeros((1, 3) + GLOBAL_1DEG.shape))
    out = apply_coverage(c, "geo_disk", 0.6, 0, GLOBAL_1DEG, sub_satellite_lon=-75.0)
    assert all(np.array_equal(out.valid[0, 0], out.valid[0, t]) for t in range(3))
    # the disk is centred on the sub-satellite point
    assert m[GLOBAL_1DEG.lat_index(0.5), GLOBAL_1DEG.lon_index(-75.0)]
    assert not m[GLOBAL_1DEG.lat_index(0.5), GLOBAL_1DEG.lon_index(105.0)]


def test_leo_swath_fraction_and_monotone_centre():
    m = leo_swath_mask(GLOBAL_1DEG, 0.1, seed=3, T=12)
    frac = m.mean(axis=(1, 2))
    assert np.all((frac >= 0.05) & (frac <= 0.15))
    centres = np.array([swath_center(3, h) for h in range(12)])
    steps = np.diff(centres) % 360.0
    assert np.all((steps > 0) & (steps < 180))


def test_coverage_target_validation(small_grid):
    with pytest.raises(ValueError):
        geo_disk_mask(small_grid, 0.0)
    with pytest.raises(ValueError):
        leo_swath_mask(small_grid, 1.5, 0, 1)


def test_observe_is_deterministic(small_grid, specs):
    s = generate_latent(9, small_grid, 3, 4, pressures=[200, 500, 700, 850])
    a = observe(s, specs[1], 9, {"noise_sigma": 0.3})
    b = observe(s, specs[1], 9, {"noise_sigma": 0.3})
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(a.valid, b.valid)


def test_soundings_at_synoptic_hours(small_grid):
    s = generate_latent(1, small_grid, 13, 5, pressures=[10, 100, 300, 700, 1000])
    snd = generate_soundings(s, 4, 1)
    assert len(snd) == 8  # hours 00 and 12
    assert {str(x.time) for x in snd} == {"2024-02-01T00", "2024-02-01T12"}
    assert all(len(x.levels) == 15 for x in snd)
    again = generate_soundings(s, 4, 1)
    assert [x.to_dict() for x in snd] == [x.to_dict() for x in again]
