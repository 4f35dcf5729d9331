"""The numba kernels and their numpy fallbacks must agree; oracles are brute force."""
import math
import os
import subprocess
import sys

import numpy as np
import pytest

from obsmae import _accel

pytestmark = pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba unavailable")


def haversine(lat1, lon1, lat2, lon2):
    p1, p2 = math.radians(lat1), math.radians(lat2)
    a = math.sin((p2 - p1) / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(math.radians(lon2 - lon1) / 2) ** 2
    return math.degrees(2 * math.asin(math.sqrt(a)))


@pytest.mark.parametrize("impl", [_accel.great_circle_deg_numba, _accel.great_circle_deg_numpy])
def test_great_circle_matches_scalar_haversine(impl):
    lat = np.array([-60.0, 0.0, 45.5])
    lon = np.array([-170.0, 0.0, 10.0, 179.0])
    d = impl(lat, lon, 10.0, -20.0)
    for i, a in enumerate(lat):
        for j, b in enumerate(lon):
            assert d[i, j] == pytest.approx(haversine(a, b, 10.0, -20.0), abs=1e-9)


def test_great_circle_antipode_and_self():
    d = _accel.great_circle_deg_numba(np.array([0.0, 30.0]), np.array([0.0, 180.0]), 0.0, 0.0)
    assert d[0, 0] == 0.0
    assert d[0, 1] == pytest.approx(180.0)


def brute_accumulate(shape, tiles, weight):
    L, H, W = shape
    num = np.zeros(shape)
    den = np.zeros((H, W))
    h, w = weight.shape
    for tile, (a0, b0) in tiles:
        for a in range(h):
            r = a0 + a
            if not 0 <= r < H:
                continue
            for b in range(w):
                c = (b0 + b) % W
                den[r, c] += weight[a, b]
                num[:, r, c] += weight[a, b] * tile[:, a, b]
    return num, den


@pytest.mark.parametrize("impl", [_accel.hann_accumulate_numba, _accel.hann_accumulate_numpy])
def test_hann_accumulate_matches_brute_force(impl):
    rng = np.random.default_rng(0)
    shape = (2, 10, 12)
    weight = rng.uniform(0.1, 1.0, (4, 5))
    # includes a longitude wrap and a tile hanging off the last latitude row
    tiles = [(rng.standard_normal((2, 4, 5)), o) for o in [(0, 0), (3, 9), (8, 2), (5, 11)]]
    num = np.zeros(shape)
    den = np.zeros(shape[1:])
    for t, (a, b) in tiles:
        impl(num, den, t, weight, a, b)
    ref_num, ref_den = brute_accumulate(shape, tiles, weight)
    np.testing.assert_allclose(num, ref_num, atol=1e-12)
    np.testing.assert_allclose(den, ref_den, atol=1e-12)


@pytest.mark.parametrize("impl", [_accel.interp_logp_numba, _accel.interp_logp_numpy])
def test_interp_logp_linear_in_log_pressure(impl):
    p = np.array([100.0, 1000.0])
    vals = np.array([[200.0, 300.0]])
    # log-midpoint of 100 and 1000 is sqrt(1e5)
    out = impl(p, vals, np.array([100.0, math.sqrt(1e5), 1000.0, 50.0, 1100.0]))
    np.testing.assert_allclose(out[0, :3], [200.0, 250.0, 300.0], atol=1e-9)
    assert np.isnan(out[0, 3]) and np.isnan(out[0, 4])


def test_backends_agree_on_random_profiles():
    rng = np.random.default_rng(3)
    p = np.sort(rng.uniform(5, 1000, 9))
    vals = rng.normal(250, 20, (50, 9))
    dst = rng.uniform(1, 1100, 30)
    np.testing.assert_allclose(
        _accel.interp_logp_numba(p, vals, dst), _accel.interp_logp_numpy(p, vals, dst), rtol=1e-12, equal_nan=True
    )


def test_env_flag_selects_numpy_backend():
    code = "from obsmae import _accel; print(_accel.backend())"
    env = dict(os.environ, OBSMAE_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
    env["OBSMAE_DISABLE_NUMBA"] = "0"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numba"
