"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and ``OBSMAE_DISABLE_NUMBA``
is unset (or ``0``).  Both implementations are always importable as
``*_numba`` / ``*_numpy`` so tests and the benchmark can compare them.
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("OBSMAE_DISABLE_NUMBA", "0") in ("", "0")


# --------------------------------------------------------------------------
# Hann-weighted tile accumulation


def hann_accumulate_numpy(num, den, tile, weight, lat0, lon0):
    """Add ``weight * tile`` into ``num`` and ``weight`` into ``den`` in place.

    ``num`` is (L, H, W), ``den`` is (H, W), ``tile`` is (L, h, w) and
    ``weight`` is (h, w).  Longitude wraps, latitude rows outside [0, H) are
    dropped.
    """
    n_lat, n_lon = den.shape
    h, w = weight.shape
    rows = np.arange(lat0, lat0 + h)
    keep = (rows >= 0) & (rows < n_lat)
    rows = rows[keep]
    cols = (np.arange(lon0, lon0 + w)) % n_lon
    wt = weight[keep]
    sub = tile[:, keep]
    # np.add.at handles repeated columns when a tile is wider than the grid
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    np.add.at(den, (rr, cc), wt)
    for k in range(num.shape[0]):
        np.add.at(num[k], (rr, cc), wt * sub[k])


def great_circle_deg_numpy(lat, lon, lat0, lon0):
    """Central angle in degrees between every (lat, lon) cell and one point."""
    p1 = np.radians(lat)[:, None]
    p2 = np.radians(lat0)
    dl = np.radians(lon[None, :] - lon0)
    dp = p1 - p2
    a = np.sin(dp / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2) ** 2
    return np.degrees(2 * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0))))


def interp_logp_numpy(src_p, src_vals, dst_p):
    """Interpolate profiles linearly in log-pressure.

    ``src_p`` (L,) must be strictly increasing; ``src_vals`` is (N, L);
    ``dst_p`` is (M,).  Targets outside [src_p[0], src_p[-1]] become NaN.
    """
    x = np.log(src_p)
    xq = np.log(dst_p)
    out = np.empty((src_vals.shape[0], dst_p.shape[0]))
    for n in range(src_vals.shape[0]):
        out[n] = np.interp(xq, x, src_vals[n], left=np.nan, right=np.nan)
    return out


if HAVE_NUMBA:

    @njit(cache=True)
    def hann_accumulate_numba(num, den, tile, weight, lat0, lon0):
        n_lat, n_lon = den.shape
        h, w = weight.shape
        n_lev = num.shape[0]
        for a in range(h):
            r = lat0 + a
            if r < 0 or r >= n_lat:
                continue
            for b in range(w):
                c = (lon0 + b) % n_lon
                wt = weight[a, b]
                den[r, c] += wt
                for k in range(n_lev):
                    num[k, r, c] += wt * tile[k, a, b]

    @njit(cache=True)
    def great_circle_deg_numba(lat, lon, lat0, lon0):
        out = np.empty((lat.shape[0], lon.shape[0]))
        p2 = np.radians(lat0)
        cp2 = np.cos(p2)
        for i in range(lat.shape[0]):
            p1 = np.radians(lat[i])
            sdp = np.sin((p1 - p2) / 2.0)
            cp1 = np.cos(p1)
            for j in range(lon.shape[0]):
                sdl = np.sin(np.radians(lon[j] - lon0) / 2.0)
                a = sdp * sdp + cp1 * cp2 * sdl * sdl
                a = min(max(a, 0.0), 1.0)
                out[i, j] = np.degrees(2.0 * np.arcsin(np.sqrt(a)))
        return out

    @njit(cache=True)
    def interp_logp_numba(src_p, src_vals, dst_p):
        n_src = src_p.shape[0]
        x = np.log(src_p)
        out = np.empty((src_vals.shape[0], dst_p.shape[0]))
        for m in range(dst_p.shape[0]):
            xq = np.log(dst_p[m])
            if xq < x[0] or xq > x[n_src - 1]:
                for n in range(src_vals.shape[0]):
                    out[n, m] = np.nan
                continue
            k = 0
            while k < n_src - 2 and x[k + 1] < xq:
                k += 1
            if n_src == 1:
                for n in range(src_vals.shape[0]):
                    out[n, m] = src_vals[n, 0]
                continue
            span = x[k + 1] - x[k]
            f = (xq - x[k]) / span
            for n in range(src_vals.shape[0]):
                out[n, m] = src_vals[n, k] + f * (src_vals[n, k + 1] - src_vals[n, k])
        return out

else:  # pragma: no cover
    hann_accumulate_numba = hann_accumulate_numpy
    great_circle_deg_numba = great_circle_deg_numpy
    interp_logp_numba = interp_logp_numpy


if USE_NUMBA:
    hann_accumulate = hann_accumulate_numba
    great_circle_deg = great_circle_deg_numba
    interp_logp = interp_logp_numba
else:
    hann_accumulate = hann_accumulate_numpy
    great_circle_deg = great_circle_deg_numpy
    interp_logp = interp_logp_numpy


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
