"""Synthetic multi-modal observations of an advected, band-limited atmosphere.

The latent state is a handful of spectral noise patterns, each translated by a
constant velocity and rotated slowly in time, layered on a zonal-mean
climatology.  Sensors see it through fixed linear-plus-tanh operators, with
coverage masks mimicking geostationary disks and polar-orbiter swaths.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import _accel
from .core import GridSpec, ModalityKind, ModalitySpec, ObservationCube

DEFAULT_START = np.datetime64("2024-02-01T00", "h")


@dataclass(frozen=True, eq=False)
class LatentState:
    temperature: np.ndarray  # (L, T, H, W) K
    humidity: np.ndarray  # (L, T, H, W) g/kg
    elevation: np.ndarray  # (H, W) m
    land: np.ndarray  # (H, W) bool
    pressures: np.ndarray  # (L,) hPa, increasing
    times: np.ndarray
    seed: int
    grid: GridSpec


def _stream(seed: int, *tags) -> np.random.Generator:
    words = [int(seed)] + [zlib.crc32(str(t).encode()) for t in tags]
    return np.random.default_rng(words)


class _SpectralPattern:
    """Unit-variance band-limited noise on a lat-padded periodic domain."""

    def __init__(self, rng, n_lat, n_lon, corr_cells, velocity):
        self.n_lat = n_lat
        ny = 2 * n_lat
        white = rng.standard_normal((ny, n_lon))
        ky = np.fft.fftfreq(ny)[:, None]
        kx = np.fft.rfftfreq(n_lon)[None, :]
        k2 = ky**2 + kx**2
        spec = np.fft.rfft2(white) * np.exp(-0.5 * k2 * (2 * np.pi * corr_cells) ** 2)
        spec[0, 0] = 0.0
        field0 = np.fft.irfft2(spec, s=(ny, n_lon))
        self.spec = spec / field0.std()
        self.phase = -2j * np.pi * (ky * velocity[0] + kx * velocity[1])
        self.shape = (ny, n_lon)
        self.row0 = n_lat // 2

    def at(self, hour: float) -> np.ndarray:
        f = np.fft.irfft2(self.spec * np.exp(self.phase * hour), s=self.shape)
        return f[self.row0 : self.row0 + self.n_lat]


def default_pressures(levels: int) -> np.ndarray:
    if levels == 1:
        return np.array([500.0])
    return np.round(np.geomspace(10.0, 1000.0, levels), 1)


def _height_km(p):
    return 7.0 * np.log(1000.0 / np.asarray(p, dtype=float))


def _vertical_modes(pressures, n_modes):
    z = _height_km(pressures)
    x = np.zeros_like(z) if len(z) == 1 else 2 * (z - z.min()) / (z.max() - z.min()) - 1
    basis = np.stack([x**k for k in range(n_modes)], axis=1)
    basis[:, 0] = 1.0
    basis += 0.15 * np.cos(3.0 * (x[:, None] + 1) * (np.arange(n_modes)[None, :] + 1))
    return basis / np.linalg.norm(basis, axis=1, keepdims=True)


def generate_latent(
    seed: int,
    grid: GridSpec,
    T: int,
    levels: int,
    *,
    pressures: Sequence[float] | None = None,
    start=DEFAULT_START,
    hour_offset: int = 0,
    correlation_cells: float = 12.0,
    advection: tuple[float, float] = (0.1, 1.0),
    period_hours: float = 96.0,
    amplitude_k: float = 4.0,
) -> LatentState:
    """Build the latent atmosphere for hours ``hour_offset .. hour_offset+T-1``.

    Output at a given absolute hour depends only on (seed, grid, levels, knobs),
    so a long record can be generated in independent chunks.
    """
    if T < 1 or levels < 1:
        raise ValueError(f"T and levels must be >= 1, got T={T}, levels={levels}")
    p = default_pressures(levels) if pressures is None else np.asarray(pressures, dtype=float)
    if len(p) != levels:
        raise ValueError(f"{len(p)} pressures given for {levels} levels")
    if np.any(np.diff(p) <= 0):
        raise ValueError("pressures must be strictly increasing")
    H, W = grid.shape
    vel = tuple(float(v) for v in advection)
    n_t_modes, n_q_modes = min(3, levels), min(2, levels)

    def patterns(tag, n):
        return [
            (
                _SpectralPattern(_stream(seed, tag, k, "a"), H, W, correlation_cells, vel),
                _SpectralPattern(_stream(seed, tag, k, "b"), H, W, correlation_cells, vel),
            )
            for k in range(n)
        ]

    t_pat, q_pat = patterns("temperature", n_t_modes), patterns("humidity", n_q_modes)
    omega = 2 * np.pi / period_hours
    hours = hour_offset + np.arange(T)

    def modes(pats):
        out = np.empty((len(pats), T, H, W))
        for k, (pa, pb) in enumerate(pats):
            for i, h in enumerate(hours):
                out[k, i] = np.cos(omega * h) * pa.at(h) + np.sin(omega * h) * pb.at(h)
        return out

    t_modes, q_modes = modes(t_pat), modes(q_pat)
    vt = _vertical_modes(p, n_t_modes)
    vq = _vertical_modes(p, n_q_modes)

    lat = np.radians(grid.lats)[:, None]
    z = _height_km(p)[:, None, None, None]
    t_surf = (300.0 - 45.0 * np.sin(lat) ** 2)[None, None]
    t_clim = t_surf - 6.5 * np.minimum(z, 11.0)
    temperature = t_clim + amplitude_k * np.einsum("lk,kthw->lthw", vt, t_modes)

    q_surf = (2.0 + 16.0 * np.cos(lat) ** 2)[None, None]
    q_clim = q_surf * np.exp(-z / 2.2)
    q_anom = 0.6 * t_modes[0][None] + 0.8 * np.einsum("lk,kthw->lthw", vq, q_modes)
    humidity = q_clim * np.exp(0.25 * q_anom)

    rng_s = _stream(seed, "surface")
    land_f = _SpectralPattern(rng_s, H, W, 2 * correlation_cells, (0.0, 0.0)).at(0.0)
    relief = _SpectralPattern(rng_s, H, W, correlation_cells / 2, (0.0, 0.0)).at(0.0)
    land = land_f > np.quantile(land_f, 0.7)
    elevation = np.where(land, np.maximum(0.0, 600.0 + 900.0 * relief), 0.0)

    start = np.datetime64(start, "h")
    times = start + np.arange(hour_offset, hour_offset + T).astype("timedelta64[h]")
    return LatentState(
        temperature=temperature,
        humidity=humidity,
        elevation=elevation,
        land=land,
        pressures=p,
        times=times,
        seed=int(seed),
        grid=grid,
    )


def default_weights(channels: int, levels: int) -> np.ndarray:
    """Weighting functions peaking at evenly spaced levels, rows summing to 1."""
    centers = np.linspace(0, levels - 1, channels) if channels > 1 else np.array([(levels - 1) / 2])
    idx = np.arange(levels)
    w = np.exp(-0.5 * ((idx[None, :] - centers[:, None]) / 0.7) ** 2)
    return w / w.sum(axis=1, keepdims=True)


def _level_index(latent: LatentState, spec: ModalitySpec) -> np.ndarray:
    if len(spec.levels) > len(latent.pressures):
        raise ValueError(
            f"{spec.name}: {len(spec.levels)} levels requested, latent has {len(latent.pressures)}"
        )
    idx = []
    for lev in spec.levels:
        hit = np.flatnonzero(np.isclose(latent.pressures, lev))
        if hit.size == 0:
            raise ValueError(f"{spec.name}: level {lev} hPa not present in latent {latent.pressures.tolist()}")
        idx.append(int(hit[0]))
    return np.array(idx)


def render_modality(latent: LatentState, spec: ModalitySpec, seed: int, render: Mapping | None = None) -> ObservationCube:
    """Observation operator: latent state -> one modality, before coverage.

    ``render`` keys: ``field`` (radiance | temperature | humidity | noise),
    ``noise_sigma``, ``weights`` (C x L over temperature levels),
    ``humidity_weights`` (C x L, K per g/kg), ``nl_center``, ``nl_scale``.
    """
    render = dict(render or {})
    sigma = float(render.get("noise_sigma", 0.0))
    L, T = latent.temperature.shape[:2]

    if spec.kind is ModalityKind.STATIC:
        if spec.channels != 2:
            raise ValueError(f"{spec.name}: STATIC modality carries elevation and land-sea mask (2 channels)")
        vals = np.stack([latent.elevation, latent.land.astype(float)])[:, None]
        return ObservationCube.from_values(spec.name, latent.times[:1], vals, np.ones(vals.shape, bool))

    default_field = "temperature" if spec.kind is ModalityKind.PROFILE else "radiance"
    fld = render.get("field", default_field)
    if fld in ("temperature", "humidity"):
        if spec.kind is not ModalityKind.PROFILE:
            raise ValueError(f"{spec.name}: field {fld!r} needs a PROFILE modality")
        src = latent.temperature if fld == "temperature" else latent.humidity
        vals = src[_level_index(latent, spec)]
    elif fld == "radiance":
        w = np.asarray(render.get("weights", default_weights(spec.channels, L)), dtype=float)
        if w.shape != (spec.channels, L):
            raise ValueError(f"{spec.name}: weights shape {w.shape}, expected {(spec.channels, L)}")
        qw = np.asarray(render.get("humidity_weights", 1.5 * w), dtype=float)
        lin = np.einsum("cl,lthw->cthw", w, latent.temperature) - np.einsum("cl,lthw->cthw", qw, latent.humidity)
        c0 = float(render.get("nl_center", 250.0))
        s = float(render.get("nl_scale", 60.0))
        vals = c0 + s * np.tanh((lin - c0) / s)
    elif fld == "noise":
        vals = np.full((spec.channels, T) + latent.elevation.shape, float(render.get("offset", 0.0)))
    else:
        raise ValueError(f"{spec.name}: unknown render field {fld!r}")

    if sigma > 0:
        vals = vals.copy()
        for t, when in enumerate(latent.times):
            rng = _stream(seed, "noise", spec.name, str(when))
            vals[:, t] += sigma * rng.standard_normal(vals[:, t].shape)
    return ObservationCube.from_values(spec.name, latent.times, vals, np.ones(vals.shape, bool))


# --------------------------------------------------------------------------
# coverage


def geo_disk_mask(grid: GridSpec, coverage_target: float, sub_satellite_lon: float = 0.0) -> np.ndarray:
    if not 0.0 < coverage_target <= 1.0:
        raise ValueError("coverage_target must be in (0, 1]")
    d = _accel.great_circle_deg(grid.lats.astype(np.float64), grid.lons.astype(np.float64), 0.0, float(sub_satellite_lon))
    flat = np.sort(d, axis=None)
    k = max(1, int(round(coverage_target * flat.size)))
    mask = d <= flat[k - 1]
    got = mask.mean()
    if abs(got - coverage_target) > 0.05:
        raise ValueError(
            f"unreachable coverage: disk about lon {sub_satellite_lon} reaches {got:.3f}, target {coverage_target}"
        )
    return mask


def leo_swath_mask(
    grid: GridSpec,
    coverage_target: float,
    seed: int,
    T: int,
    hour_offset: int = 0,
    shift_deg: float = 30.0,
) -> np.ndarray:
    if not 0.0 < coverage_target <= 1.0:
        raise ValueError("coverage_target must be in (0, 1]")
    width = max(1, int(round(coverage_target * grid.n_lon)))
    start_lon = _stream(seed, "swath").uniform(0.0, 360.0)
    mask = np.zeros((T, grid.n_lat, grid.n_lon), dtype=bool)
    for t in range(T):
        center = (start_lon + shift_deg * (hour_offset + t)) % 360.0
        c = int(np.rint((center - grid.lon_origin) / grid.resolution_deg)) % grid.n_lon
        cols = (c - width // 2 + np.arange(width)) % grid.n_lon
        mask[t][:, cols] = True
    return mask


def swath_center(seed: int, hour: int, shift_deg: float = 30.0) -> float:
    return (_stream(seed, "swath").uniform(0.0, 360.0) + shift_deg * hour) % 360.0


def apply_coverage(
    cube: ObservationCube,
    mask_kind: str,
    coverage_target: float,
    seed: int,
    grid: GridSpec,
    *,
    sub_satellite_lon: float = 0.0,
    hour_offset: int = 0,
    shift_deg: float = 30.0,
) -> ObservationCube:
    """Invalidate cells the simulated sensor did not see."""
    if not 0.0 < coverage_target <= 1.0:
        raise ValueError("coverage_target must be in (0, 1]")
    C, T = cube.shape[:2]
    if mask_kind == "full":
        return cube
    if mask_kind == "geo_disk":
        mask = np.broadcast_to(geo_disk_mask(grid, coverage_target, sub_satellite_lon), (T,) + grid.shape)
    elif mask_kind == "leo_swath":
        mask = leo_swath_mask(grid, coverage_target, seed, T, hour_offset, shift_deg)
    else:
        raise ValueError(f"unknown coverage kind {mask_kind!r}")
    valid = cube.valid & mask[None]
    return cube.with_values(cube.values, valid)


def observe(
    latent: LatentState,
    spec: ModalitySpec,
    seed: int,
    render: Mapping | None = None,
    hour_offset: int = 0,
) -> ObservationCube:
    """render_modality followed by the spec's coverage rule."""
    render = dict(render or {})
    cube = render_modality(latent, spec, seed, render)
    kind = render.get("coverage", spec.coverage_kind)
    return apply_coverage(
        cube,
        kind,
        spec.coverage_target,
        _stream(seed, "coverage", spec.name).integers(2**31),
        latent.grid,
        sub_satellite_lon=spec.sub_satellite_lon or 0.0,
        hour_offset=hour_offset,
        shift_deg=float(render.get("swath_shift_deg", 30.0)),
    )


# --------------------------------------------------------------------------
# radiosondes

STANDARD_LEVELS = (925.0, 850.0, 700.0, 500.0, 400.0, 300.0, 250.0, 200.0, 150.0, 100.0, 70.0, 50.0, 30.0, 20.0, 10.0)


@dataclass(frozen=True)
class Sounding:
    station: str
    lat: float
    lon: float
    time: np.datetime64
    levels: tuple[float, ...]
    temperature: tuple[float, ...]
    rh: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "station": self.station,
            "lat": self.lat,
            "lon": self.lon,
            "time": str(np.datetime64(self.time, "h")),
            "levels": list(self.levels),
            "temperature": list(self.temperature),
            "rh": list(self.rh),
        }

    @classmethod
    def from_dict(cls, d) -> "Sounding":
        return cls(
            d["station"],
            float(d["lat"]),
            float(d["lon"]),
            np.datetime64(d["time"], "h"),
            tuple(d["levels"]),
            tuple(d["temperature"]),
            tuple(d["rh"]),
        )


def generate_soundings(
    latent: LatentState,
    n_stations: int,
    seed: int,
    *,
    levels: Sequence[float] = STANDARD_LEVELS,
    t_noise_k: float = 0.5,
    rh_noise_pct: float = 3.0,
    stations: Sequence[tuple[int, int]] | None = None,
) -> list[Sounding]:
    """Radiosonde-like profiles at 00/12 UTC drawn from the latent truth."""
    from .verify import relative_humidity

    grid = latent.grid
    if stations is None:
        rs = _stream(seed, "stations")
        stations = list(zip(rs.integers(0, grid.n_lat, n_stations), rs.integers(0, grid.n_lon, n_stations)))
    p = latent.pressures
    levs = np.array([v for v in levels if p[0] <= v <= p[-1]], dtype=float)
    if levs.size == 0:
        return []
    out = []
    for t, when in enumerate(latent.times):
        if when.astype(object).hour % 12:
            continue
        rng = _stream(seed, "sondes", str(when))
        for s, (i, j) in enumerate(stations):
            tp = latent.temperature[:, t, i, j][None]
            qp = latent.humidity[:, t, i, j][None]
            T = _accel.interp_logp(p, np.ascontiguousarray(tp, dtype=np.float64), levs)[0]
            q = _accel.interp_logp(p, np.ascontiguousarray(qp, dtype=np.float64), levs)[0]
            rh = relative_humidity(q, T, levs)
            T = T + t_noise_k * rng.standard_normal(T.shape)
            rh = np.clip(rh + rh_noise_pct * rng.standard_normal(rh.shape), 0.0, 150.0)
            out.append(
                Sounding(
                    station=f"S{s:04d}",
                    lat=float(grid.lat_of(i)),
                    lon=float(grid.lon_of(j)),
                    time=when,
                    levels=tuple(levs.tolist()),
                    temperature=tuple(np.round(T, 4).tolist()),
                    rh=tuple(np.round(rh, 4).tolist()),
                )
            )
    return out


# --------------------------------------------------------------------------
# dataset synthesis


def latent_kwargs(cfg) -> dict:
    """Keyword arguments for generate_latent from the config's ``latent`` section."""
    lat = dict(cfg.latent)
    kw = {
        "levels": int(lat.get("levels", 10)),
        "correlation_cells": float(lat.get("correlation_cells", 12.0)),
        "advection": tuple(lat.get("advection", (0.1, 1.0))),
        "period_hours": float(lat.get("period_hours", 96.0)),
        "amplitude_k": float(lat.get("amplitude_k", 4.0)),
    }
    if lat.get("pressures") is not None:
        kw["pressures"] = [float(p) for p in lat["pressures"]]
        kw["levels"] = len(kw["pressures"])
    return kw


def synthesize(cfg, out_dir, days: float, seed: int, *, chunk_hours: int = 24, n_stations: int | None = None) -> dict:
    """Write ``data/`` (noisy, gappy), ``truth/`` (noise-free, full coverage)
    and ``soundings.jsonl`` under ``out_dir``.  Returns the written paths."""
    import json
    from pathlib import Path

    from .datastore import DatasetWriter

    hours = int(round(days * 24))
    if hours < 1:
        raise ValueError("days must cover at least one hour")
    out = Path(out_dir)
    kw = latent_kwargs(cfg)
    levels = kw.pop("levels")
    start = np.datetime64(cfg.start, "h")
    n_stations = int(cfg.verify.get("n_stations", 64) if n_stations is None else n_stations)
    truth_render = {n: dict(r, noise_sigma=0.0, coverage="full") for n, r in cfg.render.items()}
    soundings = []
    with DatasetWriter(out / "data", cfg.grid, cfg.modalities, start, chunk_hours) as data, DatasetWriter(
        out / "truth", cfg.grid, cfg.modalities, start, chunk_hours
    ) as truth:
        for h0 in range(0, hours, chunk_hours):
            T = min(chunk_hours, hours - h0)
            latent = generate_latent(seed, cfg.grid, T, levels, start=start, hour_offset=h0, **kw)
            for spec in cfg.modalities:
                if spec.kind is ModalityKind.STATIC and h0 > 0:
                    continue
                data.add(observe(latent, spec, seed, cfg.render.get(spec.name), hour_offset=h0))
                truth.add(observe(latent, spec, seed, truth_render.get(spec.name, {"coverage": "full"}), hour_offset=h0))
            soundings += generate_soundings(latent, n_stations, seed)
    path = out / "soundings.jsonl"
    with path.open("w") as fh:
        for s in soundings:
            fh.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")
    return {"data": out / "data" / "manifest.json", "truth": out / "truth" / "manifest.json", "soundings": path}


def load_soundings(path) -> list[Sounding]:
    import json

    with open(path) as fh:
        return [Sounding.from_dict(json.loads(line)) for line in fh if line.strip()]
