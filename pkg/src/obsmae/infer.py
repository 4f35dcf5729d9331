"""Inference modes: gap filling, 0/1-hour background, Hann-blended mosaics."""
from __future__ import annotations

from typing import Iterable, Mapping, Sequence

import numpy as np

from . import _accel
from .core import NormalizationStats, ObservationCube, denormalize, normalize
from .datastore import DatasetManifest, MultiModalSample, read_window
from .model import MaskPlan, MultiModalMAE, forward, full_plan, tokenize_sample


class InferenceError(Exception):
    pass


def _model_names(sample: MultiModalSample, model: MultiModalMAE):
    return [n for n in sample.names if n in model.specs]


def _normalized(sample: MultiModalSample, stats, names):
    return MultiModalSample({n: normalize(sample[n], stats[n]) for n in names}, sample.origin)


def _predict(sample, model, stats, plan, names, outputs=None):
    norm = _normalized(sample, stats, names)
    pred = forward(norm, plan, model, outputs=outputs)
    return {n: denormalize(c, stats[n]) for n, c in pred.items()}


def gap_fill(
    sample: MultiModalSample,
    model: MultiModalMAE,
    stats: Mapping[str, NormalizationStats],
    visible_modalities: Iterable[str] | None = None,
    outputs=None,
    allow_empty: bool = False,
) -> dict[str, ObservationCube]:
    """Dense physical-unit cubes for every modality, conditioned on all valid
    tokens of ``visible_modalities`` (default: every modality in the sample)."""
    names = _model_names(sample, model)
    visible = set(names if visible_modalities is None else visible_modalities)
    unknown = visible - set(names)
    if unknown:
        raise InferenceError(f"visible modalities not in sample/model: {sorted(unknown)}")
    ts = tokenize_sample(_normalized(sample, stats, names), model.config.patch_side, names)
    plan = full_plan(ts, visible)
    if plan.total == 0 and not allow_empty:
        raise InferenceError(f"empty visible set: no valid tokens in {sorted(visible)}")
    return _predict(sample, model, stats, plan, names, outputs)


def background_plan(sample: MultiModalSample, model: MultiModalMAE, stats, horizon: int, visible_modalities=None) -> MaskPlan:
    names = _model_names(sample, model)
    if horizon not in (0, 1):
        raise InferenceError("horizon must be 0 (analysis) or 1 (background)")
    if not any(model.specs[n].temporal for n in names):
        raise InferenceError("background forecast needs at least one temporal modality")
    visible = set(names if visible_modalities is None else visible_modalities)
    ts = tokenize_sample(_normalized(sample, stats, names), model.config.patch_side, names)
    last = model.config.hours - 1

    def drop(name, index):
        if horizon == 0 or not model.specs[name].temporal:
            return np.zeros(len(index), dtype=bool)
        return index[:, 0] == last

    return full_plan(ts, visible, drop=drop)


def background_forecast(
    sample: MultiModalSample,
    model: MultiModalMAE,
    stats: Mapping[str, NormalizationStats],
    horizon: int,
    visible_modalities=None,
) -> tuple[dict[str, ObservationCube], MaskPlan]:
    """Predict the last frame of each temporal modality.

    horizon=1 hides every token of the last frame before inference (the
    1-hour background); horizon=0 keeps them (the analysis).
    """
    names = _model_names(sample, model)
    T = {sample[n].shape[1] for n in names if model.specs[n].temporal}
    if T != {model.config.hours}:
        raise InferenceError(f"sample must carry {model.config.hours} frames, got {sorted(T)}")
    plan = background_plan(sample, model, stats, horizon, visible_modalities)
    if plan.total == 0:
        raise InferenceError("empty visible set")
    temporal = [n for n in names if model.specs[n].temporal]
    pred = _predict(sample, model, stats, plan, names, outputs=temporal)
    out = {}
    for n, cube in pred.items():
        out[n] = ObservationCube(n, cube.times[-1:], cube.values[:, -1:], cube.valid[:, -1:])
    return out, plan


# --------------------------------------------------------------------------
# blending


def hann_window(n: int) -> np.ndarray:
    """Hann taper sampled at cell centres: strictly positive, sums to 1 under
    half-overlap."""
    k = np.arange(n)
    return np.sin(np.pi * (k + 0.5) / n) ** 2


def hann_window_2d(h: int, w: int) -> np.ndarray:
    return np.outer(hann_window(h), hann_window(w))


def hann_blend(tiles: Sequence[tuple[np.ndarray, tuple[int, int]]], shape: tuple[int, int], stride: int | None = None) -> np.ndarray:
    """Weighted average of overlapping tiles with separable Hann weights.

    ``tiles`` holds ``(field, (lat0, lon0))`` with field shaped (..., h, w).
    Longitude wraps; rows outside the grid are dropped.  Raises if any
    cell of ``shape`` receives no weight.
    """
    if not tiles:
        raise InferenceError("no tiles to blend")
    H, W = (shape.shape if hasattr(shape, "shape") else shape)
    lead = tiles[0][0].shape[:-2]
    h, w = tiles[0][0].shape[-2:]
    if stride is not None and stride > max(h, w):
        raise InferenceError(f"stride {stride} exceeds tile size {(h, w)}")
    L = int(np.prod(lead, dtype=np.int64))
    num = np.zeros((L, H, W))
    den = np.zeros((H, W))
    weight = hann_window_2d(h, w)
    for field, (lat0, lon0) in tiles:
        if field.shape[-2:] != (h, w):
            raise InferenceError("all tiles must share one size")
        tile = np.ascontiguousarray(field.reshape(L, h, w), dtype=np.float64)
        _accel.hann_accumulate(num, den, tile, weight, int(lat0), int(lon0) % W)
    bad = np.argwhere(den <= 0)
    if len(bad):
        raise InferenceError(f"{len(bad)} uncovered cells, e.g. (lat, lon) index {tuple(bad[0])}")
    return (num / den).reshape(lead + (H, W))


def tile_origins(n: int, window: int, stride: int, wrap: bool) -> list[int]:
    if stride < 1 or stride > window:
        raise InferenceError(f"stride must be in [1, {window}], got {stride}")
    if wrap:
        return list(range(0, n, stride))
    out = list(range(0, n - window + 1, stride))
    if out[-1] + window < n:
        out.append(n - window)
    return out


def mosaic_timeblock(
    manifest: DatasetManifest,
    model: MultiModalMAE,
    stats: Mapping[str, NormalizationStats],
    t0,
    stride: int | None = None,
    visible_modalities=None,
    outputs=None,
    block_hours: int = 12,
) -> dict[str, ObservationCube]:
    """Global dense fields for hours [t0, t0 + 12): tile, gap fill, blend."""
    grid = manifest.grid
    t_idx = manifest.hour_index(t0)
    when = manifest.start + np.timedelta64(t_idx, "h")
    if when.astype(object).hour % block_hours:
        raise InferenceError(f"block start {when} is not aligned to a {block_hours}-hour boundary")
    stride = stride or grid.window // 2
    lat_o = tile_origins(grid.n_lat, grid.window, stride, wrap=False)
    lon_o = tile_origins(grid.n_lon, grid.window, stride, wrap=True)
    tiles: dict[str, list] = {}
    times: dict[str, np.ndarray] = {}
    for a in lat_o:
        for b in lon_o:
            sample = read_window(manifest, t_idx, a, b, hours=model.config.hours)
            pred = gap_fill(sample, model, stats, visible_modalities, outputs=outputs, allow_empty=True)
            for n, cube in pred.items():
                tiles.setdefault(n, []).append((cube.values, (a, b)))
                times[n] = cube.times
    out = {}
    for n, tl in tiles.items():
        vals = hann_blend(tl, grid.shape, stride).astype(np.float32)
        out[n] = ObservationCube(n, times[n], vals, np.ones(vals.shape, dtype=bool))
    return out
