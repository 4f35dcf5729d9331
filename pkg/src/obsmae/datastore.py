"""Chunked raw-float32 dataset on disk, plus the training-window sampler.

Layout under a dataset root::

    manifest.json
    <modality>/<t_start>.f32        little-endian float32, C-order (C, T, H, W)
    <modality>/<t_start>.valid      uint8 validity, same shape
    <modality>/<t_start>.json       sidecar: dims, shape, dtype, missing sentinel, times

``manifest.json`` is written last via atomic rename, so a dataset directory
without one is an incomplete write.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .core import MISSING, GridSpec, ModalitySpec, ObservationCube

FORMAT_VERSION = 1
WINDOW_HOURS = 12


class DatasetError(Exception):
    pass


@dataclass(frozen=True)
class ChunkRef:
    modality: str
    t_start: int
    n_times: int
    values: str
    valid: str
    sidecar: str
    nbytes: int

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class DatasetManifest:
    root: Path
    grid: GridSpec
    modalities: list[ModalitySpec]
    start: np.datetime64
    n_hours: int
    chunk_hours: int
    files: list[ChunkRef]
    _maps: dict = field(default_factory=dict, repr=False)

    @property
    def path(self) -> Path:
        return self.root / "manifest.json"

    @property
    def end(self) -> np.datetime64:
        """Last stored hour (inclusive)."""
        return self.start + np.timedelta64(self.n_hours - 1, "h")

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.modalities]

    def spec(self, name: str) -> ModalitySpec:
        for m in self.modalities:
            if m.name == name:
                return m
        raise KeyError(f"modality {name!r} not in dataset {self.root}")

    def chunks(self, name: str) -> list[ChunkRef]:
        return sorted((f for f in self.files if f.modality == name), key=lambda f: f.t_start)

    def hour_index(self, t) -> int:
        if isinstance(t, (int, np.integer)):
            return int(t)
        return int((np.datetime64(t, "h") - self.start) / np.timedelta64(1, "h"))

    def _arrays(self, ref: ChunkRef):
        hit = self._maps.get(ref.values)
        if hit is None:
            spec = self.spec(ref.modality)
            shape = (spec.channels, ref.n_times) + self.grid.shape
            vals = np.memmap(self.root / ref.values, dtype="<f4", mode="r", shape=shape)
            valid = np.memmap(self.root / ref.valid, dtype="u1", mode="r", shape=shape)
            hit = self._maps[ref.values] = (vals, valid)
        return hit

    def iter_cubes(self, name: str) -> Iterator[ObservationCube]:
        for ref in self.chunks(name):
            vals, valid = self._arrays(ref)
            times = self.start + np.arange(ref.t_start, ref.t_start + ref.n_times).astype("timedelta64[h]")
            yield ObservationCube(name, times, np.array(vals), np.array(valid).astype(bool))

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "grid": self.grid.to_dict(),
            "modalities": [m.to_dict() for m in self.modalities],
            "time": {"start": str(self.start), "n_hours": self.n_hours, "step_hours": 1},
            "chunking": {"hours": self.chunk_hours, "dims": ["channel", "time", "lat", "lon"]},
            "files": [f.to_dict() for f in self.files],
        }


def open_dataset(path) -> DatasetManifest:
    """Load and validate a manifest (file path or dataset directory)."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise DatasetError(f"manifest not found: {path}")
    doc = json.loads(path.read_text())
    root = path.parent
    files = [ChunkRef(**f) for f in doc["files"]]
    for f in files:
        for rel, expected in ((f.values, f.nbytes), (f.valid, f.nbytes // 4)):
            p = root / rel
            if not p.exists():
                raise DatasetError(f"missing chunk file: {p}")
            if p.stat().st_size != expected:
                raise DatasetError(f"chunk file {p} has {p.stat().st_size} bytes, manifest says {expected}")
    man = DatasetManifest(
        root=root,
        grid=GridSpec.from_dict(doc["grid"]),
        modalities=[ModalitySpec.from_dict(m) for m in doc["modalities"]],
        start=np.datetime64(doc["time"]["start"], "h"),
        n_hours=int(doc["time"]["n_hours"]),
        chunk_hours=int(doc["chunking"]["hours"]),
        files=files,
    )
    for f in files:
        if man.spec(f.modality).temporal and f.t_start + f.n_times > man.n_hours:
            raise DatasetError(f"chunk {f.values} extends past the manifest time range")
    return man


class DatasetWriter:
    """Streams full-grid cubes to chunk files; the manifest appears on close()."""

    def __init__(self, root, grid: GridSpec, modalities: Sequence[ModalitySpec], start, chunk_hours: int = 24):
        if not modalities:
            raise DatasetError("dataset needs at least one modality")
        self.root = Path(root)
        self.grid = grid
        self.modalities = list(modalities)
        self.start = np.datetime64(start, "h")
        self.chunk_hours = int(chunk_hours)
        self.files: list[ChunkRef] = []
        self.root.mkdir(parents=True, exist_ok=True)
        manifest = self.root / "manifest.json"
        if manifest.exists():
            manifest.unlink()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()

    def _spec(self, name):
        for m in self.modalities:
            if m.name == name:
                return m
        raise DatasetError(f"cube for unknown modality {name!r}")

    def add(self, cube: ObservationCube) -> None:
        spec = self._spec(cube.modality)
        cube.check_spec(spec)
        if cube.values.shape[2:] != self.grid.shape:
            raise DatasetError(f"{cube.modality}: cube spatial shape {cube.values.shape[2:]} != grid {self.grid.shape}")
        t0 = int((cube.times[0] - self.start) / np.timedelta64(1, "h"))
        if not spec.temporal:
            self._write(spec, 0, cube.values, cube.valid, cube.times)
            return
        if t0 < 0:
            raise DatasetError(f"{cube.modality}: cube starts before dataset start {self.start}")
        T = cube.values.shape[1]
        k = 0
        while k < T:
            t_abs = t0 + k
            n = min(T - k, self.chunk_hours - (t_abs % self.chunk_hours))
            self._write(spec, t_abs, cube.values[:, k : k + n], cube.valid[:, k : k + n], cube.times[k : k + n])
            k += n

    def _write(self, spec, t_start, values, valid, times):
        d = self.root / spec.name
        d.mkdir(exist_ok=True)
        stem = f"{spec.name}/{t_start:06d}"
        vals = np.where(valid, values, MISSING).astype("<f4")
        vals.tofile(self.root / f"{stem}.f32")
        valid.astype("u1").tofile(self.root / f"{stem}.valid")
        sidecar = {
            "modality": spec.name,
            "dims": ["channel", "time", "lat", "lon"],
            "shape": list(vals.shape),
            "order": "C",
            "dtype": "<f4",
            "missing": "NaN",
            "valid_file": f"{t_start:06d}.valid",
            "valid_dtype": "u1",
            "times": [str(t) for t in times],
        }
        (self.root / f"{stem}.json").write_text(json.dumps(sidecar, indent=1) + "\n")
        self.files = [f for f in self.files if f.values != f"{stem}.f32"]
        self.files.append(
            ChunkRef(spec.name, t_start, vals.shape[1], f"{stem}.f32", f"{stem}.valid", f"{stem}.json", vals.nbytes)
        )

    def close(self) -> DatasetManifest:
        temporal = [f for f in self.files if self._spec(f.modality).temporal]
        n_hours = max((f.t_start + f.n_times for f in temporal), default=1)
        self.files.sort(key=lambda f: (f.modality, f.t_start))
        man = DatasetManifest(self.root, self.grid, self.modalities, self.start, n_hours, self.chunk_hours, self.files)
        tmp = self.root / "manifest.json.tmp"
        tmp.write_text(json.dumps(man.to_dict(), indent=1, sort_keys=True) + "\n")
        os.replace(tmp, self.root / "manifest.json")
        return man


def write_dataset(cubes: Iterable[ObservationCube], manifest_path, grid: GridSpec, modalities, start=None, chunk_hours=24):
    cubes = list(cubes)
    root = Path(manifest_path)
    if root.suffix == ".json":
        root = root.parent
    if start is None:
        start = min(c.times[0] for c in cubes)
    with DatasetWriter(root, grid, modalities, start, chunk_hours) as w:
        for c in cubes:
            w.add(c)
    return open_dataset(root)


# --------------------------------------------------------------------------
# windows


@dataclass(frozen=True, eq=False)
class MultiModalSample:
    cubes: dict[str, ObservationCube]
    origin: tuple[int, int, int]  # (hour index, lat index, lon index)

    def __getitem__(self, name) -> ObservationCube:
        return self.cubes[name]

    @property
    def names(self) -> list[str]:
        return list(self.cubes)

    def valid_fraction(self) -> float:
        n = sum(c.valid.size for c in self.cubes.values())
        return sum(int(c.valid.sum()) for c in self.cubes.values()) / max(n, 1)

    def has_valid_patch(self, patch: int) -> bool:
        for c in self.cubes.values():
            C, T, H, W = c.valid.shape
            v = c.valid.reshape(C, T, H // patch, patch, W // patch, patch).all(axis=(0, 3, 5))
            if v.any():
                return True
        return False

    def subset(self, names: Iterable[str]) -> "MultiModalSample":
        return MultiModalSample({n: self.cubes[n] for n in names}, self.origin)


def read_region(manifest: DatasetManifest, t0, hours: int, lat0: int, n_rows: int, lon0: int, n_cols: int, names=None):
    t0 = manifest.hour_index(t0)
    if t0 < 0 or t0 + hours > manifest.n_hours:
        raise DatasetError(
            f"time window [{t0}, {t0 + hours}) outside stored range [0, {manifest.n_hours})"
        )
    if lat0 < 0 or lat0 + n_rows > manifest.grid.n_lat:
        raise DatasetError(f"latitude rows [{lat0}, {lat0 + n_rows}) overflow grid of {manifest.grid.n_lat}")
    cols = (lon0 + np.arange(n_cols)) % manifest.grid.n_lon
    times = manifest.start + np.arange(t0, t0 + hours).astype("timedelta64[h]")
    out = {}
    for spec in manifest.modalities:
        if names is not None and spec.name not in names:
            continue
        T = hours if spec.temporal else 1
        vals = np.full((spec.channels, T, n_rows, n_cols), MISSING, dtype=np.float32)
        valid = np.zeros(vals.shape, dtype=bool)
        for ref in manifest.chunks(spec.name):
            if spec.temporal:
                a, b = max(t0, ref.t_start), min(t0 + hours, ref.t_start + ref.n_times)
                if a >= b:
                    continue
                src = slice(a - ref.t_start, b - ref.t_start)
                dst = slice(a - t0, b - t0)
            else:
                src, dst = slice(0, 1), slice(0, 1)
            mv, mm = manifest._arrays(ref)
            block = mv[:, src, lat0 : lat0 + n_rows]
            vals[:, dst] = np.take(block, cols, axis=3)
            valid[:, dst] = np.take(mm[:, src, lat0 : lat0 + n_rows], cols, axis=3).astype(bool)
        out[spec.name] = ObservationCube(spec.name, times if spec.temporal else times[:1], vals, valid)
    return out


def read_window(manifest: DatasetManifest, t0, lat0: int, lon0: int, hours: int = WINDOW_HOURS, names=None) -> MultiModalSample:
    """Co-registered (window x window) x ``hours`` sample; longitude wraps."""
    w = manifest.grid.window
    t0 = manifest.hour_index(t0)
    cubes = read_region(manifest, t0, hours, lat0, w, lon0 % manifest.grid.n_lon, w, names)
    return MultiModalSample(cubes, (t0, int(lat0), int(lon0) % manifest.grid.n_lon))


def sample_windows(
    manifest: DatasetManifest,
    n: int,
    rng,
    min_valid_fraction: float = 0.05,
    max_attempts: int | None = None,
    hours: int = WINDOW_HOURS,
    names=None,
    hour_range: tuple[int, int] | None = None,
) -> list[MultiModalSample]:
    """Rejection-sample ``n`` windows with at least ``min_valid_fraction`` valid cells.

    ``hour_range=(lo, hi)`` keeps every window inside hours [lo, hi), which is
    how training and validation splits are carved from one record.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    grid = manifest.grid
    max_attempts = max_attempts if max_attempts is not None else 50 * n + 100
    lo, hi = hour_range if hour_range is not None else (0, manifest.n_hours)
    lo, hi = max(0, int(lo)), min(manifest.n_hours, int(hi))
    if hi - lo < hours:
        raise DatasetError(f"hour range [{lo}, {hi}) holds fewer than the {hours} hours a window needs")
    out = []
    for _ in range(max_attempts):
        t0 = int(rng.integers(lo, hi - hours + 1))
        lat0 = int(rng.integers(0, grid.n_lat - grid.window + 1))
        lon0 = int(rng.integers(0, grid.n_lon))
        s = read_window(manifest, t0, lat0, lon0, hours, names)
        if min_valid_fraction <= 0 or (
            s.valid_fraction() >= min_valid_fraction and s.has_valid_patch(grid.patch)
        ):
            out.append(s)
            if len(out) == n:
                return out
    raise DatasetError(
        f"sampler gave up after {max_attempts} attempts ({len(out)}/{n} windows with valid fraction >= {min_valid_fraction})"
    )
