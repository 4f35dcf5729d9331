"""Domain types shared by every stage: grid geometry, modalities, cubes, stats."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

MISSING = np.float32(np.nan)
HOUR = np.timedelta64(1, "h")


class ModalityKind(str, enum.Enum):
    GEO = "GEO"
    LEO = "LEO"
    STATIC = "STATIC"
    PROFILE = "PROFILE"


@dataclass(frozen=True)
class GridSpec:
    """Equirectangular lat/lon grid.  Cell ``i`` sits at ``lat_origin + i * res``."""

    resolution_deg: float = 0.16
    n_lat: int = 1125
    n_lon: int = 2249
    window: int = 144
    patch: int = 16
    lat_origin: float = -89.92
    lon_origin: float = -180.0

    def __post_init__(self):
        if self.resolution_deg <= 0:
            raise ValueError("resolution_deg must be positive")
        if self.n_lat < self.window or self.n_lon < self.window:
            raise ValueError(
                f"grid ({self.n_lat}, {self.n_lon}) smaller than window {self.window}"
            )
        if self.window % self.patch:
            raise ValueError(f"window {self.window} not divisible by patch {self.patch}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_lat, self.n_lon)

    @property
    def lats(self) -> np.ndarray:
        return self.lat_origin + np.arange(self.n_lat) * self.resolution_deg

    @property
    def lons(self) -> np.ndarray:
        return self.lon_origin + np.arange(self.n_lon) * self.resolution_deg

    def lat_of(self, i):
        return self.lat_origin + np.asarray(i) * self.resolution_deg

    def lon_of(self, j):
        lon = self.lon_origin + (np.asarray(j) % self.n_lon) * self.resolution_deg
        return lon

    def lat_index(self, lat):
        idx = np.rint((np.asarray(lat) - self.lat_origin) / self.resolution_deg).astype(int)
        if np.any((idx < 0) | (idx >= self.n_lat)):
            raise ValueError("latitude outside grid")
        return idx

    def lon_index(self, lon):
        idx = np.rint((np.asarray(lon) - self.lon_origin) / self.resolution_deg).astype(int)
        return idx % self.n_lon

    def to_dict(self) -> dict:
        return {
            "resolution_deg": self.resolution_deg,
            "n_lat": self.n_lat,
            "n_lon": self.n_lon,
            "window": self.window,
            "patch": self.patch,
            "lat_origin": self.lat_origin,
            "lon_origin": self.lon_origin,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GridSpec":
        return cls(**{k: d[k] for k in d if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    kind: ModalityKind
    channels: int
    temporal: bool = True
    channel_labels: tuple[str, ...] = ()
    coverage_target: float = 1.0
    sub_satellite_lon: float | None = None
    levels: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", ModalityKind(self.kind))
        object.__setattr__(self, "channel_labels", tuple(self.channel_labels))
        object.__setattr__(self, "levels", tuple(float(v) for v in self.levels))
        if self.channels < 1:
            raise ValueError(f"{self.name}: channels must be >= 1")
        if self.temporal == (self.kind is ModalityKind.STATIC):
            raise ValueError(f"{self.name}: temporal must be False exactly for STATIC")
        if not 0.0 < self.coverage_target <= 1.0:
            raise ValueError(f"{self.name}: coverage_target must be in (0, 1]")
        if self.channel_labels and len(self.channel_labels) != self.channels:
            raise ValueError(f"{self.name}: {len(self.channel_labels)} labels for {self.channels} channels")
        if self.kind is ModalityKind.PROFILE:
            if len(self.levels) != self.channels:
                raise ValueError(f"{self.name}: PROFILE needs one level per channel")
            if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
                raise ValueError(f"{self.name}: levels must be strictly increasing in pressure")
        if self.kind is ModalityKind.GEO and self.sub_satellite_lon is None:
            object.__setattr__(self, "sub_satellite_lon", 0.0)

    @property
    def labels(self) -> tuple[str, ...]:
        if self.channel_labels:
            return self.channel_labels
        if self.levels:
            return tuple(f"{p:g} hPa" for p in self.levels)
        return tuple(f"ch{c + 1}" for c in range(self.channels))

    @property
    def coverage_kind(self) -> str:
        return {
            ModalityKind.GEO: "geo_disk",
            ModalityKind.LEO: "leo_swath",
            ModalityKind.PROFILE: "leo_swath",
            ModalityKind.STATIC: "full",
        }[self.kind]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind.value,
            "channels": self.channels,
            "temporal": self.temporal,
            "channel_labels": list(self.channel_labels),
            "coverage_target": self.coverage_target,
            "sub_satellite_lon": self.sub_satellite_lon,
            "levels": list(self.levels),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModalitySpec":
        kind = ModalityKind(d["kind"])
        return cls(
            name=d["name"],
            kind=kind,
            channels=int(d["channels"]),
            temporal=d.get("temporal", kind is not ModalityKind.STATIC),
            channel_labels=tuple(d.get("channel_labels") or ()),
            coverage_target=float(d.get("coverage_target", 1.0)),
            sub_satellite_lon=d.get("sub_satellite_lon"),
            levels=tuple(d.get("levels") or ()),
        )


@dataclass(frozen=True, eq=False)
class ObservationCube:
    """One modality's (channels, time, lat, lon) values plus validity mask.

    Invalid cells hold ``MISSING``; readers must use ``valid``.
    """

    modality: str
    times: np.ndarray
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype="datetime64[h]")
        object.__setattr__(self, "times", times)
        if self.values.ndim != 4:
            raise ValueError(f"{self.modality}: values must be (C, T, H, W), got {self.values.shape}")
        if self.valid.shape != self.values.shape or self.valid.dtype != bool:
            raise ValueError(f"{self.modality}: valid mask must be a bool array shaped like values")
        if self.values.shape[1] != len(times):
            raise ValueError(f"{self.modality}: {len(times)} timestamps for T={self.values.shape[1]}")
        if len(times) > 1 and np.any(np.diff(times) != HOUR):
            raise ValueError(f"{self.modality}: times must increase by exactly one hour")

    @property
    def shape(self):
        return self.values.shape

    @classmethod
    def from_values(cls, modality, times, values, valid=None) -> "ObservationCube":
        values = np.asarray(values, dtype=np.float32)
        if valid is None:
            valid = np.isfinite(values)
        values = np.where(valid, values, MISSING).astype(np.float32)
        return cls(modality, times, values, np.asarray(valid, dtype=bool))

    def with_values(self, values, valid=None) -> "ObservationCube":
        valid = self.valid if valid is None else valid
        return ObservationCube(self.modality, self.times, np.where(valid, values, MISSING).astype(np.float32), valid)

    def check_spec(self, spec: ModalitySpec):
        if self.values.shape[0] != spec.channels:
            raise ValueError(f"{self.modality}: {self.values.shape[0]} channels, spec says {spec.channels}")
        if not spec.temporal and self.values.shape[1] != 1:
            raise ValueError(f"{self.modality}: static modality must have T=1")


# --------------------------------------------------------------------------
# normalization


@dataclass(frozen=True, eq=False)
class NormalizationStats:
    modality: str
    mean: np.ndarray
    std: np.ndarray
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        if np.any(~(np.asarray(self.std) > 0)):
            raise ValueError(f"{self.modality}: std must be positive for every channel")


class _Moments:
    """Chan et al. pairwise merge of (count, mean, M2) per channel."""

    def __init__(self, n_channels):
        self.n = np.zeros(n_channels)
        self.mean = np.zeros(n_channels)
        self.m2 = np.zeros(n_channels)

    def update(self, values, valid):
        for c in range(values.shape[0]):
            x = values[c][valid[c]].astype(np.float64)
            nb = x.size
            if nb == 0:
                continue
            mb = x.mean()
            m2b = np.sum((x - mb) ** 2)
            na = self.n[c]
            delta = mb - self.mean[c]
            tot = na + nb
            self.mean[c] += delta * nb / tot
            self.m2[c] += m2b + delta**2 * na * nb / tot
            self.n[c] = tot


def compute_norm_stats(dataset, modality: str, labels: Sequence[str] = (), hour_range=None) -> NormalizationStats:
    """Per-channel mean and (population) std over valid cells only.

    ``dataset`` is a datastore manifest or any iterable of cubes; cubes of other
    modalities are skipped.  ``hour_range`` = (lo, hi) restricts temporal
    frames to manifest hours [lo, hi), i.e. the training split; static cubes
    always count.
    """
    if hasattr(dataset, "iter_cubes"):
        cubes = dataset.iter_cubes(modality)
        if not labels:
            labels = dataset.spec(modality).labels
        temporal = dataset.spec(modality).temporal
    else:
        if hour_range is not None:
            raise ValueError("hour_range needs a dataset manifest")
        cubes = (c for c in dataset if c.modality == modality)
    moments = None
    for cube in cubes:
        values, valid = cube.values, cube.valid
        if hour_range is not None and temporal:
            hours = (cube.times - dataset.start).astype("timedelta64[h]").astype(np.int64)
            keep = (hours >= hour_range[0]) & (hours < hour_range[1])
            if not keep.any():
                continue
            values, valid = values[:, keep], valid[:, keep]
        if moments is None:
            moments = _Moments(values.shape[0])
        moments.update(values, valid)
    if moments is None:
        raise ValueError(f"no cubes for modality {modality!r}")
    labels = tuple(labels) or tuple(f"ch{c + 1}" for c in range(len(moments.n)))
    for c, n in enumerate(moments.n):
        if n < 2:
            raise ValueError(f"{modality}: channel {labels[c]!r} has fewer than 2 valid cells")
    std = np.sqrt(moments.m2 / moments.n)
    for c, s in enumerate(std):
        if not s > 0:
            raise ValueError(f"{modality}: channel {labels[c]!r} has zero variance (degenerate channel)")
    return NormalizationStats(modality, moments.mean.copy(), std, labels)


def _broadcast(stats: NormalizationStats, cube: ObservationCube):
    if len(stats.mean) != cube.values.shape[0]:
        raise ValueError(
            f"{cube.modality}: stats have {len(stats.mean)} channels, cube has {cube.values.shape[0]}"
        )
    return stats.mean[:, None, None, None], stats.std[:, None, None, None]


def normalize(cube: ObservationCube, stats: NormalizationStats) -> ObservationCube:
    mu, sd = _broadcast(stats, cube)
    out = np.where(cube.valid, (cube.values.astype(np.float64) - mu) / sd, cube.values)
    return ObservationCube(cube.modality, cube.times, out.astype(np.float32), cube.valid.copy())


def denormalize(cube: ObservationCube, stats: NormalizationStats) -> ObservationCube:
    mu, sd = _broadcast(stats, cube)
    out = np.where(cube.valid, cube.values.astype(np.float64) * sd + mu, cube.values)
    return ObservationCube(cube.modality, cube.times, out.astype(np.float32), cube.valid.copy())


def save_stats(stats: Iterable[NormalizationStats], path) -> None:
    doc = {}
    for s in stats:
        labels = s.labels or tuple(f"ch{c + 1}" for c in range(len(s.mean)))
        doc[s.modality] = {
            lab: {"mean": float(m), "std": float(sd)} for lab, m, sd in zip(labels, s.mean, s.std)
        }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_stats(path) -> dict[str, NormalizationStats]:
    doc = json.loads(Path(path).read_text())
    out = {}
    for name, chans in doc.items():
        labels = tuple(chans)
        mean = np.array([chans[k]["mean"] for k in labels])
        std = np.array([chans[k]["std"] for k in labels])
        out[name] = NormalizationStats(name, mean, std, labels)
    return out


# --------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    """Parsed YAML config.  Sections other than grid/modalities stay as dicts."""

    grid: GridSpec
    modalities: list[ModalitySpec]
    render: dict[str, dict] = field(default_factory=dict)
    start: str = "2024-02-01T00"
    stats_path: str | None = None
    latent: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    infer: dict = field(default_factory=dict)
    verify: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    def spec(self, name: str) -> ModalitySpec:
        for m in self.modalities:
            if m.name == name:
                return m
        raise KeyError(name)


def parse_config(doc: Mapping) -> RunConfig:
    grid = GridSpec.from_dict(doc.get("grid", {}))
    mods, render = [], {}
    for entry in doc.get("modalities", []):
        entry = dict(entry)
        render[entry["name"]] = dict(entry.pop("render", {}) or {})
        mods.append(ModalitySpec.from_dict(entry))
    names = [m.name for m in mods]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate modality names in {names}")
    return RunConfig(
        grid=grid,
        modalities=mods,
        render=render,
        start=str(doc.get("start", "2024-02-01T00")),
        stats_path=doc.get("stats_path"),
        latent=dict(doc.get("latent", {}) or {}),
        model=dict(doc.get("model", {}) or {}),
        train=dict(doc.get("train", {}) or {}),
        infer=dict(doc.get("infer", {}) or {}),
        verify=dict(doc.get("verify", {}) or {}),
        raw=dict(doc),
    )


def load_config(path) -> RunConfig:
    import yaml

    with open(path) as fh:
        return parse_config(yaml.safe_load(fh) or {})


def set_dotted(doc: dict, dotted: str, value) -> None:
    """``set_dotted(d, "train.lr", 1e-3)`` -- used for CLI overrides."""
    keys = dotted.split(".")
    cur = doc
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
    cur[keys[-1]] = value


__all__ = [
    "MISSING",
    "GridSpec",
    "ModalityKind",
    "ModalitySpec",
    "ObservationCube",
    "NormalizationStats",
    "RunConfig",
    "compute_norm_stats",
    "normalize",
    "denormalize",
    "save_stats",
    "load_stats",
    "load_config",
    "parse_config",
]
