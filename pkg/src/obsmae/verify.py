"""Verification statistics: departures, sensor sensitivity, radiosonde matchups."""
from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats as sps

from . import _accel
from .core import GridSpec, ModalityKind, NormalizationStats, ObservationCube

log = logging.getLogger(__name__)

EPSILON = 0.622
STANDARD_LEVELS = (925.0, 850.0, 700.0, 500.0, 400.0, 300.0, 250.0, 200.0, 150.0, 100.0, 70.0, 50.0, 30.0, 20.0, 10.0)


def _fmt(x, nd=3):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    return f"{x:.{nd}f}"


# --------------------------------------------------------------------------
# background departures


@dataclass
class DepartureRow:
    modality: str
    channel: str
    analysis_bias: float = float("nan")
    analysis_mae: float = float("nan")
    analysis_n: int = 0
    background_bias: float = float("nan")
    background_mae: float = float("nan")
    background_n: int = 0


@dataclass
class DepartureReport:
    rows: list[DepartureRow]
    warnings: list[str] = field(default_factory=list)

    def row(self, modality, channel) -> DepartureRow:
        for r in self.rows:
            if r.modality == modality and r.channel == str(channel):
                return r
        raise KeyError((modality, channel))

    def csv_rows(self):
        yield ["sensor", "channel", "bias_analysis", "bias_background", "mae_analysis", "mae_background", "n_analysis", "n_background"]
        for r in self.rows:
            yield [
                r.modality,
                r.channel,
                _fmt(r.analysis_bias),
                _fmt(r.background_bias),
                _fmt(r.analysis_mae),
                _fmt(r.background_mae),
                r.analysis_n,
                r.background_n,
            ]

    def to_csv(self, path):
        write_csv(path, self.csv_rows())


class DepartureAccumulator:
    """Running sums of (pred - obs) and |pred - obs| over obs-valid cells."""

    def __init__(self):
        self.sums = defaultdict(lambda: np.zeros(3))  # (column, modality, channel) -> [sum, sum_abs, n]
        self.labels: dict[str, Sequence[str]] = {}

    def add(self, column: str, pred: Mapping[str, ObservationCube], obs: Mapping[str, ObservationCube], labels=None):
        for name, o in obs.items():
            if name not in pred:
                continue
            p = pred[name]
            pv = p.values if isinstance(p, ObservationCube) else np.asarray(p)
            if pv.shape != o.values.shape:
                raise ValueError(f"{name}: prediction shape {pv.shape} != observation shape {o.values.shape}")
            chans = (labels or {}).get(name) or [str(c + 1) for c in range(o.values.shape[0])]
            self.labels.setdefault(name, list(chans))
            for c in range(o.values.shape[0]):
                m = o.valid[c]
                d = pv[c][m].astype(np.float64) - o.values[c][m].astype(np.float64)
                self.sums[(column, name, c)] += (d.sum(), np.abs(d).sum(), d.size)

    def report(self) -> DepartureReport:
        rows, warnings = [], []
        for name, chans in self.labels.items():
            for c, lab in enumerate(chans):
                row = DepartureRow(name, str(lab))
                for column in ("analysis", "background"):
                    s, a, n = self.sums.get((column, name, c), np.zeros(3))
                    if n > 0:
                        setattr(row, f"{column}_bias", s / n)
                        setattr(row, f"{column}_mae", a / n)
                        setattr(row, f"{column}_n", int(n))
                if row.analysis_n == 0 and row.background_n == 0:
                    warnings.append(f"{name} channel {lab}: no valid observation cells, row omitted")
                    continue
                rows.append(row)
        for w in warnings:
            log.warning(w)
        return DepartureReport(rows, warnings)


def departures(pred_cubes, obs_cubes, background_cubes=None, labels=None) -> DepartureReport:
    """Bias and MAE per (modality, channel) over cells valid in ``obs_cubes``.

    ``pred_cubes`` fill the analysis column, ``background_cubes`` (optional)
    the background column.
    """
    acc = DepartureAccumulator()
    acc.add("analysis", pred_cubes, obs_cubes, labels)
    if background_cubes is not None:
        acc.add("background", background_cubes, obs_cubes, labels)
    return acc.report()


def evaluate_departures(samples, model, stats, labels=None) -> DepartureReport:
    """Analysis (h=0) vs background (h=1) departures of the last frame."""
    from .infer import background_forecast

    acc = DepartureAccumulator()
    for s in samples:
        obs = {}
        for n in s.names:
            if n in model.specs and model.specs[n].temporal:
                c = s[n]
                obs[n] = ObservationCube(n, c.times[-1:], c.values[:, -1:], c.valid[:, -1:])
        ana, _ = background_forecast(s, model, stats, 0)
        bkg, _ = background_forecast(s, model, stats, 1)
        acc.add("analysis", ana, obs, labels)
        acc.add("background", bkg, obs, labels)
    return acc.report()


# --------------------------------------------------------------------------
# sensor sensitivity


@dataclass
class SensitivityRow:
    mode: str
    perturbed: str
    target: str
    surface: str
    mae: float
    baseline_mae: float
    relative_mae: float
    flagged: bool = False


@dataclass
class SensitivityReport:
    rows: list[SensitivityRow]

    def get(self, perturbed, target, surface) -> SensitivityRow:
        for r in self.rows:
            if (r.perturbed, r.target, r.surface) == (perturbed, target, surface):
                return r
        raise KeyError((perturbed, target, surface))

    def csv_rows(self):
        yield ["mode", "perturbed", "target", "surface", "mae", "baseline_mae", "relative_mae", "flagged"]
        for r in self.rows:
            yield [r.mode, r.perturbed, r.target, r.surface, _fmt(r.mae, 6), _fmt(r.baseline_mae, 6), _fmt(r.relative_mae, 6), int(r.flagged)]

    def to_csv(self, path):
        write_csv(path, self.csv_rows())


def land_mask_of(sample, model) -> np.ndarray:
    for n in sample.names:
        spec = model.specs.get(n)
        if spec is not None and spec.kind is ModalityKind.STATIC:
            labels = [lab.lower() for lab in spec.labels]
            k = next((i for i, lab in enumerate(labels) if "land" in lab), spec.channels - 1)
            return sample[n].values[k, 0] > 0.5
    raise ValueError("sensitivity needs a STATIC modality carrying the land-sea mask")


def _abs_err_sums(pred, sample, targets, land):
    out = {}
    for t in targets:
        o = sample[t]
        err = np.abs(pred[t].values.astype(np.float64) - o.values)
        for surface, sel in (("land", land), ("ocean", ~land)):
            m = o.valid & sel[None, None]
            out[(t, surface)] = np.array([err[m].sum(), m.sum()])
    return out


def sensitivity(samples, model, stats, mode: str, targets=None) -> SensitivityReport:
    """Relative MAE of each target when one modality is dropped (``drop_one``)
    or kept alone (``keep_one``), split over land and ocean.

    Errors are measured in normalized units so targets with different
    physical scales are comparable.
    """
    from .infer import InferenceError, gap_fill

    if mode not in ("drop_one", "keep_one"):
        raise ValueError("mode must be drop_one or keep_one")
    samples = list(samples)
    names = [n for n in samples[0].names if n in model.specs]
    targets = list(targets or [n for n in names if model.specs[n].temporal])
    pert = defaultdict(lambda: np.zeros(2))
    base = defaultdict(lambda: np.zeros(2))
    feasible = defaultdict(int)

    def nerr(pred, s, land):
        scaled_pred = {t: _scaled(pred[t], stats[t]) for t in targets}
        scaled_obs = type(s)({t: _scaled(s[t], stats[t]) for t in targets}, s.origin)
        return _abs_err_sums(scaled_pred, scaled_obs, targets, land)

    for s in samples:
        land = land_mask_of(s, model)
        baseline = nerr(gap_fill(s, model, stats, names, outputs=targets), s, land)
        for m in names:
            visible = [n for n in names if n != m] if mode == "drop_one" else [m]
            try:
                pred = gap_fill(s, model, stats, visible, outputs=targets)
            except InferenceError:
                continue
            feasible[m] += 1
            for key, v in nerr(pred, s, land).items():
                pert[(m,) + key] += v
                base[(m,) + key] += baseline[key]
    if mode == "keep_one":
        empty = [m for m in names if feasible[m] == 0]
        if empty:
            raise ValueError(f"keep_one: modalities {empty} have no valid tokens in any evaluation window (empty visible set)")
    rows = []
    for (m, t, surface), (se, n) in sorted(pert.items()):
        if n == 0:
            continue
        bse, bn = base[(m, t, surface)]
        mae, bmae = se / n, bse / bn
        flagged = bmae == 0
        rel = float("nan") if flagged else mae / bmae
        rows.append(SensitivityRow(mode, m, t, surface, mae, bmae, rel, flagged))
    return SensitivityReport(rows)


def _scaled(cube, st: NormalizationStats):
    vals = (cube.values - st.mean[:, None, None, None]) / st.std[:, None, None, None]
    return ObservationCube(cube.modality, cube.times, vals.astype(np.float32), cube.valid)


# --------------------------------------------------------------------------
# humidity


def saturation_vapor_pressure(T):
    """Magnus form over water, hPa; ``T`` in K."""
    t = np.asarray(T, dtype=float) - 273.15
    return 6.112 * np.exp(17.62 * t / (243.12 + t))


def relative_humidity(q, T, p):
    """RH (%) from specific humidity ``q`` (g/kg), temperature (K), pressure (hPa)."""
    q = np.asarray(q, dtype=float)
    T = np.asarray(T, dtype=float)
    p = np.asarray(p, dtype=float)
    if np.any(q < 0):
        raise ValueError("specific humidity must be >= 0")
    if np.any((T < 150) | (T > 350)):
        raise ValueError("temperature outside 150-350 K")
    if np.any(p <= 0):
        raise ValueError("pressure must be > 0")
    qk = q / 1000.0
    e = qk * p / (EPSILON + (1 - EPSILON) * qk)
    return np.clip(100.0 * e / saturation_vapor_pressure(T), 0.0, 150.0)


# --------------------------------------------------------------------------
# radiosonde matchups


@dataclass(frozen=True)
class SoundingMatch:
    station: str
    time: np.datetime64
    levels: tuple[float, ...]
    obs_t: tuple[float, ...]
    obs_rh: tuple[float, ...]
    model_t: tuple[float, ...]
    model_rh: tuple[float, ...]
    cell: tuple[int, int] = (0, 0)
    hour_offset: int = 0

    def __post_init__(self):
        lv = np.asarray(self.levels)
        if len(lv) > 1 and not (np.all(np.diff(lv) > 0) or np.all(np.diff(lv) < 0)):
            raise ValueError(f"{self.station}: levels must be strictly monotone")
        n = len(lv)
        for name in ("obs_t", "obs_rh", "model_t", "model_rh"):
            vals = np.asarray(getattr(self, name), dtype=float)
            if name.endswith("rh") and len(vals) == 0:
                continue  # humidity not matched
            if len(vals) != n:
                raise ValueError(f"{self.station}: {name} has {len(vals)} values for {n} levels")
            if not np.all(np.isfinite(vals)):
                raise ValueError(f"{self.station}: non-finite {name}")


def match_soundings(
    soundings,
    temperature: ObservationCube,
    humidity: ObservationCube | None,
    pressures: Sequence[float],
    grid: GridSpec,
    tolerance_h: int = 1,
) -> list[SoundingMatch]:
    """Nearest cell, nearest hour within tolerance, log-p interpolation.

    ``temperature``/``humidity`` are (L, T, H, W) profile cubes on ``pressures``
    (increasing).  Station levels outside the model column, or model cells that
    are invalid, are dropped.  With ``humidity=None`` only temperature is
    matched and the RH fields stay empty.
    """
    p = np.asarray(pressures, dtype=float)
    out = []
    times = temperature.times
    for snd in soundings:
        i = int(grid.lat_index(snd.lat))
        j = int(grid.lon_index(snd.lon))
        dt = (times - np.datetime64(snd.time, "h")) / np.timedelta64(1, "h")
        k = int(np.argmin(np.abs(dt)))
        if abs(dt[k]) > tolerance_h:
            continue
        col_ok = temperature.valid[:, k, i, j].copy()
        if humidity is not None:
            col_ok &= humidity.valid[:, k, i, j]
        if col_ok.sum() < 2:
            continue
        pp = np.ascontiguousarray(p[col_ok])
        lv = np.asarray(snd.levels, dtype=float)
        tp = temperature.values[col_ok, k, i, j].astype(np.float64)[None]
        mt = _accel.interp_logp(pp, np.ascontiguousarray(tp), lv)[0]
        keep = np.isfinite(mt) & np.isfinite(snd.temperature)
        if humidity is not None:
            qp = humidity.values[col_ok, k, i, j].astype(np.float64)[None]
            mq = _accel.interp_logp(pp, np.ascontiguousarray(qp), lv)[0]
            keep &= np.isfinite(mq) & np.isfinite(snd.rh)
        if not keep.any():
            continue
        if humidity is not None:
            mrh = relative_humidity(np.maximum(mq[keep], 0.0), np.clip(mt[keep], 150, 350), lv[keep])
            obs_rh = tuple(np.asarray(snd.rh)[keep].tolist())
        else:
            mrh, obs_rh = np.empty(0), ()
        out.append(
            SoundingMatch(
                station=snd.station,
                time=np.datetime64(snd.time, "h"),
                levels=tuple(lv[keep].tolist()),
                obs_t=tuple(np.asarray(snd.temperature)[keep].tolist()),
                obs_rh=obs_rh,
                model_t=tuple(mt[keep].tolist()),
                model_rh=tuple(mrh.tolist()),
                cell=(i, j),
                hour_offset=int(dt[k]),
            )
        )
    return out


@dataclass
class LevelStats:
    level: float | str
    n: int
    bias: float
    mae: float
    r: float


def _pairs(matches, variable):
    obs_key, mod_key = {"temperature": ("obs_t", "model_t"), "rh": ("obs_rh", "model_rh")}[variable]
    for m in matches:
        for lev, o, x in zip(m.levels, getattr(m, obs_key), getattr(m, mod_key)):
            yield (m.station, str(m.time), float(lev)), o, x


def sounding_stats(matches, levels: Sequence[float] = STANDARD_LEVELS, variable: str = "temperature") -> list[LevelStats]:
    """Per-level bias, MAE, Pearson R; last row averages the level rows."""
    pooled = defaultdict(list)
    for (_, _, lev), o, x in _pairs(matches, variable):
        pooled[lev].append((o, x))
    rows = []
    for lev in levels:
        pairs = pooled.get(float(lev), [])
        if len(pairs) < 2:
            continue
        o, x = np.array(pairs).T
        d = x - o
        r = float(np.corrcoef(o, x)[0, 1]) if o.std() > 0 and x.std() > 0 else float("nan")
        rows.append(LevelStats(float(lev), len(pairs), float(d.mean()), float(np.abs(d).mean()), r))
    if rows:
        rows.append(
            LevelStats(
                "Average",
                sum(r.n for r in rows),
                float(np.mean([r.bias for r in rows])),
                float(np.mean([r.mae for r in rows])),
                float(np.nanmean([r.r for r in rows])) if any(np.isfinite(r.r) for r in rows) else float("nan"),
            )
        )
    return rows


def matched_errors(matches, variable="temperature") -> dict[tuple, float]:
    """(station, time, level) -> model minus observation."""
    return {key: x - o for key, o, x in _pairs(matches, variable)}


@dataclass
class SignificanceResult:
    level: float
    n: int
    statistic: float
    p_value: float

    @property
    def significant(self) -> bool:
        return self.p_value <= 0.05

    @property
    def equivalent(self) -> bool:
        """No significant difference at 5%; the starred rows of the radiosonde table."""
        return not self.significant


def significance(errors_a: Mapping[tuple, float], errors_b: Mapping[tuple, float], min_pairs: int = 8, strict: bool = True) -> dict[float, SignificanceResult]:
    """Two-sided Wilcoxon signed-rank test on |a| - |b| per pressure level.

    Errors are keyed by (station, time, level); only keys present in both
    are paired.  Levels with fewer than ``min_pairs`` pairs raise (or are
    skipped when ``strict`` is False).
    """
    by_level = defaultdict(list)
    for key in sorted(set(errors_a) & set(errors_b)):
        by_level[key[-1]].append(abs(errors_a[key]) - abs(errors_b[key]))
    out = {}
    for lev, diffs in sorted(by_level.items()):
        d = np.asarray(diffs, dtype=float)
        if len(d) < min_pairs:
            if strict:
                raise ValueError(f"level {lev}: {len(d)} pairs, need {min_pairs}")
            continue
        if np.all(d == 0):
            out[lev] = SignificanceResult(lev, len(d), 0.0, 1.0)
            continue
        res = sps.wilcoxon(d, alternative="two-sided")
        out[lev] = SignificanceResult(lev, len(d), float(res.statistic), float(res.pvalue))
    if strict and not out:
        raise ValueError("no paired errors")
    return out


def radiosonde_table(sources: Mapping[str, Sequence[SoundingMatch]], levels=STANDARD_LEVELS, reference=None, comparator=None):
    """Rows mirroring the radiosonde table: per level, T and RH MAE for each
    source, plus a star when ``reference`` is not significantly different
    from ``comparator``."""
    stats_t = {s: {r.level: r for r in sounding_stats(m, levels, "temperature")} for s, m in sources.items()}
    stats_rh = {s: {r.level: r for r in sounding_stats(m, levels, "rh")} for s, m in sources.items()}
    sig_t, sig_rh = {}, {}
    if reference and comparator:
        sig_t = significance(matched_errors(sources[reference]), matched_errors(sources[comparator]), strict=False)
        sig_rh = significance(matched_errors(sources[reference], "rh"), matched_errors(sources[comparator], "rh"), strict=False)
    names = list(sources)
    header = ["pressure_hpa"] + [f"t_mae_{s}" for s in names] + [f"rh_mae_{s}" for s in names]
    rows = [header]
    for lev in list(levels) + ["Average"]:
        key = float(lev) if lev != "Average" else "Average"
        row = [lev if lev == "Average" else f"{float(lev):g}"]
        for table, sig in ((stats_t, sig_t), (stats_rh, sig_rh)):
            for s in names:
                r = table[s].get(key)
                cell = _fmt(r.mae, 2) if r else ""
                if r and s == reference and key in sig and sig[key].equivalent:
                    cell += "*"
                row.append(cell)
        rows.append(row)
    return rows


# --------------------------------------------------------------------------
# hourly profile


def hourly_error_profile(mosaics: Sequence[ObservationCube], reference: Sequence[ObservationCube], block_length: int = 12) -> np.ndarray:
    """MAE per hour offset within the block, pooled over blocks, channels, cells."""
    if len(mosaics) != len(reference):
        raise ValueError("need one reference cube per mosaic block")
    se = np.zeros(block_length)
    n = np.zeros(block_length)
    for m, r in zip(mosaics, reference):
        if m.values.shape[1] != block_length or m.values.shape != r.values.shape:
            raise ValueError(f"block shape {m.values.shape} vs reference {r.values.shape}, block length {block_length}")
        if m.times[0].astype(object).hour % block_length or np.any(m.times != r.times):
            raise ValueError(f"misaligned block starting {m.times[0]}")
        valid = r.valid & m.valid
        err = np.abs(m.values.astype(np.float64) - r.values)
        for h in range(block_length):
            sel = valid[:, h]
            se[h] += err[:, h][sel].sum()
            n[h] += sel.sum()
    if np.any(n == 0):
        raise ValueError("hour offsets without reference cells")
    return se / n


def write_csv(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in rows:
            w.writerow(row)
