"""Staged training: tokenizer pretraining, level-1 sensors, profile fine-tuning."""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .core import ModalityKind, ModalitySpec, NormalizationStats, normalize
from .datastore import DatasetManifest, sample_windows
from .model import (
    ModelConfig,
    MultiModalMAE,
    collate,
    masked_mse_loss,
    sample_mask_plan,
    tokenize_sample,
    vae_pretrain,
)

log = logging.getLogger(__name__)

STAGES = ("tokenizer_pretrain", "level1", "profile_finetune")
PREREQUISITE = {"level1": "tokenizer_pretrain", "profile_finetune": "level1"}


class TrainingError(Exception):
    pass


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class TrainStage:
    id: str
    modalities: tuple[str, ...]
    steps: int
    batch_size: int = 8
    lr: float = 1e-4
    betas: tuple[float, float] = (0.5, 0.9)
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0
    min_valid_fraction: float = 0.05
    max_resample: int = 20
    hour_range: tuple[int, int] | None = None

    def __post_init__(self):
        if self.id not in STAGES:
            raise ValueError(f"unknown stage {self.id!r}; expected one of {STAGES}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        object.__setattr__(self, "modalities", tuple(self.modalities))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.hour_range is not None:
            object.__setattr__(self, "hour_range", tuple(int(h) for h in self.hour_range))

    def check(self, specs: Sequence[ModalitySpec]) -> None:
        kinds = {m.name: m.kind for m in specs}
        unknown = set(self.modalities) - set(kinds)
        if unknown:
            raise ValueError(f"stage {self.id}: unknown modalities {sorted(unknown)}")
        if self.id == "level1" and any(kinds[n] is ModalityKind.PROFILE for n in self.modalities):
            raise ValueError("level1 stage must not include PROFILE modalities")
        if self.id == "profile_finetune" and set(self.modalities) != set(kinds):
            raise ValueError("profile_finetune stage must include every modality")

    @classmethod
    def default(cls, stage_id: str, specs: Sequence[ModalitySpec], **kw) -> "TrainStage":
        if stage_id == "level1":
            mods = [m.name for m in specs if m.kind is not ModalityKind.PROFILE]
        else:
            mods = [m.name for m in specs]
        return cls(id=stage_id, modalities=tuple(mods), **kw)


def make_optimizer(params, stage: TrainStage) -> torch.optim.Optimizer:
    return torch.optim.Adam(params, lr=stage.lr, betas=stage.betas, eps=stage.eps)


def build_model(config: ModelConfig, modalities: Sequence[ModalitySpec], seed: int = 0) -> MultiModalMAE:
    torch.manual_seed(seed)
    model = MultiModalMAE(config, modalities)
    model.stages_done = []
    return model


# --------------------------------------------------------------------------
# data feed


def normalized_tokens(sample, stats: Mapping[str, NormalizationStats], patch: int, names):
    sub = sample.subset(names)
    cubes = {n: normalize(sub[n], stats[n]) for n in names}
    return tokenize_sample(type(sub)(cubes, sub.origin), patch, names)


def window_batches(manifest: DatasetManifest, stats, names, batch_size, rng, min_valid_fraction, patch, hour_range=None):
    """Endless stream of lists of normalized TokenSet dicts (with origins)."""
    while True:
        samples = sample_windows(manifest, batch_size, rng, min_valid_fraction, names=names, hour_range=hour_range)
        yield [normalized_tokens(s, stats, patch, names) for s in samples], [s.origin for s in samples]


# --------------------------------------------------------------------------
# checkpoints


def _blob_name(param_name: str) -> str:
    return param_name.replace("/", "_") + ".f32"


def save_checkpoint(model: MultiModalMAE, path, extra: Mapping | None = None) -> Path:
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    index = {}
    for name, tensor in sorted(model.state_dict().items()):
        arr = tensor.detach().cpu().numpy().astype("<f4")
        rel = f"params/{_blob_name(name)}"
        arr.tofile(path / rel)
        index[name] = {"shape": list(arr.shape), "file": rel, "bytes": arr.nbytes}
    (path / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    meta = {
        "model": model.config.to_dict(),
        "modalities": [m.to_dict() for m in model.specs.values()],
        "stages_done": list(getattr(model, "stages_done", [])),
    }
    if extra:
        meta.update(extra)
    (path / "config.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(path, config: ModelConfig | None = None, modalities=None) -> MultiModalMAE:
    """Rebuild the model and load every blob, validating shapes and sizes.

    Passing ``config``/``modalities`` overrides the stored ones (used to check
    a checkpoint against an expected architecture).
    """
    path = Path(path)
    if not (path / "index.json").exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    meta = json.loads((path / "config.json").read_text())
    index = json.loads((path / "index.json").read_text())
    config = config or ModelConfig.from_dict(meta["model"])
    if modalities is None:
        modalities = [ModalitySpec.from_dict(m) for m in meta["modalities"]]
    model = MultiModalMAE(config, modalities)
    state = model.state_dict()
    loaded = {}
    for name, ref in index.items():
        blob = path / ref["file"]
        if not blob.exists():
            raise CheckpointError(f"missing parameter blob {blob}")
        n = blob.stat().st_size
        if n != ref["bytes"] or n != 4 * int(np.prod(ref["shape"], dtype=np.int64)):
            raise CheckpointError(f"blob {ref['file']} has {n} bytes, expected {ref['bytes']}")
        if name not in state:
            raise CheckpointError(f"parameter {name!r} not in model built from config")
        if tuple(state[name].shape) != tuple(ref["shape"]):
            raise CheckpointError(
                f"parameter {name!r}: checkpoint shape {tuple(ref['shape'])}, config expects {tuple(state[name].shape)}"
            )
        arr = np.fromfile(blob, dtype="<f4").reshape(ref["shape"])
        loaded[name] = torch.from_numpy(arr.copy())
    missing = set(state) - set(loaded)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    model.load_state_dict(loaded)
    model.stages_done = list(meta.get("stages_done", []))
    return model


# --------------------------------------------------------------------------
# the loop


class MetricsLog:
    def __init__(self, path=None):
        self.rows: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")
        self.t0 = time.perf_counter()

    def write(self, row: dict):
        row = dict(row, wall_time=round(time.perf_counter() - self.t0, 4))
        self.rows.append(row)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(row) + "\n")


def run_stage(
    stage: TrainStage,
    manifest: DatasetManifest,
    model: MultiModalMAE,
    stats: Mapping[str, NormalizationStats],
    out_dir=None,
    metrics_path=None,
):
    """Run one training stage in place on ``model``; returns (model, metrics rows)."""
    stage.check(manifest.modalities)
    done = list(getattr(model, "stages_done", []))
    need = PREREQUISITE.get(stage.id)
    if need and need not in done:
        raise TrainingError(f"stage {stage.id} needs a checkpoint that completed {need}; got stages {done}")
    cfg = model.config
    names = list(stage.modalities)
    rng = np.random.default_rng(stage.seed)
    torch.manual_seed(stage.seed)
    feed = window_batches(manifest, stats, names, stage.batch_size, rng, stage.min_valid_fraction, cfg.patch_side, stage.hour_range)
    metrics = MetricsLog(metrics_path)

    if stage.id == "tokenizer_pretrain":
        for k, name in enumerate(names):
            batches = ([ts[name] for ts in b] for b, _ in feed)
            vae_pretrain(
                model,
                name,
                batches,
                stage.steps,
                lr=stage.lr,
                betas=stage.betas,
                eps=stage.eps,
                seed=stage.seed + k,
                on_step=lambda row, name=name: metrics.write(dict(row, modality=name)),
            )
    else:
        opt = make_optimizer(model.parameters(), stage)
        model.train()
        for step in range(1, stage.steps + 1):
            for _ in range(stage.max_resample):
                tokensets, origins = next(feed)
                plans = [sample_mask_plan(ts, cfg.mask_budget, cfg.dirichlet_alpha, rng) for ts in tokensets]
                batch = collate(tokensets, plans, names, origins=origins)
                pred = model(batch, inputs=names, outputs=names)
                try:
                    loss, terms = masked_mse_loss(pred, batch, names, return_terms=True)
                    break
                except ValueError:
                    continue
            else:
                raise TrainingError(f"no scorable batch after {stage.max_resample} resamples at step {step}")
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step}; window origins (t, lat, lon): {origins}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            metrics.write(
                {
                    "step": step,
                    "loss": float(loss.detach()),
                    "terms": {n: float(se) / c for n, (se, c) in terms.items()},
                }
            )
            if out_dir and stage.checkpoint_every and step % stage.checkpoint_every == 0 and step < stage.steps:
                save_checkpoint(model, Path(out_dir) / f"step{step:06d}")
        model.eval()
    model.stages_done = done + [stage.id]
    if out_dir:
        save_checkpoint(model, out_dir)
    return model, metrics.rows


@torch.no_grad()
def validation_mse(
    manifest: DatasetManifest,
    model: MultiModalMAE,
    stats: Mapping[str, NormalizationStats],
    n_windows: int = 32,
    seed: int = 1234,
    hour_range=None,
    names=None,
    batch_size: int = 8,
    min_valid_fraction: float = 0.05,
) -> dict:
    """Masked-token MSE of the model and of the climatology predictor.

    Climatology predicts the per-channel training mean, i.e. zero in
    normalized units.  Both are scored on the same held-out masked tokens.
    """
    cfg = model.config
    names = list(names or manifest.names)
    rng = np.random.default_rng(seed)
    samples = sample_windows(manifest, n_windows, rng, min_valid_fraction, names=names, hour_range=hour_range)
    model.eval()
    se_m = se_c = 0.0
    count = 0
    per_mod = {n: [0.0, 0.0, 0] for n in names}
    for k in range(0, len(samples), batch_size):
        chunk = samples[k : k + batch_size]
        tokensets = [normalized_tokens(s, stats, cfg.patch_side, names) for s in chunk]
        plans = [sample_mask_plan(ts, cfg.mask_budget, cfg.dirichlet_alpha, rng) for ts in tokensets]
        batch = collate(tokensets, plans, names, dtype=next(model.parameters()).dtype)
        pred = model(batch, inputs=names, outputs=names)
        zeros = {n: torch.zeros_like(p) for n, p in pred.items()}
        try:
            _, tm = masked_mse_loss(pred, batch, names, return_terms=True)
            _, tc = masked_mse_loss(zeros, batch, names, return_terms=True)
        except ValueError:
            continue
        for n, (se, c) in tm.items():
            per_mod[n][0] += float(se)
            per_mod[n][1] += float(tc[n][0])
            per_mod[n][2] += c
            se_m += float(se)
            se_c += float(tc[n][0])
            count += c
    if count == 0:
        raise TrainingError("validation windows hold no masked valid cells")
    return {
        "model_mse": se_m / count,
        "climatology_mse": se_c / count,
        "cells": count,
        "per_modality": {n: {"model_mse": a / c, "climatology_mse": b / c} for n, (a, b, c) in per_mod.items() if c},
    }
