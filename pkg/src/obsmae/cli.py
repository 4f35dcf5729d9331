"""Command-line entry point: ``obsmae <subcommand> ...``.

Every subcommand writes ``run_manifest.json`` next to its outputs with the
config hash, seeds, git revision and input/output paths.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__, _accel

log = logging.getLogger("obsmae")


class PreconditionError(Exception):
    """A required input is missing or inconsistent."""


# --------------------------------------------------------------------------
# config and manifests


def _load_doc(args) -> dict:
    doc = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise PreconditionError(f"config not found: {path}")
        doc = yaml.safe_load(path.read_text()) or {}
    elif getattr(args, "data", None):
        found = _run_config_path(args.data)
        if found:
            doc = yaml.safe_load(found.read_text()) or {}
    from .core import set_dotted

    for item in getattr(args, "set", None) or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise PreconditionError(f"--set expects key=value, got {item!r}")
        set_dotted(doc, key, yaml.safe_load(val))
    for key, val in getattr(args, "_flag_overrides", {}).items():
        if val is not None:
            set_dotted(doc, key, val)
    return doc


def _config(args):
    from .core import parse_config

    doc = _load_doc(args)
    return parse_config(doc), doc


def _run_config_path(data):
    """The config stored by ``synth`` next to a dataset, if any."""
    p = Path(data)
    for cand in (p.parent.parent / "config.yaml", p.parent / "config.yaml"):
        if cand.exists():
            return cand
    return None


def _config_from_run(path):
    from .core import parse_config

    found = _run_config_path(path)
    return parse_config(yaml.safe_load(found.read_text())) if found else None


def _git_rev() -> str | None:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5
        )
        return out.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


def _hash_doc(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()


def write_run_manifest(out_dir, command, argv, doc, seeds, inputs, outputs) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    man = {
        "command": command,
        "argv": list(argv),
        "config": doc,
        "config_sha256": _hash_doc(doc),
        "seeds": seeds,
        "git_revision": _git_rev(),
        "package_version": __version__,
        "kernel_backend": _accel.backend(),
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(man, indent=1, sort_keys=True, default=str) + "\n")
    return path


def _require(path, what) -> Path:
    p = Path(path) if path else None
    if p is None or not p.exists():
        raise PreconditionError(f"missing {what}: {path}")
    return p


def _open(path):
    from .datastore import open_dataset

    return open_dataset(_require(path, "dataset manifest"))


def _stats(path, manifest=None):
    from .core import load_stats

    stats = load_stats(_require(path, "normalization stats"))
    if manifest is not None:
        missing = set(manifest.names) - set(stats)
        if missing:
            raise PreconditionError(f"stats file {path} lacks modalities {sorted(missing)}")
    return stats


def _ckpt(path):
    from .train import load_checkpoint

    return load_checkpoint(_require(Path(path) / "index.json" if path else None, "checkpoint").parent)


def _hour_range(values, fallback):
    v = values if values is not None else fallback
    return tuple(int(x) for x in v) if v is not None else None


def _eval_samples(manifest, cfg, args, names=None):
    from .datastore import sample_windows

    n = args.windows or int(cfg.verify.get("eval_windows", 16))
    hr = _hour_range(args.hour_range, cfg.verify.get("hour_range"))
    return sample_windows(manifest, n, np.random.default_rng(args.seed), 0.05, names=names, hour_range=hr)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args, argv):
    from .synthgen import synthesize

    cfg, doc = _config(args)
    days = args.days if args.days is not None else float(doc.get("days", 1))
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    out = Path(args.out)
    paths = synthesize(cfg, out, days, seed, chunk_hours=args.chunk_hours)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(doc, sort_keys=True))
    write_run_manifest(out, "synth", argv, doc, {"seed": seed}, {"config": args.config}, paths)
    print(f"wrote {paths['data']}")


def cmd_stats(args, argv):
    from .core import compute_norm_stats, save_stats

    man = _open(args.data)
    cfg = _config(args)[0] if args.config else _config_from_run(args.data)
    hr = _hour_range(args.hour_range, cfg.train.get("hour_range") if cfg else None)
    stats = [compute_norm_stats(man, n, man.spec(n).labels, hour_range=hr) for n in man.names]
    out = Path(args.out)
    save_stats(stats, out)
    doc = {"hour_range": list(hr) if hr else None}
    write_run_manifest(out.parent, "stats", argv, doc, {}, {"data": args.data}, {"stats": out})
    print(f"wrote {out}")


def _train_common(args, argv, stage_id, steps_key):
    from .model import ModelConfig
    from .train import TrainStage, build_model, load_checkpoint, run_stage

    cfg, doc = _config(args)
    man = _open(args.data)
    stats = _stats(args.stats, man)
    tr = dict(cfg.train)
    if args.ckpt_in:
        model = load_checkpoint(_require(Path(args.ckpt_in) / "index.json", "input checkpoint").parent)
    elif stage_id == "tokenizer_pretrain":
        mc = ModelConfig.from_dict(cfg.model or {"preset": "tiny"})
        model = build_model(mc, man.modalities, seed=args.seed)
    else:
        raise PreconditionError(f"stage {stage_id} needs --ckpt-in")
    steps = args.steps or int(tr.get(steps_key, 100))
    stage = TrainStage.default(
        stage_id,
        man.modalities,
        steps=steps,
        batch_size=int(tr.get("batch_size", 8)),
        lr=float(tr.get("lr", 1e-4)),
        betas=tuple(tr.get("betas", (0.5, 0.9))),
        eps=float(tr.get("eps", 1e-8)),
        seed=args.seed,
        checkpoint_every=int(tr.get("checkpoint_every", 0)),
        min_valid_fraction=float(tr.get("min_valid_fraction", 0.05)),
        hour_range=_hour_range(None, tr.get("hour_range")),
    )
    out = Path(args.ckpt_out)
    run_stage(stage, man, model, stats, out_dir=out, metrics_path=out / "metrics.jsonl")
    write_run_manifest(
        out,
        stage_id,
        argv,
        doc,
        {"seed": args.seed},
        {"data": args.data, "stats": args.stats, "ckpt_in": args.ckpt_in},
        {"checkpoint": out},
    )
    print(f"wrote {out}")


def cmd_pretrain(args, argv):
    _train_common(args, argv, "tokenizer_pretrain", "tokenizer_steps")


def cmd_train(args, argv):
    key = {"tokenizer_pretrain": "tokenizer_steps", "level1": "level1_steps", "profile_finetune": "profile_steps"}[args.stage]
    _train_common(args, argv, args.stage, key)


def _window_grid(grid, origin):
    from .core import GridSpec

    _, lat0, lon0 = origin
    return GridSpec(
        resolution_deg=grid.resolution_deg,
        n_lat=grid.window,
        n_lon=grid.window,
        window=grid.window,
        patch=grid.patch,
        lat_origin=float(grid.lat_of(lat0)),
        lon_origin=float(grid.lon_of(lon0)),
    )


def cmd_infer(args, argv):
    from .datastore import DatasetWriter
    from .infer import background_forecast, gap_fill, mosaic_timeblock

    cfg, doc = _config(args)
    model = _ckpt(args.ckpt)
    man = _open(args.data)
    stats = _stats(args.stats, man)
    visible = args.visible.split(",") if args.visible else None
    out = Path(args.out)
    specs = [model.specs[n] for n in man.names if n in model.specs]
    outputs = {}
    if args.mode == "mosaic":
        t0 = args.t0 if args.t0 is not None else 0
        blocks = args.blocks or 1
        with DatasetWriter(out / "mosaic", man.grid, specs, man.start, chunk_hours=model.config.hours) as w:
            for k in range(blocks):
                for cube in mosaic_timeblock(man, model, stats, t0 + k * model.config.hours, args.stride, visible).values():
                    w.add(cube)
        outputs["mosaic"] = out / "mosaic" / "manifest.json"
    else:
        for k, s in enumerate(_eval_samples(man, cfg, args)):
            if args.mode == "gapfill":
                pred = gap_fill(s, model, stats, visible)
            else:
                pred, _ = background_forecast(s, model, stats, args.horizon, visible)
            start = min(c.times[0] for c in pred.values())
            temporal = [sp for sp in specs if sp.name in pred and sp.temporal] or specs
            root = out / f"window_{k:04d}"
            with DatasetWriter(root, _window_grid(man.grid, s.origin), [sp for sp in specs if sp.name in pred], start) as w:
                for c in pred.values():
                    w.add(c)
            del temporal
            outputs[f"window_{k:04d}"] = root / "manifest.json"
    write_run_manifest(
        out,
        f"infer:{args.mode}",
        argv,
        doc,
        {"seed": args.seed},
        {"ckpt": args.ckpt, "data": args.data, "stats": args.stats},
        outputs,
    )
    print(f"wrote {len(outputs)} output dataset(s) under {out}")


def cmd_background(args, argv):
    from .verify import evaluate_departures

    cfg, doc = _config(args)
    model = _ckpt(args.ckpt)
    man = _open(args.data)
    stats = _stats(args.stats, man)
    samples = _eval_samples(man, cfg, args)
    labels = {n: list(man.spec(n).labels) for n in man.names}
    rep = evaluate_departures(samples, model, stats, labels)
    out = Path(args.out)
    rep.to_csv(out / "departures.csv")
    summary = {"rows": len(rep.rows), "warnings": rep.warnings}
    (out / "departures.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    write_run_manifest(out, "background", argv, doc, {"seed": args.seed}, {"ckpt": args.ckpt, "data": args.data}, {"csv": out / "departures.csv"})
    print(f"wrote {out / 'departures.csv'}")


def cmd_sensitivity(args, argv):
    from .verify import sensitivity

    cfg, doc = _config(args)
    model = _ckpt(args.ckpt)
    man = _open(args.data)
    stats = _stats(args.stats, man)
    rep = sensitivity(_eval_samples(man, cfg, args), model, stats, args.mode)
    out = Path(args.out)
    path = out / f"sensitivity_{args.mode}.csv"
    rep.to_csv(path)
    write_run_manifest(out, "sensitivity", argv, doc, {"seed": args.seed}, {"ckpt": args.ckpt, "data": args.data}, {"csv": path})
    print(f"wrote {path}")


def cmd_verify(args, argv):
    from .core import ModalityKind
    from .datastore import read_region
    from .infer import mosaic_timeblock
    from .synthgen import load_soundings
    from .verify import hourly_error_profile, match_soundings, radiosonde_table, sounding_stats, write_csv

    model = _ckpt(args.ckpt)
    cfg, doc = _config(args)
    man = _open(args.data)
    stats = _stats(args.stats, man)
    soundings = load_soundings(_require(args.soundings, "soundings file"))
    tname = cfg.verify.get("temperature") or next(n for n, s in model.specs.items() if s.kind is ModalityKind.PROFILE)
    hname = cfg.verify.get("humidity")
    block = model.config.hours
    hr = _hour_range(args.hour_range, cfg.verify.get("hour_range")) or (0, man.n_hours)
    starts = list(range(-(-hr[0] // block) * block, hr[1] - block + 1, block))
    if args.blocks:
        starts = starts[: args.blocks]
    if not starts:
        raise PreconditionError(f"hour range {hr} holds no complete {block}-hour block")
    outputs = [n for n in (tname, hname) if n]
    mosaics = [mosaic_timeblock(man, model, stats, t0, args.stride, outputs=outputs) for t0 in starts]
    pressures = man.spec(tname).levels

    def cat(cubes):
        from .core import ObservationCube

        return ObservationCube(
            cubes[0].modality,
            np.concatenate([c.times for c in cubes]),
            np.concatenate([c.values for c in cubes], axis=1),
            np.concatenate([c.valid for c in cubes], axis=1),
        )

    t_model = cat([m[tname] for m in mosaics])
    h_model = cat([m[hname] for m in mosaics]) if hname else None
    obs = [read_region(man, t0, block, 0, man.grid.n_lat, 0, man.grid.n_lon, [n for n in outputs]) for t0 in starts]
    t_obs = cat([o[tname] for o in obs])
    h_obs = cat([o[hname] for o in obs]) if hname else None
    sources = {
        "model": match_soundings(soundings, t_model, h_model, pressures, man.grid),
        "observed": match_soundings(soundings, t_obs, h_obs, pressures, man.grid),
    }
    out = Path(args.out)
    write_csv(out / "radiosonde_table.csv", radiosonde_table(sources, reference="model", comparator="observed"))
    summary = {"blocks": starts, "matches": {k: len(v) for k, v in sources.items()}}
    for src, matches in sources.items():
        for var in ("temperature", "rh"):
            rows = sounding_stats(matches, variable=var)
            if rows:
                write_csv(
                    out / f"sounding_{var}_{src}.csv",
                    [["pressure_hpa", "n", "bias", "mae", "r"]]
                    + [[r.level if isinstance(r.level, str) else f"{r.level:g}", r.n, f"{r.bias:.4f}", f"{r.mae:.4f}", f"{r.r:.4f}"] for r in rows],
                )
                summary[f"{var}_{src}_average_mae"] = rows[-1].mae
    truth_path = Path(args.truth) if args.truth else Path(args.data).parent.parent / "truth" / "manifest.json"
    if truth_path.exists():
        from .core import ObservationCube
        from .datastore import open_dataset

        truth = open_dataset(truth_path)
        ref = [read_region(truth, t0, block, 0, man.grid.n_lat, 0, man.grid.n_lon, [tname])[tname] for t0 in starts]
        curve = hourly_error_profile([m[tname] for m in mosaics], ref, block)
        write_csv(out / "hourly_profile.csv", [["hour", "mae"]] + [[h, f"{v:.6f}"] for h, v in enumerate(curve)])
        summary["hourly_profile"] = [round(float(v), 6) for v in curve]
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    write_run_manifest(
        out,
        "verify",
        argv,
        doc,
        {},
        {"ckpt": args.ckpt, "data": args.data, "soundings": args.soundings, "truth": truth_path},
        {"dir": out},
    )
    print(f"wrote reports under {out}")


def cmd_report(args, argv):
    import csv

    src = _require(args.run, "run directory")
    out = Path(args.out or src)
    tables = {}
    for path in sorted(src.rglob("*.csv")):
        with path.open() as fh:
            rows = list(csv.reader(fh))
        tables[str(path.relative_to(src))] = {"columns": rows[0] if rows else [], "rows": len(rows) - 1}
    summary = {"tables": tables}
    figures = []
    if args.figures:
        figures = _render_figures(src, out)
        summary["figures"] = [str(f) for f in figures]
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    write_run_manifest(out, "report", argv, {}, {}, {"run": src}, {"report": out / "report.json"})
    print(f"wrote {out / 'report.json'}")


def _render_figures(src: Path, out: Path) -> list[Path]:
    import csv

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    made = []
    for path in sorted(src.rglob("hourly_profile.csv")):
        with path.open() as fh:
            rows = list(csv.DictReader(fh))
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot([int(r["hour"]) for r in rows], [float(r["mae"]) for r in rows], marker="o")
        ax.set_xlabel("hour in block")
        ax.set_ylabel("MAE")
        fig.tight_layout()
        target = out / "hourly_profile.png"
        out.mkdir(parents=True, exist_ok=True)
        fig.savefig(target, dpi=100)
        plt.close(fig)
        made.append(target)
    return made


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="obsmae", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(func=func)
        sp.add_argument("--workers", type=int, default=1, help="intra-op thread cap (default 1, deterministic)")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    def with_config(sp):
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key")

    def with_model_io(sp):
        sp.add_argument("--ckpt", required=True, help="checkpoint directory")
        sp.add_argument("--data", required=True, help="dataset manifest.json")
        sp.add_argument("--stats", required=True, help="normalization stats JSON")
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int, default=0, help="evaluation window seed")
        sp.add_argument("--windows", type=int, help="number of evaluation windows (verify.eval_windows)")
        sp.add_argument("--hour-range", type=int, nargs=2, metavar=("LO", "HI"), help="evaluation hours (verify.hour_range)")

    sp = add("synth", cmd_synth, "generate a synthetic multi-modal dataset")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--days", type=float, help="record length in days (config key: days)")
    sp.add_argument("--seed", type=int, help="generator seed (config key: seed)")
    sp.add_argument("--chunk-hours", type=int, default=24)

    sp = add("stats", cmd_stats, "per-channel normalization statistics over the training split")
    with_config(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--hour-range", type=int, nargs=2, metavar=("LO", "HI"), help="training hours (default train.hour_range, else all)")
    sp.add_argument("--out", required=True, help="output JSON path")

    for name, func, help_ in (
        ("pretrain-tokenizers", cmd_pretrain, "VAE pretraining of every modality tokenizer"),
        ("train", cmd_train, "run one training stage"),
    ):
        sp = add(name, func, help_)
        with_config(sp)
        if name == "train":
            sp.add_argument("--stage", required=True, choices=["tokenizer_pretrain", "level1", "profile_finetune"])
        sp.add_argument("--data", required=True)
        sp.add_argument("--stats", required=True)
        sp.add_argument("--ckpt-in")
        sp.add_argument("--ckpt-out", required=True)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--lr", type=float, dest="flag_train.lr", help="config key train.lr")
        sp.add_argument("--batch-size", type=int, dest="flag_train.batch_size", help="config key train.batch_size")

    sp = add("infer", cmd_infer, "gap filling, background forecast or global mosaic")
    with_config(sp)
    with_model_io(sp)
    sp.add_argument("--mode", required=True, choices=["gapfill", "background", "mosaic"])
    sp.add_argument("--visible", help="comma-separated visible modalities (default all)")
    sp.add_argument("--horizon", type=int, choices=[0, 1], default=1)
    sp.add_argument("--t0", type=int, help="mosaic start hour index")
    sp.add_argument("--blocks", type=int, help="number of 12-hour mosaic blocks")
    sp.add_argument("--stride", type=int, help="mosaic tile stride (default window/2)")

    sp = add("background", cmd_background, "analysis and 1-hour background departures")
    with_config(sp)
    with_model_io(sp)

    sp = add("sensitivity", cmd_sensitivity, "drop-one / keep-one sensor sensitivity")
    with_config(sp)
    with_model_io(sp)
    sp.add_argument("--mode", required=True, choices=["drop_one", "keep_one"])

    sp = add("verify", cmd_verify, "radiosonde matchups and hourly error profile")
    with_config(sp)
    with_model_io(sp)
    sp.add_argument("--soundings", required=True)
    sp.add_argument("--truth", help="noise-free truth manifest (default: sibling truth/ of --data)")
    sp.add_argument("--blocks", type=int)
    sp.add_argument("--stride", type=int)

    sp = add("report", cmd_report, "collect CSV reports into a JSON summary")
    sp.add_argument("--run", required=True, help="directory holding report CSVs")
    sp.add_argument("--out")
    sp.add_argument("--figures", action="store_true", help="render PNG figures")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args._flag_overrides = {k[5:]: v for k, v in vars(args).items() if k.startswith("flag_")}
    import torch

    torch.set_num_threads(max(1, args.workers))
    from .datastore import DatasetError
    from .infer import InferenceError
    from .train import CheckpointError, TrainingError

    try:
        args.func(args, argv)
    except (PreconditionError, DatasetError, CheckpointError, TrainingError, InferenceError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
