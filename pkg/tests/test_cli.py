import json
import subprocess
import sys

import pytest
import yaml

from obsmae.cli import main

CONFIG = {
    "start": "2024-02-01T00",
    "grid": {"resolution_deg": 1.0, "n_lat": 48, "n_lon": 96, "window": 48, "patch": 16, "lat_origin": -23.5},
    "latent": {"pressures": [10, 100, 250, 500, 850, 1000]},
    "modalities": [
        {"name": "geo", "kind": "GEO", "channels": 2, "coverage_target": 0.6, "render": {"noise_sigma": 0.1}},
        {"name": "sounder", "kind": "PROFILE", "channels": 2, "levels": [250, 850], "coverage_target": 0.3, "render": {"noise_sigma": 0.1}},
        {"name": "surface", "kind": "STATIC", "channels": 2, "temporal": False, "channel_labels": ["elevation", "land"]},
    ],
    "model": {"preset": "tiny", "backbone_blocks": 1, "decoder_blocks": 1},
    "train": {"batch_size": 2, "lr": 0.001, "tokenizer_steps": 2, "level1_steps": 2, "profile_steps": 2, "hour_range": [0, 24]},
    "verify": {"n_stations": 6, "eval_windows": 2, "hour_range": [12, 24], "temperature": "sounder"},
}


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "run.yaml"
    p.write_text(yaml.safe_dump(CONFIG))
    return p


def files(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_unknown_subcommand_exits_2():
    out = subprocess.run([sys.executable, "-m", "obsmae", "bogus"], capture_output=True, text=True)
    assert out.returncode == 2
    assert "usage" in out.stderr


def test_unknown_flag_exits_2(config_file):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--config", str(config_file), "--out", "x", "--no-such-flag"])
    assert exc.value.code == 2


def test_verify_without_checkpoint_names_path(tmp_path, capsys):
    missing = tmp_path / "no_ckpt"
    rc = main(["verify", "--ckpt", str(missing), "--data", "d", "--stats", "s", "--out", str(tmp_path), "--soundings", "x"])
    assert rc == 1
    assert str(missing) in capsys.readouterr().err


def test_synth_twice_byte_identical(tmp_path, config_file):
    for d in ("a", "b"):
        assert main(["synth", "--config", str(config_file), "--out", str(tmp_path / d), "--days", "1", "--seed", "7"]) == 0
    fa, fb = files(tmp_path / "a"), files(tmp_path / "b")
    fa.pop("run_manifest.json"), fb.pop("run_manifest.json")
    assert fa.keys() == fb.keys() and fa == fb
    man = json.loads((tmp_path / "a" / "run_manifest.json").read_text())
    assert man["seeds"] == {"seed": 7} and len(man["config_sha256"]) == 64


def test_set_override(tmp_path, config_file):
    assert main(["synth", "--config", str(config_file), "--out", str(tmp_path), "--days", "0.5", "--seed", "1", "--set", "verify.n_stations=2"]) == 0
    man = json.loads((tmp_path / "run_manifest.json").read_text())
    assert man["config"]["verify"]["n_stations"] == 2
    lines = (tmp_path / "soundings.jsonl").read_text().splitlines()
    assert len(lines) == 2  # 2 stations at 00 UTC


def test_full_pipeline(tmp_path, config_file):
    cfg, run = str(config_file), tmp_path
    data = str(run / "syn" / "data" / "manifest.json")
    stats = str(run / "stats.json")

    def ok(*argv):
        assert main([str(a) for a in argv]) == 0, argv

    ok("synth", "--config", cfg, "--out", run / "syn", "--days", 1, "--seed", 3)
    ok("stats", "--data", data, "--out", stats)
    ok("pretrain-tokenizers", "--config", cfg, "--data", data, "--stats", stats, "--ckpt-out", run / "c0")
    assert main(["train", "--stage", "profile_finetune", "--config", cfg, "--data", data, "--stats", stats, "--ckpt-in", str(run / "c0"), "--ckpt-out", str(run / "bad")]) == 1
    ok("train", "--stage", "level1", "--config", cfg, "--data", data, "--stats", stats, "--ckpt-in", run / "c0", "--ckpt-out", run / "c1", "--lr", 0.002)
    assert json.loads((run / "c1" / "run_manifest.json").read_text())["config"]["train"]["lr"] == 0.002
    ok("train", "--stage", "profile_finetune", "--config", cfg, "--data", data, "--stats", stats, "--ckpt-in", run / "c1", "--ckpt-out", run / "c2")
    ck = run / "c2"
    common = ["--config", cfg, "--ckpt", ck, "--data", data, "--stats", stats]
    ok("infer", "--mode", "gapfill", *common, "--out", run / "gf", "--visible", "geo,surface")
    # without --config the config written by synth next to the data is used
    ok("infer", "--mode", "background", *common[2:], "--out", run / "bg", "--horizon", 1)
    assert json.loads((run / "bg" / "run_manifest.json").read_text())["config"]["verify"]["n_stations"] == 6
    ok("infer", "--mode", "mosaic", *common, "--out", run / "mo", "--t0", 12)
    assert (run / "gf" / "window_0001" / "manifest.json").exists()
    mosaic = json.loads((run / "mo" / "mosaic" / "manifest.json").read_text())
    geo = [f for f in mosaic["files"] if f["modality"] == "geo"]
    assert [(f["t_start"], f["n_times"]) for f in geo] == [(12, 12)]
    ok("background", *common, "--out", run / "dep")
    ok("sensitivity", *common, "--out", run / "sens", "--mode", "drop_one")
    ok("verify", *common, "--out", run / "ver", "--soundings", run / "syn" / "soundings.jsonl")
    ok("report", "--run", run / "ver", "--figures")
    header = (run / "dep" / "departures.csv").read_text().splitlines()[0]
    assert header.startswith("sensor,channel,bias_analysis")
    assert (run / "ver" / "radiosonde_table.csv").read_text().splitlines()[-1].startswith("Average")
    summary = json.loads((run / "ver" / "summary.json").read_text())
    assert len(summary["hourly_profile"]) == 12
    assert (run / "ver" / "hourly_profile.png").exists()
    for d in ("syn", "c2", "gf", "dep", "sens", "ver"):
        assert (run / d / "run_manifest.json").exists(), d
