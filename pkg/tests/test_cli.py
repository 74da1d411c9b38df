import csv
import json
import os
import subprocess
import sys

import pytest

from querystream import cli

TINY = {
    "scene": {"frames": 8, "n_objects": 3},
    "decoder": {"d": 8, "heads": 2, "layers": 1, "n_random": 8, "n_prop": 2, "memory_frames": 2,
                "records_per_frame": 4, "ffn_dim": 16, "n_freq": 4},
    "train": {"updates": 2, "seq_len": 3, "detach_prefix": 1},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_simulate_writes_lines_and_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert run("simulate", "--seed", 1, "--frames", 40, "--objects", 8, "--scene-out", a, "--outdir", tmp_path) == 0
    assert run("simulate", "--seed", 1, "--frames", 40, "--objects", 8, "--scene-out", b, "--outdir", tmp_path) == 0
    assert len(a.read_text().splitlines()) == 40
    assert a.read_bytes() == b.read_bytes()
    out = capsys.readouterr().out
    assert "40 frames" in out and "tokens/frame" in out
    snap = json.loads((tmp_path / "resolved_config.json").read_text())
    assert snap["command"] == "simulate" and snap["scene"]["frames"] == 40


def test_simulate_zero_frames(tmp_path):
    out = tmp_path / "e.jsonl"
    assert run("simulate", "--frames", 0, "--scene-out", out, "--outdir", tmp_path) == 0
    assert out.read_text() == ""


def test_config_errors_exit_code(tmp_path):
    assert run("simulate", "--set", "scene.bogus=1", "--outdir", tmp_path) == cli.EXIT_CONFIG
    assert run("simulate", "--set", "nosection.x=1", "--outdir", tmp_path) == cli.EXIT_CONFIG
    assert run("simulate", "--set", "scene.frame_interval=-1", "--outdir", tmp_path) == cli.EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("simulate", "--config", bad, "--outdir", tmp_path) == cli.EXIT_CONFIG


def test_missing_input_exit_code(tmp_path):
    assert run("eval", "--checkpoint", tmp_path / "nope.json", "--outdir", tmp_path) == cli.EXIT_IO
    assert run("train", "--scene-in", tmp_path / "nope.jsonl", "--outdir", tmp_path) == cli.EXIT_IO


def test_overrides_parse_values():
    cfg = cli.apply_overrides({}, ["train.lr=0.01", "scene.cameras_name=front", "decoder.bounds_lo=[-1,-1,-1]"])
    assert cfg == {"train": {"lr": 0.01}, "scene": {"cameras_name": "front"},
                   "decoder": {"bounds_lo": [-1, -1, -1]}}
    with pytest.raises(cli.ConfigError):
        cli.apply_overrides({}, ["noequals"])


def test_train_eval_track_pipeline(tmp_path, tiny_config, capsys):
    scene = tmp_path / "s.jsonl"
    assert run("simulate", "--config", tiny_config, "--seed", 3, "--scene-out", scene, "--outdir", tmp_path) == 0
    r1, r2 = tmp_path / "r1", tmp_path / "r2"
    for r in (r1, r2):
        assert run("train", "--config", tiny_config, "--scene-in", scene, "--seed", 0, "--outdir", r) == 0
    assert (r1 / "checkpoint.json").read_bytes() == (r2 / "checkpoint.json").read_bytes()
    with open(r1 / "losses.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 and list(rows[0]) == ["step", "loss"]
    snap = json.loads((r1 / "resolved_config.json").read_text())
    assert snap["train"]["detach_prefix"] == 1

    ev = tmp_path / "ev"
    assert run("eval", "--config", tiny_config, "--checkpoint", r1 / "checkpoint.json", "--scene-in", scene,
               "--split-speed", 1.0, "--outdir", ev) == 0
    metrics = json.loads((ev / "metrics.json").read_text())
    assert set(metrics) == {"all", "static", "moving"}
    assert metrics["all"]["mAP"] < 0.2  # barely trained
    with open(ev / "metrics.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["split", "threshold", "ap", "mate", "mave"]

    tr = tmp_path / "tr"
    assert run("track", "--config", tiny_config, "--checkpoint", r1 / "checkpoint.json", "--scene", scene,
               "--score-floor", 0.0, "--outdir", tr) == 0
    with open(tr / "tracks.csv") as fh:
        assert next(csv.reader(fh)) == ["frame", "track_id", "label", "score", "x", "y", "z"]


def test_single_frame_training_arm(tmp_path, tiny_config):
    assert run("train", "--config", tiny_config, "--frames-per-seq", 1, "--n-scenes", 1, "--outdir", tmp_path) == 0
    snap = json.loads((tmp_path / "resolved_config.json").read_text())
    assert snap["train"]["seq_len"] == 1 and snap["train"]["detach_prefix"] == 0


def test_eval_is_deterministic(tmp_path, tiny_config):
    run("train", "--config", tiny_config, "--n-scenes", 1, "--outdir", tmp_path / "t")
    ck = tmp_path / "t" / "checkpoint.json"
    for name in ("a", "b"):
        assert run("eval", "--config", tiny_config, "--checkpoint", ck, "--n-scenes", 1,
                   "--outdir", tmp_path / name) == 0
    assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()


def test_bench_rows(tmp_path, tiny_config):
    out = tmp_path / "b.csv"
    assert run("bench", "--config", tiny_config, "--trials", 2, "--tokens", 20, "--histories", 4,
               "--csv-out", out, "--outdir", tmp_path) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert [r["method"] for r in rows] == ["object_centric", "perspective", "bev_concat"]
    assert all(float(r["latency_us_median"]) > 0 for r in rows)
    assert tuple(rows[0]) == ("method", "history", "latency_us_median", "latency_us_p90", "state_bytes")


def test_outdir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTDIR_ENV, str(tmp_path / "envdir"))
    assert run("simulate", "--frames", 2) == 0
    assert (tmp_path / "envdir" / "resolved_config.json").exists()
    assert (tmp_path / "envdir" / "scene.jsonl").exists()


def test_selfcheck_fault_exit_code(tmp_path):
    env = {**os.environ, cli.OUTDIR_ENV: str(tmp_path)}
    bad = subprocess.run([sys.executable, "-m", "querystream.cli", "selfcheck", "--inject-fault"],
                         capture_output=True, text=True, env=env, timeout=300)
    assert bad.returncode == cli.EXIT_SELFCHECK
    assert "selfcheck FAILED" in bad.stdout
