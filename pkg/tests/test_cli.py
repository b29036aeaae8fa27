import json

import numpy as np
import pytest
import yaml

from tempcon.cli import config_hash, load_config, run
from tempcon.network import NetworkConfig, TransformNet, save_params
from tempcon.video_data import load_frame_sequence, load_report_dict

SYNTH = ["synth.num_sequences=2", "synth.num_frames=5", "synth.height=16", "synth.width=16", "synth.flow_span=4"]
TRAIN = ["train.unroll=3", "train.crop_size=16", "train.iterations=2", "train.base_channels=4", "train.num_blocks=1",
         "train.batch_size=1", "train.extractor=random"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert run(["synth", "--out", str(root), *SYNTH]) == 0
    return root


def test_dump_config(capsys):
    assert run(["train", "--dump-config", "lr=0.01"]) == 0
    cfg = yaml.safe_load(capsys.readouterr().out)
    assert set(cfg) == {"synth", "train"}
    assert cfg["train"]["lr"] == 0.01 and cfg["train"]["unroll"] == 10


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("train:\n  lr: 0.002\n  iterations: 7\nsynth:\n  seed: 4\n")
    cfg = load_config(str(path), ["iterations=9"], "train")
    assert cfg["train"]["lr"] == 0.002 and cfg["train"]["iterations"] == 9 and cfg["synth"]["seed"] == 4


@pytest.mark.parametrize("argv", [
    ["train", "--dump-config", "bogus=1"],
    ["train", "--dump-config", "train.bogus=1"],
    ["train", "--dump-config", "model.lr=1"],
    ["train", "--dump-config", "lr"],
    ["train", "--dump-config", "unroll=1"],
    ["train", "--dump-config", "detach_mask=3"],
    ["train", "--dump-config", "iterations=2.5"],
    ["train"],
    ["eval", "--output", "x", "--processed", "y", "--report", "r", "--data", "m.json"],
    ["frobnicate"],
])
def test_config_errors_exit_2(argv, capsys):
    assert run(argv) == 2


def test_unknown_section_in_file_exit_2(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("optimizer:\n  lr: 1\n")
    assert run(["train", "--config", str(path), "--dump-config"]) == 2


def test_runtime_error_exit_1(tmp_path, capsys):
    argv = ["eval", "--output", str(tmp_path / "none"), "--processed", str(tmp_path / "none"),
            "--report", str(tmp_path / "r.txt")]
    assert run(argv) == 1
    assert "error" in capsys.readouterr().err


def test_synth_layout_and_stamp(dataset):
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert len(manifest["sequences"]) == 2
    stamp = json.loads((dataset / "run.json").read_text())
    assert stamp["seed"] == 0 and stamp["config_hash"] == config_hash(stamp["config"])
    assert manifest["config_hash"] == stamp["config_hash"]
    seq = load_frame_sequence(dataset / "seq000" / "processed")
    assert seq.frames.shape == (5, 16, 16, 3)


def test_synth_rerun_is_identical(dataset, tmp_path):
    assert run(["synth", "--out", str(tmp_path), *SYNTH]) == 0
    for path in sorted(p for p in dataset.rglob("*") if p.is_file()):
        assert (tmp_path / path.relative_to(dataset)).read_bytes() == path.read_bytes(), path


@pytest.mark.formula
def test_process_zero_init_is_byte_identical(dataset, tmp_path):
    save_params(TransformNet(NetworkConfig(base_channels=4, num_blocks=1)), tmp_path / "zero.pt")
    out = tmp_path / "out"
    seq = dataset / "seq001"
    argv = ["process", "--input", str(seq / "input"), "--processed", str(seq / "processed"),
            "--checkpoint", str(tmp_path / "zero.pt"), "--out", str(out)]
    assert run(argv) == 0
    produced = sorted(p.name for p in out.glob("*.png"))
    assert produced == sorted(p.name for p in (seq / "processed").glob("*.png"))
    for name in produced:
        assert (out / name).read_bytes() == (seq / "processed" / name).read_bytes()
    assert json.loads((out / "run.json").read_text())["command"] == "process"


@pytest.mark.formula
def test_eval_identical_static_dirs(tmp_path):
    data = tmp_path / "static"
    assert run(["synth", "--out", str(data), "synth.num_sequences=1", "synth.num_frames=4", "synth.height=16",
                "synth.width=16", "synth.max_shift=0", "synth.amplitude=0"]) == 0
    proc = data / "seq000" / "processed"
    report = tmp_path / "rep.txt"
    argv = ["eval", "--output", str(proc), "--processed", str(proc), "--data", str(data / "manifest.json"),
            "--sequence", "seq000", "--report", str(report)]
    assert run(argv) == 0
    d = load_report_dict(report.with_suffix(".json"))
    assert d["e_warp"] == 0.0 and d["d_perceptual"] == 0.0
    assert len(d["pair_errors"]) == 3 and "config_hash" in d["metadata"]
    assert "E_warp: 0.0" in report.read_text()


def test_eval_with_flow_dir(dataset, tmp_path):
    seq = dataset / "seq000"
    report = tmp_path / "r.txt"
    argv = ["eval", "--output", str(seq / "ideal"), "--processed", str(seq / "processed"), "--input", str(seq / "input"),
            "--flow-dir", str(seq / "flow"), "--report", str(report)]
    assert run(argv) == 0
    d = load_report_dict(report.with_suffix(".json"))
    assert d["metadata"]["flow_backend"] == "file"
    # ideal output: flicker removed up to 8-bit rounding
    assert d["e_warp"] < 1e-4 and d["d_perceptual"] > 0


def test_train_and_rerun_identical(dataset, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run(["train", "--data", str(dataset / "manifest.json"), "--out", str(out), *TRAIN]) == 0
        outs.append(out)
    a, b = outs
    assert (a / "checkpoints" / "latest.pt").read_bytes() == (b / "checkpoints" / "latest.pt").read_bytes()
    assert (a / "train_log.jsonl").read_text() == (b / "train_log.jsonl").read_text()
    assert len((a / "train_log.jsonl").read_text().splitlines()) == 2


def test_sweep_and_report(dataset, tmp_path, capsys):
    out = tmp_path / "sweep"
    argv = ["sweep", "--data", str(dataset / "manifest.json"), "--out", str(out), "--pairs", "100:10,100:100",
            "--no-plot", *TRAIN, "train.iterations=1"]
    assert run(argv) == 0
    rows = json.loads((out / "sweep.json").read_text())["rows"]
    assert [r["r"] for r in rows] == [1.0, 10.0]
    lines = (out / "sweep.txt").read_text().splitlines()
    assert len(lines) == 3 and lines[0].split() == ["lambda_t", "lambda_p", "r", "E_warp", "D_perceptual"]

    rep = tmp_path / "rep"
    assert run(["report", "--sweep", str(out / "sweep.json"), "--out", str(rep)]) == 0
    assert (rep / "sweep.txt").read_text() == (out / "sweep.txt").read_text()
    assert (rep / "tradeoff.png").stat().st_size > 0


def test_bad_pairs_exit_2(dataset, tmp_path):
    argv = ["sweep", "--data", str(dataset / "manifest.json"), "--out", str(tmp_path), "--pairs", "100:10"]
    assert run(argv) == 2
    argv[-1] = "100-10,1"
    assert run(argv) == 2


def test_report_summarizes_reports(dataset, tmp_path, capsys):
    seq = dataset / "seq000"
    paths = []
    for name in ("processed", "ideal"):
        r = tmp_path / f"{name}.txt"
        assert run(["eval", "--output", str(seq / name), "--processed", str(seq / "processed"), "--input",
                    str(seq / "input"), "--flow-dir", str(seq / "flow"), "--report", str(r)]) == 0
        paths.append(str(r.with_suffix(".json")))
    assert run(["report", "--reports", *paths, "--out", str(tmp_path / "sum")]) == 0
    text = (tmp_path / "sum" / "summary.txt").read_text()
    assert text.splitlines()[-1].startswith("mean")
    assert run(["report", "--out", str(tmp_path / "none")]) == 2
