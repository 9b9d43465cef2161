import json

import numpy as np
import pytest
import yaml

from dpcss.cli import main
from dpcss.config import ConfigError, load_run_config
from dpcss.dsp import Waveform, read_wav, write_wav

TINY = {
    "model": {"arch": "dp-transformer", "window_frames": 50, "feature_dim": 8, "n_heads": 2, "ff_dim": 16,
              "repeats": 2},
    "train": {"steps": 4, "batch_size": 1, "chunk_windows": 4, "warmup_steps": 2},
    "simulate": {"n_meetings": 2, "duration": 5.0, "max_order": 1},
}


def _write(tmp_path, data):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(data))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    assert main(["simulate", "--config", str(cfg), "--seed", "3", "--out", str(root / "data")]) == 0
    return root, cfg


def test_simulate_writes_dataset_and_is_reproducible(workspace, tmp_path):
    root, cfg = workspace
    assert main(["simulate", "--config", str(cfg), "--seed", "3", "--out", str(tmp_path / "again")]) == 0
    for name in ("summary.jsonl", "resolved_config.yaml", "meeting_0001/manifest.json", "meeting_0001/mixture.wav"):
        assert (root / "data" / name).read_bytes() == (tmp_path / "again" / name).read_bytes(), name
    records = [json.loads(line) for line in (root / "data" / "summary.jsonl").read_text().splitlines()]
    assert len(records) == 2
    assert all(abs(r["realized_overlap"] - r["target_overlap"]) <= 0.05 for r in records)


def test_simulate_zero_meetings_warns(tmp_path, caplog):
    cfg = _write(tmp_path, {"simulate": {"n_meetings": 0}})
    assert main(["simulate", "--out", str(tmp_path), "--config", str(cfg)]) == 0
    assert "n_meetings = 0" in caplog.text
    assert (tmp_path / "summary.jsonl").read_text() == ""


def test_train_separate_evaluate_roundtrip(workspace, tmp_path):
    root, cfg = workspace
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(run)]) == 0
    assert (run / "best.ckpt").exists() and (run / "history.jsonl").exists()
    mixture = root / "data" / "meeting_0000" / "mixture.wav"
    sep = tmp_path / "sep"
    assert main(["separate", str(mixture), "--config", str(cfg), "--checkpoint", str(run / "best.ckpt"),
                 "--out", str(sep)]) == 0
    assert len(read_wav(sep / "stream1.wav")) == len(read_wav(mixture))
    report = json.loads((sep / "report.json").read_text())
    assert len(report["permutations"]) == report["n_windows"]
    ev = tmp_path / "eval"
    assert main(["evaluate", "--config", str(cfg), "--data", str(root / "data"), "--checkpoint",
                 str(run / "best.ckpt"), "--out", str(ev)]) == 0
    records = [json.loads(line) for line in (ev / "metrics.jsonl").read_text().splitlines()]
    systems = {r["system"] for r in records}
    assert systems == {"dp-transformer", "mixture"}


def test_evaluate_oracle_and_unit_rows(workspace, tmp_path, capsys):
    root, cfg = workspace
    assert main(["evaluate", "--config", str(cfg), "--data", str(root / "data"), "--debug-oracle-mask", "true",
                 "--out", str(tmp_path / "o")]) == 0
    recs = [json.loads(line) for line in (tmp_path / "o" / "metrics.jsonl").read_text().splitlines()]
    stream = {r["system"]: r["mean_snr_db"] for r in recs if r["kind"] == "stream"}
    assert stream["oracle-psm"] > stream["mixture"] + 3.0
    windows = sum(r["count"] for r in recs if r["system"] == "mixture" and r["kind"] in ("window", "silent_windows"))
    assert windows > 0
    assert main(["evaluate", "--config", str(cfg), "--data", str(root / "data"), "--debug-unit-mask", "true",
                 "--out", str(tmp_path / "u")]) == 0
    recs = [json.loads(line) for line in (tmp_path / "u" / "metrics.jsonl").read_text().splitlines()]
    rows = {(r["system"], r.get("bucket")): r.get("mean_snr_db") for r in recs if r["kind"] == "window"}
    for b in ("0", "0-25", "25-50", "50-75", "75-100"):
        assert rows[("unit-mask", b)] == rows[("mixture", b)]


def test_separate_unit_mask_reproduces_input(tmp_path):
    x = 0.1 * np.random.default_rng(0).normal(size=16000)
    write_wav(tmp_path / "in.wav", Waveform(x))
    assert main(["separate", str(tmp_path / "in.wav"), "--debug-unit-mask", "true", "--out", str(tmp_path / "o")]) == 0
    np.testing.assert_allclose(read_wav(tmp_path / "o" / "stream1.wav").samples, x, atol=1e-6)


def test_profile_reports_boosted_ratio(tmp_path, capsys):
    assert main(["profile", "--arch", "dp-transformer-boosted", "--lambda", "2", "--out", str(tmp_path)]) == 0
    total = json.loads((tmp_path / "profile.jsonl").read_text().splitlines()[-1])
    assert 0.60 <= total["mac_ratio_vs_plain"] <= 0.78
    assert main(["profile", "--arch", "dp-transformer-boosted", "--lambda", "1"]) == 0
    assert "MAC ratio: 1.000" in capsys.readouterr().out


def test_usage_errors_exit_one(tmp_path, capsys):
    assert main([]) == 1
    assert main(["profile", "--window-frames", "70"]) == 1
    assert main(["profile", "--online", "maybe"]) == 1
    assert main(["profile", "--arch", "bogus"]) == 1
    assert main(["profile", "--config", str(_write(tmp_path, {"nonsense": {}}))]) == 1
    assert main(["profile", "--config", str(tmp_path / "missing.yaml")]) == 1
    assert main(["profile", "--arch", "dp-transformer", "--online", "true"]) == 1
    assert "configuration error" in capsys.readouterr().err


def test_runtime_errors_exit_two(tmp_path, workspace):
    root, cfg = workspace
    (tmp_path / "bad.wav").write_bytes(b"garbage")
    assert main(["separate", str(tmp_path / "bad.wav"), "--debug-unit-mask", "true", "--out", str(tmp_path)]) == 2
    assert main(["train", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "r")]) == 2


def test_checkpoint_mismatch_is_a_config_error(workspace, tmp_path, capsys):
    root, cfg = workspace
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(run), "--steps", "1"]) == 0
    mixture = root / "data" / "meeting_0000" / "mixture.wav"
    code = main(["separate", str(mixture), "--config", str(cfg), "--arch", "dp-blstm",
                 "--checkpoint", str(run / "best.ckpt"), "--out", str(tmp_path / "s")])
    assert code == 1
    assert "does not match" in capsys.readouterr().err


def test_precedence_defaults_file_flags(tmp_path):
    path = _write(tmp_path, {"model": {"window_frames": 100, "arch": "dp-blstm"}})
    cfg = load_run_config(path)
    assert cfg.model.window_frames == 100 and cfg.model.hop_frames == 50
    cfg = load_run_config(path, {"model": {"window_frames": 200, "hop_frames": 100}})
    assert cfg.model.window_frames == 200 and cfg.model.arch == "dp-blstm"
    with pytest.raises(ConfigError):
        load_run_config(_write(tmp_path, {"model": {"no_such_key": 1}}))
