import hashlib
import json

import numpy as np
import pytest

from dropscan.cli import main
from dropscan.scene_sim import load_scene_audio
from dropscan.signal_core import read_wav


def _scene_config(tmp_path, **overrides):
    cfg = {
        "seed": 5,
        "n_scenes": 1,
        "n_devices": 2,
        "duration_range_s": [6.0, 6.0],
        "snr_range_db": [10.0, 20.0],
        "t60_range_s": [0.4, 0.6],
    }
    cfg.update(overrides)
    path = tmp_path / "scene.json"
    path.write_text(json.dumps(cfg))
    return path


def _hash_dir(d):
    out = {}
    for p in sorted(d.rglob("*.wav")):
        out[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def test_simulate_writes_devices_and_manifest(tmp_path):
    cfg = _scene_config(tmp_path)
    out = tmp_path / "scene_out"
    assert main(["simulate", str(cfg), "--out", str(out)]) == 0
    wavs = sorted(p.name for p in out.glob("*.wav"))
    assert wavs == ["device_1.wav", "device_2.wav"]
    data, rate = read_wav(out / "device_1.wav")
    assert rate == 16000 and data.shape[1] == 4
    sidecar = json.loads((out / "ground_truth.json").read_text())
    assert sidecar["schema_version"] == 1
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["subcommand"] == "simulate"


def test_simulate_is_deterministic(tmp_path):
    cfg = _scene_config(tmp_path)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", str(cfg), "--out", str(out_a)]) == 0
    assert main(["simulate", str(cfg), "--out", str(out_b)]) == 0
    assert _hash_dir(out_a) == _hash_dir(out_b)


def test_simulate_six_devices(tmp_path):
    cfg = _scene_config(tmp_path, n_devices=6, duration_range_s=[5.0, 5.0])
    out = tmp_path / "six"
    assert main(["simulate", str(cfg), "--out", str(out)]) == 0
    assert len(list(out.glob("device_*.wav"))) == 6


def test_simulate_invalid_config_exits_1(tmp_path, capsys):
    cfg = _scene_config(tmp_path, n_devices=0)
    assert main(["simulate", str(cfg), "--out", str(tmp_path / "x")]) == 1
    assert "n_devices" in capsys.readouterr().err


def test_simulate_unknown_field_named(tmp_path, capsys):
    cfg = _scene_config(tmp_path, t60_seconds=[0.4])
    assert main(["simulate", str(cfg), "--out", str(tmp_path / "x")]) == 1
    assert "t60_seconds" in capsys.readouterr().err


@pytest.fixture()
def scene_dir(tmp_path):
    cfg = _scene_config(tmp_path, duration_range_s=[10.0, 10.0])
    out = tmp_path / "scene"
    assert main(["simulate", str(cfg), "--out", str(out)]) == 0
    return out


def test_inject_zero_drops_is_identity(scene_dir, tmp_path):
    out = tmp_path / "injected0"
    assert main(["inject", str(scene_dir), "--out", str(out), "--n-drops", "0"]) == 0
    assert _hash_dir(scene_dir) == _hash_dir(out)
    sidecar = json.loads((out / "ground_truth.json").read_text())
    assert sidecar["drop_events"] == []


def test_inject_shortens_affected_device(scene_dir, tmp_path):
    out = tmp_path / "injected"
    assert main([
        "inject", str(scene_dir), "--out", str(out), "--n-drops", "1",
        "--seed", "3",
    ]) == 0
    sidecar = json.loads((out / "ground_truth.json").read_text())
    assert len(sidecar["drop_events"]) == 1
    ev = sidecar["drop_events"][0]
    before, _ = read_wav(scene_dir / f"device_{ev['device_id']}.wav")
    after, _ = read_wav(out / f"device_{ev['device_id']}.wav")
    assert len(before) - len(after) == ev["duration_samples"]


def test_inject_missing_sidecar_errors(tmp_path, capsys):
    bad = tmp_path / "empty"
    bad.mkdir()
    assert main(["inject", str(bad), "--n-drops", "1"]) == 2


def test_xcorr_clean_scene_empty_candidates(scene_dir, tmp_path):
    out = tmp_path / "xcorr"
    assert main(["xcorr", str(scene_dir), "--out", str(out)]) == 0
    cands = json.loads((out / "candidates.json").read_text())
    assert all(v == [] for v in cands["devices"].values())

    lines = (out / "shifts.csv").read_text().strip().splitlines()
    header, rows = lines[0], lines[1:]
    assert header == "device_id,reference_id,anchor_sample,best_shift_frames,peak_ncc"
    # row count: anchors x references, summed over hypothesis devices
    channels, _ = load_scene_audio(scene_dir)
    from dropscan.signal_core import StftConfig, spectrogram
    from dropscan.xcorr_align import XcorrConfig, scan_device
    specs = [spectrogram(dev[0], StftConfig(32)) for dev in channels]
    expected = sum(
        len(t.anchors)
        for j in range(2)
        for t in scan_device(specs, j, XcorrConfig()).per_reference
    )
    assert len(rows) == expected


def test_xcorr_recovers_injected_drop(scene_dir, tmp_path):
    dropped = tmp_path / "dropped"
    assert main([
        "inject", str(scene_dir), "--out", str(dropped), "--n-drops", "1",
        "--seed", "4", "--onset-margin-s", "3.5",
    ]) == 0
    ev = json.loads((dropped / "ground_truth.json").read_text())["drop_events"][0]
    out = tmp_path / "xcorr2"
    assert main(["xcorr", str(dropped), "--out", str(out)]) == 0
    cands = json.loads((out / "candidates.json").read_text())
    mine = cands["devices"][str(ev["device_id"])]
    assert mine, "no candidate on the dropped device"
    best = max(mine, key=lambda c: abs(c["estimated_drop_samples"]))
    assert abs(best["estimated_drop_samples"] - ev["duration_samples"]) <= 256
    assert best["start_sample"] <= ev["onset_sample"] < best["end_sample"]


def test_gradcheck_exits_zero():
    assert main(["gradcheck", "--preset", "desk", "--coords-per-array", "3"]) == 0


def test_train_evaluate_detect_roundtrip(tmp_path, scene_dir):
    run = tmp_path / "run"
    code = main([
        "train", "--out", str(run), "--stages", "2",
        "--train-scenes", "2", "--dev-scenes", "1", "--eval-scenes", "1",
        "--epochs", "1", "--seed", "9",
    ])
    assert code == 0
    ckpt = run / "model.npz"
    assert ckpt.exists()
    assert json.loads((run / "manifest.json").read_text())["subcommand"] == "train"

    ev = tmp_path / "eval"
    code = main([
        "evaluate", "--checkpoint", str(ckpt), "--out", str(ev),
        "--train-scenes", "2", "--dev-scenes", "1", "--eval-scenes", "1",
        "--eval-min-positives", "2", "--seed", "9",
    ])
    assert code == 0
    lines = (ev / "metrics.csv").read_text().strip().splitlines()
    assert lines[0] == "precision,recall,f1,tp,fp,fn,tn"
    assert len(lines) == 2

    det = tmp_path / "det"
    code = main([
        "detect", str(scene_dir), "--checkpoint", str(ckpt), "--out", str(det),
    ])
    assert code == 0
    report = json.loads((det / "report.json").read_text())
    assert "devices" in report and "merged_events" in report


def test_usage_error_exits_1(capsys):
    assert main(["simulate"]) == 1
