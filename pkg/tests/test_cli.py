import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from dfinger import cli, dsp

TINY = {
    "threads": 1,
    "corpus": {"n_speech": 6, "n_noise_profiles": 2, "train_files_per_profile": 1, "eval_files_per_profile": 1,
               "noise_duration_s": 12.0, "speech_duration_s": 2.0},
    "model": {"conv_channels": 8, "hidden": 16, "heads": 2},
    "train": {"n_samples": 4, "segment_s": 1.0, "batch": 2, "pretrain_epochs": 1, "finetune_epochs": 1,
              "stages": [{"name": "dfin", "variant": "dfin", "fingerprint_prob": 1.0},
                         {"name": "dfn", "variant": "dfn", "fingerprint_prob": 1.0}]},
    "eval": {"snr_db": [0.0, 5.0], "segment_s": 1.5},
    "staleness": {"offsets_s": [0, 3], "snr_db": [0.0]},
    "stress": {"snr_db": [0.0]},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    out = root / "run"
    base = ["--config", str(cfg), "--out", str(out)]
    assert cli.main(["gen-corpus", *base]) == 0
    assert cli.main(["train", *base]) == 0
    return root, base, out


@pytest.mark.parametrize("name", cli.SUBCOMMANDS)
def test_every_subcommand_has_help(name, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main([name, "--help"])
    assert exc.value.code == 0
    assert "--config" in capsys.readouterr().out


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "dfinger.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "sweep-staleness" in res.stdout


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["eval", "--bogus"])
    assert exc.value.code == 2


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: {lr_typo: 1}\n")
    assert cli.main(["eval", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "lr_typo" in capsys.readouterr().err
    assert cli.main(["eval", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path)]) == 2
    assert cli.main(["eval", "--variant", "nope", "--out", str(tmp_path)]) == 2


def test_missing_manifest_and_checkpoint_exit_3(tmp_path, capsys):
    assert cli.main(["eval", "--out", str(tmp_path)]) == 3
    assert cli.main(["enhance", "--out", str(tmp_path), "--checkpoint", "nothing.ckpt", "--input", "x.wav"]) == 3
    assert "nothing.ckpt" in capsys.readouterr().err


def test_env_config_and_effective_echo(tmp_path, monkeypatch):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("seed: 17\n")
    monkeypatch.setenv("DFINGER_CONFIG", str(cfg))
    cli.main(["eval", "--out", str(tmp_path / "o"), "--threads", "2"])
    eff = yaml.safe_load((tmp_path / "o" / "config.effective.yaml").read_text())
    assert eff["seed"] == 17 and eff["threads"] == 2 and eff["command"] == "eval"
    assert eff["train"]["lr"] == cli.default_config()["train"]["lr"]


def test_pipeline_outputs(workspace):
    _, _, out = workspace
    for name in ("baseline-pretrained", "dfin", "dfn"):
        assert (out / "checkpoints" / f"{name}.ckpt").exists()
    summary = json.loads((out / "reports" / "train-summary.json").read_text())
    assert summary["dfin"]["fp_fraction"] == 1.0
    assert (out / "reports" / "train-dfin.jsonl").read_text().count("\n") >= 2


def test_mix_writes_sidecars(workspace):
    _, base, out = workspace
    assert cli.main(["mix", *base, "--limit", "2"]) == 0
    sidecars = sorted((out / "audio" / "mix" / "eval").glob("*.json"))
    assert len(sidecars) == 2
    doc = json.loads(sidecars[0].read_text())
    assert {"gain", "achieved_snr_db", "fingerprint_offset_s"} <= set(doc)
    assert cli.main(["mix", *base, "--split", "train", "--limit", "1", "--stress", "noise_as_fingerprint"]) == 0


def test_eval_reports(workspace):
    _, base, out = workspace
    assert cli.main(["eval", *base, "--checkpoint", "dfin", "--checkpoint", "base=dfn"]) == 0
    rows = list(csv.DictReader(open(out / "reports" / "eval.csv")))
    assert {r["condition"] for r in rows} == {"fingerprint", "bypass"}
    assert {r["model"] for r in rows} == {"dfin", "base"}
    table = list(csv.DictReader(open(out / "reports" / "comparison.csv")))
    assert table[0]["model"] == "Mixture"
    doc = json.loads((out / "reports" / "eval.json").read_text())
    assert doc["version"] == "dfinger-report-v1" and doc["category_radar"]


def test_eval_missing_checkpoint_names_it(workspace, capsys):
    _, base, _ = workspace
    assert cli.main(["eval", *base, "--checkpoint", "ghost"]) == 3
    assert "ghost" in capsys.readouterr().err


def test_enhance_batch_and_streaming(workspace, tmp_path):
    _, base, out = workspace
    rng = np.random.default_rng(0)
    dsp.write_wav(tmp_path / "in.wav", dsp.AudioBuffer(rng.standard_normal(24000) * 0.1), "float32")
    dsp.write_wav(tmp_path / "fp.wav", dsp.AudioBuffer(rng.standard_normal(12000) * 0.1), "float32")
    common = [*base, "--checkpoint", "dfin", "--input", str(tmp_path / "in.wav"), "--fingerprint", str(tmp_path / "fp.wav")]
    assert cli.main(["enhance", *common, "--output", str(tmp_path / "a.wav")]) == 0
    assert cli.main(["enhance", *common, "--output", str(tmp_path / "b.wav"), "--streaming"]) == 0
    a = dsp.read_wav(tmp_path / "a.wav").samples
    b = dsp.read_wav(tmp_path / "b.wav").samples
    assert len(a) == 24000 and np.max(np.abs(a - b)) < 1e-5
    dsp.write_wav(tmp_path / "sr.wav", dsp.AudioBuffer(np.zeros(100), 16000), "float32")
    assert cli.main(["enhance", *base, "--checkpoint", "dfin", "--input", str(tmp_path / "sr.wav")]) == 2


def test_staleness_and_stress(workspace):
    _, base, out = workspace
    assert cli.main(["sweep-staleness", *base, "--checkpoint", "dfin"]) == 0
    curve = list(csv.DictReader(open(out / "reports" / "staleness.csv")))
    assert [float(r["offset_s"]) for r in curve] == [0.0, 3.0]
    assert cli.main(["stress", *base, "--checkpoint", "dfin"]) == 0
    doc = json.loads((out / "reports" / "stress.json").read_text())
    assert set(doc["delta_si_sdr"]) == {"clean_as_fingerprint", "normal", "noise_as_fingerprint"}
    assert cli.main(["stress", *base, "--checkpoint", "dfn"]) == 2


def test_bench(workspace):
    _, base, out = workspace
    assert cli.main(["bench", *base, "--checkpoint", "dfin", "--seconds", "1"]) == 0
    doc = json.loads((out / "reports" / "bench.json").read_text())
    assert doc["frames"] == 100 and set(doc["latency_ms"]) == {"p50", "p95", "p99"}
    first = doc["output_sha256"]
    cli.main(["bench", *base, "--checkpoint", "dfin", "--seconds", "1"])
    assert json.loads((out / "reports" / "bench.json").read_text())["output_sha256"] == first
    assert cli.main(["bench", *base, "--checkpoint", "dfin", "--seconds", "0"]) == 3


def test_empty_eval_set_is_data_error(workspace, tmp_path):
    root, _, out = workspace
    cfg = dict(TINY, eval=dict(TINY["eval"], snr_db=[]))
    path = tmp_path / "empty.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert cli.main(["eval", "--config", str(path), "--out", str(out), "--checkpoint", "dfin"]) == 3
