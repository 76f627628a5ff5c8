import json

import pytest

from uamf.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, cli_main
from uamf.config import HarnessConfig, load_config
from uamf.errors import ConfigError

TINY_MODEL = {"num_frames": 4, "input_hw": [16, 16], "stem_channels": 4, "channel_schedule": [4, 8],
              "num_blocks": 2, "num_tokens": 2, "token_dim": 8, "num_heads": 2, "head_hidden": 16}


def write_config(tmp_path, run_dir, **train):
    cfg = {
        "data": {"source": "synth", "train_per_class": 3, "val_per_class": 2, "seed": 5},
        "model": TINY_MODEL,
        "train": {"lr": 2e-3, "epochs": 2, "batch_size": 6, **train},
        "output": {"run_dir": str(run_dir)},
    }
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    return path


def test_unknown_flag_is_usage_error(capsys):
    assert cli_main(["train", "--no-such-flag"]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert "usage:" in err and "--no-such-flag" in err
    assert cli_main([]) == EXIT_USAGE
    assert cli_main(["frobnicate"]) == EXIT_USAGE
    assert cli_main(["--help"]) == EXIT_OK


def test_synth_data_byte_identical(tmp_path, capsys):
    for name in ("a", "b"):
        assert cli_main(["synth-data", "--classes", "4", "--per-class", "2", "--seed", "7",
                         "--out", str(tmp_path / name)]) == EXIT_OK
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "labels.csv" in files and len(files) == 9
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_train_then_eval_reproduces_best_val(tmp_path, capsys):
    run = tmp_path / "run"
    cfg = write_config(tmp_path, run)
    assert cli_main(["train", "--config", str(cfg)]) == EXIT_OK
    for name in ("config.resolved.json", "report.csv", "report.json", "checkpoints/best.ckpt"):
        assert (run / name).exists(), name
    report = json.loads((run / "report.json").read_text())
    capsys.readouterr()
    assert cli_main(["eval", "--checkpoint", str(run / "checkpoints" / "best.ckpt")]) == EXIT_OK
    out = capsys.readouterr().out
    assert float(out.split()[1]) == report["best_val_top1"]

    # the resolved config reproduces the run
    rerun = tmp_path / "rerun"
    assert cli_main(["train", "--config", str(run / "config.resolved.json"), "--run-dir", str(rerun)]) == EXIT_OK
    again = json.loads((rerun / "report.json").read_text())
    assert again["step_losses"] == report["step_losses"]


def test_seed_precedence(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, tmp_path / "r0", seed=1)

    def seed_of(run_dir, *extra):
        assert cli_main(["train", "--config", str(cfg), "--run-dir", str(run_dir), "--max-steps", "1", *extra]) == 0
        return json.loads((run_dir / "config.resolved.json").read_text())["train"]["seed"]

    assert seed_of(tmp_path / "r1") == 1
    monkeypatch.setenv("UAMF_SEED", "9")
    assert seed_of(tmp_path / "r2") == 9
    assert seed_of(tmp_path / "r3", "--seed", "4") == 4
    monkeypatch.setenv("UAMF_SEED", "x")
    assert cli_main(["train", "--config", str(cfg), "--run-dir", str(tmp_path / "r4")]) == EXIT_USAGE


def test_outputs_confined_to_run_dir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = write_config(tmp_path, tmp_path / "run", max_steps=1)
    assert cli_main(["train", "--config", str(cfg)]) == EXIT_OK
    assert sorted(p.name for p in tmp_path.iterdir()) == ["c.json", "run"]


def test_files_source_and_data_errors(tmp_path):
    assert cli_main(["synth-data", "--per-class", "2", "--seed", "1", "--out", str(tmp_path / "d")]) == 0
    cfg = json.loads(write_config(tmp_path, tmp_path / "run", max_steps=1).read_text())
    cfg["data"] = {"source": "files", "train_manifest": "d/labels.csv", "val_manifest": "d/labels.csv"}
    (tmp_path / "f.json").write_text(json.dumps(cfg))
    assert cli_main(["train", "--config", str(tmp_path / "f.json")]) == EXIT_OK
    cfg["data"]["train_manifest"] = "missing/labels.csv"
    (tmp_path / "g.json").write_text(json.dumps(cfg))
    assert cli_main(["train", "--config", str(tmp_path / "g.json")]) == EXIT_DATA
    assert cli_main(["eval", "--checkpoint", str(tmp_path / "none.ckpt")]) == EXIT_DATA
    (tmp_path / "junk.ckpt").write_bytes(b"nope")
    assert cli_main(["eval", "--checkpoint", str(tmp_path / "junk.ckpt")]) == EXIT_DATA


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigError):
        HarnessConfig.from_dict({"modle": {}})
    with pytest.raises(ConfigError):
        HarnessConfig.from_dict({"data": {"sorce": "synth"}})
    with pytest.raises(ConfigError):
        HarnessConfig.from_dict({"data": {"synth": {"noise": 0.1}}})
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"lr": 1e-3, "momentum": 0.9}}))
    assert cli_main(["train", "--config", str(bad)]) == EXIT_USAGE


def test_resolved_config_materializes_defaults(tmp_path):
    cfg = HarnessConfig.from_dict({})
    d = json.loads(cfg.to_json())
    assert d["model"]["num_blocks"] == 12 and d["train"]["lr"] == 1e-4
    assert d["data"]["synth"]["num_classes"] == 4
    assert HarnessConfig.from_dict(d) == cfg
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    assert load_config(path) == cfg


def test_ablate_sweep_export_gradcheck(tmp_path, capsys):
    run = tmp_path / "run"
    cfg = write_config(tmp_path, run, epochs=1, max_steps=1)
    assert cli_main(["ablate", "--config", str(cfg)]) == EXIT_OK
    assert (run / "ablation.csv").read_text().startswith("No.,Mobile,Former,UAB,CA,DY-ReLU,Results")
    assert cli_main(["sweep", "--config", str(cfg), "--axis", "tokens", "--values", "1", "3"]) == EXIT_OK
    assert len((run / "sweep_tokens.csv").read_text().splitlines()) == 3
    assert cli_main(["train", "--config", str(cfg)]) == EXIT_OK
    assert cli_main(["export-features", "--checkpoint", str(run / "checkpoints" / "best.ckpt"),
                     "--count", "1"]) == EXIT_OK
    assert (run / "exports" / "maps.csv").exists() and (run / "exports" / "token_norms.csv").exists()
    capsys.readouterr()
    assert cli_main(["gradcheck", "--no-model"]) == EXIT_OK
    assert "max relative error" in capsys.readouterr().out
