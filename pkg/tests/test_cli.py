import json

import pytest

from slap.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, load_config, main
from slap.errors import ConfigError

from conftest import tiny_model_config


@pytest.fixture
def config_file(tmp_path):
    cfg = {"model": tiny_model_config().to_dict(), "train": {"batch_size": 3, "steps": 3, "lr_peak": 1e-3, "warmup_steps": 1}}
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg))
    return p


@pytest.fixture
def trained(tmp_path, config_file, synth_dir):
    out = tmp_path / "run"
    code = main(["train", "--config", str(config_file), "--manifest", str(synth_dir / "manifest.jsonl"),
                 "--seed", "7", "--out", str(out)])
    assert code == EXIT_OK
    return out / "final.slap"


def test_unknown_flag_is_usage_error(capsys):
    assert main(["train", "--bogus"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE


def test_synth_data(tmp_path):
    assert main(["synth-data", "--pairs", "4", "--out", str(tmp_path / "d")]) == EXIT_OK
    assert len(list((tmp_path / "d").glob("*.wav"))) == 4
    lines = (tmp_path / "d" / "manifest.jsonl").read_text().splitlines()
    assert len({json.loads(s)["caption"] for s in lines}) == 4
    assert main(["synth-data", "--pairs", "4"]) == EXIT_USAGE


def test_train_twice_identical(tmp_path, config_file, synth_dir, trained):
    out = tmp_path / "again"
    main(["train", "--config", str(config_file), "--manifest", str(synth_dir / "manifest.jsonl"),
          "--seed", "7", "--out", str(out)])
    assert trained.read_bytes() == (out / "final.slap").read_bytes()


def test_eval_and_export(tmp_path, config_file, synth_dir, trained, capsys):
    m = str(synth_dir / "manifest.jsonl")
    assert main(["eval-retrieval", "--checkpoint", str(trained), "--manifest", m, "--k", "1", "5"]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    assert set(rep) == {"a2t_R@1", "a2t_R@5", "t2a_R@1", "t2a_R@5"}
    assert main(["eval-zeroshot", "--checkpoint", str(trained), "--manifest", m]) == EXIT_OK
    assert 0.0 <= json.loads(capsys.readouterr().out)["top1"] <= 1.0
    assert main(["embed", "--checkpoint", str(trained), "--manifest", m, "--out", str(tmp_path / "e.bin")]) == EXIT_OK
    assert (tmp_path / "e.bin").stat().st_size > 0
    capsys.readouterr()
    assert main(["caption", "--checkpoint", str(trained), "--manifest", m, "--max-len", "8"]) == EXIT_OK
    assert "exact match" in capsys.readouterr().out


def test_digest_mismatch_is_data_error(tmp_path, trained, synth_dir):
    other = tmp_path / "other.json"
    other.write_text(json.dumps({"model": {"audio": {"n_layers": 3, "n_heads": 2, "hidden": 32, "ffn": 32}}}))
    code = main(["eval-retrieval", "--checkpoint", str(trained), "--config", str(other),
                 "--manifest", str(synth_dir / "manifest.jsonl")])
    assert code == EXIT_DATA


def test_data_errors(tmp_path, config_file):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "a"}\n')
    code = main(["train", "--config", str(config_file), "--manifest", str(bad), "--out", str(tmp_path / "o")])
    assert code == EXIT_DATA
    code = main(["train", "--config", str(config_file), "--manifest", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "o")])
    assert code == EXIT_DATA


def test_bad_config_is_usage_error(tmp_path, synth_dir):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"learning_rate": 1}}))
    code = main(["train", "--config", str(p), "--manifest", str(synth_dir / "manifest.jsonl"), "--out", str(tmp_path)])
    assert code == EXIT_USAGE
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.json")


def test_load_config_seed_override(config_file):
    model_cfg, cfg = load_config(config_file, seed=11)
    assert cfg.seed == 11 and cfg.batch_size == 3 and model_cfg.audio.hidden == 16


def test_grad_check_exit_codes(monkeypatch, capsys):
    import slap.diagnostics as diag

    monkeypatch.setattr(diag, "run_grad_checks", lambda seed=0: {"clap_loss": 1e-9, "ssl_loss": 2e-6})
    assert main(["grad-check"]) == EXIT_OK
    assert "ok" in capsys.readouterr().out
    monkeypatch.setattr(diag, "run_grad_checks", lambda seed=0: {"clap_loss": 1e-2})
    assert main(["grad-check"]) == EXIT_NUMERIC


def test_pack_bench(config_file, capsys):
    assert main(["pack-bench", "--config", str(config_file), "--clips", "3"]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    assert rep["clips"] == 3 and 0.0 <= rep["padding_saved"] < 1.0
