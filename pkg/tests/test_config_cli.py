import csv
import json
import subprocess
import sys

import pytest

from lap_lab.cli import main, run
from lap_lab.config import ConfigError, RunConfig, digest, dumps, from_dict, load_config, to_dict
from lap_lab.model import load_checkpoint

TINY = {
    "model": {"n_layers": 2, "d_model": 16, "n_heads": 2, "vocab_size": 64, "max_seq": 32},
    "bench": {"n_train": 48, "n_eval": 4, "n_para": 3},
    "train": {"epochs": 1, "batch_size": 16, "inner": {"T": 2}},
    "dynamics": {"n_examples": 2, "iterations": 3},
    "compare": {"seeds": [0]},
    "sweep": {"layers": [0, 1]},
}


@pytest.fixture
def config_file(tmp_path):
    data = json.loads(json.dumps(TINY))
    data["paths"] = {"out_dir": str(tmp_path / "run"), "data_dir": str(tmp_path / "run" / "data")}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data))
    return path


def test_defaults_round_trip():
    cfg = RunConfig()
    assert from_dict(RunConfig, json.loads(dumps(cfg))) == cfg
    assert "seed" not in to_dict(cfg)["train"]


def test_seed_propagates_to_training():
    assert load_config(None, ["seed=7"]).train.seed == 7


def test_unknown_keys_are_errors():
    with pytest.raises(ConfigError, match="train.inner.etaa"):
        from_dict(RunConfig, {"train": {"inner": {"etaa": 1}}})
    with pytest.raises(ConfigError, match="'nope'"):
        from_dict(RunConfig, {"nope": 1})


def test_invalid_values_name_the_field():
    with pytest.raises(ConfigError, match="model"):
        from_dict(RunConfig, {"model": {"d_model": 30, "n_heads": 4}})
    with pytest.raises(ConfigError, match="vocab"):
        from_dict(RunConfig, {"model": {"vocab_size": 128}})
    with pytest.raises(ConfigError, match="injection_layer"):
        from_dict(RunConfig, {"train": {"injection_layer": 99}})


def test_overrides(config_file):
    cfg = load_config(config_file, ["train.inner.eta=0.25", "train.p=1", "analysis.judge=token_f1",
                                    "dynamics.epsilons=[0.5]"])
    assert cfg.train.inner.eta == 0.25 and cfg.train.p == 1
    assert cfg.analysis.judge == "token_f1" and cfg.dynamics.epsilons == (0.5,)
    assert cfg.model.d_model == 16
    with pytest.raises(ConfigError):
        load_config(config_file, ["train.inner.eta"])


def test_digest_is_stable_and_sensitive():
    assert digest(RunConfig()) == digest(load_config())
    assert digest(RunConfig()) != digest(load_config(None, ["train.inner.alpha=0.2"]))
    assert len(digest(RunConfig())) == 64


def test_sweep_default_layers():
    assert RunConfig().sweep.resolve(8) == (0, 2, 4, 6)
    assert RunConfig().sweep.resolve(2) == (0, 1)


def test_exit_codes(config_file, tmp_path, capsys):
    assert run("train", config_file) == 1  # no data yet
    assert "gen-data" in capsys.readouterr().err
    assert run("train", config_file, ["train.bogus=1"]) == 2
    assert "train.bogus" in capsys.readouterr().err
    assert run("train", config_file, ["model.n_heads=3"]) == 2
    assert run("frobnicate", config_file) == 2
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def _pipeline(config_file):
    for cmd in ("gen-data", "train", "eval", "analyze", "dynamics"):
        assert main([cmd, "--config", str(config_file)]) == 0, cmd


ARTIFACTS = ["data/train.json", "data/eval.json", "train_log.csv", "report.json", "report.csv", "distances.csv",
             "scatter.csv", "analysis.json", "dynamics_eps0.01.csv", "dynamics_eps0.05.csv", "dynamics_eps0.1.csv",
             "checkpoint/weights.bin", "checkpoint/manifest.json", "config.json"]


def test_pipeline_artifacts_are_bitwise_reproducible(config_file, tmp_path):
    _pipeline(config_file)
    out = tmp_path / "run"
    first = {name: (out / name).read_bytes() for name in ARTIFACTS}
    cfg = load_config(config_file)
    report = json.loads(first["report.json"])
    assert report["config_digest"] == digest(cfg) and report["seed"] == 0
    assert json.loads((out / "train_log.csv.meta.json").read_text())["config_digest"] == digest(cfg)
    assert list(csv.reader((out / "report.csv").open()))[0] == ["case_id", "prompt_index", "win", "score"]
    _, manifest = load_checkpoint(out / "checkpoint")
    assert manifest["config_digest"] == digest(cfg)
    for path in list(out.rglob("*")):
        if path.is_file():
            path.unlink()
    _pipeline(config_file)
    for name in ARTIFACTS:
        assert (out / name).read_bytes() == first[name], name


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--set", f"paths.out_dir={tmp_path}"]) == 0
    out = capsys.readouterr().out
    assert "lagrangian/delta" in out and "FAIL" not in out and out.rstrip().endswith("passed")


def test_layer_sweep_and_compare_commands(config_file, tmp_path):
    assert main(["gen-data", "--config", str(config_file)]) == 0
    assert main(["layer-sweep", "--config", str(config_file)]) == 0
    rows = list(csv.reader((tmp_path / "run" / "layer_sweep.csv").open()))
    assert rows[0] == ["layer", "best_winrate", "average_winrate"] and [r[0] for r in rows[1:]] == ["0", "1"]
    assert main(["compare", "--config", str(config_file)]) == 0
    rows = list(csv.reader((tmp_path / "run" / "compare.csv").open()))
    assert [r[1] for r in rows[1:]] == ["sft", "lap"]


def test_module_entry_point(config_file):
    proc = subprocess.run([sys.executable, "-m", "lap_lab", "gen-data", "--config", str(config_file)],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "wrote" in proc.stdout
