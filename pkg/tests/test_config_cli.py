import json
import time

import numpy as np
import pytest

from ramf import autodiff as ad
from ramf import cli
from ramf import config as cfgmod
from ramf.config import ConfigError, ExperimentConfig
from ramf.data import load_cache
from ramf.metrics import AccuracyMatrix
from ramf.trainer import PRESETS

TINY = {
    "method": "ramf",
    "data": {"classes": 4, "per_class": 20, "test_per_class": 5, "size": 8},
    "split": {"initial": 2, "stages": 2, "per_stage": 1},
    "initial": {"epochs": 1, "batch_size": 16},
    "incremental": {"epochs": 1, "batch_size": 16},
}


def _write(tmp_path, raw, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(raw))
    return p


# ---------------------------------------------------------------------------
# config schema


def test_defaults_are_valid():
    cfg = cfgmod.from_dict({})
    assert cfg.method == "ramf" and cfg.seed == 0
    assert cfg.resolved_toggles() == PRESETS["ramf"]
    mc = cfg.method_config()
    assert mc.mix_lambda == 0.7 and mc.w_kd == 10.0


def test_unknown_key_names_path():
    with pytest.raises(ConfigError, match="data.colour"):
        cfgmod.from_dict({"data": {"colour": 1}})


@pytest.mark.parametrize(
    "raw",
    [
        {"seed": "zero"},
        {"seed": 1.5},
        {"reference": "yes"},
        {"params": {"noise_range": [1.5]}},
        {"params": {"noise_range": [2.0, 1.0]}},
        {"method": "icarl"},
        {"split": {"initial": 0}},
        {"initial": {"epochs": 0}},
        {"incremental": {"lr_max": 1e-5, "lr_min": 1e-3, "epochs": 1}},
        {"data": {"source": "idx"}},
        {"data": "synthetic"},
    ],
)
def test_schema_errors(raw):
    with pytest.raises(ConfigError):
        cfgmod.from_dict(raw)


def test_partial_stage_merges_over_defaults():
    cfg = cfgmod.from_dict({"initial": {"batch_size": 8}})
    assert cfg.initial.batch_size == 8 and cfg.initial.epochs == 30


def test_toggles_apply_over_preset():
    cfg = cfgmod.from_dict({"method": "baseline", "toggles": {"aux_aug": True}})
    t = cfg.resolved_toggles()
    assert t.aux_aug and not t.base_aug and not t.mixed_feature


def test_overrides():
    cfg = cfgmod.from_dict(TINY, ["seed=7", "split.stages=1", "params.noise_range=[0.1, 0.2]", "method=finetune"])
    assert cfg.seed == 7 and cfg.split.stages == 1
    assert cfg.params.noise_range == (0.1, 0.2)
    assert cfg.method == "finetune"
    with pytest.raises(ConfigError):
        cfgmod.from_dict(TINY, ["seed"])
    with pytest.raises(ConfigError):
        cfgmod.from_dict(TINY, ["seed.x=1"])


def test_round_trip_through_dict():
    cfg = cfgmod.from_dict(TINY)
    assert cfgmod.from_dict(cfg.to_dict()) == cfg
    assert isinstance(cfg, ExperimentConfig)


def test_load_errors(tmp_path):
    with pytest.raises(FileNotFoundError, match="config file not found"):
        cfgmod.load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        cfgmod.load(bad)


def test_shipped_configs_load():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    for p in sorted(root.glob("*.json")):
        cfgmod.load(p)


# ---------------------------------------------------------------------------
# CLI


def test_run_writes_artifacts(tmp_path, capsys):
    p = _write(tmp_path, TINY)
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(p), "--out", str(out)]) == 0
    names = sorted(f.name for f in out.iterdir())
    assert names == ["acc_matrix.csv", "config.json", "confusion.csv", "curves.csv", "features.csv", "summary.json"]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["units"] == "percent" and len(summary["stages"]) == 3
    assert summary["stages"][0]["F_t"] is None
    assert summary["memory_report"]["prototype_values"] == 4 * 64
    m = AccuracyMatrix.from_csv((out / "acc_matrix.csv").read_text())
    assert m.completed == 3
    assert m.to_csv() == (out / "acc_matrix.csv").read_text()
    conf = np.loadtxt(out / "confusion.csv", delimiter=",", skiprows=1)
    assert conf.sum() == 4 * 5
    echo = json.loads((out / "config.json").read_text())
    assert echo["resolved"]["seed"] == 0
    assert "final A=" in capsys.readouterr().out


def test_run_is_byte_deterministic(tmp_path):
    p = _write(tmp_path, TINY)
    for d in ("a", "b"):
        assert cli.main(["run", "--config", str(p), "--out", str(tmp_path / d)]) == 0
    for f in ("summary.json", "acc_matrix.csv", "features.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_seed_flag_changes_result(tmp_path):
    p = _write(tmp_path, TINY)
    cli.main(["run", "--config", str(p), "--out", str(tmp_path / "a")])
    cli.main(["run", "--config", str(p), "--out", str(tmp_path / "b"), "--seed", "3"])
    assert json.loads((tmp_path / "b" / "summary.json").read_text())["seed"] == 3
    assert (tmp_path / "a" / "features.csv").read_bytes() != (tmp_path / "b" / "features.csv").read_bytes()


def test_exit_code_unknown_key(tmp_path, capsys):
    p = _write(tmp_path, dict(TINY, colour=1))
    assert cli.main(["run", "--config", str(p)]) == 2
    assert "colour" in capsys.readouterr().err


def test_exit_code_missing_config(tmp_path):
    assert cli.main(["run", "--config", str(tmp_path / "none.json")]) == 2


def test_exit_code_missing_dataset(tmp_path, capsys):
    raw = dict(TINY, data={"source": "cache", "train": str(tmp_path / "nope.bin"), "test": "x"})
    assert cli.main(["run", "--config", str(_write(tmp_path, raw))]) == 2
    assert "nope.bin" in capsys.readouterr().err


def test_exit_code_divergence_leaves_no_output(tmp_path):
    raw = dict(TINY, initial={"epochs": 2, "batch_size": 16, "lr_max": 1e100, "lr_min": 1.0})
    out = tmp_path / "out"
    with np.errstate(all="ignore"):
        assert cli.main(["run", "--config", str(_write(tmp_path, raw)), "--out", str(out)]) == 3
    assert not out.exists()


def test_gen_data_then_run_from_cache(tmp_path):
    tr, te = tmp_path / "train.bin", tmp_path / "test.bin"
    assert cli.main(["gen-data", "--classes", "4", "--per-class", "20", "--size", "8", "--out", str(tr)]) == 0
    assert cli.main(["gen-data", "--classes", "4", "--per-class", "5", "--size", "8", "--seed", "1", "--out", str(te)]) == 0
    assert len(load_cache(tr)) == 80
    raw = dict(TINY, data={"source": "cache", "train": str(tr), "test": str(te)})
    assert cli.main(["run", "--config", str(_write(tmp_path, raw)), "--out", str(tmp_path / "o")]) == 0
    assert cli.main(["gen-data", "--classes", "1", "--per-class", "5", "--out", str(tr)]) == 2


def test_ablate_writes_table(tmp_path):
    raw = dict(TINY, ablation_seeds=[0], reference=False)
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--config", str(_write(tmp_path, raw)), "--set", f"output_dir={json.dumps(str(out))}"]) == 0
    lines = (out / "ablation.csv").read_text().splitlines()
    assert lines[0].startswith("variant,") and len(lines) == 6
    assert (out / "mf_ac" / "seed_0" / "acc_matrix.csv").exists()


def test_verify_passes_quickly(capsys):
    t0 = time.perf_counter()
    assert cli.main(["verify"]) == 0
    assert time.perf_counter() - t0 < 60
    assert "FAIL" not in capsys.readouterr().out


def test_verify_catches_injected_relu_bug(monkeypatch, capsys):
    real = ad.relu

    def wrong_relu(a):
        out = real(a)
        mask = a.data > 0
        # backward lets gradient through negative inputs too
        return ad._node(out.data, (a,), lambda g: (g * np.where(mask, 1.0, 0.5),))

    monkeypatch.setattr(ad, "relu", wrong_relu)
    assert cli.main(["verify"]) == 1
    out = capsys.readouterr().out
    failing = out.strip().splitlines()[-1]
    assert failing.startswith("failing:") and "relu" in failing
