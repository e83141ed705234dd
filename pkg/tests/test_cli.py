import csv
import hashlib
import io
import json

import numpy as np
import pytest

from xlmimo import cli
from xlmimo.checkpoint import load_model
from xlmimo.formats import Dataset, read_dataset, write_dataset
from xlmimo.nn import Conv2d

TINY_TRAIN = {"model": "matcenet", "M": 16, "F": 8, "n_heads": 2, "n_train": 24, "n_val": 8,
              "batch_size": 8, "n_epochs": 2}


def run(argv, capsys=None):
    code = cli.main([str(a) for a in argv])
    if capsys is None:
        return code
    out, err = capsys.readouterr()
    return code, out, err


def write_json(path, obj):
    path.write_text(json.dumps(obj, indent=1))
    return path


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# config resolution


def test_missing_required_key_is_named(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {"n_samples": 4})
    code, _, err = run(["generate", "--config", cfg, "--out", tmp_path / "d"], capsys)
    assert code == 1
    assert "'M'" in err
    assert not (tmp_path / "d").exists()


def test_unknown_key_reports_line(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{\n  "M": 16,\n  "n_samples": 4,\n  "n_sampels": 5\n}\n')
    code, _, err = run(["generate", "--config", cfg, "--out", tmp_path / "d"], capsys)
    assert code == 1
    assert "n_sampels" in err and "line 4" in err


def test_malformed_json_reports_position(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"M": 16,\n "n_samples": }')
    code, _, err = run(["generate", "--config", cfg, "--out", tmp_path / "d"], capsys)
    assert code == 1 and "line 2" in err


def test_wrong_type_rejected():
    with pytest.raises(cli.ConfigError, match="integer"):
        cli.resolve_config("generate", '{"M": 16.5, "n_samples": 3}')


def test_seed_flag_overrides_config():
    cfg = cli.resolve_config("generate", '{"M": 16, "n_samples": 3, "seed": 4}', seed=9)
    assert cfg["seed"] == 9


def test_profiles_fill_defaults():
    desk = cli.resolve_config("train", profile="desk")
    assert (desk["M"], desk["F"], desk["n_train"], desk["n_epochs"]) == (64, 32, 2000, 30)
    paper = cli.resolve_config("train", profile="paper")
    assert (paper["M"], paper["F"], paper["n_train"], paper["n_val"], paper["n_epochs"]) == (256, 64, 9000, 1000, 200)
    assert cli.resolve_config("train") == desk


def test_unsupported_schema_version():
    with pytest.raises(cli.ConfigError, match="schema_version"):
        cli.resolve_config("generate", '{"M": 4, "n_samples": 1, "schema_version": 2}')


def test_missing_config_file(tmp_path, capsys):
    code, _, err = run(["generate", "--config", tmp_path / "nope.json", "--out", tmp_path / "d"], capsys)
    assert code == 1 and "nope.json" in err


def test_bad_subcommand_exits_one(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 1


# ---------------------------------------------------------------------------
# generate


def test_generate_is_deterministic(tmp_path):
    cfg = write_json(tmp_path / "c.json", {"M": 16, "n_samples": 50, "seed": 3})
    assert run(["generate", "--config", cfg, "--out", tmp_path / "a"]) == 0
    assert run(["generate", "--config", cfg, "--out", tmp_path / "b"]) == 0
    assert sha(tmp_path / "a") == sha(tmp_path / "b")
    ds = read_dataset(tmp_path / "a")
    assert (ds.M, len(ds)) == (16, 50)
    assert np.isnan(ds.snr_db)


def test_generate_seed_changes_output(tmp_path):
    cfg = write_json(tmp_path / "c.json", {"M": 16, "n_samples": 10})
    run(["generate", "--config", cfg, "--out", tmp_path / "a", "--seed", 1])
    run(["generate", "--config", cfg, "--out", tmp_path / "b", "--seed", 2])
    assert sha(tmp_path / "a") != sha(tmp_path / "b")


def test_generate_fixed_and_noiseless(tmp_path):
    cfg = write_json(tmp_path / "c.json", {"M": 16, "n_samples": 10, "snr_db": None})
    run(["generate", "--config", cfg, "--out", tmp_path / "n"])
    ds = read_dataset(tmp_path / "n")
    np.testing.assert_array_equal(ds.h_ls, ds.h)
    cfg = write_json(tmp_path / "c.json", {"M": 16, "n_samples": 10, "snr_db": 5})
    run(["generate", "--config", cfg, "--out", tmp_path / "f"])
    assert read_dataset(tmp_path / "f").snr_db == 5.0


def test_manifest_config_roundtrip(tmp_path):
    cfg = write_json(tmp_path / "c.json", {"M": 16, "n_samples": 12, "L": 4, "L0": 2, "seed": 8})
    run(["generate", "--config", cfg, "--out", tmp_path / "a"])
    manifest = json.loads((tmp_path / "a.manifest.json").read_text())
    assert manifest["command"] == "generate" and manifest["seed"] == 8
    assert str(tmp_path / "a") in manifest["artifacts"]
    # the resolved config is itself a valid config producing the same file
    again = write_json(tmp_path / "again.json", manifest["config"])
    run(["generate", "--config", again, "--out", tmp_path / "b"])
    assert sha(tmp_path / "a") == sha(tmp_path / "b")
    assert json.loads((tmp_path / "b.manifest.json").read_text())["config_hash"] == manifest["config_hash"]


def test_generate_needs_out(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {"M": 16, "n_samples": 2})
    code, _, err = run(["generate", "--config", cfg], capsys)
    assert code == 1 and "--out" in err


def test_generate_rejects_bad_paths(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {"M": 16, "n_samples": 2, "L": 2, "L0": 3})
    code, _, _ = run(["generate", "--config", cfg, "--out", tmp_path / "d"], capsys)
    assert code == 1


# ---------------------------------------------------------------------------
# train


def test_train_writes_loadable_checkpoint_and_log(tmp_path):
    cfg = write_json(tmp_path / "t.json", TINY_TRAIN)
    out = tmp_path / "m.xlnw"
    assert run(["train", "--config", cfg, "--out", out, "--deterministic"]) == 0
    model = load_model(out)
    assert model.cfg.M == 16 and model.cfg.F == 8
    rows = list(csv.DictReader(open(tmp_path / "m.log.csv")))
    assert [r["epoch"] for r in rows] == ["1", "2"]
    assert all(r["wall_seconds"] == "" for r in rows)
    manifest = json.loads((tmp_path / "m.xlnw.manifest.json").read_text())
    assert manifest["best_epoch"] in (0, 1, 2)
    assert "uniform" in manifest["train_snr_policy"]


def test_train_deterministic_bytes(tmp_path):
    cfg = write_json(tmp_path / "t.json", TINY_TRAIN)
    for name in ("a", "b"):
        assert run(["train", "--config", cfg, "--out", tmp_path / f"{name}.xlnw", "--deterministic"]) == 0
    assert sha(tmp_path / "a.xlnw") == sha(tmp_path / "b.xlnw")
    assert sha(tmp_path / "a.log.csv") == sha(tmp_path / "b.log.csv")


def test_train_resume_continues_numbering(tmp_path):
    cfg = write_json(tmp_path / "t.json", TINY_TRAIN)
    out = tmp_path / "m.xlnw"
    run(["train", "--config", cfg, "--out", out, "--deterministic"])
    more = write_json(tmp_path / "t2.json", {**TINY_TRAIN, "n_epochs": 4})  # total, not additional
    assert run(["train", "--config", more, "--out", out, "--resume", "--deterministic"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "m.log.csv")))
    assert [r["epoch"] for r in rows] == ["1", "2", "3", "4"]


def test_train_resume_architecture_mismatch(tmp_path, capsys):
    cfg = write_json(tmp_path / "t.json", TINY_TRAIN)
    out = tmp_path / "m.xlnw"
    run(["train", "--config", cfg, "--out", out])
    other = write_json(tmp_path / "o.json", {**TINY_TRAIN, "F": 4})
    code, _, err = run(["train", "--config", other, "--out", out, "--resume"], capsys)
    assert code == 1 and "architecture" in err


def test_train_from_dataset_files(tmp_path):
    gen = write_json(tmp_path / "g.json", {"M": 16, "n_samples": 16})
    run(["generate", "--config", gen, "--out", tmp_path / "tr"])
    run(["generate", "--config", gen, "--out", tmp_path / "va", "--seed", 1])
    cfg = write_json(tmp_path / "t.json", {**TINY_TRAIN, "model": "xlcnet", "F": 4, "n_epochs": 1})
    assert run(["train", "--config", cfg, "--dataset", tmp_path / "tr", "--val", tmp_path / "va",
                "--out", tmp_path / "x.xlnw"]) == 0
    assert load_model(tmp_path / "x.xlnw").cfg.F == 4


def test_train_dataset_size_mismatch(tmp_path, capsys):
    gen = write_json(tmp_path / "g.json", {"M": 64, "n_samples": 4})
    run(["generate", "--config", gen, "--out", tmp_path / "tr"])
    cfg = write_json(tmp_path / "t.json", TINY_TRAIN)
    code, _, err = run(["train", "--config", cfg, "--dataset", tmp_path / "tr", "--out", tmp_path / "m"], capsys)
    assert code == 1 and "M=64" in err


def test_train_divergence_exits_two_with_partial_log(tmp_path, capsys):
    rng = np.random.default_rng(0)
    h = rng.normal(size=(16, 16)) + 1j * rng.normal(size=(16, 16))
    bad = h.copy()
    bad[5, 3] = np.nan
    write_dataset(tmp_path / "tr", Dataset(bad, h))
    write_dataset(tmp_path / "va", Dataset(h, h))
    cfg = write_json(tmp_path / "t.json", TINY_TRAIN)
    code, _, err = run(["train", "--config", cfg, "--dataset", tmp_path / "tr", "--val", tmp_path / "va",
                        "--out", tmp_path / "m.xlnw"], capsys)
    assert code == 2 and "diverged" in err
    assert (tmp_path / "m.log.csv").read_text().startswith("epoch,train_loss,val_nmse_db,wall_seconds")


def test_train_unknown_model(tmp_path, capsys):
    cfg = write_json(tmp_path / "t.json", {**TINY_TRAIN, "model": "resnet"})
    code, _, err = run(["train", "--config", cfg, "--out", tmp_path / "m"], capsys)
    assert code == 1 and "resnet" in err


# ---------------------------------------------------------------------------
# eval


def test_eval_ls_near_only_csv(tmp_path, capsys):
    cfg = write_json(tmp_path / "e.json", {"scenario": "near_only", "M": 16, "estimators": ["ls"], "n_test": 2000})
    code, out, _ = run(["eval", "--config", cfg], capsys)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert len(rows) == 7
    for r in rows:
        assert r["estimator"] == "ls"
        assert abs(10 * np.log10(float(r["nmse_ratio_of_sums"])) + float(r["snr_db"])) < 0.5


def test_eval_writes_file_and_manifest(tmp_path):
    cfg = write_json(tmp_path / "e.json", {"scenario": "hybrid_L0_sweep", "M": 16, "estimators": ["ls", "lmmse"],
                                          "n_test": 200, "n_cov": 500})
    assert run(["eval", "--config", cfg, "--out", tmp_path / "r.csv"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert len(rows) == 2 * 7
    manifest = json.loads((tmp_path / "r.csv.manifest.json").read_text())
    assert manifest["config_hash"] == rows[0]["config_hash"]


def test_eval_deterministic(tmp_path, capsys):
    cfg = write_json(tmp_path / "e.json", {"scenario": "far_only", "M": 16, "estimators": ["ls", "omp"],
                                          "n_test": 100, "snr_grid": [0, 10]})
    assert run(["eval", "--config", cfg], capsys)[1] == run(["eval", "--config", cfg], capsys)[1]


def test_eval_empty_estimators(tmp_path, capsys):
    cfg = write_json(tmp_path / "e.json", {"scenario": "near_only", "M": 16, "estimators": []})
    code, _, _ = run(["eval", "--config", cfg], capsys)
    assert code == 1


def test_eval_unknown_scenario(tmp_path, capsys):
    cfg = write_json(tmp_path / "e.json", {"scenario": "indoor", "M": 16, "estimators": ["ls"]})
    code, _, err = run(["eval", "--config", cfg], capsys)
    assert code == 1 and "indoor" in err


def test_eval_missing_checkpoint(tmp_path, capsys):
    cfg = write_json(tmp_path / "e.json", {"scenario": "near_only", "M": 16, "estimators": ["matcenet"]})
    code, _, err = run(["eval", "--config", cfg, "--checkpoint", f"matcenet={tmp_path / 'gone'}"], capsys)
    assert code == 1 and "checkpoint" in err


def test_eval_with_trained_network(tmp_path, capsys):
    tcfg = write_json(tmp_path / "t.json", TINY_TRAIN)
    run(["train", "--config", tcfg, "--out", tmp_path / "m.xlnw"])
    cfg = write_json(tmp_path / "e.json", {"scenario": "hybrid", "M": 16, "estimators": ["ls", "matcenet"],
                                          "n_test": 50, "snr_grid": [10]})
    code, out, _ = run(["eval", "--config", cfg, "--checkpoint", f"matcenet={tmp_path / 'm.xlnw'}"], capsys)
    assert code == 0
    assert {r["estimator"] for r in csv.DictReader(io.StringIO(out))} == {"ls", "matcenet"}


def test_eval_bad_checkpoint_flag(tmp_path, capsys):
    cfg = write_json(tmp_path / "e.json", {"scenario": "near_only", "M": 16, "estimators": ["ls"]})
    code, _, _ = run(["eval", "--config", cfg, "--checkpoint", "nonsense"], capsys)
    assert code == 1


# ---------------------------------------------------------------------------
# flops and verify


def test_flops_xlcnet_reference_count(capsys):
    code, out, err = run(["flops"], capsys)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    xl = sum(int(r["params"]) for r in rows if r["model"] == "xlcnet" and r["layer"] != "total")
    assert xl == next(int(r["params"]) for r in rows if r["model"] == "xlcnet" and r["layer"] == "total")
    assert abs(xl - 263_000) / 263_000 <= 0.03
    assert "note:" in err


def test_flops_desk_profile(capsys):
    code, out, _ = run(["flops", "--profile", "desk"], capsys)
    assert code == 0
    assert {r["model"] for r in csv.DictReader(io.StringIO(out))} == {"matcenet", "xlcnet"}


def test_verify_passes(capsys):
    code, out, _ = run(["verify", "--suite", "gradients", "--suite", "roundtrips", "--suite", "attention"], capsys)
    assert code == 0
    assert "FAIL" not in out


def test_verify_catches_corrupted_conv_backward(monkeypatch, capsys):
    real = Conv2d.backward

    def skewed(self, dout):
        return 1.01 * real(self, dout)

    monkeypatch.setattr(Conv2d, "backward", skewed)
    code, out, _ = run(["verify", "--suite", "gradients"], capsys)
    assert code == 2
    assert "FAIL  grad conv2d" in out


def test_verify_unknown_suite(capsys):
    code, _, _ = run(["verify", "--suite", "vibes"], capsys)
    assert code == 1
