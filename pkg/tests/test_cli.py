import json

import pytest

from tucl.cli import default_config, main, resolve_config, UsageError
from tucl.csvio import read_csv

SMOKE = {
    "train": {"steps": 3, "mc_samples": 2, "dur_warmup": 0.0},
    "model": {"widths": [4, 6], "token_width": 8, "heads": 2, "prompt_width": 4},
    "phantom": {"dims": [8, 8, 8], "center": [3.5, 3.5, 3.5], "radii": [3.0, 2.0, 1.2]},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "smoke.json"
    cfg.write_text(json.dumps(SMOKE))
    assert main(["gen", "--config", str(cfg), "--out", str(root / "data"), "--n", "4",
                 "--seed", "3"]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"),
                 "--out", str(root / "run"), "--seed", "3"]) == 0
    return root, cfg


def test_gen_labeled_count(tmp_path):
    assert main(["gen", "--out", str(tmp_path), "--n", "10", "--labeled-fraction", "0.3",
                 "--dims", "8", "8", "8"]) == 0
    manifest = json.loads((tmp_path / "dataset.json").read_text())
    assert sum(e["labeled"] for e in manifest["items"]) == 3
    assert (tmp_path / "resolved_config.json").exists()


def test_gen_reproducible(tmp_path):
    for d in ("a", "b"):
        assert main(["gen", "--out", str(tmp_path / d), "--n", "3", "--dims", "8", "8", "8",
                     "--seed", "9"]) == 0
    assert (tmp_path / "a" / "dataset.json").read_bytes() == (tmp_path / "b" / "dataset.json").read_bytes()
    assert (tmp_path / "a" / "case_001_vol.raw").read_bytes() == (tmp_path / "b" / "case_001_vol.raw").read_bytes()


def test_gen_zero_fraction_exit_2(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path), "--n", "4", "--labeled-fraction", "0"]) == 2
    assert "labeled_fraction" in capsys.readouterr().err


def test_gen_unwritable_exit_2(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen", "--out", str(blocker / "sub"), "--n", "1", "--dims", "8", "8", "8"]) == 2


def test_train_artifacts(workspace):
    root, _ = workspace
    run = root / "run"
    for name in ("checkpoint.json", "checkpoint.raw", "train_log.csv", "train_log_timing.csv",
                 "resolved_config.json"):
        assert (run / name).exists(), name
    echoed = json.loads((run / "resolved_config.json").read_text())
    assert echoed["seed"] == 3 and echoed["train"]["steps"] == 3


def test_train_rerun_identical_log(workspace, tmp_path):
    root, cfg = workspace
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"),
                 "--out", str(tmp_path), "--seed", "3"]) == 0
    assert (tmp_path / "train_log.csv").read_bytes() == (root / "run" / "train_log.csv").read_bytes()


def test_train_toggles_zero_columns(workspace, tmp_path):
    root, cfg = workspace
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(tmp_path),
                 "--no-tpa", "--no-dur"]) == 0
    rows = read_csv(tmp_path / "train_log.csv")
    assert all(float(r["L_TPA"]) == 0 and float(r["L_DUR"]) == 0 for r in rows)


def test_train_missing_data_exit_2(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2


def test_eval_with_and_without_drop(workspace, tmp_path):
    root, _ = workspace
    ckpt = str(root / "run" / "checkpoint")
    assert main(["eval", "--ckpt", ckpt, "--data", str(root / "data"), "--out", str(tmp_path / "a")]) == 0
    assert main(["eval", "--ckpt", ckpt, "--data", str(root / "data"), "--out", str(tmp_path / "b"),
                 "--drop", "T1ce"]) == 0
    a = read_csv(tmp_path / "a" / "eval_cases.csv")
    b = read_csv(tmp_path / "b" / "eval_cases.csv")
    assert [r["case"] for r in a] == [r["case"] for r in b]
    means = {r["region"]: float(r["dice_pct"]) for r in a if r["case"] == "MEAN"}
    assert means["Ave"] == pytest.approx((means["ET"] + means["WT"] + means["TC"]) / 3)
    assert (tmp_path / "a" / "eval_plot_data.csv").exists()
    assert main(["eval", "--ckpt", ckpt, "--data", str(root / "data"), "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "eval_cases.csv").read_bytes() == (tmp_path / "a" / "eval_cases.csv").read_bytes()


def test_eval_unknown_modality_exit_2(workspace, tmp_path):
    root, _ = workspace
    assert main(["eval", "--ckpt", str(root / "run" / "checkpoint"), "--data", str(root / "data"),
                 "--out", str(tmp_path), "--drop", "PD"]) == 2


def test_uncertainty_outputs(workspace, tmp_path, monkeypatch):
    root, cfg = workspace
    args = ["uncertainty", "--ckpt", str(root / "run" / "checkpoint"),
            "--case", str(root / "data" / "case_000_vol"), "--T", "3", "--seed", "4"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    monkeypatch.setenv("TUCL_THREADS", "3")
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "uncertainty.raw").read_bytes() == (tmp_path / "b" / "uncertainty.raw").read_bytes()
    (row,) = read_csv(tmp_path / "a" / "uncertainty_summary.csv")
    assert int(row["n_core"]) + int(row["n_boundary"]) == int(row["n_voxels"]) == 512
    assert float(row["max_U"]) > 0


def test_uncertainty_zero_dropout(workspace, tmp_path):
    root, _ = workspace
    cfg = tmp_path / "nodrop.json"
    cfg.write_text(json.dumps({**SMOKE, "train": {**SMOKE["train"], "dropout": 0.0}}))
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(tmp_path / "r")]) == 0
    assert main(["uncertainty", "--ckpt", str(tmp_path / "r" / "checkpoint"), "--case",
                 str(root / "data" / "case_000_vol"), "--T", "2", "--out", str(tmp_path / "u")]) == 0
    (row,) = read_csv(tmp_path / "u" / "uncertainty_summary.csv")
    assert float(row["max_U"]) == 0.0


def test_uncertainty_T_below_two(workspace, tmp_path):
    root, _ = workspace
    assert main(["uncertainty", "--ckpt", str(root / "run" / "checkpoint"), "--case",
                 str(root / "data" / "case_000_vol"), "--T", "1", "--out", str(tmp_path)]) == 2


def test_ablation_command(workspace, tmp_path):
    root, cfg = workspace
    assert main(["ablation", "--config", str(cfg), "--data", str(root / "data"),
                 "--eval-data", str(root / "data"), "--out", str(tmp_path), "--steps", "2",
                 "--drop", "T1ce"]) == 0
    rows = read_csv(tmp_path / "ablation.csv")
    assert [(r["config"], r["drop"]) for r in rows] == [
        ("Base", "none"), ("Base", "T1ce"), ("Base+TPA", "none"), ("Base+TPA", "T1ce"),
        ("Base+TPA+DUR", "none"), ("Base+TPA+DUR", "T1ce")]


def test_usage_errors():
    assert main([]) == 2
    assert main(["train"]) == 2


def test_config_layers(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"seed": 5, "train": {"steps": 7, "weights": {"beta": 3.0}}}))
    cfg = resolve_config(str(f), {"train": {"steps": 9}})
    assert cfg["seed"] == 5 and cfg["train"]["steps"] == 9
    assert cfg["train"]["weights"]["beta"] == 3.0
    assert cfg["train"]["weights"]["alpha"] == default_config()["train"]["weights"]["alpha"]
    f.write_text(json.dumps({"train": {"stepz": 1}}))
    with pytest.raises(UsageError):
        resolve_config(str(f), {})
