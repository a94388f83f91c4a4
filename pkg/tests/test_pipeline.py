import json

import numpy as np
import pytest

from b0motion.cli import EXIT_CONFIG, EXIT_PREREQ, main
from b0motion.evaluation import read_report
from b0motion.pipeline import DEFAULTS, ConfigError, LockError, Pipeline, normalize_config, validate_config
from b0motion.synth import simulate_multiecho
from b0motion.volume import Grid, Units, Volume3D, read_volume, write_volume

TINY = {
    "seed": 3,
    "poses": {"n_positions": 9},
    "subjects": {"train": 2, "test": 1},
    "network": {"base_channels": 2, "kernel": 3, "residual_b0": True},
    "train": {"lr": 1e-3, "epochs": 2, "batch_size": 4},
    "finetune": {"lr": 1e-4, "epochs": 2},
    "augmentation_range_ut": {"1": 20.0, "2": 20.0},
    "evaluation": {"finetune_positions": [1, 2, 3], "sweep_epochs": [0, 2], "sweep_volumes": [2, 3]},
}


def _write_config(tmp_path, outdir="run", **changes):
    cfg = json.loads(json.dumps(TINY))
    cfg["outdir"] = str(tmp_path / outdir)
    cfg.update(changes)
    path = tmp_path / f"{outdir}.json"
    path.write_text(json.dumps(cfg))
    return path


# ------------------------------------------------------------------ config

def test_minimal_config_gets_documented_defaults(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 5, "outdir": str(tmp_path / "o")}))
    cfg = validate_config(path)
    assert cfg.seed == 5
    assert cfg.data["poses"]["n_positions"] == 30
    assert cfg.data["subjects"] == {"train": 11, "test": 4}
    assert cfg.data["train"] == DEFAULTS["train"]
    assert cfg.train_hyper().lr == 1e-5 and cfg.finetune_hyper().lr == 1e-6
    assert cfg.eval_positions() == list(range(7, 30))


@pytest.mark.parametrize("raw, field", [
    ({"train": {"lr": -1e-3}}, "train.lr"),
    ({"finetune": {"batch_size": 0}}, "finetune.batch_size"),
    ({"bogus": 1}, "bogus"),
    ({"train": {"learning_rate": 1.0}}, "train.learning_rate"),
    ({"seed": "zero"}, "seed"),
    ({"train": {"augment": 1}}, "train.augment"),
    ({"grid": {"dims": [30, 32, 32]}}, "grid.dims"),
    ({"network": {"kernel": 4}}, "network"),
    ({"evaluation": {"eval_positions": [3, 10]}}, "evaluation.eval_positions"),
    ({"evaluation": {"sweep_volumes": [7]}}, "evaluation.sweep_volumes"),
    ({"evaluation": {"sweep_epochs": [-5]}}, "evaluation.sweep_epochs"),
    ({"poses": {"file": "/nonexistent/poses.json"}}, "poses.file"),
    ({"augmentation_range_ut": {"3": 1.0}}, "augmentation_range_ut"),
])
def test_config_errors_name_the_field(raw, field):
    with pytest.raises(ConfigError) as err:
        normalize_config(raw)
    assert err.value.field == field


def test_sweep_epoch_zero_accepted():
    cfg = normalize_config({"evaluation": {"sweep_epochs": [0, 5, 50]}})
    assert cfg.data["evaluation"]["sweep_epochs"] == [0, 5, 50]


def test_config_hash_ignores_outdir_only():
    a = normalize_config({"outdir": "x"})
    assert a.hash() == normalize_config({"outdir": "y"}).hash()
    assert a.hash() != normalize_config({"seed": 1}).hash()


# --------------------------------------------------------------------- CLI

def test_bad_config_exit_code(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train": {"lr": -1.0}}))
    assert main(["train", "--config", str(path)]) == EXIT_CONFIG
    assert "train.lr" in capsys.readouterr().err
    path.write_text("{not json")
    assert main(["train", "--config", str(path)]) == EXIT_CONFIG


def test_evaluate_before_train_is_a_prerequisite_error(tmp_path, capsys):
    path = _write_config(tmp_path)
    assert main(["evaluate", "--config", str(path)]) == EXIT_PREREQ
    assert "run 'simulate' first" in capsys.readouterr().err
    assert main(["simulate-dataset", "--config", str(path)]) == 0
    assert main(["evaluate", "--config", str(path)]) == EXIT_PREREQ
    assert "run 'train' first" in capsys.readouterr().err


def test_simulate_writes_one_directory_per_pose(tmp_path):
    path = _write_config(tmp_path, poses={"n_positions": 30}, subjects={"train": 1, "test": 1},
                         evaluation={"finetune_positions": [1, 2, 3], "sweep_volumes": [3]})
    assert main(["simulate-dataset", "--config", str(path)]) == 0
    sub = tmp_path / "run" / "dataset" / "train" / "subject_3001"
    manifest = json.loads((sub / "manifest.json").read_text())
    assert manifest["n_positions"] == 30 and len(manifest["positions"]) == 30
    assert len([d for d in sub.iterdir() if d.is_dir()]) == 30
    stage = json.loads((tmp_path / "run" / "dataset" / "stage.json").read_text())
    assert stage["seed"] == 3 and len(stage["config_hash"]) == 64 and stage["code_version"]


def test_changed_config_refuses_overwrite_without_force(tmp_path):
    path = _write_config(tmp_path)
    assert main(["simulate-dataset", "--config", str(path)]) == 0
    assert main(["simulate-dataset", "--config", str(path)]) == 0  # same config: idempotent
    assert main(["simulate-dataset", "--config", str(path), "--seed", "4"]) == EXIT_CONFIG
    assert main(["simulate-dataset", "--config", str(path), "--seed", "4", "--force"]) == 0
    # downstream stages see the seed-3 config as stale
    assert main(["train", "--config", str(path)]) == EXIT_PREREQ


def test_lock_blocks_a_second_pipeline(tmp_path):
    cfg = validate_config(_write_config(tmp_path))
    first = Pipeline(cfg)
    with first.locked():
        with pytest.raises(LockError):
            with Pipeline(cfg).locked():
                pass


def test_estimate_fieldmap_subcommand(tmp_path):
    g = Grid((8, 8, 8))
    truth = Volume3D(np.linspace(-120, 120, 512).reshape(g.dims), g, Units.HZ)
    echoes = simulate_multiecho(truth, Volume3D(np.ones(g.dims), g))
    write_volume(echoes, tmp_path / "echoes.b0v")
    assert main(["estimate-fieldmap", str(tmp_path / "echoes.b0v"), str(tmp_path / "f.b0v")]) == 0
    np.testing.assert_allclose(read_volume(tmp_path / "f.b0v").data, truth.data, atol=1e-3)
    assert main(["estimate-fieldmap", str(tmp_path / "f.b0v"), str(tmp_path / "g.b0v")]) == EXIT_CONFIG
    assert main(["estimate-fieldmap", str(tmp_path / "none.b0v"), str(tmp_path / "g.b0v")]) == EXIT_PREREQ


def test_full_pipeline_artifacts(tmp_path):
    path = _write_config(tmp_path)
    assert main(["all", "--config", str(path), "--deterministic"]) == 0
    run = tmp_path / "run"
    report = read_report(run / "evaluation" / "report.json")
    cfg = validate_config(path)
    assert len(report.results) == 4 * len(cfg.eval_positions())
    assert report.sweeps["epochs"] and report.sweeps["volumes"]
    assert (run / "predictions" / "subject_3101" / "PRFT_pos008.b0v").exists()
    calib = json.loads((run / "calibration" / "calibration.json").read_text())
    assert all(abs(t["coefficient"] - 1) < 0.01 for t in calib["terms"].values())
    for stage in ("dataset", "calibration", "model", "finetuned", "predictions", "sweep", "evaluation"):
        assert json.loads((run / stage / "stage.json").read_text())["config_hash"] == cfg.hash()
