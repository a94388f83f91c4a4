"""Config-driven pipeline: simulate, calibrate, train, fine-tune, predict, sweep, evaluate.

Artifacts of one run live under ``outdir``::

    config.json              normalized config
    dataset/train/subject_0001/ ...   dataset/test/subject_0101/ ...
    calibration/calibration.json
    model/                   checkpoint + losses.csv
    finetuned/subject_0101/  checkpoint per test subject
    predictions/subject_0101/PR0_pos007.b0v ...
    sweep/sweeps.json, fig4_epochs.csv, fig5_volumes.csv
    evaluation/report.json, fig3_aggregates.csv, ..., residuals/

Every stage directory carries ``stage.json`` with the config hash, seed and
code version. A stage refuses to overwrite output made under a different
config hash unless forced.
"""
from __future__ import annotations

import copy
import fcntl
import hashlib
import json
import logging
import shutil
from contextlib import contextmanager
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path

import numpy as np
from scipy import fft as sfft

from . import evaluation
from .dataset import SimConfig, instances, read_subject, simulate_subject, write_subject
from .motion import load_poses
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.training import TrainHyper, finetune, predict_batch, train
from .nn.unet import UNetConfig, build_unet
from .shim import TERMS, fit_shim_calibration, sh_basis
from .synth import FieldScene, PhantomSpec, make_phantom, scene_at_pose, shimmed_scene
from .volume import write_volume

log = logging.getLogger(__name__)

STAGES = ("simulate", "calibrate", "train", "finetune", "predict", "sweep", "evaluate")
PREREQUISITES = {
    "simulate": (),
    "calibrate": (),
    "train": ("simulate",),
    "finetune": ("simulate", "train"),
    "predict": ("simulate", "train", "finetune"),
    "sweep": ("simulate", "train"),
    "evaluate": ("simulate", "train", "finetune"),
}
STAGE_DIRS = {
    "simulate": "dataset",
    "calibrate": "calibration",
    "train": "model",
    "finetune": "finetuned",
    "predict": "predictions",
    "sweep": "sweep",
    "evaluate": "evaluation",
}
STAGE_FILE = "stage.json"

# None marks a nullable field; NULLABLE gives its type
DEFAULTS = {
    "seed": 0,
    "outdir": "run",
    "grid": {"dims": [32, 32, 32], "spacing_mm": [7.0, 7.0, 7.0]},
    "phantom": {
        "head_semi_axes_mm": [66.0, 76.0, 70.0],
        "brain_scale": 0.82,
        "chi_tissue_ppm": -9.4,
        "chi_scale": 0.05,
        "n_cavities": 3,
        "cavity_radius_mm": 14.0,
        "n_structures": 6,
        "jitter": 0.05,
        "edge_mm": 2.0,
    },
    "acquisition": {
        "b0_tesla": 7.0,
        "static_shim": True,
        "gre_echoes_ms": [3.0, 6.0, 9.0, 12.0, 15.0],
        "gre_noise": 0.01,
        "nav_echoes_ms": [3.8, 4.8],
        "nav_factor": 2,
        "nav_noise": None,
    },
    "poses": {"n_positions": 30, "max_shift_mm": 10.0, "max_rot_deg": 10.0, "file": None},
    "subjects": {"train": 11, "test": 4},
    "network": {"levels": 4, "kernel": 5, "base_channels": 8, "leaky_slope": 0.01, "residual_b0": False},
    "train": {"lr": 1e-5, "weight_decay": 1e-7, "epochs": 2000, "batch_size": 10, "augment": True,
              "masked_loss": False},
    "finetune": {"lr": 1e-6, "weight_decay": 1e-7, "epochs": 50, "batch_size": 10, "augment": True,
                 "masked_loss": False},
    "augmentation_range_ut": {"1": 100.0, "2": 100.0},
    "calibration": {"amplitudes_ut": [0.0, -100.0, -50.0, 50.0, 100.0], "noise_hz": 1.0},
    "evaluation": {
        "finetune_positions": [1, 2, 3, 4, 5, 6],
        "eval_positions": None,
        "sweep_epochs": [5, 10, 20, 35, 50, 75, 100, 150, 200],
        "sweep_volumes": [3, 4, 5, 6],
    },
}
NULLABLE = {
    "acquisition.nav_noise": float,
    "poses.file": str,
    "evaluation.eval_positions": list,
}


class ConfigError(ValueError):
    """Schema or value violation; ``field`` is the dotted config path."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"config field '{field}': {message}")


class PrerequisiteError(RuntimeError):
    def __init__(self, stage: str, missing: str, reason: str = "has not been run"):
        self.stage = stage
        self.missing = missing
        super().__init__(f"stage '{stage}' needs '{missing}' output, which {reason}; run '{missing}' first")


class OverwriteError(RuntimeError):
    pass


class LockError(RuntimeError):
    pass


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


# ------------------------------------------------------------------ config

def _check_type(path: str, value, default):
    if default is None:
        kind = NULLABLE[path]
        if value is None:
            return None
        if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, kind) and not isinstance(value, bool):
            return value
        raise ConfigError(path, f"expected {kind.__name__} or null, got {type(value).__name__}")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not np.isfinite(value):
            raise ConfigError(path, f"expected a finite number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or not value and default:
            raise ConfigError(path, f"expected a non-empty list, got {value!r}")
        item = default[0]
        return [_check_type(f"{path}[{i}]", v, item) for i, v in enumerate(value)]
    raise AssertionError(path)


def _merge(defaults: dict, given: dict, prefix: str = "") -> dict:
    if not isinstance(given, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", "expected an object")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(prefix + unknown[0], "unknown key")
    out = {}
    for key, default in defaults.items():
        path = prefix + key
        if isinstance(default, dict) and key != "augmentation_range_ut":
            out[key] = _merge(default, given.get(key, {}), path + ".")
        elif key == "augmentation_range_ut":
            value = given.get(key, default)
            if not isinstance(value, dict) or set(value) - {"1", "2"}:
                raise ConfigError(path, "expected an object with keys \"1\" and/or \"2\"")
            out[key] = {k: _check_type(f"{path}.{k}", value.get(k, default[k]), 1.0) for k in ("1", "2")}
        else:
            out[key] = _check_type(path, given.get(key, default), default)
    return out


def _hyper(section: dict, aug: dict, seed: int, path: str) -> TrainHyper:
    try:
        return TrainHyper(lr=section["lr"], weight_decay=section["weight_decay"], epochs=section["epochs"],
                          batch_size=section["batch_size"], augment=section["augment"],
                          augment_range_ut={int(k): v for k, v in aug.items()}, masked_loss=section["masked_loss"],
                          seed=seed)
    except ValueError as exc:
        key = "lr" if "learning" in str(exc) else "weight_decay" if "decay" in str(exc) else \
            "epochs" if "epochs" in str(exc) else "batch_size"
        raise ConfigError(f"{path}.{key}", str(exc)) from None


@dataclass(frozen=True)
class RunConfig:
    """Validated, normalized run configuration (a plain nested dict underneath)."""

    data: dict

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def outdir(self) -> Path:
        return Path(self.data["outdir"])

    def hash(self) -> str:
        """sha256 over everything except the output directory."""
        body = {k: v for k, v in self.data.items() if k != "outdir"}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()

    def phantom_spec(self, seed: int = 0) -> PhantomSpec:
        p = self.data["phantom"]
        g = self.data["grid"]
        return PhantomSpec(dims=tuple(g["dims"]), spacing_mm=tuple(g["spacing_mm"]),
                           head_semi_axes_mm=tuple(p["head_semi_axes_mm"]), brain_scale=p["brain_scale"],
                           chi_tissue_ppm=p["chi_tissue_ppm"], chi_scale=p["chi_scale"], n_cavities=p["n_cavities"],
                           cavity_radius_mm=p["cavity_radius_mm"], n_structures=p["n_structures"],
                           jitter=p["jitter"], edge_mm=p["edge_mm"], seed=seed)

    def sim_config(self) -> SimConfig:
        a = self.data["acquisition"]
        ps = self.data["poses"]
        n = ps["n_positions"] if ps["file"] is None else len(self.pose_list())
        return SimConfig(phantom=self.phantom_spec(), n_positions=n, max_shift_mm=ps["max_shift_mm"],
                         max_rot_deg=ps["max_rot_deg"], b0_tesla=a["b0_tesla"], static_shim=a["static_shim"],
                         gre_echoes_ms=tuple(a["gre_echoes_ms"]), gre_noise=a["gre_noise"],
                         nav_echoes_ms=tuple(a["nav_echoes_ms"]), nav_factor=a["nav_factor"],
                         nav_noise=a["nav_noise"])

    def pose_list(self):
        f = self.data["poses"]["file"]
        return None if f is None else load_poses(f)

    def unet_config(self) -> UNetConfig:
        return UNetConfig(**self.data["network"])

    def train_hyper(self) -> TrainHyper:
        return _hyper(self.data["train"], self.data["augmentation_range_ut"], self.seed, "train")

    def finetune_hyper(self) -> TrainHyper:
        return _hyper(self.data["finetune"], self.data["augmentation_range_ut"], self.seed + 1, "finetune")

    def train_seeds(self) -> list[int]:
        return [1000 * self.seed + i for i in range(1, self.data["subjects"]["train"] + 1)]

    def test_seeds(self) -> list[int]:
        return [1000 * self.seed + 100 + i for i in range(1, self.data["subjects"]["test"] + 1)]

    def n_positions(self) -> int:
        return self.sim_config().n_positions

    def finetune_positions(self) -> list[int]:
        return list(self.data["evaluation"]["finetune_positions"])

    def eval_positions(self) -> list[int]:
        e = self.data["evaluation"]
        if e["eval_positions"] is not None:
            return list(e["eval_positions"])
        ft = set(e["finetune_positions"])
        return [i for i in range(1, self.n_positions()) if i not in ft]


def normalize_config(raw: dict, overrides: dict | None = None) -> RunConfig:
    """Fill defaults, check types and values; raises ConfigError naming the field."""
    raw = copy.deepcopy(raw)
    for k, v in (overrides or {}).items():
        raw[k] = v
    data = _merge(DEFAULTS, raw)
    cfg = RunConfig(data)
    g = data["grid"]
    if len(g["dims"]) != 3 or min(g["dims"]) < 32:
        raise ConfigError("grid.dims", "expected three integers >= 32 (the phantom needs a 32^3 grid)")
    if len(g["spacing_mm"]) != 3 or min(g["spacing_mm"]) <= 0:
        raise ConfigError("grid.spacing_mm", "expected three positive spacings")
    if data["phantom"]["chi_scale"] < 0:
        raise ConfigError("phantom.chi_scale", "must be >= 0")
    a = data["acquisition"]
    if a["b0_tesla"] <= 0:
        raise ConfigError("acquisition.b0_tesla", "must be positive")
    if len(a["gre_echoes_ms"]) < 2 or min(a["gre_echoes_ms"]) <= 0:
        raise ConfigError("acquisition.gre_echoes_ms", "need at least two positive echo times")
    if len(a["nav_echoes_ms"]) != 2 or min(a["nav_echoes_ms"]) <= 0:
        raise ConfigError("acquisition.nav_echoes_ms", "need exactly two positive echo times")
    if a["gre_noise"] < 0 or (a["nav_noise"] is not None and a["nav_noise"] < 0):
        raise ConfigError("acquisition.gre_noise", "noise levels must be >= 0")
    if a["nav_factor"] < 1 or any(d % a["nav_factor"] for d in g["dims"]):
        raise ConfigError("acquisition.nav_factor", "must be positive and divide the grid dims")
    ps = data["poses"]
    if ps["file"] is not None and not Path(ps["file"]).exists():
        raise ConfigError("poses.file", f"{ps['file']} does not exist")
    if ps["n_positions"] < 2:
        raise ConfigError("poses.n_positions", "need the reference position plus at least one more")
    if ps["max_shift_mm"] < 0 or ps["max_rot_deg"] < 0:
        raise ConfigError("poses.max_shift_mm", "motion ranges must be >= 0")
    s = data["subjects"]
    if not 1 <= s["train"] <= 99:
        raise ConfigError("subjects.train", "must be in 1..99")
    if not 1 <= s["test"] <= 99:
        raise ConfigError("subjects.test", "must be in 1..99")
    try:
        unet = cfg.unet_config()
    except ValueError as exc:
        raise ConfigError("network", str(exc)) from None
    if any(d % unet.divisor for d in g["dims"]):
        raise ConfigError("grid.dims", f"must be divisible by {unet.divisor} for a {unet.levels}-level U-net")
    cfg.train_hyper()
    cfg.finetune_hyper()
    for k, v in data["augmentation_range_ut"].items():
        if v < 0:
            raise ConfigError(f"augmentation_range_ut.{k}", "must be >= 0")
    c = data["calibration"]
    if len(set(c["amplitudes_ut"])) < 2:
        raise ConfigError("calibration.amplitudes_ut", "need at least two distinct amplitudes")
    if c["noise_hz"] < 0:
        raise ConfigError("calibration.noise_hz", "must be >= 0")
    e = data["evaluation"]
    n = cfg.n_positions()
    ft = e["finetune_positions"]
    if any(not 0 < i < n for i in ft) or len(set(ft)) != len(ft):
        raise ConfigError("evaluation.finetune_positions", f"must be distinct indices in 1..{n - 1}")
    ev = cfg.eval_positions()
    if not ev or any(not 0 < i < n for i in ev):
        raise ConfigError("evaluation.eval_positions", f"need at least one index in 1..{n - 1}")
    if set(ev) & set(ft):
        raise ConfigError("evaluation.eval_positions", "overlaps the fine-tuning positions")
    if any(v < 0 for v in e["sweep_epochs"]):
        raise ConfigError("evaluation.sweep_epochs", "epochs must be >= 0 (0 is the PR0 row)")
    if any(not 1 <= v <= len(ft) for v in e["sweep_volumes"]):
        raise ConfigError("evaluation.sweep_volumes", f"volume counts must be in 1..{len(ft)}")
    return cfg


def validate_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("<file>", f"{path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"not valid JSON: {exc}") from None
    return normalize_config(raw, overrides)


# ------------------------------------------------------------- bookkeeping

@dataclass
class Pipeline:
    config: RunConfig
    force: bool = False
    deterministic: bool = False

    @property
    def root(self) -> Path:
        return self.config.outdir

    def stage_dir(self, stage: str) -> Path:
        return self.root / STAGE_DIRS[stage]

    def _manifest(self, stage: str) -> dict:
        return {
            "stage": stage,
            "config_hash": self.config.hash(),
            "seed": self.config.seed,
            "code_version": code_version(),
            "deterministic": self.deterministic,
            "inputs": {p: self.config.hash() for p in PREREQUISITES[stage]},
        }

    def _require(self, stage: str) -> None:
        for pre in PREREQUISITES[stage]:
            f = self.stage_dir(pre) / STAGE_FILE
            if not f.exists():
                raise PrerequisiteError(stage, pre)
            if json.loads(f.read_text()).get("config_hash") != self.config.hash():
                raise PrerequisiteError(stage, pre, "was produced under a different config")

    def _prepare(self, stage: str) -> Path:
        d = self.stage_dir(stage)
        f = d / STAGE_FILE
        if d.exists():
            old = json.loads(f.read_text()).get("config_hash") if f.exists() else None
            if old != self.config.hash() and not self.force:
                raise OverwriteError(f"{d} holds output of a different config; pass --force to replace it")
            shutil.rmtree(d)
        d.mkdir(parents=True)
        return d

    def _finish(self, stage: str) -> None:
        text = json.dumps(self._manifest(stage), indent=1, sort_keys=True) + "\n"
        (self.stage_dir(stage) / STAGE_FILE).write_text(text)

    @contextmanager
    def locked(self):
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.root / ".lock", "w") as fh:
            try:
                fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
            except BlockingIOError:
                raise LockError(f"another pipeline is running in {self.root}") from None
            try:
                yield
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def run(self, stage: str) -> None:
        stages = list(STAGES) if stage == "all" else [stage]
        with self.locked():
            (self.root / "config.json").write_text(json.dumps(self.config.data, indent=1, sort_keys=True) + "\n")
            # one FFT thread gives a fixed reduction order
            with sfft.set_workers(1 if self.deterministic else -1):
                for s in stages:
                    self._require(s)
                    log.info("stage %s", s)
                    self._prepare(s)
                    getattr(self, f"_run_{s}")()
                    self._finish(s)

    # -------------------------------------------------------------- loaders

    def _subject_dir(self, split: str, seed: int) -> Path:
        return self.stage_dir("simulate") / split / f"subject_{seed:04d}"

    def _subjects(self, split: str):
        seeds = self.config.train_seeds() if split == "train" else self.config.test_seeds()
        return [read_subject(self._subject_dir(split, s)) for s in seeds]

    def _model(self):
        return load_checkpoint(self.stage_dir("train"))

    def _finetuned(self) -> dict:
        return {s: load_checkpoint(self.stage_dir("finetune") / f"subject_{s:04d}") for s in self.config.test_seeds()}

    # --------------------------------------------------------------- stages

    def _run_simulate(self) -> None:
        cfg = self.config.sim_config()
        poses = self.config.pose_list()
        entries = []
        for split, seeds in (("train", self.config.train_seeds()), ("test", self.config.test_seeds())):
            for seed in seeds:
                subject = simulate_subject(seed, cfg, poses)
                write_subject(subject, self._subject_dir(split, seed), {"split": split})
                entries.append({"split": split, "seed": seed, "dir": f"{split}/subject_{seed:04d}"})
        (self.stage_dir("simulate") / "subjects.json").write_text(json.dumps(entries, indent=1) + "\n")

    def _run_calibrate(self) -> None:
        """Calibration maps: phantom field plus each shim term at each amplitude, with Gaussian noise."""
        c = self.config.data["calibration"]
        spec = self.config.phantom_spec(self.config.train_seeds()[0])
        phantom = make_phantom(spec)
        scene = FieldScene(b0_tesla=self.config.data["acquisition"]["b0_tesla"])
        if self.config.data["acquisition"]["static_shim"]:
            scene = shimmed_scene(phantom, scene)
        at = scene_at_pose(phantom, scene.pose, scene)
        basis = sh_basis(at.field.grid)
        rng = np.random.default_rng([self.config.seed, 0xCA1])
        out = {"amplitudes_ut": c["amplitudes_ut"], "noise_hz": c["noise_hz"], "terms": {}}
        for term in TERMS:
            unit = basis.term(term).data
            maps = [at.field.with_data(at.field.data + a * unit + rng.normal(0, c["noise_hz"], unit.shape))
                    for a in c["amplitudes_ut"]]
            coef, rms = fit_shim_calibration(maps, c["amplitudes_ut"], term, basis, at.mask)
            out["terms"][term] = {"coefficient": coef, "residual_rms_hz": rms}
        path = self.stage_dir("calibrate") / "calibration.json"
        path.write_text(json.dumps(out, indent=1, sort_keys=True) + "\n")

    def _run_train(self) -> None:
        subjects = self._subjects("train")
        data = [inst for s in subjects for inst in instances(s)]
        params = build_unet(self.config.unet_config(), seed=self.config.seed)
        params.metadata["grid_dims"] = list(data[0].grid.dims)
        result = train(data, params, self.config.train_hyper(),
                       on_epoch_end=lambda e, _p, loss: log.info("epoch %d loss %.6g", e, loss))
        save_checkpoint(params, self.stage_dir("train"), extra={"n_instances": len(data)})
        lines = ["epoch,loss"] + [f"{i + 1},{v!r}" for i, v in enumerate(result.losses)]
        (self.stage_dir("train") / "losses.csv").write_text("\n".join(lines) + "\n")

    def _run_finetune(self) -> None:
        params = self._model()
        idx = self.config.finetune_positions()
        for s in self._subjects("test"):
            tuned = finetune(params, instances(s, idx), self.config.finetune_hyper()).params
            save_checkpoint(tuned, self.stage_dir("finetune") / f"subject_{s.seed:04d}",
                            extra={"finetune_positions": idx})

    def _run_predict(self) -> None:
        params = self._model()
        tuned = self._finetuned()
        idx = self.config.eval_positions()
        for s in self._subjects("test"):
            d = self.stage_dir("predict") / f"subject_{s.seed:04d}"
            d.mkdir()
            x = np.stack([inst.inputs for inst in instances(s, idx)])
            for name, p in (("PR0", params), ("PRFT", tuned[s.seed])):
                for i, pred in zip(idx, predict_batch(p, x)):
                    write_volume(s.positions[i].field_gt.with_data(pred), d / f"{name}_pos{i:03d}.b0v")

    def _run_sweep(self) -> None:
        e = self.config.data["evaluation"]
        tables = evaluation.sweep_finetune(self._subjects("test"), self._model(), e["sweep_epochs"],
                                           e["sweep_volumes"], self.config.finetune_positions(),
                                           self.config.eval_positions(), self.config.finetune_hyper())
        d = self.stage_dir("sweep")
        (d / "sweeps.json").write_text(json.dumps(tables, indent=1, sort_keys=True) + "\n")
        evaluation.write_sweep_tables(tables, d)

    def _run_evaluate(self) -> None:
        d = self.stage_dir("evaluate")
        report = evaluation.compare_approaches(self._subjects("test"), self._model(), self._finetuned(),
                                               self.config.eval_positions(), residual_dir=d / "residuals")
        sweep = self.stage_dir("sweep") / STAGE_FILE
        if sweep.exists() and json.loads(sweep.read_text()).get("config_hash") == self.config.hash():
            report.sweeps = json.loads((self.stage_dir("sweep") / "sweeps.json").read_text())
        evaluation.write_report(report, d)
