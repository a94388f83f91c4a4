"""Synthetic subjects: head positions with ground-truth and navigator field maps.

On disk every position lives in its own directory::

    subject_03/
      manifest.json
      pos_000/ anat.b0v field_gt.b0v mask.b0v nav_field.b0v pose.json
      pos_001/ ...
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .fieldmap import estimate_gre
from .motion import RigidPose, load_poses, random_poses, save_poses
from .nn.training import TrainingInstance, make_instance
from .synth import (EPI_ECHOES_MS, GRE_ECHOES_MS, FieldScene, PhantomSpec, emulate_navigator, make_phantom,
                    scene_at_pose, shimmed_scene, simulate_multiecho)
from .volume import Mask3D, Volume3D, read_mask, read_volume, write_mask, write_volume

POSITION_FILES = ("anat.b0v", "field_gt.b0v", "mask.b0v", "nav_field.b0v", "pose.json")


@dataclass(frozen=True)
class SimConfig:
    """How to turn a phantom into a set of measured head positions."""

    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    n_positions: int = 30
    max_shift_mm: float = 10.0
    max_rot_deg: float = 10.0
    b0_tesla: float = 7.0
    static_shim: bool = True
    gre_echoes_ms: tuple[float, ...] = GRE_ECHOES_MS
    gre_noise: float = 0.01
    nav_echoes_ms: tuple[float, ...] = EPI_ECHOES_MS
    nav_factor: int = 2
    # None: GRE noise averaged over the factor^3 voxels one navigator voxel covers
    nav_noise: float | None = None

    @property
    def navigator_noise(self) -> float:
        if self.nav_noise is not None:
            return self.nav_noise
        return self.gre_noise / float(self.nav_factor) ** 1.5


@dataclass(frozen=True)
class Position:
    index: int
    pose: RigidPose
    anat: Volume3D
    field_gt: Volume3D  # multi-echo GRE estimate, zero outside the tissue mask
    mask: Mask3D
    nav_field: Volume3D


@dataclass(frozen=True)
class Subject:
    seed: int
    positions: tuple[Position, ...]

    @property
    def initial(self) -> Position:
        return self.positions[0]


def _position_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index, 0xB0])


def subject_poses(seed: int, cfg: SimConfig) -> list[RigidPose]:
    """Identity first (the reference position), then uniform random poses."""
    rng = np.random.default_rng([seed, 0x905E])
    return [RigidPose()] + random_poses(rng, cfg.n_positions - 1, cfg.max_shift_mm, cfg.max_rot_deg)


def simulate_subject(seed: int, cfg: SimConfig = SimConfig(), poses: Sequence[RigidPose] | None = None) -> Subject:
    """Simulate every head position of one synthetic subject."""
    if cfg.n_positions < 1:
        raise ValueError("a subject needs at least one position")
    spec = PhantomSpec(**{**asdict(cfg.phantom), "seed": seed})
    phantom = make_phantom(spec)
    scene = FieldScene(b0_tesla=cfg.b0_tesla)
    if cfg.static_shim:
        scene = shimmed_scene(phantom, scene)
    poses = subject_poses(seed, cfg) if poses is None else list(poses)
    positions = []
    for index, pose in enumerate(poses):
        rng = _position_rng(seed, index)
        at = scene_at_pose(phantom, pose, scene)
        echoes = simulate_multiecho(at.field, at.anat, cfg.gre_echoes_ms, cfg.gre_noise, rng)
        gre, _ = estimate_gre(echoes)
        field_gt = at.field.with_data(np.where(at.mask.data, gre.field.data, 0.0))
        nav = emulate_navigator(at.field, at.anat, cfg.nav_factor, cfg.navigator_noise, cfg.nav_echoes_ms, rng)
        positions.append(Position(index, pose, at.anat, field_gt, at.mask, nav))
    return Subject(seed, tuple(positions))


def instances(subject: Subject, indices: Sequence[int] | None = None) -> list[TrainingInstance]:
    """(initial B0, initial anatomy, new anatomy) -> new B0 for the chosen positions."""
    init = subject.initial
    chosen = range(1, len(subject.positions)) if indices is None else indices
    out = []
    for i in chosen:
        p = subject.positions[i]
        out.append(make_instance(init.field_gt, init.anat, p.anat, p.field_gt, p.pose, p.mask))
    return out


def write_subject(subject: Subject, directory, extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for p in subject.positions:
        pdir = directory / f"pos_{p.index:03d}"
        pdir.mkdir(exist_ok=True)
        write_volume(p.anat, pdir / "anat.b0v")
        write_volume(p.field_gt, pdir / "field_gt.b0v")
        write_mask(p.mask, pdir / "mask.b0v")
        write_volume(p.nav_field, pdir / "nav_field.b0v")
        save_poses([p.pose], pdir / "pose.json")
    manifest = {
        "seed": subject.seed,
        "n_positions": len(subject.positions),
        "positions": [f"pos_{p.index:03d}" for p in subject.positions],
        "files": list(POSITION_FILES),
    }
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def read_subject(directory) -> Subject:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no subject manifest in {directory}")
    manifest = json.loads(manifest_path.read_text())
    positions = []
    for index, name in enumerate(manifest["positions"]):
        pdir = directory / name
        missing = [f for f in POSITION_FILES if not (pdir / f).exists()]
        if missing:
            raise FileNotFoundError(f"{pdir} is missing {', '.join(missing)}")
        positions.append(Position(
            index,
            load_poses(pdir / "pose.json")[0],
            read_volume(pdir / "anat.b0v"),
            read_volume(pdir / "field_gt.b0v"),
            read_mask(pdir / "mask.b0v"),
            read_volume(pdir / "nav_field.b0v"),
        ))
    return Subject(int(manifest["seed"]), tuple(positions))
