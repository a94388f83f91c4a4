"""Rigid 6-DoF head poses and trilinear resampling.

Convention ("ZYX-center"): rotate about the volume center, intrinsic Z then
Y then X (so ``R = Rz @ Ry @ Rx``), then translate, all in world/scanner mm.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume import Grid, Mask3D, Volume3D

CONVENTION = "ZYX-center"

# sampling coordinates this close to a lattice index are snapped onto it
_SNAP = 1e-9


@dataclass(frozen=True)
class RigidPose:
    t: tuple[float, float, float] = (0.0, 0.0, 0.0)  # mm
    r: tuple[float, float, float] = (0.0, 0.0, 0.0)  # degrees about x, y, z

    def __post_init__(self):
        t = tuple(float(v) for v in self.t)
        r = tuple(float(v) for v in self.r)
        if len(t) != 3 or len(r) != 3:
            raise ValueError("a rigid pose needs 3 translations and 3 rotations")
        if not np.all(np.isfinite(t + r)):
            raise ValueError("pose parameters must be finite")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "r", r)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls()

    @property
    def is_identity(self) -> bool:
        return self.t == (0.0, 0.0, 0.0) and self.r == (0.0, 0.0, 0.0)

    def to_dict(self) -> dict:
        tx, ty, tz = self.t
        rx, ry, rz = self.r
        return {"tx_mm": tx, "ty_mm": ty, "tz_mm": tz,
                "rx_deg": rx, "ry_deg": ry, "rz_deg": rz, "convention": CONVENTION}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidPose":
        conv = d.get("convention", CONVENTION)
        if conv != CONVENTION:
            raise ValueError(f"unsupported pose convention {conv!r}")
        return cls((d["tx_mm"], d["ty_mm"], d["tz_mm"]), (d["rx_deg"], d["ry_deg"], d["rz_deg"]))


def rotation_matrix(r_deg) -> np.ndarray:
    rx, ry, rz = np.deg2rad(np.asarray(r_deg, dtype=np.float64))
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def pose_to_affine(pose: RigidPose, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """4x4 world->world map ``x -> R (x - c) + c + t``."""
    R = rotation_matrix(pose.r)
    c = np.asarray(center, dtype=np.float64)
    A = np.eye(4)
    A[:3, :3] = R
    A[:3, 3] = c - R @ c + np.asarray(pose.t)
    return A


def affine_to_pose(A: np.ndarray, center=(0.0, 0.0, 0.0)) -> RigidPose:
    """Inverse of :func:`pose_to_affine` for proper rotations (|ry| < 90 deg)."""
    A = np.asarray(A, dtype=np.float64)
    R = A[:3, :3]
    ry = -np.arcsin(np.clip(R[2, 0], -1.0, 1.0))
    rx = np.arctan2(R[2, 1], R[2, 2])
    rz = np.arctan2(R[1, 0], R[0, 0])
    c = np.asarray(center, dtype=np.float64)
    t = A[:3, 3] - c + R @ c
    return RigidPose(tuple(t), tuple(np.rad2deg([rx, ry, rz])))


def compose(a: RigidPose, b: RigidPose, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Affine of applying ``a`` first, then ``b``."""
    return pose_to_affine(b, center) @ pose_to_affine(a, center)


def invert(a: RigidPose, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    A = pose_to_affine(a, center)
    R = A[:3, :3]
    inv = np.eye(4)
    inv[:3, :3] = R.T
    inv[:3, 3] = -R.T @ A[:3, 3]
    return inv


def trilinear_sample(data: np.ndarray, coords: np.ndarray, edge: str = "zero"):
    """Sample ``data`` at fractional voxel ``coords`` (shape (3, ...)).

    ``edge="zero"`` zero-fills samples outside [0, n-1] on any axis and
    reports them invalid; ``edge="clamp"`` clamps coordinates to the lattice.
    Returns ``(values, valid)``.
    """
    data = np.asarray(data, dtype=np.float64)
    coords = np.array(coords, dtype=np.float64)
    nearest = np.rint(coords)
    snap = np.abs(coords - nearest) < _SNAP
    coords[snap] = nearest[snap]
    shape = np.asarray(data.shape).reshape((3,) + (1,) * (coords.ndim - 1))
    valid = np.all((coords >= 0) & (coords <= shape - 1), axis=0)
    if edge == "clamp":
        coords = np.clip(coords, 0, shape - 1)
    elif edge != "zero":
        raise ValueError(f"unknown edge mode {edge!r}")
    lo = np.floor(coords).astype(np.int64)
    frac = coords - lo
    # keep the upper corner in range; frac == 0 there so its weight vanishes
    lo = np.minimum(lo, shape - 1)
    lo = np.maximum(lo, 0)
    hi = np.minimum(lo + 1, shape - 1)
    out = np.zeros(coords.shape[1:], dtype=np.float64)
    for cx in (0, 1):
        ix = hi[0] if cx else lo[0]
        wx = frac[0] if cx else 1.0 - frac[0]
        for cy in (0, 1):
            iy = hi[1] if cy else lo[1]
            wy = frac[1] if cy else 1.0 - frac[1]
            for cz in (0, 1):
                iz = hi[2] if cz else lo[2]
                wz = frac[2] if cz else 1.0 - frac[2]
                out += wx * wy * wz * data[ix, iy, iz]
    if edge == "zero":
        out[~valid] = 0.0
    return out, valid


def _index_map(src: Grid, out: Grid, world_map: np.ndarray) -> np.ndarray:
    """Compose out-index -> world -> (world_map) -> src-index as one 4x4."""
    to_world = np.eye(4)
    to_world[:3, :3] = np.diag(out.spacing)
    to_world[:3, 3] = out.origin
    to_index = np.eye(4)
    to_index[:3, :3] = np.diag(1.0 / np.asarray(src.spacing))
    to_index[:3, 3] = -np.asarray(src.origin) / np.asarray(src.spacing)
    return to_index @ world_map @ to_world


def resample(vol: Volume3D, out_grid: Grid, world_map: np.ndarray | None = None,
             edge: str = "zero") -> tuple[Volume3D, Mask3D]:
    """Pull ``vol`` onto ``out_grid``; output voxel x samples vol at ``world_map @ x``."""
    world_map = np.eye(4) if world_map is None else np.asarray(world_map, dtype=np.float64)
    M = _index_map(vol.grid, out_grid, world_map)
    ii, jj, kk = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in out_grid.dims), indexing="ij")
    idx = np.stack([ii, jj, kk])
    coords = np.einsum("ab,bijk->aijk", M[:3, :3], idx) + M[:3, 3].reshape(3, 1, 1, 1)
    values, valid = trilinear_sample(vol.data, coords, edge=edge)
    return Volume3D(values.astype(vol.data.dtype), out_grid, vol.units), Mask3D(valid, out_grid)


def apply_rigid(vol: Volume3D, pose: RigidPose, out_grid: Grid | None = None,
                center=None) -> tuple[Volume3D, Mask3D]:
    """Move ``vol`` by ``pose``; returns the moved volume and its validity mask.

    Each output voxel center x takes the trilinear value of ``vol`` at
    ``affine(pose)^-1 x``. Samples that fall outside the source lattice are 0.
    """
    out_grid = vol.grid if out_grid is None else out_grid
    center = vol.grid.center if center is None else center
    return resample(vol, out_grid, invert(pose, center))


def save_poses(poses, path) -> None:
    Path(path).write_text(json.dumps([p.to_dict() for p in poses], indent=1, sort_keys=True) + "\n")


def load_poses(path) -> list[RigidPose]:
    items = json.loads(Path(path).read_text())
    if isinstance(items, dict):
        items = [items]
    return [RigidPose.from_dict(d) for d in items]


def random_poses(rng: np.random.Generator, n: int, max_shift_mm: float = 10.0,
                 max_rot_deg: float = 10.0) -> list[RigidPose]:
    """Uniform draws in [-max, +max] per degree of freedom."""
    out = []
    for _ in range(n):
        t = rng.uniform(-max_shift_mm, max_shift_mm, 3)
        r = rng.uniform(-max_rot_deg, max_rot_deg, 3)
        out.append(RigidPose(tuple(t), tuple(r)))
    return out
