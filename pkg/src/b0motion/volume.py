"""Dense 3D volumes, masks and the B0V container format.

Voxel data is indexed ``data[i, j, k]`` with ``i`` along x. On disk the
payload is x-fastest (Fortran order), little-endian float32.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = "B0V1"

__all__ = [
    "Units",
    "Grid",
    "Volume3D",
    "ComplexVolume",
    "Mask3D",
    "VolumeFormatError",
    "VolumeIntegrityError",
    "write_volume",
    "read_volume",
    "write_mask",
    "read_mask",
    "block_downsample",
    "nearest_upsample",
]


class Units(str, Enum):
    HZ = "Hz"
    PPM = "ppm"
    RAD = "rad"
    DIMENSIONLESS = "dimensionless"


class VolumeFormatError(ValueError):
    """Malformed B0V header. ``field`` names the offending header key."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


class VolumeIntegrityError(ValueError):
    """Payload does not agree with the header."""


def _triple(values, name, cast=float) -> tuple:
    vals = tuple(cast(v) for v in values)
    if len(vals) != 3:
        raise ValueError(f"{name} must have 3 entries, got {len(vals)}")
    return vals


@dataclass(frozen=True)
class Grid:
    """Sampling lattice: world(i, j, k) = origin + (i*sx, j*sy, k*sz)."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = _triple(self.dims, "dims", int)
        if any(d <= 0 for d in dims):
            raise ValueError(f"grid dims must be positive, got {dims}")
        spacing = _triple(self.spacing, "spacing")
        if any(not (s > 0 and np.isfinite(s)) for s in spacing):
            raise ValueError(f"grid spacing must be positive, got {spacing}")
        origin = _triple(self.origin, "origin")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @classmethod
    def centered(cls, dims: Sequence[int], spacing: Sequence[float]) -> "Grid":
        """Grid whose geometric center sits at world (0, 0, 0)."""
        dims = _triple(dims, "dims", int)
        spacing = _triple(spacing, "spacing")
        origin = tuple(-(n - 1) / 2.0 * s for n, s in zip(dims, spacing))
        return cls(dims, spacing, origin)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def center(self) -> np.ndarray:
        """World coordinate of the geometric center of the lattice."""
        return np.asarray(self.origin) + (np.asarray(self.dims) - 1) / 2.0 * np.asarray(self.spacing)

    @property
    def fov(self) -> np.ndarray:
        return np.asarray(self.dims) * np.asarray(self.spacing)

    def voxel_to_world(self, ijk) -> np.ndarray:
        ijk = np.asarray(ijk, dtype=np.float64)
        return np.asarray(self.origin) + ijk * np.asarray(self.spacing)

    def world_to_voxel(self, xyz) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64)
        return (xyz - np.asarray(self.origin)) / np.asarray(self.spacing)

    def coordinates(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Open-mesh world coordinates (x[:,None,None], y[None,:,None], z[None,None,:])."""
        axes = [o + s * np.arange(n) for n, s, o in zip(self.dims, self.spacing, self.origin)]
        return np.ix_(*axes)

    def same_as(self, other: "Grid", atol: float = 1e-9) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=atol)
            and np.allclose(self.origin, other.origin, rtol=0, atol=atol)
        )


@dataclass(frozen=True)
class Volume3D:
    """Real scalar volume with geometry and a units tag."""

    data: np.ndarray
    grid: Grid
    units: Units = Units.DIMENSIONLESS

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        if tuple(data.shape) != self.grid.dims:
            raise VolumeIntegrityError(f"data shape {data.shape} does not match grid dims {self.grid.dims}")
        if np.iscomplexobj(data):
            raise TypeError("Volume3D holds real data; use ComplexVolume")
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise ValueError("volume data contains NaN or Inf")
        data = data.view()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "units", Units(self.units))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.grid.dims

    def with_data(self, data: np.ndarray, units: Units | None = None) -> "Volume3D":
        return Volume3D(data, self.grid, self.units if units is None else units)

    def require_units(self, *allowed: Units) -> None:
        if self.units not in allowed:
            names = ", ".join(u.value for u in allowed)
            raise ValueError(f"expected a volume in {names}, got {self.units.value}")


@dataclass(frozen=True)
class ComplexVolume:
    """Multi-echo complex signal: ``data[e, i, j, k]`` for echo time ``echoes_ms[e]``."""

    data: np.ndarray
    grid: Grid
    echoes_ms: tuple[float, ...] = field(default=())

    def __post_init__(self):
        data = np.asarray(self.data)
        echoes = tuple(float(t) for t in self.echoes_ms)
        if len(echoes) < 2:
            raise ValueError("a multi-echo volume needs at least two echoes")
        if any(b <= a for a, b in zip(echoes, echoes[1:])):
            raise ValueError(f"echo times must be strictly increasing, got {echoes}")
        if data.shape != (len(echoes),) + self.grid.dims:
            raise VolumeIntegrityError(
                f"data shape {data.shape} does not match {len(echoes)} echoes on {self.grid.dims}"
            )
        data = data.astype(np.complex128 if data.dtype == np.complex128 else np.complex64, copy=False).view()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "echoes_ms", echoes)

    @property
    def n_echoes(self) -> int:
        return len(self.echoes_ms)

    def select(self, indices: Sequence[int]) -> "ComplexVolume":
        indices = list(indices)
        return ComplexVolume(self.data[indices], self.grid, tuple(self.echoes_ms[i] for i in indices))


@dataclass(frozen=True)
class Mask3D:
    data: np.ndarray
    grid: Grid

    def __post_init__(self):
        data = np.asarray(self.data, dtype=bool)
        if tuple(data.shape) != self.grid.dims:
            raise VolumeIntegrityError(f"mask shape {data.shape} does not match grid dims {self.grid.dims}")
        data = data.view()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def count(self) -> int:
        return int(self.data.sum())

    def __and__(self, other: "Mask3D") -> "Mask3D":
        return Mask3D(self.data & other.data, self.grid)


# ---------------------------------------------------------------- file I/O


def _header_bytes(grid: Grid, units: str, echoes_ms=None) -> bytes:
    header = {
        "magic": MAGIC,
        "dims": list(grid.dims),
        "spacing_mm": list(grid.spacing),
        "origin_mm": list(grid.origin),
        "units": units,
        "dtype": "f32le",
    }
    if echoes_ms is not None:
        header["echoes_ms"] = list(echoes_ms)
    return (json.dumps(header, sort_keys=True) + "\n").encode("utf-8")


def _write(path, header: bytes, payload: np.ndarray) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(payload, dtype="<f4").tobytes())


def write_volume(vol: Volume3D | ComplexVolume, path) -> None:
    """Write a real or multi-echo complex volume as B0V."""
    if isinstance(vol, ComplexVolume):
        # per echo: x-fastest voxels, (re, im) interleaved per voxel
        flat = np.stack([e.ravel(order="F") for e in vol.data])
        payload = np.stack([flat.real, flat.imag], axis=-1).ravel()
        _write(path, _header_bytes(vol.grid, Units.DIMENSIONLESS.value, vol.echoes_ms), payload)
    else:
        _write(path, _header_bytes(vol.grid, vol.units.value), vol.data.ravel(order="F"))


def _parse_header(line: bytes) -> dict:
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError("header", f"not valid JSON ({exc})") from None
    if not isinstance(header, dict):
        raise VolumeFormatError("header", "must be a JSON object")
    if header.get("magic") != MAGIC:
        raise VolumeFormatError("magic", f"expected {MAGIC!r}, got {header.get('magic')!r}")
    if header.get("dtype") != "f32le":
        raise VolumeFormatError("dtype", f"expected 'f32le', got {header.get('dtype')!r}")
    for key, cast in (("dims", int), ("spacing_mm", float), ("origin_mm", float)):
        value = header.get(key)
        if not isinstance(value, list) or len(value) != 3:
            raise VolumeFormatError(key, "must be a list of 3 numbers")
        if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value):
            raise VolumeFormatError(key, "must be a list of 3 numbers")
        if cast is int and any(int(v) != v or v <= 0 for v in value):
            raise VolumeFormatError(key, "must be positive integers")
        if key == "spacing_mm" and any(not v > 0 for v in value):
            raise VolumeFormatError(key, "must be positive")
    try:
        Units(header.get("units"))
    except ValueError:
        raise VolumeFormatError("units", f"unknown units {header.get('units')!r}") from None
    echoes = header.get("echoes_ms")
    if echoes is not None:
        if not isinstance(echoes, list) or len(echoes) < 2:
            raise VolumeFormatError("echoes_ms", "must list at least two echo times")
        if any(b <= a for a, b in zip(echoes, echoes[1:])):
            raise VolumeFormatError("echoes_ms", "must be strictly increasing")
    return header


def read_volume(path) -> Volume3D | ComplexVolume:
    """Read a B0V file; complex if the header lists ``echoes_ms``."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise VolumeFormatError("header", "missing newline terminator")
    header = _parse_header(raw[:nl])
    body = raw[nl + 1:]
    grid = Grid(tuple(int(d) for d in header["dims"]), tuple(header["spacing_mm"]), tuple(header["origin_mm"]))
    echoes = header.get("echoes_ms")
    n_floats = grid.n_voxels * (2 * len(echoes) if echoes is not None else 1)
    if len(body) != 4 * n_floats:
        raise VolumeIntegrityError(
            f"header declares {n_floats} float32 values but payload holds {len(body) / 4:g}"
        )
    values = np.frombuffer(body, dtype="<f4").astype(np.float32)
    if echoes is None:
        return Volume3D(values.reshape(grid.dims, order="F"), grid, Units(header["units"]))
    pairs = values.reshape(len(echoes), grid.n_voxels, 2)
    cplx = (pairs[..., 0] + 1j * pairs[..., 1]).astype(np.complex64)
    data = np.stack([c.reshape(grid.dims, order="F") for c in cplx])
    return ComplexVolume(data, grid, tuple(echoes))


def write_mask(mask: Mask3D, path) -> None:
    write_volume(Volume3D(mask.data.astype(np.float32), mask.grid), path)


def read_mask(path) -> Mask3D:
    vol = read_volume(path)
    if not isinstance(vol, Volume3D):
        raise VolumeFormatError("echoes_ms", "a mask file cannot be multi-echo")
    return Mask3D(vol.data > 0.5, vol.grid)


# ---------------------------------------------------------------- resampling


def block_downsample(vol: Volume3D, factor) -> Volume3D:
    """Average non-overlapping ``factor`` blocks; no implicit padding."""
    factor = (factor,) * 3 if np.isscalar(factor) else _triple(factor, "factor", int)
    if any(int(f) != f or f < 1 for f in factor):
        raise ValueError(f"factor must be positive integers, got {factor}")
    factor = tuple(int(f) for f in factor)
    nx, ny, nz = vol.dims
    if any(n % f for n, f in zip(vol.dims, factor)):
        raise ValueError(f"dims {vol.dims} not divisible by factor {factor}")
    fx, fy, fz = factor
    blocks = np.asarray(vol.data, dtype=np.float64).reshape(nx // fx, fx, ny // fy, fy, nz // fz, fz)
    data = blocks.mean(axis=(1, 3, 5))
    g = vol.grid
    spacing = tuple(s * f for s, f in zip(g.spacing, factor))
    origin = tuple(o + (f - 1) / 2.0 * s for o, s, f in zip(g.origin, g.spacing, factor))
    return Volume3D(data, Grid(data.shape, spacing, origin), vol.units)


def nearest_upsample(vol: Volume3D, factor) -> Volume3D:
    """Replicate each voxel into a ``factor`` block (inverse geometry of block_downsample)."""
    factor = (factor,) * 3 if np.isscalar(factor) else _triple(factor, "factor", int)
    data = vol.data
    for axis, f in enumerate(factor):
        data = np.repeat(data, int(f), axis=axis)
    g = vol.grid
    spacing = tuple(s / f for s, f in zip(g.spacing, factor))
    origin = tuple(o - (f - 1) / 2.0 * sp for o, sp, f in zip(g.origin, spacing, factor))
    return Volume3D(data, Grid(data.shape, spacing, origin), vol.units)
