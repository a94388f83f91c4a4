"""First- and second-order spherical-harmonic shim fields.

Amplitudes are in uT/m^n (n = term order) and fields in Hz, using
42.577 Hz/uT and coordinates in metres about the shim isocentre.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .fieldmap import FieldMapResult
from .volume import Grid, Mask3D, Units, Volume3D

HZ_PER_UT = 42.577
TERMS = ("X", "Y", "Z", "XY", "ZY", "Z2", "ZX", "X2-Y2")
ORDERS = (1, 1, 1, 2, 2, 2, 2, 2)
CALIBRATION_AMPLITUDES = (-100.0, -50.0, 50.0, 100.0)

__all__ = [
    "ShimBasis",
    "sh_basis",
    "fit_shim_calibration",
    "fit_amplitudes",
    "auto_shim",
    "sample_augmentation",
    "augmentation_bound",
]


def _solid_harmonic(term: str, x, y, z):
    if term == "X":
        return x
    if term == "Y":
        return y
    if term == "Z":
        return z
    if term == "XY":
        return x * y
    if term == "ZY":
        return z * y
    if term == "ZX":
        return z * x
    if term == "Z2":
        return z * z - 0.5 * (x * x + y * y)
    if term == "X2-Y2":
        return x * x - y * y
    raise KeyError(f"unknown shim term {term!r}")


@dataclass(frozen=True)
class ShimBasis:
    """Per-term fields in Hz for a unit amplitude (1 uT/m^n) on ``grid``."""

    grid: Grid
    center_mm: tuple[float, float, float]
    fields: np.ndarray  # (n_terms, nx, ny, nz)
    terms: tuple[str, ...] = TERMS

    @property
    def orders(self) -> tuple[int, ...]:
        return tuple(ORDERS[TERMS.index(t)] for t in self.terms)

    def term(self, name: str) -> Volume3D:
        return Volume3D(self.fields[self.terms.index(name)], self.grid, Units.HZ)

    def combine(self, amplitudes: Sequence[float]) -> Volume3D:
        amps = np.asarray(amplitudes, dtype=np.float64)
        if amps.shape != (len(self.terms),):
            raise ValueError(f"expected {len(self.terms)} amplitudes, got {amps.shape}")
        return Volume3D(np.tensordot(amps, self.fields, axes=1), self.grid, Units.HZ)


def sh_basis(grid: Grid, center=None, terms: Sequence[str] = TERMS) -> ShimBasis:
    center = grid.center if center is None else np.asarray(center, dtype=np.float64)
    x, y, z = grid.coordinates()
    x = (x - center[0]) * 1e-3
    y = (y - center[1]) * 1e-3
    z = (z - center[2]) * 1e-3
    fields = np.stack([np.broadcast_to(_solid_harmonic(t, x, y, z), grid.dims) * HZ_PER_UT for t in terms])
    return ShimBasis(grid, tuple(float(c) for c in center), fields, tuple(terms))


def fit_shim_calibration(maps: Sequence[Volume3D | FieldMapResult], amplitudes: Sequence[float], term: str,
                         basis: ShimBasis, mask: Mask3D | None = None) -> tuple[float, float]:
    """Fit ``map_i = baseline + c * amplitude_i * basis[term]`` over the mask.

    The per-voxel baseline (the field with the shim term at its initial
    setting) is estimated jointly, which reduces to subtracting the amplitude-0
    map when the data are noise-free. Returns ``(c, residual_rms_hz)``; ``c`` is
    1 when the analytic basis matches the measured term exactly.
    """
    maps = [m.field if isinstance(m, FieldMapResult) else m for m in maps]
    amps = np.asarray(amplitudes, dtype=np.float64)
    if len(maps) != amps.size:
        raise ValueError("need one field map per amplitude")
    if amps.size < 2 or np.ptp(amps) == 0:
        raise ValueError("calibration design is rank deficient: need at least two distinct amplitudes")
    for m in maps:
        m.require_units(Units.HZ)
        if not m.grid.same_as(basis.grid):
            raise ValueError("calibration maps and basis are on different grids")
    sel = np.ones(basis.grid.dims, bool) if mask is None else mask.data
    b = basis.fields[basis.terms.index(term)][sel]
    data = np.stack([np.asarray(m.data, dtype=np.float64)[sel] for m in maps])  # (n_maps, n_vox)
    da = amps - amps.mean()
    centered = data - data.mean(axis=0)
    denom = float(np.sum(da ** 2) * np.sum(b * b))
    if denom == 0:
        raise ValueError("basis term vanishes inside the calibration mask")
    coef = float(np.sum(da[:, None] * centered * b[None]) / denom)
    resid = centered - coef * da[:, None] * b[None]
    rms = float(np.sqrt(np.mean(resid ** 2)))
    return coef, rms


def fit_amplitudes(field: Volume3D, basis: ShimBasis, mask: Mask3D | None = None,
                   offset: bool = True) -> tuple[np.ndarray, float]:
    """Least-squares shim amplitudes (uT/m^n) reproducing ``field`` inside ``mask``.

    With ``offset`` a constant frequency term is fitted too and returned last.
    """
    sel = np.ones(basis.grid.dims, bool) if mask is None else mask.data
    cols = [f[sel] for f in basis.fields]
    if offset:
        cols.append(np.ones(int(sel.sum())))
    A = np.stack(cols, axis=1)
    coef, *_ = np.linalg.lstsq(A, np.asarray(field.data, dtype=np.float64)[sel], rcond=None)
    if offset:
        return coef[:-1], float(coef[-1])
    return coef, 0.0


def auto_shim(field: Volume3D, basis: ShimBasis, mask: Mask3D) -> Volume3D:
    """Static shim field that cancels the low-order part of ``field`` in ``mask``."""
    amps, f0 = fit_amplitudes(field, basis, mask)
    return Volume3D(-(basis.combine(amps).data + f0), basis.grid, Units.HZ)


def _ranges(range_ut: float | Mapping[int, float]) -> dict[int, float]:
    if isinstance(range_ut, Mapping):
        return {int(k): float(v) for k, v in range_ut.items()}
    return {1: float(range_ut), 2: float(range_ut)}


def sample_augmentation(rng: np.random.Generator, range_ut: float | Mapping[int, float],
                        basis: ShimBasis) -> Volume3D:
    """Random shim field: each amplitude uniform in [-range_n, +range_n] for its order n.

    The returned field must be added to both the input and the target B0 of
    one training instance.
    """
    ranges = _ranges(range_ut)
    limits = np.array([ranges[o] for o in basis.orders])
    if not np.all(np.isfinite(limits)) or np.any(limits < 0):
        raise ValueError("augmentation ranges must be finite and non-negative")
    amps = rng.uniform(-1.0, 1.0, limits.size) * limits
    return basis.combine(amps)


def augmentation_bound(range_ut: float | Mapping[int, float], basis: ShimBasis) -> float:
    """Upper bound on max |field| of any :func:`sample_augmentation` draw on this grid."""
    ranges = _ranges(range_ut)
    return float(sum(ranges[o] * np.abs(f).max() for o, f in zip(basis.orders, basis.fields)))
