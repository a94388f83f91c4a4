"""B0 field estimation from multi-echo complex signals."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import ComplexVolume, Grid, Mask3D, Units, Volume3D

__all__ = ["FieldMapResult", "hermitian_b0", "unwrap_temporal", "fit_multiecho", "estimate_gre"]


@dataclass(frozen=True)
class FieldMapResult:
    field: Volume3D  # Hz
    reliability: Volume3D  # [0, 1]
    mask: Mask3D  # voxels where the estimate is defined


def _normalize(w: np.ndarray) -> np.ndarray:
    top = float(w.max()) if w.size else 0.0
    return w / top if top > 0 else np.zeros_like(w)


def hermitian_b0(echoes: ComplexVolume) -> FieldMapResult:
    """Dual-echo field map from the phase of conj(S1) * S2.

    The estimate is unambiguous only within +-1/(2 dTE); larger offsets alias.
    """
    if echoes.n_echoes != 2:
        raise ValueError(f"hermitian_b0 needs exactly 2 echoes, got {echoes.n_echoes}")
    dte = (echoes.echoes_ms[1] - echoes.echoes_ms[0]) * 1e-3
    if not dte > 0:
        raise ValueError("echo spacing must be positive")
    s1 = echoes.data[0].astype(np.complex128)
    s2 = echoes.data[1].astype(np.complex128)
    product = np.conj(s1) * s2
    field = np.angle(product) / (2 * np.pi * dte)
    weight = np.abs(product)
    grid = echoes.grid
    return FieldMapResult(
        Volume3D(field, grid, Units.HZ),
        Volume3D(_normalize(weight), grid),
        Mask3D(weight > 0, grid),
    )


def unwrap_temporal(echoes: ComplexVolume, guide: FieldMapResult,
                    flag_above: float = np.pi / 2) -> tuple[np.ndarray, Mask3D]:
    """Unwrap each echo's phase towards the phase the guide field predicts.

    Echo ``e`` gets ``angle(S_e) + 2 pi n`` with the integer ``n`` that brings it
    closest to ``2 pi f_guide TE_e``. The guide must be alias-free.

    Returns ``(phases, residual)`` where ``phases`` has shape (n_echoes, nx, ny, nz)
    in rad and ``residual`` flags voxels where any echo ends up more than
    ``flag_above`` rad from its prediction.
    """
    guide.field.require_units(Units.HZ)
    if guide.field.dims != echoes.grid.dims:
        raise ValueError("guide field and echoes are on different grids")
    te = np.asarray(echoes.echoes_ms, dtype=np.float64).reshape(-1, 1, 1, 1) * 1e-3
    predicted = 2 * np.pi * np.asarray(guide.field.data, dtype=np.float64)[None] * te
    measured = np.angle(echoes.data.astype(np.complex128))
    n = np.rint((predicted - measured) / (2 * np.pi))
    phases = measured + 2 * np.pi * n
    residual = np.any(np.abs(phases - predicted) > flag_above, axis=0)
    return phases, Mask3D(residual, echoes.grid)


def fit_multiecho(phases: np.ndarray, echoes_ms, weights=None, grid=None) -> FieldMapResult:
    """Per-voxel weighted least-squares line ``phase = 2 pi f TE + phi0``.

    ``weights`` may be per echo (same shape as ``phases``) or per voxel; the
    intercept is free so a common phase offset does not bias ``f``. Voxels with
    no usable weight get ``f = 0`` and drop out of the mask.
    """
    phases = np.asarray(phases, dtype=np.float64)
    te = np.asarray(echoes_ms, dtype=np.float64)
    if phases.shape[0] != te.size or te.size < 2:
        raise ValueError("need one phase volume per echo and at least two echoes")
    t = (2 * np.pi * te * 1e-3).reshape((-1,) + (1,) * (phases.ndim - 1))
    if weights is None:
        w = np.ones_like(phases)
    else:
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64), phases.shape)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    sw = w.sum(axis=0)
    ok = sw > 0
    safe = np.where(ok, sw, 1.0)
    t_mean = (w * t).sum(axis=0) / safe
    p_mean = (w * phases).sum(axis=0) / safe
    dt = t - t_mean
    sxx = (w * dt * dt).sum(axis=0)
    sxy = (w * dt * (phases - p_mean)).sum(axis=0)
    ok &= sxx > 0
    field = np.where(ok, sxy / np.where(ok, sxx, 1.0), 0.0)
    if grid is None:
        grid = Grid(phases.shape[1:])
    return FieldMapResult(
        Volume3D(field, grid, Units.HZ),
        Volume3D(_normalize(np.where(ok, sw, 0.0)), grid),
        Mask3D(ok, grid),
    )


def estimate_gre(echoes: ComplexVolume) -> tuple[FieldMapResult, Mask3D]:
    """Full multi-echo chain: dual-echo guide, temporal unwrapping, WLS fit.

    The guide comes from the first two echoes, so fields must stay within
    +-1/(2 (TE2 - TE1)). Weights are squared echo magnitudes.
    """
    guide = hermitian_b0(echoes.select([0, 1]))
    phases, residual = unwrap_temporal(echoes, guide)
    weights = np.abs(echoes.data.astype(np.complex128)) ** 2
    return fit_multiecho(phases, echoes.echoes_ms, weights, echoes.grid), residual
