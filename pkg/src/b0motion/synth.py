"""Synthetic head phantom, dipole field model, and signal simulation.

Susceptibility is stored relative to air (air = 0 ppm), so zero-filled
regions introduced by rigid resampling are physically air.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .fieldmap import hermitian_b0
from .motion import RigidPose, apply_rigid, resample
from .shim import auto_shim, sh_basis
from .volume import ComplexVolume, Grid, Mask3D, Units, Volume3D, block_downsample

GAMMA_HZ_PER_T = 42.577e6
GRE_ECHOES_MS = (3.0, 6.0, 9.0, 12.0, 15.0)
EPI_ECHOES_MS = (3.8, 4.8)

__all__ = [
    "PhantomSpec",
    "Phantom",
    "FieldScene",
    "PositionScene",
    "make_phantom",
    "dipole_kernel",
    "dipole_field",
    "scene_at_pose",
    "shimmed_scene",
    "simulate_multiecho",
    "emulate_navigator",
]


@dataclass(frozen=True)
class Cavity:
    center_mm: tuple[float, float, float]
    radius_mm: float


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry of the digital head. Axes: x left-right, y posterior-anterior, z foot-head."""

    dims: tuple[int, int, int] = (32, 32, 32)
    spacing_mm: tuple[float, float, float] = (7.0, 7.0, 7.0)
    head_semi_axes_mm: tuple[float, float, float] = (66.0, 76.0, 70.0)
    brain_scale: float = 0.82
    chi_tissue_ppm: float = -9.4  # tissue relative to air
    chi_scale: float = 0.05
    n_cavities: int = 3
    cavity_radius_mm: float = 14.0
    n_structures: int = 6
    jitter: float = 0.05  # relative per-subject variation of the geometry
    edge_mm: float = 2.0  # width of the soft tissue boundary
    seed: int = 0


@dataclass(frozen=True)
class Phantom:
    chi: Volume3D  # ppm, relative to air
    anat: Volume3D  # [0, 1]
    mask: Mask3D  # head interior without the air cavities
    head: Mask3D  # everything inside the scalp
    cavities: tuple[Cavity, ...] = field(default=())


@dataclass(frozen=True)
class FieldScene:
    b0_tesla: float = 7.0
    gamma_hz_per_t: float = GAMMA_HZ_PER_T
    pose: RigidPose = field(default_factory=RigidPose)
    pad_fraction: float = 0.5  # air padding per side, as a fraction of the FOV
    shim: Volume3D | None = None  # static field fixed in the scanner frame, Hz

    def __post_init__(self):
        if not self.larmor_hz_per_ppm > 0:
            raise ValueError("B0 and gamma must be positive")

    @property
    def larmor_hz_per_ppm(self) -> float:
        return self.gamma_hz_per_t * self.b0_tesla * 1e-6


@dataclass(frozen=True)
class PositionScene:
    anat: Volume3D
    field: Volume3D  # true field including any static shim, Hz
    mask: Mask3D  # head interior at this position


def _soft_inside(level: np.ndarray, width: float) -> np.ndarray:
    """Partial-volume occupancy from a signed distance-like level (<0 inside)."""
    return 0.5 * (1.0 - np.tanh(level / max(width, 1e-6)))


def _ellipsoid_level(x, y, z, center, axes) -> np.ndarray:
    # approximate signed distance in mm: (r_normalized - 1) * mean semi-axis
    r = np.sqrt(((x - center[0]) / axes[0]) ** 2 + ((y - center[1]) / axes[1]) ** 2
                + ((z - center[2]) / axes[2]) ** 2)
    return (r - 1.0) * float(np.mean(axes))


def make_phantom(spec: PhantomSpec = PhantomSpec()) -> Phantom:
    """Build a deterministic head phantom from ``spec`` (including its seed)."""
    dims = tuple(int(d) for d in spec.dims)
    if min(dims) < 32:
        raise ValueError(f"phantom grid must be at least 32^3, got {dims}")
    grid = Grid.centered(dims, spec.spacing_mm)
    rng = np.random.default_rng(spec.seed)
    axes = np.asarray(spec.head_semi_axes_mm, dtype=np.float64) * (1 + rng.uniform(-spec.jitter, spec.jitter, 3))
    half_fov = (np.asarray(dims) - 1) / 2.0 * np.asarray(spec.spacing_mm)
    margin = 4 * np.asarray(spec.spacing_mm)
    if np.any(axes > half_fov - margin):
        raise ValueError(f"head semi-axes {np.round(axes, 1).tolist()} mm do not fit the FOV with a 4-voxel margin")
    x, y, z = grid.coordinates()
    head = _soft_inside(_ellipsoid_level(x, y, z, (0, 0, 0), axes), spec.edge_mm)
    brain_axes = axes * spec.brain_scale
    brain_center = np.array([0.0, 0.0, 0.08 * axes[2]])
    brain = _soft_inside(_ellipsoid_level(x, y, z, brain_center, brain_axes), spec.edge_mm)

    # air cavities between brain and scalp; the first one is frontal (sinus-like)
    cavities = []
    air = np.zeros(dims)
    for n in range(spec.n_cavities):
        radius = spec.cavity_radius_mm * (1 + rng.uniform(-spec.jitter, spec.jitter))
        if n == 0:
            direction = np.array([0.0, 0.85, -0.55])
        else:
            side = 1.0 if n % 2 else -1.0
            direction = np.array([side * 0.9, rng.uniform(-0.3, 0.1), -0.45])
        direction = direction + rng.normal(0, spec.jitter, 3)
        direction /= np.linalg.norm(direction)
        # place the cavity centre 75% of the way out along this direction
        reach = 1.0 / np.sqrt(np.sum((direction / axes) ** 2))
        c = direction * 0.75 * reach
        cavities.append(Cavity(tuple(c.tolist()), float(radius)))
        lvl = np.sqrt((x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2) - radius
        air = np.maximum(air, _soft_inside(lvl, spec.edge_mm))
    tissue = head * (1.0 - air)

    # interior texture: ventricle-like dark blobs and bright patches inside the brain
    texture = np.zeros(dims)
    for n in range(spec.n_structures):
        c = rng.uniform(-0.5, 0.5, 3) * brain_axes + brain_center
        sa = brain_axes * rng.uniform(0.12, 0.3, 3)
        amp = -0.45 if n % 2 == 0 else 0.25
        texture += amp * _soft_inside(_ellipsoid_level(x, y, z, c, sa), spec.edge_mm)
    white = _soft_inside(_ellipsoid_level(x, y, z, brain_center, brain_axes * 0.7), 2 * spec.edge_mm)
    anat = tissue * (0.45 + 0.25 * brain + 0.2 * white + texture * brain)
    anat = np.clip(anat, 0.0, 1.0)

    chi = spec.chi_scale * spec.chi_tissue_ppm * tissue
    return Phantom(
        chi=Volume3D(chi, grid, Units.PPM),
        anat=Volume3D(anat, grid),
        mask=Mask3D(tissue > 0.5, grid),
        head=Mask3D(head > 0.5, grid),
        cavities=tuple(cavities),
    )


def dipole_kernel(dims, spacing_mm=(1.0, 1.0, 1.0)) -> np.ndarray:
    """k-space unit dipole ``1/3 - kz^2/|k|^2`` with B0 along z and D(0) = 0."""
    k = np.meshgrid(*(np.fft.fftfreq(n, d=s) for n, s in zip(dims, spacing_mm)), indexing="ij")
    k2 = k[0] ** 2 + k[1] ** 2 + k[2] ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        d = 1.0 / 3.0 - k[2] ** 2 / k2
    d[0, 0, 0] = 0.0
    return d


def dipole_field(chi: Volume3D, scene: FieldScene = FieldScene(), pad: int = 0) -> Volume3D:
    """Field in Hz induced by ``chi`` (ppm) in the scanner frame.

    ``pad`` voxels of air are added per side before the FFT and cropped after,
    which suppresses periodic wrap-around. The result is mean-free over the
    returned grid.
    """
    chi.require_units(Units.PPM)
    data = np.asarray(chi.data, dtype=np.float64)
    if pad:
        data = np.pad(data, pad)
    d = dipole_kernel(data.shape, chi.grid.spacing)
    spectrum = np.fft.ifftn(d * np.fft.fftn(data))
    real = spectrum.real
    scale = float(np.abs(real).max())
    if scale > 0 and float(np.abs(spectrum.imag).max()) > 1e-6 * scale:
        raise FloatingPointError("dipole convolution left a non-negligible imaginary part")
    if pad:
        real = real[pad:-pad, pad:-pad, pad:-pad]
        real = real - real.mean()
    return Volume3D(scene.larmor_hz_per_ppm * real, chi.grid, Units.HZ)


def _pad_voxels(grid: Grid, scene: FieldScene) -> int:
    return int(round(scene.pad_fraction * max(grid.dims)))


def scene_at_pose(phantom: Phantom, pose: RigidPose, scene: FieldScene = FieldScene()) -> PositionScene:
    """Move the phantom to ``pose`` and recompute its field there.

    The new field is a fresh dipole computation on the moved susceptibility,
    not a resampled copy of the initial field.
    """
    chi, valid = apply_rigid(phantom.chi, pose)
    anat, _ = apply_rigid(phantom.anat, pose)
    grid = phantom.chi.grid

    def move_mask(m: Mask3D) -> Mask3D:
        moved, _ = apply_rigid(Volume3D(m.data.astype(np.float64), grid), pose)
        return Mask3D((moved.data >= 0.5) & valid.data, grid)

    field = dipole_field(chi, scene, pad=_pad_voxels(grid, scene))
    if scene.shim is not None:
        if not scene.shim.grid.same_as(grid):
            raise ValueError("static shim field is not on the phantom grid")
        field = field.with_data(field.data + scene.shim.data)
    return PositionScene(anat, field, move_mask(phantom.mask))


def shimmed_scene(phantom: Phantom, scene: FieldScene = FieldScene()) -> FieldScene:
    """``scene`` with a static 2nd-order shim fitted at the initial position.

    The shim stays fixed in the scanner frame, so later head motion exposes
    the head to shim terms that no longer match its own field.
    """
    unshimmed = replace(scene, shim=None)
    initial = scene_at_pose(phantom, RigidPose(), unshimmed)
    basis = sh_basis(phantom.chi.grid)
    return replace(scene, shim=auto_shim(initial.field, basis, initial.mask))


def simulate_multiecho(field: Volume3D, anat: Volume3D, echoes_ms=GRE_ECHOES_MS,
                       noise_sigma: float = 0.0, rng: np.random.Generator | None = None) -> ComplexVolume:
    """S(TE) = anat * exp(i 2 pi f TE) plus complex Gaussian noise per component."""
    field.require_units(Units.HZ)
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    te = np.asarray(echoes_ms, dtype=np.float64).reshape(-1, 1, 1, 1) * 1e-3
    f = np.asarray(field.data, dtype=np.float64)[None]
    signal = np.asarray(anat.data, dtype=np.float64)[None] * np.exp(1j * 2 * np.pi * f * te)
    if noise_sigma > 0:
        rng = np.random.default_rng() if rng is None else rng
        signal = signal + noise_sigma * (rng.standard_normal(signal.shape) + 1j * rng.standard_normal(signal.shape))
    return ComplexVolume(signal, field.grid, tuple(echoes_ms))


def emulate_navigator(gt_field: Volume3D, anat: Volume3D, factor: int = 4, noise_sigma: float = 0.0,
                      echoes_ms=EPI_ECHOES_MS, rng: np.random.Generator | None = None) -> Volume3D:
    """Low-resolution dual-echo field map, interpolated back to the full grid."""
    low_field = block_downsample(gt_field, factor)
    low_anat = block_downsample(anat, factor)
    echoes = simulate_multiecho(low_field, low_anat, echoes_ms, noise_sigma, rng)
    low_map = hermitian_b0(echoes).field
    full, _ = resample(low_map, gt_field.grid, edge="clamp")
    return full
