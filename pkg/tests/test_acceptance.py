"""End-to-end acceptance checks, one test per criterion.

Criteria 5 and 6 share one desk-scale pipeline run (configs/desk.json), which
takes tens of minutes on one CPU core.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest

from b0motion.dataset import simulate_subject
from b0motion.evaluation import read_report, residual_stats, sweep_summary
from b0motion.fieldmap import estimate_gre, hermitian_b0
from b0motion.motion import RigidPose, affine_to_pose, invert, load_poses, pose_to_affine, random_poses, save_poses
from b0motion.nn import autograd as ag
from b0motion.pipeline import Pipeline, normalize_config
from b0motion.shim import CALIBRATION_AMPLITUDES, TERMS, fit_shim_calibration, sh_basis
from b0motion.synth import (EPI_ECHOES_MS, GRE_ECHOES_MS, PhantomSpec, dipole_field, dipole_kernel, make_phantom,
                            scene_at_pose, shimmed_scene, simulate_multiecho)
from b0motion.volume import ComplexVolume, Grid, Units, Volume3D, read_volume, write_volume

ROOT = Path(__file__).resolve().parents[1]
DESK_CONFIG = ROOT / "configs" / "desk.json"
# plateau band for epochs 50..200, pinned from the reference desk run
PLATEAU_BAND_HZ = 0.25


# ------------------------------------------------------------- 1. physics

def test_acceptance_1_field_physics(acceptance):
    t0 = time.perf_counter()
    n = 16
    spacing = (1.0, 1.0, 1.0)
    grid = Grid.centered((n, n, n), spacing)
    chi = np.zeros((n, n, n))
    chi[4, 10, 7] = 1.0
    field = dipole_field(Volume3D(chi, grid, Units.PPM)).data
    # direct spatial convolution with the sampled kernel, one shifted copy per source voxel
    kernel = np.fft.ifftn(dipole_kernel((n, n, n), spacing)).real * 42.577 * 7.0
    direct = np.roll(kernel, (4, 10, 7), axis=(0, 1, 2))
    impulse_err = np.max(np.abs(field - direct)) / np.max(np.abs(direct))

    rng = np.random.default_rng(0)
    lin_err, mean_err = 0.0, 0.0
    for _ in range(100):
        a, b = rng.standard_normal((2, n, n, n))
        s, t = rng.uniform(-3, 3, 2)
        fa = dipole_field(Volume3D(a, grid, Units.PPM)).data
        fb = dipole_field(Volume3D(b, grid, Units.PPM)).data
        fab = dipole_field(Volume3D(s * a + t * b, grid, Units.PPM)).data
        scale = np.max(np.abs(fab)) + 1e-30
        lin_err = max(lin_err, np.max(np.abs(fab - s * fa - t * fb)) / scale)
        mean_err = max(mean_err, abs(fa.mean()) / np.max(np.abs(fa)))
    runtime = time.perf_counter() - t0
    ok = impulse_err < 1e-6 and lin_err < 1e-6 and mean_err < 1e-9 and runtime < 10
    acceptance(1, "field physics", ok,
               f"impulse rel err {impulse_err:.1e} (<1e-6), linearity {lin_err:.1e}, "
               f"mean {mean_err:.1e}, {runtime:.1f} s (<10 s)")
    assert ok


# ------------------------------------------------------------ 2. field maps

def test_acceptance_2_closed_loop_fieldmap(acceptance):
    t0 = time.perf_counter()
    dims = (48, 48, 48)
    spacing = (224 / 48,) * 3  # same field of view as the 32^3 desk grid
    p = make_phantom(PhantomSpec(dims=dims, spacing_mm=spacing, seed=21, chi_scale=0.15))
    at = scene_at_pose(p, RigidPose(), shimmed_scene(p))
    echoes = simulate_multiecho(at.field, at.anat, GRE_ECHOES_MS, noise_sigma=0.0)
    res, _ = estimate_gre(echoes)
    m = at.mask.data
    rms = float(np.sqrt(np.mean((res.field.data - at.field.data)[m] ** 2)))

    g = Grid((20, 20, 20))
    truth = np.random.default_rng(1).uniform(-499.0, 499.0, g.dims)
    te = np.asarray(EPI_ECHOES_MS)
    sig = np.exp(2j * np.pi * truth[None] * te[:, None, None, None] * 1e-3)
    herm = hermitian_b0(ComplexVolume(sig, g, EPI_ECHOES_MS)).field.data
    herm_err = float(np.max(np.abs(herm - truth)))
    runtime = time.perf_counter() - t0
    ok = rms < 0.1 and herm_err < 1e-6 and runtime < 30
    acceptance(2, "closed-loop field mapping", ok,
               f"48^3 GRE RMS {rms:.2e} Hz (<0.1), Hermitian max err {herm_err:.1e} Hz (<1e-6), "
               f"{runtime:.1f} s (<30 s)")
    assert ok


# --------------------------------------------------------------- 3. autodiff

def _grad_check(fn, arrays, rng, h=1e-4, n_probe=30):
    tensors = [ag.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    r = rng.standard_normal(out.shape)
    out.backward(r)
    worst = 0.0
    for i, t in enumerate(tensors):
        probes = rng.choice(arrays[i].size, size=min(n_probe, arrays[i].size), replace=False)
        num, ana = [], []
        for p in probes:
            idx = np.unravel_index(p, arrays[i].shape)
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i][idx] += h
            minus[i][idx] -= h
            fp = np.sum(fn(*[ag.Tensor(a) for a in plus]).data * r)
            fm = np.sum(fn(*[ag.Tensor(a) for a in minus]).data * r)
            num.append((fp - fm) / (2 * h))
            ana.append(t.grad[idx])
        num, ana = np.array(num), np.array(ana)
        worst = max(worst, np.linalg.norm(num - ana) / max(np.linalg.norm(num), np.linalg.norm(ana), 1e-300))
    return worst


def test_acceptance_3_autodiff(acceptance):
    t0 = time.perf_counter()
    shapes = [(1, 2, 8, 8, 8), (2, 1, 4, 6, 8), (1, 3, 6, 6, 6), (2, 2, 4, 4, 4), (1, 1, 10, 8, 6)]
    rng = np.random.default_rng(0)
    worst = {}
    for shape in shapes:
        c = shape[1]
        x = rng.standard_normal(shape)
        sep = rng.permutation(x.size).reshape(shape) * 0.01
        kinked = np.where(np.abs(x) < 0.05, 0.05, x)
        tgt = rng.standard_normal(shape)
        checks = {
            "conv3d": (lambda x, w, b: ag.conv3d(x, w, b), [x, rng.standard_normal((2, c, 3, 3, 3)),
                                                           rng.standard_normal(2)]),
            "tconv3d": (lambda x, w, b: ag.conv_transpose3d(x, w, b), [x, rng.standard_normal((c, 2, 5, 5, 5)),
                                                                      rng.standard_normal(2)]),
            "maxpool3d": (ag.max_pool3d, [sep]),
            "upsample_trilinear": (ag.upsample_trilinear, [x]),
            "leaky_relu": (lambda t: ag.leaky_relu(t, 0.01), [kinked]),
            "concat": (lambda a, b: ag.concat([a, b]), [x, rng.standard_normal(shape)]),
            "mse": (lambda p: ag.mse_loss(p, tgt), [x]),
        }
        for name, (fn, arrays) in checks.items():
            worst[name] = max(worst.get(name, 0.0), _grad_check(fn, arrays, rng))
    runtime = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and runtime < 60
    acceptance(3, "autodiff gradients", ok,
               f"worst rel err {max(worst.values()):.1e} over {len(worst)} ops x {len(shapes)} shapes (<1e-4), "
               f"{runtime:.1f} s (<60 s)")
    assert ok


# -------------------------------------------------------------------- 4. shim

def test_acceptance_4_shim_round_trip(acceptance):
    grid = Grid.centered((32, 32, 32), (7.0, 7.0, 7.0))
    basis = sh_basis(grid)
    amps = (0.0,) + CALIBRATION_AMPLITUDES
    rng = np.random.default_rng(0)
    baseline = rng.normal(0, 30, grid.dims)
    exact = 0.0
    for term in TERMS:
        unit = basis.term(term).data
        maps = [Volume3D(baseline + a * unit, grid, Units.HZ) for a in amps]
        coef, _ = fit_shim_calibration(maps, amps, term, basis)
        exact = max(exact, float(np.max(np.abs(coef * np.array(CALIBRATION_AMPLITUDES) - CALIBRATION_AMPLITUDES))))
    # 100 seeded experiments under 1 Hz noise, cycling through the terms
    z = []
    da = np.asarray(amps) - np.mean(amps)
    for seed in range(100):
        term = TERMS[seed % len(TERMS)]
        b = basis.term(term).data
        se = 1.0 / np.sqrt(np.sum(da**2) * np.sum(b * b))
        noise = np.random.default_rng(seed)
        maps = [Volume3D(baseline + a * b + noise.normal(0, 1.0, grid.dims), grid, Units.HZ) for a in amps]
        coef, _ = fit_shim_calibration(maps, amps, term, basis)
        z.append((coef - 1.0) / se)
    z = np.asarray(z)
    ok = exact < 1e-9 and np.abs(z).max() < 3.0 and 0.8 < z.std() < 1.2
    acceptance(4, "shim calibration round trip", ok,
               f"noiseless amplitude err {exact:.1e} (<1e-9), max |z| {np.abs(z).max():.2f} over "
               f"{len(z)} seeds (<3 sigma), std(z) {z.std():.2f} (0.8..1.2)")
    assert ok


# ------------------------------------------------------ 5/6. desk pipeline

@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    raw = json.loads(DESK_CONFIG.read_text())
    raw["outdir"] = str(tmp_path_factory.mktemp("desk"))
    cfg = normalize_config(raw)
    pipe = Pipeline(cfg, deterministic=True)
    times = {}
    for stage in ("simulate", "train", "finetune", "evaluate", "sweep"):
        t0 = time.perf_counter()
        pipe.run(stage)
        times[stage] = time.perf_counter() - t0
    report = read_report(pipe.stage_dir("evaluate") / "report.json")
    sweeps = json.loads((pipe.stage_dir("sweep") / "sweeps.json").read_text())
    # identity-pose noise floor: the same head position measured twice
    sim = cfg.sim_config()
    floors = []
    for seed in cfg.test_seeds():
        s = simulate_subject(seed, sim, [RigidPose(), RigidPose()])
        a, b = s.positions
        floors.append(residual_stats(a.field_gt, b.field_gt, b.mask)[0])
    return cfg, report, sweeps, float(np.median(floors)), times


def test_acceptance_5_end_to_end_ordering(desk_run, acceptance):
    cfg, report, _, floor, times = desk_run
    agg = {a: v["median_of_medians_hz"] for a, v in report.aggregates().items()}
    nc, pr0, prft, epi = agg["NC"], agg["PR0"], agg["PRFT"], agg["EPI"]
    rel_epi = abs(prft - epi) / epi
    runtime = times["simulate"] + times["train"] + times["finetune"] + times["evaluate"]
    setup = (len(cfg.train_seeds()) >= 6 and len(cfg.test_seeds()) >= 2 and cfg.n_positions() - 1 >= 12
             and tuple(cfg.data["grid"]["dims"]) == (32, 32, 32))
    ok = (setup and prft < pr0 < nc and pr0 - prft > floor and nc - pr0 > floor
          and rel_epi <= 0.25 and runtime < 30 * 60)
    acceptance(5, "end-to-end ordering", ok,
               f"PRFT {prft:.2f}, PR0 {pr0:.2f}, NC {nc:.2f} Hz; gaps PR0-PRFT {pr0 - prft:.2f}, "
               f"NC-PR0 {nc - pr0:.2f} (need > floor {floor:.2f} Hz); "
               f"EPI {epi:.2f} Hz, |PRFT-EPI|/EPI {rel_epi:.0%} (<=25%); {runtime / 60:.1f} min (<30)")
    assert ok


def test_acceptance_6_finetune_sweeps(desk_run, acceptance):
    cfg, report, sweeps, floor, times = desk_run
    ep = sweep_summary(sweeps["epochs"], "epochs")
    vol = sweep_summary(sweeps["volumes"], "volumes")
    pr0 = report.aggregates()["PR0"]["median_of_medians_hz"]
    early = [ep[e] for e in (5, 10, 20, 35, 50)]
    # "non-increasing" up to measurement noise: no step may rise by more than the noise floor
    descending = all(b <= a + floor for a, b in zip(early, early[1:])) and ep[50] <= ep[5]
    plateau = [ep[e] for e in (50, 75, 100, 150, 200)]
    band = PLATEAU_BAND_HZ
    flat = max(plateau) - min(plateau) <= band
    volumes_ok = all(v <= pr0 for v in vol.values())
    ok = descending and flat and volumes_ok and times["sweep"] < 20 * 60
    acceptance(6, "fine-tuning sweeps", ok,
               "epochs " + ", ".join(f"{e}:{v:.2f}" for e, v in ep.items())
               + f" Hz; plateau spread {max(plateau) - min(plateau):.2f} Hz (<={band:.2f}); volumes "
               + ", ".join(f"{k}:{v:.2f}" for k, v in vol.items()) + f" vs PR0 {pr0:.2f} Hz; "
               + f"{times['sweep'] / 60:.1f} min (<20)")
    assert ok


# ------------------------------------------------------------ 7. determinism

TINY = {
    "seed": 9,
    "poses": {"n_positions": 9},
    "subjects": {"train": 2, "test": 1},
    "network": {"base_channels": 2, "kernel": 3, "residual_b0": True},
    "train": {"lr": 1e-3, "epochs": 2, "batch_size": 4},
    "finetune": {"lr": 1e-4, "epochs": 2},
    "augmentation_range_ut": {"1": 20.0, "2": 20.0},
    "evaluation": {"finetune_positions": [1, 2, 3], "sweep_epochs": [0, 2], "sweep_volumes": [3]},
}


def test_acceptance_7_determinism(tmp_path, acceptance):
    runs = []
    for name in ("a", "b"):
        pipe = Pipeline(normalize_config({**TINY, "outdir": str(tmp_path / name)}), deterministic=True)
        pipe.run("all")
        runs.append(pipe.root)
    report_same = (runs[0] / "evaluation" / "report.json").read_bytes() == \
        (runs[1] / "evaluation" / "report.json").read_bytes()
    payloads = sorted(p.relative_to(runs[0]) for p in runs[0].rglob("*.f32"))
    payloads_same = bool(payloads) and all((runs[0] / p).read_bytes() == (runs[1] / p).read_bytes()
                                           for p in payloads)
    manifests = sorted(p.relative_to(runs[0]) for p in runs[0].rglob("*.json"))
    manifests_same = all((runs[0] / p).read_bytes() == (runs[1] / p).read_bytes()
                         for p in manifests if p.name != "config.json")
    ok = report_same and payloads_same and manifests_same
    acceptance(7, "determinism", ok,
               f"report.json identical: {report_same}; {len(payloads)} checkpoint payloads identical: "
               f"{payloads_same}; {len(manifests)} manifests identical: {manifests_same}")
    assert ok


# -------------------------------------------------------------------- 8. I/O

def test_acceptance_8_io_round_trips(tmp_path, acceptance):
    rng = np.random.default_rng(0)
    vol_ok = 0
    for i in range(1000):
        dims = tuple(int(d) for d in rng.integers(1, 9, 3))
        grid = Grid(dims, tuple(rng.uniform(0.1, 5.0, 3)), tuple(rng.uniform(-100, 100, 3)))
        data = (rng.standard_normal(dims) * 10.0 ** rng.integers(-6, 6)).astype(np.float32)
        units = list(Units)[i % len(Units)]
        write_volume(Volume3D(data, grid, units), tmp_path / "v.b0v")
        back = read_volume(tmp_path / "v.b0v")
        vol_ok += (np.array_equal(back.data.view(np.uint32), data.view(np.uint32)) and back.units == units
                   and back.grid == grid)
    poses = random_poses(rng, 1000, 10.0, 10.0)
    save_poses(poses, tmp_path / "poses.json")
    pose_file_ok = load_poses(tmp_path / "poses.json") == poses
    center = (3.0, -2.0, 5.0)
    aff_err = 0.0
    for p in poses:
        A = pose_to_affine(p, center)
        back = affine_to_pose(A, center)
        aff_err = max(aff_err, np.max(np.abs(np.subtract(back.t, p.t))), np.max(np.abs(np.subtract(back.r, p.r))),
                      np.max(np.abs(invert(p, center) @ A - np.eye(4))))
    ok = vol_ok == 1000 and pose_file_ok and aff_err < 1e-9
    acceptance(8, "I/O round trips", ok,
               f"{vol_ok}/1000 B0V volumes bit-exact; pose file exact: {pose_file_ok}; "
               f"pose/affine max err {aff_err:.1e} (<1e-9)")
    assert ok
