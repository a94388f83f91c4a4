import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from b0motion.fieldmap import estimate_gre, fit_multiecho, hermitian_b0, unwrap_temporal
from b0motion.motion import RigidPose
from b0motion.synth import (EPI_ECHOES_MS, GRE_ECHOES_MS, PhantomSpec, make_phantom, scene_at_pose,
                            shimmed_scene, simulate_multiecho)
from b0motion.volume import ComplexVolume, Grid, Units, Volume3D


def _echoes(field_hz, echoes_ms, mag=1.0, noise=0.0, rng=None):
    field_hz = np.asarray(field_hz, dtype=np.float64)
    g = Grid(field_hz.shape)
    return simulate_multiecho(Volume3D(field_hz, g, Units.HZ), Volume3D(np.broadcast_to(mag, g.dims), g),
                              echoes_ms, noise, rng)


def test_hermitian_unit_signals():
    g = Grid((2, 2, 2))
    res = hermitian_b0(ComplexVolume(np.ones((2, 2, 2, 2), complex), g, (3.0, 4.0)))
    np.testing.assert_array_equal(res.field.data, 0.0)
    assert res.mask.data.all()


def test_hermitian_100hz():
    res = hermitian_b0(_echoes(np.full((1, 1, 1), 100.0), EPI_ECHOES_MS))
    assert res.field.data[0, 0, 0] == pytest.approx(100.0, abs=1e-9)


def test_hermitian_aliases_600hz():
    res = hermitian_b0(_echoes(np.full((1, 1, 1), 600.0), EPI_ECHOES_MS))
    assert res.field.data[0, 0, 0] == pytest.approx(-400.0, abs=1e-6)


def test_hermitian_round_trip_within_nyquist():
    rng = np.random.default_rng(0)
    f = rng.uniform(-499.9, 499.9, (10, 10, 10))
    res = hermitian_b0(_echoes(f, EPI_ECHOES_MS))
    assert np.max(np.abs(res.field.data - f)) < 1e-6


def test_hermitian_reliability_in_unit_range():
    rng = np.random.default_rng(1)
    mag = rng.uniform(0, 3, (4, 4, 4))
    res = hermitian_b0(_echoes(np.zeros((4, 4, 4)), EPI_ECHOES_MS, mag))
    assert res.reliability.data.min() >= 0 and res.reliability.data.max() == pytest.approx(1.0)


def test_hermitian_errors():
    with pytest.raises(ValueError, match="2 echoes"):
        hermitian_b0(_echoes(np.zeros((2, 2, 2)), (3.0, 6.0, 9.0)))


def test_unwrap_zero_field_unchanged():
    echoes = _echoes(np.zeros((3, 3, 3)), GRE_ECHOES_MS)
    guide = hermitian_b0(echoes.select([0, 1]))
    phases, residual = unwrap_temporal(echoes, guide)
    np.testing.assert_array_equal(phases, 0.0)
    assert not residual.data.any()


def test_unwrap_100hz_at_15ms():
    """2 pi 100 Hz 15 ms = 9.42 rad, recovered from the wrapped measurement."""
    echoes = _echoes(np.full((1, 1, 1), 100.0), GRE_ECHOES_MS)
    # true phase 3 pi sits exactly on the wrap boundary
    assert abs(np.angle(echoes.data[4, 0, 0, 0])) == pytest.approx(np.pi, abs=1e-9)
    guide = hermitian_b0(echoes.select([0, 1]))
    phases, _ = unwrap_temporal(echoes, guide)
    assert phases[4, 0, 0, 0] == pytest.approx(2 * np.pi * 100 * 0.015, abs=1e-9)


def test_unwrap_exact_within_guide_nyquist():
    rng = np.random.default_rng(2)
    f = rng.uniform(-166.0, 166.0, (8, 8, 8))
    echoes = _echoes(f, GRE_ECHOES_MS)
    phases, residual = unwrap_temporal(echoes, hermitian_b0(echoes.select([0, 1])))
    te = np.asarray(GRE_ECHOES_MS).reshape(-1, 1, 1, 1) * 1e-3
    assert np.max(np.abs(phases - 2 * np.pi * f[None] * te)) < 1e-6
    assert not residual.data.any()


def test_unwrap_flags_bad_guide():
    echoes = _echoes(np.full((1, 1, 1), 100.0), GRE_ECHOES_MS)
    wrong = hermitian_b0(_echoes(np.full((1, 1, 1), 130.0), GRE_ECHOES_MS[:2]))
    _, residual = unwrap_temporal(echoes, wrong)
    assert residual.data.all()


def test_fit_exact_line():
    te = np.asarray(GRE_ECHOES_MS)
    phases = (2 * np.pi * 42.0 * te * 1e-3).reshape(-1, 1, 1, 1) * np.ones((1, 2, 2, 2))
    res = fit_multiecho(phases, te)
    np.testing.assert_allclose(res.field.data, 42.0, atol=1e-9)
    assert res.mask.data.all()


@given(offset=st.floats(-10, 10), scale=st.floats(1e-3, 1e3))
def test_fit_invariant_to_offset_and_weight_scale(offset, scale):
    rng = np.random.default_rng(3)
    te = np.asarray(GRE_ECHOES_MS)
    phases = rng.standard_normal((5, 3, 3, 3))
    w = rng.uniform(0.1, 1.0, phases.shape)
    ref = fit_multiecho(phases, te, w).field.data
    np.testing.assert_allclose(fit_multiecho(phases + offset, te, w).field.data, ref, atol=1e-8)
    np.testing.assert_allclose(fit_multiecho(phases, te, w * scale).field.data, ref, rtol=1e-9, atol=1e-9)


def test_fit_zero_weights_flagged():
    phases = np.ones((5, 2, 1, 1))
    w = np.ones_like(phases)
    w[:, 0] = 0.0
    res = fit_multiecho(phases, GRE_ECHOES_MS, w)
    assert res.field.data[0, 0, 0] == 0.0
    assert res.mask.data.tolist() == [[[False]], [[True]]]


def test_fit_rejects_bad_input():
    with pytest.raises(ValueError):
        fit_multiecho(np.zeros((1, 2, 2, 2)), (3.0,))
    with pytest.raises(ValueError):
        fit_multiecho(np.zeros((2, 2, 2, 2)), (3.0, 6.0), -np.ones((2, 2, 2, 2)))


def test_fit_matches_numpy_polyfit():
    rng = np.random.default_rng(4)
    te = np.asarray(GRE_ECHOES_MS)
    phases = rng.standard_normal((5, 4))
    w = rng.uniform(0.1, 2.0, (5, 4))
    res = fit_multiecho(phases.reshape(5, 4, 1, 1), te, w.reshape(5, 4, 1, 1)).field.data.ravel()
    x = 2 * np.pi * te * 1e-3
    for v in range(4):
        # polyfit weights multiply residuals, so pass sqrt of the WLS weights
        slope = np.polyfit(x, phases[:, v], 1, w=np.sqrt(w[:, v]))[0]
        assert res[v] == pytest.approx(slope, rel=1e-9)


def _gre_closed_loop(dims, spacing):
    p = make_phantom(PhantomSpec(dims=dims, spacing_mm=spacing, seed=11, chi_scale=0.1))
    at = scene_at_pose(p, RigidPose(), shimmed_scene(p))
    echoes = simulate_multiecho(at.field, at.anat, GRE_ECHOES_MS)
    res, residual = estimate_gre(echoes)
    m = at.mask.data
    return np.sqrt(np.mean((res.field.data - at.field.data)[m] ** 2)), residual.data[m].any()


def test_closed_loop_gre_default_phantom():
    rms, flagged = _gre_closed_loop((32, 32, 32), (7.0, 7.0, 7.0))
    assert rms < 0.1
    assert not flagged


def test_echo_count_reduces_noise():
    rng = np.random.default_rng(5)
    f = np.full((20, 20, 20), 30.0)
    two = estimate_gre(_echoes(f, GRE_ECHOES_MS[:2], noise=0.02, rng=rng))[0].field.data
    five = estimate_gre(_echoes(f, GRE_ECHOES_MS, noise=0.02, rng=rng))[0].field.data
    assert np.std(five) < np.std(two)


@settings(max_examples=20, deadline=None)
@given(hz=st.floats(-160, 160), phi0=st.floats(-1.0, 1.0))
def test_gre_chain_recovers_constant_field(hz, phi0):
    echoes = _echoes(np.full((2, 2, 2), hz), GRE_ECHOES_MS)
    shifted = ComplexVolume(echoes.data * np.exp(1j * phi0), echoes.grid, echoes.echoes_ms)
    res, _ = estimate_gre(shifted)
    np.testing.assert_allclose(res.field.data, hz, atol=1e-9)
