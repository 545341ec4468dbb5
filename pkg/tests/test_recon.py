import math
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psirkit import kvfile
from psirkit.core import uniform_mask
from psirkit.metrics import ssim
from psirkit.phantom import MotionTrace, default_phantom, simulate_coil_maps, simulate_series
from psirkit.preprocess import CoilSensitivities, NoiseCovariance
from psirkit.recon import (
    DivergenceError,
    EncodingOperator,
    ReconParams,
    RefinementConfig,
    SccConfig,
    StepSchedule,
    adjoint,
    encode,
    landweber_reconstruct,
    landweber_step,
    params_from_kv,
    params_to_kv,
    psir_scc,
    reconstruct_single_shot,
    refine,
    scc_profile,
)

from conftest import random_maps


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def unit_operator(rows, cols, accel=1):
    sens = CoilSensitivities(np.ones((1, rows, cols), complex))
    return EncodingOperator(sens, uniform_mask(rows, accel, 8))


# literal reference implementation, one operator at a time


def lit_fft2c(x):
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(x), norm="ortho"))


def lit_ifft2c(k):
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(k), norm="ortho"))


def lit_encode(x, maps, sampled):
    out = []
    for s in maps:
        k = lit_fft2c(s * x)
        for i in range(k.shape[0]):
            if not sampled[i]:
                k[i, :] = 0
        out.append(k)
    return np.array(out)


def lit_adjoint(k, maps, sampled):
    x = np.zeros(k.shape[1:], complex)
    for s, kc in zip(maps, k):
        kc = kc.copy()
        kc[~sampled, :] = 0
        x += np.conj(s) * lit_ifft2c(kc)
    return x


def lit_blur(img, sigma):
    radius = int(4.0 * sigma + 0.5)
    t = np.arange(-radius, radius + 1)
    w = np.exp(-0.5 * t**2 / sigma**2)
    w /= w.sum()
    out = img.astype(float)
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (radius, radius)
        p = np.pad(out, pad, mode="symmetric")
        acc = np.zeros_like(out)
        for j, wj in enumerate(w):
            sl = [slice(None), slice(None)]
            sl[axis] = slice(j, j + out.shape[axis])
            acc += wj * p[tuple(sl)]
        out = acc
    return out


def lit_refine(x, cfg):
    if cfg.kind == "none":
        return 0 * x
    if cfg.kind == "tikhonov":
        return cfg.mu * x
    blur = lit_blur(x.real, cfg.sigma) + 1j * lit_blur(x.imag, cfg.sigma)
    return cfg.beta * (x - blur)


def lit_step(x, k, maps, sampled, lam, cfg):
    # x^{n+1} = x^n - lambda A^H (A x^n - k) - r^n
    return x - lam * lit_adjoint(lit_encode(x, maps, sampled) - k, maps, sampled) - lit_refine(x, cfg)


# ---------------------------------------------------------------- operator


def test_encode_degenerate_is_fft(rng):
    op = unit_operator(8, 10)
    x = crandn(rng, 8, 10)
    np.testing.assert_allclose(encode(x, op)[0], lit_fft2c(x), atol=1e-12)
    np.testing.assert_allclose(adjoint(encode(x, op), op), x, atol=1e-12)


def test_encode_zeroes_unsampled_rows_and_is_linear(rng):
    sens = random_maps(rng, 3, 16, 12)
    op = EncodingOperator(sens, uniform_mask(16, 2, 8))
    x = crandn(rng, 16, 12)
    k = encode(x, op)
    assert np.all(k[:, ~op.mask.sampled, :] == 0)
    np.testing.assert_allclose(encode(2 * x, op), 2 * k, rtol=1e-15, atol=1e-15)
    assert not np.any(adjoint(np.zeros_like(k), op))


@pytest.mark.parametrize("coils,accel", [(1, 1), (3, 2), (8, 3)])
def test_operator_matches_literal(rng, coils, accel):
    sens = random_maps(rng, coils, 12, 14, zero_fraction=0.1)
    op = EncodingOperator(sens, uniform_mask(12, accel, 8))
    x = crandn(rng, 12, 14)
    k = crandn(rng, coils, 12, 14)
    np.testing.assert_allclose(encode(x, op), lit_encode(x, sens.maps, op.mask.sampled), atol=1e-12)
    np.testing.assert_allclose(adjoint(k, op), lit_adjoint(k, sens.maps, op.mask.sampled), atol=1e-12)
    stack = np.stack([x, 2 * x])
    ref = lit_adjoint(lit_encode(x, sens.maps, op.mask.sampled), sens.maps, op.mask.sampled)
    np.testing.assert_allclose(op.normal(stack)[1], 2 * ref, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(coils=st.integers(1, 6), accel=st.sampled_from([1, 2, 3]), rows=st.integers(9, 20), cols=st.integers(5, 18),
       seed=st.integers(0, 2**31))
def test_adjoint_dot_product(coils, accel, rows, cols, seed):
    rng = np.random.default_rng(seed)
    sens = random_maps(rng, coils, rows, cols)
    op = EncodingOperator(sens, uniform_mask(rows, accel, 8))
    x = crandn(rng, rows, cols)
    y = crandn(rng, coils, rows, cols)
    lhs = np.vdot(encode(x, op), y)
    rhs = np.vdot(x, adjoint(y, op))
    assert abs(lhs - rhs) / (np.linalg.norm(x) * np.linalg.norm(y)) < 1e-12


def test_operator_dimension_checks(rng):
    sens = random_maps(rng, 2, 8, 8)
    with pytest.raises(ValueError):
        EncodingOperator(sens, uniform_mask(10, 2, 8))
    op = EncodingOperator(sens, uniform_mask(8, 1, 8))
    with pytest.raises(ValueError):
        encode(np.zeros((8, 9)), op)
    with pytest.raises(ValueError):
        adjoint(np.zeros((3, 8, 8)), op)


# ---------------------------------------------------------------- cascade


@pytest.mark.parametrize(
    "cfg",
    [RefinementConfig(), RefinementConfig("tikhonov", mu=0.07), RefinementConfig("gaussian_residual", beta=0.3, sigma=1.3)],
)
def test_step_matches_literal(rng, cfg):
    sens = random_maps(rng, 4, 16, 20)
    mask = uniform_mask(16, 2, 8)
    op = EncodingOperator(sens, mask)
    x = np.stack([crandn(rng, 16, 20), crandn(rng, 16, 20)])
    k = [crandn(rng, 4, 16, 20), crandn(rng, 4, 16, 20)]
    ahk = np.stack([adjoint(k[0], op), adjoint(k[1], op)])
    got = landweber_step(x, ahk, op, (0.7, 0.4), cfg, 0)
    for c, lam in enumerate((0.7, 0.4)):
        want = lit_step(x[c], k[c], sens.maps, mask.sampled, lam, cfg)
        np.testing.assert_allclose(got[c], want, atol=1e-12)


def test_refinement_overrides_apply_per_iteration(rng):
    cfg = RefinementConfig("tikhonov", mu=0.1, overrides={2: {"mu": 0.5}})
    x = crandn(rng, 2, 4, 4)
    np.testing.assert_allclose(refine(x, cfg, 0), 0.1 * x)
    np.testing.assert_allclose(refine(x, cfg, 2), 0.5 * x)


@pytest.mark.parametrize("kwargs", [dict(kind="unet"), dict(kind="tikhonov", mu=-1.0), dict(sigma=0.0),
                                    dict(beta=math.inf), dict(overrides={1: {"mu": -0.1}})])
def test_refinement_validation(kwargs):
    with pytest.raises(ValueError):
        RefinementConfig(**kwargs)


def test_schedule_validation():
    with pytest.raises(ValueError):
        StepSchedule([0.5, 0.5], [0.5])
    with pytest.raises(ValueError):
        StepSchedule([np.nan], [0.5])
    assert StepSchedule.constant().n_iters == 12
    assert np.all(StepSchedule.constant().lambda_ir == 0.5)


def test_one_unit_step_recovers_truth_from_any_start(rng):
    op = unit_operator(16, 16)
    truth = crandn(rng, 16, 16)
    k = encode(truth, op)
    params = ReconParams(StepSchedule.constant(1, 1.0))
    x_ir, x_pd = landweber_reconstruct(k, k, op, params, x0=(crandn(rng, 16, 16), np.zeros((16, 16))))
    np.testing.assert_allclose(x_ir, truth, atol=1e-12)
    np.testing.assert_allclose(x_pd, truth, atol=1e-12)


def spectral_norm(op, rng, iters=100):
    x = crandn(rng, 1, *op.shape)
    for _ in range(iters):
        y = op.normal(x)
        x = y / np.linalg.norm(y)
    return float(np.vdot(x, op.normal(x)).real)


def test_residual_is_monotone_inside_bound(rng):
    sens = random_maps(rng, 4, 24, 24)
    op = EncodingOperator(sens, uniform_mask(24, 3, 8))
    smax = spectral_norm(op, rng)
    assert smax <= 1.0 + 1e-9  # unit-RSS maps and a 0/1 mask
    truth = crandn(rng, 24, 24)
    k = encode(truth, op)
    for frac in (0.15, 0.5, 0.95):
        lam = frac * 2.0 / smax
        res = []
        landweber_reconstruct(k, k, op, ReconParams(StepSchedule.constant(30, lam)),
                              callback=lambda n, a, b: res.append(np.linalg.norm(encode(a, op) - k)))
        assert all(b <= a * (1 + 1e-12) for a, b in zip(res, res[1:])), lam


def test_divergent_step_is_detected(rng):
    op = unit_operator(16, 16)
    k = encode(crandn(rng, 16, 16), op)
    seen = []
    with pytest.raises(DivergenceError):
        landweber_reconstruct(k, k, op, ReconParams(StepSchedule.constant(50, 2.5)),
                              x0=(crandn(rng, 16, 16), crandn(rng, 16, 16)), callback=lambda n, a, b: seen.append(n))
    assert len(seen) < 50


def test_zero_iterations_returns_adjoint(rng):
    sens = random_maps(rng, 2, 12, 12)
    op = EncodingOperator(sens, uniform_mask(12, 2, 8))
    k = crandn(rng, 2, 12, 12)
    x_ir, _ = landweber_reconstruct(k, k, op, ReconParams(StepSchedule.constant(0)))
    np.testing.assert_array_equal(x_ir, adjoint(k, op))


# ---------------------------------------------------------------- PSIR and SCC


def test_scc_flat_input():
    prof = scc_profile(np.full((32, 32), 3.0 + 0j))
    np.testing.assert_allclose(prof, 1 / 1.05, rtol=1e-12)


def test_scc_zero_input():
    assert np.array_equal(scc_profile(np.zeros((8, 8))), np.ones((8, 8)))


def test_scc_flattens_a_smooth_ramp():
    rows, cols = 128, 128
    ramp = np.tile(np.linspace(1.0, 2.0, cols), (rows, 1))
    corrected = ramp * scc_profile(ramp.astype(complex))
    interior = corrected[32:-32, 32:-32]
    assert interior.max() / interior.min() < 1.2
    assert ramp.max() / ramp.min() == pytest.approx(2.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_scc_positive_and_finite(seed):
    rng = np.random.default_rng(seed)
    x = crandn(rng, 20, 20) * (rng.random((20, 20)) < 0.3)
    p = scc_profile(x)
    assert np.all(np.isfinite(p)) and np.all(p > 0)


def test_scc_config_validation():
    for kw in (dict(sigma=0), dict(eps=1.0), dict(percentile=40)):
        with pytest.raises(ValueError):
            SccConfig(**kw)


def test_psir_preserves_sign():
    ir = np.full((16, 16), -0.5 + 0j)
    pd = np.ones((16, 16), complex)
    np.testing.assert_allclose(psir_scc(ir, pd), -0.5 * scc_profile(pd), rtol=1e-15)


def test_psir_common_phase_removed():
    pd = np.full((16, 16), 1j)
    ir = 1j * np.linspace(-1, 1, 256).reshape(16, 16)
    np.testing.assert_allclose(psir_scc(ir, pd), ir.imag * scc_profile(pd), atol=1e-15)


def test_psir_zero_pd_pixels():
    pd = np.ones((8, 8), complex)
    pd[2, 3] = 0
    out = psir_scc(np.full((8, 8), 2j), pd)
    assert np.all(np.isfinite(out))
    assert out[2, 3] == 0.0


def test_psir_global_phase_invariance(rng):
    ir, pd = crandn(rng, 24, 24), crandn(rng, 24, 24)
    base = psir_scc(ir, pd)
    for phi in rng.uniform(-np.pi, np.pi, 10):
        rot = np.exp(1j * phi)
        assert np.abs(psir_scc(rot * ir, rot * pd) - base).max() < 1e-10


# ---------------------------------------------------------------- pipeline


def test_single_shot_lossless_chain(small_series):
    out = reconstruct_single_shot(small_series, small_series.coils)
    want = psir_scc(small_series.truth_ir, small_series.truth_pd)
    np.testing.assert_allclose(out, want, atol=1e-8 * np.abs(want).max())


def test_single_shot_is_deterministic(small_series):
    a = reconstruct_single_shot(small_series, small_series.coils)
    b = reconstruct_single_shot(small_series, small_series.coils)
    assert np.array_equal(a, b)


def test_landweber_beats_adjoint_on_undersampled_noisy_data():
    rows, cols = 96, 128
    spec = default_phantom(rows, cols, seed=4)
    maps = simulate_coil_maps(4, rows, cols, seed=5)
    mask = uniform_mask(rows, 2, 12)
    s = simulate_series(spec, maps, mask, MotionTrace.static(2), NoiseCovariance(0.01**2 * np.eye(4)), 1, seed=6)
    truth = psir_scc(s.truth_ir, s.truth_pd)
    adj = reconstruct_single_shot(s, maps, ReconParams(StepSchedule.constant(0)))
    cascade = reconstruct_single_shot(s, maps, ReconParams(StepSchedule.constant(12, 1.0)))
    assert ssim(cascade, truth) > ssim(adj, truth) + 0.05


def test_params_kv_roundtrip():
    p = ReconParams(
        StepSchedule([0.1, 0.2, 1 / 3], [0.4, 0.5, 0.6]),
        RefinementConfig("gaussian_residual", beta=0.25, sigma=0.8, overrides={1: {"beta": 0.5}}),
        SccConfig(12.0, 0.1, 95.0),
    )
    back = params_from_kv(kvfile.loads(kvfile.dumps(params_to_kv(p))))
    assert back.steps == p.steps
    assert back.refinement == p.refinement
    assert back.scc == p.scc


def test_params_from_partial_kv_uses_defaults():
    p = params_from_kv({"n_iters": "3"})
    assert p.steps == StepSchedule.constant(3, 0.5)
    assert p.refinement == RefinementConfig()
    with pytest.raises(ValueError):
        params_from_kv({"n_iters": "3", "lambda_ir": "1,2"})
