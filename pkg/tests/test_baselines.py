import numpy as np
import pytest

from otfwi import (
    DescentConfig,
    MisfitKind,
    MisfitSpec,
    VelocityField,
    misfit_and_gradient,
    otwe_tv_descent,
    tv_indicator,
    tv_subgradient,
    w2_tv_descent,
)
from otfwi.baselines import ITERATE_HEADER
from otfwi.wavesim import SolverConfig


def test_tv_subgradient_constant_field_is_zero():
    np.testing.assert_array_equal(tv_subgradient(np.full((4, 6), 2.0)), np.zeros((4, 6)))


def test_tv_subgradient_matches_directional_derivative():
    # away from kinks the TV is smooth, so the subgradient is the gradient
    rng = np.random.default_rng(0)
    v = rng.standard_normal((5, 5))
    g = tv_subgradient(v)
    h = 1e-7
    for idx in [(0, 0), (2, 3), (4, 4), (1, 2)]:
        e = np.zeros((5, 5))
        e[idx] = 1.0
        fd = (tv_indicator(v + h * e) - tv_indicator(v - h * e)) / (2 * h)
        assert g[idx] == pytest.approx(fd, abs=1e-7)


def test_tv_subgradient_scale_invariant_signs():
    rng = np.random.default_rng(1)
    v = rng.standard_normal((4, 7))
    np.testing.assert_array_equal(tv_subgradient(3.0 * v), tv_subgradient(v))


def test_tv_subgradient_convexity_inequality():
    # TV(w) >= TV(v) + <g, w - v> including plateaus where sign(0) = 0
    rng = np.random.default_rng(2)
    v = rng.standard_normal((5, 5))
    v[1:3, :] = 0.4  # flat patch exercises the zero-diff branch
    g = tv_subgradient(v)
    base = tv_indicator(v)
    for trial in range(20):
        w = rng.standard_normal((5, 5))
        assert tv_indicator(w) >= base + float(np.sum(g * (w - v))) - 1e-12


def test_tv_subgradient_rejects_bad_shapes():
    with pytest.raises(ValueError):
        tv_subgradient(np.zeros(4))
    with pytest.raises(ValueError):
        tv_subgradient(np.zeros((5, 1)))


def test_descent_config_validation():
    for bad in (
        dict(rho0=0.0),
        dict(rho0=1.0, tv_weight=-0.1),
        dict(rho0=1.0, max_iters=0),
        dict(rho0=1.0, v_floor=0.0),
        dict(rho0=1.0, v_floor=3000.0, v_ceil=2000.0),
        dict(rho0=1.0, c=0.0),
        dict(rho0=1.0, eps=0.0),
        dict(rho0=1.0, gamma=-1.0),
        dict(rho0=1.0, tau=-1.0),
        dict(rho0=1.0, kappa_max=0.2),
    ):
        with pytest.raises(ValueError):
            DescentConfig(**bad)


def test_truth_is_a_fixed_point(small_model, small_obs, small_geometry, small_wavelet):
    cfg = DescentConfig(rho0=1e5, tv_weight=0.0, max_iters=3)
    v_rec, rows = w2_tv_descent(
        small_model, small_obs, small_geometry, small_wavelet, SolverConfig(), cfg,
        v_true=small_model,
    )
    scale = float(np.abs(small_model.values).max())
    assert np.abs(v_rec.values - small_model.values).max() < 1e-8 * scale
    assert len(rows) == 3
    for row in rows:
        assert row.misfit <= 1e-12
        assert row.e_l2 < 1e-12


def test_descent_reduces_misfit_along_gradient(small_model, small_obs, small_geometry, small_wavelet):
    v0 = VelocityField(small_geometry.grid, np.full(small_geometry.grid.shape, 2100.0))
    spec = MisfitSpec(kind=MisfitKind.OT_RAW, k=0.0, n_quantile=400)
    ref = misfit_and_gradient(v0, small_obs, spec, small_geometry, small_wavelet, SolverConfig())
    rho0 = 2.0 / float(np.abs(ref.values).max())  # ~2 m/s leading step
    cfg = DescentConfig(rho0=rho0, tv_weight=0.0, max_iters=3, n_quantile=400)
    _, rows = w2_tv_descent(
        v0, small_obs, small_geometry, small_wavelet, SolverConfig(), cfg,
        v_true=small_model,
    )
    assert rows[-1].misfit < rows[0].misfit
    assert rows[0].misfit == pytest.approx(ref.misfit_value, rel=1e-12)


def test_iterate_log_columns(small_model, small_obs, small_geometry, small_wavelet):
    v0 = VelocityField(small_geometry.grid, np.full(small_geometry.grid.shape, 2080.0))
    cfg = DescentConfig(rho0=1e4, tv_weight=0.03, max_iters=2, n_quantile=300)
    _, rows = otwe_tv_descent(
        v0, small_obs, small_geometry, small_wavelet, SolverConfig(), cfg,
        v_true=small_model,
    )
    assert [r.step for r in rows] == [1, 2]
    assert len(ITERATE_HEADER) == 7
    for row in rows:
        assert row.objective == pytest.approx(row.misfit + 0.03 * row.tv, rel=1e-12)
        assert np.isfinite(row.e_l2) and np.isfinite(row.psnr)
        assert np.isnan(row.ssim)  # 8x8 grid sits below the ssim window


def test_metrics_nan_without_truth(small_obs, small_geometry, small_wavelet):
    v0 = VelocityField(small_geometry.grid, np.full(small_geometry.grid.shape, 2080.0))
    cfg = DescentConfig(rho0=1e3, max_iters=1, n_quantile=300)
    _, rows = w2_tv_descent(v0, small_obs, small_geometry, small_wavelet, SolverConfig(), cfg)
    assert np.isnan(rows[0].e_l2) and np.isnan(rows[0].psnr) and np.isnan(rows[0].ssim)


def test_flat_preconditioner_matches_plain_step(small_model, small_obs, small_geometry, small_wavelet):
    # gamma = 0 and a huge tau collapse rho * D to the scalar rho0
    v0 = VelocityField(small_geometry.grid, np.full(small_geometry.grid.shape, 2150.0))
    base = dict(rho0=2e4, tv_weight=0.01, max_iters=3, n_quantile=300)
    plain, rows_p = otwe_tv_descent(
        v0, small_obs, small_geometry, small_wavelet, SolverConfig(),
        DescentConfig(preconditioned=False, **base),
    )
    flat, rows_f = otwe_tv_descent(
        v0, small_obs, small_geometry, small_wavelet, SolverConfig(),
        DescentConfig(preconditioned=True, gamma=0.0, tau=1e9, **base),
    )
    np.testing.assert_array_equal(plain.values, flat.values)
    assert [r.misfit for r in rows_p] == [r.misfit for r in rows_f]


def test_preconditioning_changes_trajectory(small_model, small_obs, small_geometry, small_wavelet):
    v0 = VelocityField(small_geometry.grid, np.full(small_geometry.grid.shape, 2150.0))
    base = dict(rho0=2e4, max_iters=2, n_quantile=300)
    plain, _ = otwe_tv_descent(
        v0, small_obs, small_geometry, small_wavelet, SolverConfig(),
        DescentConfig(preconditioned=False, **base),
    )
    precond, _ = otwe_tv_descent(
        v0, small_obs, small_geometry, small_wavelet, SolverConfig(),
        DescentConfig(preconditioned=True, gamma=0.8, tau=1e9, **base),
    )
    assert np.any(plain.values != precond.values)


def test_iterates_respect_brackets(small_obs, small_geometry, small_wavelet):
    v0 = VelocityField(small_geometry.grid, np.full(small_geometry.grid.shape, 2000.0))
    cfg = DescentConfig(rho0=1e12, max_iters=2, v_floor=1900.0, v_ceil=2300.0, n_quantile=300)
    v_rec, _ = w2_tv_descent(v0, small_obs, small_geometry, small_wavelet, SolverConfig(), cfg)
    assert v_rec.values.min() >= 1900.0
    assert v_rec.values.max() <= 2300.0


def test_solver_blowup_truncates_log(small_geometry, small_wavelet, small_obs):
    # the shared dt is CFL-stable below ~4990 m/s; a 5500 m/s start fails on
    # the first evaluation, the loop absorbs it and hands back the iterate
    v0 = VelocityField(small_geometry.grid, np.full(small_geometry.grid.shape, 5500.0))
    cfg = DescentConfig(rho0=1e4, max_iters=4, n_quantile=300)
    v_rec, rows = w2_tv_descent(v0, small_obs, small_geometry, small_wavelet, SolverConfig(), cfg)
    assert len(rows) == 0
    np.testing.assert_array_equal(v_rec.values, np.full(small_geometry.grid.shape, 5500.0))
