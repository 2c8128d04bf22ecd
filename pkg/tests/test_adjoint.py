import numpy as np
import pytest

from otfwi import (
    Grid,
    MisfitKind,
    MisfitSpec,
    SolverConfig,
    VelocityField,
    forward_jvp,
    forward_operator,
    forward_vjp,
    misfit_and_gradient,
    ricker_wavelet,
    surface_acquisition,
)


def test_zero_residual_zero_gradient(small_model, small_geometry, small_wavelet, small_obs):
    spec = MisfitSpec(kind=MisfitKind.MSE)
    result = misfit_and_gradient(small_model, small_obs, spec, small_geometry, small_wavelet)
    assert result.misfit_value == 0.0
    scale = np.abs(small_model.values).max()
    assert np.abs(result.values).max() < 1e-10 * scale


def test_mse_gradient_matches_finite_differences(small_geometry, small_wavelet, small_obs):
    grid = small_geometry.grid
    rng = np.random.default_rng(11)
    vals = 2100.0 + 150.0 * rng.random(grid.shape)
    v = VelocityField(grid, vals)
    spec = MisfitSpec(kind=MisfitKind.MSE)
    cfg = SolverConfig()
    result = misfit_and_gradient(v, small_obs, spec, small_geometry, small_wavelet, cfg)
    gmax = np.abs(result.values).max()
    h = 1.0
    for ix, iz in [(0, 0), (3, 4), (7, 7), (2, 6), (5, 1)]:
        vp = vals.copy()
        vp[ix, iz] += h
        vm = vals.copy()
        vm[ix, iz] -= h
        fp = misfit_and_gradient(
            VelocityField(grid, vp), small_obs, spec, small_geometry, small_wavelet, cfg
        ).misfit_value
        fm = misfit_and_gradient(
            VelocityField(grid, vm), small_obs, spec, small_geometry, small_wavelet, cfg
        ).misfit_value
        fd = (fp - fm) / (2 * h)
        assert abs(result.values[ix, iz] - fd) <= 1e-4 * gmax


def test_ot_gradient_matches_finite_differences(small_geometry, small_wavelet, small_obs):
    grid = small_geometry.grid
    rng = np.random.default_rng(12)
    vals = 2100.0 + 150.0 * rng.random(grid.shape)
    v = VelocityField(grid, vals)
    spec = MisfitSpec(kind=MisfitKind.OT_ENHANCED, k=100.0, n_quantile=400)
    cfg = SolverConfig()
    result = misfit_and_gradient(v, small_obs, spec, small_geometry, small_wavelet, cfg)
    gmax = np.abs(result.values).max()
    h = 1.0
    for ix, iz in [(1, 2), (6, 5), (4, 4)]:
        vp = vals.copy()
        vp[ix, iz] += h
        vm = vals.copy()
        vm[ix, iz] -= h
        fp = misfit_and_gradient(
            VelocityField(grid, vp), small_obs, spec, small_geometry, small_wavelet, cfg
        ).misfit_value
        fm = misfit_and_gradient(
            VelocityField(grid, vm), small_obs, spec, small_geometry, small_wavelet, cfg
        ).misfit_value
        fd = (fp - fm) / (2 * h)
        assert abs(result.values[ix, iz] - fd) <= 1e-3 * gmax


def test_sigma_weight_scales_gradient_exactly(small_model, small_geometry, small_wavelet, small_obs):
    grid = small_geometry.grid
    vals = small_model.values + 50.0
    v = VelocityField(grid, vals)
    g1 = misfit_and_gradient(
        v, small_obs, MisfitSpec(kind=MisfitKind.MSE, sigma_weight=1.0), small_geometry, small_wavelet
    )
    g2 = misfit_and_gradient(
        v, small_obs, MisfitSpec(kind=MisfitKind.MSE, sigma_weight=2.0), small_geometry, small_wavelet
    )
    np.testing.assert_array_equal(g2.values, 2.0 * g1.values)
    assert g2.misfit_value == pytest.approx(2.0 * g1.misfit_value, rel=1e-15)


def test_adjoint_dot_product_identity():
    g = Grid(10, 9, 10.0, 10.0)
    rng = np.random.default_rng(7)
    v = VelocityField(g, 2000.0 + 250.0 * rng.random(g.shape))
    geom = surface_acquisition(g, 2, 5, nt=90, dt=1e-3)
    w = ricker_wavelet(15.0, 90, 1e-3)
    cfg = SolverConfig()
    dv = rng.standard_normal(g.shape)
    dd = rng.standard_normal((geom.n_sources, geom.n_receivers, geom.nt))
    jv = forward_jvp(v, dv, geom, w, cfg)
    jtd = forward_vjp(v, dd, geom, w, cfg)
    lhs = float(np.sum(jv * dd))
    rhs = float(np.sum(dv * jtd))
    assert abs(lhs - rhs) <= 1e-8 * max(abs(lhs), abs(rhs))


def test_jvp_matches_directional_finite_difference():
    g = Grid(10, 9, 10.0, 10.0)
    rng = np.random.default_rng(8)
    v0 = 2000.0 + 250.0 * rng.random(g.shape)
    geom = surface_acquisition(g, 1, 1, nt=90, dt=1e-3)
    w = ricker_wavelet(15.0, 90, 1e-3)
    cfg = SolverConfig()
    dv = rng.standard_normal(g.shape)
    jv = forward_jvp(VelocityField(g, v0), dv, geom, w, cfg)
    h = 0.05
    fp = forward_operator(VelocityField(g, v0 + h * dv), geom, w, cfg).values
    fm = forward_operator(VelocityField(g, v0 - h * dv), geom, w, cfg).values
    fd = (fp - fm) / (2 * h)
    assert np.abs(jv - fd).max() <= 1e-5 * np.abs(fd).max()


def test_vjp_rejects_bad_cotangent_shape(small_model, small_geometry, small_wavelet):
    with pytest.raises(ValueError):
        forward_vjp(small_model, np.zeros((1, 2, 3)), small_geometry, small_wavelet)


def test_gradient_container_rejects_nonfinite():
    from otfwi import MisfitGradient

    with pytest.raises(ValueError):
        MisfitGradient(values=np.array([[np.nan]]), misfit_value=1.0)
    with pytest.raises(ValueError):
        MisfitGradient(values=np.ones((2, 2)), misfit_value=float("inf"))
