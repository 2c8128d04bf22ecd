import numpy as np
import pytest

from otfwi import (
    FieldScaler,
    Grid,
    VelocityField,
    clean_estimate,
    forward_noising,
    gaussian_score,
    gmm_score,
    make_schedule,
    scale_from_model,
    scale_to_model,
)


def test_schedule_single_step():
    s = make_schedule(1, 1e-4, 1e-4)
    assert s.alpha_bar[0] == pytest.approx(1.0 - 1e-4, rel=1e-15)
    assert s.sigma_hat[0] == 0.0  # no posterior noise on the first step


def test_schedule_default_terminal_alpha_bar():
    s = make_schedule(1000)
    assert s.alpha_bar[-1] < 1e-4
    expect = np.cumprod(1.0 - np.linspace(1e-4, 0.02, 1000))
    np.testing.assert_allclose(s.alpha_bar, expect, rtol=1e-14)


def test_schedule_monotone_and_bounds():
    s = make_schedule(257, 5e-4, 0.015)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.beta > 0) & (s.beta < 1))
    np.testing.assert_allclose(s.alpha, 1.0 - s.beta, rtol=0)
    # sigma_hat^2 = beta * (1 - abar_prev) / (1 - abar)
    abar_prev = np.concatenate([[1.0], s.alpha_bar[:-1]])
    np.testing.assert_allclose(
        s.sigma_hat**2, s.beta * (1 - abar_prev) / (1 - s.alpha_bar), rtol=1e-13
    )


def test_schedule_validation():
    with pytest.raises(ValueError):
        make_schedule(0)
    with pytest.raises(ValueError):
        make_schedule(10, 0.0, 0.02)
    with pytest.raises(ValueError):
        make_schedule(10, 0.05, 0.02)
    with pytest.raises(ValueError):
        make_schedule(10, kind="cosine")


def test_schedule_step_accessors(schedule):
    n = schedule.n
    assert schedule.alpha_bar_at(0) == 1.0
    assert schedule.alpha_bar_at(1) == schedule.alpha_bar[0]
    assert schedule.beta_at(n) == schedule.beta[-1]
    with pytest.raises(ValueError):
        schedule.beta_at(0)
    with pytest.raises(ValueError):
        schedule.alpha_bar_at(n + 1)


def test_forward_noising_reparameterization(schedule):
    x0 = np.random.default_rng(0).standard_normal((6, 6))
    i = 20
    out = forward_noising(x0, i, schedule, seed=99)
    z = np.random.default_rng(99).standard_normal((6, 6))
    abar = schedule.alpha_bar_at(i)
    np.testing.assert_allclose(out, np.sqrt(abar) * x0 + np.sqrt(1 - abar) * z, rtol=1e-15)
    np.testing.assert_array_equal(out, forward_noising(x0, i, schedule, seed=99))


def test_forward_noising_moments(schedule):
    x0 = np.full((4, 4), 0.7)
    i = 35
    abar = schedule.alpha_bar_at(i)
    draws = np.stack([forward_noising(x0, i, schedule, seed=s) for s in range(10_000)])
    n = draws.size
    se_mean = np.sqrt((1 - abar) / n)
    assert abs(draws.mean() - np.sqrt(abar) * 0.7) <= 3 * se_mean
    se_var = (1 - abar) * np.sqrt(2.0 / n)
    assert abs(draws.var() - (1 - abar)) <= 3 * se_var


def test_clean_estimate_matches_gaussian_posterior_mean(schedule):
    rng = np.random.default_rng(1)
    mu = rng.standard_normal((5, 5))
    s2 = 0.34
    model = gaussian_score(mu, s2, schedule)
    for i in rng.integers(1, schedule.n + 1, size=10):
        i = int(i)
        x = rng.standard_normal((5, 5))
        abar = schedule.alpha_bar_at(i)
        expect = ((1 - abar) * mu + np.sqrt(abar) * s2 * x) / (abar * s2 + 1 - abar)
        np.testing.assert_allclose(clean_estimate(x, i, model, schedule), expect, atol=1e-10)


def test_clean_estimate_zero_score_identity(schedule):
    class Zero:
        def score(self, x, i):
            return np.zeros_like(x)

        def vjp(self, x, i, c):
            return np.zeros_like(c)

    x = np.random.default_rng(2).standard_normal((4, 4))
    out = clean_estimate(x, 3, Zero(), schedule)
    np.testing.assert_allclose(out, x / np.sqrt(schedule.alpha_bar_at(3)), rtol=1e-15)


def test_clean_estimate_underflow_guard():
    s = make_schedule(3000, 1e-2, 0.1)  # alpha_bar falls to ~1e-72

    class Zero:
        def score(self, x, i):
            return np.zeros_like(x)

    assert s.alpha_bar[-1] < 1e-12
    with pytest.raises(ValueError):
        clean_estimate(np.zeros((2, 2)), 3000, Zero(), s)


def test_gaussian_score_closed_form(schedule):
    mu = np.full((3, 3), 0.4)
    s2 = 0.25
    model = gaussian_score(mu, s2, schedule)
    i = 11
    abar = schedule.alpha_bar_at(i)
    x = np.random.default_rng(3).standard_normal((3, 3))
    expect = -(x - np.sqrt(abar) * mu) / (abar * s2 + 1 - abar)
    np.testing.assert_allclose(model.score(x, i), expect, rtol=1e-14)


def test_gmm_score_symmetry(schedule):
    m = np.ones((4, 4)) * 0.8
    model = gmm_score([(0.5, m, 0.2), (0.5, -m, 0.2)], schedule)
    out = model.score(np.zeros((4, 4)), 7)
    np.testing.assert_allclose(out, 0.0, atol=1e-14)


@pytest.mark.parametrize("builder", ["gaussian", "gmm"])
def test_score_vjp_matches_finite_differences(builder, schedule):
    rng = np.random.default_rng(4)
    shape = (4, 4)
    if builder == "gaussian":
        model = gaussian_score(rng.standard_normal(shape), 0.3, schedule)
    else:
        model = gmm_score(
            [
                (0.3, rng.standard_normal(shape), 0.2),
                (0.7, rng.standard_normal(shape), 0.5),
            ],
            schedule,
        )
    x = rng.standard_normal(shape)
    cot = rng.standard_normal(shape)
    i = 9
    got = model.vjp(x, i, cot)
    h = 1e-6
    fd = np.zeros(shape)
    for j in range(shape[0]):
        for kk in range(shape[1]):
            xp = x.copy()
            xp[j, kk] += h
            xm = x.copy()
            xm[j, kk] -= h
            # column (j, kk) of the Jacobian dotted with cot = (J^T cot)[j, kk]
            fd[j, kk] = np.sum((model.score(xp, i) - model.score(xm, i)) / (2 * h) * cot)
    np.testing.assert_allclose(got, fd, atol=1e-6)


def test_vjp_linearity(schedule):
    rng = np.random.default_rng(5)
    model = gmm_score(
        [(0.4, rng.standard_normal((3, 3)), 0.3), (0.6, rng.standard_normal((3, 3)), 0.7)],
        schedule,
    )
    x = rng.standard_normal((3, 3))
    c1 = rng.standard_normal((3, 3))
    c2 = rng.standard_normal((3, 3))
    a = 2.7
    lhs = model.vjp(x, 5, a * c1 + c2)
    rhs = a * model.vjp(x, 5, c1) + model.vjp(x, 5, c2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_gmm_validation(schedule):
    with pytest.raises(ValueError):
        gmm_score([], schedule)
    with pytest.raises(ValueError):
        gmm_score([(0.5, np.zeros((2, 2)), 0.1)], schedule)  # weights must sum to 1
    with pytest.raises(ValueError):
        gmm_score([(1.0, np.zeros((2, 2)), -0.1)], schedule)
    with pytest.raises(ValueError):
        gmm_score([(0.5, np.zeros((2, 2)), 0.1), (0.5, np.zeros((3, 3)), 0.1)], schedule)


def test_denoising_error_matches_posterior_variance(schedule):
    # forward-noise then clean-estimate: squared error concentrates at the
    # posterior variance (1-abar) s^2 / (abar s^2 + 1 - abar) per node
    rng = np.random.default_rng(6)
    mu = np.zeros((4, 4))
    s2 = 0.5
    model = gaussian_score(mu, s2, schedule)
    i = 25
    abar = schedule.alpha_bar_at(i)
    var_post = (1 - abar) * s2 / (abar * s2 + 1 - abar)
    trials = 10_000
    err2 = np.empty(trials)
    for t in range(trials):
        x0 = mu + np.sqrt(s2) * np.random.default_rng(2 * t).standard_normal((4, 4))
        xi = forward_noising(x0, i, schedule, seed=2 * t + 1)
        err2[t] = np.mean((clean_estimate(xi, i, model, schedule) - x0) ** 2)
    n = trials * 16
    se = var_post * np.sqrt(2.0 / n)
    assert abs(err2.mean() - var_post) <= 3 * se


def test_scaler_round_trip():
    sc = FieldScaler(1500.0, 4500.0)
    assert scale_to_model(np.array([[1500.0]]), sc)[0, 0] == -1.0
    assert scale_to_model(np.array([[4500.0]]), sc)[0, 0] == 1.0
    assert scale_to_model(np.array([[3000.0]]), sc)[0, 0] == 0.0
    rng = np.random.default_rng(7)
    v = 1500.0 + 3000.0 * rng.random((6, 6))
    x = scale_to_model(v, sc)
    np.testing.assert_allclose(scale_from_model(x, sc), v, atol=1e-12)
    with pytest.raises(ValueError):
        FieldScaler(2000.0, 2000.0)


def test_scaler_wraps_velocity_field():
    sc = FieldScaler(1000.0, 3000.0)
    g = Grid(4, 4, 10.0, 10.0)
    v = VelocityField(g, np.full((4, 4), 2500.0))
    x = scale_to_model(v, sc)
    assert x.shape == (4, 4)
    back = scale_from_model(x, sc, g)
    assert isinstance(back, VelocityField)
    np.testing.assert_allclose(back.values, v.values, atol=1e-12)
    signed = scale_from_model(np.full((4, 4), -2.0), sc, g)
    assert not signed.physical
