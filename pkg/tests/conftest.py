"""Shared fixtures: tiny grids and acquisitions sized for fast unit tests."""

import numpy as np
import pytest

from otfwi import (
    Grid,
    SolverConfig,
    VelocityField,
    forward_operator,
    make_schedule,
    ricker_wavelet,
    surface_acquisition,
)


@pytest.fixture(scope="session")
def small_grid():
    return Grid(nx=8, nz=8, dx=10.0, dz=10.0)


@pytest.fixture(scope="session")
def small_geometry(small_grid):
    return surface_acquisition(small_grid, 2, 4, nt=120, dt=1e-3)


@pytest.fixture(scope="session")
def small_wavelet(small_geometry):
    return ricker_wavelet(15.0, small_geometry.nt, small_geometry.dt)


@pytest.fixture(scope="session")
def small_model(small_grid):
    rng = np.random.default_rng(3)
    vals = 2000.0 + 200.0 * rng.random(small_grid.shape)
    return VelocityField(small_grid, vals)


@pytest.fixture(scope="session")
def small_obs(small_model, small_geometry, small_wavelet):
    return forward_operator(small_model, small_geometry, small_wavelet, SolverConfig())


@pytest.fixture(scope="session")
def schedule():
    return make_schedule(50)
