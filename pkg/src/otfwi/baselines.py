"""Deterministic first-order descent baselines, no learned prior.

Both loops minimize data misfit plus alpha * TV with a fixed step and clamp
each iterate to a physical velocity bracket.  The plain variant uses the raw
squared-transport misfit (no amplitude weighting); the enhanced variant uses
the weighted unsquared objective and can precondition the step with the same
rho/kappa machinery the guided sampler uses, evaluated at the current iterate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adjoint import misfit_and_gradient
from .geometry import AcquisitionGeometry, SourceWavelet, VelocityField
from .metrics import psnr, rel_l2_error, ssim
from .misfit import MisfitKind, MisfitSpec
from .samplers import diag_preconditioner, tv_indicator
from .wavesim import DivergenceError, SolverConfig, StabilityError

__all__ = [
    "DescentConfig",
    "IterateRow",
    "tv_subgradient",
    "w2_tv_descent",
    "otwe_tv_descent",
]


@dataclass(frozen=True)
class DescentConfig:
    """Step size, TV weight, iteration budget and the physical bracket."""

    rho0: float
    tv_weight: float = 0.0
    max_iters: int = 50
    preconditioned: bool = False
    gamma: float = 0.5
    eps: float = 1e-6
    kappa_max: float = 1e3
    c: float = 0.1
    tau: float = 0.0
    v_floor: float = 300.0
    v_ceil: float = 6000.0
    k: float = 100.0
    n_quantile: int = 1000

    def __post_init__(self):
        if self.rho0 <= 0:
            raise ValueError("rho0 must be positive")
        if self.tv_weight < 0:
            raise ValueError("tv_weight must be >= 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not (0 < self.v_floor < self.v_ceil):
            raise ValueError("need 0 < v_floor < v_ceil")
        if self.c <= 0 or self.eps <= 0:
            raise ValueError("c and eps must be positive")
        if self.gamma < 0 or self.tau < 0:
            raise ValueError("gamma and tau must be >= 0")
        if self.kappa_max < 1:
            raise ValueError("kappa_max must be >= 1")


@dataclass(frozen=True)
class IterateRow:
    step: int
    objective: float
    misfit: float
    tv: float
    e_l2: float
    psnr: float
    ssim: float


ITERATE_HEADER = ("step", "objective", "misfit", "tv", "e_l2", "psnr", "ssim")


def tv_subgradient(v: np.ndarray) -> np.ndarray:
    """Minimal-norm subgradient of the mean-absolute-difference TV: signs of
    the forward differences, differenced back onto the nodes, sign(0) = 0."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2 or min(v.shape) < 2:
        raise ValueError("TV needs a 2D field at least 2x2")
    g = np.zeros_like(v)
    sx = np.sign(np.diff(v, axis=0))
    g[1:, :] += sx
    g[:-1, :] -= sx
    sz = np.sign(np.diff(v, axis=1))
    g[:, 1:] += sz
    g[:, :-1] -= sz
    return g / v.size


def _descent_loop(v_init, d_obs, geometry, wavelet, solver_config, config,
                  misfit_spec, preconditioned, v_true, jobs):
    v = np.asarray(v_init.values if isinstance(v_init, VelocityField) else v_init, dtype=np.float64)
    v = np.clip(v, config.v_floor, config.v_ceil)
    truth = None
    if v_true is not None:
        truth = v_true.values if isinstance(v_true, VelocityField) else np.asarray(v_true)
    rows = []
    for it in range(1, config.max_iters + 1):
        field = VelocityField(geometry.grid, v)
        try:
            result = misfit_and_gradient(
                field, d_obs, misfit_spec, geometry, wavelet, solver_config, jobs=jobs
            )
        except (StabilityError, DivergenceError):
            # Leave the log as-is; the caller still gets the last safe iterate.
            break
        tv = tv_indicator(v)
        objective = result.misfit_value + config.tv_weight * tv
        if truth is not None:
            e_l2 = rel_l2_error(v, truth)
            p = psnr(v, truth)
            s = ssim(v, truth) if min(truth.shape) >= 11 else float("nan")
        else:
            e_l2 = p = s = float("nan")
        rows.append(IterateRow(it, objective, result.misfit_value, tv, e_l2, p, s))

        direction = result.values + config.tv_weight * tv_subgradient(v)
        if preconditioned:
            rho = config.rho0 * float(np.exp(-max(tv - config.tau, 0.0) / config.c))
            step = rho * diag_preconditioner(result.values, config.gamma, config.eps, config.kappa_max)
        else:
            step = config.rho0
        v = np.clip(v - step * direction, config.v_floor, config.v_ceil)
    return VelocityField(geometry.grid, v), tuple(rows)


def w2_tv_descent(
    v_init,
    d_obs,
    geometry: AcquisitionGeometry,
    wavelet: SourceWavelet,
    solver_config: SolverConfig,
    config: DescentConfig,
    v_true=None,
    jobs: int = 1,
) -> tuple[VelocityField, tuple[IterateRow, ...]]:
    """Fixed-step descent on the normalized squared-transport misfit of raw
    (unweighted) trace densities plus alpha * TV."""
    spec = MisfitSpec(kind=MisfitKind.OT_RAW, k=0.0, n_quantile=config.n_quantile)
    return _descent_loop(v_init, d_obs, geometry, wavelet, solver_config, config,
                         spec, preconditioned=False, v_true=v_true, jobs=jobs)


def otwe_tv_descent(
    v_init,
    d_obs,
    geometry: AcquisitionGeometry,
    wavelet: SourceWavelet,
    solver_config: SolverConfig,
    config: DescentConfig,
    v_true=None,
    jobs: int = 1,
) -> tuple[VelocityField, tuple[IterateRow, ...]]:
    """Descent on the amplitude-weighted unsquared transport misfit plus
    alpha * TV; with preconditioned=True the step becomes rho(v) * D(v),
    both built from the current iterate."""
    spec = MisfitSpec(kind=MisfitKind.OT_ENHANCED, k=config.k, n_quantile=config.n_quantile)
    return _descent_loop(v_init, d_obs, geometry, wavelet, solver_config, config,
                         spec, preconditioned=config.preconditioned, v_true=v_true, jobs=jobs)
