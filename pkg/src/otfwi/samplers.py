"""Guided reverse-diffusion sampling for velocity inversion.

Two entry points share one engine.  ``dps_sample`` runs the classic posterior
sampler: ancestral step plus a scalar-weighted data-misfit gradient at the
clean estimate.  ``otwepdps_sample`` replaces the scalar with a per-step,
per-cell metric rho_i * D_i, where rho_i decays exponentially once the clean
estimate's total variation exceeds a threshold and D_i up-weights cells whose
misfit sensitivity is small.

The diffusion state lives in normalized model units ([-1, 1] bracket); the
wave solver needs m/s.  A Potential wraps that conversion: it maps the clean
estimate to physical velocity, evaluates the configured misfit and its
adjoint gradient, and maps the gradient back through the scaler's constant
Jacobian.  The TV indicator and the preconditioner are evaluated on the
normalized clean estimate, consistent with the misfit gradient they modulate.

The guidance gradient with respect to the current state v_i composes through
the clean-estimate map: exact mode uses the score model's vjp,
(g + (1 - abar) * J_score^T g) / sqrt(abar); the cheaper scaled_identity mode
keeps only g / sqrt(abar).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

from .adjoint import misfit_and_gradient
from .diffusion import DiffusionSchedule, FieldScaler, ScoreModel, clean_estimate, scale_from_model
from .geometry import AcquisitionGeometry, Grid, SourceWavelet, VelocityField
from .metrics import psnr, rel_l2_error, ssim
from .misfit import MisfitKind, MisfitSpec
from .wavesim import SolverConfig

__all__ = [
    "GuidanceConfig",
    "SamplerTrace",
    "Potential",
    "make_pde_potential",
    "tv_indicator",
    "guidance_scale",
    "diag_preconditioner",
    "guidance_gradient",
    "ancestral_step",
    "dps_sample",
    "otwepdps_sample",
]

_CHAIN_RULE_MODES = ("exact_vjp", "scaled_identity")


@dataclass(frozen=True)
class GuidanceConfig:
    """Knobs for both samplers.

    rho0/c/tau/gamma/eps/kappa_max drive the preconditioned sampler; zeta is
    the scalar step of the plain posterior sampler.  rho0 = 0 and zeta = 0
    are allowed and turn guidance off (unconditional sampling).
    """

    rho0: float = 1.0
    c: float = 0.1
    tau: float = 0.0
    gamma: float = 0.5
    eps: float = 1e-6
    kappa_max: float = 1e3
    zeta: float = 1.0
    misfit: MisfitSpec = field(default_factory=MisfitSpec)
    chain_rule: str = "exact_vjp"

    def __post_init__(self):
        if self.rho0 < 0:
            raise ValueError("rho0 must be >= 0")
        if self.c <= 0:
            raise ValueError("c must be positive")
        if self.tau < 0:
            raise ValueError("tau must be >= 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.kappa_max < 1:
            raise ValueError("kappa_max must be >= 1")
        if self.zeta < 0:
            raise ValueError("zeta must be >= 0")
        if self.chain_rule not in _CHAIN_RULE_MODES:
            raise ValueError(f"chain_rule must be one of {_CHAIN_RULE_MODES}")


@dataclass(frozen=True)
class TraceRow:
    step: int
    misfit: float
    tv: float
    rho: float
    e_l2: float
    psnr: float
    ssim: float


@dataclass(frozen=True)
class SamplerTrace:
    """One row per executed reverse step, ordered i = N ... 1."""

    rows: tuple[TraceRow, ...]

    HEADER = ("step", "misfit", "tv", "rho", "e_l2", "psnr", "ssim")

    def __len__(self):
        return len(self.rows)

    def columns(self) -> list[list]:
        return [
            [r.step, r.misfit, r.tv, r.rho, r.e_l2, r.psnr, r.ssim]
            for r in self.rows
        ]


@runtime_checkable
class Potential(Protocol):
    """Data-misfit term evaluated on a normalized clean estimate."""

    def value_and_grad(self, x0: np.ndarray) -> tuple[float, np.ndarray]: ...


class _PdePotential:
    """Wave-equation misfit behind the Potential protocol.

    The clean estimate is clamped to the scaler bracket before it hits the
    solver (CFL and positivity need real velocities); the gradient at clamped
    cells is zeroed, the subgradient of the clamp.
    """

    def __init__(self, d_obs, geometry, wavelet, solver_config, misfit, scaler, jobs):
        if scaler.v_min <= 0:
            raise ValueError("scaler bracket must be positive for the wave solver")
        self.d_obs = d_obs
        self.geometry = geometry
        self.wavelet = wavelet
        self.solver_config = solver_config
        self.misfit = misfit
        self.scaler = scaler
        self.jobs = jobs

    def value_and_grad(self, x0: np.ndarray) -> tuple[float, np.ndarray]:
        inside = np.abs(x0) <= 1.0
        clamped = np.clip(x0, -1.0, 1.0)
        v_phys = scale_from_model(clamped, self.scaler, self.geometry.grid)
        result = misfit_and_gradient(
            v_phys, self.d_obs, self.misfit, self.geometry, self.wavelet,
            self.solver_config, jobs=self.jobs,
        )
        grad = result.values * (self.scaler.span / 2.0) * inside
        return result.misfit_value, grad


def make_pde_potential(
    d_obs: np.ndarray,
    geometry: AcquisitionGeometry,
    wavelet: SourceWavelet,
    solver_config: SolverConfig,
    misfit: MisfitSpec,
    scaler: FieldScaler,
    jobs: int = 1,
) -> Potential:
    return _PdePotential(d_obs, geometry, wavelet, solver_config, misfit, scaler, jobs)


def tv_indicator(v: np.ndarray) -> float:
    """Mean absolute forward difference over both axes; boundary rows/columns
    without a forward neighbor contribute zero."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2 or min(v.shape) < 2:
        raise ValueError("TV needs a 2D field at least 2x2")
    total = np.sum(np.abs(np.diff(v, axis=0))) + np.sum(np.abs(np.diff(v, axis=1)))
    return float(total / v.size)


def guidance_scale(tv_value: float, config: GuidanceConfig) -> float:
    """rho0 below the TV threshold, exponential decay above it."""
    excess = max(tv_value - config.tau, 0.0)
    return config.rho0 * float(np.exp(-excess / config.c))


def diag_preconditioner(g: np.ndarray, gamma: float, eps: float, kappa_max: float) -> np.ndarray:
    """Per-cell weights ((max|g| + eps) / (|g| + eps))^gamma clipped to
    [1, kappa_max]; equals 1 at the most sensitive cell."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    mag = np.abs(np.asarray(g, dtype=np.float64))
    kappa = ((mag.max() + eps) / (mag + eps)) ** gamma
    return np.clip(kappa, 1.0, kappa_max)


def guidance_gradient(
    v_i: np.ndarray,
    i: int,
    model: ScoreModel,
    cotangent: np.ndarray,
    schedule: DiffusionSchedule,
    mode: str = "exact_vjp",
    allow_fallback: bool = False,
) -> np.ndarray:
    """Pull a clean-estimate cotangent back to the noised state.

    exact_vjp differentiates through the Tweedie map; scaled_identity keeps
    only its leading 1/sqrt(abar) factor.  A model without a vjp errors in
    exact mode unless allow_fallback is set, which downgrades with a warning.
    """
    if mode not in _CHAIN_RULE_MODES:
        raise ValueError(f"mode must be one of {_CHAIN_RULE_MODES}")
    abar = schedule.alpha_bar_at(i)
    root = np.sqrt(abar)
    if mode == "exact_vjp":
        if not hasattr(model, "vjp"):
            if not allow_fallback:
                raise TypeError("score model exposes no vjp; use scaled_identity or allow_fallback")
            warnings.warn("score model has no vjp; falling back to scaled_identity", RuntimeWarning)
        else:
            pulled = model.vjp(v_i, i, cotangent)
            return (cotangent + (1.0 - abar) * pulled) / root
    return np.asarray(cotangent, dtype=np.float64) / root


def ancestral_step(
    v_i: np.ndarray, v0_hat: np.ndarray, i: int, schedule: DiffusionSchedule, z: np.ndarray
) -> np.ndarray:
    """Posterior-mean combination of the state and the clean estimate plus
    sigma_hat noise; deterministic at i = 1 where sigma_hat vanishes."""
    alpha = schedule.alpha_at(i)
    beta = schedule.beta_at(i)
    abar = schedule.alpha_bar_at(i)
    abar_prev = schedule.alpha_bar_at(i - 1)
    coef_state = np.sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar)
    coef_clean = np.sqrt(abar_prev) * beta / (1.0 - abar)
    return coef_state * v_i + coef_clean * v0_hat + schedule.sigma_hat_at(i) * z


def _metric_snapshot(x0_model, scaler, grid, v_true):
    if v_true is None:
        return (float("nan"),) * 3
    rec = scale_from_model(x0_model, scaler, None)
    truth = v_true.values if isinstance(v_true, VelocityField) else np.asarray(v_true)
    return (
        rel_l2_error(rec, truth),
        psnr(rec, truth),
        ssim(rec, truth) if min(truth.shape) >= 11 else float("nan"),
    )


def _guided_reverse(
    model, schedule, potential, config, seed, scaler, grid, v_true, scalar_step
):
    rng = np.random.default_rng(seed)
    shape = grid.shape
    x = rng.standard_normal(shape)
    guided = (config.zeta > 0) if scalar_step else (config.rho0 > 0)
    rows = []
    for i in range(schedule.n, 0, -1):
        x0_hat = clean_estimate(x, i, model, schedule)
        z = rng.standard_normal(shape)
        proposal = ancestral_step(x, x0_hat, i, schedule, z)
        tv = tv_indicator(x0_hat)
        if guided:
            value, g = potential.value_and_grad(x0_hat)
            pulled = guidance_gradient(x, i, model, g, schedule, config.chain_rule)
            if scalar_step:
                rho = config.zeta
                x = proposal - rho * pulled
            else:
                rho = guidance_scale(tv, config)
                precond = diag_preconditioner(g, config.gamma, config.eps, config.kappa_max)
                x = proposal - rho * precond * pulled
        else:
            value, rho = float("nan"), 0.0
            x = proposal
        e_l2, p, s = _metric_snapshot(x0_hat, scaler, grid, v_true)
        rows.append(TraceRow(i, value, tv, rho, e_l2, p, s))
    v_rec = scale_from_model(x, scaler, grid)
    return v_rec, SamplerTrace(tuple(rows))


def dps_sample(
    d_obs: np.ndarray,
    model: ScoreModel,
    schedule: DiffusionSchedule,
    geometry: AcquisitionGeometry | None,
    wavelet: SourceWavelet | None,
    solver_config: SolverConfig | None,
    config: GuidanceConfig,
    seed: int,
    *,
    scaler: FieldScaler,
    grid: Grid | None = None,
    potential: Potential | None = None,
    v_true=None,
    jobs: int = 1,
) -> tuple[VelocityField, SamplerTrace]:
    """Reverse diffusion with a constant scalar data step (zeta).

    The misfit must be plain least squares.  Passing a custom potential
    bypasses the wave solver (geometry/wavelet/solver_config may be None
    then, but a grid is required).
    """
    if config.misfit.kind != MisfitKind.MSE:
        raise ValueError("dps_sample requires an MSE misfit")
    grid, potential = _resolve_potential(
        d_obs, geometry, wavelet, solver_config, config, scaler, grid, potential, jobs
    )
    return _guided_reverse(
        model, schedule, potential, config, seed, scaler, grid, v_true, scalar_step=True
    )


def otwepdps_sample(
    d_obs: np.ndarray,
    model: ScoreModel,
    schedule: DiffusionSchedule,
    geometry: AcquisitionGeometry | None,
    wavelet: SourceWavelet | None,
    solver_config: SolverConfig | None,
    config: GuidanceConfig,
    seed: int,
    *,
    scaler: FieldScaler,
    grid: Grid | None = None,
    potential: Potential | None = None,
    v_true=None,
    jobs: int = 1,
) -> tuple[VelocityField, SamplerTrace]:
    """Reverse diffusion with the TV-scheduled, diagonally preconditioned
    data step.  Defaults pair it with the weighted-OT misfit but any
    configured misfit is honored."""
    grid, potential = _resolve_potential(
        d_obs, geometry, wavelet, solver_config, config, scaler, grid, potential, jobs
    )
    return _guided_reverse(
        model, schedule, potential, config, seed, scaler, grid, v_true, scalar_step=False
    )


def _resolve_potential(d_obs, geometry, wavelet, solver_config, config, scaler, grid, potential, jobs):
    if potential is None:
        if geometry is None or wavelet is None or solver_config is None:
            raise ValueError("need geometry, wavelet and solver_config unless a potential is given")
        potential = make_pde_potential(
            d_obs, geometry, wavelet, solver_config, config.misfit, scaler, jobs
        )
        grid = geometry.grid
    elif grid is None:
        raise ValueError("a grid is required with a custom potential")
    return grid, potential
