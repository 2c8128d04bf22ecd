"""Variance-preserving diffusion machinery on 2D fields.

Discrete schedule with steps i = 1..N (arrays are 0-based, so beta[i-1]
belongs to step i, and step 0 denotes the clean state with alpha_bar = 1),
forward noising, the clean-state (Tweedie) estimator, and analytic score
models whose noised marginals are known in closed form.  Score models expose
``score(x, i)`` and ``vjp(x, i, cotangent)``; the vjp is the transposed
Jacobian of the score at fixed i, which the exact chain-rule guidance mode
consumes.

Fields here live in scaler-normalized units; ``FieldScaler`` converts to and
from physical velocities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .geometry import Grid, VelocityField

__all__ = [
    "DiffusionSchedule",
    "ScoreModel",
    "FieldScaler",
    "make_schedule",
    "forward_noising",
    "clean_estimate",
    "gaussian_score",
    "gmm_score",
    "GaussianScore",
    "GmmScore",
    "scale_to_model",
    "scale_from_model",
]

_ALPHA_BAR_FLOOR = 1e-12


def _read_only(arr: np.ndarray) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64).copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class DiffusionSchedule:
    """Noise schedule: beta, alpha = 1 - beta, their running product, and the
    posterior standard deviations sigma_hat (sigma_hat[0], step 1, is 0)."""

    n: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma_hat: np.ndarray

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("schedule needs at least one step")
        beta = _read_only(self.beta)
        alpha = _read_only(self.alpha)
        abar = _read_only(self.alpha_bar)
        shat = _read_only(self.sigma_hat)
        for name, arr in (("beta", beta), ("alpha", alpha), ("alpha_bar", abar), ("sigma_hat", shat)):
            if arr.shape != (self.n,):
                raise ValueError(f"{name} must have shape ({self.n},)")
        if not np.all((beta > 0) & (beta < 1)):
            raise ValueError("beta values must sit in (0, 1)")
        if not np.allclose(alpha, 1.0 - beta):
            raise ValueError("alpha must equal 1 - beta")
        if not np.all(np.diff(abar) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if not np.all(shat >= 0):
            raise ValueError("sigma_hat must be non-negative")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", abar)
        object.__setattr__(self, "sigma_hat", shat)

    def _check_step(self, i: int):
        if not (1 <= i <= self.n):
            raise ValueError(f"step {i} outside 1..{self.n}")

    def beta_at(self, i: int) -> float:
        self._check_step(i)
        return float(self.beta[i - 1])

    def alpha_at(self, i: int) -> float:
        self._check_step(i)
        return float(self.alpha[i - 1])

    def alpha_bar_at(self, i: int) -> float:
        """alpha_bar for steps 1..N, with the clean-state convention at 0."""
        if i == 0:
            return 1.0
        self._check_step(i)
        return float(self.alpha_bar[i - 1])

    def sigma_hat_at(self, i: int) -> float:
        self._check_step(i)
        return float(self.sigma_hat[i - 1])


def make_schedule(
    n: int, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear"
) -> DiffusionSchedule:
    """Linearly spaced beta schedule with cumulative-product alpha_bar."""
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if n < 1:
        raise ValueError("schedule needs at least one step")
    beta = np.linspace(beta_start, beta_end, n)
    alpha = 1.0 - beta
    abar = np.cumprod(alpha)
    abar_prev = np.concatenate([[1.0], abar[:-1]])
    sigma_hat = np.sqrt(beta * (1.0 - abar_prev) / (1.0 - abar))
    return DiffusionSchedule(n=n, beta=beta, alpha=alpha, alpha_bar=abar, sigma_hat=sigma_hat)


def forward_noising(x0: np.ndarray, i: int, schedule: DiffusionSchedule, seed: int) -> np.ndarray:
    """sqrt(abar_i) x0 + sqrt(1 - abar_i) z with z drawn once from the seed."""
    x0 = np.asarray(x0, dtype=np.float64)
    abar = schedule.alpha_bar_at(i)
    z = np.random.default_rng(seed).standard_normal(x0.shape)
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * z


@runtime_checkable
class ScoreModel(Protocol):
    """Marginal score of the noised distribution at step i, plus its vjp."""

    def score(self, x: np.ndarray, i: int) -> np.ndarray: ...

    def vjp(self, x: np.ndarray, i: int, cotangent: np.ndarray) -> np.ndarray: ...


def clean_estimate(
    x: np.ndarray, i: int, model: ScoreModel, schedule: DiffusionSchedule
) -> np.ndarray:
    """Posterior-mean style denoiser (x + (1 - abar) score) / sqrt(abar)."""
    x = np.asarray(x, dtype=np.float64)
    abar = schedule.alpha_bar_at(i)
    if abar < _ALPHA_BAR_FLOOR:
        raise ValueError(f"alpha_bar at step {i} is {abar:.3e}; clean estimate would blow up")
    return (x + (1.0 - abar) * model.score(x, i)) / math.sqrt(abar)


@dataclass(frozen=True)
class GaussianScore:
    """Exact marginal score when the clean field is N(mu, s2 I).

    The step-i marginal is N(sqrt(abar) mu, (abar s2 + 1 - abar) I), so the
    score is linear in x and the Jacobian is a negative scalar.
    """

    mu: np.ndarray
    s2: float
    schedule: DiffusionSchedule

    def __post_init__(self):
        if self.s2 <= 0:
            raise ValueError("variance must be positive")
        object.__setattr__(self, "mu", _read_only(self.mu))

    def _moments(self, i: int):
        abar = self.schedule.alpha_bar_at(i)
        return math.sqrt(abar) * self.mu, abar * self.s2 + (1.0 - abar)

    def score(self, x: np.ndarray, i: int) -> np.ndarray:
        mean, var = self._moments(i)
        return -(np.asarray(x, dtype=np.float64) - mean) / var

    def vjp(self, x: np.ndarray, i: int, cotangent: np.ndarray) -> np.ndarray:
        _, var = self._moments(i)
        return -np.asarray(cotangent, dtype=np.float64) / var


@dataclass(frozen=True)
class GmmScore:
    """Exact marginal score for a mixture of isotropic Gaussians.

    Components are (weight, mu, s2) over the whole field (one responsibility
    per component, not per node).  The vjp applies the closed-form Hessian of
    log p_i: sum_k r_k m_k m_k^T - s s^T - sum_k (r_k / var_k) I, with m_k the
    per-component scores and s their responsibility average.
    """

    components: tuple[tuple[float, np.ndarray, float], ...]
    schedule: DiffusionSchedule

    def __post_init__(self):
        comps = []
        total = 0.0
        shape = None
        for weight, mu, s2 in self.components:
            if weight <= 0:
                raise ValueError("mixture weights must be positive")
            if s2 <= 0:
                raise ValueError("component variances must be positive")
            mu = _read_only(mu)
            if shape is None:
                shape = mu.shape
            elif mu.shape != shape:
                raise ValueError("component means disagree in shape")
            comps.append((float(weight), mu, float(s2)))
            total += weight
        if not comps:
            raise ValueError("mixture needs at least one component")
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"mixture weights must sum to 1, got {total}")
        object.__setattr__(self, "components", tuple(comps))

    def _responsibilities(self, x: np.ndarray, i: int):
        abar = self.schedule.alpha_bar_at(i)
        n = x.size
        logs, scores_k, inv_vars = [], [], []
        for weight, mu, s2 in self.components:
            mean = math.sqrt(abar) * mu
            var = abar * s2 + (1.0 - abar)
            resid = x - mean
            logs.append(math.log(weight) - 0.5 * n * math.log(var) - float(np.sum(resid**2)) / (2 * var))
            scores_k.append(-resid / var)
            inv_vars.append(1.0 / var)
        logs = np.array(logs)
        r = np.exp(logs - logs.max())
        r /= r.sum()
        return r, scores_k, np.array(inv_vars)

    def score(self, x: np.ndarray, i: int) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        r, scores_k, _ = self._responsibilities(x, i)
        out = np.zeros_like(x)
        for rk, mk in zip(r, scores_k):
            out += rk * mk
        return out

    def vjp(self, x: np.ndarray, i: int, cotangent: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        cot = np.asarray(cotangent, dtype=np.float64)
        r, scores_k, inv_vars = self._responsibilities(x, i)
        sbar = np.zeros_like(x)
        for rk, mk in zip(r, scores_k):
            sbar += rk * mk
        out = -float(np.dot(r, inv_vars)) * cot
        for rk, mk in zip(r, scores_k):
            out += rk * mk * float(np.sum(mk * cot))
        out -= sbar * float(np.sum(sbar * cot))
        return out


def gaussian_score(mu: np.ndarray, s2: float, schedule: DiffusionSchedule) -> GaussianScore:
    return GaussianScore(mu=mu, s2=s2, schedule=schedule)


def gmm_score(
    components: Sequence[tuple[float, np.ndarray, float]], schedule: DiffusionSchedule
) -> GmmScore:
    return GmmScore(components=tuple(components), schedule=schedule)


@dataclass(frozen=True)
class FieldScaler:
    """Affine map between physical velocities [v_min, v_max] and [-1, 1]."""

    v_min: float
    v_max: float

    def __post_init__(self):
        if not (self.v_min < self.v_max):
            raise ValueError(f"need v_min < v_max, got ({self.v_min}, {self.v_max})")

    @property
    def span(self) -> float:
        return self.v_max - self.v_min

    def clamp_model(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, -1.0, 1.0)


def scale_to_model(v, scaler: FieldScaler) -> np.ndarray:
    """Physical velocities to the normalized field the diffusion sees."""
    vals = v.values if isinstance(v, VelocityField) else np.asarray(v, dtype=np.float64)
    return 2.0 * (vals - scaler.v_min) / scaler.span - 1.0


def scale_from_model(x: np.ndarray, scaler: FieldScaler, grid: Grid | None = None):
    """Inverse of scale_to_model; wraps in a VelocityField when a grid is given."""
    vals = scaler.v_min + (np.asarray(x, dtype=np.float64) + 1.0) * (scaler.span / 2.0)
    if grid is None:
        return vals
    return VelocityField(grid, vals, physical=bool(np.all(vals > 0)))
