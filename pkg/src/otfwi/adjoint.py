"""Velocity gradients of trace misfits via the exact discrete adjoint.

The forward recursion (see ``wavesim``) is linear in the state (u, phi, psi),
so the gradient back-propagates the trace-space misfit gradient through the
transpose of the same recursion, using the transposed sparse operators; no
continuous adjoint equation is discretised.  The collar memory fields get
their own adjoint variables, fed by the transposed derivative stencils.
Velocity enters the update only through c = v^2 dt^2 multiplying the whole
spatial term, hence

    dPhi/dc = sum_k lambda_u[k+1] * A * (L u[k] + Dx phi[k] + Dz psi[k] + s[k]),
    dPhi/dv = 2 v dt^2 * dPhi/dc,

where the bracket is recovered algebraically from three consecutive u's (the
memory-field histories are never stored), and contributions from the
edge-replicated collar are folded back onto their source cells.
``forward_jvp`` provides the matching linearisation for adjoint identity
tests.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import wavesim as ws
from .geometry import AcquisitionGeometry, SourceWavelet, VelocityField
from .misfit import MisfitSpec, misfit_value_and_trace_gradient

__all__ = ["MisfitGradient", "misfit_and_gradient", "forward_vjp", "forward_jvp"]


@dataclass(frozen=True)
class MisfitGradient:
    """Misfit value and its gradient w.r.t. the velocity model."""

    values: np.ndarray
    misfit_value: float

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(vals)):
            raise ValueError("gradient contains non-finite entries")
        if not np.isfinite(self.misfit_value):
            raise ValueError("misfit value is not finite")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)


def _shot_vjp(op, c2dt2, geometry, wavelet, shot_index, cotangent):
    """dPhi/dc for one shot given dPhi/d(traces of that shot)."""
    hist = ws._shot_history(op, c2dt2, geometry, wavelet, shot_index)
    recv = ws._receiver_indices(op, geometry)
    nt = geometry.nt
    a, b, two_minus = op.a_coef, op.b_coef, op.two_minus
    a_two = a * two_minus
    ab = a * b
    ac = a * c2dt2

    grad_c = np.zeros(op.n_cells)
    lam_next = np.zeros(op.n_cells)   # lambda_u[k+1]
    lam_next2 = np.zeros(op.n_cells)  # lambda_u[k+2]
    lphi = np.zeros(op.n_cells)       # lambda_phi[k+1]
    lpsi = np.zeros(op.n_cells)       # lambda_psi[k+1]
    for k in range(nt - 1, -1, -1):
        lam = np.zeros(op.n_cells)
        np.add.at(lam, recv, cotangent[:, k])
        if k + 1 <= nt - 1:
            ac_lam = ac * lam_next
            lam += a_two * lam_next + op.lap_t @ ac_lam
            if op.has_collar:
                lam += op.dx_op_t @ (op.phi_feed * lphi)
                lam += op.dz_op_t @ (op.psi_feed * lpsi)
                lphi = op.phi_decay * lphi + op.dx_op_t @ ac_lam
                lpsi = op.psi_decay * lpsi + op.dz_op_t @ ac_lam
        if k + 2 <= nt - 1:
            lam -= ab * lam_next2
        if k >= 1:
            # lambda_u[k] pairs with A (L u + Dx phi + Dz psi + s)[k-1],
            # recovered from the stored history instead of re-applying the
            # stencils (everything else in the u update is diagonal).
            u_prev2 = hist[k - 2] if k >= 2 else 0.0
            forcing = hist[k] - a_two * hist[k - 1] + ab * u_prev2
            grad_c += lam * forcing / c2dt2
        lam_next2 = lam_next
        lam_next = lam
    return grad_c


def _gather_vjp(
    v: VelocityField,
    cotangent: np.ndarray,
    geometry: AcquisitionGeometry,
    wavelet: SourceWavelet,
    config: ws.SolverConfig,
    jobs: int = 1,
) -> np.ndarray:
    ws._require_stable(v, geometry, config)
    op = ws._operator_for(v.grid, geometry.dt, config)
    v_ext = op.extend_velocity(v.values)
    c2dt2 = v_ext**2 * geometry.dt**2

    run = lambda s: _shot_vjp(op, c2dt2, geometry, wavelet, s, cotangent[s])
    shots = range(geometry.n_sources)
    if jobs > 1 and geometry.n_sources > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(run, shots))
    else:
        parts = [run(s) for s in shots]
    grad_c = np.sum(parts, axis=0)
    grad_v_ext = grad_c * 2.0 * v_ext * geometry.dt**2
    return op.fold_extension(grad_v_ext)


def forward_vjp(
    v: VelocityField,
    cotangent: np.ndarray,
    geometry: AcquisitionGeometry,
    wavelet: SourceWavelet,
    config: ws.SolverConfig = ws.SolverConfig(),
    jobs: int = 1,
) -> np.ndarray:
    """Adjoint action: map a trace-space cotangent to velocity space."""
    cotangent = np.asarray(cotangent, dtype=np.float64)
    expected = (geometry.n_sources, geometry.n_receivers, geometry.nt)
    if cotangent.shape != expected:
        raise ValueError(f"cotangent has shape {cotangent.shape}, expected {expected}")
    return _gather_vjp(v, cotangent, geometry, wavelet, config, jobs)


def forward_jvp(
    v: VelocityField,
    dv: np.ndarray,
    geometry: AcquisitionGeometry,
    wavelet: SourceWavelet,
    config: ws.SolverConfig = ws.SolverConfig(),
) -> np.ndarray:
    """Directional derivative of the forward traces along a model perturbation."""
    dv = np.asarray(dv, dtype=np.float64)
    if dv.shape != v.grid.shape:
        raise ValueError(f"perturbation has shape {dv.shape}, expected {v.grid.shape}")
    ws._require_stable(v, geometry, config)
    op = ws._operator_for(v.grid, geometry.dt, config)
    v_ext = op.extend_velocity(v.values)
    c2dt2 = v_ext**2 * geometry.dt**2
    dc = 2.0 * v_ext * dv[op.ext_ix, op.ext_iz] * geometry.dt**2
    dc_over_c = dc / c2dt2
    recv = ws._receiver_indices(op, geometry)
    nt = geometry.nt
    a, b, two_minus = op.a_coef, op.b_coef, op.two_minus
    a_two = a * two_minus
    ab = a * b

    out = np.zeros((geometry.n_sources, geometry.n_receivers, nt))
    for s in range(geometry.n_sources):
        hist = ws._shot_history(op, c2dt2, geometry, wavelet, s)
        du_prev = np.zeros(op.n_cells)
        du_cur = np.zeros(op.n_cells)
        dphi = np.zeros(op.n_cells)
        dpsi = np.zeros(op.n_cells)
        for k in range(nt - 1):
            u_prev = hist[k - 1] if k >= 1 else 0.0
            forcing = hist[k + 1] - a_two * hist[k] + ab * u_prev
            rhs = op.lap @ du_cur
            if op.has_collar:
                rhs += op.dx_op @ dphi
                rhs += op.dz_op @ dpsi
            du_next = a_two * du_cur + a * c2dt2 * rhs - ab * du_prev + dc_over_c * forcing
            if op.has_collar:
                dphi = op.phi_decay * dphi + op.phi_feed * (op.dx_op @ du_cur)
                dpsi = op.psi_decay * dpsi + op.psi_feed * (op.dz_op @ du_cur)
            du_prev, du_cur = du_cur, du_next
            out[s, :, k + 1] = du_cur[recv]
    return out


def misfit_and_gradient(
    v: VelocityField,
    d_obs: ws.ShotGather,
    misfit: MisfitSpec,
    geometry: AcquisitionGeometry,
    wavelet: SourceWavelet,
    config: ws.SolverConfig = ws.SolverConfig(),
    jobs: int = 1,
) -> MisfitGradient:
    """Evaluate the misfit at v and its gradient w.r.t. every velocity cell."""
    d_syn = ws.forward_operator(v, geometry, wavelet, config, jobs=jobs)
    value, trace_grad = misfit_value_and_trace_gradient(d_syn, d_obs, misfit)
    grad = _gather_vjp(v, trace_grad, geometry, wavelet, config, jobs)
    return MisfitGradient(values=grad, misfit_value=value)
