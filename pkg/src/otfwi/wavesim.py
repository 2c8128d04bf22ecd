"""Time-domain solver for the 2D constant-density acoustic wave equation.

The scheme is leapfrog in time and 8th order in space.  Inside the physical
domain it reduces to

    u[k+1] = 2 u[k] - u[k-1] + v^2 dt^2 (L u[k] + s[k])

with L the 8th-order centered Laplacian.  The domain is padded with an
absorbing collar on the left, right, and bottom edges where two auxiliary
memory fields turn the update into an unsplit perfectly-matched layer:

    u[k+1] = A ((2 - dt^2 sx sz) u[k] + v^2 dt^2 (L u[k] + Dx phi[k] + Dz psi[k] + s[k])) - A B u[k-1]
    phi[k+1] = (1 - dt sx) phi[k] + dt (sz - sx) Dx u[k]
    psi[k+1] = (1 - dt sz) psi[k] + dt (sx - sz) Dz u[k]

with A = 1/(1 + dt (sx + sz)/2), B = 1 - dt (sx + sz)/2, and Dx, Dz the
8th-order centered first derivatives.  A single damping profile shape is used
per axis: sx and sz vanish in the physical domain and grow quadratically with
depth into the collar; the collar is terminated by a homogeneous Dirichlet
edge.  The top row is a free surface realised by mirroring ghost nodes of the
Laplacian about it.  The psi feed is switched off within stencil reach of the
free surface, which keeps the assembled system exactly symmetric under the
surface half-weighting; source-receiver reciprocity then holds to rounding,
for heterogeneous models too, whenever the two nodes sit below the surface
row (or both on it).

All operators are materialised once per grid/config pair as sparse matrices,
so the adjoint pass can apply their exact transposes.  Velocity enters the
update only through the diagonal factor v^2 dt^2; the memory-field updates
are velocity-free.  Sources add wavelet[k] * dt^2 * v^2 / (dx * dz) at the
source node each step; receivers sample the wavefield at the trace times
t_k = k * dt, and full wavefield histories are kept for gradient work.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .geometry import AcquisitionGeometry, Grid, SourceWavelet, VelocityField

__all__ = [
    "SolverConfig",
    "ShotGather",
    "StabilityError",
    "DivergenceError",
    "LAPLACIAN_TAPS",
    "CFL_STENCIL_CONSTANT",
    "check_cfl",
    "simulate_shot",
    "forward_operator",
    "add_noise",
    "discrete_energy_series",
]

# Centered second-derivative taps for offsets 0..4, to be scaled by 1/h^2.
LAPLACIAN_TAPS = np.array([-205.0 / 72.0, 8.0 / 5.0, -1.0 / 5.0, 8.0 / 315.0, -1.0 / 560.0])

# Centered first-derivative taps for offsets 1..4 (odd in the offset), /h.
FIRST_DERIVATIVE_TAPS = np.array([4.0 / 5.0, -1.0 / 5.0, 4.0 / 105.0, -1.0 / 280.0])

# Leapfrog stability bound dt <= h / (vmax * sqrt(2) * C); C comes from the taps.
CFL_STENCIL_CONSTANT = math.sqrt(abs(LAPLACIAN_TAPS[0]) + 2.0 * np.abs(LAPLACIAN_TAPS[1:]).sum()) / 2.0


class StabilityError(RuntimeError):
    """Raised when a requested simulation violates a stability bound."""


class DivergenceError(RuntimeError):
    """Raised when the wavefield stops being finite mid-run."""

    def __init__(self, step: int):
        super().__init__(f"wavefield diverged at time step {step}")
        self.step = step


@dataclass(frozen=True)
class SolverConfig:
    """Discretisation controls for the finite-difference solver.

    The damping strength is sized from ``pml_reflection_target`` and
    ``absorber_reference_speed`` (sigma_max = 3 v_ref ln(1/R) / (2 L), with L
    the collar thickness in metres).  Using a fixed reference speed keeps the
    profile independent of the velocity model, so model updates never change
    the absorber (the adjoint relies on that).  Models slower than the
    reference absorb more than the target, not less; the reference should be
    an upper bound on the velocities the solver will see.
    """

    pml_width: int = 6
    pml_reflection_target: float = 1e-3
    cfl_safety: float = 0.9
    absorber_reference_speed: float = 4500.0

    def __post_init__(self):
        if self.pml_width < 0:
            raise ValueError(f"absorbing layer width must be >= 0, got {self.pml_width}")
        if not (0 < self.pml_reflection_target < 1):
            raise ValueError("reflection target must sit in (0, 1)")
        if not (0 < self.cfl_safety <= 1):
            raise ValueError("cfl safety factor must sit in (0, 1]")
        if self.absorber_reference_speed <= 0:
            raise ValueError("absorber reference speed must be positive")

    def sigma_max(self, dx: float, dz: float) -> float:
        """Peak damping rate of the quadratic collar profile, 1/seconds."""
        if self.pml_width == 0:
            return 0.0
        thickness = self.pml_width * min(dx, dz)
        return (
            3.0
            * self.absorber_reference_speed
            * math.log(1.0 / self.pml_reflection_target)
            / (2.0 * thickness)
        )


@dataclass(frozen=True)
class ShotGather:
    """Recorded traces, shaped (n_sources, n_receivers, nt)."""

    geometry: AcquisitionGeometry
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        expected = (self.geometry.n_sources, self.geometry.n_receivers, self.geometry.nt)
        if vals.shape != expected:
            raise ValueError(f"gather has shape {vals.shape}, expected {expected}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("gather contains non-finite samples")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)


def check_cfl(v: VelocityField, dt: float, config: SolverConfig) -> bool:
    """True when dt satisfies the leapfrog stability bound for this model."""
    if dt < 0:
        raise ValueError(f"dt must be non-negative, got {dt}")
    if dt == 0:
        return True
    g = v.grid
    vmax = float(np.max(v.values))
    limit = config.cfl_safety * min(g.dx, g.dz) / (vmax * math.sqrt(2.0) * CFL_STENCIL_CONSTANT)
    return dt <= limit


class _StencilOperator:
    """Grid-and-config bound pieces of the update: stencils and damping.

    Velocity enters only through the per-node factor v^2 dt^2, so one operator
    serves every model on the same grid.  All arrays are flattened C-order
    over the computational region of shape (nx + 2p, nz + p), where p is the
    collar width; physical node (ix, iz) lives at (ix + p, iz + p).
    """

    def __init__(self, nx, nz, dx, dz, dt, config: SolverConfig):
        p = config.pml_width
        cx, cz = nx + 2 * p, nz + p
        self.nx, self.nz, self.dx, self.dz, self.dt = nx, nz, dx, dz, dt
        self.pml_width = p
        self.shape_c = (cx, cz)
        self.n_cells = cx * cz
        self.has_collar = p > 0

        ix_c, iz_c = np.meshgrid(np.arange(cx), np.arange(cz), indexing="ij")

        # One quadratic ramp shape per axis, zero inside the physical domain.
        # The top edge carries no ramp; it is the free surface.
        sig_max = config.sigma_max(dx, dz)
        left = np.clip((p - ix_c) / max(p, 1), 0.0, 1.0)
        right = np.clip((ix_c - (p + nx - 1)) / max(p, 1), 0.0, 1.0)
        bottom = np.clip((p - iz_c) / max(p, 1), 0.0, 1.0)
        sig_x = sig_max * (left**2 + right**2)
        sig_z = sig_max * bottom**2
        self.sigma_dt_max = float((sig_x + sig_z).max()) * dt

        half = 0.5 * dt * (sig_x + sig_z).ravel()
        self.a_coef = 1.0 / (1.0 + half)
        self.b_coef = 1.0 - half
        self.two_minus = 2.0 - dt * dt * (sig_x * sig_z).ravel()
        self.phi_decay = 1.0 - dt * sig_x.ravel()
        self.psi_decay = 1.0 - dt * sig_z.ravel()
        self.phi_feed = dt * (sig_z - sig_x).ravel()
        # Silencing the psi feed within stencil reach of the surface keeps the
        # assembled update symmetric under the free-surface half-weighting
        # (the z-derivative sandwich must not touch the top row).  Those rows
        # keep their diagonal damping, so the corner still absorbs.
        psi_feed = dt * (sig_x - sig_z)
        psi_feed[:, cz - 5 :] = 0.0
        self.psi_feed = psi_feed.ravel()

        # Map each computational cell to the physical cell whose velocity it
        # copies (edge replication into the collar).
        self.ext_ix = np.clip(ix_c - p, 0, nx - 1).ravel()
        self.ext_iz = np.clip(iz_c - p, 0, nz - 1).ravel()

        self.lap = self._build_laplacian()
        self.lap_t = self.lap.T.tocsr()
        self.dx_op = self._build_first_derivative(axis=0)
        self.dz_op = self._build_first_derivative(axis=1)
        self.dx_op_t = self.dx_op.T.tocsr()
        self.dz_op_t = self.dz_op.T.tocsr()

        # Half weight on the free-surface row symmetrises the mirrored stencil;
        # used by the discrete energy diagnostic.
        w = np.ones((cx, cz))
        w[:, cz - 1] = 0.5
        self.energy_weight = w.ravel()

    def _grid_offsets(self):
        cx, cz = self.shape_c
        ix, iz = np.meshgrid(np.arange(cx), np.arange(cz), indexing="ij")
        return ix.ravel(), iz.ravel()

    def _build_laplacian(self) -> sp.csr_matrix:
        cx, cz = self.shape_c
        top = cz - 1
        rows, cols, vals = [], [], []
        ix, iz = self._grid_offsets()
        flat = ix * cz + iz
        for axis, h in ((0, self.dx), (1, self.dz)):
            for off in range(-4, 5):
                w = LAPLACIAN_TAPS[abs(off)] / (h * h)
                if axis == 0:
                    jx, jz = ix + off, iz
                else:
                    jx, jz = ix, iz + off
                    # Free surface: fold ghost rows back across the top node.
                    above = jz > top
                    jz = np.where(above, 2 * top - jz, jz)
                # Beyond the damped collar the field is pinned to zero.
                keep = (jx >= 0) & (jx < cx) & (jz >= 0) & (jz < cz)
                rows.append(flat[keep])
                cols.append((jx * cz + jz)[keep])
                vals.append(np.full(keep.sum(), w))
        mat = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_cells, self.n_cells),
        )
        return mat.tocsr()

    def _build_first_derivative(self, axis: int) -> sp.csr_matrix:
        """Centered d/dx or d/dz with zero truncation on every edge.

        The zero truncation keeps the matrix exactly antisymmetric, which the
        reciprocity of the assembled scheme depends on.  The operators feed
        and drain the collar memory fields; the free-surface mirror belongs to
        the Laplacian only.
        """
        cx, cz = self.shape_c
        h = self.dx if axis == 0 else self.dz
        rows, cols, vals = [], [], []
        ix, iz = self._grid_offsets()
        flat = ix * cz + iz
        for off in range(-4, 5):
            if off == 0:
                continue
            w = math.copysign(1.0, off) * FIRST_DERIVATIVE_TAPS[abs(off) - 1] / h
            if axis == 0:
                jx, jz = ix + off, iz
            else:
                jx, jz = ix, iz + off
            keep = (jx >= 0) & (jx < cx) & (jz >= 0) & (jz < cz)
            rows.append(flat[keep])
            cols.append((jx * cz + jz)[keep])
            vals.append(np.full(keep.sum(), w))
        mat = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_cells, self.n_cells),
        )
        return mat.tocsr()

    def flat_index(self, ix: int, iz: int) -> int:
        p = self.pml_width
        return (ix + p) * self.shape_c[1] + (iz + p)

    def extend_velocity(self, values: np.ndarray) -> np.ndarray:
        return values[self.ext_ix, self.ext_iz]

    def fold_extension(self, grad_c: np.ndarray) -> np.ndarray:
        """Scatter-add collar contributions back onto the physical cells."""
        out = np.zeros((self.nx, self.nz))
        np.add.at(out, (self.ext_ix, self.ext_iz), grad_c)
        return out


@lru_cache(maxsize=8)
def _cached_operator(nx, nz, dx, dz, dt, config: SolverConfig) -> _StencilOperator:
    return _StencilOperator(nx, nz, dx, dz, dt, config)


def _operator_for(grid: Grid, dt: float, config: SolverConfig) -> _StencilOperator:
    return _cached_operator(grid.nx, grid.nz, grid.dx, grid.dz, dt, config)


def _require_stable(v: VelocityField, geometry: AcquisitionGeometry, config: SolverConfig):
    if not check_cfl(v, geometry.dt, config):
        g = v.grid
        limit = config.cfl_safety * min(g.dx, g.dz) / (
            float(np.max(v.values)) * math.sqrt(2.0) * CFL_STENCIL_CONSTANT
        )
        raise StabilityError(
            f"dt={geometry.dt} violates the CFL bound {limit:.3e} for vmax={np.max(v.values):.1f}"
        )
    # The memory fields advance by forward Euler; their decay factor 1 - dt*sigma
    # must stay inside the unit interval's reach.
    sdt = config.sigma_max(v.grid.dx, v.grid.dz) * geometry.dt
    if sdt >= 2.0:
        raise StabilityError(
            f"damping rate too strong for dt={geometry.dt} (sigma*dt={sdt:.2f} >= 2); "
            "widen the collar or raise the reflection target"
        )


def _shot_history(
    op: _StencilOperator,
    c2dt2: np.ndarray,
    geometry: AcquisitionGeometry,
    wavelet: SourceWavelet,
    shot_index: int,
) -> np.ndarray:
    """March one shot and return the full wavefield history (nt, n_cells).

    Only u is recorded; the memory fields are recomputable and, more to the
    point, the velocity gradient needs only u (velocity multiplies the whole
    spatial term, so that term can be recovered from consecutive u's).
    """
    nt = geometry.nt
    src = op.flat_index(*geometry.sources[shot_index])
    f = wavelet.samples
    if f.size < nt:
        f = np.concatenate([f, np.zeros(nt - f.size)])
    inv_area = 1.0 / (op.dx * op.dz)

    hist = np.zeros((nt, op.n_cells))
    u_prev = np.zeros(op.n_cells)
    u_cur = np.zeros(op.n_cells)
    phi = np.zeros(op.n_cells)
    psi = np.zeros(op.n_cells)
    a, b, two_minus = op.a_coef, op.b_coef, op.two_minus
    for k in range(nt - 1):
        rhs = op.lap @ u_cur
        if op.has_collar:
            rhs += op.dx_op @ phi
            rhs += op.dz_op @ psi
        rhs[src] += f[k] * inv_area
        u_next = a * (two_minus * u_cur + c2dt2 * rhs) - (a * b) * u_prev
        if op.has_collar:
            phi = op.phi_decay * phi + op.phi_feed * (op.dx_op @ u_cur)
            psi = op.psi_decay * psi + op.psi_feed * (op.dz_op @ u_cur)
        if k % 64 == 0 and not np.all(np.isfinite(u_next)):
            raise DivergenceError(k + 1)
        u_prev, u_cur = u_cur, u_next
        hist[k + 1] = u_cur
    if not np.all(np.isfinite(u_cur)):
        raise DivergenceError(nt - 1)
    return hist


def _receiver_indices(op: _StencilOperator, geometry: AcquisitionGeometry) -> np.ndarray:
    return np.array([op.flat_index(ix, iz) for ix, iz in geometry.receivers])


def simulate_shot(
    v: VelocityField,
    geometry: AcquisitionGeometry,
    wavelet: SourceWavelet,
    shot_index: int,
    config: SolverConfig = SolverConfig(),
) -> np.ndarray:
    """Traces (n_receivers, nt) for one source index."""
    if not (0 <= shot_index < geometry.n_sources):
        raise ValueError(f"shot index {shot_index} out of range")
    if not v.physical:
        raise ValueError("simulation requires a physical velocity field")
    _require_stable(v, geometry, config)
    op = _operator_for(v.grid, geometry.dt, config)
    c2dt2 = op.extend_velocity(v.values) ** 2 * geometry.dt**2
    hist = _shot_history(op, c2dt2, geometry, wavelet, shot_index)
    return hist[:, _receiver_indices(op, geometry)].T.copy()


def forward_operator(
    v: VelocityField,
    geometry: AcquisitionGeometry,
    wavelet: SourceWavelet,
    config: SolverConfig = SolverConfig(),
    jobs: int = 1,
) -> ShotGather:
    """Simulate every shot in the acquisition. ``jobs`` caps worker threads."""
    shots = range(geometry.n_sources)
    run = lambda s: simulate_shot(v, geometry, wavelet, s, config)
    if jobs > 1 and geometry.n_sources > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            traces = list(pool.map(run, shots))
    else:
        traces = [run(s) for s in shots]
    return ShotGather(geometry=geometry, values=np.stack(traces))


def add_noise(gather: ShotGather, sigma: float, seed: int) -> ShotGather:
    """Additive white Gaussian noise with standard deviation sigma."""
    if sigma < 0:
        raise ValueError(f"noise level must be >= 0, got {sigma}")
    if sigma == 0:
        return gather
    rng = np.random.default_rng(seed)
    noisy = gather.values + sigma * rng.standard_normal(gather.values.shape)
    return ShotGather(geometry=gather.geometry, values=noisy)


def discrete_energy_series(
    v: VelocityField,
    geometry: AcquisitionGeometry,
    wavelet: SourceWavelet,
    shot_index: int,
    config: SolverConfig = SolverConfig(),
) -> np.ndarray:
    """Leapfrog energy E[k+1/2] for one shot, length nt - 1.

    E = (1/2) <du/dt, W du/dt / v^2> - (1/2) <u[k+1], W L u[k]> with W the
    free-surface half-weighting that makes W L symmetric.  Without damping the
    scheme conserves E exactly; with the absorbing collar it should decay once
    the source has rung down.
    """
    _require_stable(v, geometry, config)
    op = _operator_for(v.grid, geometry.dt, config)
    c2 = op.extend_velocity(v.values) ** 2
    c2dt2 = c2 * geometry.dt**2
    hist = _shot_history(op, c2dt2, geometry, wavelet, shot_index)
    w = op.energy_weight
    dt = geometry.dt
    energies = np.empty(geometry.nt - 1)
    for k in range(geometry.nt - 1):
        du = (hist[k + 1] - hist[k]) / dt
        kinetic = 0.5 * np.dot(du, w * du / c2)
        potential = -0.5 * np.dot(hist[k + 1], w * (op.lap @ hist[k]))
        energies[k] = kinetic + potential
    return energies
