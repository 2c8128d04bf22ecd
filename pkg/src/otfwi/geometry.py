"""Grids, velocity fields, acquisition layouts, and source wavelets.

Conventions used throughout the package: fields are float64 arrays of shape
(nx, nz) on a uniform grid, node (ix, iz) sits at (ix * dx, iz * dz), and the
row iz = nz - 1 is the free surface.  Depth increases as iz decreases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Grid",
    "VelocityField",
    "AcquisitionGeometry",
    "SourceWavelet",
    "ricker_wavelet",
    "surface_acquisition",
]


def _frozen_array(values, shape=None, name="values") -> np.ndarray:
    out = np.array(values, dtype=np.float64)
    if shape is not None and out.shape != tuple(shape):
        raise ValueError(f"{name} has shape {out.shape}, expected {tuple(shape)}")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Grid:
    """Uniform 2D grid. nx and nz count nodes, spacings are in meters."""

    nx: int
    nz: int
    dx: float
    dz: float

    def __post_init__(self):
        if self.nx < 3 or self.nz < 3:
            raise ValueError(f"grid needs nx, nz >= 3, got {self.nx} x {self.nz}")
        if self.dx <= 0 or self.dz <= 0:
            raise ValueError(f"grid spacings must be positive, got dx={self.dx}, dz={self.dz}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.nz)

    @property
    def surface_iz(self) -> int:
        return self.nz - 1


@dataclass(frozen=True)
class VelocityField:
    """Velocity values on a grid, in m/s.

    ``physical=True`` asserts strictly positive values, as required by the
    wave solver.  Intermediate diffusion states reuse this container with
    ``physical=False`` and may be signed.
    """

    grid: Grid
    values: np.ndarray
    physical: bool = True

    def __post_init__(self):
        vals = _frozen_array(self.values, self.grid.shape, "velocity values")
        if self.physical and not np.all(vals > 0):
            raise ValueError("physical velocity field must be strictly positive")
        if not np.all(np.isfinite(vals)):
            raise ValueError("velocity field contains non-finite values")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class AcquisitionGeometry:
    """Source and receiver node indices plus the recording time grid.

    ``sources`` and ``receivers`` are tuples of (ix, iz) node indices; traces
    are sampled at t_k = k * dt for k = 0 .. nt - 1.
    """

    grid: Grid
    sources: tuple[tuple[int, int], ...]
    receivers: tuple[tuple[int, int], ...]
    nt: int
    dt: float

    def __post_init__(self):
        if self.nt < 1:
            raise ValueError(f"nt must be >= 1, got {self.nt}")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if len(self.sources) == 0:
            raise ValueError("acquisition needs at least one source")
        if len(self.receivers) == 0:
            raise ValueError("acquisition needs at least one receiver")
        for label, nodes in (("source", self.sources), ("receiver", self.receivers)):
            for ix, iz in nodes:
                if not (0 <= ix < self.grid.nx and 0 <= iz < self.grid.nz):
                    raise ValueError(f"{label} node ({ix}, {iz}) falls outside the grid")

    @property
    def n_sources(self) -> int:
        return len(self.sources)

    @property
    def n_receivers(self) -> int:
        return len(self.receivers)

    @property
    def time_grid(self) -> np.ndarray:
        return np.arange(self.nt) * self.dt


@dataclass(frozen=True)
class SourceWavelet:
    """Sampled source time function on the recording time grid."""

    samples: np.ndarray
    dt: float
    peak_frequency: float
    delay: float

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.peak_frequency <= 0:
            raise ValueError(f"peak frequency must be positive, got {self.peak_frequency}")
        samples = _frozen_array(self.samples, name="wavelet samples")
        if samples.ndim != 1 or samples.size < 1:
            raise ValueError("wavelet samples must be a non-empty 1D array")
        # The sample nearest the nominal delay must carry the peak amplitude.
        k0 = int(np.argmin(np.abs(np.arange(samples.size) * self.dt - self.delay)))
        scale = float(np.max(np.abs(samples))) if samples.size else 0.0
        if samples[k0] < samples.max() - 1e-12 * max(scale, 1.0):
            raise ValueError("wavelet peak does not sit at the nominal delay")
        object.__setattr__(self, "samples", samples)

    @property
    def nt(self) -> int:
        return self.samples.size


def ricker_wavelet(peak_frequency: float, nt: int, dt: float, delay: float | None = None) -> SourceWavelet:
    """Ricker pulse f(t) = (1 - 2 pi^2 fp^2 (t - t0)^2) exp(-pi^2 fp^2 (t - t0)^2).

    The delay defaults to 1.1 / fp, which keeps the onset amplitude at t = 0
    below 1e-5 of the peak.
    """
    if peak_frequency <= 0:
        raise ValueError(f"peak frequency must be positive, got {peak_frequency}")
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if nt < 1:
        raise ValueError(f"nt must be >= 1, got {nt}")
    t0 = 1.1 / peak_frequency if delay is None else float(delay)
    t = np.arange(nt) * dt
    arg = (np.pi * peak_frequency * (t - t0)) ** 2
    samples = (1.0 - 2.0 * arg) * np.exp(-arg)
    return SourceWavelet(samples=samples, dt=dt, peak_frequency=peak_frequency, delay=t0)


def surface_acquisition(
    grid: Grid,
    n_sources: int,
    source_stride: int,
    depth_offset: int = 0,
    *,
    nt: int,
    dt: float,
) -> AcquisitionGeometry:
    """Evenly strided sources plus a dense receiver line near the surface.

    Sources sit at ix in {0, stride, 2*stride, ...} and receivers at
    ix = 0 .. nx - 2, all at iz = nz - 1 - depth_offset.  A depth offset of 0
    places the arrays on the free surface; 2 reproduces the buried variant.
    """
    if n_sources < 1:
        raise ValueError(f"need at least one source, got {n_sources}")
    if source_stride < 1:
        raise ValueError(f"source stride must be >= 1, got {source_stride}")
    if source_stride * (n_sources - 1) >= grid.nx:
        raise ValueError(
            f"source line of {n_sources} sources at stride {source_stride} "
            f"does not fit in nx={grid.nx}"
        )
    if not (0 <= depth_offset < grid.nz):
        raise ValueError(f"depth offset {depth_offset} falls outside the grid")
    iz = grid.nz - 1 - depth_offset
    sources = tuple((ix * source_stride, iz) for ix in range(n_sources))
    receivers = tuple((ix, iz) for ix in range(grid.nx - 1))
    return AcquisitionGeometry(grid=grid, sources=sources, receivers=receivers, nt=nt, dt=dt)
