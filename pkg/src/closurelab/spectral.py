"""Periodic-grid spectral machinery.

All spectral arrays use the real-to-complex layout of :func:`numpy.fft.rfft2`
over the last two axes: ``(..., ny, nx // 2 + 1)``. Any number of leading
axes (layers, ensemble members, population members) is carried through
unchanged, which is what lets the solver advance whole batches of
trajectories in one array.

Forward transforms are unnormalised; the inverse carries ``1 / (nx * ny)``.
The Nyquist row and column are held at zero so every retained mode has a
well-defined derivative and Hermitian symmetry is exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.fft as sfft

SSD_CUTOFF = 0.65
SSD_ALPHA = 23.6
SMOOTHING_ALPHA = 36.0
SMOOTHING_ORDER = 36


class GridMismatchError(ValueError):
    """Raised when a field does not live on the expected grid."""


@dataclass(frozen=True)
class Grid:
    """Doubly periodic rectangular grid.

    Parameters
    ----------
    nx, ny : int
        Number of grid points in x and y. Both must be even and at least 8.
    Lx, Ly : float
        Domain extents in metres.
    """

    nx: int
    ny: int
    Lx: float
    Ly: float
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        for n in (self.nx, self.ny):
            if n < 8 or n % 2:
                raise ValueError(f"grid sizes must be even and >= 8, got {self.nx}x{self.ny}")
        if self.Lx <= 0 or self.Ly <= 0:
            raise ValueError("domain extents must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def spectral_shape(self) -> tuple[int, int]:
        return (self.ny, self.nx // 2 + 1)

    @property
    def dx(self) -> float:
        return self.Lx / self.nx

    @property
    def dy(self) -> float:
        return self.Ly / self.ny

    @cached_property
    def kx(self) -> np.ndarray:
        """Angular x-wavenumbers in rfft order, shape ``(nx // 2 + 1,)``."""
        return 2 * np.pi / self.Lx * np.arange(self.nx // 2 + 1)

    @cached_property
    def ky(self) -> np.ndarray:
        """Angular y-wavenumbers in standard FFT order, shape ``(ny,)``."""
        return 2 * np.pi / self.Ly * np.fft.fftfreq(self.ny, 1.0 / self.ny)

    @cached_property
    def KX(self) -> np.ndarray:
        return np.broadcast_to(self.kx[None, :], self.spectral_shape)

    @cached_property
    def KY(self) -> np.ndarray:
        return np.broadcast_to(self.ky[:, None], self.spectral_shape)

    @cached_property
    def retained(self) -> np.ndarray:
        """Boolean mask of modes kept by the grid (Nyquist row/column dropped)."""
        mask = np.ones(self.spectral_shape, dtype=bool)
        mask[self.ny // 2, :] = False
        mask[:, self.nx // 2] = False
        return mask

    @cached_property
    def ksq(self) -> np.ndarray:
        return self.KX**2 + self.KY**2

    @cached_property
    def kappa(self) -> np.ndarray:
        return np.sqrt(self.ksq)

    @cached_property
    def kmax(self) -> float:
        """Largest resolved isotropic wavenumber: the radius of the largest
        circle of retained modes, i.e. the smaller retained axis maximum."""
        kx = np.abs(self.kx[: self.nx // 2]).max()
        ky = np.abs(self.ky[np.arange(self.ny) != self.ny // 2]).max()
        return float(min(kx, ky))

    @cached_property
    def kappa_corner(self) -> float:
        """Largest wavenumber magnitude among retained modes."""
        return float(self.kappa[self.retained].max())

    @cached_property
    def dkappa(self) -> float:
        """Fundamental wavenumber, used as the isotropic bin width."""
        return 2 * np.pi / max(self.Lx, self.Ly)

    @cached_property
    def ikx(self) -> np.ndarray:
        return np.where(self.retained, 1j * self.KX, 0.0)

    @cached_property
    def iky(self) -> np.ndarray:
        return np.where(self.retained, 1j * self.KY, 0.0)

    @cached_property
    def weights(self) -> np.ndarray:
        """Multiplicity of each half-plane mode in the full spectrum."""
        w = np.full(self.spectral_shape, 2.0)
        w[:, 0] = 1.0
        w[:, self.nx // 2] = 1.0
        return w

    @cached_property
    def dealias_multiplier(self) -> np.ndarray:
        return smoothing_multiplier(self.kappa / self.kmax) * self.retained

    def ssd_multiplier(self, cutoff: float = SSD_CUTOFF, alpha: float = SSD_ALPHA) -> np.ndarray:
        key = ("ssd", cutoff, alpha)
        if key not in self._cache:
            self._cache[key] = ssd_response(self.kappa / self.kmax, cutoff, alpha) * self.retained
        return self._cache[key]

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical coordinates ``(x, y)`` as 2-D arrays of shape ``(ny, nx)``."""
        x = np.arange(self.nx) * self.dx
        y = np.arange(self.ny) * self.dy
        return np.meshgrid(x, y)

    # array-level transforms, used by the solver
    def fft(self, f: np.ndarray) -> np.ndarray:
        if f.shape[-2:] != self.shape:
            raise GridMismatchError(f"field shape {f.shape[-2:]} does not match grid {self.shape}")
        return sfft.rfft2(f) * self.retained

    def ifft(self, fh: np.ndarray) -> np.ndarray:
        if fh.shape[-2:] != self.spectral_shape:
            raise GridMismatchError(
                f"spectral shape {fh.shape[-2:]} does not match grid {self.spectral_shape}"
            )
        return sfft.irfft2(fh, s=self.shape)

    def jacobian_hat(self, psih: np.ndarray, qh: np.ndarray) -> np.ndarray:
        """Dealiased pseudospectral J(psi, q) on spectral arrays."""
        d = self.dealias_multiplier
        psih = psih * d
        qh = qh * d
        psi_x = self.ifft(self.ikx * psih)
        psi_y = self.ifft(self.iky * psih)
        q_x = self.ifft(self.ikx * qh)
        q_y = self.ifft(self.iky * qh)
        return self.fft(psi_x * q_y - psi_y * q_x) * d

    def inner(self, ah: np.ndarray, bh: np.ndarray) -> np.ndarray:
        """Domain mean of the product of two real fields, from their spectra."""
        n2 = float(self.nx * self.ny) ** 2
        return np.sum(self.weights * (ah.conj() * bh).real, axis=(-2, -1)) / n2


def ssd_response(r: np.ndarray, cutoff: float = SSD_CUTOFF, alpha: float = SSD_ALPHA) -> np.ndarray:
    """Scale-selective dissipation multiplier as a function of ``kappa / kmax``.

    One for ``r <= cutoff``, ``exp(-alpha * ((r - cutoff) / (1 - cutoff))**4)``
    above it.
    """
    r = np.asarray(r, dtype=float)
    s = np.clip((r - cutoff) / (1.0 - cutoff), 0.0, None)
    return np.exp(-alpha * s**4)


def smoothing_multiplier(r: np.ndarray) -> np.ndarray:
    """Fourier smoothing multiplier ``exp(-36 (kappa / kmax)**36)``."""
    r = np.asarray(r, dtype=float)
    return np.exp(-SMOOTHING_ALPHA * r**SMOOTHING_ORDER)


@dataclass(frozen=True)
class SpectralField:
    """Spectral coefficients over ``(..., ny, nx // 2 + 1)`` tied to a grid."""

    coefficients: np.ndarray
    grid: Grid

    def __post_init__(self):
        if self.coefficients.shape[-2:] != self.grid.spectral_shape:
            raise GridMismatchError(
                f"coefficients {self.coefficients.shape[-2:]} do not fit grid {self.grid.spectral_shape}"
            )

    def _same(self, coefficients: np.ndarray) -> SpectralField:
        return SpectralField(coefficients, self.grid)


def _check_pair(a: SpectralField, b: SpectralField) -> None:
    if a.grid != b.grid:
        raise GridMismatchError("fields live on different grids")


def forward_transform(values: np.ndarray, grid: Grid) -> SpectralField:
    """Transform a real field of shape ``(..., ny, nx)`` to spectral space."""
    values = np.asarray(values, dtype=float)
    return SpectralField(grid.fft(values), grid)


def inverse_transform(f: SpectralField) -> np.ndarray:
    return f.grid.ifft(f.coefficients)


def laplacian(f: SpectralField) -> SpectralField:
    return f._same(-f.grid.ksq * f.coefficients)


def ddx(f: SpectralField) -> SpectralField:
    return f._same(f.grid.ikx * f.coefficients)


def ddy(f: SpectralField) -> SpectralField:
    return f._same(f.grid.iky * f.coefficients)


def jacobian(psi: SpectralField, q: SpectralField) -> SpectralField:
    """Pseudospectral ``J(psi, q) = psi_x q_y - psi_y q_x``.

    Products are formed on the same grid; the Fourier smoothing filter is
    applied to both inputs and to the result in place of padding.
    """
    _check_pair(psi, q)
    return psi._same(psi.grid.jacobian_hat(psi.coefficients, q.coefficients))


def ssd_filter(f: SpectralField, cutoff: float = SSD_CUTOFF, alpha: float = SSD_ALPHA) -> SpectralField:
    """Apply one step of scale-selective dissipation."""
    return f._same(f.coefficients * f.grid.ssd_multiplier(cutoff, alpha))


def dealias_filter(f: SpectralField) -> SpectralField:
    return f._same(f.coefficients * f.grid.dealias_multiplier)


def mean_square(f: SpectralField) -> np.ndarray:
    """Physical-space mean square computed from the spectrum (Parseval)."""
    return f.grid.inner(f.coefficients, f.coefficients)


def band_limited_noise(
    grid: Grid,
    rng: np.random.Generator,
    shape: tuple[int, ...] = (),
    kmin: float = 0.0,
    kmax: float | None = None,
    rms: float = 1.0,
) -> np.ndarray:
    """Real Gaussian field with support on ``kmin <= kappa <= kmax``, scaled to ``rms``."""
    kmax = grid.kmax if kmax is None else kmax
    white = rng.standard_normal(shape + grid.shape)
    mask = (grid.kappa >= kmin) & (grid.kappa <= kmax) & grid.retained
    mask[0, 0] = False
    f = grid.ifft(grid.fft(white) * mask)
    cur = np.sqrt(np.mean(f**2, axis=(-2, -1), keepdims=True))
    return f * (rms / np.where(cur > 0, cur, 1.0))
