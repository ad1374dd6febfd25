"""Fine-to-coarse projection: spectral truncation then one pass of the
coarse model's dissipation filter."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .spectral import GridMismatchError, Grid


@dataclass(frozen=True)
class CoarsenSpec:
    fine: Grid
    coarse: Grid
    ssd_cutoff: float = 0.65
    ssd_alpha: float = 23.6

    def __post_init__(self):
        f, c = self.fine, self.coarse
        if (f.Lx, f.Ly) != (c.Lx, c.Ly):
            raise ValueError("fine and coarse grids must cover the same domain")
        if f.nx % c.nx or f.ny % c.ny:
            raise ValueError("coarse sizes must divide fine sizes")
        if not (c.nx < f.nx and c.ny < f.ny):
            raise ValueError("coarse Nyquist must lie strictly below fine Nyquist")

    @property
    def filter(self) -> np.ndarray:
        return self.coarse.ssd_multiplier(self.ssd_cutoff, self.ssd_alpha)

    def _rows(self) -> np.ndarray:
        nyc, ny = self.coarse.ny, self.fine.ny
        return np.r_[np.arange(nyc // 2 + 1), np.arange(ny - nyc // 2 + 1, ny)]

    def truncate_hat(self, fh: np.ndarray) -> np.ndarray:
        """Fine spectrum -> coarse spectrum (unnormalised forward convention)."""
        c = self.coarse
        ratio = (c.nx * c.ny) / (self.fine.nx * self.fine.ny)
        out = fh[..., self._rows(), : c.nx // 2 + 1] * ratio
        return out * c.retained

    def lift_hat(self, ch: np.ndarray) -> np.ndarray:
        """Zero-pad a coarse spectrum onto the fine grid."""
        f, c = self.fine, self.coarse
        out = np.zeros(ch.shape[:-2] + f.spectral_shape, dtype=complex)
        ratio = (f.nx * f.ny) / (c.nx * c.ny)
        out[..., self._rows(), : c.nx // 2 + 1] = ch * c.retained * ratio
        return out


def coarsen(fine: np.ndarray, spec: CoarsenSpec) -> np.ndarray:
    """Project physical fine fields ``(..., ny, nx)`` onto the coarse grid."""
    fine = np.asarray(fine, dtype=float)
    if fine.shape[-2:] != spec.fine.shape:
        raise GridMismatchError(f"field {fine.shape[-2:]} is not on the fine grid {spec.fine.shape}")
    ch = spec.truncate_hat(spec.fine.fft(fine)) * spec.filter
    return spec.coarse.ifft(ch)


def lift(coarse: np.ndarray, spec: CoarsenSpec) -> np.ndarray:
    coarse = np.asarray(coarse, dtype=float)
    if coarse.shape[-2:] != spec.coarse.shape:
        raise GridMismatchError("field is not on the coarse grid")
    return spec.fine.ifft(spec.lift_hat(spec.coarse.fft(coarse)))


def stride_for(fine_dt: float, coarse_dt: float) -> int:
    """Number of fine steps per coarse step; raises if they do not align."""
    ratio = coarse_dt / fine_dt
    stride = int(round(ratio))
    if stride < 1 or abs(ratio - stride) > 1e-9 * ratio:
        raise ValueError(f"coarse dt {coarse_dt} is not a whole multiple of fine dt {fine_dt}")
    return stride


def iter_training_series(source: Iterable[np.ndarray], spec: CoarsenSpec, stride: int) -> Iterator[np.ndarray]:
    """Coarsen every ``stride``-th state of a fine trajectory.

    ``source`` yields the fine state after each fine step; the first snapshot
    is taken after ``stride`` steps.
    """
    if stride < 1:
        raise ValueError("stride must be positive")
    for i, x in enumerate(source, start=1):
        if i % stride == 0:
            yield coarsen(x, spec)


def make_training_series(source: Iterable[np.ndarray], spec: CoarsenSpec, stride: int) -> np.ndarray:
    snaps = list(iter_training_series(source, spec, stride))
    if not snaps:
        return np.empty((0, 2) + spec.coarse.shape)
    return np.stack(snaps)
