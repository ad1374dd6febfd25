"""Two-layer quasi-geostrophic (Phillips) model.

The prognostic variable is the eddy PV anomaly ``q`` stacked as
``(..., 2, ny, nx)`` with layer 0 on top. Everything here works on batches:
leading axes in front of the layer axis are independent trajectories.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property

import numpy as np

from .spectral import SSD_ALPHA, SSD_CUTOFF, Grid, band_limited_noise

SECONDS_PER_DAY = 86400.0
SECONDS_PER_YEAR = 365.0 * SECONDS_PER_DAY

BLOWUP_FACTOR = 1e6
SPINUP_NOISE_RMS = 1e-7


class InstabilityDetected(RuntimeError):
    """A trajectory produced non-finite or runaway PV."""

    def __init__(self, message: str, step: int | None = None, mask: np.ndarray | None = None):
        super().__init__(message)
        self.step = step
        self.mask = mask


@dataclass(frozen=True)
class QgParams:
    """Physical and numerical parameters. Defaults follow the ocean jet setup
    at desk-scale resolution (128x128, 15 minute step)."""

    Lx: float = 1.0e6
    Ly: float = 1.0e6
    H1: float = 500.0
    H2: float = 5000.0
    Ubar1: float = 0.025
    beta: float = 1.0e-11
    gamma: float = 7.0e-8
    rd: float = 15.0e3
    nx: int = 128
    ny: int = 128
    dt: float = 900.0
    ssd_cutoff: float = SSD_CUTOFF
    ssd_alpha: float = SSD_ALPHA

    def __post_init__(self):
        for name in ("H1", "H2", "Lx", "Ly", "dt", "rd"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")

    @property
    def kd(self) -> float:
        return 1.0 / self.rd

    @property
    def delta(self) -> float:
        return self.H1 / self.H2

    @property
    def F1(self) -> float:
        return self.kd**2 / (1.0 + self.delta)

    @property
    def F2(self) -> float:
        return self.delta * self.F1

    @property
    def beta1(self) -> float:
        return self.beta + self.F1 * self.Ubar1

    @property
    def beta2(self) -> float:
        return self.beta - self.F2 * self.Ubar1

    @property
    def grid(self) -> Grid:
        return _grid(self.nx, self.ny, self.Lx, self.Ly)

    def with_resolution(self, n: int, dt: float) -> QgParams:
        return replace(self, nx=n, ny=n, dt=dt)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_GRIDS: dict = {}


def _grid(nx, ny, Lx, Ly) -> Grid:
    key = (nx, ny, Lx, Ly)
    if key not in _GRIDS:
        _GRIDS[key] = Grid(nx, ny, Lx, Ly)
    return _GRIDS[key]


class QgOperators:
    """Precomputed spectral operators for one parameter set."""

    def __init__(self, params: QgParams):
        self.params = params
        g = self.grid = params.grid
        ksq = g.ksq
        F1, F2 = params.F1, params.F2
        det = ksq * (ksq + F1 + F2)
        det[0, 0] = 1.0
        inv = np.zeros((2, 2) + g.spectral_shape)
        inv[0, 0] = -(ksq + F2) / det
        inv[0, 1] = -F1 / det
        inv[1, 0] = -F2 / det
        inv[1, 1] = -(ksq + F1) / det
        inv[..., 0, 0] = 0.0
        self.inv = inv * g.retained
        self.ssd = g.ssd_multiplier(params.ssd_cutoff, params.ssd_alpha)
        self.beta_ikx = np.stack([params.beta1 * g.ikx, params.beta2 * g.ikx])
        self.U_ikx = params.Ubar1 * g.ikx
        self.drag = params.gamma * ksq * g.retained

    def invert(self, qh: np.ndarray) -> np.ndarray:
        """Stream function spectrum from PV spectrum, batched over leading axes."""
        q1, q2 = qh[..., 0, :, :], qh[..., 1, :, :]
        inv = self.inv
        return np.stack([inv[0, 0] * q1 + inv[0, 1] * q2, inv[1, 0] * q1 + inv[1, 1] * q2], axis=-3)

    def pv(self, psih: np.ndarray) -> np.ndarray:
        p = self.params
        ksq = self.grid.ksq
        p1, p2 = psih[..., 0, :, :], psih[..., 1, :, :]
        q1 = -ksq * p1 + p.F1 * (p2 - p1)
        q2 = -ksq * p2 + p.F2 * (p1 - p2)
        return np.stack([q1, q2], axis=-3) * self.grid.retained

    def tendency(self, qh: np.ndarray, nonlinear: bool = True) -> np.ndarray:
        psih = self.invert(qh)
        out = -self.beta_ikx * psih
        out[..., 0, :, :] -= self.U_ikx * qh[..., 0, :, :]
        out[..., 1, :, :] += self.drag * psih[..., 1, :, :]
        if nonlinear:
            out -= self.grid.jacobian_hat(psih, qh)
        return out


_OPS: dict = {}


def operators(params: QgParams) -> QgOperators:
    if params not in _OPS:
        _OPS[params] = QgOperators(params)
    return _OPS[params]


def invert_pv(qh: np.ndarray, params: QgParams) -> np.ndarray:
    """Solve ``q = M(kappa^2) psi`` mode by mode; the zero mode of psi is 0."""
    return operators(params).invert(np.asarray(qh))


def pv_from_streamfunction(psih: np.ndarray, params: QgParams) -> np.ndarray:
    return operators(params).pv(np.asarray(psih))


def tendency(qh: np.ndarray, params: QgParams, nonlinear: bool = True) -> np.ndarray:
    """Spectral ``dq/dt`` without the scale-selective dissipation."""
    return operators(params).tendency(np.asarray(qh), nonlinear=nonlinear)


def rms(qh: np.ndarray, grid: Grid) -> np.ndarray:
    """Per-trajectory RMS of PV over layers and grid points, from the spectrum."""
    ms = grid.inner(qh, qh)
    return np.sqrt(np.mean(ms, axis=-1))


AB_COEFFS = {
    0: (1.0,),
    1: (1.5, -0.5),
    2: (23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0),
}


@dataclass
class StepperState:
    """Spectral PV plus the Adams-Bashforth tendency history."""

    qh: np.ndarray
    time: float = 0.0
    nstep: int = 0
    history: list = field(default_factory=list)
    threshold: np.ndarray | float = np.inf

    @property
    def order(self) -> int:
        return len(self.history)


def initial_state(q: np.ndarray, params: QgParams, time: float = 0.0) -> StepperState:
    """Build a stepper state from physical PV of shape ``(..., 2, ny, nx)``.

    The runaway threshold is fixed here at ``BLOWUP_FACTOR`` times the
    initial RMS of each trajectory.
    """
    q = np.asarray(q, dtype=float)
    if q.shape[-3:] != (2,) + params.grid.shape:
        raise ValueError(f"expected (..., 2, {params.ny}, {params.nx}) PV, got {q.shape}")
    qh = params.grid.fft(q)
    r = rms(qh, params.grid)
    threshold = np.where(r > 0, BLOWUP_FACTOR * r, np.inf)
    return StepperState(qh=qh, time=time, threshold=threshold)


def physical(state: StepperState, params: QgParams) -> np.ndarray:
    return params.grid.ifft(state.qh)


def unstable_mask(qh: np.ndarray, threshold, grid: Grid) -> np.ndarray:
    r = rms(qh, grid)
    return ~np.isfinite(r) | (r > threshold)


def advance(
    state: StepperState,
    params: QgParams,
    increment: np.ndarray | None = None,
    nonlinear: bool = True,
) -> np.ndarray:
    """Advance in place by one step and return the per-trajectory instability mask.

    ``increment`` (spectral) is added after the filtered AB step; this is the
    hook used by closures. Unstable trajectories are zeroed so they cannot
    overflow the rest of the batch.
    """
    ops = operators(params)
    tend = ops.tendency(state.qh, nonlinear=nonlinear)
    history = [tend] + state.history
    coeffs = AB_COEFFS[min(len(history) - 1, 2)]
    dq = coeffs[0] * history[0]
    for c, h in zip(coeffs[1:], history[1:]):
        dq = dq + c * h
    qh = (state.qh + params.dt * dq) * ops.ssd
    if increment is not None:
        qh = qh + increment
    state.history = history[:2]
    state.nstep += 1
    state.time += params.dt
    bad = unstable_mask(qh, state.threshold, ops.grid)
    if np.any(bad):
        qh[bad] = 0.0
        for h in state.history:
            h[bad] = 0.0
    state.qh = qh
    return bad


def step(state: StepperState, params: QgParams, nonlinear: bool = True) -> StepperState:
    """One Euler/AB2/AB3 step followed by the dissipation filter.

    Raises :class:`InstabilityDetected` if any trajectory runs away.
    """
    bad = advance(state, params, nonlinear=nonlinear)
    if np.any(bad):
        raise InstabilityDetected(f"instability at step {state.nstep}", step=state.nstep, mask=bad)
    return state


def integrate(state: StepperState, params: QgParams, nsteps: int, callback=None) -> StepperState:
    for _ in range(nsteps):
        step(state, params)
        if callback is not None:
            callback(state)
    return state


def initial_noise(params: QgParams, seed: int, rms_value: float = SPINUP_NOISE_RMS) -> np.ndarray:
    """Band-limited Gaussian PV noise over 0.07-0.35 kmax, which spans the unstable band."""
    g = params.grid
    rng = np.random.default_rng(seed)
    return band_limited_noise(g, rng, (2,), kmin=0.07 * g.kmax, kmax=0.35 * g.kmax, rms=rms_value)


def spin_up(params: QgParams, seed: int, duration: float, callback=None) -> np.ndarray:
    """Integrate from small random PV noise for ``duration`` seconds.

    Returns the final physical PV field. Identical seeds give identical output.
    """
    if duration < 0:
        raise ValueError("duration must be non-negative")
    q0 = initial_noise(params, seed)
    nsteps = int(round(duration / params.dt))
    if nsteps == 0:
        return q0
    state = initial_state(q0, params)
    integrate(state, params, nsteps, callback)
    return physical(state, params)


def energy(qh: np.ndarray, params: QgParams) -> np.ndarray:
    """Depth-weighted total energy ``-sum_i H_i <psi_i q_i> / (2 H)``.

    This is the quadratic invariant of the inviscid, unforced system.
    """
    psih = invert_pv(qh, params)
    g = params.grid
    prod = g.inner(psih, qh)
    H = np.array([params.H1, params.H2])
    return -0.5 * np.sum(H * prod, axis=-1) / H.sum()


def enstrophy(qh: np.ndarray, params: QgParams) -> np.ndarray:
    """Per-layer ``<q^2> / 2``."""
    return 0.5 * params.grid.inner(qh, qh)
