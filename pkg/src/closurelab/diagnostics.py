"""Evaluation: score curves, isotropic KE spectra, spectrum error, spread,
and long free-running integrations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import qg as qgm
from .closure import BatchRollout, ClosureParams, EnsembleForecast
from .scoring import lead_scores

STATIONARY_DISCARD = 0.1


@dataclass
class IsotropicSpectrum:
    """Depth-averaged KE density per unit wavenumber in annular bins.

    Bin ``i`` covers ``[(i - 1/2) dk, (i + 1/2) dk)`` with centre ``i dk``;
    bins run out to the grid corner so that ``sum(E * dk)`` is the
    domain-mean kinetic energy.
    """

    kappa: np.ndarray
    E: np.ndarray
    dkappa: float
    kmax: float
    n_snapshots: int = 1

    @property
    def edges(self) -> np.ndarray:
        return np.r_[self.kappa - 0.5 * self.dkappa, self.kappa[-1] + 0.5 * self.dkappa]

    def total(self) -> float:
        return float(np.sum(self.E) * self.dkappa)

    def to_csv(self, path, meta: dict | None = None) -> None:
        with open(path, "w") as fh:
            fh.write(_meta_lines(meta) + "kappa,E\n")
            for k, e in zip(self.kappa, self.E):
                fh.write(f"{k:.17g},{e:.17g}\n")


def _meta_lines(meta: dict | None) -> str:
    return "".join(f"# {k}={v}\n" for k, v in (meta or {}).items())


def _bin_index(grid) -> tuple[np.ndarray, int]:
    idx = np.floor(grid.kappa / grid.dkappa + 0.5).astype(int)
    nbins = int(np.floor(grid.kappa_corner / grid.dkappa + 0.5))
    return idx, nbins


def modal_ke(qh: np.ndarray, params: qgm.QgParams) -> np.ndarray:
    """Per-mode contribution to the depth-averaged domain-mean KE."""
    g = params.grid
    psih = qgm.invert_pv(qh, params)
    H = np.array([params.H1, params.H2])[:, None, None]
    n2 = float(g.nx * g.ny) ** 2
    e = 0.5 * np.sum(H * g.ksq * np.abs(psih) ** 2, axis=-3) / H.sum()
    return e * g.weights * g.retained / n2


def kinetic_energy_spectrum(states, params: qgm.QgParams) -> IsotropicSpectrum:
    """Snapshot-averaged isotropic KE spectrum of PV states ``(T, 2, ny, nx)``."""
    states = np.asarray(states, dtype=float)
    if states.ndim == 3:
        states = states[None]
    if states.shape[0] == 0:
        raise ValueError("need at least one snapshot")
    g = params.grid
    e = modal_ke(g.fft(states), params).mean(axis=0)
    idx, nbins = _bin_index(g)
    E = np.bincount(idx.ravel(), weights=e.ravel(), minlength=nbins + 1)[1 : nbins + 1] / g.dkappa
    return IsotropicSpectrum(
        kappa=g.dkappa * np.arange(1, nbins + 1),
        E=E,
        dkappa=g.dkappa,
        kmax=g.kmax,
        n_snapshots=states.shape[0],
    )


class SpectrumAccumulator:
    """Running snapshot average of the isotropic spectrum (batched states allowed)."""

    def __init__(self, params: qgm.QgParams):
        self.params = params
        self.sum = 0.0
        self.count = 0

    def add(self, qh: np.ndarray) -> None:
        self.sum = self.sum + modal_ke(qh, self.params)
        self.count += 1

    def spectrum(self, index=()) -> IsotropicSpectrum:
        g = self.params.grid
        e = np.asarray(self.sum)[index] / self.count
        idx, nbins = _bin_index(g)
        E = np.bincount(idx.ravel(), weights=e.ravel(), minlength=nbins + 1)[1 : nbins + 1] / g.dkappa
        return IsotropicSpectrum(g.dkappa * np.arange(1, nbins + 1), E, g.dkappa, g.kmax, self.count)


def spectrum_error(model: IsotropicSpectrum, truth: IsotropicSpectrum) -> float:
    """Mean squared log ratio of two spectra over ``[0, 2/3 kmax]``.

    Midpoint rule over bins, with the first bin extended down to zero.
    """
    if model.E.shape != truth.E.shape or not np.allclose(model.kappa, truth.kappa):
        raise ValueError("spectra must share the same binning")
    kc = 2.0 / 3.0 * truth.kmax
    lo = truth.kappa - 0.5 * truth.dkappa
    lo[0] = 0.0
    hi = truth.kappa + 0.5 * truth.dkappa
    wts = np.clip(np.minimum(hi, kc) - lo, 0.0, None)
    used = wts > 0
    if np.any(model.E[used] <= 0) or np.any(truth.E[used] <= 0):
        raise ValueError("spectra must be strictly positive below the cut-off")
    r = np.log(model.E[used] / truth.E[used])
    return float(np.sum(wts[used] * r**2) / kc)


@dataclass
class ScoreCurve:
    lead_steps: np.ndarray
    lead_hours: np.ndarray
    mean_score: np.ndarray
    n_windows: int

    def to_csv(self, path, meta: dict | None = None) -> None:
        with open(path, "w") as fh:
            fh.write(_meta_lines(meta))
            fh.write("lead_steps,lead_hours,mean_energy_score,n_windows\n")
            for s, h, v in zip(self.lead_steps, self.lead_hours, self.mean_score):
                fh.write(f"{int(s)},{h:.17g},{v:.17g},{self.n_windows}\n")


def score_curve(
    series,
    p: ClosureParams,
    params: qgm.QgParams,
    horizon: int,
    S: int,
    seed: int,
    window: int | None = None,
    max_windows: int | None = None,
    chunk: int = 4,
) -> ScoreCurve:
    """Mean energy score per lead over disjoint validation windows.

    Windows of ``window`` steps (default ``horizon``) tile the series; each is
    rolled out ``horizon`` steps with ``S`` members from its observed state.
    ``S = 1`` scores with the Euclidean distance.
    """
    window = horizon if window is None else window
    if horizon > window:
        raise ValueError("horizon must not exceed the window length")
    nwin = (len(series) - 1) // window
    if max_windows is not None:
        nwin = min(nwin, max_windows)
    if nwin < 1:
        raise ValueError("not enough validation data for one window")
    starts = np.arange(nwin) * window
    total = np.zeros(horizon)
    for i in range(0, nwin, chunk):
        sc, _ = lead_scores(series, p.family, p.theta[None], horizon, S, params, seed, starts=starts[i : i + chunk])
        total += sc[0].sum(axis=0)
    leads = np.arange(1, horizon + 1)
    return ScoreCurve(leads, leads * params.dt / 3600.0, total / nwin, nwin)


def spread_curve(ensemble: EnsembleForecast | np.ndarray) -> np.ndarray:
    """Per-lead RMS deviation of members from the ensemble mean.

    Accepts an :class:`EnsembleForecast` or an array ``(S, w, ...)``.
    """
    members = ensemble.members if isinstance(ensemble, EnsembleForecast) else np.asarray(ensemble, dtype=float)
    S = members.shape[0]
    if S < 2:
        raise ValueError("spread needs at least two members")
    flat = members.reshape(S, members.shape[1], -1)
    dev = flat - flat.mean(axis=0)
    return np.sqrt(np.sum(dev**2, axis=(0, 2)) / ((S - 1) * flat.shape[2]))


def mean_spread_curve(series, p: ClosureParams, params, horizon: int, S: int, seed: int, starts) -> np.ndarray:
    """Spread per lead averaged (in variance) over several initial conditions."""
    starts = np.asarray(starts, dtype=int)
    roll = BatchRollout(p.family, p.theta[None], params, np.asarray(series)[starts], S, seed, streams=starts)
    out = np.empty(horizon)
    for m, x in enumerate(roll.run(horizon)):
        flat = x[0].reshape(len(starts), S, -1)
        dev = flat - flat.mean(axis=1, keepdims=True)
        out[m] = np.sqrt(np.sum(dev**2) / ((S - 1) * flat.shape[0] * flat.shape[2]))
    return out


@dataclass
class LongRunReport:
    duration: float
    survived: bool
    survival_time: float
    final_state: np.ndarray | None
    spectrum: IsotropicSpectrum | None
    extras: dict = field(default_factory=dict)

    def rows(self) -> list[tuple[str, str]]:
        out = [
            ("duration_s", f"{self.duration:.17g}"),
            ("survived", str(int(self.survived))),
            ("survival_time_s", f"{self.survival_time:.17g}"),
        ]
        if self.spectrum is not None:
            out.append(("total_ke", f"{self.spectrum.total():.17g}"))
        out.extend((k, str(v)) for k, v in self.extras.items())
        return out


def long_runs(
    closures: list[ClosureParams],
    params: qgm.QgParams,
    duration: float,
    seed: int,
    x0: np.ndarray,
    sample_every: int = 12,
    discard: float = STATIONARY_DISCARD,
) -> list[LongRunReport]:
    """Free-running closed simulations, batched per closure family.

    Spectra are averaged every ``sample_every`` steps after discarding the
    first ``discard`` fraction of the run; unstable runs get no spectrum.
    """
    nsteps = int(round(duration / params.dt))
    start = int(np.ceil(discard * nsteps))
    reports: list[LongRunReport | None] = [None] * len(closures)
    groups: dict = {}
    for i, c in enumerate(closures):
        groups.setdefault(c.family, []).append(i)
    for family, idx in groups.items():
        thetas = np.stack([closures[i].theta for i in idx]) if family.n_params else np.zeros((len(idx), 0))
        roll = BatchRollout(family, thetas, params, x0, 1, seed, streams=[0])
        acc = SpectrumAccumulator(params)
        for n in range(1, nsteps + 1):
            roll.step()
            if not roll.alive.any():
                break
            if n > start and (n - start) % sample_every == 0:
                acc.add(roll.state.qh[:, 0, 0])
        final = roll.grid.ifft(roll.state.qh[:, 0, 0])
        for j, i in enumerate(idx):
            ok = bool(roll.alive[j, 0, 0])
            fs = roll.fail_step[j, 0, 0]
            reports[i] = LongRunReport(
                duration=nsteps * params.dt,
                survived=ok,
                survival_time=nsteps * params.dt if ok else float(fs * params.dt),
                final_state=final[j] if ok else None,
                spectrum=acc.spectrum(j) if ok and acc.count else None,
            )
    return reports


def long_run(p: ClosureParams, params: qgm.QgParams, duration: float, seed: int, x0=None, **kw) -> LongRunReport:
    """Single free run; starts from ``x0`` or, if omitted, from seeded noise."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    if x0 is None:
        x0 = qgm.initial_noise(params, seed)
    return long_runs([p], params, duration, seed, x0, **kw)[0]
