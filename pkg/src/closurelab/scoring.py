"""Energy score, its ensemble estimator and the windowed online loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from . import qg as qgm
from .closure import BatchRollout, ClosureFamily, ClosureParams

log = logging.getLogger(__name__)

INV_SQRT_PI = 1.0 / np.sqrt(np.pi)


def _flat_members(members, y):
    members = np.asarray(members, dtype=float)
    y = np.asarray(y, dtype=float)
    if members.shape[1:] != y.shape:
        raise ValueError(f"member shape {members.shape[1:]} does not match observation shape {y.shape}")
    S = members.shape[0]
    return members.reshape(S, -1), y.reshape(-1)


def energy_score(members, y) -> float:
    """Unbiased ensemble estimator of the energy score.

    ``members`` has shape ``(S, ...)`` with ``S >= 2``; ``y`` has the shape of
    one member. All components enter one unweighted Euclidean norm.
    """
    X, y = _flat_members(members, y)
    S = X.shape[0]
    if S < 2:
        raise ValueError("the ensemble estimator needs at least two members")
    return float(energy_score_batch(X[:, None, :], y[None, :])[0])


def energy_score_batch(members: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Vectorised estimator: ``members (S, ..., D)``, ``y (..., D)`` -> ``(...)``.

    ``S = 1`` gives the Euclidean distance (the deterministic reduction).
    """
    S = members.shape[0]
    skill = np.mean(np.linalg.norm(members - y[None], axis=-1), axis=0)
    if S == 1:
        return skill
    spread = np.zeros(skill.shape)
    for s in range(S):
        for t in range(s + 1, S):
            spread = spread + np.linalg.norm(members[s] - members[t], axis=-1)
    # the double sum counts each unordered pair twice
    return skill - spread / (S * (S - 1))


def energy_score_deterministic(yhat, y) -> float:
    yhat = np.asarray(yhat, dtype=float)
    y = np.asarray(y, dtype=float)
    if yhat.shape != y.shape:
        raise ValueError(f"shape mismatch {yhat.shape} vs {y.shape}")
    return float(np.linalg.norm((yhat - y).ravel()))


def gaussian_crps_oracle(mu, sigma, y):
    """Closed-form CRPS of ``N(mu, sigma^2)`` at ``y``."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    z = (np.asarray(y, dtype=float) - mu) / sigma
    return sigma * (z * (2 * norm.cdf(z) - 1) + 2 * norm.pdf(z) - INV_SQRT_PI)


def expected_abs_normal(delta, tau):
    """``E|D|`` for ``D ~ N(delta, tau^2)``; reduces to ``|delta|`` at ``tau = 0``."""
    delta = np.asarray(delta, dtype=float)
    tau = np.asarray(tau, dtype=float)
    safe = np.where(tau > 0, tau, 1.0)
    r = delta / safe
    val = safe * (2 * norm.pdf(r) + r * (2 * norm.cdf(r) - 1))
    return np.where(tau > 0, val, np.abs(delta))


def expected_gaussian_crps(mu, sigma, m, s):
    """``E_y CRPS(N(mu, sigma^2), y)`` for ``y ~ N(m, s^2)``; ``sigma`` may be 0."""
    sigma = np.asarray(sigma, dtype=float)
    return expected_abs_normal(np.asarray(mu) - m, np.sqrt(sigma**2 + np.asarray(s) ** 2)) - sigma * INV_SQRT_PI


@dataclass(frozen=True)
class LossConfig:
    """Online loss settings.

    ``S = 1`` selects the Euclidean (deterministic) reduction. Windows whose
    rollout goes unstable score ``penalty_factor`` times the median stable
    window loss at every lead, unless an explicit penalty is passed.
    """

    w: int
    S: int = 4
    penalty_factor: float = 1e3

    def __post_init__(self):
        if self.w < 1 or self.S < 1:
            raise ValueError("need w >= 1 and S >= 1")


def n_windows(n_snapshots: int, w: int) -> int:
    """Number of disjoint windows in a series of ``N + 1`` snapshots."""
    return (n_snapshots - 1) // w


def lead_scores(
    series: np.ndarray,
    family: ClosureFamily,
    thetas: np.ndarray,
    w: int,
    S: int,
    params: qgm.QgParams,
    seed: int,
    windows=None,
    starts=None,
):
    """Energy score at every lead of every selected window, for every theta.

    Returns ``(scores, failed)`` with shapes ``(P, B, w)`` and ``(P, B)``.
    By default window ``j`` starts at snapshot ``j * w``; explicit ``starts``
    override that. Noise streams are keyed on the start index.
    """
    series = np.asarray(series)
    if starts is None:
        nwin = n_windows(len(series), w)
        windows = np.arange(nwin) if windows is None else np.asarray(windows, dtype=int)
        if nwin < 1 or (windows.size and windows.max() >= nwin):
            raise ValueError(f"series of {len(series)} snapshots too short for windows of length {w}")
        starts = windows * w
    starts = np.asarray(starts, dtype=int)
    if starts.size == 0 or starts.max() + w > len(series) - 1:
        raise ValueError("window runs past the end of the series")
    roll = BatchRollout(family, thetas, params, series[starts], S, seed, streams=starts)
    P, B = roll.P, roll.B
    scores = np.empty((P, B, w))
    for m, x in enumerate(roll.run(w)):
        truth = series[starts + m + 1].reshape(B, -1)
        members = np.moveaxis(x.reshape(P, B, S, -1), 2, 0)
        scores[:, :, m] = energy_score_batch(members, truth[None])
    failed = ~np.all(roll.alive, axis=2)
    return scores, failed


def aggregate(scores: np.ndarray, failed: np.ndarray, penalty: float | None, penalty_factor: float):
    """Mean over windows and leads with unstable windows replaced by a penalty."""
    window_loss = scores.mean(axis=-1)
    if np.any(failed):
        if penalty is None:
            stable = window_loss[~failed]
            if stable.size == 0:
                raise qgm.InstabilityDetected("every window went unstable")
            penalty = penalty_factor * float(np.median(stable))
        window_loss = np.where(failed, penalty, window_loss)
    # fixed-order reduction keeps results reproducible
    return np.array([float(np.sum(row)) / row.size for row in window_loss.reshape(window_loss.shape[0], -1)])


def online_loss_population(series, family, thetas, cfg: LossConfig, params, seed, windows=None, penalty=None):
    """Online loss for each row of ``thetas`` on common windows and noise."""
    nsnap = len(series)
    nwin = n_windows(nsnap, cfg.w)
    dropped = nsnap - 1 - nwin * cfg.w
    if dropped:
        log.debug("dropping %d trailing snapshots for w=%d", dropped, cfg.w)
    scores, failed = lead_scores(series, family, thetas, cfg.w, cfg.S, params, seed, windows)
    return aggregate(scores, failed, penalty, cfg.penalty_factor)


def online_loss(series, p: ClosureParams, cfg: LossConfig, params: qgm.QgParams, seed: int, penalty=None) -> float:
    """Windowed online loss of one closure on a series of coarse snapshots.

    The series holds ``N + 1`` snapshots; it is cut into ``N // w`` disjoint
    windows, each rolled out from its observed initial state and scored at
    every lead. The result is normalised by the number of scored pairs.
    """
    if len(series) < cfg.w + 1:
        raise ValueError(f"series of {len(series)} snapshots is shorter than w + 1 = {cfg.w + 1}")
    if p.stochastic and cfg.S < 2:
        log.warning("stochastic closure scored with S=1 uses the Euclidean reduction")
    return float(online_loss_population(series, p.family, p.theta[None], cfg, params, seed, penalty=penalty)[0])
