"""Derivative-free calibration of closure parameters.

Antithetic evolution strategies with centred-rank utilities, run phase by
phase over a curriculum of window lengths. Objectives are batched: they take
an array of parameter vectors ``(K, d)`` and the iteration index, and return
``K`` losses. Row 0 of every batch is the current search mean.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import qg as qgm
from . import rng
from .closure import ClosureFamily, ClosureParams
from .scoring import LossConfig, n_windows, online_loss_population

log = logging.getLogger(__name__)

DEFAULT_CURRICULUM = ((1, 40), (4, 40), (12, 30), (36, 20), (108, 12), (288, 8))

Objective = Callable[[np.ndarray, int], np.ndarray]


class TrainingFailed(qgm.InstabilityDetected):
    """Every candidate of an objective evaluation went unstable."""


@dataclass(frozen=True)
class ESConfig:
    """Search settings for one optimisation run.

    ``sigma`` is the perturbation scale and ``lr`` the step length, both in
    parameter units; each is multiplied by its decay factor after every
    iteration.
    """

    iterations: int = 100
    population: int = 16
    sigma: float = 0.1
    lr: float = 0.1
    sigma_decay: float = 1.0
    lr_decay: float = 1.0
    monitor_every: int = 1

    def __post_init__(self):
        if self.population < 2 or self.population % 2:
            raise ValueError("population must be even and at least 2")
        if self.iterations < 0 or self.sigma <= 0 or self.lr < 0:
            raise ValueError("need iterations >= 0, sigma > 0 and lr >= 0")


@dataclass(frozen=True)
class TrainConfig:
    """Curriculum training settings.

    ``curriculum`` lists ``(window length, iterations)`` per phase; windows
    must be nondecreasing. ``batch`` windows are drawn per iteration and
    ``monitor`` fixed windows select the best iterate of each phase.
    """

    curriculum: tuple = DEFAULT_CURRICULUM
    population: int = 16
    sigma: float = 0.1
    lr: float = 0.1
    sigma_decay: float = 0.97
    lr_decay: float = 0.97
    batch: int = 4
    monitor: int = 8
    monitor_every: int = 2
    S: int = 4
    penalty_factor: float = 1e3

    def __post_init__(self):
        cur = tuple((int(w), int(n)) for w, n in self.curriculum)
        object.__setattr__(self, "curriculum", cur)
        if not cur:
            raise ValueError("curriculum must not be empty")
        ws = [w for w, _ in cur]
        if any(b < a for a, b in zip(ws, ws[1:])) or ws[0] < 1:
            raise ValueError("curriculum windows must be positive and nondecreasing")
        if self.population < 2 or self.population % 2:
            raise ValueError("population must be even and at least 2")
        if self.batch < 1 or self.monitor < 1 or self.S < 1:
            raise ValueError("batch, monitor and S must be positive")

    def es(self, iterations: int) -> ESConfig:
        return ESConfig(
            iterations=iterations,
            population=self.population,
            sigma=self.sigma,
            lr=self.lr,
            sigma_decay=self.sigma_decay,
            lr_decay=self.lr_decay,
            monitor_every=self.monitor_every,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["curriculum"] = [list(c) for c in self.curriculum]
        return d


def theta_hash(theta: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(theta, dtype="<f8").tobytes()).hexdigest()[:16]


@dataclass
class TrainRecord:
    """One row per iteration; wall-clock times are kept apart from the rows
    so that records from identical runs compare equal."""

    rows: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)

    COLUMNS = ("iteration", "phase", "w", "loss", "monitor_loss", "best_loss", "n_unstable", "sigma", "lr", "theta_hash")

    def append(self, **row) -> None:
        if self.rows and row["iteration"] <= self.rows[-1]["iteration"]:
            raise ValueError("iteration index must increase")
        self.rows.append(row)

    def extend(self, other: TrainRecord, phase: int, w: int) -> None:
        start = self.rows[-1]["iteration"] + 1 if self.rows else 0
        for r in other.rows:
            self.append(**{**r, "iteration": start + r["iteration"], "phase": phase, "w": w})
        self.wall_time.extend(other.wall_time)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(self.COLUMNS)
        for r in self.rows:
            wr.writerow([_fmt(r.get(c, "")) for c in self.COLUMNS])
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())

    def phase_final_loss(self) -> dict:
        out: dict = {}
        for r in self.rows:
            out[r["phase"]] = r["best_loss"]
        return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def centred_ranks(x: np.ndarray) -> np.ndarray:
    """Utilities in [-0.5, 0.5]; the smallest loss gets the largest utility.

    Ties are broken by position so the result is deterministic.
    """
    n = x.size
    if n == 1:
        return np.zeros(1)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(n)
    ranks[order] = np.arange(n)
    return 0.5 - ranks / (n - 1)


@dataclass
class ESResult:
    params: ClosureParams | None
    theta: np.ndarray
    best_loss: float
    record: TrainRecord


def es_optimize(
    objective: Objective,
    theta0,
    cfg: ESConfig,
    seed: int,
    monitor: Callable[[np.ndarray], float] | None = None,
    family: ClosureFamily | None = None,
) -> ESResult:
    """Antithetic ES minimisation of a batched objective.

    Each iteration evaluates the mean and ``population`` mirrored
    perturbations in one call, then moves the mean along the rank-weighted
    perturbation average. The best mean seen (by ``monitor`` when given,
    otherwise by its row-0 loss) is returned, so with ``lr = 0`` the result
    is ``theta0``.
    """
    theta = np.array(theta0, dtype=float).ravel()
    d = theta.size
    half = cfg.population // 2
    gen = rng.generator(seed, stream=0x45_53)
    record = TrainRecord()

    def score_mean(th, it, row0):
        if monitor is None or it % cfg.monitor_every:
            return row0 if monitor is None else None
        return float(monitor(th))

    first = np.asarray(objective(theta[None], 0), dtype=float)
    if first.shape != (1,) or not np.isfinite(first[0]):
        raise ValueError("objective is not finite at the initial parameters")
    best_theta = theta.copy()
    best = score_mean(theta, 0, float(first[0]))
    sigma, lr = cfg.sigma, cfg.lr
    for it in range(cfg.iterations):
        eps = gen.standard_normal((half, d))
        eps = np.concatenate([eps, -eps])
        batch = np.concatenate([theta[None], theta + sigma * eps])
        losses = np.asarray(objective(batch, it), dtype=float)
        if losses.shape != (batch.shape[0],):
            raise ValueError("objective must return one loss per parameter row")
        if not np.any(np.isfinite(losses)):
            raise TrainingFailed(f"every candidate unstable at iteration {it}")
        losses = np.where(np.isfinite(losses), losses, np.inf)
        m = score_mean(theta, it, float(losses[0]))
        if m is not None and (best is None or m < best):
            best, best_theta = m, theta.copy()
        util = centred_ranks(losses[1:])
        theta = theta + lr * (util @ eps) / half
        record.append(
            iteration=it,
            phase=0,
            w=0,
            loss=float(losses[0]),
            monitor_loss="" if m is None else m,
            best_loss=best if best is not None else float(losses[0]),
            n_unstable=int(np.sum(~np.isfinite(losses))),
            sigma=sigma,
            lr=lr,
            theta_hash=theta_hash(theta),
        )
        sigma *= cfg.sigma_decay
        lr *= cfg.lr_decay
    # the final mean has not been scored yet
    final = float(monitor(theta)) if monitor is not None else float(np.asarray(objective(theta[None], cfg.iterations))[0])
    if best is None or final < best:
        best, best_theta = final, theta.copy()
    params = ClosureParams(family, best_theta) if family is not None else None
    return ESResult(params, best_theta, float(best), record)


def vectorize(f: Callable[[np.ndarray], float]) -> Objective:
    """Lift a single-vector loss to the batched objective interface."""

    def obj(thetas, it):
        return np.array([f(t) for t in np.atleast_2d(thetas)])

    return obj


@dataclass
class TrainResult:
    params: ClosureParams
    phases: list
    phase_loss: list
    record: TrainRecord


def _window_objective(series, family, loss_cfg, params, seed, batch, phase):
    nwin = n_windows(len(series), loss_cfg.w)
    nb = min(batch, nwin)

    def obj(thetas, it):
        gen = rng.generator(seed, stream=0x4D42, member=phase, step=it)
        windows = np.sort(gen.choice(nwin, size=nb, replace=False))
        noise_seed = rng.child_seed(seed, phase, it)
        try:
            return online_loss_population(series, family, thetas, loss_cfg, params, noise_seed, windows=windows)
        except qgm.InstabilityDetected:
            return np.full(len(thetas), np.inf)

    return obj, nwin


def _monitor(series, family, loss_cfg, params, seed, n, phase, nwin):
    gen = rng.generator(seed, stream=0x4D4F, member=phase)
    windows = np.sort(gen.choice(nwin, size=min(n, nwin), replace=False))
    noise_seed = rng.child_seed(seed, phase, 0x4D4F)

    def mon(theta):
        try:
            return float(online_loss_population(series, family, theta[None], loss_cfg, params, noise_seed, windows=windows)[0])
        except qgm.InstabilityDetected:
            return np.inf

    return mon


def train_closure(
    series,
    family: ClosureFamily,
    cfg: TrainConfig,
    params: qgm.QgParams,
    seed: int,
    theta0=None,
    checkpoint_dir=None,
    start_phase: int = 0,
) -> TrainResult:
    """Curriculum training, warm-starting each phase from the previous one.

    With ``checkpoint_dir`` set, phase ``k`` writes ``phase{k}.cgcl`` and the
    cumulative ``record.csv``; ``start_phase`` resumes after existing phases.
    """
    series = np.asarray(series, dtype=float)
    wmax = max(w for w, _ in cfg.curriculum)
    if len(series) < wmax + 1:
        raise ValueError(f"series of {len(series)} snapshots too short for window {wmax}")
    theta = family.zeros() if theta0 is None else np.asarray(theta0, dtype=float)
    record = TrainRecord()
    phases: list = []
    losses: list = []
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)
    for k, (w, iters) in enumerate(cfg.curriculum):
        if k < start_phase and ckpt is not None and (ckpt / f"phase{k}.cgcl").exists():
            p = ClosureParams.load(ckpt / f"phase{k}.cgcl")
            theta = p.theta
            phases.append(p)
            losses.append(float("nan"))
            continue
        loss_cfg = LossConfig(w=w, S=cfg.S, penalty_factor=cfg.penalty_factor)
        phase_seed = rng.child_seed(seed, k)
        obj, nwin = _window_objective(series, family, loss_cfg, params, phase_seed, cfg.batch, k)
        mon = _monitor(series, family, loss_cfg, params, phase_seed, cfg.monitor, k, nwin)
        res = es_optimize(obj, theta, cfg.es(iters), phase_seed, monitor=mon, family=family)
        if not np.isfinite(res.best_loss):
            raise TrainingFailed(f"phase {k} (w={w}) produced no stable iterate")
        theta = res.theta
        record.extend(res.record, k, w)
        phases.append(res.params)
        losses.append(res.best_loss)
        log.info("phase %d w=%d loss %.6g", k, w, res.best_loss)
        if ckpt is not None:
            res.params.save(ckpt / f"phase{k}.cgcl")
            record.save(ckpt / "record.csv")
    return TrainResult(phases[-1], phases, losses, record)
