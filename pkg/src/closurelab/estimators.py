"""scikit-learn style wrappers: a coarse-graining transformer and a closure
calibrator, plus the input checks they share."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from . import qg as qgm
from .calibrate import DEFAULT_CURRICULUM, TrainConfig, train_closure
from .closure import BatchRollout, ClosureParams, LinearSpectral, LocalStencil, NoClosure
from .coarsegrain import CoarsenSpec, coarsen
from .scoring import LossConfig, online_loss
from .spectral import Grid, GridMismatchError


def check_states(X, grid: Grid | None = None, min_len: int = 1) -> np.ndarray:
    """Validate a stack of layered PV states ``(T, 2, ny, nx)``.

    A single state ``(2, ny, nx)`` is promoted to a stack of one.
    """
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64, ensure_min_samples=0)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != 2:
        raise ValueError(f"expected states of shape (T, 2, ny, nx), got {X.shape}")
    if grid is not None and X.shape[-2:] != grid.shape:
        raise GridMismatchError(f"states on {X.shape[-2:]} do not match grid {grid.shape}")
    if len(X) < min_len:
        raise ValueError(f"need at least {min_len} states, got {len(X)}")
    return X


def check_fitted(est, attr: str) -> None:
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")


class Coarsener(TransformerMixin, BaseEstimator):
    """Project fine PV states onto an ``n x n`` coarse grid.

    ``fit`` reads the fine grid size from the data; ``transform`` applies the
    spectral truncation and one pass of the coarse dissipation filter.
    """

    def __init__(self, n_coarse: int = 32, Lx: float = 1.0e6, Ly: float = 1.0e6, ssd_cutoff: float = 0.65, ssd_alpha: float = 23.6):
        self.n_coarse = n_coarse
        self.Lx = Lx
        self.Ly = Ly
        self.ssd_cutoff = ssd_cutoff
        self.ssd_alpha = ssd_alpha

    def fit(self, X, y=None):
        X = check_states(X)
        ny, nx = X.shape[-2:]
        fine = Grid(nx, ny, self.Lx, self.Ly)
        coarse = Grid(self.n_coarse, self.n_coarse, self.Lx, self.Ly)
        self.spec_ = CoarsenSpec(fine, coarse, self.ssd_cutoff, self.ssd_alpha)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        check_fitted(self, "spec_")
        X = check_states(X, self.spec_.fine)
        return coarsen(X, self.spec_)


def _family(name: str, stochastic: bool, n_bands: int):
    if name == "linear_spectral":
        return LinearSpectral(n_bands=n_bands, stochastic_=stochastic)
    if name == "local_stencil":
        return LocalStencil(stochastic_=stochastic)
    if name == "none":
        return NoClosure()
    raise ValueError(f"unknown closure family {name!r}")


class ClosureCalibrator(BaseEstimator):
    """Fit a closure to a coarse snapshot series by curriculum ES training.

    ``S = 1`` trains a deterministic closure against the Euclidean loss;
    ``S >= 2`` trains against the ensemble energy score.

    Attributes
    ----------
    closure_ : ClosureParams
        Parameters after the last phase.
    phase_closures_ : list of ClosureParams
        Parameters after each curriculum phase.
    record_ : TrainRecord
        Per-iteration training log.
    """

    def __init__(
        self,
        family: str = "linear_spectral",
        stochastic: bool = True,
        n_bands: int = 8,
        curriculum=DEFAULT_CURRICULUM,
        population: int = 16,
        sigma: float = 0.1,
        lr: float = 0.1,
        decay: float = 0.97,
        batch: int = 4,
        monitor: int = 8,
        S: int = 4,
        seed: int = 0,
        qg_params: qgm.QgParams | None = None,
    ):
        self.family = family
        self.stochastic = stochastic
        self.n_bands = n_bands
        self.curriculum = curriculum
        self.population = population
        self.sigma = sigma
        self.lr = lr
        self.decay = decay
        self.batch = batch
        self.monitor = monitor
        self.S = S
        self.seed = seed
        self.qg_params = qg_params

    def _params(self, X) -> qgm.QgParams:
        base = self.qg_params if self.qg_params is not None else qgm.QgParams(nx=32, ny=32, dt=7200.0)
        if X.shape[-2:] != base.grid.shape:
            raise GridMismatchError(f"series on {X.shape[-2:]} does not match model grid {base.grid.shape}")
        return base

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            curriculum=tuple(self.curriculum),
            population=self.population,
            sigma=self.sigma,
            lr=self.lr,
            sigma_decay=self.decay,
            lr_decay=self.decay,
            batch=self.batch,
            monitor=self.monitor,
            S=self.S,
        )

    def fit(self, X, y=None):
        X = check_states(X, min_len=2)
        params = self._params(X)
        fam = _family(self.family, self.stochastic, self.n_bands)
        res = train_closure(X, fam, self.train_config(), params, self.seed)
        self.closure_ = res.params
        self.phase_closures_ = res.phases
        self.phase_loss_ = res.phase_loss
        self.record_ = res.record
        self.qg_ = params
        return self

    def predict(self, X, n_members: int = 1):
        """One closed-model step from every state; the ensemble mean when
        ``n_members > 1``."""
        check_fitted(self, "closure_")
        X = check_states(X, self.qg_.grid)
        roll = BatchRollout(self.closure_.family, self.closure_.theta[None], self.qg_, X, n_members, self.seed)
        return roll.step()[0].mean(axis=1)

    def score(self, X, y=None, w: int | None = None):
        """Negative online loss on a held-out series (larger is better)."""
        check_fitted(self, "closure_")
        X = check_states(X, self.qg_.grid, min_len=2)
        w = w if w is not None else max(c[0] for c in self.curriculum)
        w = min(w, len(X) - 1)
        return -online_loss(X, self.closure_, LossConfig(w=w, S=self.S), self.qg_, self.seed)


__all__ = ["Coarsener", "ClosureCalibrator", "check_states", "check_fitted", "ClosureParams"]
