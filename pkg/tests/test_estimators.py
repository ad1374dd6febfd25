import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from closurelab import closure as cl
from closurelab import qg
from closurelab import spectral as sp
from closurelab.estimators import ClosureCalibrator, Coarsener, check_states

P = qg.QgParams(nx=16, ny=16, dt=7200.0)


def test_check_states():
    assert check_states(np.zeros((2, 4, 4))).shape == (1, 2, 4, 4)
    with pytest.raises(ValueError):
        check_states(np.zeros((3, 4, 4)))
    with pytest.raises(ValueError):
        check_states(np.full((1, 2, 4, 4), np.nan))
    with pytest.raises(ValueError):
        check_states(np.zeros((1, 2, 4, 4)), min_len=2)


def test_coarsener_params_and_transform():
    est = Coarsener(n_coarse=16)
    assert est.get_params()["n_coarse"] == 16
    assert clone(est).get_params() == est.get_params()
    X = np.random.default_rng(0).standard_normal((3, 2, 64, 64))
    with pytest.raises(NotFittedError):
        est.transform(X)
    Y = est.fit_transform(X)
    assert Y.shape == (3, 2, 16, 16)
    from closurelab.coarsegrain import coarsen

    assert np.array_equal(Y, coarsen(X, est.spec_))
    with pytest.raises(ValueError):
        est.transform(np.zeros((1, 2, 32, 32)))


def _series():
    fam = cl.LinearSpectral(4, stochastic_=False)
    p = cl.ClosureParams(fam, np.full(8, 0.3))
    x = sp.band_limited_noise(P.grid, np.random.default_rng(0), (2,), kmax=0.9 * P.grid.kmax, rms=1e-6)
    out = [x]
    for _ in range(12):
        out.append(cl.closed_step(out[-1], None, p, P))
    return np.stack(out)


def test_calibrator_fit_predict_score():
    X = _series()
    est = ClosureCalibrator(stochastic=False, n_bands=4, curriculum=((1, 10), (2, 5)), population=4,
                            batch=2, monitor=3, S=1, qg_params=P)
    assert clone(est).get_params()["curriculum"] == ((1, 10), (2, 5))
    with pytest.raises(NotFittedError):
        est.predict(X)
    est.fit(X)
    assert len(est.phase_closures_) == 2 and est.closure_.theta.shape == (8,)
    pred = est.predict(X[:3])
    assert pred.shape == (3, 2, 16, 16) and np.all(np.isfinite(pred))
    s = est.score(X, w=2)
    assert s <= 0 and np.isfinite(s)
    again = clone(est).fit(X)
    assert np.array_equal(again.closure_.theta, est.closure_.theta)


def test_calibrator_rejects_grid_mismatch():
    est = ClosureCalibrator(qg_params=P, curriculum=((1, 1),))
    with pytest.raises(ValueError):
        est.fit(np.zeros((4, 2, 8, 8)))
    with pytest.raises(ValueError):
        ClosureCalibrator(family="cnn", qg_params=P, curriculum=((1, 1),)).fit(_series())
