import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from closurelab import theorylab as tl
from closurelab.calibrate import ESConfig

SYS = tl.Ar1System(0.9, 1.0)


def test_system_validation_and_invariant_law():
    with pytest.raises(ValueError):
        tl.Ar1System(1.0, 1.0)
    with pytest.raises(ValueError):
        tl.Ar1System(0.5, 1.0, noise="cauchy")
    assert SYS.invariant_variance == pytest.approx(1 / 0.19)
    assert SYS.invariant_variance == pytest.approx(5.2632, abs=1e-4)
    skew = tl.Ar1System(0.5, 1.0, noise="skewed")
    z = skew.innovations(np.random.default_rng(0), 1_000_000)
    assert abs(z.mean()) < 5e-3 and z.std() == pytest.approx(skew.noise_std, rel=5e-3)
    assert np.mean(z) > np.median(z) + 0.1


def test_conditional_law_examples():
    assert tl.ar1_conditional_law(SYS, 1.0, 1) == pytest.approx((0.9, 1.0))
    mean, var = tl.ar1_conditional_law(SYS, 3.0, 2000)
    assert abs(mean) < 1e-12 and var == pytest.approx(1 / 0.19)
    with pytest.raises(ValueError):
        tl.ar1_conditional_law(SYS, 1.0, 0)


def test_conditional_law_monte_carlo():
    gen = np.random.default_rng(1)
    x = np.full(200_000, 2.0)
    for _ in range(5):
        x = SYS.a * x + gen.standard_normal(x.size)
    mean, var = tl.ar1_conditional_law(SYS, 2.0, 5)
    assert abs(x.mean() - mean) < 3 * np.sqrt(var / x.size)
    assert x.var() == pytest.approx(var, rel=0.02)


def test_model_stability():
    with pytest.raises(tl.ModelUnstable):
        tl.Ar1Model(1.0, 0.5).check()
    assert tl.Ar1Model(0.9, 1.0).invariant_std == pytest.approx(SYS.invariant_std)


def test_mse_objective_examples():
    truth = tl.Ar1Model(0.9, 1.0)
    b, v, t = tl.mse_terms(truth, SYS, np.arange(1, 11))
    assert np.all(b == 0)
    assert tl.window_mse_objective(truth, SYS, 10) == pytest.approx(np.sum(v + t))


@given(st.floats(-0.95, 0.95), st.floats(0.0, 2.0), st.integers(1, 50))
def test_mse_increases_with_noise_gain(t1, t2, w):
    f = lambda s: tl.window_mse_objective(tl.Ar1Model(t1, s), SYS, w)  # noqa: E731
    h = 1e-4
    assert (f(t2 + h) - f(t2)) / h > 0


@pytest.mark.parametrize("w", [1, 10, 200])
def test_mse_minimiser_is_deterministic_truth(w):
    t1 = np.round(np.linspace(-0.99, 0.99, 199), 10)
    t2 = np.linspace(0.0, 3.0, 31)
    best, _ = tl.grid_minimizer(lambda m: tl.window_mse_objective(m, SYS, w), t1, t2)
    assert best.theta1 == pytest.approx(0.9) and best.theta2 == 0.0


@pytest.mark.parametrize("w", [1, 50])
def test_score_minimiser_is_truth(w):
    t1 = np.linspace(0.85, 0.95, 11)
    t2 = np.r_[0.0, np.linspace(0.5, 1.5, 11)]
    f = lambda m: tl.window_score_objective(m, SYS, w, 5_000, 0)  # noqa: E731
    best, vals = tl.grid_minimizer(f, t1, t2)
    assert abs(best.theta1 - 0.9) <= 0.01 + 1e-12 and abs(best.theta2 - 1.0) <= 0.1 + 1e-12
    if w > 1:
        assert vals[:, 0].min() > f(tl.Ar1Model(0.9, 1.0))


def test_decomposition_identity_random_draws():
    gen = np.random.default_rng(3)
    leads = np.array([1, 4, 12])
    for k in range(5):
        sys = tl.Ar1System(gen.uniform(-0.9, 0.9), gen.uniform(0.3, 2.0))
        model = tl.Ar1Model(gen.uniform(-0.9, 0.9), gen.uniform(0, 2))
        b, v, t = tl.mse_terms(model, sys, leads)
        mc, se = tl.mc_mse(model, sys, leads, 100_000, k)
        assert np.all(np.abs(mc - (b + v + t)) <= 3.5 * se)


def test_windowed_and_rollout():
    x0, tg = tl.windowed(np.arange(11.0), 3)
    assert x0.tolist() == [0, 3, 6]
    assert tg.tolist() == [[1, 2, 3], [4, 5, 6], [7, 8, 9]]
    with pytest.raises(ValueError):
        tl.windowed(np.arange(3.0), 3)
    xi = np.ones((2, 1, 3))
    out = tl.rollout(np.array([[0.5, 1.0]]), np.array([2.0]), xi)
    assert out[0, 0, 0].tolist() == [2.0, 2.0, 2.0]


def test_window_loss_matches_scoring_module():
    from closurelab.scoring import energy_score_batch

    gen = np.random.default_rng(0)
    series = SYS.simulate(61, 0)
    x0, tg = tl.windowed(series, 6)
    xi = gen.standard_normal((4,) + tg.shape)
    thetas = np.array([[0.8, 0.7], [1.2, 0.1]])
    loss = tl.window_loss(thetas, x0, tg, xi)
    traj = tl.rollout(thetas[:1], x0, xi)[0]
    ref = energy_score_batch(traj[..., None], tg[..., None]).mean()
    assert loss[0] == pytest.approx(ref, rel=1e-12)
    assert loss[1] == np.inf


def test_short_energy_fit_recovers_noise_gain():
    sys = tl.Ar1System(0.5, 1.0)
    series = sys.simulate(20_000, 0)
    es = ESConfig(150, 16, 0.05, 0.05, 0.99, 0.99)
    model = tl.fit_ar1(series, 5, "energy", 0, es=es)
    assert abs(model.theta1 - 0.5) < 0.1 and abs(model.theta2 - 1.0) < 0.1
    eu = tl.fit_ar1(series, 20, "euclidean", 0, es=es)
    assert eu.theta2 < 0.2
    with pytest.raises(ValueError):
        tl.fit_ar1(series, 5, "crps", 0)


def test_w2_distance():
    gen = np.random.default_rng(0)
    x = gen.standard_normal(100_000) * 2.0
    assert tl.w2_to_normal(x, 2.0) < 0.02
    assert tl.w2_to_normal(np.zeros(1000), 2.0) == pytest.approx(2.0, rel=0.01)


def test_climatological_risk():
    gen = np.random.default_rng(0)
    sym = gen.standard_normal(200_000)
    assert abs(tl.risk_minimizer("squared", sym)) < 0.01
    skewed = gen.exponential(1.0, 200_000)
    c = tl.risk_minimizer("euclidean", skewed)
    assert c == pytest.approx(np.median(skewed), abs=1e-3)
    grid = np.linspace(0, 3, 61)
    assert np.all(tl.climatological_risk("euclidean", c, skewed) <= tl.climatological_risk("euclidean", grid, skewed) + 1e-12)
    with pytest.raises(ValueError):
        tl.climatological_risk("huber", 0.0, sym)


def test_divergence_estimator():
    d, se = tl.divergence_estimator(tl.NormalSampler(0, 1), tl.NormalSampler(0, 1), 50_000, 0)
    assert abs(d) <= 3 * se
    d, se = tl.divergence_estimator(tl.NormalSampler(0, 1), tl.NormalSampler(1, 1), 50_000, 0)
    ref = tl.normal_divergence(0, 1, 1, 1)
    assert ref == pytest.approx(0.27090, abs=1e-5)
    assert abs(d - ref) <= 3 * se and d > 0
    assert tl.normal_divergence(0, 1, 0, 1) == pytest.approx(0.0, abs=1e-15)


def test_propriety_grid_minimum():
    mus = np.linspace(-1, 1, 11)
    sigmas = np.linspace(0.5, 1.5, 11)
    g = tl.propriety_grid(mus, sigmas, 50_000, 0)
    i, j = np.unravel_index(np.argmin(g), g.shape)
    assert abs(mus[i]) <= 0.2 and abs(sigmas[j] - 1) <= 0.1 + 1e-12
