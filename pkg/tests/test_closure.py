import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from closurelab import qg
from closurelab import rng
from closurelab import closure as cl
from closurelab import spectral as sp

P = qg.QgParams(nx=16, ny=16, dt=7200.0)
FAMILIES = [cl.LinearSpectral(4), cl.LinearSpectral(4, stochastic_=False), cl.LocalStencil()]


def state(seed=0):
    gen = np.random.default_rng(seed)
    return sp.band_limited_noise(P.grid, gen, (2,), kmax=0.8 * P.grid.kmax, rms=1e-6)


def noise(seed=1):
    return np.random.default_rng(seed).standard_normal((2, 16, 16))


def random_params(family, seed):
    theta = np.random.default_rng(seed).standard_normal(family.n_params)
    return cl.ClosureParams(family, theta)


def test_highpass_multiplier():
    hp = cl.highpass_multiplier(P.grid)
    assert hp[0, 0] == 0
    assert np.isclose(hp[0, 1], (P.grid.kx[1] / P.grid.kmax) ** 2)
    axis = np.isclose(P.grid.kappa, P.grid.kmax) & P.grid.retained
    assert np.allclose(hp[axis], 1.0)


def test_params_validation():
    with pytest.raises(ValueError):
        cl.ClosureParams(cl.LinearSpectral(4), np.zeros(3))
    assert cl.LinearSpectral(4, stochastic_=False).noise_channels == 0
    assert cl.ClosureParams.none().theta.size == 0


@pytest.mark.parametrize("family", FAMILIES[:2])
def test_zero_theta_gives_zero(family):
    m = cl.apply_closure(state(), noise(), cl.ClosureParams.zeros(family), P)
    assert np.all(m == 0)


@pytest.mark.parametrize("family", FAMILIES)
@given(seed=st.integers(0, 2**32 - 1))
def test_output_zero_mean_and_highpass(family, seed):
    p = random_params(family, seed)
    m = cl.apply_closure(state(seed % 7), noise(seed % 5), p, P)
    assert np.all(np.abs(m.mean(axis=(-2, -1))) <= 1e-15 * max(np.abs(m).max(), 1e-300))
    mh = P.grid.fft(m)
    assert np.all(np.abs(mh[..., 0, 0]) <= 1e-12 * max(np.abs(mh).max(), 1e-300))


def test_linear_family_output_is_highpassed():
    fam = cl.LinearSpectral(4, stochastic_=False)
    g = P.grid
    prepared = fam.prepare(np.ones(fam.n_params), g)
    qh = np.ones((1, 2) + g.spectral_shape, complex)
    mh = fam.increment_hat(prepared, qh, None, g)[0]
    # unit gains and a flat spectrum return the multiplier itself inside kmax
    inside = g.retained & (g.kappa <= g.kmax)
    hp = cl.highpass_multiplier(g)
    assert np.allclose(mh[:, inside].real / fam.state_scale, hp[inside], rtol=1e-12, atol=0)
    assert mh[0, 0, 0] == 0


def test_deterministic_family_ignores_noise():
    p = random_params(cl.LinearSpectral(4, stochastic_=False), 3)
    a = cl.apply_closure(state(), noise(1), p, P)
    b = cl.apply_closure(state(), noise(2), p, P)
    assert np.array_equal(a, b)


def test_shape_errors():
    p = random_params(cl.LinearSpectral(4), 0)
    with pytest.raises(cl.ShapeMismatchError):
        cl.apply_closure(np.zeros((2, 8, 8)), None, p, P)
    with pytest.raises(cl.ShapeMismatchError):
        cl.apply_closure(state(), None, p, P)


def test_closed_step_with_zero_theta_matches_bare_step():
    x = state()
    out = cl.closed_step(x, noise(), cl.ClosureParams.zeros(cl.LinearSpectral(4)), P)
    s = qg.initial_state(x, P)
    qg.step(s, P)
    assert np.array_equal(out, qg.physical(s, P))


def test_member_noise_independent_and_reproducible():
    a = rng.standard_normal((100_000,), 7, 0, 0, 0)
    b = rng.standard_normal((100_000,), 7, 0, 1, 0)
    c = rng.standard_normal((100_000,), 7, 0, 0, 1)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.01
    assert abs(np.corrcoef(a, c)[0, 1]) < 0.01
    assert np.array_equal(a, rng.standard_normal((100_000,), 7, 0, 0, 0))
    assert abs(a.mean()) < 0.01 and abs(a.std() - 1) < 0.01


def test_stochastic_members_diverge_after_one_step():
    fam = cl.LinearSpectral(4)
    theta = np.zeros(fam.n_params)
    theta[8:] = 1.0
    ens = cl.rollout_ensemble(state(), cl.ClosureParams(fam, theta), P, w=1, S=2, seed=0)
    assert np.sqrt(np.mean((ens.members[0, 0] - ens.members[1, 0]) ** 2)) > 0


def test_deterministic_single_member():
    fam = cl.LinearSpectral(4, stochastic_=False)
    p = random_params(fam, 0)
    ens = cl.rollout_ensemble(state(), p, P, w=3, S=1, seed=0)
    assert ens.members.shape == (1, 3, 2, 16, 16)
    x = state()
    # w = 1 is a one-step prediction from the initial state
    one = cl.rollout_ensemble(x, p, P, w=1, S=1, seed=0)
    assert np.allclose(one.members[0, 0], cl.closed_step(x, None, p, P), rtol=0, atol=1e-20)
    with pytest.raises(ValueError):
        cl.rollout_ensemble(x, p, P, w=0, S=1, seed=0)


def test_rollout_reproducible_and_member_permutation():
    fam = cl.LinearSpectral(4)
    p = random_params(fam, 5)
    a = cl.rollout_ensemble(state(), p, P, w=4, S=3, seed=11)
    b = cl.rollout_ensemble(state(), p, P, w=4, S=3, seed=11)
    assert np.array_equal(a.members, b.members)
    c = cl.rollout_ensemble(state(), p, P, w=4, S=3, seed=11, member_ids=[2, 0, 1])
    assert np.array_equal(c.members, a.members[[2, 0, 1]])


def test_batch_population_matches_single_rollouts():
    fam = cl.LinearSpectral(4)
    thetas = np.random.default_rng(0).standard_normal((3, fam.n_params))
    roll = cl.BatchRollout(fam, thetas, P, state(), 2, seed=4)
    last = list(roll.run(3))[-1]
    for i in range(3):
        single = cl.rollout_ensemble(state(), cl.ClosureParams(fam, thetas[i]), P, 3, 2, seed=4)
        assert np.allclose(last[i, 0], single.members[:, -1], rtol=0, atol=1e-12 * np.abs(last).max())


def test_failed_members_are_flagged():
    fam = cl.LinearSpectral(4, stochastic_=False)
    theta = np.full(fam.n_params, 1e4)
    ens = cl.rollout_ensemble(state(), cl.ClosureParams(fam, theta), P, w=20, S=1, seed=0)
    assert ens.failed.all() and ens.fail_step[0] >= 1


@pytest.mark.parametrize("family", FAMILIES)
def test_param_file_round_trip(family, tmp_path):
    p = random_params(family, 9)
    path = tmp_path / "c.cgcl"
    p.save(path)
    q = cl.ClosureParams.load(path)
    assert np.array_equal(q.theta, p.theta)
    assert q.family.spec() == family.spec()
    assert path.read_bytes()[:4] == cl.PARAM_MAGIC
    with pytest.raises(ValueError):
        cl.ClosureParams.from_bytes(b"XXXX" + path.read_bytes()[4:])
