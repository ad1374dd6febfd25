import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from closurelab import closure as cl
from closurelab import diagnostics as dg
from closurelab import qg
from closurelab import spectral as sp

P = qg.QgParams(nx=16, ny=16, dt=7200.0)


def pv_from_psi(psi):
    g = P.grid
    return g.ifft(qg.pv_from_streamfunction(g.fft(psi), P))


def random_states(n, seed=0, frac=0.9):
    gen = np.random.default_rng(seed)
    return sp.band_limited_noise(P.grid, gen, (n, 2), kmax=frac * P.grid.kmax, rms=1e-6)


def test_single_mode_lands_in_one_bin():
    x, y = P.grid.coords()
    k = 2 * np.pi / P.Lx
    psi = np.stack([np.cos(3 * k * x + 4 * k * y), 0.5 * np.cos(3 * k * x + 4 * k * y)])
    spec = dg.kinetic_energy_spectrum(pv_from_psi(psi), P)
    nz = np.flatnonzero(spec.E > 1e-12 * spec.E.max())
    assert nz.tolist() == [4]
    assert spec.kappa[4] == pytest.approx(5 * k)


def test_total_matches_domain_mean_ke():
    q = random_states(3)
    spec = dg.kinetic_energy_spectrum(q, P)
    g = P.grid
    psi = g.ifft(qg.invert_pv(g.fft(q), P))
    u = -g.ifft(g.iky * g.fft(psi))
    v = g.ifft(g.ikx * g.fft(psi))
    H = np.array([P.H1, P.H2])[:, None, None]
    ke = 0.5 * np.sum(H * (u**2 + v**2), axis=1) / H.sum()
    assert spec.total() == pytest.approx(ke.mean(axis=(-2, -1)).mean(), rel=1e-10)
    assert np.all(spec.E >= 0)
    assert spec.n_snapshots == 3


def test_zero_state_and_empty_input():
    spec = dg.kinetic_energy_spectrum(np.zeros((2, 16, 16)), P)
    assert np.all(spec.E == 0)
    with pytest.raises(ValueError):
        dg.kinetic_energy_spectrum(np.zeros((0, 2, 16, 16)), P)


def test_spectrum_averaging_is_linear():
    a, b = random_states(2, 1), random_states(3, 2)
    sa, sb = dg.kinetic_energy_spectrum(a, P), dg.kinetic_energy_spectrum(b, P)
    both = dg.kinetic_energy_spectrum(np.concatenate([a, b]), P)
    assert np.allclose(both.E, (2 * sa.E + 3 * sb.E) / 5, rtol=1e-12)
    acc = dg.SpectrumAccumulator(P)
    for s in np.concatenate([a, b]):
        acc.add(P.grid.fft(s))
    assert np.allclose(acc.spectrum().E, both.E, rtol=1e-12)


def _spec(E):
    k = np.arange(1, len(E) + 1) * 1.0
    return dg.IsotropicSpectrum(k, np.asarray(E, float), 1.0, 12.0)


def test_spectrum_error_examples():
    base = _spec(np.linspace(5, 1, 12))
    assert dg.spectrum_error(base, base) == 0.0
    assert dg.spectrum_error(_spec(np.e * base.E), base) == pytest.approx(1.0, rel=1e-12)
    assert dg.spectrum_error(_spec(np.e**2 * base.E), base) == pytest.approx(4.0, rel=1e-12)


def test_spectrum_error_errors():
    base = _spec(np.ones(12))
    bad = base.E.copy()
    bad[2] = 0.0
    with pytest.raises(ValueError):
        dg.spectrum_error(_spec(bad), base)
    # zero above the cut-off is ignored
    high = base.E.copy()
    high[-1] = 0.0
    assert dg.spectrum_error(_spec(high), base) == 0.0
    with pytest.raises(ValueError):
        dg.spectrum_error(_spec(np.ones(11)), base)


@given(st.lists(st.floats(0.01, 100), min_size=12, max_size=12), st.lists(st.floats(0.01, 100), min_size=12, max_size=12))
def test_spectrum_error_symmetric_nonnegative(a, b):
    sa, sb = _spec(a), _spec(b)
    d = dg.spectrum_error(sa, sb)
    assert d >= 0
    assert d == pytest.approx(dg.spectrum_error(sb, sa), rel=1e-12, abs=1e-300)


def test_spread_curve():
    assert np.all(dg.spread_curve(np.ones((4, 3, 5))) == 0)
    z = np.random.default_rng(0).standard_normal((10_000, 2, 1))
    assert np.allclose(dg.spread_curve(z), 1.0, atol=0.05)
    with pytest.raises(ValueError):
        dg.spread_curve(np.ones((1, 3, 5)))


def test_score_curve_shapes_and_perfect_model():
    fam = cl.LinearSpectral(4, stochastic_=False)
    p = cl.ClosureParams(fam, np.full(8, 0.2))
    x = random_states(1)[0]
    series = [x]
    for _ in range(2):
        series.extend(cl.rollout_ensemble(series[-1], p, P, 3, 1, seed=0).members[0])
    series = np.stack(series)
    curve = dg.score_curve(series, p, P, horizon=3, S=1, seed=0)
    assert curve.n_windows == 2
    assert np.all(curve.mean_score == 0)
    assert np.array_equal(curve.lead_steps, [1, 2, 3])
    assert np.allclose(curve.lead_hours, [2, 4, 6])
    none = dg.score_curve(series, cl.ClosureParams.none(), P, horizon=3, S=1, seed=0)
    assert np.all(none.mean_score[1:] > 0)
    again = dg.score_curve(series, cl.ClosureParams.none(), P, horizon=3, S=1, seed=0)
    assert np.array_equal(none.mean_score, again.mean_score)
    with pytest.raises(ValueError):
        dg.score_curve(series, p, P, horizon=10, S=1, seed=0)
    with pytest.raises(ValueError):
        dg.score_curve(series, p, P, horizon=4, S=1, seed=0, window=3)


def test_csv_outputs(tmp_path):
    spec = _spec(np.ones(3))
    spec.to_csv(tmp_path / "s.csv", meta={"seed": 1})
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "# seed=1" and lines[1] == "kappa,E" and len(lines) == 5
    curve = dg.ScoreCurve(np.array([1, 2]), np.array([2.0, 4.0]), np.array([0.1, 0.2]), 7)
    curve.to_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "lead_steps,lead_hours,mean_energy_score,n_windows"
    assert lines[1] == "1,2,0.10000000000000001,7"


def test_long_run_baseline_and_unstable_closure():
    x0 = random_states(1, seed=4)[0]
    dur = 40 * P.dt
    base = dg.long_run(cl.ClosureParams.none(), P, dur, seed=0, x0=x0, sample_every=2)
    assert base.survived and base.survival_time == dur
    assert base.spectrum is not None and base.final_state.shape == (2, 16, 16)
    again = dg.long_run(cl.ClosureParams.none(), P, dur, seed=0, x0=x0, sample_every=2)
    assert base.rows() == again.rows()
    fam = cl.LinearSpectral(4, stochastic_=False)
    bad = dg.long_run(cl.ClosureParams(fam, np.full(8, 1e4)), P, dur, seed=0, x0=x0)
    assert not bad.survived and bad.survival_time < dur and bad.spectrum is None
    with pytest.raises(ValueError):
        dg.long_run(cl.ClosureParams.none(), P, 0.0, seed=0)


def test_batched_long_runs_match_individual():
    fam = cl.LinearSpectral(4)
    x0 = random_states(1, seed=5)[0]
    thetas = [np.zeros(16), np.full(16, 0.1)]
    both = dg.long_runs([cl.ClosureParams(fam, t) for t in thetas], P, 20 * P.dt, 3, x0, sample_every=2)
    one = dg.long_runs([cl.ClosureParams(fam, thetas[1])], P, 20 * P.dt, 3, x0, sample_every=2)[0]
    assert np.allclose(both[1].spectrum.E, one.spectrum.E, rtol=1e-10)
