"""Scalar AR(1) testbeds with closed-form laws.

The truth is ``x[n+1] = a x[n] + sigma e[n]`` and a model is
``x[n+1] = theta1 x[n] + theta2 xi[n]`` with standard normal ``xi``. These
systems decorrelate geometrically, which makes the long-lead behaviour of
pointwise and proper-score training losses checkable against exact values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from . import rng
from .calibrate import ESConfig, es_optimize
from .scoring import energy_score_batch, expected_gaussian_crps

NOISE_KINDS = ("gaussian", "skewed")

# centred two-component Gaussian mixture: weights, means, standard deviations
SKEW_MIXTURE = ((0.8, -0.5, 0.5), (0.2, 2.0, 1.0))


class ModelUnstable(ValueError):
    pass


@dataclass(frozen=True)
class Ar1System:
    a: float = 0.9
    sigma: float = 1.0
    noise: str = "gaussian"

    def __post_init__(self):
        if not abs(self.a) < 1:
            raise ValueError("need |a| < 1")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.noise not in NOISE_KINDS:
            raise ValueError(f"noise must be one of {NOISE_KINDS}")

    @property
    def noise_std(self) -> float:
        """Standard deviation of one innovation ``sigma e``."""
        if self.noise == "gaussian":
            return self.sigma
        m2 = sum(w * (s**2 + mu**2) for w, mu, s in SKEW_MIXTURE)
        return self.sigma * np.sqrt(m2)

    @property
    def invariant_variance(self) -> float:
        return self.noise_std**2 / (1 - self.a**2)

    @property
    def invariant_std(self) -> float:
        return float(np.sqrt(self.invariant_variance))

    def innovations(self, gen: np.random.Generator, shape) -> np.ndarray:
        if self.noise == "gaussian":
            return self.sigma * gen.standard_normal(shape)
        w = np.array([c[0] for c in SKEW_MIXTURE])
        mu = np.array([c[1] for c in SKEW_MIXTURE])
        sd = np.array([c[2] for c in SKEW_MIXTURE])
        comp = (gen.random(shape) >= w[0]).astype(int)
        return self.sigma * (mu[comp] + sd[comp] * gen.standard_normal(shape))

    def stationary_sample(self, gen, shape, burn: int | None = None) -> np.ndarray:
        """Draws from the invariant law (exact for Gaussian noise, burn-in otherwise)."""
        if self.noise == "gaussian":
            return self.invariant_std * gen.standard_normal(shape)
        burn = burn or int(np.ceil(40 / max(-np.log(abs(self.a) + 1e-300), 1e-3)))
        x = np.zeros(shape)
        for _ in range(burn):
            x = self.a * x + self.innovations(gen, shape)
        return x

    def simulate(self, n: int, seed: int, x0: float | None = None) -> np.ndarray:
        """One trajectory of ``n + 1`` states started from the invariant law."""
        gen = rng.generator(seed, stream=0xA1)
        x = np.empty(n + 1)
        x[0] = self.stationary_sample(gen, ()) if x0 is None else x0
        e = self.innovations(gen, n)
        for i in range(n):
            x[i + 1] = self.a * x[i] + e[i]
        return x


@dataclass(frozen=True)
class Ar1Model:
    theta1: float
    theta2: float

    @property
    def stable(self) -> bool:
        return abs(self.theta1) < 1

    def check(self) -> None:
        if not self.stable:
            raise ModelUnstable(f"|theta1| = {abs(self.theta1)} >= 1")

    @property
    def invariant_std(self) -> float:
        self.check()
        return abs(self.theta2) / np.sqrt(1 - self.theta1**2)


def _geom_var(c, s, m):
    """``s^2 (1 - c^(2m)) / (1 - c^2)`` with the ``|c| -> 1`` limit handled."""
    c2 = np.asarray(c, dtype=float) ** 2
    m = np.asarray(m)
    with np.errstate(invalid="ignore", divide="ignore"):
        v = np.where(np.abs(1 - c2) > 1e-12, (1 - c2**m) / (1 - c2), m)
    return np.asarray(s, dtype=float) ** 2 * v


def ar1_conditional_law(sys: Ar1System, x0, m):
    """Mean and variance of ``x[n+m]`` given ``x[n] = x0``."""
    m = np.asarray(m)
    if np.any(m < 1):
        raise ValueError("lead must be at least 1")
    return sys.a**m * np.asarray(x0, dtype=float), _geom_var(sys.a, sys.noise_std, m)


def mse_terms(model: Ar1Model, sys: Ar1System, m):
    """Bias, model variance and target variance of the lead-``m`` MSE,
    averaged over initial states drawn from the invariant law."""
    model.check()
    m = np.asarray(m)
    bias = (model.theta1**m - sys.a**m) ** 2 * sys.invariant_variance
    return bias, _geom_var(model.theta1, model.theta2, m), _geom_var(sys.a, sys.noise_std, m)


def window_mse_objective(model: Ar1Model, sys: Ar1System, w: int) -> float:
    """Exact expected squared error summed over leads ``1..w``."""
    b, v, t = mse_terms(model, sys, np.arange(1, w + 1))
    return float(np.sum(b + v + t))


def window_score_objective(model: Ar1Model, sys: Ar1System, w: int, mc_samples: int, seed: int) -> float:
    """Expected CRPS of the model's Gaussian predictive law summed over leads.

    The expectation over the target is exact given ``x0`` (Gaussian truth),
    so only the initial state is sampled.
    """
    model.check()
    if sys.noise != "gaussian":
        raise ValueError("closed-form target expectation needs Gaussian noise")
    x0 = sys.stationary_sample(rng.generator(seed, stream=0x5C), mc_samples)
    m = np.arange(1, w + 1)[:, None]
    mu_t, var_t = ar1_conditional_law(sys, x0[None], m)
    mu_m = model.theta1**m * x0[None]
    s_m = np.sqrt(_geom_var(model.theta1, model.theta2, m))
    crps = expected_gaussian_crps(mu_m, s_m, mu_t, np.sqrt(var_t))
    return float(np.sum(crps.mean(axis=1)))


def grid_minimizer(f, theta1_grid, theta2_grid):
    """Brute-force minimiser of ``f(Ar1Model)`` over a product grid."""
    vals = np.array([[f(Ar1Model(t1, t2)) for t2 in theta2_grid] for t1 in theta1_grid])
    i, j = np.unravel_index(np.argmin(vals), vals.shape)
    return Ar1Model(float(theta1_grid[i]), float(theta2_grid[j])), vals


# -- trajectory training -------------------------------------------------------


def windowed(series: np.ndarray, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Initial states ``(B,)`` and targets ``(B, w)`` of disjoint windows."""
    B = (len(series) - 1) // w
    if B < 1:
        raise ValueError("series shorter than one window")
    x0 = series[: B * w : w]
    idx = np.arange(B)[:, None] * w + np.arange(1, w + 1)[None]
    return x0, series[idx]


def rollout(thetas: np.ndarray, x0: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """Model trajectories ``(K, S, B, w)`` for parameters ``(K, 2)``.

    ``xi`` has shape ``(S, B, w)`` and is shared by every parameter row.
    """
    t1 = thetas[:, 0][:, None, None]
    t2 = thetas[:, 1][:, None, None]
    S, B, w = xi.shape
    out = np.empty((len(thetas), S, B, w))
    x = np.broadcast_to(x0[None, None], (len(thetas), S, B)).astype(float)
    for m in range(w):
        x = t1 * x + t2 * xi[None, :, :, m]
        out[..., m] = x
    return out


def window_loss(thetas, x0, targets, xi) -> np.ndarray:
    """Mean energy score over windows and leads (Euclidean when ``S = 1``).

    Scores are accumulated lead by lead, so memory stays at ``(K, S, B)``.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    S, B, w = xi.shape
    t1 = thetas[:, 0][:, None, None]
    t2 = thetas[:, 1][:, None, None]
    x = np.broadcast_to(x0[None, None], (len(thetas), S, B)).astype(float)
    total = np.zeros((len(thetas), B))
    with np.errstate(over="ignore", invalid="ignore"):
        for m in range(w):
            x = t1 * x + t2 * xi[None, :, :, m]
            # scalar case of the ensemble estimator, written out for speed
            total += np.abs(x - targets[None, None, :, m]).mean(axis=1)
            for s in range(S):
                for t in range(s + 1, S):
                    total -= np.abs(x[:, s] - x[:, t]) / (S * (S - 1))
    out = total.mean(axis=1) / w
    unstable = np.abs(thetas[:, 0]) >= 1
    return np.where(unstable | ~np.isfinite(out), np.inf, out)


LOSSES = {"euclidean": 1, "energy": 4}


@dataclass
class CollapseRow:
    loss: str
    w: int
    theta1: float
    theta2: float
    spread: float
    w2: float


@dataclass
class CollapseReport:
    system: Ar1System
    rows: list = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["loss,w,theta1,theta2,long_lead_spread,w2_to_invariant"]
        for r in self.rows:
            lines.append(f"{r.loss},{r.w},{r.theta1:.17g},{r.theta2:.17g},{r.spread:.17g},{r.w2:.17g}")
        return "\n".join(lines) + "\n"

    def find(self, loss: str, w: int) -> CollapseRow:
        for r in self.rows:
            if r.loss == loss and r.w == w:
                return r
        raise KeyError((loss, w))


DEFAULT_ES = ESConfig(iterations=300, population=16, sigma=0.05, lr=0.05, sigma_decay=0.99, lr_decay=0.99)


def fit_ar1(
    series: np.ndarray,
    w: int,
    loss: str,
    seed: int,
    theta0=(0.5, 0.5),
    es: ESConfig = DEFAULT_ES,
) -> Ar1Model:
    """Fit ``(theta1, theta2)`` by ES on the windowed trajectory loss.

    Model noise is drawn once and reused (common random numbers), so the
    objective is a deterministic function of the parameters.
    """
    if loss not in LOSSES:
        raise ValueError(f"loss must be one of {sorted(LOSSES)}")
    S = LOSSES[loss]
    x0, targets = windowed(series, w)
    xi = rng.standard_normal((S,) + targets.shape, seed, stream=0xC0, member=w)

    def obj(thetas, it):
        return window_loss(thetas, x0, targets, xi)

    res = es_optimize(obj, np.asarray(theta0, dtype=float), es, rng.child_seed(seed, w, S))
    t1, t2 = res.theta
    # the noise gain enters only through its magnitude
    return Ar1Model(float(t1), float(abs(t2)))


def model_long_run(model: Ar1Model, n: int, seed: int, chains: int = 1000, thin: int = 10) -> np.ndarray:
    """``n`` thinned samples of the model's long-run law from parallel chains."""
    model.check()
    gen = rng.generator(seed, stream=0x1A)
    per = int(np.ceil(n / chains))
    burn = int(np.ceil(40 / max(-np.log(abs(model.theta1) + 1e-300), 1e-3)))
    x = np.zeros(chains)
    out = np.empty((per, chains))
    for _ in range(burn):
        x = model.theta1 * x + model.theta2 * gen.standard_normal(chains)
    for i in range(per):
        for _ in range(thin):
            x = model.theta1 * x + model.theta2 * gen.standard_normal(chains)
        out[i] = x
    return out.ravel()[:n]


def w2_to_normal(samples: np.ndarray, std: float, mean: float = 0.0) -> float:
    """1-D 2-Wasserstein distance from samples to ``N(mean, std^2)`` via the
    quantile coupling at the midpoints ``(i + 1/2) / n``."""
    x = np.sort(np.asarray(samples, dtype=float))
    q = mean + std * stats.norm.ppf((np.arange(x.size) + 0.5) / x.size)
    return float(np.sqrt(np.mean((x - q) ** 2)))


def collapse_experiment(
    sys: Ar1System,
    losses=("euclidean", "energy"),
    w_sweep=(200,),
    seed: int = 0,
    n_steps: int = 400_000,
    n_long: int = 100_000,
    es: ESConfig = DEFAULT_ES,
) -> CollapseReport:
    """Train under each loss and window length, then measure the long-lead
    spread and the long-run distance to the invariant law."""
    if sys.noise != "gaussian":
        raise ValueError("the invariant law is closed-form only for Gaussian noise")
    series = sys.simulate(n_steps, seed)
    report = CollapseReport(sys)
    for loss in losses:
        for w in w_sweep:
            model = fit_ar1(series, w, loss, seed, es=es)
            spread = float(np.sqrt(_geom_var(model.theta1, model.theta2, w)))
            if model.stable:
                w2 = w2_to_normal(model_long_run(model, n_long, rng.child_seed(seed, w)), sys.invariant_std)
            else:
                w2 = float("inf")
            report.rows.append(CollapseRow(loss, w, model.theta1, model.theta2, spread, w2))
    return report


# -- climatological risk -------------------------------------------------------


def invariant_samples(sys: Ar1System, n: int, seed: int, chains: int = 10_000) -> np.ndarray:
    """``n`` states from long parallel simulations after burn-in."""
    gen = rng.generator(seed, stream=0x1B)
    per = int(np.ceil(n / chains))
    x = sys.stationary_sample(gen, chains)
    out = np.empty((per, chains))
    for i in range(per):
        x = sys.a * x + sys.innovations(gen, chains)
        out[i] = x
    return out.ravel()[:n]


def long_lead_targets(sys: Ar1System, n: int, lead: int, seed: int) -> np.ndarray:
    """Targets ``lead`` steps after ``n`` observed initial states."""
    gen = rng.generator(seed, stream=0x1C)
    x = sys.stationary_sample(gen, n)
    for _ in range(lead):
        x = sys.a * x + sys.innovations(gen, n)
    return x


def climatological_risk(loss: str, c, samples: np.ndarray):
    """Monte Carlo ``E[l(c, y)]`` for constant forecasts ``c``."""
    c = np.atleast_1d(np.asarray(c, dtype=float))
    if loss == "squared":
        r = np.array([np.mean((ci - samples) ** 2) for ci in c])
    elif loss == "euclidean":
        r = np.array([np.mean(np.abs(ci - samples)) for ci in c])
    else:
        raise ValueError("loss must be 'squared' or 'euclidean'")
    return r if r.size > 1 else float(r[0])


def risk_minimizer(loss: str, samples: np.ndarray, xtol: float = 1e-6) -> float:
    """Golden-section minimiser of the empirical climatological risk."""
    lo, hi = float(np.min(samples)), float(np.max(samples))
    res = optimize.minimize_scalar(
        lambda c: climatological_risk(loss, c, samples),
        bracket=(lo, hi),
        method="golden",
        options={"xtol": xtol},
    )
    return float(res.x)


@dataclass
class MedianReport:
    c_star: float
    median: float
    mean: float
    invariant_std: float

    @property
    def error(self) -> float:
        """Distance to the median in units of the invariant std."""
        return abs(self.c_star - self.median) / self.invariant_std

    @property
    def mean_gap(self) -> float:
        return abs(self.c_star - self.mean) / self.invariant_std


def median_experiment(sys: Ar1System, seed: int, n: int = 1_000_000, lead: int = 200, n_oracle: int = 10_000_000):
    """Long-lead constant forecast under Euclidean loss versus the invariant median."""
    targets = long_lead_targets(sys, n, lead, rng.child_seed(seed, 1))
    c = risk_minimizer("euclidean", targets)
    oracle = invariant_samples(sys, n_oracle, rng.child_seed(seed, 2))
    return MedianReport(c, float(np.median(oracle)), float(np.mean(oracle)), float(np.std(oracle)))


# -- divergence ----------------------------------------------------------------


@dataclass(frozen=True)
class NormalSampler:
    mean: float = 0.0
    std: float = 1.0

    def __call__(self, gen, shape):
        return self.mean + self.std * gen.standard_normal(shape)


def divergence_estimator(P, Q, mc: int, seed: int, S: int = 4) -> tuple[float, float]:
    """Estimate ``d(P, Q) = E_Q S(P, y) - E_Q S(Q, y)`` and its standard error.

    Each replication draws ``y`` from ``Q`` plus independent ``S``-member
    ensembles from ``P`` and ``Q`` and scores both with the unbiased
    estimator.
    """
    gen_y = rng.generator(seed, stream=0xD0)
    gen_p = rng.generator(seed, stream=0xD1)
    gen_q = rng.generator(seed, stream=0xD2)
    y = Q(gen_y, mc)
    ep = P(gen_p, (S, mc))
    eq = Q(gen_q, (S, mc))
    diff = energy_score_batch(ep[..., None], y[:, None]) - energy_score_batch(eq[..., None], y[:, None])
    return float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(mc))


def normal_divergence(m1, s1, m2, s2) -> float:
    """Closed-form energy-score divergence between 1-D normals."""
    from .scoring import expected_abs_normal

    cross = expected_abs_normal(m1 - m2, np.hypot(s1, s2))
    return float(cross - (s1 + s2) / np.sqrt(np.pi))


def propriety_grid(mu_grid, sigma_grid, n: int, seed: int) -> np.ndarray:
    """Mean CRPS of ``N(mu, sigma^2)`` over ``n`` draws from ``N(0, 1)``."""
    from .scoring import gaussian_crps_oracle

    y = rng.standard_normal(n, seed, stream=0xE0)
    out = np.empty((len(mu_grid), len(sigma_grid)))
    for i, mu in enumerate(mu_grid):
        for j, s in enumerate(sigma_grid):
            out[i, j] = np.mean(gaussian_crps_oracle(mu, s, y))
    return out


# -- decomposition check -------------------------------------------------------


def mc_mse(model: Ar1Model, sys: Ar1System, leads, n: int, seed: int):
    """Monte Carlo lead-``m`` MSE of a single model sample against the truth,
    with independent noise, from invariant initial states. Returns ``(mean, se)``."""
    gen = rng.generator(seed, stream=0xF0)
    leads = np.sort(np.asarray(leads))
    x0 = sys.stationary_sample(gen, n)
    xt, xm = x0.copy(), x0.copy()
    mean, se = np.empty(len(leads)), np.empty(len(leads))
    k = 0
    for m in range(1, int(leads.max()) + 1):
        xt = sys.a * xt + sys.innovations(gen, n)
        xm = model.theta1 * xm + model.theta2 * gen.standard_normal(n)
        if m in leads:
            err = (xm - xt) ** 2
            mean[k], se[k] = err.mean(), err.std(ddof=1) / np.sqrt(n)
            k += 1
    return mean, se
