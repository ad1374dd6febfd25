"""Generative closures ``m = G_theta(x, xi)`` for the coarse QG model.

A closure family maps a state and a standard Gaussian noise field to a PV
increment that is added after each coarse step. Every family output has its
zero mode removed and is passed through the high-pass multiplier
``(kx^2 + ky^2) / kmax^2``.

Families are vectorised over a population of parameter vectors so that an
optimiser can evaluate many candidates in one batched rollout.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import qg as qgm
from . import rng
from .spectral import Grid

PARAM_MAGIC = b"CGCL"
PARAM_VERSION = 1


class ShapeMismatchError(ValueError):
    pass


def highpass_multiplier(grid: Grid) -> np.ndarray:
    """High-pass filter proportional to ``kx^2 + ky^2``, equal to 1 at kmax."""
    hp = grid.ksq / grid.kmax**2 * grid.retained
    hp[0, 0] = 0.0
    return hp


class ClosureFamily:
    """Base class. Subclasses define ``n_params``, ``noise_channels`` and
    ``increment_hat``."""

    name = "base"
    noise_channels = 0

    @property
    def n_params(self) -> int:
        raise NotImplementedError

    @property
    def stochastic(self) -> bool:
        return self.noise_channels > 0

    def prepare(self, thetas: np.ndarray, grid: Grid):
        """Precompute whatever depends only on parameters; batched over thetas."""
        raise NotImplementedError

    def increment_hat(self, prepared, qh: np.ndarray, xih: np.ndarray | None, grid: Grid) -> np.ndarray:
        """Spectral increment for ``qh`` of shape ``(P, ..., 2, ny, nk)``."""
        raise NotImplementedError

    def spec(self) -> dict:
        raise NotImplementedError

    def zeros(self) -> np.ndarray:
        return np.zeros(self.n_params)


def _hat_basis(r: np.ndarray, n: int) -> np.ndarray:
    """Piecewise-linear hat functions on ``n`` equally spaced nodes over [0, 1]."""
    nodes = np.linspace(0.0, 1.0, n)
    h = nodes[1] - nodes[0]
    return np.clip(1.0 - np.abs(r[None] - nodes[:, None, None]) / h, 0.0, None)


@dataclass(frozen=True)
class LinearSpectral(ClosureFamily):
    """Layer-wise radial spectral gain on the state plus a radial noise gain.

    ``theta`` is laid out as ``[state gains (2, n_bands)]`` followed, for the
    stochastic variant, by ``[noise gains (2, n_bands)]``. Gains are
    piecewise-linear in ``kappa / kmax``. State gains are multiplied by
    ``state_scale`` (per step) and noise gains by ``noise_scale`` (PV units,
    per layer) so that parameters are of order one.
    """

    n_bands: int = 8
    stochastic_: bool = True
    state_scale: float = 1e-2
    noise_scale: tuple = (1e-7, 1e-8)

    name = "linear_spectral"

    @property
    def noise_channels(self) -> int:
        return 2 if self.stochastic_ else 0

    @property
    def n_params(self) -> int:
        return 2 * self.n_bands * (2 if self.stochastic_ else 1)

    def prepare(self, thetas, grid):
        thetas = np.atleast_2d(thetas)
        basis = _cached_basis(grid, self.n_bands)
        hp = highpass_multiplier(grid)
        nb = self.n_bands
        state = thetas[:, : 2 * nb].reshape(-1, 2, nb)
        G = np.einsum("plb,bjk->pljk", state, basis) * (self.state_scale * hp)
        N = None
        if self.stochastic_:
            noise = thetas[:, 2 * nb :].reshape(-1, 2, nb)
            scale = np.asarray(self.noise_scale, dtype=float)[None, :, None, None]
            N = np.einsum("plb,bjk->pljk", noise, basis) * scale * hp
        return G, N

    def increment_hat(self, prepared, qh, xih, grid):
        G, N = prepared
        lead = (1,) * (qh.ndim - 4)
        out = G.reshape(G.shape[:1] + lead + G.shape[1:]) * qh
        if N is not None:
            out = out + N.reshape(N.shape[:1] + lead + N.shape[1:]) * xih
        return out

    def spec(self):
        return {
            "family": self.name,
            "n_bands": self.n_bands,
            "stochastic": self.stochastic_,
            "state_scale": self.state_scale,
            "noise_scale": list(self.noise_scale),
        }


_BASES: dict = {}


def _cached_basis(grid: Grid, n: int) -> np.ndarray:
    key = (grid.nx, grid.ny, grid.Lx, grid.Ly, n)
    if key not in _BASES:
        _BASES[key] = _hat_basis(grid.kappa / grid.kmax, n)
    return _BASES[key]


@dataclass(frozen=True)
class LocalStencil(ClosureFamily):
    """Translation-equivariant convolutional closure.

    A shared ``width x width`` periodic convolution maps the normalised input
    channels ``(q1, q2[, xi1, xi2])`` to ``hidden`` channels, followed by
    ``tanh`` and a pointwise linear map to two output channels. Convolutions
    are evaluated spectrally.
    """

    hidden: int = 4
    width: int = 5
    stochastic_: bool = True
    input_scale: tuple = (1e-5, 1e-6)
    output_scale: tuple = (1e-7, 1e-8)

    name = "local_stencil"

    @property
    def noise_channels(self) -> int:
        return 2 if self.stochastic_ else 0

    @property
    def n_in(self) -> int:
        return 2 + self.noise_channels

    @property
    def n_params(self) -> int:
        c, h, w = self.n_in, self.hidden, self.width
        return h * c * w * w + h + 2 * h + 2

    def unpack(self, thetas):
        thetas = np.atleast_2d(thetas)
        c, h, w = self.n_in, self.hidden, self.width
        i = 0
        k1 = thetas[:, i : i + h * c * w * w].reshape(-1, h, c, w, w)
        i += h * c * w * w
        b1 = thetas[:, i : i + h]
        i += h
        k2 = thetas[:, i : i + 2 * h].reshape(-1, 2, h)
        i += 2 * h
        b2 = thetas[:, i : i + 2]
        return k1, b1, k2, b2

    def prepare(self, thetas, grid):
        k1, b1, k2, b2 = self.unpack(thetas)
        w = self.width
        P, h, c = k1.shape[:3]
        kern = np.zeros((P, h, c) + grid.shape)
        offs = np.arange(w) - w // 2
        # kernel tap (dy, dx) lands at index (-dy, -dx) so that the spectral
        # product is the correlation sum_k f(x + d) K(d)
        for a, dy in enumerate(offs):
            for b, dx in enumerate(offs):
                kern[:, :, :, (-dy) % grid.ny, (-dx) % grid.nx] = k1[:, :, :, a, b]
        K1 = np.fft.rfft2(kern)
        return K1, b1, k2, b2

    def increment_hat(self, prepared, qh, xih, grid):
        K1, b1, k2, b2 = prepared
        P = qh.shape[0]
        sin = np.asarray(self.input_scale, dtype=float)[:, None, None]
        chans = [qh / sin]
        if self.stochastic_:
            chans.append(np.broadcast_to(xih, qh.shape))
        xin = np.concatenate(chans, axis=-3).reshape((P, -1, self.n_in) + grid.spectral_shape)
        hid = grid.ifft(np.einsum("phcjk,pmcjk->pmhjk", K1, xin))
        hid = np.tanh(hid + b1[:, None, :, None, None])
        out = np.einsum("poh,pmhyx->pmoyx", k2, hid) + b2[:, None, :, None, None]
        out = out * np.asarray(self.output_scale, dtype=float)[:, None, None]
        out = grid.fft(out) * highpass_multiplier(grid)
        return out.reshape(qh.shape)

    def spec(self):
        return {
            "family": self.name,
            "hidden": self.hidden,
            "width": self.width,
            "stochastic": self.stochastic_,
            "input_scale": list(self.input_scale),
            "output_scale": list(self.output_scale),
        }


def family_from_spec(spec: dict) -> ClosureFamily:
    spec = dict(spec)
    name = spec.pop("family")
    if name == LinearSpectral.name:
        return LinearSpectral(
            n_bands=spec["n_bands"],
            stochastic_=spec["stochastic"],
            state_scale=spec["state_scale"],
            noise_scale=tuple(spec["noise_scale"]),
        )
    if name == LocalStencil.name:
        return LocalStencil(
            hidden=spec["hidden"],
            width=spec["width"],
            stochastic_=spec["stochastic"],
            input_scale=tuple(spec["input_scale"]),
            output_scale=tuple(spec["output_scale"]),
        )
    raise ValueError(f"unknown closure family {name!r}")


@dataclass(frozen=True)
class NoClosure(ClosureFamily):
    """The unparameterised coarse model, ``m = 0``."""

    name = "none"

    @property
    def n_params(self) -> int:
        return 0

    def prepare(self, thetas, grid):
        return None

    def increment_hat(self, prepared, qh, xih, grid):
        return None

    def spec(self):
        return {"family": self.name}


@dataclass
class ClosureParams:
    family: ClosureFamily
    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).ravel()
        if self.theta.size != self.family.n_params:
            raise ShapeMismatchError(
                f"{self.family.name} expects {self.family.n_params} parameters, got {self.theta.size}"
            )

    @property
    def noise_channels(self) -> int:
        return self.family.noise_channels

    @property
    def stochastic(self) -> bool:
        return self.family.stochastic

    @classmethod
    def zeros(cls, family: ClosureFamily) -> ClosureParams:
        return cls(family, family.zeros())

    @classmethod
    def none(cls) -> ClosureParams:
        return cls(NoClosure(), np.zeros(0))

    def to_bytes(self) -> bytes:
        header = json.dumps(self.family.spec(), sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(PARAM_MAGIC)
        buf.write(struct.pack("<II", PARAM_VERSION, len(header)))
        buf.write(header)
        buf.write(struct.pack("<Q", self.theta.size))
        buf.write(self.theta.astype("<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> ClosureParams:
        if blob[:4] != PARAM_MAGIC:
            raise ValueError("not a closure parameter file")
        version, hlen = struct.unpack("<II", blob[4:12])
        if version != PARAM_VERSION:
            raise ValueError(f"unsupported closure file version {version}")
        spec = json.loads(blob[12 : 12 + hlen].decode())
        family = NoClosure() if spec["family"] == "none" else family_from_spec(spec)
        off = 12 + hlen
        (n,) = struct.unpack("<Q", blob[off : off + 8])
        theta = np.frombuffer(blob[off + 8 : off + 8 + 8 * n], dtype="<f8").astype(float)
        return cls(family, theta)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> ClosureParams:
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def apply_closure(x: np.ndarray, xi: np.ndarray | None, p: ClosureParams, params: qgm.QgParams) -> np.ndarray:
    """Model-error increment for a single physical state of shape ``(2, ny, nx)``."""
    grid = params.grid
    x = np.asarray(x, dtype=float)
    if x.shape != (2,) + grid.shape:
        raise ShapeMismatchError(f"state shape {x.shape} does not match coarse grid {grid.shape}")
    if isinstance(p.family, NoClosure):
        return np.zeros_like(x)
    xih = None
    if p.stochastic:
        if xi is None or np.shape(xi) != x.shape:
            raise ShapeMismatchError("stochastic closure needs noise shaped like the state")
        xih = grid.fft(np.asarray(xi, dtype=float))
    prepared = p.family.prepare(p.theta[None], grid)
    mh = p.family.increment_hat(prepared, grid.fft(x)[None], None if xih is None else xih[None], grid)
    mh = mh[0]
    mh[..., 0, 0] = 0.0
    return grid.ifft(mh)


def closed_step(x: np.ndarray, xi: np.ndarray | None, p: ClosureParams, params: qgm.QgParams) -> np.ndarray:
    """One coarse step from a bare state (forward Euler start) plus the closure increment."""
    m = apply_closure(x, xi, p, params)
    state = qgm.initial_state(x, params)
    qgm.step(state, params)
    out = qgm.physical(state, params) + m
    if not np.all(np.isfinite(out)):
        raise qgm.InstabilityDetected("non-finite state after closed step", step=1)
    return out


class BatchRollout:
    """Closed-model rollouts for a population of parameter vectors.

    State layout is ``(P, B, S, 2, ny, nx)``: population member, initial
    condition, ensemble member. Noise for initial condition ``b`` and member
    ``s`` at step ``n`` comes from ``rng`` keyed on ``(seed, streams[b], s, n)``
    and is shared across the population (common random numbers).
    """

    def __init__(
        self,
        family: ClosureFamily,
        thetas: np.ndarray,
        params: qgm.QgParams,
        x0: np.ndarray,
        n_members: int,
        seed: int,
        streams=None,
        member_ids=None,
    ):
        self.family = family
        self.params = params
        self.grid = grid = params.grid
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        if thetas.shape[1] != family.n_params:
            raise ShapeMismatchError(f"{family.name} expects {family.n_params} parameters")
        self.P = thetas.shape[0]
        x0 = np.asarray(x0, dtype=float)
        if x0.ndim == 3:
            x0 = x0[None]
        self.B = x0.shape[0]
        self.S = n_members
        self.seed = seed
        self.streams = np.arange(self.B) if streams is None else np.asarray(streams)
        self.member_ids = np.arange(self.S) if member_ids is None else np.asarray(member_ids)
        q0 = np.broadcast_to(x0[None, :, None], (self.P, self.B, self.S) + x0.shape[1:]).copy()
        self.state = qgm.initial_state(q0, params)
        self.prepared = family.prepare(thetas, grid)
        self.alive = np.ones((self.P, self.B, self.S), dtype=bool)
        self.fail_step = np.full((self.P, self.B, self.S), -1)
        self.n = 0

    def noise_hat(self) -> np.ndarray | None:
        if not self.family.stochastic:
            return None
        shape = (2,) + self.grid.shape
        xi = np.empty((self.B, self.S) + shape)
        for b, stream in enumerate(self.streams):
            for s, member in enumerate(self.member_ids):
                xi[b, s] = rng.standard_normal(shape, self.seed, int(stream), int(member), self.n)
        return self.grid.fft(xi)[None]

    def step(self) -> np.ndarray:
        """Advance every trajectory by one coarse step; returns physical states."""
        inc = None
        if not isinstance(self.family, NoClosure):
            xih = self.noise_hat()
            inc = self.family.increment_hat(self.prepared, self.state.qh, xih, self.grid)
            inc[..., 0, 0] = 0.0
            inc = inc * self.alive[..., None, None, None]
        bad = qgm.advance(self.state, self.params, increment=inc)
        newly = bad & self.alive
        self.fail_step[newly] = self.n + 1
        self.alive &= ~bad
        self.n += 1
        return self.grid.ifft(self.state.qh)

    def run(self, nsteps: int):
        for _ in range(nsteps):
            yield self.step()


@dataclass
class EnsembleForecast:
    """``members`` has shape ``(S, w, ...)``; lead ``m`` is index ``m - 1``."""

    members: np.ndarray
    initial: np.ndarray
    seed: int
    stream: int = 0
    failed: np.ndarray = field(default=None)
    fail_step: np.ndarray = field(default=None)

    @property
    def n_members(self) -> int:
        return self.members.shape[0]

    @property
    def window(self) -> int:
        return self.members.shape[1]


def rollout_ensemble(
    x0: np.ndarray,
    p: ClosureParams,
    params: qgm.QgParams,
    w: int,
    S: int,
    seed: int,
    stream: int = 0,
    member_ids=None,
) -> EnsembleForecast:
    """``S`` closed-model trajectories of ``w`` steps from a shared initial state.

    Failed members are kept (zeroed after failure) and flagged.
    """
    if S < 1 or w < 1:
        raise ValueError("need S >= 1 and w >= 1")
    roll = BatchRollout(p.family, p.theta[None], params, x0, S, seed, streams=[stream], member_ids=member_ids)
    out = np.empty((S, w, 2) + params.grid.shape)
    for m, x in enumerate(roll.run(w)):
        out[:, m] = x[0, 0]
    return EnsembleForecast(
        members=out,
        initial=np.asarray(x0, dtype=float),
        seed=seed,
        stream=stream,
        failed=~roll.alive[0, 0],
        fail_step=roll.fail_step[0, 0],
    )
