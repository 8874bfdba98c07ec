"""Preferential correlated random walk (PCRW).

Locations evolve as

    X_{k+1} = X_k + mu_k dt + Sigma A_k sqrt(dt)
    mu_k    = f(beta_k) * forage(X_k) + (1 - f(beta_k)) * v_k
    beta_{k+1} = beta_k + sigma_beta B_k sqrt(dt)

with ``f`` the logistic function, ``v_k`` the last observed velocity and
``forage(x) = -alpha (S(x) + c) grad S(x)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .field import (
    FieldParams,
    FieldRealization,
    Mesh,
    OutsideMeshError,
    interp_weights,
    interpolate_field,
)

log = logging.getLogger(__name__)

BETA_CLAMP = 40.0


@dataclass(frozen=True)
class MovementParams:
    """Movement parameters.

    ``Sigma`` multiplies the standard bivariate normal in the location update,
    so the per-step covariance is ``Sigma Sigma^T dt``.  ``beta0`` is the mean
    of the first behavioural state and ``beta0_sd`` its prior standard
    deviation when fitting.
    """

    alpha: float = 100.0
    c: float = 0.0
    sigma_beta: float = 0.1
    Sigma: tuple = ((3.0, 0.0), (0.0, 3.0))
    beta0: float = -1.5
    beta0_sd: float = 1.0

    def __post_init__(self):
        S = np.asarray(self.Sigma, dtype=float)
        if S.shape != (2, 2):
            raise ValueError("Sigma must be 2x2")
        if not np.allclose(S, S.T):
            raise ValueError("Sigma must be symmetric")
        if not self.sigma_beta >= 0:
            raise ValueError("sigma_beta must be non-negative")
        object.__setattr__(self, "Sigma", tuple(tuple(float(v) for v in row) for row in S))

    @property
    def Sigma_array(self) -> np.ndarray:
        return np.asarray(self.Sigma, dtype=float)

    def with_(self, **kw) -> "MovementParams":
        return replace(self, **kw)


def diag_sigma(sx: float, sy: float | None = None) -> tuple:
    sy = sx if sy is None else sy
    return ((float(sx), 0.0), (0.0, float(sy)))


@dataclass(frozen=True, eq=False)
class Track:
    times: np.ndarray
    locations: np.ndarray
    responses: np.ndarray
    betas: np.ndarray | None = None
    reflections: int = 0
    track_id: str = "0"

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        X = np.asarray(self.locations, dtype=float).reshape(-1, 2)
        y = np.asarray(self.responses, dtype=float)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "locations", X)
        object.__setattr__(self, "responses", y)
        if not (t.shape[0] == X.shape[0] == y.shape[0]):
            raise ValueError("times, locations and responses must have equal length")
        if t.shape[0] < 3:
            raise ValueError(f"track {self.track_id!r} has {t.shape[0]} observations; at least 3 are needed")
        if np.any(np.diff(t) <= 0):
            raise ValueError(f"track {self.track_id!r}: times must be strictly increasing")

    def __len__(self):
        return self.times.shape[0]


@dataclass(frozen=True)
class SimProtocol:
    domain: tuple = (-150.0, 150.0, -150.0, 150.0)
    n_raw: int = 360
    burn_in: int = 60
    thin: int = 3
    lam: float = 10.0
    n_tracks: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.n_raw <= self.burn_in:
            raise ValueError("n_raw must exceed burn_in")
        if self.thin < 1 or self.lam <= 0:
            raise ValueError("thin must be >= 1 and lam > 0")
        if (self.n_raw - self.burn_in + self.thin - 1) // self.thin < 3:
            raise ValueError("protocol keeps fewer than 3 observations per track")

    @property
    def n_obs(self) -> int:
        return len(range(self.burn_in, self.n_raw, self.thin))


def behaviour_weight(beta):
    """Logistic weight ``exp(b) / (1 + exp(b))`` with ``b`` clamped to [-40, 40]."""
    b = np.clip(beta, -BETA_CLAMP, BETA_CLAMP)
    out = 0.5 * (1.0 + np.tanh(0.5 * b))
    return float(out) if np.ndim(beta) == 0 else out


def stencil_points(x, h: float) -> np.ndarray:
    """The four points ``x +- h e1``, ``x +- h e2`` (rows: +x, -x, +y, -y)."""
    x = np.asarray(x, dtype=float).reshape(-1, 2)
    off = np.array([[h, 0.0], [-h, 0.0], [0.0, h], [0.0, -h]])
    return x[:, None, :] + off[None, :, :]


def gradient_weights(mesh: Mesh, points, h: float):
    """Sparse representation of central-difference gradients of the P1 interpolant.

    Returns ``idx`` with shape ``(n, 12)`` and ``wx``, ``wy`` of the same shape
    such that ``dS/dx = sum(wx * s[idx])``.
    """
    st = stencil_points(points, h).reshape(-1, 2)
    try:
        idx, w = interp_weights(mesh, st)
    except OutsideMeshError as exc:
        raise OutsideMeshError(f"gradient stencil (h={h}) leaves the mesh: {exc}") from exc
    n = st.shape[0] // 4
    idx = idx.reshape(n, 12)
    w = w.reshape(n, 4, 3)
    inv = 1.0 / (2.0 * h)
    wx = np.concatenate([w[:, 0] * inv, -w[:, 1] * inv, 0 * w[:, 2], 0 * w[:, 3]], axis=1)
    wy = np.concatenate([0 * w[:, 0], 0 * w[:, 1], w[:, 2] * inv, -w[:, 3] * inv], axis=1)
    return idx, wx, wy


def grad_field(real: FieldRealization, x, h: float) -> np.ndarray:
    """Central-difference gradient of the interpolated field at ``x``."""
    x = np.asarray(x, dtype=float)
    idx, wx, wy = gradient_weights(real.mesh, x, h)
    vals = real.values[idx]
    g = np.column_stack([np.sum(wx * vals, axis=1), np.sum(wy * vals, axis=1)])
    return g[0] if x.ndim == 1 else g


def default_step(mesh: Mesh) -> float:
    return float(min(mesh.spacing))


def foraging_drift(x, real: FieldRealization, params: MovementParams, h: float) -> np.ndarray:
    """``-alpha * (S(x) + c) * grad S(x)``."""
    if params.alpha == 0.0:
        # still validate the stencil so alpha does not change which inputs are legal
        grad_field(real, x, h)
        return np.zeros(2)
    s = interpolate_field(real, x)
    return -params.alpha * (s + params.c) * grad_field(real, x, h)


def velocity_approx(track: Track, k: int) -> np.ndarray:
    """Velocity from the two observations ending at ``k`` (1-based, ``k >= 2``)."""
    if k < 2:
        raise IndexError("velocity needs two predecessors: k must be >= 2 (1-based)")
    X = track.locations
    t = track.times
    return (X[k - 1] - X[k - 2]) / (t[k - 1] - t[k - 2])


def _blend(beta, forage, velocity):
    f = behaviour_weight(beta)
    return f * np.asarray(forage) + (1.0 - f) * np.asarray(velocity)


def drift(track: Track, k: int, real: FieldRealization, params: MovementParams, h: float) -> np.ndarray:
    """Expected velocity at observation ``k`` (1-based) using ``track.betas``."""
    if track.betas is None:
        raise ValueError("drift needs behavioural states on the track")
    v = velocity_approx(track, k)
    fo = foraging_drift(track.locations[k - 1], real, params, h)
    return _blend(track.betas[k - 1], fo, v)


def _reflect(x, lo, hi):
    """Fold a coordinate back into ``[lo, hi]``; returns (value, reflected?)."""
    if lo <= x <= hi:
        return x, False
    width = hi - lo
    y = (x - lo) % (2.0 * width)
    if y > width:
        y = 2.0 * width - y
    return lo + y, True


def step(
    locations,
    times,
    beta: float,
    real: FieldRealization,
    params: MovementParams,
    dt: float,
    rng: np.random.Generator,
    *,
    h: float | None = None,
    bounds=None,
    noise=None,
):
    """One PCRW transition from the last of ``locations``.

    Returns ``(new_location, new_beta, n_reflected)``.  ``noise`` may supply
    ``(A, B)`` instead of drawing them from ``rng``.  Coordinates leaving
    ``bounds`` are reflected back inside.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    X = np.asarray(locations, dtype=float).reshape(-1, 2)
    t = np.asarray(times, dtype=float)
    if X.shape[0] < 2:
        raise ValueError("step needs at least two prior locations")
    h = default_step(real.mesh) if h is None else h
    if noise is None:
        A = rng.standard_normal(2)
        B = rng.standard_normal()
    else:
        A, B = noise
    v = (X[-1] - X[-2]) / (t[-1] - t[-2])
    fo = foraging_drift(X[-1], real, params, h)
    mu = _blend(beta, fo, v)
    new = X[-1] + mu * dt + params.Sigma_array @ np.asarray(A) * np.sqrt(dt)
    new_beta = beta + params.sigma_beta * B * np.sqrt(dt)
    n_ref = 0
    if bounds is not None:
        x0, x1, y0, y1 = bounds
        new[0], r0 = _reflect(new[0], x0, x1)
        new[1], r1 = _reflect(new[1], y0, y1)
        n_ref = int(r0) + int(r1)
    return new, float(new_beta), n_ref


def movement_bounds(protocol_domain, mesh: Mesh, h: float):
    """Rectangle keeping every gradient stencil inside both the domain and the mesh."""
    x0, x1, y0, y1 = protocol_domain
    mx0, mx1, my0, my1 = mesh.domain
    return (max(x0, mx0 + h), min(x1, mx1 - h), max(y0, my0 + h), min(y1, my1 - h))


def simulate_track(
    real: FieldRealization,
    params: MovementParams,
    field_params: FieldParams,
    protocol: SimProtocol,
    rng: np.random.Generator,
    *,
    h: float | None = None,
    track_id: str = "0",
) -> Track:
    """Simulate one PCRW track on the mean-zero field ``real``.

    The drift sees the response-scale field ``mu + S``.  The raw path has
    ``protocol.n_raw`` positions with exponential gaps; the first
    ``burn_in`` are dropped and every ``thin``-th of the rest is kept.
    Responses are ``mu + S(X) + N(0, tau2)``.
    """
    h = default_step(real.mesh) if h is None else h
    bounds = movement_bounds(protocol.domain, real.mesh, h)
    temp = real.shifted(field_params.mu)

    n = protocol.n_raw
    dts = rng.exponential(1.0 / protocol.lam, size=n - 1)
    times = np.concatenate([[0.0], np.cumsum(dts)])
    X = np.empty((n, 2))
    betas = np.empty(n)
    X[0] = [rng.uniform(bounds[0], bounds[1]), rng.uniform(bounds[2], bounds[3])]
    betas[0] = params.beta0
    # second position: pure diffusion, the velocity is not defined yet
    A = rng.standard_normal(2)
    B = rng.standard_normal()
    sq = np.sqrt(dts[0])
    X[1] = X[0] + params.Sigma_array @ A * sq
    betas[1] = betas[0] + params.sigma_beta * B * sq
    n_ref = 0
    for ax, (lo, hi) in enumerate([(bounds[0], bounds[1]), (bounds[2], bounds[3])]):
        X[1, ax], r = _reflect(X[1, ax], lo, hi)
        n_ref += int(r)
    for k in range(1, n - 1):
        X[k + 1], betas[k + 1], r = step(
            X[k - 1 : k + 1], times[k - 1 : k + 1], betas[k], temp, params, dts[k], rng,
            h=h, bounds=bounds,
        )
        n_ref += r

    keep = np.arange(protocol.burn_in, n, protocol.thin)
    Xk = X[keep]
    tau = np.sqrt(field_params.tau2)
    y = temp(Xk) + tau * rng.standard_normal(keep.size)
    if n_ref:
        log.debug("track %s: %d coordinate reflections", track_id, n_ref)
    return Track(times[keep], Xk, y, betas[keep], n_ref, track_id)


def simulate_tracks(real, params, field_params, protocol: SimProtocol, rng, *, h=None) -> list[Track]:
    return [
        simulate_track(real, params, field_params, protocol, rng, h=h, track_id=str(i))
        for i in range(protocol.n_tracks)
    ]
