"""Laplace-approximated likelihoods for the preferential and standard models.

The latent vector is ``u = (s, beta)``: field values at the mesh vertices and
one behavioural state per observation (tracks concatenated).  The joint
negative log-likelihood is the sum of four blocks

* observations   ``Y_k ~ N(mu + S(X_k), tau2)``
* movement       PCRW transitions ``X_{k+1} | X_{1:k}, S, beta_k`` for k >= 2
* behaviour      Gaussian random walk for beta, ``beta_1 ~ N(beta0, beta0_sd^2)``
* field          GMRF prior ``N(0, Q^{-1})``

The first two locations of each track get a constant (uniform) density and
are dropped.  In the movement drift the field is taken on the response scale,
``S* = mu + S + c``.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ._linalg import LDLCache, NotPositiveDefiniteError, SparseLDL
from ._optim import bfgs, fd_hessian
from .field import (
    FemMatrices,
    FieldParams,
    Mesh,
    PrecisionBundle,
    assemble_fem,
    build_field_mesh,
    build_precision,
    dense_cholesky,
    interp_weights,
    interpolation_matrix,
    matern_cov,
    _pairwise_distances,
)
from .movement import MovementParams, Track, behaviour_weight, default_step, gradient_weights

log = logging.getLogger(__name__)

LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ThetaFull:
    field: FieldParams
    movement: MovementParams


@dataclass
class LatentState:
    s: np.ndarray
    beta: np.ndarray

    def pack(self) -> np.ndarray:
        return np.concatenate([self.s, self.beta])

    @classmethod
    def unpack(cls, u, m: int) -> "LatentState":
        u = np.asarray(u, dtype=float)
        return cls(u[:m].copy(), u[m:].copy())


@dataclass
class LaplaceResult:
    nll: float
    mode: LatentState
    hessian_logdet: float
    inner_iters: int
    converged: bool
    grad_norm: float = float("nan")
    joint: float = float("nan")
    hessian: sp.csc_matrix | None = field(default=None, repr=False)
    factor: SparseLDL | None = field(default=None, repr=False)


class InnerSolveError(RuntimeError):
    pass


# --------------------------------------------------------------------- problem


class LatentProblem:
    """Data-dependent, parameter-free pieces of the joint likelihood.

    Built once per (track set, mesh, gradient step); every likelihood
    evaluation afterwards is vectorised over observations and transitions.
    """

    def __init__(self, tracks: list[Track], mesh: Mesh, h: float | None = None, fem: FemMatrices | None = None):
        self.tracks = list(tracks)
        if not self.tracks:
            raise ValueError("no tracks")
        self.mesh = mesh
        self.h = default_step(mesh) if h is None else float(h)
        self.fem = assemble_fem(mesh) if fem is None else fem
        self.m = mesh.n_vertices
        lengths = [len(t) for t in self.tracks]
        self.n_obs = int(sum(lengths))
        self.dim = self.m + self.n_obs
        offsets = np.concatenate([[0], np.cumsum(lengths)])
        self.track_offsets = offsets

        X = np.concatenate([t.locations for t in self.tracks])
        self.locations = X
        self.y = np.concatenate([t.responses for t in self.tracks])
        self.A = interpolation_matrix(mesh, X)
        self.AtA = (self.A.T @ self.A).tocsr()

        # behavioural random walk: pairs of consecutive global beta indices
        prev, nxt, rw_dt, first = [], [], [], []
        for t, off in zip(self.tracks, offsets[:-1]):
            n = len(t)
            first.append(off)
            prev.append(off + np.arange(n - 1))
            nxt.append(off + np.arange(1, n))
            rw_dt.append(np.diff(t.times))
        self.rw_prev = np.concatenate(prev)
        self.rw_next = np.concatenate(nxt)
        self.rw_dt = np.concatenate(rw_dt)
        self.first = np.asarray(first)

        # movement transitions X_k -> X_{k+1} for k = 2..n-1 (1-based)
        mid, bidx, dt, d, v = [], [], [], [], []
        for t, off in zip(self.tracks, offsets[:-1]):
            n = len(t)
            k = np.arange(1, n - 1)
            mid.append(t.locations[k])
            bidx.append(off + k)
            dt.append(t.times[k + 1] - t.times[k])
            d.append(t.locations[k + 1] - t.locations[k])
            v.append((t.locations[k] - t.locations[k - 1]) / (t.times[k] - t.times[k - 1])[:, None])
        mid = np.concatenate(mid)
        self.K = mid.shape[0]
        self.mv_beta = self.m + np.concatenate(bidx)
        self.mv_dt = np.concatenate(dt)
        self.mv_d = np.concatenate(d)
        self.mv_v = np.concatenate(v)
        cidx, cw = interp_weights(mesh, mid)
        gidx, gwx, gwy = gradient_weights(mesh, mid, self.h)
        self.mv_idx = np.concatenate([cidx, gidx], axis=1)
        zeros3 = np.zeros((self.K, 3))
        zeros12 = np.zeros((self.K, 12))
        self.mv_a = np.concatenate([cw, zeros12], axis=1)
        self.mv_wx = np.concatenate([zeros3, gwx], axis=1)
        self.mv_wy = np.concatenate([zeros3, gwy], axis=1)

        p = self.mv_idx.shape[1]
        self._ss_rows = np.repeat(self.mv_idx, p, axis=1).ravel()
        self._ss_cols = np.tile(self.mv_idx, (1, p)).ravel()
        self._obs_idx = np.arange(self.n_obs)
        self._q_cache = LDLCache()
        self._h_cache = LDLCache()

    # ------------------------------------------------------------ likelihood

    def precision(self, fp: FieldParams) -> PrecisionBundle:
        return build_precision(self.fem, fp, self._q_cache)

    def initial_latent(self, theta: ThetaFull) -> LatentState:
        beta = np.full(self.n_obs, theta.movement.beta0)
        return LatentState(np.zeros(self.m), beta)

    def evaluate(self, u, theta: ThetaFull, bundle: PrecisionBundle, order: int = 0, blocks: bool = False):
        """Joint NLL (``order=0``), plus gradient (1) and sparse Hessian (2).

        With ``blocks=True`` the value is returned as a dict of the four
        block contributions instead of their sum.
        """
        fp, mp = theta.field, theta.movement
        m = self.m
        u = np.asarray(u, dtype=float)
        s = u[:m]
        b = u[m:]
        if fp.tau2 <= 0:
            raise ValueError("the Laplace likelihood needs tau2 > 0")
        Sig = mp.Sigma_array
        cov0 = Sig @ Sig.T
        P0 = np.linalg.inv(cov0)
        logdet_sig = 0.5 * math.log(np.linalg.det(cov0))

        # field prior
        Q = bundle.Q
        Qs = Q @ s
        f_field = 0.5 * s @ Qs - 0.5 * bundle.logdet() + 0.5 * m * LOG2PI

        # observations
        res = self.y - fp.mu - self.A @ s
        f_obs = 0.5 * np.sum(res**2) / fp.tau2 + 0.5 * self.n_obs * math.log(2 * math.pi * fp.tau2)

        # behavioural random walk
        sb2 = mp.sigma_beta**2
        var = sb2 * self.rw_dt
        db = b[self.rw_next] - b[self.rw_prev]
        b1 = b[self.first] - mp.beta0
        v0 = mp.beta0_sd**2
        f_beta = (
            0.5 * np.sum(db**2 / var) + 0.5 * np.sum(np.log(2 * math.pi * var))
            + 0.5 * np.sum(b1**2) / v0 + 0.5 * b1.size * math.log(2 * math.pi * v0)
        )

        # movement
        sL = s[self.mv_idx]
        a, wx, wy = self.mv_a, self.mv_wx, self.mv_wy
        sc = fp.mu + mp.c + np.sum(a * sL, axis=1)
        gx = np.sum(wx * sL, axis=1)
        gy = np.sum(wy * sL, axis=1)
        beta_k = u[self.mv_beta]
        w = behaviour_weight(beta_k)
        alpha = mp.alpha
        dt = self.mv_dt
        q = self.mv_v + alpha * sc[:, None] * np.column_stack([gx, gy])
        r = self.mv_d - dt[:, None] * self.mv_v + (dt * w)[:, None] * q
        Pr = (r @ P0) / dt[:, None]
        f_move = 0.5 * np.sum(r * Pr) + np.sum(LOG2PI + logdet_sig + np.log(dt))

        if blocks:
            val = {"obs": f_obs, "move": f_move, "beta": f_beta, "field": f_field}
        else:
            val = f_obs + f_move + f_beta + f_field
        if order == 0:
            return val

        # ---- gradient
        grad = np.zeros(self.dim)
        grad[:m] = Qs - (self.A.T @ res) / fp.tau2
        gb = np.zeros(self.n_obs)
        tmp = db / var
        np.add.at(gb, self.rw_next, tmp)
        np.add.at(gb, self.rw_prev, -tmp)
        gb[self.first] += b1 / v0
        grad[m:] = gb

        w1 = w * (1.0 - w)
        # dq_c/ds_L = alpha * (g_c a + sc w_c)
        Jx = alpha * (gx[:, None] * a + sc[:, None] * wx)
        Jy = alpha * (gy[:, None] * a + sc[:, None] * wy)
        dtw = dt * w
        gsL = (Pr[:, 0] * dtw)[:, None] * Jx + (Pr[:, 1] * dtw)[:, None] * Jy
        np.add.at(grad, self.mv_idx.ravel(), gsL.ravel())
        gbeta = dt * w1 * np.sum(Pr * q, axis=1)
        np.add.at(grad, self.mv_beta, gbeta)
        if order == 1:
            return val, grad

        # ---- Hessian
        w2 = w1 * (1.0 - 2.0 * w)
        P = P0[None, :, :] / dt[:, None, None]
        Rs = dtw[:, None, None] * np.stack([Jx, Jy], axis=1)  # (K, 2, p)
        Rb = (dt * w1)[:, None] * q  # (K, 2)
        PRs = np.einsum("kcd,kdp->kcp", P, Rs)
        Hss = np.einsum("kcp,kcq->kpq", Rs, PRs)
        coef = alpha * dtw
        cx = Pr[:, 0] * coef
        cy = Pr[:, 1] * coef
        Hss += cx[:, None, None] * (wx[:, :, None] * a[:, None, :] + a[:, :, None] * wx[:, None, :])
        Hss += cy[:, None, None] * (wy[:, :, None] * a[:, None, :] + a[:, :, None] * wy[:, None, :])
        Hbb = np.einsum("kc,kc->k", Rb, np.einsum("kcd,kd->kc", P, Rb)) + dt * w2 * np.sum(Pr * q, axis=1)
        Hsb = np.einsum("kcp,kc->kp", PRs, Rb) + (dt * w1)[:, None] * (Pr[:, 0:1] * Jx + Pr[:, 1:2] * Jy)

        n = self.dim
        Qc = Q.tocoo()
        AtA = self.AtA.tocoo()
        rows = [Qc.row, AtA.row, self._ss_rows]
        cols = [Qc.col, AtA.col, self._ss_cols]
        vals = [Qc.data, AtA.data / fp.tau2, Hss.ravel()]
        # random walk (tridiagonal) and beta_1 prior
        iv = 1.0 / var
        ip, inx = m + self.rw_prev, m + self.rw_next
        rows += [ip, inx, ip, inx, m + self.first, self.mv_beta]
        cols += [ip, inx, inx, ip, m + self.first, self.mv_beta]
        vals += [iv, iv, -iv, -iv, np.full(self.first.size, 1.0 / v0), Hbb]
        bcol = np.repeat(self.mv_beta, self.mv_idx.shape[1])
        rows += [self.mv_idx.ravel(), bcol]
        cols += [bcol, self.mv_idx.ravel()]
        vals += [Hsb.ravel(), Hsb.ravel()]
        H = sp.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        )
        H.sum_duplicates()
        return val, grad, H


def _as_problem(tracks, mesh, h=None) -> LatentProblem:
    if isinstance(tracks, LatentProblem):
        return tracks
    return LatentProblem(list(tracks), mesh, h)


def joint_nll(latent: LatentState, theta: ThetaFull, tracks, mesh: Mesh | None = None,
              bundle: PrecisionBundle | None = None, *, h: float | None = None, blocks: bool = False):
    """Joint negative log-likelihood of data and latent state.

    ``tracks`` may be a list of :class:`Track` or a prepared
    :class:`LatentProblem` (then ``mesh`` is ignored).
    """
    prob = _as_problem(tracks, mesh, h)
    u = latent.pack()
    if u.size != prob.dim:
        raise ValueError(f"latent has {u.size} entries, problem expects {prob.dim} "
                         f"({prob.m} field + {prob.n_obs} behavioural)")
    bundle = prob.precision(theta.field) if bundle is None else bundle
    val = prob.evaluate(u, theta, bundle, 0, blocks=blocks)
    total = sum(val.values()) if blocks else val
    if not np.isfinite(total):
        parts = val if blocks else prob.evaluate(u, theta, bundle, 0, blocks=True)
        bad = [k for k, v in parts.items() if not np.isfinite(v)]
        raise FloatingPointError(f"joint nll not finite; offending block(s): {bad}")
    return val


# --------------------------------------------------------------- inner solve


def _grad_scale(f: float) -> float:
    return max(1.0, abs(f))


def inner_newton(theta: ThetaFull, prob: LatentProblem, bundle: PrecisionBundle,
                 init: LatentState | None = None, tol: float = 1e-8, max_iter: int = 100) -> LaplaceResult:
    """Mode of the joint NLL over ``(s, beta)`` by damped sparse Newton.

    Convergence is declared when ``max|grad| <= tol * max(1, |f|)``.  An
    indefinite Hessian triggers Levenberg damping; exceeding ``max_iter``
    returns an unconverged result rather than raising.
    """
    u = prob.initial_latent(theta).pack() if init is None else init.pack().copy()
    if u.size != prob.dim:
        u = prob.initial_latent(theta).pack()
    f, g, H = prob.evaluate(u, theta, bundle, 2)
    if not np.isfinite(f):
        raise InnerSolveError("joint nll not finite at the initial latent state")
    lam = 0.0
    it = 0
    converged = False
    factor = None
    gnorm = float(np.max(np.abs(g)))
    eye = sp.identity(prob.dim, format="csc")
    diag_scale = max(1.0, float(np.max(np.abs(H.diagonal()))))
    while True:
        gnorm = float(np.max(np.abs(g)))
        if gnorm <= tol * _grad_scale(f):
            converged = True
            break
        if it >= max_iter:
            break
        it += 1
        # factorise, escalating damping until positive definite
        factor = None
        lam_try = lam
        for _ in range(60):
            try:
                factor = SparseLDL(H + lam_try * eye if lam_try > 0 else H, prob._h_cache)
                break
            except NotPositiveDefiniteError:
                lam_try = max(1e-8 * diag_scale, 10.0 * lam_try)
        if factor is None:
            raise InnerSolveError("Levenberg damping exhausted; Hessian not positive definite")
        step = -factor.solve(g)
        slope = g @ step
        t = 1.0
        ok = False
        for _ in range(50):
            un = u + t * step
            fn = prob.evaluate(un, theta, bundle, 0)
            if np.isfinite(fn) and fn <= f + 1e-4 * t * slope + 1e-12 * abs(f):
                ok = True
                break
            t *= 0.5
        if not ok:
            # no progress possible in double precision; accept current point
            log.debug("inner line search stalled at |g|=%.3e", gnorm)
            break
        u = un
        f, g, H = prob.evaluate(u, theta, bundle, 2)
        lam = lam_try * 0.1 if lam_try > 0 and t == 1.0 else lam_try
        if lam < 1e-12 * diag_scale:
            lam = 0.0
    try:
        factor = SparseLDL(H)
        logdet = factor.logdet()
    except NotPositiveDefiniteError:
        factor = None
        logdet = float("nan")
        converged = False
    return LaplaceResult(
        nll=float("nan"),
        mode=LatentState.unpack(u, prob.m),
        hessian_logdet=logdet,
        inner_iters=it,
        converged=converged,
        grad_norm=gnorm,
        joint=float(f),
        hessian=H,
        factor=factor,
    )


def laplace_nll(theta: ThetaFull, tracks, mesh: Mesh | None = None, warm: LatentState | None = None,
                *, h: float | None = None, tol: float = 1e-8, max_iter: int = 100) -> LaplaceResult:
    """Laplace approximation of the marginal NLL of the observed tracks."""
    prob = _as_problem(tracks, mesh, h)
    bundle = prob.precision(theta.field)
    res = inner_newton(theta, prob, bundle, warm, tol, max_iter)
    res.nll = res.joint + 0.5 * res.hessian_logdet - 0.5 * prob.dim * LOG2PI
    return res


# ----------------------------------------------------------- parameterisation

PARAM_NAMES = ("mu", "tau2", "phi", "sigma2", "alpha", "c", "sigma_beta", "sigma_x", "sigma_y", "beta0")
POSITIVE = {"tau2", "phi", "sigma2", "sigma_beta", "sigma_x", "sigma_y"}
DEFAULT_FIXED = frozenset({"tau2", "c", "beta0"})
FIELD_NAMES = ("mu", "tau2", "phi", "sigma2")


def theta_to_dict(theta: ThetaFull) -> dict:
    S = theta.movement.Sigma_array
    return {
        "mu": theta.field.mu,
        "tau2": theta.field.tau2,
        "phi": theta.field.phi,
        "sigma2": theta.field.sigma2,
        "alpha": theta.movement.alpha,
        "c": theta.movement.c,
        "sigma_beta": theta.movement.sigma_beta,
        "sigma_x": S[0, 0],
        "sigma_y": S[1, 1],
        "beta0": theta.movement.beta0,
    }


def theta_from_dict(d: dict, template: ThetaFull) -> ThetaFull:
    fp = template.field.with_(mu=d["mu"], tau2=d["tau2"], phi=d["phi"], sigma2=d["sigma2"])
    S = template.movement.Sigma_array.copy()
    S[0, 0], S[1, 1] = d["sigma_x"], d["sigma_y"]
    mp = template.movement.with_(alpha=d["alpha"], c=d["c"], sigma_beta=d["sigma_beta"],
                                 Sigma=S, beta0=d["beta0"])
    return ThetaFull(fp, mp)


def _normalise_fixed(fixed, names=PARAM_NAMES) -> frozenset:
    if fixed is None:
        return DEFAULT_FIXED & frozenset(names)
    if isinstance(fixed, dict):
        fixed = {k for k, v in fixed.items() if v}
    fixed = frozenset(fixed)
    unknown = fixed - set(names) - {"kappa"}
    if unknown:
        raise ValueError(f"unknown parameter(s) in fixed mask: {sorted(unknown)}")
    return fixed - {"kappa"}


LOG_BOUND = 30.0  # log-scale parameters beyond exp(+-30) are treated as infeasible


class _Transform:
    def __init__(self, names, log_params: bool):
        self.names = list(names)
        self.log = [log_params and n in POSITIVE for n in self.names]

    def to_free(self, d: dict) -> np.ndarray:
        return np.array([math.log(d[n]) if lg else float(d[n]) for n, lg in zip(self.names, self.log)])

    def from_free(self, x, base: dict) -> dict | None:
        out = dict(base)
        for n, lg, v in zip(self.names, self.log, x):
            if not np.isfinite(v) or (lg and abs(v) > LOG_BOUND):
                return None
            val = math.exp(v) if lg else float(v)
            if n in POSITIVE and not val > 0:
                return None
            out[n] = val
        return out

    def jacobian(self, d: dict) -> np.ndarray:
        return np.array([d[n] if lg else 1.0 for n, lg in zip(self.names, self.log)])


@dataclass
class FitOptions:
    inner_tol: float = 1e-8
    inner_max_iter: int = 100
    ftol: float = 1e-6
    gtol: float = 1e-5
    max_iter: int = 100
    max_eval: int = 500
    fd_rel_step: float = 1e-4
    log_params: bool = True
    compute_covariance: bool = True
    sigma_start: str = "moment"


@dataclass
class FitResult:
    theta: ThetaFull
    laplace: LaplaceResult | None
    nll: float
    free: list
    fixed: frozenset
    cov: np.ndarray | None
    se: dict
    converged: bool
    n_iter: int
    n_eval: int
    message: str
    wall_time: float
    extra: dict = field(default_factory=dict)

    def estimates(self) -> dict:
        if isinstance(self.theta, ThetaFull):
            return theta_to_dict(self.theta)
        return {n: getattr(self.theta, n) for n in FIELD_NAMES}

    def correlation(self) -> np.ndarray | None:
        if self.cov is None:
            return None
        d = np.sqrt(np.abs(np.diag(self.cov)))
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.cov / np.outer(d, d)

    def report(self) -> dict:
        corr = self.correlation()
        return {
            "estimates": {k: float(v) for k, v in self.estimates().items()},
            "standard_errors": {k: (None if not np.isfinite(v) else float(v)) for k, v in self.se.items()},
            "fixed": sorted(self.fixed),
            "free": list(self.free),
            "nll": float(self.nll),
            "converged": bool(self.converged),
            "inner_converged": None if self.laplace is None else bool(self.laplace.converged),
            "outer_iterations": int(self.n_iter),
            "outer_evaluations": int(self.n_eval),
            "inner_iterations": None if self.laplace is None else int(self.laplace.inner_iters),
            "message": self.message,
            "correlation": None if corr is None else np.round(corr, 10).tolist(),
        }


def _covariance(f, x, tr: _Transform, d: dict, f0: float, rel: float):
    H = fd_hessian(f, x, f0, rel)
    try:
        if not np.all(np.isfinite(H)):
            raise np.linalg.LinAlgError
        np.linalg.cholesky(H)
        cov_free = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        return None, {n: float("nan") for n in tr.names}
    J = tr.jacobian(d)
    cov = cov_free * np.outer(J, J)
    se = {n: float(np.sqrt(cov[i, i])) for i, n in enumerate(tr.names)}
    return cov, se


def moment_sigma(prob: LatentProblem, beta0: float) -> tuple[float, float]:
    """Per-axis diffusion scale from the drift-free residuals at ``beta = beta0``.

    Used as the outer starting value for ``sigma_x``, ``sigma_y``: a poor start
    there sends the first quasi-Newton steps into regions where the inner
    solve is slow.
    """
    w = behaviour_weight(beta0)
    r = prob.mv_d - (prob.mv_dt * (1.0 - w))[:, None] * prob.mv_v
    sx, sy = np.sqrt(np.mean(r**2 / prob.mv_dt[:, None], axis=0))
    return float(sx), float(sy)


def fit_preferential(tracks, mesh: Mesh, init: ThetaFull, fixed=None, opts: FitOptions | None = None,
                     *, h: float | None = None) -> FitResult:
    """Maximise the Laplace marginal likelihood over the free parameters.

    ``fixed`` is a set (or name->bool mapping) of parameter names held at
    their ``init`` values; by default ``tau2``, ``c`` and ``beta0``.
    ``kappa`` is always fixed at 2.
    """
    opts = FitOptions() if opts is None else opts
    t0 = time.perf_counter()
    prob = _as_problem(tracks, mesh, h)
    fixed = _normalise_fixed(fixed)
    base = theta_to_dict(init)
    if not np.allclose(init.movement.Sigma_array, np.diag(np.diag(init.movement.Sigma_array))):
        raise ValueError("fitting supports diagonal Sigma only")
    free = [n for n in PARAM_NAMES if n not in fixed]
    if opts.sigma_start == "moment":
        sx, sy = moment_sigma(prob, base["beta0"])
        if "sigma_x" in free and sx > 0:
            base["sigma_x"] = sx
        if "sigma_y" in free and sy > 0:
            base["sigma_y"] = sy
    elif opts.sigma_start != "given":
        raise ValueError(f"sigma_start must be 'moment' or 'given', got {opts.sigma_start!r}")
    tr = _Transform(free, opts.log_params)
    state = {"warm": None, "best": None}

    def evaluate(d, warm):
        theta = theta_from_dict(d, init)
        try:
            return laplace_nll(theta, prob, warm=warm, tol=opts.inner_tol, max_iter=opts.inner_max_iter)
        except (InnerSolveError, NotPositiveDefiniteError, ArithmeticError, ValueError) as exc:
            log.debug("laplace evaluation failed at %s: %s", d, exc)
            return None

    def objective(x):
        d = tr.from_free(x, base)
        if d is None:
            return float("inf")
        res = evaluate(d, state["warm"])
        if res is None or not np.isfinite(res.nll):
            return float("inf")
        return res.nll

    def on_accept(x, fx):
        d = tr.from_free(x, base)
        res = evaluate(d, state["warm"])
        if res is not None and np.isfinite(res.nll):
            state["warm"] = res.mode
            state["best"] = (x.copy(), res)

    first = evaluate(base, None)
    if first is None or not np.isfinite(first.nll):
        raise FloatingPointError("Laplace nll is not finite at the initial parameters")
    state["warm"] = first.mode
    state["best"] = (tr.to_free(base), first)

    if not free:
        return FitResult(init, first, first.nll, [], fixed, None, {}, True, 0, 1,
                         "all parameters fixed", time.perf_counter() - t0)

    x0 = tr.to_free(base)
    opt = bfgs(objective, x0, ftol=opts.ftol, gtol=opts.gtol, max_iter=opts.max_iter,
               max_eval=opts.max_eval, rel_step=opts.fd_rel_step, callback=on_accept)
    d_hat = tr.from_free(opt.x, base)
    final = evaluate(d_hat, state["warm"])
    if final is None:
        x_b, final = state["best"]
        d_hat = tr.from_free(x_b, base)
    theta_hat = theta_from_dict(d_hat, init)
    cov, se = (None, {n: float("nan") for n in free})
    if opts.compute_covariance:
        state["warm"] = final.mode
        cov, se = _covariance(objective, tr.to_free(d_hat), tr, d_hat, final.nll, opts.fd_rel_step)
    return FitResult(theta_hat, final, final.nll, free, fixed, cov, se,
                     bool(opt.converged and final.converged), opt.n_iter, opt.n_eval, opt.message,
                     time.perf_counter() - t0)


# ------------------------------------------------------------ standard model


class StandardProblem:
    """Exact Gaussian likelihood of responses given locations (dense)."""

    def __init__(self, tracks):
        tracks = list(tracks)
        self.X = np.concatenate([t.locations for t in tracks])
        self.y = np.concatenate([t.responses for t in tracks])
        self.D = _pairwise_distances(self.X)

    def nll(self, fp: FieldParams) -> float:
        n = self.y.size
        C = matern_cov(self.D, fp) + fp.tau2 * np.eye(n)
        L = dense_cholesky(C, fp.sigma2)
        z = np.linalg.solve(L, self.y - fp.mu) if n > 1 else (self.y - fp.mu) / L[0, 0]
        return float(0.5 * z @ z + np.sum(np.log(np.diag(L))) + 0.5 * n * LOG2PI)


def standard_nll(fp: FieldParams, tracks) -> float:
    return StandardProblem(tracks).nll(fp)


def fit_standard(tracks, init: FieldParams, fixed=None, opts: FitOptions | None = None) -> FitResult:
    """Maximum likelihood for ``Y | X`` ignoring the sampling mechanism."""
    opts = FitOptions() if opts is None else opts
    t0 = time.perf_counter()
    prob = StandardProblem(tracks)
    fixed = _normalise_fixed(fixed, FIELD_NAMES) if fixed is not None else frozenset({"tau2"})
    base = {n: getattr(init, n) for n in FIELD_NAMES}
    free = [n for n in FIELD_NAMES if n not in fixed]
    tr = _Transform(free, opts.log_params)

    def objective(x):
        d = tr.from_free(x, base)
        if d is None:
            return float("inf")
        try:
            return prob.nll(init.with_(**d))
        except (np.linalg.LinAlgError, ArithmeticError, ValueError):
            return float("inf")

    nll0 = objective(tr.to_free(base))
    if not np.isfinite(nll0):
        raise FloatingPointError("standard nll not finite at the initial parameters")
    if not free:
        return FitResult(init, None, nll0, [], fixed, None, {}, True, 0, 1, "all parameters fixed",
                         time.perf_counter() - t0)
    opt = bfgs(objective, tr.to_free(base), ftol=opts.ftol * 1e-2, gtol=opts.gtol, max_iter=opts.max_iter,
               max_eval=opts.max_eval, rel_step=opts.fd_rel_step)
    d_hat = tr.from_free(opt.x, base)
    cov, se = (None, {n: float("nan") for n in free})
    if opts.compute_covariance:
        cov, se = _covariance(objective, opt.x, tr, d_hat, opt.fun, opts.fd_rel_step)
    return FitResult(init.with_(**d_hat), None, opt.fun, free, fixed, cov, se, opt.converged,
                     opt.n_iter, opt.n_eval, opt.message, time.perf_counter() - t0)


def fitting_mesh(tracks, h: float, margin: float, spacing: float | None = None) -> Mesh:
    """Lattice over the padded union of track bounding boxes."""
    X = np.concatenate([t.locations for t in tracks])
    lo = X.min(axis=0) - 2 * h
    hi = X.max(axis=0) + 2 * h
    spacing = h if spacing is None else spacing
    return build_field_mesh((lo[0], hi[0], lo[1], hi[1]), spacing, margin)
