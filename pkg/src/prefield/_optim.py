"""Small BFGS driver with central finite-difference gradients.

Kept in-house rather than using ``scipy.optimize.minimize`` because the
objective may return ``inf`` (failed inner solves) and the finite-difference
stencil doubles as a cheap diagonal curvature estimate for the initial
inverse Hessian.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class OptResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    n_eval: int
    converged: bool
    message: str


def fd_step(x, rel: float = 1e-4) -> np.ndarray:
    return rel * (1.0 + np.abs(x))


def fd_gradient(f, x, f0=None, rel: float = 1e-4):
    """Central differences; falls back to one-sided where a side is non-finite.

    Returns ``(grad, curvature, n_calls)`` where ``curvature`` holds the
    second differences along each axis (``nan`` when unavailable).
    """
    x = np.asarray(x, dtype=float)
    h = fd_step(x, rel)
    g = np.empty_like(x)
    curv = np.full_like(x, np.nan)
    calls = 0
    if f0 is None:
        f0 = f(x)
        calls += 1
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h[i]
        fp = f(x + e)
        fm = f(x - e)
        calls += 2
        if np.isfinite(fp) and np.isfinite(fm):
            g[i] = (fp - fm) / (2 * h[i])
            curv[i] = (fp - 2 * f0 + fm) / h[i] ** 2
        elif np.isfinite(fp):
            g[i] = (fp - f0) / h[i]
        elif np.isfinite(fm):
            g[i] = (f0 - fm) / h[i]
        else:
            g[i] = np.nan
    return g, curv, calls


def fd_hessian(f, x, f0=None, rel: float = 1e-4) -> np.ndarray:
    """Symmetric second-difference Hessian."""
    x = np.asarray(x, dtype=float)
    n = x.size
    h = fd_step(x, rel) * 10.0
    f0 = f(x) if f0 is None else f0
    H = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h[i]
        fp, fm = f(x + e), f(x - e)
        H[i, i] = (fp - 2 * f0 + fm) / h[i] ** 2
    for i in range(n):
        for j in range(i + 1, n):
            ei = np.zeros(n)
            ej = np.zeros(n)
            ei[i] = h[i]
            ej[j] = h[j]
            v = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * h[i] * h[j])
            H[i, j] = H[j, i] = v
    return H


def bfgs(
    f,
    x0,
    *,
    ftol: float = 1e-6,
    gtol: float = 1e-5,
    max_iter: int = 100,
    max_eval: int = 500,
    rel_step: float = 1e-4,
    max_step: float = 1.0,
    callback=None,
) -> OptResult:
    """Minimise ``f`` by BFGS with Armijo backtracking.

    ``max_eval`` counts objective+gradient evaluations at new iterates (the
    finite-difference probes are not counted).  Stops when the relative
    decrease of ``f`` falls below ``ftol`` on two consecutive iterations or
    the scaled gradient falls below ``gtol``.  The first trial point of each
    line search moves no coordinate by more than ``max_step * (1 + |x_i|)``.
    """
    x = np.asarray(x0, dtype=float).copy()
    n = x.size
    fx = f(x)
    if not np.isfinite(fx):
        raise FloatingPointError("objective is not finite at the starting point")
    g, curv, _ = fd_gradient(f, x, fx, rel_step)
    n_eval = 1
    d0 = np.where(np.isfinite(curv) & (curv > 0), curv, 1.0)
    Hinv = np.diag(1.0 / np.maximum(d0, 1e-8))
    small = 0
    message = "max_iter reached"
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if not np.all(np.isfinite(g)):
            message = "non-finite gradient"
            break
        if np.max(np.abs(g)) <= gtol * max(1.0, abs(fx)):
            converged, message = True, "gradient below tolerance"
            it -= 1
            break
        p = -Hinv @ g
        slope = g @ p
        if slope >= 0:
            Hinv = np.diag(1.0 / np.maximum(d0, 1e-8))
            p = -Hinv @ g
            slope = g @ p
        cap = max_step * (1.0 + np.abs(x))
        t = float(min(1.0, np.min(cap / np.maximum(np.abs(p), 1e-300))))
        accepted = False
        for _ in range(40):
            xn = x + t * p
            fn = f(xn)
            if np.isfinite(fn) and fn <= fx + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            converged = np.max(np.abs(g)) <= 1e3 * gtol * max(1.0, abs(fx))
            message = "line search failed"
            break
        gn, curv, _ = fd_gradient(f, xn, fn, rel_step)
        n_eval += 1
        s = xn - x
        yv = gn - g
        sy = s @ yv
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            rho = 1.0 / sy
            I = np.eye(n)
            Hinv = (I - rho * np.outer(s, yv)) @ Hinv @ (I - rho * np.outer(yv, s)) + rho * np.outer(s, s)
        rel = (fx - fn) / max(1.0, abs(fn))
        x, fx, g = xn, fn, gn
        if callback is not None:
            callback(x, fx)
        small = small + 1 if rel < ftol else 0
        if small >= 2:
            converged, message = True, "relative change below tolerance"
            break
        if n_eval >= max_eval:
            message = "max_eval reached"
            break
    return OptResult(x, float(fx), g, it, n_eval, converged, message)
