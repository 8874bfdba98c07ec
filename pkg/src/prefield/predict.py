"""Field prediction under both models and the scores used to compare them.

Scores follow the usual ignorance-score conventions: lower is better, and
differences are taken preferential minus standard, so a negative value
favours the preferential model.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve

from .field import FieldParams, Mesh, dense_cholesky, interp_weights, matern_cov, _pairwise_distances
from .inference import FitResult, LaplaceResult, LatentProblem, laplace_nll

MODEL_TAGS = ("preferential", "standard")
RMSPE_CONVENTIONS = ("paper", "rmse")


@dataclass(frozen=True, eq=False)
class PredictionGrid:
    """Point predictions and variances at target locations.

    ``valid`` marks targets that could be predicted (inside the mesh hull for
    the preferential model); ``mean`` and ``variance`` are ``nan`` elsewhere.
    """

    locations: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    model_tag: str
    valid: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.locations)
        if self.model_tag not in MODEL_TAGS:
            raise ValueError(f"model_tag must be one of {MODEL_TAGS}, got {self.model_tag!r}")
        if np.shape(self.mean) != (n,) or np.shape(self.variance) != (n,):
            raise ValueError(f"mean/variance must have length {n} (one per location)")
        valid = np.ones(n, bool) if self.valid is None else np.asarray(self.valid, bool)
        object.__setattr__(self, "valid", valid)
        v = np.asarray(self.variance)[valid]
        if np.any(~(v > 0)):
            raise ValueError("prediction variance must be strictly positive at valid targets")

    def __len__(self):
        return len(self.locations)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "mean", "variance", "model_tag"])
            for (x, y), m, v in zip(self.locations, self.mean, self.variance):
                w.writerow([repr(float(x)), repr(float(y)), repr(float(m)), repr(float(v)), self.model_tag])

    @classmethod
    def from_csv(cls, path) -> "PredictionGrid":
        rows = list(csv.DictReader(open(path, newline="")))
        if not rows:
            raise ValueError(f"{path}: no rows")
        tags = {r["model_tag"] for r in rows}
        if len(tags) != 1:
            raise ValueError(f"{path}: mixed model tags {sorted(tags)}")
        loc = np.array([[float(r["x"]), float(r["y"])] for r in rows])
        mean = np.array([float(r["mean"]) for r in rows])
        var = np.array([float(r["variance"]) for r in rows])
        return cls(loc, mean, var, tags.pop(), np.isfinite(mean) & np.isfinite(var))


# ------------------------------------------------------------- prediction


def _selected_covariance(result: LaplaceResult, idx: np.ndarray, dim: int) -> dict:
    """Columns of the inverse Hessian for the latent indices ``idx``."""
    cols = {}
    for j in idx:
        e = np.zeros(dim)
        e[j] = 1.0
        cols[int(j)] = result.factor.solve(e)
    return cols


def predict_preferential(fit: FitResult, tracks, mesh: Mesh, targets, *, h: float | None = None,
                         laplace: LaplaceResult | None = None) -> PredictionGrid:
    """Mode-based prediction with Laplace variances.

    The mean is ``mu_hat`` plus the mode field interpolated at the targets;
    the variance propagates the joint 3-vertex block of the inverse Hessian
    through the interpolation weights.  Targets outside the mesh are flagged
    invalid rather than raising.
    """
    targets = np.asarray(targets, dtype=float).reshape(-1, 2)
    prob = tracks if isinstance(tracks, LatentProblem) else LatentProblem(list(tracks), mesh, h)
    if laplace is None:
        laplace = fit.laplace
    if laplace is None or laplace.factor is None or laplace.mode.s.size != prob.m:
        laplace = laplace_nll(fit.theta, prob, warm=None if laplace is None else laplace.mode)
    if laplace.factor is None:
        raise np.linalg.LinAlgError("Hessian at the mode is not positive definite; no variances")
    inside = mesh.contains(targets)
    n = len(targets)
    mean = np.full(n, np.nan)
    var = np.full(n, np.nan)
    if np.any(inside):
        idx, w = interp_weights(mesh, targets[inside])
        need = np.unique(idx[w != 0.0])
        cols = _selected_covariance(laplace, need, prob.dim)
        s = laplace.mode.s
        mean[inside] = fit.theta.field.mu + np.sum(w * s[idx], axis=1)
        v = np.zeros(len(idx))
        for k, (ii, ww) in enumerate(zip(idx, w)):
            nz = [a for a in range(3) if ww[a] != 0.0]
            v[k] = sum(ww[a] * ww[b] * cols[int(ii[a])][int(ii[b])] for a in nz for b in nz)
        var[inside] = v
    return PredictionGrid(targets, mean, var, "preferential", inside)


def krige(fp: FieldParams, tracks, targets) -> PredictionGrid:
    """Simple kriging with known mean and Matérn covariance.

    Mean ``mu + c^T (C + tau2 I)^-1 (y - mu)``, variance
    ``sigma2 - c^T (C + tau2 I)^-1 c``.
    """
    tracks = list(tracks)
    targets = np.asarray(targets, dtype=float).reshape(-1, 2)
    X = np.concatenate([t.locations for t in tracks])
    y = np.concatenate([t.responses for t in tracks])
    C = matern_cov(_pairwise_distances(X), fp) + fp.tau2 * np.eye(len(y))
    L = dense_cholesky(C, fp.sigma2)
    diff = targets[:, None, :] - X[None, :, :]
    c = matern_cov(np.sqrt(np.sum(diff**2, axis=-1)), fp)
    alpha = cho_solve((L, True), y - fp.mu)
    mean = fp.mu + c @ alpha
    B = cho_solve((L, True), c.T)
    var = fp.sigma2 - np.sum(c * B.T, axis=1)
    # exact interpolation with tau2 = 0 can round to tiny negatives
    var = np.maximum(var, np.finfo(float).tiny)
    return PredictionGrid(targets, mean, var, "standard")


# ---------------------------------------------------------------- scores


def _stack(a, name) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError(f"{name} must be (replicates, locations), got shape {a.shape}")
    return a


def _aligned(truth, pred, var=None):
    S = _stack(truth, "truth")
    P = _stack(pred, "predictions")
    if S.shape != P.shape:
        raise ValueError(f"truth {S.shape} and predictions {P.shape} are not aligned")
    if not (np.all(np.isfinite(S)) and np.all(np.isfinite(P))):
        raise ValueError("truth and predictions must be finite (drop invalid targets before scoring)")
    if var is None:
        return S, P
    V = _stack(var, "variances")
    if V.shape != S.shape:
        raise ValueError(f"variances {V.shape} not aligned with truth {S.shape}")
    if not np.all(np.isfinite(V) & (V > 0)):
        raise ValueError("prediction variances must be finite and positive")
    return S, P, V


def rmspe(truth, pred, convention: str = "paper") -> np.ndarray:
    """Per-location prediction error over replicates.

    ``convention="paper"`` averages ``sqrt((S - S_hat)^2)`` over replicates,
    i.e. the mean absolute error; ``"rmse"`` takes the square root of the mean
    squared error instead.
    """
    S, P = _aligned(truth, pred)
    e2 = (S - P) ** 2
    if convention == "paper":
        return np.mean(np.sqrt(e2), axis=0)
    if convention == "rmse":
        return np.sqrt(np.mean(e2, axis=0))
    raise ValueError(f"convention must be one of {RMSPE_CONVENTIONS}, got {convention!r}")


def ignorance(truth, pred, var) -> np.ndarray:
    """Gaussian ignorance summand ``e^2 / (2 v) + log sqrt(v)`` (constant dropped)."""
    S, P, V = _aligned(truth, pred, var)
    return (S - P) ** 2 / (2.0 * V) + 0.5 * np.log(V)


def mign(truth, pred, var) -> np.ndarray:
    """Mean ignorance per replicate (average over locations)."""
    return np.mean(ignorance(truth, pred, var), axis=1)


def lign(truth, pred, var) -> np.ndarray:
    """Location ignorance (average over replicates)."""
    return np.mean(ignorance(truth, pred, var), axis=0)


@dataclass(frozen=True, eq=False)
class ScoreReport:
    rmspe: np.ndarray
    mign: np.ndarray
    lign: np.ndarray
    convention: str = "paper"

    def __post_init__(self):
        if np.any(np.asarray(self.rmspe) < 0):
            raise ValueError("rmspe must be non-negative")

    def to_dict(self) -> dict:
        return {
            "rmspe_convention": self.convention,
            "rmspe": _floats(self.rmspe),
            "mign": _floats(self.mign),
            "lign": _floats(self.lign),
        }


def score(truth, pred, var, convention: str = "paper") -> ScoreReport:
    return ScoreReport(rmspe(truth, pred, convention), mign(truth, pred, var), lign(truth, pred, var), convention)


def score_diffs(pref: ScoreReport, std: ScoreReport) -> dict:
    """Preferential-minus-standard differences of each score."""
    if pref.convention != std.convention:
        raise ValueError("score reports use different rmspe conventions")
    return {
        "rmspe": np.asarray(pref.rmspe) - np.asarray(std.rmspe),
        "mign": np.asarray(pref.mign) - np.asarray(std.mign),
        "lign": np.asarray(pref.lign) - np.asarray(std.lign),
    }


def quantile_of_differences(pref_means, std_means, q) -> np.ndarray:
    """Per-location empirical quantile(s) of ``pref - std`` across replicates.

    Linear interpolation between order statistics.  ``q`` may be a scalar or a
    sequence (then one row per quantile).
    """
    P = _stack(pref_means, "preferential predictions")
    N = _stack(std_means, "standard predictions")
    if P.shape != N.shape:
        raise ValueError(f"prediction stacks not aligned: {P.shape} vs {N.shape}")
    q = np.asarray(q, dtype=float)
    if np.any((q < 0) | (q > 1)):
        raise ValueError("quantile levels must lie in [0, 1]")
    return np.quantile(P - N, q, axis=0, method="linear")


def _floats(a) -> list:
    return [None if not np.isfinite(v) else float(v) for v in np.ravel(a)]


def write_scores(path_json, path_csv, locations, pref: ScoreReport, std: ScoreReport) -> None:
    """Score report as JSON plus a per-location CSV for plotting maps."""
    d = score_diffs(pref, std)
    out = {
        "rmspe_convention": pref.convention,
        "preferential": pref.to_dict(),
        "standard": std.to_dict(),
        "diffs": {k: _floats(v) for k, v in d.items()},
        "summary": {
            "mean_mign_diff": float(np.mean(d["mign"])),
            "frac_mign_diff_negative": float(np.mean(d["mign"] < 0)),
            "mean_lign_diff": float(np.mean(d["lign"])),
            "mean_rmspe_diff": float(np.mean(d["rmspe"])),
        },
    }
    Path(path_json).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    with open(path_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "rmspe_pref", "rmspe_std", "rmspe_diff", "lign_pref", "lign_std", "lign_diff"])
        for i, (x, y) in enumerate(np.asarray(locations)):
            w.writerow([repr(float(x)), repr(float(y))] + [repr(float(v)) for v in (
                pref.rmspe[i], std.rmspe[i], d["rmspe"][i], pref.lign[i], std.lign[i], d["lign"][i])])
