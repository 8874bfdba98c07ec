"""Simulation study and data-analysis pipelines.

Every replicate is driven by ``seed = seed_base + index`` and writes its own
artifacts (tagged with the seed and the config hash).  The aggregate reduce is
sequential in replicate order, and ``manifest.json`` lists every output with
its SHA-256, so two runs of the same config can be compared byte for byte.
Wall-clock times go to ``timing.log``, which the manifest deliberately omits.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, require_projection
from .field import (
    FieldRealization,
    build_field_mesh,
    build_lattice_mesh,
    dense_gp_draw,
    lattice_points,
    write_field_csv,
)
from .inference import (
    FitResult,
    LatentProblem,
    ThetaFull,
    fit_preferential,
    fit_standard,
)
from .movement import Track, simulate_tracks
from .predict import (
    ScoreReport,
    krige,
    predict_preferential,
    quantile_of_differences,
    score,
    score_diffs,
    write_scores,
)
from .projection import UTMScaled
from .records import DataError, read_raw_csv, records_to_tracks, write_tracks_csv

log = logging.getLogger(__name__)

ESTIMATE_NAMES = ("mu", "tau2", "phi", "sigma2", "alpha", "c", "sigma_beta", "sigma_x", "sigma_y", "beta0")
FAILURE_LIMIT = 0.2


class StudyFailed(RuntimeError):
    """More replicates failed than the study tolerates."""


# ------------------------------------------------------------------ helpers


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        return float(x) if np.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, cfg: ExperimentConfig, kind: str, extra: dict | None = None) -> dict:
    """List every file under ``out_dir`` (except the manifest and timing log) with its hash."""
    out_dir = Path(out_dir)
    files = {}
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name not in ("manifest.json", "timing.log"):
            files[p.relative_to(out_dir).as_posix()] = sha256_file(p)
    man = {"kind": kind, "config_hash": cfg.hash(), "config": cfg.to_dict(), "files": files}
    man.update(extra or {})
    write_json(out_dir / "manifest.json", man)
    return man


def subsample_tracks(tracks, per_track: int, seed) -> list[Track]:
    """Uniform subsample without replacement of ``per_track`` points per track, time-ordered."""
    rng = np.random.default_rng(seed)
    out = []
    for tr in tracks:
        n = len(tr)
        if per_track > n:
            raise DataError(f"track {tr.track_id!r} has {n} records, fewer than per_track={per_track}")
        if per_track < 3:
            raise DataError(f"per_track={per_track}: each track needs at least 3 observations")
        idx = np.sort(rng.choice(n, size=per_track, replace=False))
        betas = None if tr.betas is None else tr.betas[idx]
        out.append(Track(tr.times[idx], tr.locations[idx], tr.responses[idx], betas, 0, tr.track_id))
    return out


def study_mesh(cfg: ExperimentConfig):
    return build_field_mesh(cfg.protocol.domain, cfg.fit.mesh_spacing, cfg.margin)


def _fit_report(fit: FitResult, seed, cfg_hash) -> dict:
    rep = fit.report()
    rep.update({"seed": seed, "config_hash": cfg_hash})
    return rep


def fit_both(tracks, mesh, cfg: ExperimentConfig, h=None):
    """Standard then preferential fit started at the configured parameters."""
    opts = cfg.fit.options()
    std = fit_standard(tracks, cfg.field, fixed=set(cfg.fit.standard_fixed), opts=opts)
    prob = LatentProblem(tracks, mesh, h)
    pref = fit_preferential(prob, mesh, ThetaFull(cfg.field, cfg.movement), fixed=set(cfg.fit.fixed), opts=opts)
    return std, pref, prob


# --------------------------------------------------------------- simulation


def simulate_replicate(cfg: ExperimentConfig, seed: int):
    """Field on the generation grid plus tracks, all from ``seed``."""
    rows, cols = cfg.study.generation_dims
    gen = build_lattice_mesh(cfg.protocol.domain, rows, cols)
    S = dense_gp_draw(gen.vertices, cfg.field, seed)
    real = FieldRealization(S, gen)
    rng = np.random.default_rng([int(seed), 1])
    tracks = simulate_tracks(real, cfg.movement, cfg.field, cfg.protocol, rng)
    return real, tracks


@dataclass
class ReplicateOutcome:
    index: int
    seed: int
    ok: bool
    error: str | None = None
    truth: np.ndarray | None = None
    pred: dict = field(default_factory=dict)
    estimates: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    seconds: float = 0.0


def run_replicate(cfg: ExperimentConfig, index: int, out_dir=None) -> ReplicateOutcome:
    seed = int(cfg.study.seed_base) + int(index)
    t0 = time.perf_counter()
    try:
        real, tracks = simulate_replicate(cfg, seed)
        mesh = study_mesh(cfg)
        targets = lattice_points(cfg.protocol.domain, *cfg.study.lattice_dims)
        truth = cfg.field.mu + real(targets)
        std, pref, prob = fit_both(tracks, mesh, cfg)
        g_pref = predict_preferential(pref, prob, mesh, targets)
        g_std = krige(std.theta, tracks, targets)
        if not np.all(g_pref.valid):
            raise RuntimeError("prediction lattice is not inside the fitting mesh")
    except (ArithmeticError, ValueError, np.linalg.LinAlgError, RuntimeError) as exc:
        log.warning("replicate %d (seed %d) failed: %s", index, seed, exc)
        return ReplicateOutcome(index, seed, False, f"{type(exc).__name__}: {exc}",
                                seconds=time.perf_counter() - t0)
    cfg_hash = cfg.hash()
    reports = {"standard": _fit_report(std, seed, cfg_hash), "preferential": _fit_report(pref, seed, cfg_hash)}
    if out_dir is not None:
        d = Path(out_dir) / f"replicate_{index:03d}"
        d.mkdir(parents=True, exist_ok=True)
        write_tracks_csv(tracks, d / "tracks.csv")
        write_field_csv(real, d / "field.csv")
        g_pref.to_csv(d / "pred_preferential.csv")
        g_std.to_csv(d / "pred_standard.csv")
        _write_truth(d / "truth.csv", targets, truth)
        write_json(d / "fit_standard.json", reports["standard"])
        write_json(d / "fit_preferential.json", reports["preferential"])
        write_json(d / "replicate.json", {
            "index": index, "seed": seed, "config_hash": cfg_hash,
            "n_obs": [len(t) for t in tracks], "reflections": [t.reflections for t in tracks],
        })
    est = {"standard": std.estimates(), "preferential": pref.estimates()}
    return ReplicateOutcome(index, seed, True, None, truth,
                            {"preferential": g_pref, "standard": g_std}, est, reports,
                            time.perf_counter() - t0)


def _write_truth(path, locations, values):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "value"])
        for (x, y), v in zip(locations, values):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(v))])


def _run_all(fn, cfg, indices, out_dir, threads: int):
    if threads <= 1 or len(indices) <= 1:
        return [fn(cfg, i, out_dir) for i in indices]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        futs = [pool.submit(fn, cfg, i, out_dir) for i in indices]
        return [f.result() for f in futs]


def _estimate_table(path, outcomes, models=("standard", "preferential")):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["replicate", "seed", "model", *ESTIMATE_NAMES])
        for o in outcomes:
            for m in models:
                e = o.estimates[m]
                w.writerow([o.index, o.seed, m] + [repr(float(e[n])) if n in e else "" for n in ESTIMATE_NAMES])


def _write_quantiles(path, locations, qs, qvals):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", *[f"q{q:g}" for q in qs]])
        for i, (x, y) in enumerate(locations):
            w.writerow([repr(float(x)), repr(float(y))] + [repr(float(v)) for v in qvals[:, i]])


@dataclass
class StudyResult:
    out_dir: Path | None
    outcomes: list
    pref_scores: ScoreReport | None
    std_scores: ScoreReport | None
    diffs: dict | None
    manifest: dict | None
    failed: list

    @property
    def ok(self) -> list:
        return [o for o in self.outcomes if o.ok]

    def estimates(self, model: str, name: str) -> np.ndarray:
        return np.array([o.estimates[model][name] for o in self.ok])


def _check_failures(outcomes):
    failed = [o for o in outcomes if not o.ok]
    if len(failed) > FAILURE_LIMIT * len(outcomes):
        raise StudyFailed(
            f"{len(failed)} of {len(outcomes)} replicates failed (limit {FAILURE_LIMIT:.0%}): "
            + "; ".join(f"seed {o.seed}: {o.error}" for o in failed[:5])
        )
    return failed


def run_simulation_study(cfg: ExperimentConfig, out_dir=None, *, threads: int = 1) -> StudyResult:
    """Simulate, fit both models, predict on the lattice and score, per replicate."""
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    n = int(cfg.study.replicate_count)
    outcomes = _run_all(run_replicate, cfg, list(range(n)), out_dir, threads)
    outcomes.sort(key=lambda o: o.index)
    failed = [o for o in outcomes if not o.ok]
    ok = [o for o in outcomes if o.ok]
    pref_s = std_s = diffs = None
    manifest = None
    if ok:
        truth = np.stack([o.truth for o in ok])
        Pm = np.stack([o.pred["preferential"].mean for o in ok])
        Pv = np.stack([o.pred["preferential"].variance for o in ok])
        Nm = np.stack([o.pred["standard"].mean for o in ok])
        Nv = np.stack([o.pred["standard"].variance for o in ok])
        pref_s = score(truth, Pm, Pv, cfg.rmspe_convention)
        std_s = score(truth, Nm, Nv, cfg.rmspe_convention)
        diffs = score_diffs(pref_s, std_s)
    if out_dir is not None:
        summary = _summary(cfg, outcomes, diffs)
        if ok:
            locs = ok[0].pred["preferential"].locations
            write_scores(out_dir / "scores.json", out_dir / "scores_locations.csv", locs, pref_s, std_s)
            _estimate_table(out_dir / "estimates.csv", ok)
            qs = cfg.analysis.quantiles
            qv = np.atleast_2d(quantile_of_differences(Pm, Nm, qs))
            _write_quantiles(out_dir / "prediction_diff_quantiles.csv", locs, qs, qv)
        write_json(out_dir / "study.json", summary)
        with open(out_dir / "timing.log", "w") as fh:
            for o in outcomes:
                fh.write(f"replicate {o.index} seed {o.seed} {o.seconds:.2f}s {'ok' if o.ok else 'failed'}\n")
        manifest = write_manifest(out_dir, cfg, "simulation_study", {
            "seeds": [o.seed for o in outcomes],
            "failed": [{"seed": o.seed, "error": o.error} for o in failed],
        })
    _check_failures(outcomes)
    return StudyResult(out_dir, outcomes, pref_s, std_s, diffs, manifest, failed)


def _summary(cfg, outcomes, diffs) -> dict:
    ok = [o for o in outcomes if o.ok]
    means = {}
    for m in ("standard", "preferential"):
        names = [n for n in ESTIMATE_NAMES if ok and n in ok[0].estimates[m]]
        means[m] = {n: float(np.mean([o.estimates[m][n] for o in ok])) for n in names}
    out = {
        "config_hash": cfg.hash(),
        "replicates": len(outcomes),
        "succeeded": len(ok),
        "failed": [{"index": o.index, "seed": o.seed, "error": o.error} for o in outcomes if not o.ok],
        "mean_estimates": means,
        "rmspe_convention": cfg.rmspe_convention,
        "replicate_dirs": {str(o.seed): f"replicate_{o.index:03d}" for o in ok},
        "fit_converged": {
            str(o.seed): {m: o.reports[m]["converged"] for m in ("standard", "preferential")} for o in ok
        },
    }
    if diffs is not None:
        out["score_summary"] = {
            "mean_mign_diff": float(np.mean(diffs["mign"])),
            "frac_mign_diff_negative": float(np.mean(diffs["mign"] < 0)),
            "mean_lign_diff": float(np.mean(diffs["lign"])),
            "mean_rmspe_diff": float(np.mean(diffs["rmspe"])),
        }
    return out


# ------------------------------------------------------------ data analysis


def analysis_targets(cfg: ExperimentConfig, tracks) -> tuple[np.ndarray, tuple]:
    a = cfg.analysis
    if a.lattice_domain is not None:
        dom = tuple(float(v) for v in a.lattice_domain)
    else:
        X = np.concatenate([t.locations for t in tracks])
        lo, hi = X.min(axis=0), X.max(axis=0)
        dom = (lo[0], hi[0], lo[1], hi[1])
    return lattice_points(dom, *a.lattice_dims), dom


def analysis_mesh(cfg: ExperimentConfig, tracks, lattice_domain):
    """Lattice over the data (padded by two gradient steps) and the prediction lattice, plus margin."""
    h = float(cfg.fit.mesh_spacing)
    X = np.concatenate([t.locations for t in tracks])
    lo = np.minimum(X.min(axis=0) - 2 * h, [lattice_domain[0], lattice_domain[2]])
    hi = np.maximum(X.max(axis=0) + 2 * h, [lattice_domain[1], lattice_domain[3]])
    return build_field_mesh((lo[0], hi[0], lo[1], hi[1]), h, cfg.margin)


def _analysis_replicate(cfg: ExperimentConfig, index: int, out_dir, tracks=None):
    seed = int(cfg.study.seed_base) + int(index)
    t0 = time.perf_counter()
    sub = subsample_tracks(tracks, cfg.analysis.per_track, seed)
    targets, dom = analysis_targets(cfg, tracks)
    mesh = analysis_mesh(cfg, tracks, dom)
    try:
        std, pref, prob = fit_both(sub, mesh, cfg)
        g_pref = predict_preferential(pref, prob, mesh, targets)
        g_std = krige(std.theta, sub, targets)
    except (ArithmeticError, ValueError, np.linalg.LinAlgError, RuntimeError) as exc:
        log.warning("analysis replicate %d (seed %d) failed: %s", index, seed, exc)
        return ReplicateOutcome(index, seed, False, f"{type(exc).__name__}: {exc}",
                                seconds=time.perf_counter() - t0)
    cfg_hash = cfg.hash()
    reports = {"standard": _fit_report(std, seed, cfg_hash), "preferential": _fit_report(pref, seed, cfg_hash)}
    if out_dir is not None:
        d = Path(out_dir) / f"replicate_{index:03d}"
        d.mkdir(parents=True, exist_ok=True)
        write_tracks_csv(sub, d / "tracks.csv")
        g_pref.to_csv(d / "pred_preferential.csv")
        g_std.to_csv(d / "pred_standard.csv")
        write_json(d / "fit_standard.json", reports["standard"])
        write_json(d / "fit_preferential.json", reports["preferential"])
        write_json(d / "replicate.json", {"index": index, "seed": seed, "config_hash": cfg_hash})
    est = {"standard": std.estimates(), "preferential": pref.estimates()}
    return ReplicateOutcome(index, seed, True, None, None, {"preferential": g_pref, "standard": g_std},
                            est, reports, time.perf_counter() - t0)


def _analysis_worker(args):
    cfg, index, out_dir, tracks = args
    return _analysis_replicate(cfg, index, out_dir, tracks)


def run_data_analysis(source, cfg: ExperimentConfig, out_dir=None, *, threads: int = 1) -> StudyResult:
    """Project, subsample, fit both models and compare predictions per replicate.

    ``source`` is a raw-record CSV path or an already projected track list.
    """
    if isinstance(source, (str, Path)):
        a = require_projection(cfg)
        proj = UTMScaled(a.zone, a.scale, a.false_northing)
        tracks = records_to_tracks(read_raw_csv(source), proj, a.time_scale)
    else:
        tracks = list(source)
    for tr in tracks:
        if len(tr) < cfg.analysis.per_track:
            raise DataError(
                f"track {tr.track_id!r} has {len(tr)} records; analysis.per_track={cfg.analysis.per_track} "
                "needs at least that many"
            )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_tracks_csv(tracks, out_dir / "tracks_projected.csv")
    n = int(cfg.analysis.replicates)
    jobs = [(cfg, i, out_dir, tracks) for i in range(n)]
    if threads <= 1 or n <= 1:
        outcomes = [_analysis_worker(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(_analysis_worker, jobs))
    ok = [o for o in outcomes if o.ok]
    failed = [o for o in outcomes if not o.ok]
    manifest = None
    if out_dir is not None:
        if ok:
            _estimate_table(out_dir / "estimates.csv", ok)
            Pm = np.stack([o.pred["preferential"].mean for o in ok])
            Nm = np.stack([o.pred["standard"].mean for o in ok])
            qs = cfg.analysis.quantiles
            qv = np.atleast_2d(quantile_of_differences(Pm, Nm, qs))
            _write_quantiles(out_dir / "prediction_diff_quantiles.csv", ok[0].pred["preferential"].locations, qs, qv)
        write_json(out_dir / "analysis.json", _summary(cfg, outcomes, None))
        with open(out_dir / "timing.log", "w") as fh:
            for o in outcomes:
                fh.write(f"replicate {o.index} seed {o.seed} {o.seconds:.2f}s {'ok' if o.ok else 'failed'}\n")
        manifest = write_manifest(out_dir, cfg, "data_analysis", {
            "seeds": [o.seed for o in outcomes],
            "failed": [{"seed": o.seed, "error": o.error} for o in failed],
        })
    _check_failures(outcomes)
    return StudyResult(out_dir, outcomes, None, None, None, manifest, failed)
