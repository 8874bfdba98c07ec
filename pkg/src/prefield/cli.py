"""Command-line entry point ``prefield``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ._linalg import NotPositiveDefiniteError
from .config import ConfigError, ExperimentConfig, load_config, require_projection
from .field import lattice_points, write_field_csv
from .inference import FitResult, InnerSolveError, LatentProblem, ThetaFull, laplace_nll, theta_from_dict
from .predict import PredictionGrid, krige, predict_preferential, score, write_scores
from .projection import UTMScaled
from .records import (
    DataError,
    read_raw_csv,
    read_tracks_csv,
    records_to_tracks,
    tracks_to_records,
    write_raw_csv,
    write_tracks_csv,
)
from .study import (
    StudyFailed,
    analysis_mesh,
    analysis_targets,
    fit_both,
    run_data_analysis,
    run_simulation_study,
    simulate_replicate,
    study_mesh,
    write_json,
    write_manifest,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("prefield")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML (or .json) configuration file")
    common.add_argument("--seed", type=int, help="overrides study.seed_base")
    common.add_argument("--out-dir", type=Path, default=Path("prefield_out"))
    common.add_argument("--threads", type=int, default=1, help="worker processes for replicates")
    common.add_argument("--rmspe-convention", choices=("paper", "rmse"))
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="prefield", description="Preferentially sampled field toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="draw a field and tracks for one seed")
    f = sub.add_parser("fit", parents=[common], help="fit standard and preferential models to tracks")
    _add_inputs(f)
    pr = sub.add_parser("predict", parents=[common], help="predict on the lattice from fitted models")
    _add_inputs(pr)
    pr.add_argument("--fit-dir", type=Path, help="directory holding fit_*.json (default: out-dir)")
    s = sub.add_parser("score", parents=[common], help="score predictions of a study directory")
    s.add_argument("--input", type=Path, required=True, help="study output directory")
    sub.add_parser("experiment", parents=[common], help="run the simulation study")
    a = sub.add_parser("analyze", parents=[common], help="run the data analysis on raw records")
    a.add_argument("--raw", type=Path, required=True, help="CSV track_id,timestamp,longitude,latitude,response")
    return p


def _add_inputs(p):
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--tracks", type=Path, help="projected tracks CSV track_id,t,x,y,response")
    g.add_argument("--raw", type=Path, help="raw records CSV (projected with the analysis settings)")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return cfg.with_seed(args.seed).with_convention(args.rmspe_convention)


def _load_tracks(args, cfg):
    if args.tracks is not None:
        return read_tracks_csv(args.tracks)
    a = require_projection(cfg)
    return records_to_tracks(read_raw_csv(args.raw), UTMScaled(a.zone, a.scale, a.false_northing), a.time_scale)


def _mesh_and_targets(cfg, tracks):
    if cfg.analysis.lattice_domain is None and _inside_protocol(cfg, tracks):
        return study_mesh(cfg), lattice_points(cfg.protocol.domain, *cfg.study.lattice_dims)
    targets, dom = analysis_targets(cfg, tracks)
    return analysis_mesh(cfg, tracks, dom), targets


def _inside_protocol(cfg, tracks) -> bool:
    x0, x1, y0, y1 = cfg.protocol.domain
    X = np.concatenate([t.locations for t in tracks])
    return bool(np.all((X[:, 0] >= x0) & (X[:, 0] <= x1) & (X[:, 1] >= y0) & (X[:, 1] <= y1)))


def cmd_simulate(args, cfg):
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    seed = int(cfg.study.seed_base)
    real, tracks = simulate_replicate(cfg, seed)
    write_field_csv(real, out / "field.csv")
    write_tracks_csv(tracks, out / "tracks.csv")
    a = cfg.analysis
    if a.zone is not None and a.scale is not None:
        proj = UTMScaled(a.zone, a.scale, a.false_northing)
        write_raw_csv(tracks_to_records(tracks, proj, a.time_scale), out / "records.csv")
    write_json(out / "simulation.json", {
        "seed": seed, "config_hash": cfg.hash(),
        "n_obs": [len(t) for t in tracks], "reflections": [t.reflections for t in tracks],
    })
    write_manifest(out, cfg, "simulate", {"seed": seed})


def cmd_fit(args, cfg):
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    tracks = _load_tracks(args, cfg)
    mesh, _ = _mesh_and_targets(cfg, tracks)
    std, pref, _ = fit_both(tracks, mesh, cfg)
    for name, fr in (("standard", std), ("preferential", pref)):
        rep = fr.report()
        rep.update({"seed": cfg.study.seed_base, "config_hash": cfg.hash()})
        write_json(out / f"fit_{name}.json", rep)
    (out / "timing.log").write_text(f"standard {std.wall_time:.2f}s\npreferential {pref.wall_time:.2f}s\n")
    write_manifest(out, cfg, "fit")


def _fit_from_json(path, cfg) -> dict:
    try:
        rep = json.loads(Path(path).read_text())
        return {k: float(v) for k, v in rep["estimates"].items()}
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise DataError(f"cannot read fit report {path}: {exc}") from exc


def cmd_predict(args, cfg):
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    fit_dir = args.fit_dir or out
    tracks = _load_tracks(args, cfg)
    mesh, targets = _mesh_and_targets(cfg, tracks)
    est_p = _fit_from_json(fit_dir / "fit_preferential.json", cfg)
    est_s = _fit_from_json(fit_dir / "fit_standard.json", cfg)
    theta = theta_from_dict(est_p, ThetaFull(cfg.field, cfg.movement))
    prob = LatentProblem(tracks, mesh)
    lap = laplace_nll(theta, prob)
    fit = FitResult(theta, lap, lap.nll, [], frozenset(), None, {}, True, 0, 0, "loaded", 0.0)
    g_pref = predict_preferential(fit, prob, mesh, targets, laplace=lap)
    g_std = krige(cfg.field.with_(**{k: est_s[k] for k in ("mu", "tau2", "phi", "sigma2")}), tracks, targets)
    g_pref.to_csv(out / "pred_preferential.csv")
    g_std.to_csv(out / "pred_standard.csv")
    write_manifest(out, cfg, "predict")


def _read_truth(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([float(r["value"]) for r in csv.DictReader(fh)])


def cmd_score(args, cfg):
    src = args.input
    dirs = sorted(p for p in src.glob("replicate_*") if p.is_dir())
    if not dirs:
        raise DataError(f"{src}: no replicate_* directories")
    truth, Pm, Pv, Nm, Nv = [], [], [], [], []
    for d in dirs:
        if not (d / "truth.csv").exists():
            raise DataError(f"{d}: truth.csv missing (scoring needs known truth)")
        t = _read_truth(d / "truth.csv")
        gp = PredictionGrid.from_csv(d / "pred_preferential.csv")
        gs = PredictionGrid.from_csv(d / "pred_standard.csv")
        if not (len(t) == len(gp) == len(gs)):
            raise DataError(f"{d}: truth and prediction files are not aligned")
        truth.append(t)
        Pm.append(gp.mean)
        Pv.append(gp.variance)
        Nm.append(gs.mean)
        Nv.append(gs.variance)
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    ps = score(np.stack(truth), np.stack(Pm), np.stack(Pv), cfg.rmspe_convention)
    ss = score(np.stack(truth), np.stack(Nm), np.stack(Nv), cfg.rmspe_convention)
    write_scores(out / "scores.json", out / "scores_locations.csv", gp.locations, ps, ss)
    write_manifest(out, cfg, "score", {"input": str(src), "replicate_dirs": [d.name for d in dirs]})


def cmd_experiment(args, cfg):
    run_simulation_study(cfg, args.out_dir, threads=args.threads)


def cmd_analyze(args, cfg):
    run_data_analysis(args.raw, cfg, args.out_dir, threads=args.threads)


COMMANDS = {
    "simulate": cmd_simulate, "fit": cmd_fit, "predict": cmd_predict, "score": cmd_score,
    "experiment": cmd_experiment, "analyze": cmd_analyze,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (StudyFailed, InnerSolveError, NotPositiveDefiniteError, np.linalg.LinAlgError,
            ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # remaining ValueErrors come from invariant checks on the input data
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
