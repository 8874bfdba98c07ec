"""Preferentially sampled spatial fields: simulation, Laplace-approximated
likelihood fitting, prediction and scoring."""

from .field import (
    FieldParams,
    FieldRealization,
    Mesh,
    assemble_fem,
    build_field_mesh,
    build_lattice_mesh,
    build_precision,
    dense_gp_draw,
    lattice_points,
    matern_cov,
)
from .inference import (
    FitOptions,
    FitResult,
    LatentProblem,
    LatentState,
    ThetaFull,
    fit_preferential,
    fit_standard,
    joint_nll,
    laplace_nll,
)
from .movement import MovementParams, SimProtocol, Track, behaviour_weight, simulate_track, simulate_tracks
from .predict import PredictionGrid, ScoreReport, krige, lign, mign, predict_preferential, rmspe, score_diffs
from .projection import UTMScaled, project_utm_scaled

__version__ = "0.1.0"
