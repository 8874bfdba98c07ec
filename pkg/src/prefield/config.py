"""Experiment configuration (TOML, or JSON) and its canonical hash.

Layout::

    [field]      mu, tau2, phi, sigma2
    [movement]   alpha, c, sigma_beta, sigma (scalar or [sx, sy]), beta0, beta0_sd
    [protocol]   domain, n_raw, burn_in, thin, lam, n_tracks
    [study]      replicate_count, seed_base, generation_dims, lattice_dims
    [fit]        mesh_spacing, margin, fixed, standard_fixed, inner_tol, ...
    [analysis]   zone, scale, false_northing, time_scale, per_track,
                 replicates, lattice_domain, lattice_dims
    [score]      rmspe_convention

Unknown keys are rejected so that typos do not silently fall back to
defaults.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, fields, replace
from dataclasses import field as dc_field
from pathlib import Path

from .field import FieldParams
from .inference import DEFAULT_FIXED, PARAM_NAMES, FitOptions
from .movement import MovementParams, SimProtocol, diag_sigma
from .predict import RMSPE_CONVENTIONS

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass(frozen=True)
class StudySettings:
    replicate_count: int = 20
    seed_base: int = 0
    generation_dims: tuple = (51, 51)
    lattice_dims: tuple = (26, 26)


@dataclass(frozen=True)
class FitSettings:
    mesh_spacing: float = 12.0
    margin: float | None = None  # None: twice the field scale phi
    fixed: tuple = tuple(sorted(DEFAULT_FIXED))
    standard_fixed: tuple = ("tau2",)
    inner_tol: float = 1e-8
    inner_max_iter: int = 100
    ftol: float = 1e-6
    gtol: float = 1e-5
    max_iter: int = 100
    max_eval: int = 500
    fd_rel_step: float = 1e-4
    compute_covariance: bool = False

    def options(self) -> FitOptions:
        return FitOptions(
            inner_tol=self.inner_tol, inner_max_iter=self.inner_max_iter, ftol=self.ftol, gtol=self.gtol,
            max_iter=self.max_iter, max_eval=self.max_eval, fd_rel_step=self.fd_rel_step,
            compute_covariance=self.compute_covariance,
        )


@dataclass(frozen=True)
class AnalysisSettings:
    zone: int | None = None
    scale: float | None = None
    false_northing: float = 0.0
    time_scale: float = 1.0
    per_track: int = 40
    replicates: int = 50
    lattice_domain: tuple | None = None  # None: padded bounding box of the data
    lattice_dims: tuple = (26, 26)
    quantiles: tuple = (0.25, 0.5, 0.75)


@dataclass(frozen=True)
class ExperimentConfig:
    field: FieldParams = dc_field(default_factory=FieldParams)
    movement: MovementParams = dc_field(default_factory=MovementParams)
    protocol: SimProtocol = dc_field(default_factory=SimProtocol)
    study: StudySettings = dc_field(default_factory=StudySettings)
    fit: FitSettings = dc_field(default_factory=FitSettings)
    analysis: AnalysisSettings = dc_field(default_factory=AnalysisSettings)
    rmspe_convention: str = "paper"

    @property
    def margin(self) -> float:
        return 2.0 * self.field.phi if self.fit.margin is None else float(self.fit.margin)

    def to_dict(self) -> dict:
        mv = self.movement
        S = mv.Sigma_array
        return {
            "field": {k: getattr(self.field, k) for k in ("mu", "tau2", "kappa", "phi", "sigma2")},
            "movement": {
                "alpha": mv.alpha, "c": mv.c, "sigma_beta": mv.sigma_beta,
                "sigma": [float(S[0, 0]), float(S[1, 1])], "beta0": mv.beta0, "beta0_sd": mv.beta0_sd,
            },
            "protocol": {
                "domain": list(self.protocol.domain), "n_raw": self.protocol.n_raw,
                "burn_in": self.protocol.burn_in, "thin": self.protocol.thin,
                "lam": self.protocol.lam, "n_tracks": self.protocol.n_tracks,
            },
            "study": _plain(asdict(self.study)),
            "fit": _plain(asdict(self.fit)),
            "analysis": _plain(asdict(self.analysis)),
            "score": {"rmspe_convention": self.rmspe_convention},
        }

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def with_seed(self, seed: int | None) -> "ExperimentConfig":
        if seed is None:
            return self
        return replace(self, study=replace(self.study, seed_base=int(seed)))

    def with_convention(self, convention: str | None) -> "ExperimentConfig":
        if convention is None:
            return self
        if convention not in RMSPE_CONVENTIONS:
            raise ConfigError(f"rmspe convention must be one of {RMSPE_CONVENTIONS}")
        return replace(self, rmspe_convention=convention)


def _plain(d):
    if isinstance(d, dict):
        return {k: _plain(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_plain(v) for v in d]
    return d


def config_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(blob.encode()).hexdigest()


def _take(section: dict, allowed, name: str) -> dict:
    if not isinstance(section, dict):
        raise ConfigError(f"[{name}] must be a table")
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"[{name}]: unknown key(s) {sorted(unknown)}; allowed {sorted(allowed)}")
    return dict(section)


def _tuple_fields(d: dict, names) -> dict:
    for n in names:
        if n in d and d[n] is not None:
            if not isinstance(d[n], (list, tuple)):
                raise ConfigError(f"{n} must be a list")
            d[n] = tuple(d[n])
    return d


def from_dict(raw: dict) -> ExperimentConfig:
    """Build a validated config; raises :class:`ConfigError` on any problem."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a table/object")
    top = {"field", "movement", "protocol", "study", "fit", "analysis", "score"}
    unknown = set(raw) - top
    if unknown:
        raise ConfigError(f"unknown section(s) {sorted(unknown)}; allowed {sorted(top)}")
    try:
        f = _take(raw.get("field", {}), ("mu", "tau2", "kappa", "phi", "sigma2"), "field")
        fp = FieldParams(**f)

        m = _take(raw.get("movement", {}), ("alpha", "c", "sigma_beta", "sigma", "beta0", "beta0_sd"), "movement")
        if "sigma" in m:
            s = m.pop("sigma")
            s = list(s) if isinstance(s, (list, tuple)) else [s]
            if len(s) not in (1, 2):
                raise ConfigError("movement.sigma must be a scalar or [sx, sy]")
            m["Sigma"] = diag_sigma(*map(float, s))
        mp = MovementParams(**m)

        p = _take(raw.get("protocol", {}), ("domain", "n_raw", "burn_in", "thin", "lam", "n_tracks"), "protocol")
        _tuple_fields(p, ["domain"])
        if "domain" in p and len(p["domain"]) != 4:
            raise ConfigError("protocol.domain must be [x0, x1, y0, y1]")
        proto = SimProtocol(**p)

        st = _tuple_fields(_take(raw.get("study", {}), [x.name for x in fields(StudySettings)], "study"),
                           ["generation_dims", "lattice_dims"])
        study = StudySettings(**st)
        if int(study.replicate_count) < 1:
            raise ConfigError("study.replicate_count must be >= 1")
        for n in ("generation_dims", "lattice_dims"):
            dims = getattr(study, n)
            if len(dims) != 2 or min(dims) < 2:
                raise ConfigError(f"study.{n} must be two integers >= 2")

        ft = _tuple_fields(_take(raw.get("fit", {}), [x.name for x in fields(FitSettings)], "fit"),
                           ["fixed", "standard_fixed"])
        fit = FitSettings(**ft)
        bad = set(fit.fixed) - set(PARAM_NAMES) - {"kappa"}
        bad |= set(fit.standard_fixed) - {"mu", "tau2", "phi", "sigma2", "kappa"}
        if bad:
            raise ConfigError(f"fit: unknown parameter(s) in fixed masks: {sorted(bad)}")
        if not fit.mesh_spacing > 0 or (fit.margin is not None and fit.margin < 0):
            raise ConfigError("fit.mesh_spacing must be > 0 and fit.margin >= 0")

        an = _tuple_fields(_take(raw.get("analysis", {}), [x.name for x in fields(AnalysisSettings)], "analysis"),
                           ["lattice_domain", "lattice_dims", "quantiles"])
        analysis = AnalysisSettings(**an)
        if analysis.per_track < 3:
            raise ConfigError("analysis.per_track must be >= 3")

        sc = _take(raw.get("score", {}), ("rmspe_convention",), "score")
        conv = sc.get("rmspe_convention", "paper")
        if conv not in RMSPE_CONVENTIONS:
            raise ConfigError(f"score.rmspe_convention must be one of {RMSPE_CONVENTIONS}")
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(fp, mp, proto, study, fit, analysis, conv)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            raw = json.loads(text)
        else:
            raw = tomllib.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: parse error: {exc}") from exc
    return from_dict(raw)


def require_projection(cfg: ExperimentConfig):
    a = cfg.analysis
    if a.zone is None or a.scale is None:
        raise ConfigError("analysis.zone and analysis.scale are required to project raw records")
    return a
