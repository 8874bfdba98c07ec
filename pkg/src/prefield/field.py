"""Matérn(κ=2) random fields: lattice meshes, FEM/SPDE precision and a dense oracle.

The sparse path follows the SPDE construction with mass lumping: for a
triangulated domain with lumped mass ``C`` and stiffness ``G``,

    Q = s * (phi^-6 M0 + 3 phi^-4 M1 + 3 phi^-2 M2 + M2 M0^-1 M1)

with ``M0 = C``, ``M1 = G``, ``M2 = G C^-1 G`` and ``s = phi^4 / (8 pi sigma2)``
so that the marginal variance away from the boundary is ``sigma2``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.special import gamma, kv

from ._linalg import LDLCache, NotPositiveDefiniteError, SparseLDL


class OutsideMeshError(ValueError):
    """A query point lies outside the triangulated hull."""


class DegenerateTriangleError(ValueError):
    pass


@dataclass(frozen=True)
class FieldParams:
    """Latent-field parameter block: mean, nugget, smoothness, scale, variance."""

    mu: float = 5.0
    tau2: float = 0.1
    kappa: float = 2.0
    phi: float = 25.0
    sigma2: float = 1.5

    def __post_init__(self):
        if not self.phi > 0:
            raise ValueError(f"phi must be positive, got {self.phi}")
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if not self.tau2 >= 0:
            raise ValueError(f"tau2 must be non-negative, got {self.tau2}")
        if not self.kappa > 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")

    def with_(self, **kw) -> "FieldParams":
        return replace(self, **kw)


def matern_cov(r, params: FieldParams):
    """Matérn covariance at distance(s) ``r``.

    ``sigma2 * 2^(1-kappa)/Gamma(kappa) * (r/phi)^kappa * K_kappa(r/phi)``, with
    the continuous limit ``sigma2`` at ``r = 0``.
    """
    r_arr = np.asarray(r, dtype=float)
    if not np.all(np.isfinite(r_arr)):
        raise ValueError("matern_cov: distance must be finite")
    if np.any(r_arr < 0):
        raise ValueError("matern_cov: distance must be non-negative")
    kappa = params.kappa
    u = r_arr / params.phi
    out = np.full(u.shape, params.sigma2, dtype=float)
    pos = u > 0
    if np.any(pos):
        up = u[pos]
        with np.errstate(over="ignore", invalid="ignore", under="ignore"):
            val = params.sigma2 * 2.0 ** (1.0 - kappa) / gamma(kappa) * up**kappa * kv(kappa, up)
        # kv underflows to 0 for very large arguments; (r/phi)^kappa * 0 is still 0
        val = np.where(np.isfinite(val), val, 0.0)
        out[pos] = val
    if np.ndim(r) == 0:
        return float(out)
    return out


# --------------------------------------------------------------------------- mesh


@dataclass(frozen=True, eq=False)
class Mesh:
    """Structured right-triangle lattice.

    Vertices are numbered row-major (row = y index, col = x index).  ``domain``
    is the rectangle the lattice covers; ``inner_domain`` is the rectangle the
    caller cares about when a boundary margin was added.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    dims: tuple[int, int]
    domain: tuple[float, float, float, float]
    inner_domain: tuple[float, float, float, float] | None = None
    margin: float = 0.0

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def spacing(self) -> tuple[float, float]:
        rows, cols = self.dims
        x0, x1, y0, y1 = self.domain
        return (x1 - x0) / (cols - 1), (y1 - y0) / (rows - 1)

    def contains(self, points, tol: float = 1e-9) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        x0, x1, y0, y1 = self.domain
        ex = tol * max(1.0, x1 - x0)
        ey = tol * max(1.0, y1 - y0)
        return (
            (pts[:, 0] >= x0 - ex) & (pts[:, 0] <= x1 + ex)
            & (pts[:, 1] >= y0 - ey) & (pts[:, 1] <= y1 + ey)
        )

    def metadata(self) -> dict:
        return {
            "domain": list(self.domain),
            "inner_domain": list(self.inner_domain) if self.inner_domain else None,
            "rows": self.dims[0],
            "cols": self.dims[1],
            "margin": self.margin,
        }


def build_lattice_mesh(domain, rows: int, cols: int) -> Mesh:
    """Regular ``rows x cols`` lattice over ``domain = (xmin, xmax, ymin, ymax)``.

    Each cell is split along its (lower-left, upper-right) diagonal into two
    counter-clockwise right triangles.
    """
    x0, x1, y0, y1 = (float(v) for v in domain)
    if rows < 2 or cols < 2:
        raise ValueError("lattice needs at least 2 rows and 2 cols")
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate domain {domain}")
    xs = np.linspace(x0, x1, cols)
    ys = np.linspace(y0, y1, rows)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    r, c = np.meshgrid(np.arange(rows - 1), np.arange(cols - 1), indexing="ij")
    v00 = (r * cols + c).ravel()
    v10 = v00 + 1
    v01 = v00 + cols
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    # interleave so triangles of a cell are adjacent: 2*cell, 2*cell+1
    triangles = np.empty((2 * lower.shape[0], 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper
    return Mesh(vertices, triangles, (rows, cols), (x0, x1, y0, y1))


def build_field_mesh(domain, spacing: float, margin: float = 0.0) -> Mesh:
    """Lattice with cell width close to ``spacing`` covering ``domain`` grown by ``margin``.

    The inner domain edges fall exactly on lattice lines.
    """
    x0, x1, y0, y1 = (float(v) for v in domain)
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate domain {domain}")
    nx = max(1, int(round((x1 - x0) / spacing)))
    ny = max(1, int(round((y1 - y0) / spacing)))
    dx = (x1 - x0) / nx
    dy = (y1 - y0) / ny
    mx = int(math.ceil(margin / dx - 1e-9)) if margin > 0 else 0
    my = int(math.ceil(margin / dy - 1e-9)) if margin > 0 else 0
    outer = (x0 - mx * dx, x1 + mx * dx, y0 - my * dy, y1 + my * dy)
    mesh = build_lattice_mesh(outer, ny + 2 * my + 1, nx + 2 * mx + 1)
    return replace(mesh, inner_domain=(x0, x1, y0, y1), margin=float(margin))


def lattice_points(domain, rows: int, cols: int) -> np.ndarray:
    """Row-major ``(rows*cols, 2)`` lattice coordinates over ``domain``."""
    x0, x1, y0, y1 = domain
    X, Y = np.meshgrid(np.linspace(x0, x1, cols), np.linspace(y0, y1, rows))
    return np.column_stack([X.ravel(), Y.ravel()])


def interp_weights(mesh: Mesh, points) -> tuple[np.ndarray, np.ndarray]:
    """Barycentric weights of ``points`` in their containing triangles.

    Returns ``(idx, w)`` each of shape ``(n, 3)``.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    inside = mesh.contains(pts)
    if not np.all(inside):
        bad = np.flatnonzero(~inside)
        raise OutsideMeshError(
            f"{bad.size} point(s) outside mesh hull {mesh.domain}, "
            f"first {pts[bad[0]].tolist()}; extrapolation is not supported"
        )
    rows, cols = mesh.dims
    x0, _, y0, _ = mesh.domain
    dx, dy = mesh.spacing
    fx = (pts[:, 0] - x0) / dx
    fy = (pts[:, 1] - y0) / dy
    c = np.clip(np.floor(fx).astype(np.int64), 0, cols - 2)
    r = np.clip(np.floor(fy).astype(np.int64), 0, rows - 2)
    u = np.clip(fx - c, 0.0, 1.0)
    v = np.clip(fy - r, 0.0, 1.0)
    v00 = r * cols + c
    v10 = v00 + 1
    v01 = v00 + cols
    v11 = v01 + 1
    low = u >= v
    idx = np.where(low[:, None], np.column_stack([v00, v10, v11]), np.column_stack([v00, v11, v01]))
    w = np.where(
        low[:, None],
        np.column_stack([1.0 - u, u - v, v]),
        np.column_stack([1.0 - v, u, v - u]),
    )
    return idx, w


def interpolation_matrix(mesh: Mesh, points) -> sp.csr_matrix:
    idx, w = interp_weights(mesh, points)
    n = idx.shape[0]
    return sp.csr_matrix(
        (w.ravel(), (np.repeat(np.arange(n), 3), idx.ravel())), shape=(n, mesh.n_vertices)
    )


# ---------------------------------------------------------------------------- FEM


@dataclass(frozen=True, eq=False)
class FemMatrices:
    """Lumped mass ``C`` and stiffness ``G`` plus the products used by the precision."""

    C_lumped: sp.csr_matrix
    G: sp.csr_matrix
    M2: sp.csr_matrix
    M3: sp.csr_matrix
    mesh: Mesh

    @property
    def M0(self):
        return self.C_lumped

    @property
    def M1(self):
        return self.G


def assemble_fem(mesh: Mesh) -> FemMatrices:
    """Assemble P1 lumped mass and stiffness on ``mesh``."""
    V = mesh.vertices
    T = mesh.triangles
    p0, p1, p2 = V[T[:, 0]], V[T[:, 1]], V[T[:, 2]]
    e1 = p1 - p0
    e2 = p2 - p0
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    area = 0.5 * det
    bad = np.flatnonzero(area <= 0.0)
    if bad.size:
        k = int(bad[0])
        raise DegenerateTriangleError(
            f"triangle {k} {T[k].tolist()} has non-positive area {area[k]:.3e}"
        )
    # gradients of the barycentric basis functions, shape (nt, 3, 2)
    grads = np.empty((T.shape[0], 3, 2))
    grads[:, 1, 0] = e2[:, 1] / det
    grads[:, 1, 1] = -e2[:, 0] / det
    grads[:, 2, 0] = -e1[:, 1] / det
    grads[:, 2, 1] = e1[:, 0] / det
    grads[:, 0] = -grads[:, 1] - grads[:, 2]
    local = area[:, None, None] * np.einsum("tik,tjk->tij", grads, grads)
    m = mesh.n_vertices
    rows = np.repeat(T, 3, axis=1).ravel()
    cols = np.tile(T, (1, 3)).ravel()
    G = sp.csr_matrix((local.ravel(), (rows, cols)), shape=(m, m))
    G = 0.5 * (G + G.T)
    cdiag = np.bincount(T.ravel(), weights=np.repeat(area / 3.0, 3), minlength=m)
    C = sp.diags(cdiag).tocsr()
    Cinv = sp.diags(1.0 / cdiag)
    M2 = (G @ Cinv @ G).tocsr()
    M3 = (M2 @ Cinv @ G).tocsr()
    M2 = 0.5 * (M2 + M2.T)
    M3 = 0.5 * (M3 + M3.T)
    return FemMatrices(C, G.tocsr(), M2.tocsr(), M3.tocsr(), mesh)


# ---------------------------------------------------------------------- precision


@dataclass(frozen=True, eq=False)
class PrecisionBundle:
    Q: sp.csc_matrix
    phi: float
    sigma2: float
    scale_const: float
    factor: SparseLDL

    def logdet(self) -> float:
        return self.factor.logdet()


def variance_scale(phi: float, sigma2: float) -> float:
    """Constant turning the unit-SPDE precision into one with marginal variance ``sigma2``."""
    return phi**4 / (8.0 * math.pi * sigma2)


def unit_precision(fem: FemMatrices, phi: float) -> sp.csc_matrix:
    return (
        phi**-6 * fem.M0 + 3.0 * phi**-4 * fem.M1 + 3.0 * phi**-2 * fem.M2 + fem.M3
    ).tocsc()


def recursive_precision(fem: FemMatrices, phi: float):
    """Unscaled ``K C^-1 K C^-1 K`` with ``K = phi^-2 C + G`` (dense; for checks)."""
    C = fem.C_lumped.toarray()
    K = phi**-2 * C + fem.G.toarray()
    Cinv = np.diag(1.0 / np.diag(C))
    return K @ Cinv @ K @ Cinv @ K


def build_precision(fem: FemMatrices, params: FieldParams, cache: LDLCache | None = None) -> PrecisionBundle:
    if params.kappa != 2:
        raise ValueError("sparse precision is only available for kappa = 2")
    s = variance_scale(params.phi, params.sigma2)
    Q = (s * unit_precision(fem, params.phi)).tocsc()
    try:
        factor = SparseLDL(Q, cache)
    except NotPositiveDefiniteError as exc:
        raise NotPositiveDefiniteError(
            f"precision not SPD for phi={params.phi}, sigma2={params.sigma2}: {exc}"
        ) from exc
    return PrecisionBundle(Q, params.phi, params.sigma2, s, factor)


# --------------------------------------------------------------------- realisations


@dataclass(frozen=True, eq=False)
class FieldRealization:
    values: np.ndarray
    mesh: Mesh

    def __post_init__(self):
        if np.shape(self.values) != (self.mesh.n_vertices,):
            raise ValueError(
                f"field has {np.size(self.values)} values but mesh has {self.mesh.n_vertices} vertices"
            )

    def shifted(self, offset: float) -> "FieldRealization":
        return FieldRealization(self.values + offset, self.mesh)

    def __call__(self, points):
        return interpolate_field(self, points)


def sample_field(bundle: PrecisionBundle, seed) -> np.ndarray:
    """Zero-mean draw from N(0, Q^-1) at the mesh vertices."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(bundle.Q.shape[0])
    return bundle.factor.sample(z)


def sample_field_realization(bundle: PrecisionBundle, mesh: Mesh, seed) -> FieldRealization:
    return FieldRealization(sample_field(bundle, seed), mesh)


def _pairwise_distances(a, b=None):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = a if b is None else np.atleast_2d(np.asarray(b, dtype=float))
    d = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", d, d))


def matern_matrix(a, params: FieldParams, b=None) -> np.ndarray:
    return matern_cov(_pairwise_distances(a, b), params)


def dense_cholesky(C: np.ndarray, sigma2: float) -> np.ndarray:
    """Lower Cholesky factor, retrying once with ``1e-8 * sigma2`` diagonal jitter."""
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(C + 1e-8 * sigma2 * np.eye(C.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(
            "dense covariance not SPD even after jitter; duplicate locations?"
        ) from exc


def dense_gp_draw(locations, params: FieldParams, seed) -> np.ndarray:
    """Exact zero-mean Matérn draw at ``locations`` by dense Cholesky."""
    locs = np.atleast_2d(np.asarray(locations, dtype=float))
    rng = np.random.default_rng(seed)
    C = matern_matrix(locs, params)
    # coincident locations make C singular; draw on the distinct set and copy
    uniq, inverse = np.unique(locs, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).ravel()
    if uniq.shape[0] < locs.shape[0]:
        C = matern_matrix(uniq, params)
    L = dense_cholesky(C, params.sigma2)
    z = rng.standard_normal(L.shape[0])
    x = L @ z
    return x[inverse] if uniq.shape[0] < locs.shape[0] else x


def interpolate_field(real: FieldRealization, x):
    """Piecewise-linear value of the field at ``x`` (one point or an array of points)."""
    pts = np.asarray(x, dtype=float)
    idx, w = interp_weights(real.mesh, pts)
    vals = np.sum(real.values[idx] * w, axis=1)
    return float(vals[0]) if pts.ndim == 1 else vals


# ------------------------------------------------------------------------------ I/O


def write_field_csv(real: FieldRealization, path) -> None:
    """Write ``row,col,x,y,value`` plus a ``.json`` mesh sidecar next to ``path``."""
    path = Path(path)
    rows, cols = real.mesh.dims
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "x", "y", "value"])
        for k, (xy, val) in enumerate(zip(real.mesh.vertices, real.values)):
            w.writerow([k // cols, k % cols, repr(float(xy[0])), repr(float(xy[1])), repr(float(val))])
    path.with_suffix(".json").write_text(json.dumps(real.mesh.metadata(), indent=2, sort_keys=True))


def read_field_csv(path) -> FieldRealization:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    mesh = build_lattice_mesh(meta["domain"], meta["rows"], meta["cols"])
    if meta.get("inner_domain"):
        mesh = replace(mesh, inner_domain=tuple(meta["inner_domain"]), margin=meta.get("margin", 0.0))
    values = np.empty(mesh.n_vertices)
    seen = np.zeros(mesh.n_vertices, dtype=bool)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["row", "col", "x", "y", "value"]:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for line, rec in enumerate(reader, start=2):
            k = int(rec["row"]) * meta["cols"] + int(rec["col"])
            if not 0 <= k < mesh.n_vertices:
                raise ValueError(f"{path}:{line}: vertex ({rec['row']}, {rec['col']}) out of range")
            values[k] = float(rec["value"])
            seen[k] = True
    if not seen.all():
        raise ValueError(f"{path}: {int((~seen).sum())} vertices missing")
    return FieldRealization(values, mesh)
