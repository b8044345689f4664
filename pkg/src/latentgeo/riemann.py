"""Pullback metric of a decoder, spectral smoothing, lengths and latent-space fields."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .numerics import DimensionError, Mlp

PSD_TOL = 1e-9


class BrokenMetricError(ArithmeticError):
    pass


@dataclass(frozen=True)
class SmoothingConfig:
    lambda_s: float = 0.0
    rank: int | None = None  # None keeps every singular value

    def __post_init__(self):
        if self.lambda_s < 0:
            raise ValueError("lambda_s must be nonnegative")
        if self.rank is not None and self.rank < 1:
            raise ValueError("rank must be >= 1")

    def rank_for(self, nz: int) -> int:
        r = nz if self.rank is None else self.rank
        if r > nz:
            raise ValueError(f"rank {r} exceeds latent dimension {nz}")
        return r

    @property
    def is_identity(self) -> bool:
        return self.lambda_s == 0 and self.rank is None


@dataclass
class MetricTensor:
    G: np.ndarray
    U: np.ndarray | None = None
    S: np.ndarray | None = None  # singular values, non-increasing

    def is_symmetric(self, tol=1e-10) -> bool:
        return bool(np.max(np.abs(self.G - self.G.T)) < tol)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(0.5 * (self.G + self.G.T)).min())


# ---------------------------------------------------------------------------
# metric tensors

def jacobians(decoder: Mlp, Z, chunk: int = 4096) -> np.ndarray:
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    return np.concatenate([decoder.jacobian(Z[s:s + chunk]) for s in range(0, len(Z), chunk)])


def pullback(J) -> np.ndarray:
    """``J^T J`` for ``(..., Nx, Nz)`` Jacobians, symmetrised exactly."""
    G = np.einsum("...ij,...ik->...jk", J, J)
    return 0.5 * (G + np.swapaxes(G, -1, -2))


def shrink(s, lambda_s: float) -> np.ndarray:
    """Singular-value map ``s -> s^3 / (s^2 + lambda_s)`` (0 at s = 0)."""
    s = np.asarray(s, dtype=np.float64)
    den = s * s + lambda_s
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, s ** 3 / np.where(den > 0, den, 1.0), 0.0)
    return out


def shrink_deriv(s, lambda_s: float) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    den = s * s + lambda_s
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(den > 0, s * s * (s * s + 3 * lambda_s) / np.where(den > 0, den, 1.0) ** 2,
                       1.0 if lambda_s == 0 else 0.0)
    return out


@dataclass
class Spectral:
    """Eigen-decomposition of a batch of PSD matrices plus its smoothed spectrum."""
    U: np.ndarray  # (..., Nz, Nz), columns ordered by non-increasing s
    s: np.ndarray  # (..., Nz)
    f: np.ndarray  # smoothed values, zero beyond the rank
    G_hat: np.ndarray


def spectral_smooth(G, cfg: SmoothingConfig) -> Spectral:
    """Low-rank reconstruction ``U_r diag(s^3/(s^2+lambda)) U_r^T`` of PSD matrices.

    For a symmetric PSD matrix the SVD and the eigendecomposition coincide
    (U = V), so ``eigh`` is used; round-off negatives are clipped to zero.
    """
    G = np.asarray(G, dtype=np.float64)
    nz = G.shape[-1]
    r = cfg.rank_for(nz)
    w, U = np.linalg.eigh(0.5 * (G + np.swapaxes(G, -1, -2)))
    w, U = w[..., ::-1], U[..., ::-1]
    s = np.maximum(w, 0.0)
    f = shrink(s, cfg.lambda_s)
    f[..., r:] = 0.0
    G_hat = np.einsum("...ij,...j,...kj->...ik", U, f, U)
    return Spectral(U, s, f, G_hat)


def spectral_smooth_vjp(sp: Spectral, cfg: SmoothingConfig, M) -> np.ndarray:
    """Pull a symmetric cotangent ``M = dL/dG_hat`` back to ``dL/dG``.

    Uses the divided-difference (Daleckii-Krein) form of the derivative of
    a spectral matrix function.
    """
    r = cfg.rank_for(sp.s.shape[-1])
    s, f = sp.s, sp.f
    fp = shrink_deriv(s, cfg.lambda_s)
    fp[..., r:] = 0.0
    ds = s[..., :, None] - s[..., None, :]
    df = f[..., :, None] - f[..., None, :]
    scale = np.maximum(np.abs(s[..., :, None]) + np.abs(s[..., None, :]), 1e-300)
    close = np.abs(ds) <= 1e-10 * scale
    with np.errstate(invalid="ignore", divide="ignore"):
        F = np.where(close, 0.5 * (fp[..., :, None] + fp[..., None, :]),
                     df / np.where(close, 1.0, ds))
    Ut = np.swapaxes(sp.U, -1, -2)
    inner = Ut @ M @ sp.U
    return sp.U @ (F * inner) @ Ut


def smooth_metric(G: MetricTensor | np.ndarray, cfg: SmoothingConfig) -> MetricTensor:
    G = G.G if isinstance(G, MetricTensor) else np.asarray(G, dtype=np.float64)
    sp = spectral_smooth(G, cfg)
    return MetricTensor(sp.G_hat, sp.U, sp.f)


def metric_tensor(decoder: Mlp, z, smoothing: SmoothingConfig | None = None) -> MetricTensor:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise DimensionError("metric_tensor takes a single latent point")
    J = decoder.jacobian(z)
    G = pullback(J)
    if smoothing is not None:
        return smooth_metric(G, smoothing)
    w, U = np.linalg.eigh(G)
    return MetricTensor(G, U[:, ::-1], np.maximum(w[::-1], 0.0))


def metric_tensors(decoder: Mlp, Z, smoothing: SmoothingConfig | None = None) -> np.ndarray:
    """Batched metric tensors ``(B, Nz, Nz)``, optionally smoothed."""
    G = pullback(jacobians(decoder, Z))
    if smoothing is not None and not smoothing.is_identity:
        G = spectral_smooth(G, smoothing).G_hat
    return G


# ---------------------------------------------------------------------------
# velocities and lengths

def _sqrt_quadratic(q):
    q = np.asarray(q, dtype=np.float64)
    if np.any(q < -PSD_TOL * np.maximum(1.0, np.abs(q).max(initial=0.0))):
        raise BrokenMetricError(f"negative squared velocity {q.min():.3e}")
    return np.sqrt(np.maximum(q, 0.0))


def velocities(decoder: Mlp, Z, dZ, smoothing: SmoothingConfig | None = None,
               chunk: int = 4096) -> np.ndarray:
    """``sqrt(dz^T G dz)`` at each row of ``Z`` / ``dZ``."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    dZ = np.atleast_2d(np.asarray(dZ, dtype=np.float64))
    if Z.shape != dZ.shape:
        raise DimensionError(f"points {Z.shape} and directions {dZ.shape} differ")
    out = np.empty(len(Z))
    for s in range(0, len(Z), chunk):
        zb, db = Z[s:s + chunk], dZ[s:s + chunk]
        if smoothing is None or smoothing.is_identity:
            _, V, _ = decoder.forward_tangent(zb, db[:, None, :])
            out[s:s + chunk] = np.sqrt(np.sum(V[:, 0] ** 2, axis=-1))
        else:
            G = metric_tensors(decoder, zb, smoothing)
            out[s:s + chunk] = _sqrt_quadratic(np.einsum("bi,bij,bj->b", db, G, db))
    return out


def velocity(decoder: Mlp, z, dz, smoothing: SmoothingConfig | None = None) -> float:
    z = np.asarray(z, dtype=np.float64)
    dz = np.asarray(dz, dtype=np.float64)
    if z.shape != (decoder.input_dim,) or dz.shape != z.shape:
        raise DimensionError("z and dz must both be latent vectors")
    G = metric_tensor(decoder, z, smoothing).G
    return float(_sqrt_quadratic(dz @ G @ dz))


def midpoints(n: int) -> np.ndarray:
    """Sample times ``t_i = (i - 1/2) / n``, i = 1..n."""
    if n < 2:
        raise ValueError("need at least two sample points")
    return (np.arange(n) + 0.5) / n


Curve = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


def straight_line(z0, z1) -> Curve:
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)

    def curve(t):
        t = np.asarray(t, dtype=np.float64)[:, None]
        return z0 + t * (z1 - z0), np.broadcast_to(z1 - z0, (t.shape[0], z0.size)).copy()

    return curve


def curve_length(decoder: Mlp, curve: Curve, n: int = 500,
                 smoothing: SmoothingConfig | None = None) -> float:
    """Midpoint-rule length ``(1/n) sum_i phi(t_i)``."""
    z, dz = curve(midpoints(n))
    return float(np.mean(velocities(decoder, z, dz, smoothing)))


def magnification_factors(decoder: Mlp, Z) -> np.ndarray:
    G = pullback(jacobians(decoder, Z))
    if G.shape[-1] == 2:
        det = G[:, 0, 0] * G[:, 1, 1] - G[:, 0, 1] ** 2
    else:
        det = np.linalg.det(G)
    scale = np.maximum(1.0, np.prod(np.diagonal(G, axis1=-2, axis2=-1), axis=-1))
    if np.any(det < -PSD_TOL * scale):
        raise BrokenMetricError(f"negative metric determinant {det.min():.3e}")
    return np.sqrt(np.maximum(det, 0.0))


def magnification_factor(decoder: Mlp, z) -> float:
    return float(magnification_factors(decoder, np.asarray(z, dtype=np.float64)[None])[0])


# ---------------------------------------------------------------------------
# grids and fields

@dataclass(frozen=True)
class GridSpec:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    nx: int
    ny: int

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError("grid resolution must be >= 2 per axis")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("grid max must exceed min on both axes")

    @classmethod
    def square(cls, lo: float, hi: float, n: int) -> "GridSpec":
        return cls(lo, hi, lo, hi, n, n)

    @classmethod
    def covering(cls, Z, n: int, margin: float = 0.1) -> "GridSpec":
        """Square-resolution grid over the bounding box of ``Z`` plus a relative margin."""
        Z = np.asarray(Z)
        lo, hi = Z.min(axis=0), Z.max(axis=0)
        pad = margin * (hi - lo)
        return cls(lo[0] - pad[0], hi[0] + pad[0], lo[1] - pad[1], hi[1] + pad[1], n, n)

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.nx)

    @property
    def ys(self) -> np.ndarray:
        return np.linspace(self.y_min, self.y_max, self.ny)

    def nodes(self) -> np.ndarray:
        """Node coordinates in row-major order (y outer, x inner), shape ``(ny*nx, 2)``."""
        X, Y = np.meshgrid(self.xs, self.ys)
        return np.stack([X.ravel(), Y.ravel()], axis=1)

    def nearest(self, z) -> int:
        z = np.asarray(z, dtype=np.float64)
        ix = int(np.clip(np.rint((z[0] - self.x_min) / (self.x_max - self.x_min) * (self.nx - 1)),
                         0, self.nx - 1))
        iy = int(np.clip(np.rint((z[1] - self.y_min) / (self.y_max - self.y_min) * (self.ny - 1)),
                         0, self.ny - 1))
        return iy * self.nx + ix

    def contains(self, z) -> bool:
        return bool(self.x_min <= z[0] <= self.x_max and self.y_min <= z[1] <= self.y_max)

    def to_dict(self) -> dict:
        return {"x_min": self.x_min, "x_max": self.x_max, "y_min": self.y_min,
                "y_max": self.y_max, "nx": self.nx, "ny": self.ny}


@dataclass
class DistanceField:
    grid: GridSpec
    values: np.ndarray  # (ny, nx)
    kind: str  # "mf" | "distance"
    source: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def at(self, z) -> float:
        return float(self.values.ravel()[self.grid.nearest(z)])


def _require_2d(decoder: Mlp):
    if decoder.input_dim != 2:
        raise DimensionError(f"fields need a 2-d latent space, decoder takes {decoder.input_dim}")


def mf_field(decoder: Mlp, grid: GridSpec) -> DistanceField:
    _require_2d(decoder)
    vals = magnification_factors(decoder, grid.nodes()).reshape(grid.ny, grid.nx)
    return DistanceField(grid, vals, "mf")


def stencil(radius: int = 1) -> list[tuple[int, int]]:
    """Half of the primitive grid offsets with max(|dx|, |dy|) <= radius.

    Radius 1 is the 8-neighbourhood.  Larger radii add directions, which
    matters for strongly anisotropic metrics where an 8-direction path has
    to zig-zag across the expensive direction.
    """
    if radius < 1:
        raise ValueError("stencil radius must be >= 1")
    out = [(1, 0), (0, 1), (1, 1), (-1, 1)]
    for r in range(2, radius + 1):
        ring = [(dx, dy) for dy in range(0, r + 1) for dx in range(-r, r + 1)
                if max(abs(dx), abs(dy)) == r and (dy > 0 or dx > 0) and math.gcd(dx, dy) == 1]
        out += ring
    return out


def grid_edges(grid: GridSpec, radius: int = 1) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Undirected stencil edges as ``(a, b, steps)``; ``steps`` is each edge's L-inf span in cells."""
    idx = np.arange(grid.nx * grid.ny).reshape(grid.ny, grid.nx)
    a, b, steps = [], [], []
    for dx, dy in stencil(radius):
        if abs(dx) >= grid.nx or dy >= grid.ny:
            continue
        src = idx[:grid.ny - dy, max(0, -dx):grid.nx - max(0, dx)]
        dst = idx[dy:, max(0, dx):grid.nx + min(0, dx)]
        a.append(src.ravel())
        b.append(dst.ravel())
        steps.append(np.full(src.size, max(abs(dx), abs(dy))))
    return np.concatenate(a), np.concatenate(b), np.concatenate(steps)


def edge_weights(decoder: Mlp, grid: GridSpec, smoothing: SmoothingConfig | None = None,
                 radius: int = 1) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Riemannian length of every grid edge.

    An edge spanning ``m`` cells is measured with the midpoint rule on ``m``
    equal pieces, so radius-1 edges use the single edge midpoint.
    """
    nodes = grid.nodes()
    a, b, steps = grid_edges(grid, radius)
    w = np.empty(len(a))
    for m in np.unique(steps):
        sel = np.flatnonzero(steps == m)
        za, d = nodes[a[sel]], nodes[b[sel]] - nodes[a[sel]]
        acc = np.zeros(len(sel))
        for k in range(m):
            acc += velocities(decoder, za + ((k + 0.5) / m) * d, d, smoothing)
        w[sel] = acc / m
    return a, b, w


class GridGraph:
    """Weighted grid graph over a stencil of the given radius; edge weights are computed once."""

    def __init__(self, decoder: Mlp, grid: GridSpec, smoothing: SmoothingConfig | None = None,
                 radius: int = 1):
        _require_2d(decoder)
        self.grid = grid
        self.radius = radius
        a, b, w = edge_weights(decoder, grid, smoothing, radius)
        n = grid.nx * grid.ny
        # zero-length edges would vanish from a sparse matrix
        self.weights = np.maximum(w, 1e-300)
        self.edges = (a, b)
        self.matrix = coo_matrix((self.weights, (a, b)), shape=(n, n)).tocsr()

    def distances(self, source) -> np.ndarray:
        """Shortest-path distances ``(ny, nx)`` from the node nearest ``source``."""
        source = np.asarray(source, dtype=np.float64)
        if not self.grid.contains(source):
            raise ValueError(f"source {source} lies outside the grid window")
        dist = dijkstra(self.matrix, directed=False, indices=self.grid.nearest(source))
        return dist.reshape(self.grid.ny, self.grid.nx)

    def path_length(self, z0, z1) -> float:
        """Graph distance between the nodes nearest ``z0`` and ``z1``."""
        if not self.grid.contains(np.asarray(z1)):
            raise ValueError(f"target {z1} lies outside the grid window")
        return float(self.distances(z0).ravel()[self.grid.nearest(z1)])


def graph_distance_field(decoder: Mlp, grid: GridSpec, source,
                         smoothing: SmoothingConfig | None = None, radius: int = 1) -> DistanceField:
    """Shortest-path distance from the node nearest ``source`` over the grid graph."""
    _require_2d(decoder)
    source = np.asarray(source, dtype=np.float64)
    if not grid.contains(source):
        raise ValueError(f"source {source} lies outside the grid window")
    vals = GridGraph(decoder, grid, smoothing, radius).distances(source)
    return DistanceField(grid, vals, "distance", source)


# ---------------------------------------------------------------------------
# export

def write_field(fld: DistanceField, directory, stem: str = "field", pgm: bool = True) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    nodes = fld.grid.nodes()
    vals = fld.values.ravel()
    csv_path = d / f"{stem}.csv"
    with open(csv_path, "w") as fh:
        fh.write("zx,zy,value\n")
        for (zx, zy), v in zip(nodes, vals):
            fh.write(f"{float(zx)!r},{float(zy)!r},{float(v)!r}\n")
    lo, hi = float(vals.min()), float(vals.max())
    side = {"kind": fld.kind, "grid": fld.grid.to_dict(), "order": "row-major, y outer, x inner",
            "source": None if fld.source is None else [float(v) for v in fld.source],
            "meta": fld.meta}
    out = [csv_path]
    if pgm:
        pgm_path = d / f"{stem}.pgm"
        span = hi - lo
        img = np.zeros_like(fld.values) if span == 0 else (fld.values - lo) / span
        # top image row is the largest y
        pix = np.rint(255 * img[::-1]).astype(np.uint8)
        with open(pgm_path, "wb") as fh:
            fh.write(f"P5\n{fld.grid.nx} {fld.grid.ny}\n255\n".encode())
            fh.write(pix.tobytes())
        side["pgm"] = {"file": pgm_path.name, "normalization": "min-max", "min": lo, "max": hi,
                       "rows": "top row = y_max"}
        out.append(pgm_path)
    side_path = d / f"{stem}.json"
    side_path.write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    out.append(side_path)
    return out
