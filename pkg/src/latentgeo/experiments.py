"""Pair experiments and pass/fail suites shared by the command line and the tests."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .datasets import angle_difference, default_chain
from .geodesic import GeodesicConfig, interpolate_and_decode, optimize_geodesic
from .iwae import IwaeModel, encode
from .numerics import Mlp
from .riemann import (
    GridGraph,
    GridSpec,
    curve_length,
    magnification_factor,
    metric_tensor,
    midpoints,
    straight_line,
    velocities,
)


def encode_means(model: IwaeModel, X, chunk: int = 2000) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return np.concatenate([encode(model, X[s:s + chunk])[0] for s in range(0, len(X), chunk)])


def pair_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def choose_pairs(count: int, n_samples: int, rng: np.random.Generator, angles=None,
                 timesteps=None, min_gap: int = 0, period: int | None = None) -> list[tuple[int, int]]:
    """Random index pairs.

    With ``angles`` the pair's angle difference must lie in (0, 180]; with
    ``timesteps`` the cyclic timestep gap must be at least ``min_gap``.
    """
    if n_samples < 2:
        raise ValueError("need at least two samples")
    pairs = []
    tries = 0
    while len(pairs) < count:
        tries += 1
        if tries > 1000 * count:
            raise ValueError("could not find enough pairs satisfying the constraints")
        i, j = (int(v) for v in rng.choice(n_samples, size=2, replace=False))
        if angles is not None and not angle_difference(angles[i], angles[j]) > 0:
            continue
        if timesteps is not None and min_gap:
            gap = abs(int(timesteps[i]) - int(timesteps[j]))
            if period:
                gap = min(gap, period - gap)
            if gap < min_gap:
                continue
        pairs.append((i, j))
    return pairs


def velocity_cv(phi) -> float:
    phi = np.asarray(phi, dtype=np.float64)
    m = phi.mean()
    return float(phi.std() / m) if m > 0 else 0.0


@dataclass
class PairRecord:
    index_a: int
    index_b: int
    angle_difference: float
    geodesic_length: float
    straight_length: float
    oracle_length: float
    euclidean: float
    geodesic_cv: float
    straight_cv: float
    iterations: int


PAIR_COLUMNS = list(PairRecord.__dataclass_fields__)


def run_pairs(model: IwaeModel, Z, pairs, cfg: GeodesicConfig, seed: int = 0,
              angles=None, graph: GridGraph | None = None, progress=None):
    """Solve one geodesic per pair; returns ``(records, results)``."""
    records, results = [], []
    for k, (i, j) in enumerate(pairs):
        res = optimize_geodesic(model, Z[i], Z[j], replace(cfg, rng_seed=pair_seed(seed, k)))
        oracle = graph.path_length(Z[i], Z[j]) if graph is not None else math.nan
        rec = PairRecord(
            i, j,
            float(angle_difference(angles[i], angles[j])) if angles is not None else math.nan,
            res.length, res.straight_length, oracle, res.euclidean,
            velocity_cv(res.midpoint_velocity),
            velocity_cv(_straight_phi(model, res, cfg)),
            res.iterations,
        )
        records.append(rec)
        results.append(res)
        if progress is not None:
            progress(k, rec)
    return records, results


def _straight_phi(model, res, cfg: GeodesicConfig):
    t = midpoints(cfg.n)
    z, dz = straight_line(res.z0, res.z1)(t)
    return velocities(model.decoder, z, dz, cfg.smoothing)


def write_pairs_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PAIR_COLUMNS)
        for r in records:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in asdict(r).values()])


def latent_grid(Z, n: int = 100, margin: float = 0.1) -> GridSpec:
    return GridSpec.covering(Z, n, margin)


# ---------------------------------------------------------------------------
# suites: lists of {criterion, measured, threshold, pass}

def entry(criterion: str, measured, threshold, passed: bool) -> dict:
    return {"criterion": criterion, "measured": measured, "threshold": threshold,
            "pass": bool(passed)}


def linear_map(decoder: Mlp) -> np.ndarray | None:
    """Composite weight matrix if every decoder layer is linear, else ``None``."""
    if any(a.value != "linear" for a in decoder.activations) or any(decoder.residual):
        return None
    W = np.eye(decoder.input_dim)
    for w in decoder.weights:
        W = w @ W
    return W


def flat_metric_suite(model: IwaeModel, seed: int = 0, pairs: int = 3,
                      cfg: GeodesicConfig | None = None) -> list[dict]:
    decoder = model.decoder
    W = linear_map(decoder)
    if W is None:
        return [entry("decoder is linear", False, True, False)]
    rng = np.random.default_rng(seed)
    nz = decoder.input_dim
    WtW = W.T @ W
    pts = rng.uniform(-2, 2, size=(10, nz))
    g_err = max(float(np.abs(metric_tensor(decoder, z).G - WtW).max()) for z in pts)
    out = [entry("metric equals W^T W", g_err, 1e-9, g_err <= 1e-9)]
    l_err = 0.0
    for _ in range(10):
        z0, z1 = rng.uniform(-2, 2, size=(2, nz))
        L = curve_length(decoder, straight_line(z0, z1))
        l_err = max(l_err, abs(L - np.linalg.norm(W @ (z1 - z0))))
    out.append(entry("straight-line length equals |W dz|", l_err, 1e-9, l_err <= 1e-9))
    mf_true = math.sqrt(max(np.linalg.det(WtW), 0.0))
    mf_err = max(abs(magnification_factor(decoder, z) - mf_true) for z in pts)
    out.append(entry("magnification factor equals sqrt det W^T W", mf_err, 1e-10, mf_err <= 1e-10))
    cfg = cfg or GeodesicConfig(max_iters=300, patience=100, pretrain_curves=2, fit_iters=100)
    worst = 0.0
    for k in range(pairs):
        z0, z1 = rng.uniform(-2, 2, size=(2, nz))
        res = optimize_geodesic(model, z0, z1, replace(cfg, rng_seed=pair_seed(seed, k)))
        ref = np.linalg.norm(W @ (z1 - z0))
        worst = max(worst, abs(res.length / ref - 1.0))
    out.append(entry("geodesic recovers straight line (relative)", worst, 1e-3, worst <= 1e-3))
    return out


def pendulum_ordering_suite(records) -> list[dict]:
    g = np.array([r.geodesic_length for r in records])
    s = np.array([r.straight_length for r in records])
    a = np.array([r.angle_difference for r in records])
    frac = float(np.mean(g < s))
    corr = float(np.corrcoef(a, g)[0, 1]) if len(records) > 2 else math.nan
    cv = float(np.mean([r.geodesic_cv <= r.straight_cv for r in records]))
    return [
        entry("fraction geodesic shorter than straight line", frac, 0.9, frac >= 0.9),
        entry("pearson(angle difference, geodesic length)", corr, 0.9, corr > 0.9),
        entry("fraction with flatter velocity than straight line", cv, 0.7, cv >= 0.7),
    ]


def oracle_suite(records, graph: GridGraph, rng: np.random.Generator,
                 triples: int = 100) -> list[dict]:
    ratios = [abs(r.geodesic_length / r.oracle_length - 1.0) for r in records]
    worst = float(max(ratios))
    n = graph.grid.nx * graph.grid.ny
    nodes = graph.grid.nodes()
    bad = 0
    for _ in range(triples):
        a, b, c = rng.choice(n, size=3, replace=False)
        da, db = graph.distances(nodes[a]).ravel(), graph.distances(nodes[b]).ravel()
        if da[c] > da[b] + db[c]:
            bad += 1
    return [
        entry("max |geodesic / oracle - 1|", worst, 0.15, worst <= 0.15),
        entry("triangle inequality violations", bad, 0, bad == 0),
    ]


def max_jump(points) -> float:
    return float(np.max(np.linalg.norm(np.diff(points, axis=0), axis=1)))


def robot_smoothness(model: IwaeModel, results, frames: int = 100, chain=None) -> list[dict]:
    """Per pair, max inter-frame end-effector jump along the geodesic and the straight line."""
    chain = chain or default_chain()
    out = []
    for res in results:
        itp = interpolate_and_decode(model, res, frames)
        g = np.array([chain.fk(q) for q in itp.geodesic_decoded])
        s = np.array([chain.fk(q) for q in itp.straight_decoded])
        out.append({"geodesic_jump": max_jump(g), "straight_jump": max_jump(s),
                    "geodesic_length": res.length, "straight_length": res.straight_length})
    return out


def robot_suite(rows) -> list[dict]:
    frac_len = float(np.mean([r["geodesic_length"] < r["straight_length"] for r in rows]))
    frac_jump = float(np.mean([r["geodesic_jump"] <= 0.5 * r["straight_jump"] for r in rows]))
    return [
        entry("fraction geodesic shorter than straight line", frac_len, 0.9, frac_len >= 0.9),
        entry("fraction with end-effector jump <= 0.5x straight line", frac_jump, 0.7,
              frac_jump >= 0.7),
    ]
