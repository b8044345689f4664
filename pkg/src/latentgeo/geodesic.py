"""Length-minimising latent curves between two points under the decoder metric.

A small tanh network maps ``t in [0, 1]`` to the latent space.  Its output is
shifted and rescaled per coordinate so that the curve always passes through
the requested endpoints; the network weights are then optimised to reduce
the Riemannian length of the curve.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import AdamState, Mlp, adam_step
from .riemann import (
    SmoothingConfig,
    midpoints,
    pullback,
    spectral_smooth,
    spectral_smooth_vjp,
    straight_line,
    velocities,
)

DEGENERATE = 1e-8


def _decoder_of(model) -> Mlp:
    return model.decoder if hasattr(model, "decoder") else model


@dataclass
class GeodesicConfig:
    n: int = 500
    learning_rate: float = 1e-2
    max_iters: int = 2000
    patience: int = 200
    lambda_s: float = 0.0
    rank: int | None = None
    lambda_phi: float = 1.0
    pretrain_curves: int = 8
    bezier_control_count: int = 5
    fit_iters: int = 500
    fit_learning_rate: float = 1e-2
    hidden: int = 150
    rng_seed: int = 0

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n must be >= 2")
        if self.pretrain_curves < 1:
            raise ValueError("pretrain_curves must be >= 1")
        if self.bezier_control_count < 2:
            raise ValueError("bezier_control_count must be >= 2")

    @property
    def smoothing(self) -> SmoothingConfig | None:
        if self.lambda_s == 0 and self.rank is None:
            return None
        return SmoothingConfig(self.lambda_s, self.rank)


# ---------------------------------------------------------------------------
# curve network

class CurveNet:
    """Scalar-input tanh network whose normalised output interpolates ``z0 -> z1``."""

    def __init__(self, net: Mlp, z0, z1):
        if net.input_dim != 1:
            raise ValueError("curve network takes a scalar input")
        self.net = net
        self.z0 = np.asarray(z0, dtype=np.float64)
        self.z1 = np.asarray(z1, dtype=np.float64)
        if self.z0.shape != (net.output_dim,) or self.z1.shape != self.z0.shape:
            raise ValueError("endpoint dimension does not match the network output")

    @classmethod
    def init(cls, z0, z1, rng: np.random.Generator, hidden: int = 150) -> "CurveNet":
        nz = len(z0)
        return cls(Mlp.init([1, hidden, hidden, nz], ["tanh", "tanh", "linear"], rng), z0, z1)

    def copy(self) -> "CurveNet":
        return CurveNet(self.net.copy(), self.z0, self.z1)

    def _raw(self, t, keep_cache: bool, tangent: bool):
        T = np.concatenate([np.asarray(t, dtype=np.float64), [0.0, 1.0]])[:, None]
        tan = np.ones((T.shape[0], 1, 1)) if tangent else None
        out, dout, cache = self.net.forward_tangent(T, tan, keep_cache=keep_cache)
        return out, (dout[:, 0, :] if tangent else None), cache

    def _normalise(self, t, raw, draw):
        """Map raw outputs (rows: t..., 0, 1) to curve points and derivatives."""
        n = len(t)
        r, r0, r1 = raw[:n], raw[n], raw[n + 1]
        D = r1 - r0
        delta = self.z1 - self.z0
        ok = np.abs(D) >= DEGENERATE
        c = np.where(ok, delta / np.where(ok, D, 1.0), 0.0)
        # z = A*raw - B with A = (z0 - z1)/(r0 - r1), B = (z0 r1 - z1 r0)/(r0 - r1),
        # written around r0 so that t = 0 reproduces z0 exactly
        z = self.z0 + c * (r - r0)
        tt = np.asarray(t)[:, None]
        blend = r + (1.0 - tt) * (self.z0 - r0) + tt * (self.z1 - r1)
        z = np.where(ok, z, blend)
        dz = None
        if draw is not None:
            dr = draw[:n]
            dz = np.where(ok, c * dr, dr - (self.z0 - r0) + (self.z1 - r1))
        return z, dz, (ok, c, D, r, r0, r1, draw)

    def __call__(self, t):
        """Curve points and ``dz/dt`` at times ``t`` (1-d array)."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        raw, draw, _ = self._raw(t, keep_cache=False, tangent=True)
        z, dz, _ = self._normalise(t, raw, draw)
        return z, dz

    def points(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        raw, _, _ = self._raw(t, keep_cache=False, tangent=False)
        return self._normalise(t, raw, None)[0]

    def _backward(self, t, aux, gz, gdz, cache):
        """Gradients w.r.t. network params given ``dL/dz`` and ``dL/d(dz/dt)``."""
        ok, c, D, r, r0, r1, draw = aux
        n = len(t)
        tt = np.asarray(t)[:, None]
        gdz = np.zeros_like(gz) if gdz is None else gdz
        g_raw = np.zeros((n + 2, r.shape[1]))
        g_draw = np.zeros((n + 2, r.shape[1]))
        # regular coordinates: z = z0 + c (r - r0), dz = c dr, c = delta / (r1 - r0)
        g_raw[:n] = np.where(ok, gz * c, gz)
        g_draw[:n] = np.where(ok, gdz * c, gdz)
        S = np.sum(gz * (r - r0), axis=0)
        if draw is not None:
            S = S + np.sum(gdz * draw[:n], axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            gc_dD = np.where(ok, -S * c / np.where(ok, D, 1.0), 0.0)
        g_r0_reg = -gc_dD - c * np.sum(gz, axis=0)
        g_r1_reg = gc_dD
        # degenerate coordinates: affine endpoint blend
        g_r0_deg = np.sum(-(1.0 - tt) * gz + gdz, axis=0)
        g_r1_deg = np.sum(-tt * gz - gdz, axis=0)
        g_raw[n] = np.where(ok, g_r0_reg, g_r0_deg)
        g_raw[n + 1] = np.where(ok, g_r1_reg, g_r1_deg)
        tan = g_draw[:, None, :] if draw is not None else None
        _, _, grads = self.net.backward_tangent(cache, g_raw, tan)
        return grads


# ---------------------------------------------------------------------------
# Bezier pretraining curves

@dataclass
class BezierCurve:
    control: np.ndarray  # (degree + 1, Nz)

    def __call__(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        P = self.control
        deg = len(P) - 1
        basis = np.stack([math.comb(deg, k) * t ** k * (1 - t) ** (deg - k)
                          for k in range(deg + 1)], axis=1)
        dbasis = np.stack([math.comb(deg - 1, k) * t ** k * (1 - t) ** (deg - 1 - k)
                           for k in range(deg)], axis=1)
        return basis @ P, deg * dbasis @ np.diff(P, axis=0)


def orthogonal_basis(direction) -> np.ndarray:
    """Orthonormal basis (rows) of the complement of ``direction``."""
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    if d.size == 2:
        return np.array([[-d[1], d[0]]])
    q, _ = np.linalg.qr(np.column_stack([d, np.eye(d.size)]))
    return q[:, 1:d.size].T


def bezier_sample(z0, z1, n_controls: int, rng: np.random.Generator,
                  offsets=None) -> BezierCurve:
    """Random Bezier curve from ``z0`` to ``z1`` with ``n_controls - 1`` interior points.

    Interior control point k sits on the segment at fraction k / n_controls
    and is displaced orthogonally by a uniform draw over a window of width
    ``|z1 - z0| / 2`` centred on the segment.  ``offsets`` (shape
    ``(n_controls - 1, Nz - 1)``) overrides the draws.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    if n_controls < 2:
        raise ValueError("need at least 2 control intervals")
    delta = z1 - z0
    dist = np.linalg.norm(delta)
    if dist == 0:
        raise ValueError("Bezier pretraining needs distinct endpoints")
    normals = orthogonal_basis(delta)
    k = np.arange(1, n_controls)[:, None] / n_controls
    if offsets is None:
        offsets = rng.uniform(-dist / 4, dist / 4, size=(n_controls - 1, normals.shape[0]))
    interior = z0 + k * delta + np.asarray(offsets) @ normals
    return BezierCurve(np.vstack([z0, interior, z1]))


# ---------------------------------------------------------------------------
# objectives

def _curve_forward(curve: CurveNet, t, tangent: bool):
    raw, draw, cache = curve._raw(t, keep_cache=True, tangent=tangent)
    z, dz, aux = curve._normalise(t, raw, draw)
    return z, dz, aux, cache


def length_and_grad(decoder: Mlp, curve: CurveNet, t, smoothing: SmoothingConfig | None = None,
                    want_grad: bool = True):
    """Mean velocity over ``t`` and its gradient w.r.t. the curve network parameters.

    Returns ``(length, per-sample velocities, grads)``.
    """
    z, dz, aux, cache = _curve_forward(curve, t, tangent=True)
    n = len(t)
    if smoothing is None or smoothing.is_identity:
        _, V, dcache = decoder.forward_tangent(z, dz[:, None, :], keep_cache=want_grad)
        v = V[:, 0, :]
        phi = np.sqrt(np.sum(v * v, axis=1))
        if not want_grad:
            return float(phi.mean()), phi, None
        inv = np.where(phi > 0, 1.0 / (n * np.where(phi > 0, phi, 1.0)), 0.0)
        gz, gT, _ = decoder.backward_tangent(dcache, None, (v * inv[:, None])[:, None, :],
                                             want_params=False)
        gdz = gT[:, 0, :]
    else:
        nz = z.shape[1]
        eye = np.broadcast_to(np.eye(nz), (n, nz, nz))
        _, X, dcache = decoder.forward_tangent(z, eye, keep_cache=want_grad)
        G = pullback(np.swapaxes(X, 1, 2))
        sp = spectral_smooth(G, smoothing)
        q = np.einsum("bi,bij,bj->b", dz, sp.G_hat, dz)
        phi = np.sqrt(np.maximum(q, 0.0))
        if not want_grad:
            return float(phi.mean()), phi, None
        inv = np.where(phi > 0, 1.0 / (n * np.where(phi > 0, phi, 1.0)), 0.0)
        gdz = np.einsum("bij,bj->bi", sp.G_hat, dz) * inv[:, None]
        M_hat = 0.5 * inv[:, None, None] * dz[:, :, None] * dz[:, None, :]
        M = spectral_smooth_vjp(sp, smoothing, M_hat)
        M = 0.5 * (M + np.swapaxes(M, 1, 2))
        gX = 2.0 * M @ X
        gz, _, _ = decoder.backward_tangent(dcache, None, gX, want_params=False)
    if gz is None:  # affine decoder: the metric does not depend on z
        gz = np.zeros_like(z)
    if gdz is None:
        gdz = np.zeros_like(dz)
    grads = curve._backward(t, aux, gz, gdz, cache)
    return float(phi.mean()), phi, grads


def fit_loss_and_grad(curve: CurveNet, t, target_points):
    z, _, aux, cache = _curve_forward(curve, t, tangent=False)
    diff = z - target_points
    n = len(t)
    loss = float(np.sum(diff * diff) / n)
    grads = curve._backward(t, aux, 2.0 * diff / n, None, cache)
    return loss, grads


def validation_value(length: float, phi, lambda_phi: float) -> float:
    return float(length + lambda_phi * np.max(phi))


# ---------------------------------------------------------------------------
# optimisation

@dataclass
class PretrainResult:
    curve: CurveNet
    fit_loss: float
    length: float
    validation: float


def pretrain(curve: CurveNet, target, decoder, cfg: GeodesicConfig,
             fit_iters: int | None = None) -> PretrainResult:
    """Fit the normalised curve to ``target`` at the sample points, then score it."""
    curve = curve.copy()
    t = midpoints(cfg.n)
    pts, _ = target(t)
    state = AdamState.for_params(curve.net.params, learning_rate=cfg.fit_learning_rate)
    params = curve.net.params
    loss = math.inf
    for it in range(cfg.fit_iters if fit_iters is None else fit_iters):
        loss, grads = fit_loss_and_grad(curve, t, pts)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite pretraining loss at iteration {it}")
        params = adam_step(state, params, grads)
        curve.net.set_params(params)
    length, phi, _ = length_and_grad(_decoder_of(decoder), curve, t, cfg.smoothing, want_grad=False)
    return PretrainResult(curve, loss, length, validation_value(length, phi, cfg.lambda_phi))


@dataclass
class GeodesicResult:
    t: np.ndarray  # 0, midpoints..., 1
    path: np.ndarray
    velocity: np.ndarray  # per-sample velocity at t
    length: float
    straight_length: float
    euclidean: float
    validation: float
    straight_validation: float
    iterations: int
    trace: list = field(default_factory=list)  # (iteration, length, validation)
    improved: bool = False
    curve: CurveNet | None = None
    z0: np.ndarray | None = None
    z1: np.ndarray | None = None

    @property
    def midpoint_velocity(self) -> np.ndarray:
        return self.velocity[1:-1]

    def curve_fn(self):
        return self.curve if self.curve is not None else straight_line(self.z0, self.z1)


def _sample_curve(decoder, curve_fn, n, smoothing):
    t = np.concatenate([[0.0], midpoints(n), [1.0]])
    z, dz = curve_fn(t)
    phi = velocities(decoder, z, dz, smoothing)
    return t, z, phi


def optimize_geodesic(model, z0, z1, cfg: GeodesicConfig = GeodesicConfig(),
                      progress=None) -> GeodesicResult:
    """Approximate the shortest latent path between ``z0`` and ``z1``.

    Candidates come from Bezier pretraining; the best one is refined by Adam
    on its length.  The iterate with the lowest ``length + lambda_phi *
    max velocity`` among those no longer than the straight line is kept;
    the straight line itself is the fallback.
    """
    decoder = _decoder_of(model)
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    if z0.shape != (decoder.input_dim,) or z1.shape != z0.shape:
        raise ValueError(f"endpoints must be {decoder.input_dim}-d vectors")
    if not (np.all(np.isfinite(z0)) and np.all(np.isfinite(z1))):
        raise ValueError("endpoints must be finite")
    smoothing = cfg.smoothing
    tm = midpoints(cfg.n)
    line = straight_line(z0, z1)
    t_all, line_pts, line_phi = _sample_curve(decoder, line, cfg.n, smoothing)
    straight_len = float(np.mean(line_phi[1:-1]))
    straight_val = validation_value(straight_len, line_phi[1:-1], cfg.lambda_phi)
    euclid = float(np.linalg.norm(z1 - z0))
    base = dict(straight_length=straight_len, euclidean=euclid,
                straight_validation=straight_val, z0=z0, z1=z1)
    if euclid == 0.0:
        return GeodesicResult(t_all, line_pts, line_phi, 0.0, validation=straight_val,
                              iterations=0, **base)

    rng = np.random.default_rng(cfg.rng_seed)
    best_pre = None
    for k in range(cfg.pretrain_curves):
        target = bezier_sample(z0, z1, cfg.bezier_control_count, rng)
        cand = pretrain(CurveNet.init(z0, z1, rng, cfg.hidden), target, decoder, cfg)
        if best_pre is None or cand.validation < best_pre.validation:
            best_pre = cand
    curve = best_pre.curve

    best_val, best_params, best_len = math.inf, None, math.inf
    state = AdamState.for_params(curve.net.params, learning_rate=cfg.learning_rate)
    params = curve.net.params
    trace = []
    stale = 0
    it = 0
    for it in range(cfg.max_iters + 1):
        length, phi, grads = length_and_grad(decoder, curve, tm, smoothing,
                                             want_grad=it < cfg.max_iters)
        if not math.isfinite(length):
            raise FloatingPointError(f"non-finite curve length at iteration {it}")
        val = validation_value(length, phi, cfg.lambda_phi)
        trace.append((it, length, val))
        if progress is not None:
            progress(it, length, val)
        if val < best_val and length <= straight_len:
            best_val, best_len = val, length
            best_params = [p.copy() for p in params]
            stale = 0
        else:
            stale += 1
        if it == cfg.max_iters or stale >= cfg.patience:
            break
        params = adam_step(state, params, grads)
        curve.net.set_params(params)

    if best_params is None or best_len > straight_len + 1e-6:
        return GeodesicResult(t_all, line_pts, line_phi, straight_len, validation=straight_val,
                              iterations=it, trace=trace, improved=False, **base)
    curve.net.set_params(best_params)
    t_all, pts, phi_all = _sample_curve(decoder, curve, cfg.n, smoothing)
    length = float(np.mean(phi_all[1:-1]))
    return GeodesicResult(t_all, pts, phi_all, length,
                          validation=validation_value(length, phi_all[1:-1], cfg.lambda_phi),
                          iterations=it, trace=trace, improved=length < straight_len,
                          curve=curve, **base)


@dataclass
class Interpolation:
    t: np.ndarray
    geodesic_latent: np.ndarray
    geodesic_decoded: np.ndarray
    geodesic_velocity: np.ndarray
    straight_latent: np.ndarray
    straight_decoded: np.ndarray
    straight_velocity: np.ndarray


def arc_length_times(result: GeodesicResult, frames: int) -> np.ndarray:
    """Curve times splitting the geodesic into ``frames - 1`` equal-length pieces.

    Cumulative length is the running midpoint sum of the stored velocities,
    inverted by linear interpolation on the cell boundaries k/n.
    """
    phi = result.midpoint_velocity
    n = phi.size
    if n == 0 or not np.sum(phi) > 0.0:
        return np.linspace(0.0, 1.0, frames)
    cum = np.concatenate([[0.0], np.cumsum(phi) / n])
    t = np.interp(np.linspace(0.0, cum[-1], frames), cum, np.linspace(0.0, 1.0, n + 1))
    t[0], t[-1] = 0.0, 1.0
    return t


def interpolate_and_decode(model, result: GeodesicResult, frames: int,
                           smoothing: SmoothingConfig | None = None,
                           spacing: str = "arc") -> Interpolation:
    """Decode ``frames`` points of the geodesic and of the straight line.

    The geodesic is traversed at constant metric speed (``spacing="arc"``),
    so consecutive frames are equal length steps apart. ``spacing="t"`` uses
    equal curve times instead. The straight line always uses equal latent steps.
    """
    if frames < 2:
        raise ValueError("frames must be >= 2")
    if spacing not in ("arc", "t"):
        raise ValueError("spacing must be 'arc' or 't'")
    decoder = _decoder_of(model)
    t = np.linspace(0.0, 1.0, frames)
    tg = t if spacing == "t" else arc_length_times(result, frames)
    gz, gdz = result.curve_fn()(tg)
    sz, sdz = straight_line(result.z0, result.z1)(t)
    return Interpolation(
        tg, gz, decoder.forward(gz), velocities(decoder, gz, gdz, smoothing),
        sz, decoder.forward(sz), velocities(decoder, sz, sdz, smoothing),
    )


def write_result(result: GeodesicResult, directory, stem: str = "geodesic",
                 config: GeodesicConfig | None = None) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    nz = result.path.shape[1]
    csv_path = d / f"{stem}.csv"
    with open(csv_path, "w") as fh:
        fh.write("t," + ",".join(f"z_{j + 1}" for j in range(nz)) + ",velocity\n")
        for t, z, v in zip(result.t, result.path, result.velocity):
            fh.write(",".join(repr(float(x)) for x in (t, *z, v)) + "\n")
    summary = {
        "length": result.length,
        "straight_length": result.straight_length,
        "euclidean": result.euclidean,
        "iterations": result.iterations,
        "validation": result.validation,
        "straight_validation": result.straight_validation,
        "improved": result.improved,
        "z0": [float(v) for v in result.z0],
        "z1": [float(v) for v in result.z1],
        "config": asdict(config) if config else None,
    }
    js = d / f"{stem}.json"
    js.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return [csv_path, js]
