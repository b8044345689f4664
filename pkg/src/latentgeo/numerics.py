"""Dense MLP evaluation with analytic first and second derivatives.

Every network in the package (encoder, decoder, curve network) is an
:class:`Mlp`.  Besides the plain forward pass, an ``Mlp`` can push a set of
input tangents through the layers (forward mode) and backpropagate through
both the values and the tangents.  That one mechanism yields the decoder
Jacobian, the curve derivative with respect to ``t``, the gradient of a
Jacobian-dependent loss with respect to the latent input, and ordinary
parameter gradients for training.
"""
from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


class Activation(str, enum.Enum):
    TANH = "tanh"
    SIGMOID = "sigmoid"
    SOFTPLUS = "softplus"
    LINEAR = "linear"


# Their second derivative vanishes almost everywhere, so the gradient of any
# Jacobian-based objective is identically zero through them.
PIECEWISE_LINEAR = frozenset(
    {"relu", "leaky_relu", "prelu", "relu6", "hardtanh", "hard_sigmoid", "abs"}
)


class PiecewiseLinearActivationError(ValueError):
    pass


class FileFormatError(ValueError):
    """A file on disk is malformed, truncated, or of the wrong kind."""


class DimensionError(ValueError):
    pass


def as_activation(kind) -> Activation:
    if isinstance(kind, Activation):
        return kind
    name = str(kind).lower()
    if name in PIECEWISE_LINEAR:
        raise PiecewiseLinearActivationError(
            f"activation {name!r} is piecewise linear: its second derivative is zero "
            "almost everywhere, so metric gradients cannot flow through it"
        )
    try:
        return Activation(name)
    except ValueError:
        raise ValueError(f"unknown activation {kind!r}") from None


def _sigmoid(v):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def activation_derivs(kind: Activation, v, order: int = 2):
    """Return ``(f, f', f'')`` of the activation at ``v`` (elementwise).

    With ``order < 2`` the unused derivatives are returned as ``None``.
    """
    v = np.asarray(v, dtype=np.float64)
    if kind is Activation.TANH:
        f = np.tanh(v)
        d1 = 1.0 - f * f if order >= 1 else None
        d2 = -2.0 * f * d1 if order >= 2 else None
    elif kind is Activation.SIGMOID:
        f = _sigmoid(v)
        d1 = f * (1.0 - f) if order >= 1 else None
        d2 = d1 * (1.0 - 2.0 * f) if order >= 2 else None
    elif kind is Activation.SOFTPLUS:
        # max(v, 0) + log1p(exp(-|v|)); np.logaddexp is several times slower
        f = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
        if order >= 1:
            s = -np.expm1(-f)  # logistic(v) = 1 - exp(-softplus(v))
            d1 = s
            d2 = s * (1.0 - s) if order >= 2 else None
        else:
            d1 = d2 = None
    elif kind is Activation.LINEAR:
        f = v.copy()
        d1 = np.ones_like(v) if order >= 1 else None
        d2 = np.zeros_like(v) if order >= 2 else None
    else:  # pragma: no cover
        raise ValueError(kind)
    return f, d1, d2


def activation_eval(kind, v: float) -> tuple[float, float, float]:
    f, d1, d2 = activation_derivs(as_activation(kind), np.float64(v))
    return float(f), float(d1), float(d2)


@dataclass
class _Cache:
    inputs: list  # layer inputs h
    tangents: list  # layer input tangents, (B, T, width) or None
    pre: list  # pre-activations a
    pre_tangents: list
    d1: list
    d2: list


class Mlp:
    """Feed-forward network ``x = f_L(W_L ... f_1(W_1 z + b_1) ... + b_L)``.

    Weights are stored as ``(out, in)`` arrays.  A layer flagged ``residual``
    computes ``h + f(W h + b)`` and must be square.
    """

    def __init__(self, weights, biases, activations, residual=None):
        if not (len(weights) == len(biases) == len(activations)) or not weights:
            raise DimensionError("weights, biases and activations must have equal nonzero length")
        self.weights = [np.ascontiguousarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float64).reshape(-1) for b in biases]
        self.activations = [as_activation(a) for a in activations]
        self.residual = list(residual) if residual is not None else [False] * len(weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape[0] != w.shape[0]:
                raise DimensionError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise DimensionError(
                    f"layer {i} expects {w.shape[1]} inputs, previous layer gives "
                    f"{self.weights[i - 1].shape[0]}"
                )
            if self.residual[i] and w.shape[0] != w.shape[1]:
                raise DimensionError(f"residual layer {i} must be square, got {w.shape}")

    @classmethod
    def init(cls, sizes: Sequence[int], activations, rng: np.random.Generator, residual=None):
        """Glorot-uniform weights, zero biases."""
        if isinstance(activations, (str, Activation)):
            activations = [activations] * (len(sizes) - 1)
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, activations, residual)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        if len(params) != 2 * len(self.weights):
            raise DimensionError("parameter list length does not match layer count")
        for i in range(len(self.weights)):
            w, b = params[2 * i], params[2 * i + 1]
            if w.shape != self.weights[i].shape or b.shape != self.biases[i].shape:
                raise DimensionError(f"layer {i}: parameter shape mismatch")
            self.weights[i], self.biases[i] = w, b

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   list(self.activations), list(self.residual))

    def _check_input(self, z):
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.input_dim:
            raise DimensionError(f"expected input dim {self.input_dim}, got {z.shape[-1]}")
        return z

    def forward(self, z) -> np.ndarray:
        z = self._check_input(z)
        h = z
        for w, b, act, res in zip(self.weights, self.biases, self.activations, self.residual):
            f, _, _ = activation_derivs(act, h @ w.T + b, order=0)
            h = h + f if res else f
        return h

    __call__ = forward

    def forward_tangent(self, z, tangents=None, keep_cache: bool = False):
        """Forward pass carrying input tangents.

        ``z`` is ``(B, in)``; ``tangents`` is ``(B, T, in)`` or ``None``.
        Returns ``(x, X, cache)`` where ``X[b, t] = J(z_b) @ tangents[b, t]``.
        """
        z = self._check_input(z)
        if z.ndim != 2:
            raise DimensionError("forward_tangent expects a (batch, dim) array")
        h, H = z, tangents
        order = 2 if (H is not None and keep_cache) else 1 if (H is not None or keep_cache) else 0
        cache = _Cache([], [], [], [], [], []) if keep_cache else None
        for w, b, act, res in zip(self.weights, self.biases, self.activations, self.residual):
            a = h @ w.T + b
            if act is Activation.LINEAR:
                # identity derivatives are implicit (None) to skip large temporaries
                f, d1, d2 = a, None, None
            else:
                f, d1, d2 = activation_derivs(act, a, order=order)
            A = H @ w.T if H is not None else None
            if cache is not None:
                cache.inputs.append(h)
                cache.tangents.append(H)
                cache.pre.append(a)
                cache.pre_tangents.append(A)
                cache.d1.append(d1)
                cache.d2.append(d2)
            if H is not None:
                FA = A if d1 is None else d1[:, None, :] * A
                H = H + FA if res else FA
            h = h + f if res else f
        return h, H, cache

    def backward_tangent(self, cache: _Cache, grad_out=None, grad_tangent=None,
                         want_params: bool = True):
        """Reverse pass through :meth:`forward_tangent`.

        Returns ``(grad_z, grad_tangents, param_grads)`` where ``param_grads``
        follows the order of :attr:`params` (``None`` if not requested).
        """
        gh, gH = grad_out, grad_tangent
        grads = [None] * (2 * len(self.weights)) if want_params else None
        for i in reversed(range(len(self.weights))):
            w, res = self.weights[i], self.residual[i]
            h, H, A = cache.inputs[i], cache.tangents[i], cache.pre_tangents[i]
            d1, d2 = cache.d1[i], cache.d2[i]
            ga = None
            if gh is not None:
                ga = gh if d1 is None else gh * d1
            gA = None
            if gH is not None:
                if d1 is None:
                    gA = gH
                else:
                    gA = gH * d1[:, None, :]
                    curv = np.einsum("btw,btw->bw", gH, A) * d2
                    ga = curv if ga is None else ga + curv
            if want_params:
                gw = np.zeros_like(w)
                gb = np.zeros(w.shape[0])
                if ga is not None:
                    gw += ga.T @ h
                    gb += ga.sum(axis=0)
                if gA is not None:
                    gw += gA.reshape(-1, gA.shape[-1]).T @ H.reshape(-1, H.shape[-1])
                grads[2 * i], grads[2 * i + 1] = gw, gb
            new_gh = ga @ w if ga is not None else None
            new_gH = gA @ w if gA is not None else None
            if res:
                if gh is not None:
                    new_gh = gh if new_gh is None else new_gh + gh
                if gH is not None:
                    new_gH = gH if new_gH is None else new_gH + gH
            gh, gH = new_gh, new_gH
        return gh, gH, grads

    def jacobian(self, z) -> np.ndarray:
        """Jacobian ``dx/dz``: ``(out, in)`` for a vector, ``(B, out, in)`` for a batch."""
        z = self._check_input(z)
        single = z.ndim == 1
        zb = z[None] if single else z
        eye = np.broadcast_to(np.eye(self.input_dim), (zb.shape[0], self.input_dim, self.input_dim))
        _, X, _ = self.forward_tangent(zb, eye)
        J = np.swapaxes(X, 1, 2)
        return J[0] if single else J

    def jacobian_dz(self, z) -> np.ndarray:
        """Second derivatives ``d2x_i / dz_j dz_k`` shaped ``(out, in, in)`` (batched: leading B)."""
        z = self._check_input(z)
        single = z.ndim == 1
        h = z[None] if single else z
        B, n = h.shape
        H = np.broadcast_to(np.eye(n), (B, n, n)).copy()  # (B, j, width)
        HH = np.zeros((B, n, n, n))  # (B, j, k, width)
        for w, b, act, res in zip(self.weights, self.biases, self.activations, self.residual):
            a = h @ w.T + b
            A = H @ w.T
            AA = HH @ w.T
            f, d1, d2 = activation_derivs(act, a, order=2)
            FAA = d2[:, None, None, :] * A[:, :, None, :] * A[:, None, :, :] + d1[:, None, None, :] * AA
            FA = d1[:, None, :] * A
            if res:
                h, H, HH = h + f, H + FA, HH + FAA
            else:
                h, H, HH = f, FA, FAA
        out = np.moveaxis(HH, 3, 1)
        return out[0] if single else out


def mlp_forward(net: Mlp, z) -> np.ndarray:
    return net.forward(z)


def mlp_jacobian(net: Mlp, z) -> np.ndarray:
    return net.jacobian(z)


def mlp_jacobian_dz(net: Mlp, z) -> np.ndarray:
    return net.jacobian_dz(z)


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, learning_rate=1e-3, **kw) -> "AdamState":
        return cls(learning_rate=learning_rate,
                   m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params], **kw)

    def copy(self) -> "AdamState":
        return AdamState(self.learning_rate, self.beta1, self.beta2, self.eps, self.step,
                         [m.copy() for m in self.m], [v.copy() for v in self.v])


def adam_step(state: AdamState, params, grads) -> list[np.ndarray]:
    """One bias-corrected Adam update (descent).  Mutates ``state``; returns new arrays."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if not (len(params) == len(grads) == len(state.m)):
        raise DimensionError("params, grads and moment lists differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise DimensionError(f"shape mismatch at parameter {i}: {p.shape} vs {g.shape}")
        m = b1 * state.m[i] + (1.0 - b1) * g
        v = b2 * state.v[i] + (1.0 - b2) * (g * g)
        state.m[i], state.v[i] = m, v
        out.append(p - state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps))
    return out


def finite_diff_check(f: Callable, analytic_grad: Callable, points, h: float = 1e-5) -> float:
    """Largest relative deviation of ``analytic_grad`` from central differences of ``f``.

    ``f`` maps a 1-d point to an array of any shape; ``analytic_grad`` must
    return that shape with one extra trailing axis over the input coordinates.
    Errors are measured in max-norm relative to the finite-difference value.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    worst = 0.0
    for p in points:
        p = np.asarray(p, dtype=np.float64).reshape(-1)
        cols = []
        for j in range(p.size):
            e = np.zeros_like(p)
            e[j] = h
            cols.append((np.asarray(f(p + e)) - np.asarray(f(p - e))) / (2.0 * h))
        fd = np.stack(cols, axis=-1)
        an = np.asarray(analytic_grad(p), dtype=np.float64).reshape(fd.shape)
        scale = max(np.max(np.abs(fd)), 1e-12)
        worst = max(worst, float(np.max(np.abs(an - fd)) / scale))
    return worst


# ---------------------------------------------------------------------------
# Parameter files: 8-byte little-endian header length, JSON header, then the
# float64 payload (per network, per layer: weights row-major, then biases).

_MAGIC = b"LGEO"


def write_params(path, networks: dict[str, Mlp], meta: dict | None = None) -> None:
    header = {"format": "latentgeo-params", "version": 1, "byteorder": "little",
              "dtype": "float64", "meta": meta or {}, "networks": []}
    chunks = []
    for name, net in networks.items():
        header["networks"].append({
            "name": name,
            "input_dim": net.input_dim,
            "output_dim": net.output_dim,
            "layers": [{"shape": list(w.shape), "activation": a.value, "residual": bool(r)}
                       for w, a, r in zip(net.weights, net.activations, net.residual)],
        })
        for w, b in zip(net.weights, net.biases):
            chunks += [w.astype("<f8").tobytes(order="C"), b.astype("<f8").tobytes()]
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<Q", len(raw)) + raw)
        for c in chunks:
            fh.write(c)


def read_params(path) -> tuple[dict[str, Mlp], dict]:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC or len(data) < 12:
        raise FileFormatError(f"{path}: not a parameter file")
    (hlen,) = struct.unpack("<Q", data[4:12])
    header = json.loads(data[12:12 + hlen])
    offset = 12 + hlen
    nets = {}
    for spec in header["networks"]:
        ws, bs, acts, res = [], [], [], []
        for layer in spec["layers"]:
            rows, cols = layer["shape"]
            n = rows * cols
            if offset + 8 * (n + rows) > len(data):
                raise FileFormatError(f"{path}: truncated payload")
            ws.append(np.frombuffer(data, "<f8", n, offset).reshape(rows, cols).copy())
            offset += 8 * n
            bs.append(np.frombuffer(data, "<f8", rows, offset).copy())
            offset += 8 * rows
            acts.append(layer["activation"])
            res.append(layer["residual"])
        nets[spec["name"]] = Mlp(ws, bs, acts, res)
    if offset != len(data):
        raise FileFormatError(f"{path}: {len(data) - offset} trailing bytes after payload")
    return nets, header["meta"]
