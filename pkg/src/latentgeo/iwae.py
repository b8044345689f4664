"""Importance-weighted autoencoder with a diagonal-Gaussian encoder."""
from __future__ import annotations

import dataclasses
import enum
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import AdamState, DimensionError, FileFormatError, Mlp, adam_step, read_params, write_params

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
BERNOULLI_CLAMP = 1e-7


class Likelihood(str, enum.Enum):
    GAUSSIAN = "gaussian"  # global log-variance shared by all output dims
    BERNOULLI = "bernoulli"


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite bound {value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.value = epoch, batch, value


@dataclass
class TrainConfig:
    K: int = 50
    learning_rate: float = 1e-4
    batch_size: int = 20
    epochs: int = 200
    rng_seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


# Learning rate, K and batch size per experiment; epoch counts are our own.
PRESETS = {
    "pendulum": TrainConfig(K=50, learning_rate=1e-4, batch_size=20, epochs=200),
    "robot": TrainConfig(K=15, learning_rate=1e-3, batch_size=150, epochs=500),
    "mnist": TrainConfig(K=50, learning_rate=1e-4, batch_size=20, epochs=50),
}


@dataclass
class IwaeModel:
    encoder: Mlp  # shared tanh trunk
    mean_head: Mlp  # linear
    std_head: Mlp  # softplus
    decoder: Mlp  # mean of p(x|z)
    likelihood: Likelihood
    log_var: float = math.log(0.01)

    @classmethod
    def create(cls, data_dim: int, latent_dim: int, rng: np.random.Generator,
               hidden: int = 512, likelihood="gaussian", encoder_layers: int = 2,
               decoder_layers: int = 2, residual_blocks: int = 0,
               residual_width: int = 128) -> "IwaeModel":
        """Build the encoder/decoder pair.

        ``residual_blocks > 0`` replaces the decoder's hidden stack with an
        input layer, that many identity-skip tanh blocks, and an output layer.
        """
        likelihood = Likelihood(likelihood)
        enc = Mlp.init([data_dim] + [hidden] * encoder_layers, "tanh", rng)
        mean_head = Mlp.init([hidden, latent_dim], "linear", rng)
        std_head = Mlp.init([hidden, latent_dim], "softplus", rng)
        out_act = "softplus" if likelihood is Likelihood.GAUSSIAN else "sigmoid"
        if residual_blocks:
            sizes = [latent_dim] + [residual_width] * (residual_blocks + 1) + [data_dim]
            acts = ["tanh"] * (residual_blocks + 1) + [out_act]
            res = [False] + [True] * residual_blocks + [False]
            dec = Mlp.init(sizes, acts, rng, residual=res)
        else:
            dec = Mlp.init([latent_dim] + [hidden] * decoder_layers + [data_dim],
                           ["tanh"] * decoder_layers + [out_act], rng)
        return cls(enc, mean_head, std_head, dec, likelihood)

    @property
    def latent_dim(self) -> int:
        return self.decoder.input_dim

    @property
    def data_dim(self) -> int:
        return self.decoder.output_dim

    def networks(self) -> dict[str, Mlp]:
        return {"encoder": self.encoder, "mean_head": self.mean_head,
                "std_head": self.std_head, "decoder": self.decoder}

    def params(self) -> list[np.ndarray]:
        out = []
        for net in self.networks().values():
            out += net.params
        if self.likelihood is Likelihood.GAUSSIAN:
            out.append(np.array([self.log_var]))
        return out

    def set_params(self, params) -> None:
        i = 0
        for net in self.networks().values():
            n = len(net.params)
            net.set_params(params[i:i + n])
            i += n
        if self.likelihood is Likelihood.GAUSSIAN:
            self.log_var = float(params[i][0])

    def copy(self) -> "IwaeModel":
        return IwaeModel(self.encoder.copy(), self.mean_head.copy(), self.std_head.copy(),
                         self.decoder.copy(), self.likelihood, self.log_var)


def encode(model: IwaeModel, x):
    """Posterior mean and standard deviation for ``x`` (vector or batch)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.data_dim:
        raise DimensionError(f"expected data dim {model.data_dim}, got {x.shape[-1]}")
    h = model.encoder.forward(x)
    return model.mean_head.forward(h), model.std_head.forward(h)


def decoder_mean(model: IwaeModel, z) -> np.ndarray:
    return model.decoder.forward(z)


def reparam_sample(mu, sigma, eps) -> np.ndarray:
    return np.asarray(mu) + np.asarray(sigma) * np.asarray(eps)


def _check_binary(x):
    if not np.all((x == 0.0) | (x == 1.0)):
        raise ValueError("Bernoulli likelihood needs x in {0, 1}")


def _inv_var(model: IwaeModel) -> float:
    # overflow becomes inf so that divergence is caught by the finiteness checks
    with np.errstate(over="ignore"):
        return float(np.exp(-model.log_var))


def _loglik_from_mean(model: IwaeModel, x, mean):
    if model.likelihood is Likelihood.GAUSSIAN:
        r = x - mean
        return -0.5 * (np.sum(r * r, axis=-1) * _inv_var(model)
                       + x.shape[-1] * (model.log_var + LOG_2PI))
    m = np.clip(mean, BERNOULLI_CLAMP, 1.0 - BERNOULLI_CLAMP)
    return np.sum(x * np.log(m) + (1.0 - x) * np.log1p(-m), axis=-1)


def log_likelihood(model: IwaeModel, x, z) -> float | np.ndarray:
    """``ln p(x|z)`` (the prior is not included)."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.shape[-1] != model.data_dim or z.shape[-1] != model.latent_dim:
        raise DimensionError("x / z dimension mismatch")
    if model.likelihood is Likelihood.BERNOULLI:
        _check_binary(x)
    return _loglik_from_mean(model, x, model.decoder.forward(z))


def log_weights(model: IwaeModel, x, eps) -> np.ndarray:
    """``ln w_k = ln p(x|z_k) + ln p(z_k) - ln q(z_k|x)`` for one datapoint and draws ``eps`` (K, Nz)."""
    x = np.asarray(x, dtype=np.float64)
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    if model.likelihood is Likelihood.BERNOULLI:
        _check_binary(x)
    mu, sigma = encode(model, x)
    z = reparam_sample(mu, sigma, eps)
    ll = _loglik_from_mean(model, x, model.decoder.forward(z))
    nz = model.latent_dim
    log_prior = -0.5 * np.sum(z * z, axis=-1) - 0.5 * nz * LOG_2PI
    log_q = -0.5 * np.sum(eps * eps, axis=-1) - np.sum(np.log(sigma)) - 0.5 * nz * LOG_2PI
    return ll + log_prior - log_q


def log_mean_exp(a, axis=-1):
    a = np.asarray(a, dtype=np.float64)
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.mean(np.exp(a - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def iwae_estimate(model: IwaeModel, x, K: int, eps) -> float:
    eps = np.atleast_2d(eps)
    if eps.shape[0] != K:
        raise ValueError(f"need {K} draws, got {eps.shape[0]}")
    return float(log_mean_exp(log_weights(model, x, eps)))


def elbo_estimate(model: IwaeModel, x, eps) -> float:
    return iwae_estimate(model, x, 1, np.reshape(eps, (1, -1)))


def batch_bound(model: IwaeModel, X, eps, want_grads: bool = True):
    """Mean IWAE bound over a batch ``X`` (B, Nx) with draws ``eps`` (B, K, Nz).

    Returns ``(bound, grads)``; ``grads`` are gradients of the *negative*
    bound, aligned with :meth:`IwaeModel.params`.
    """
    B, K, nz = eps.shape
    hid, _, enc_cache = model.encoder.forward_tangent(X, keep_cache=want_grads)
    mu, _, mu_cache = model.mean_head.forward_tangent(hid, keep_cache=want_grads)
    sigma, _, sd_cache = model.std_head.forward_tangent(hid, keep_cache=want_grads)
    z = (mu[:, None, :] + sigma[:, None, :] * eps).reshape(B * K, nz)
    mean, _, dec_cache = model.decoder.forward_tangent(z, keep_cache=want_grads)
    nx = mean.shape[-1]
    mean3 = mean.reshape(B, K, nx)
    xr = X[:, None, :]
    ll = _loglik_from_mean(model, xr, mean3)
    log_prior = (-0.5 * np.sum(z * z, axis=-1) - 0.5 * nz * LOG_2PI).reshape(B, K)
    log_q = (-0.5 * np.sum(eps * eps, axis=-1) - np.sum(np.log(sigma), axis=-1)[:, None]
             - 0.5 * nz * LOG_2PI)
    lw = ll + log_prior - log_q
    bounds = log_mean_exp(lw, axis=1)
    bound = float(np.mean(bounds))
    if not want_grads:
        return bound, None

    # d(mean bound)/d(ln w_bk): per-datapoint softmax over k, scaled by 1/B
    wts = np.exp(lw - bounds[:, None]) / (K * B)
    wf = wts[:, :, None]
    if model.likelihood is Likelihood.GAUSSIAN:
        inv_var = _inv_var(model)
        r = xr - mean3
        g_mean = r * (wf * inv_var)
        g_logvar = float(np.sum(wts * 0.5 * (np.sum(r * r, axis=-1) * inv_var - nx)))
    else:
        m = np.clip(mean3, BERNOULLI_CLAMP, 1.0 - BERNOULLI_CLAMP)
        g_mean = wf * (xr - m) / (m * (1.0 - m))
        g_mean[m != mean3] = 0.0  # clamped means carry no gradient
        g_logvar = None
    g_z, _, dec_grads = model.decoder.backward_tangent(dec_cache, g_mean.reshape(B * K, nx))
    wf = wts.reshape(B * K, 1)
    g_z = (g_z - wf * z).reshape(B, K, nz)
    g_mu = g_z.sum(axis=1)
    g_sigma = np.sum(g_z * eps, axis=1) + wts.sum(axis=1)[:, None] / sigma
    g_h1, _, mu_grads = model.mean_head.backward_tangent(mu_cache, g_mu)
    g_h2, _, sd_grads = model.std_head.backward_tangent(sd_cache, g_sigma)
    _, _, enc_grads = model.encoder.backward_tangent(enc_cache, g_h1 + g_h2)
    grads = [-g for g in enc_grads + mu_grads + sd_grads + dec_grads]
    if g_logvar is not None:
        grads.append(np.array([-g_logvar]))
    return bound, grads


@dataclass
class TrainResult:
    model: IwaeModel
    trace: list[float]
    initial_bound: float


def evaluate_bound(model: IwaeModel, X, K: int, rng: np.random.Generator,
                   batch_size: int = 200) -> float:
    """Mean IWAE bound over ``X`` with fresh draws from ``rng``."""
    total = 0.0
    for s in range(0, X.shape[0], batch_size):
        xb = X[s:s + batch_size]
        eps = rng.standard_normal((xb.shape[0], K, model.latent_dim))
        b, _ = batch_bound(model, xb, eps, want_grads=False)
        total += b * xb.shape[0]
    return total / X.shape[0]


def train(model: IwaeModel, data, config: TrainConfig, progress=None) -> TrainResult:
    """Maximise the IWAE bound with minibatch Adam.  Returns a trained copy.

    The trace holds the mean minibatch bound of every epoch.  All randomness
    (shuffling, draws) comes from ``config.rng_seed``.
    """
    X = np.asarray(data, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("dataset must be a nonempty (count, dim) array")
    if X.shape[1] != model.data_dim:
        raise DimensionError(f"dataset dim {X.shape[1]} != model data dim {model.data_dim}")
    if model.likelihood is Likelihood.BERNOULLI:
        _check_binary(X)
    model = model.copy()
    rng = np.random.default_rng(config.rng_seed)
    eval_rng = np.random.default_rng([config.rng_seed, 1])
    initial = evaluate_bound(model, X[: min(len(X), 500)], config.K, eval_rng)
    state = AdamState.for_params(model.params(), learning_rate=config.learning_rate)
    params = model.params()
    trace = []
    n = X.shape[0]
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        acc, count = 0.0, 0
        for bi, s in enumerate(range(0, n, config.batch_size)):
            idx = perm[s:s + config.batch_size]
            eps = rng.standard_normal((idx.size, config.K, model.latent_dim))
            bound, grads = batch_bound(model, X[idx], eps)
            if not math.isfinite(bound) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDivergedError(epoch, bi, bound)
            params = adam_step(state, params, grads)
            model.set_params(params)
            acc += bound * idx.size
            count += idx.size
        trace.append(acc / count)
        if progress is not None:
            progress(epoch, trace[-1])
        log.debug("epoch %d bound %.4f", epoch, trace[-1])
    return TrainResult(model, trace, initial)


# ---------------------------------------------------------------------------
# checkpoints: parameter file + JSON sidecar

def save_checkpoint(model: IwaeModel, directory, config: TrainConfig | None = None,
                    final_bound: float | None = None, extra: dict | None = None) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    params_path = d / "model.params"
    write_params(params_path, model.networks())
    side = {
        "likelihood": model.likelihood.value,
        "latent_dim": model.latent_dim,
        "data_dim": model.data_dim,
        "log_var": model.log_var,
        "train_config": dataclasses.asdict(config) if config else None,
        "final_bound": final_bound,
    }
    if extra:
        side.update(extra)
    side_path = d / "model.json"
    side_path.write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return [params_path, side_path]


def load_checkpoint(path) -> tuple[IwaeModel, dict]:
    """Load from a checkpoint directory (or its ``model.params`` file)."""
    p = Path(path)
    d = p if p.is_dir() else p.parent
    nets, _ = read_params(d / "model.params")
    side = json.loads((d / "model.json").read_text())
    missing = {"encoder", "mean_head", "std_head", "decoder"} - set(nets)
    if missing:
        raise FileFormatError(f"checkpoint lacks networks {sorted(missing)}")
    model = IwaeModel(nets["encoder"], nets["mean_head"], nets["std_head"], nets["decoder"],
                      Likelihood(side["likelihood"]), float(side["log_var"]))
    if model.latent_dim != side["latent_dim"] or model.data_dim != side["data_dim"]:
        raise ValueError("checkpoint sidecar disagrees with stored networks")
    return model, side
