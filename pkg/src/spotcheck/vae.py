"""MLP variational autoencoder with hand-written backprop.

The encoder trunk and decoder trunk are ReLU layers; the decoder mean goes
through a sigmoid and is then renormalised to sum to one like the inputs.
In NLL mode a linear head gives the log-variance of each output feature and
the variance is ``exp(head) + 1e-4``; in MSE mode the variance is fixed at 1.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DivergenceError, InputError
from .numerics import AdamState, Prng, adam_step, log_mean_exp
from .records import ANOMALY, NORMAL, VAE, AnomalyRecord

FORMAT = "vae-v1"
NLL = "nll"
MSE = "mse"
VAR_FLOOR = 1e-4
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class VaeTopology:
    input_dim: int
    encoder_hidden: tuple[int, ...]
    latent_dim: int
    loss_mode: str = NLL

    def __post_init__(self):
        object.__setattr__(self, "encoder_hidden", tuple(int(h) for h in self.encoder_hidden))
        if self.loss_mode not in (NLL, MSE):
            raise InputError(f"loss mode must be {NLL!r} or {MSE!r}")
        if self.input_dim < 1 or self.latent_dim < 1 or any(h < 1 for h in self.encoder_hidden):
            raise InputError("all layer widths must be >= 1")

    @property
    def decoder_hidden(self) -> tuple[int, ...]:
        return self.encoder_hidden[::-1]


# id -> (encoder hidden widths, latent dim, loss mode); ids 1-3 NLL, 4-6 MSE
TOPOLOGY_PRESETS = {
    1: ((50,), 25, NLL),
    2: ((50, 35), 25, NLL),
    3: ((50, 25), 2, NLL),
    4: ((50,), 25, MSE),
    5: ((50, 35), 25, MSE),
    6: ((50, 25), 2, MSE),
}


def preset_topology(config_id: int, input_dim: int) -> VaeTopology:
    try:
        hidden, d, mode = TOPOLOGY_PRESETS[int(config_id)]
    except KeyError:
        raise InputError(f"topology id must be 1-6, got {config_id}") from None
    return VaeTopology(input_dim, hidden, d, mode)


@dataclass
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InputError("epochs and batch_size must be >= 1")


@dataclass
class VaeModel:
    topology: VaeTopology
    params: dict[str, np.ndarray]
    seed: int = 0
    scaling: str = "l1"
    meta: dict = field(default_factory=dict)

    @property
    def latent_dim(self) -> int:
        return self.topology.latent_dim

    def layer_names(self) -> list[str]:
        t = self.topology
        names = [f"enc{i}" for i in range(len(t.encoder_hidden))] + ["mu_z", "logvar_z"]
        names += [f"dec{i}" for i in range(len(t.decoder_hidden))] + ["mu_x"]
        if t.loss_mode == NLL:
            names.append("logvar_x")
        return names

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        t = self.topology
        shapes = {}
        prev = t.input_dim
        for i, h in enumerate(t.encoder_hidden):
            shapes[f"enc{i}"] = (prev, h)
            prev = h
        shapes["mu_z"] = shapes["logvar_z"] = (prev, t.latent_dim)
        prev = t.latent_dim
        for i, h in enumerate(t.decoder_hidden):
            shapes[f"dec{i}"] = (prev, h)
            prev = h
        shapes["mu_x"] = (prev, t.input_dim)
        if t.loss_mode == NLL:
            shapes["logvar_x"] = (prev, t.input_dim)
        return shapes

    def copy(self) -> "VaeModel":
        return VaeModel(self.topology, {k: v.copy() for k, v in self.params.items()},
                        self.seed, self.scaling, dict(self.meta))


def init_vae(topology: VaeTopology, seed: int) -> VaeModel:
    """Glorot-uniform weights from the seeded stream, zero biases."""
    prng = Prng(seed)
    model = VaeModel(topology, {}, seed=seed)
    for name, (fan_in, fan_out) in model.layer_shapes().items():
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        u = prng.uniforms(fan_in * fan_out).reshape(fan_in, fan_out)
        model.params[f"{name}.w"] = (2.0 * u - 1.0) * bound
        model.params[f"{name}.b"] = np.zeros(fan_out)
    return model


def _linear(p, name, h):
    return h @ p[f"{name}.w"] + p[f"{name}.b"]


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"non-finite values in {what}")


def _encode(model, X):
    p = model.params
    acts = [X]
    h = X
    for i in range(len(model.topology.encoder_hidden)):
        h = np.maximum(_linear(p, f"enc{i}", h), 0.0)
        acts.append(h)
    return _linear(p, "mu_z", h), _linear(p, "logvar_z", h), acts


def _decode(model, Z):
    p = model.params
    acts = [Z]
    h = Z
    for i in range(len(model.topology.decoder_hidden)):
        h = np.maximum(_linear(p, f"dec{i}", h), 0.0)
        acts.append(h)
    s = expit(_linear(p, "mu_x", h))
    mu = s / s.sum(axis=-1, keepdims=True)
    if model.topology.loss_mode == NLL:
        head = _linear(p, "logvar_x", h)
        var = np.exp(head) + VAR_FLOOR
    else:
        head = None
        var = np.ones_like(mu)
    return mu, var, s, head, acts


def encode(model: VaeModel, x):
    """Return ``(mu_z, logvar_z)``; works on one row or a batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.topology.input_dim:
        raise InputError(f"expected {model.topology.input_dim} features, got {x.shape[-1]}")
    mu, lv, _ = _encode(model, x)
    _check_finite(mu, "encoder mean")
    _check_finite(lv, "encoder log-variance")
    return mu, lv


def reparameterize(prng: Prng, mu_z, logvar_z):
    mu_z = np.asarray(mu_z, dtype=np.float64)
    logvar_z = np.asarray(logvar_z, dtype=np.float64)
    if mu_z.shape != logvar_z.shape:
        raise InputError("mean and log-variance shapes differ")
    eps = prng.normals(mu_z.size).reshape(mu_z.shape)
    return mu_z + np.exp(0.5 * logvar_z) * eps


def decode(model: VaeModel, z):
    """Return ``(mu_x, logvar_x)`` where ``exp(logvar_x)`` is the floored variance (zeros in MSE mode)."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.latent_dim:
        raise InputError(f"expected {model.latent_dim} latent coordinates, got {z.shape[-1]}")
    mu, var, *_ = _decode(model, z)
    return mu, np.log(var)


def kl_divergence(mu_z, logvar_z):
    """KL(N(mu, sigma^2) || N(0, I)) summed over the last axis."""
    mu_z = np.asarray(mu_z, dtype=np.float64)
    logvar_z = np.asarray(logvar_z, dtype=np.float64)
    return -0.5 * np.sum(1.0 + logvar_z - mu_z ** 2 - np.exp(logvar_z), axis=-1)


def gaussian_nll(x, mu, var):
    """Per-row Gaussian negative log-likelihood without the log(2 pi) constant."""
    return np.sum(0.5 * np.log(var) + (x - mu) ** 2 / (2.0 * var), axis=-1)


def half_sq_error(x, mu):
    return 0.5 * np.sum((x - mu) ** 2, axis=-1)


def _decoder_backward(model, Z, d_mu, d_var):
    """Backprop through the decoder given dL/d(mu_x) and dL/d(var_x)."""
    p = model.params
    mu_x, var_x, s, head, acts = _decode(model, Z)
    g = {}
    # mu = s / sum(s)
    S = s.sum(axis=-1, keepdims=True)
    d_s = (d_mu - np.sum(d_mu * mu_x, axis=-1, keepdims=True)) / S
    d_o = d_s * s * (1.0 - s)
    h = acts[-1]
    g["mu_x.w"] = h.T @ d_o
    g["mu_x.b"] = d_o.sum(axis=0)
    d_h = d_o @ p["mu_x.w"].T
    if model.topology.loss_mode == NLL and d_var is not None:
        d_head = d_var * np.exp(head)
        g["logvar_x.w"] = h.T @ d_head
        g["logvar_x.b"] = d_head.sum(axis=0)
        d_h = d_h + d_head @ p["logvar_x.w"].T
    for i in reversed(range(len(model.topology.decoder_hidden))):
        d_pre = d_h * (acts[i + 1] > 0)
        g[f"dec{i}.w"] = acts[i].T @ d_pre
        g[f"dec{i}.b"] = d_pre.sum(axis=0)
        d_h = d_pre @ p[f"dec{i}.w"].T
    return d_h, g


def _encoder_backward(model, X, d_muz, d_lvz):
    p = model.params
    _, _, acts = _encode(model, X)
    g = {}
    h = acts[-1]
    g["mu_z.w"] = h.T @ d_muz
    g["mu_z.b"] = d_muz.sum(axis=0)
    g["logvar_z.w"] = h.T @ d_lvz
    g["logvar_z.b"] = d_lvz.sum(axis=0)
    d_h = d_muz @ p["mu_z.w"].T + d_lvz @ p["logvar_z.w"].T
    for i in reversed(range(len(model.topology.encoder_hidden))):
        d_pre = d_h * (acts[i + 1] > 0)
        g[f"enc{i}.w"] = acts[i].T @ d_pre
        g[f"enc{i}.b"] = d_pre.sum(axis=0)
        d_h = d_pre @ p[f"enc{i}.w"].T
    return d_h, g


def encoder_vjp(model: VaeModel, x, d_mu_z, d_logvar_z=None):
    """Vector-Jacobian product of the encoder outputs with respect to the input rows."""
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d_mu_z = np.atleast_2d(d_mu_z)
    d_lv = np.zeros_like(d_mu_z) if d_logvar_z is None else np.atleast_2d(d_logvar_z)
    return _encoder_backward(model, X, d_mu_z, d_lv)[0]


def decoder_vjp(model: VaeModel, z, d_mu_x, d_var_x=None):
    """Vector-Jacobian product of the decoder mean (and variance) with respect to the latent rows."""
    Z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    return _decoder_backward(model, Z, np.atleast_2d(d_mu_x), None if d_var_x is None else np.atleast_2d(d_var_x))[0]


def loss_and_grads(model: VaeModel, X, eps):
    """Mean negative ELBO over the rows of ``X`` for fixed noise ``eps`` and its gradients."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    B = X.shape[0]
    mu_z, lv_z, _ = _encode(model, X)
    sd_z = np.exp(0.5 * lv_z)
    Z = mu_z + sd_z * eps
    mu_x, var_x, *_ = _decode(model, Z)
    kl = kl_divergence(mu_z, lv_z)
    if model.topology.loss_mode == NLL:
        recon = gaussian_nll(X, mu_x, var_x)
        d_var = (0.5 / var_x - 0.5 * (X - mu_x) ** 2 / var_x ** 2) / B
    else:
        recon = half_sq_error(X, mu_x)
        d_var = None
    value = float(np.mean(kl + recon))
    if not math.isfinite(value):
        raise DivergenceError("non-finite loss")
    d_mu = (mu_x - X) / var_x / B
    d_z, g = _decoder_backward(model, Z, d_mu, d_var)
    d_muz = d_z + mu_z / B
    d_lvz = d_z * eps * 0.5 * sd_z - 0.5 * (1.0 - np.exp(lv_z)) / B
    _, g_enc = _encoder_backward(model, X, d_muz, d_lvz)
    g.update(g_enc)
    return value, g


def loss(model: VaeModel, batch, prng: Prng, L: int = 1):
    """Negative ELBO averaged over the batch and ``L`` latent draws per row."""
    X = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if X.shape[0] == 0:
        raise InputError("empty batch")
    if L > 1:
        X = np.tile(X, (L, 1))
    eps = prng.normals(X.shape[0] * model.latent_dim).reshape(X.shape[0], model.latent_dim)
    return loss_and_grads(model, X, eps)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,train_loss,val_loss\n")
            for i, (a, b) in enumerate(zip(self.train_loss, self.val_loss), start=1):
                fh.write(f"{i},{a:.17g},{b:.17g}\n")


def train_vae(X_train, X_val, topology: VaeTopology, config: TrainConfig | None = None):
    """Mini-batch Adam on the negative ELBO for a fixed number of epochs.

    Returns ``(model, history)``. On divergence a :class:`DivergenceError`
    carrying the history so far is raised.
    """
    config = config or TrainConfig()
    X = np.asarray(X_train, dtype=np.float64)
    Xv = np.asarray(X_val, dtype=np.float64) if X_val is not None and len(X_val) else None
    if X.ndim != 2 or len(X) == 0 or X.shape[1] != topology.input_dim:
        raise InputError("training matrix does not match the topology input width")
    model = init_vae(topology, config.seed)
    model.meta = {"train": asdict(config)}
    adam = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    prng = Prng(config.seed).spawn(0x7EA1)
    val_prng = Prng(config.seed).spawn(0x7A1D)
    hist = TrainHistory()
    m = len(X)
    for epoch in range(1, config.epochs + 1):
        order = list(range(m))
        prng.shuffle(order)
        total = 0.0
        for start in range(0, m, config.batch_size):
            idx = order[start:start + config.batch_size]
            try:
                value, grads = loss(model, X[idx], prng)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch}, batch {start // config.batch_size}: {exc}", hist) from None
            total += value * len(idx)
            adam_step(adam, model.params, grads)
        hist.train_loss.append(total / m)
        if Xv is not None:
            try:
                hist.val_loss.append(loss(model, Xv, val_prng)[0])
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch}, validation: {exc}", hist) from None
        else:
            hist.val_loss.append(float("nan"))
    return model, hist


def _log_density(x, mu, var):
    return np.sum(-0.5 * (LOG_2PI + np.log(var)) - (x - mu) ** 2 / (2.0 * var), axis=-1)


def recon_log_prob(model: VaeModel, x, prng: Prng, L: int = 128) -> float:
    """Log of the Monte-Carlo reconstruction probability of one datapoint.

    Per-sample Gaussian log-densities are combined with log-mean-exp, which
    avoids the underflow of averaging raw densities.
    """
    if L < 1:
        raise InputError("L must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    mu_z, lv_z = encode(model, x)
    eps = prng.normals(L * model.latent_dim).reshape(L, model.latent_dim)
    Z = mu_z + np.exp(0.5 * lv_z) * eps
    mu, var, *_ = _decode(model, Z)
    return log_mean_exp(_log_density(x, mu, var))


def vae_score(model: VaeModel, rows, alpha: float, seed: int = 0, L: int = 128) -> list[AnomalyRecord]:
    """Verdict is anomaly iff log reconstruction probability < alpha.

    Row ``i`` draws its latent samples from ``Prng(seed ^ i)``.
    """
    if math.isnan(alpha):
        raise InputError("threshold must not be NaN")
    base = Prng(seed)
    out = []
    for i, row in enumerate(rows):
        score = recon_log_prob(model, row.values, base.spawn(i), L)
        out.append(AnomalyRecord(row.app_id, score, ANOMALY if score < alpha else NORMAL, VAE))
    return out


def to_json(model: VaeModel) -> dict:
    t = model.topology
    layers = [{"name": n, "w": model.params[f"{n}.w"].tolist(), "b": model.params[f"{n}.b"].tolist()}
              for n in model.layer_names()]
    return {
        "format": FORMAT,
        "topology": {"input_dim": t.input_dim, "encoder_hidden": list(t.encoder_hidden), "latent_dim": t.latent_dim},
        "loss_mode": t.loss_mode,
        "seed": model.seed,
        "scaling": model.scaling,
        "layers": layers,
        "meta": model.meta,
    }


def from_json(doc: dict) -> VaeModel:
    if doc.get("format") != FORMAT:
        raise InputError(f"not a {FORMAT} model file")
    t = doc["topology"]
    topo = VaeTopology(int(t["input_dim"]), tuple(t["encoder_hidden"]), int(t["latent_dim"]), doc["loss_mode"])
    model = VaeModel(topo, {}, seed=int(doc.get("seed", 0)), scaling=doc.get("scaling", "l1"), meta=doc.get("meta", {}))
    shapes = model.layer_shapes()
    names = model.layer_names()
    if len(doc["layers"]) != len(names):
        raise InputError("layer count does not match topology")
    for name, layer in zip(names, doc["layers"]):
        w = np.array(layer["w"], dtype=np.float64).reshape(shapes[name])
        b = np.array(layer["b"], dtype=np.float64).reshape(shapes[name][1])
        model.params[f"{name}.w"] = w
        model.params[f"{name}.b"] = b
    return model


def save(model: VaeModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(to_json(model), fh)


def load(path) -> VaeModel:
    with open(path) as fh:
        return from_json(json.load(fh))
