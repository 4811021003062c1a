"""Dense binary classifier written directly against numpy.

Hidden layers are ``Linear -> [BatchNorm] -> ReLU -> [Dropout]`` and the
output is a single sigmoid unit. Everything is float64.

Flat layout (used for aggregation, Adam and checkpoints): layer by layer,
weights row-major ``[fan_out, fan_in]``, then bias, then, for batch-normalized
layers, gamma, beta, running mean and running variance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, ConfigurationError, DegenerateBatchError, ShapeError, StateError
from .rng import pack_state

PROB_EPS = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

PRESETS = {
    "desk": (64, 32),
    "full": (1024, 768, 512, 256, 128, 64, 32),
}


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    hidden_widths: tuple[int, ...] = PRESETS["desk"]
    dropout_rates: tuple[float, ...] | None = None
    use_batchnorm: bool = True
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def __post_init__(self):
        widths = tuple(int(w) for w in self.hidden_widths)
        object.__setattr__(self, "hidden_widths", widths)
        if self.dropout_rates is None:
            object.__setattr__(self, "dropout_rates", (0.2,) * min(3, len(widths)))
        else:
            object.__setattr__(self, "dropout_rates", tuple(float(r) for r in self.dropout_rates))
        if int(self.input_dim) < 1:
            raise ConfigurationError("must be a positive integer", "input_dim")
        if not widths:
            raise ConfigurationError("at least one hidden layer is required", "hidden_widths")
        if any(w < 1 for w in widths):
            raise ConfigurationError("widths must be positive", "hidden_widths")
        if len(self.dropout_rates) > len(widths):
            raise ConfigurationError("more rates than hidden layers", "dropout_rates")
        if any(not 0.0 <= r < 1.0 for r in self.dropout_rates):
            raise ConfigurationError("rates must lie in [0, 1)", "dropout_rates")
        if not self.learning_rate > 0:
            raise ConfigurationError("must be positive", "learning_rate")
        for key in ("adam_beta1", "adam_beta2"):
            if not 0.0 < getattr(self, key) < 1.0:
                raise ConfigurationError("must lie in (0, 1)", key)
        if not self.adam_epsilon > 0:
            raise ConfigurationError("must be positive", "adam_epsilon")

    @classmethod
    def preset(cls, name, input_dim, **overrides):
        if name not in PRESETS:
            raise ConfigurationError(f"unknown preset {name!r}", "model")
        return cls(input_dim=input_dim, hidden_widths=PRESETS[name], **overrides)

    def layer_dropout(self):
        """Dropout rate for every hidden layer; rates are aligned to the last layers."""
        pad = len(self.hidden_widths) - len(self.dropout_rates)
        return (0.0,) * pad + self.dropout_rates


@dataclass
class Layer:
    weights: np.ndarray
    bias: np.ndarray
    bn_gamma: np.ndarray | None = None
    bn_beta: np.ndarray | None = None
    bn_mean: np.ndarray | None = None
    bn_var: np.ndarray | None = None

    @property
    def fan_out(self):
        return self.weights.shape[0]

    @property
    def fan_in(self):
        return self.weights.shape[1]

    @property
    def has_bn(self):
        return self.bn_gamma is not None

    def arrays(self):
        out = [self.weights, self.bias]
        if self.has_bn:
            out += [self.bn_gamma, self.bn_beta, self.bn_mean, self.bn_var]
        return out

    def size(self):
        return self.fan_out * (self.fan_in + 1 + (4 if self.has_bn else 0))


@dataclass
class ModelParameters:
    layers: list[Layer]

    @property
    def input_dim(self):
        return self.layers[0].fan_in

    def size(self):
        return sum(layer.size() for layer in self.layers)

    def copy(self):
        return unflatten(self, flatten(self))

    def same_shape(self, other):
        return len(self.layers) == len(other.layers) and all(
            a.weights.shape == b.weights.shape and a.has_bn == b.has_bn
            for a, b in zip(self.layers, other.layers)
        )


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)

    @classmethod
    def fresh(cls, params):
        return cls.zeros(params.size())

    def copy(self):
        return AdamState(self.m.copy(), self.v.copy(), self.t)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    xhat: list[np.ndarray | None] = field(default_factory=list)
    inv_std: list[np.ndarray | None] = field(default_factory=list)
    batch_mean: list[np.ndarray | None] = field(default_factory=list)
    batch_var: list[np.ndarray | None] = field(default_factory=list)
    relu_mask: list[np.ndarray] = field(default_factory=list)
    drop_mask: list[np.ndarray | None] = field(default_factory=list)
    logits: np.ndarray | None = None


def init_model(config, seed):
    """He-uniform weights, zero biases, identity batch-norm."""
    rng = np.random.default_rng(seed)
    dims = (config.input_dim,) + config.hidden_widths + (1,)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = np.sqrt(6.0 / fan_in)
        layer = Layer(rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out))
        if config.use_batchnorm and i < len(config.hidden_widths):
            layer.bn_gamma = np.ones(fan_out)
            layer.bn_beta = np.zeros(fan_out)
            layer.bn_mean = np.zeros(fan_out)
            layer.bn_var = np.ones(fan_out)
        layers.append(layer)
    return ModelParameters(layers)


def flatten(params):
    return np.concatenate([a.ravel() for layer in params.layers for a in layer.arrays()])


def unflatten(template, v):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != template.size():
        raise ShapeError(f"flat vector has length {v.shape}, model needs {template.size()}")
    layers, pos = [], 0

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        out = v[pos:pos + n].reshape(shape).copy()
        pos += n
        return out

    for t in template.layers:
        layer = Layer(take(t.weights.shape), take(t.bias.shape))
        if t.has_bn:
            layer.bn_gamma = take(t.bn_gamma.shape)
            layer.bn_beta = take(t.bn_beta.shape)
            layer.bn_mean = take(t.bn_mean.shape)
            layer.bn_var = take(t.bn_var.shape)
        layers.append(layer)
    return ModelParameters(layers)


def trainable_mask(params):
    """Boolean mask over the flat layout: False for batch-norm running statistics."""
    parts = []
    for layer in params.layers:
        parts.append(np.ones(layer.weights.size + layer.bias.size, dtype=bool))
        if layer.has_bn:
            parts.append(np.ones(2 * layer.fan_out, dtype=bool))
            parts.append(np.zeros(2 * layer.fan_out, dtype=bool))
    return np.concatenate(parts)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward(params, batch, mode="eval", rng=None, dropout=None):
    """Run the network on ``batch``.

    ``dropout`` holds one rate per hidden layer and only matters in train
    mode, where masks are drawn from ``rng`` with inverted scaling. Returns
    ``(predictions, cache)``; the cache is ``None`` in eval mode.
    Predictions are clipped into ``[1e-12, 1 - 1e-12]``.
    """
    if mode not in ("train", "eval"):
        raise ArgumentError(f"mode must be 'train' or 'eval', not {mode!r}")
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError(f"batch shape {x.shape} does not match input_dim {params.input_dim}")
    b = x.shape[0]
    if b < 1:
        raise ShapeError("empty batch")
    train = mode == "train"
    hidden = params.layers[:-1]
    if train and b < 2 and any(layer.has_bn for layer in hidden):
        raise DegenerateBatchError("train-mode batch normalization needs at least 2 rows")
    if dropout is None:
        dropout = (0.0,) * len(hidden)
    elif len(dropout) != len(hidden):
        raise ShapeError("need one dropout rate per hidden layer")
    cache = ForwardCache() if train else None
    a = x
    for layer, rate in zip(hidden, dropout):
        z = a @ layer.weights.T + layer.bias
        xhat = inv_std = mu = var = None
        if layer.has_bn:
            if train:
                mu = z.mean(axis=0)
                var = z.var(axis=0)
            else:
                mu, var = layer.bn_mean, layer.bn_var
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (z - mu) * inv_std
            h = layer.bn_gamma * xhat + layer.bn_beta
        else:
            h = z
        relu = h > 0
        out = np.where(relu, h, 0.0)
        mask = None
        if train and rate > 0:
            if rng is None:
                raise ArgumentError("train-mode dropout needs an rng")
            mask = (rng.random(out.shape) >= rate) / (1.0 - rate)
            out = out * mask
        if train:
            cache.inputs.append(a)
            cache.xhat.append(xhat)
            cache.inv_std.append(inv_std)
            cache.batch_mean.append(mu)
            cache.batch_var.append(var)
            cache.relu_mask.append(relu)
            cache.drop_mask.append(mask)
        a = out
    last = params.layers[-1]
    logits = (a @ last.weights.T + last.bias)[:, 0]
    if train:
        cache.inputs.append(a)
        cache.logits = logits
    preds = np.clip(_sigmoid(logits), PROB_EPS, 1.0 - PROB_EPS)
    return preds, cache


def bce_loss(predictions, labels):
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.size == 0 or p.shape != y.shape:
        raise ArgumentError("predictions and labels must be non-empty and equally long")
    p = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def backward(params, cache, labels):
    """Gradient of mean BCE over the flat layout (zeros for running statistics)."""
    if cache is None or cache.logits is None:
        raise StateError("backward needs the cache of a train-mode forward pass")
    if len(cache.inputs) != len(params.layers) or any(
        inp.shape[1] != layer.fan_in for inp, layer in zip(cache.inputs, params.layers)
    ):
        raise StateError("cache does not belong to these parameters")
    y = np.asarray(labels, dtype=np.float64)
    b = cache.logits.shape[0]
    if y.shape != (b,):
        raise ShapeError("labels do not match the cached batch")
    grads = [None] * len(params.layers)
    delta = ((_sigmoid(cache.logits) - y) / b)[:, None]
    last = params.layers[-1]
    grads[-1] = [delta.T @ cache.inputs[-1], delta.sum(axis=0)]
    upstream = delta @ last.weights
    for i in range(len(params.layers) - 2, -1, -1):
        layer = params.layers[i]
        if cache.drop_mask[i] is not None:
            upstream = upstream * cache.drop_mask[i]
        dh = upstream * cache.relu_mask[i]
        extra = []
        if layer.has_bn:
            xhat = cache.xhat[i]
            dgamma = np.sum(dh * xhat, axis=0)
            dbeta = dh.sum(axis=0)
            dxhat = dh * layer.bn_gamma
            dz = cache.inv_std[i] / b * (
                b * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0)
            )
            zeros = np.zeros(layer.fan_out)
            extra = [dgamma, dbeta, zeros, zeros]
        else:
            dz = dh
        grads[i] = [dz.T @ cache.inputs[i], dz.sum(axis=0)] + extra
        if i > 0:
            upstream = dz @ layer.weights
    return np.concatenate([g.ravel() for parts in grads for g in parts])


def adam_step(params, grads, state, config):
    """One bias-corrected Adam update. Returns new parameters and a new state."""
    theta = flatten(params)
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != theta.shape or state.m.shape != theta.shape or state.v.shape != theta.shape:
        raise ShapeError(f"gradient/state length does not match {theta.shape[0]} parameters")
    b1, b2 = config.adam_beta1, config.adam_beta2
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * g
    v = b2 * state.v + (1.0 - b2) * g * g
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    theta = theta - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_epsilon)
    return unflatten(params, theta), AdamState(m, v, t)


def _update_running_stats(params, cache):
    for i, layer in enumerate(params.layers[:-1]):
        if layer.has_bn:
            layer.bn_mean = (1.0 - BN_MOMENTUM) * layer.bn_mean + BN_MOMENTUM * cache.batch_mean[i]
            layer.bn_var = (1.0 - BN_MOMENTUM) * layer.bn_var + BN_MOMENTUM * cache.batch_var[i]


def batch_bounds(m, batch_size, batchnorm):
    """Start/stop row offsets of every mini-batch in an epoch.

    The final partial batch is kept; with batch norm a trailing single row is
    folded into the previous batch because it cannot be normalized.
    """
    starts = list(range(0, m, batch_size))
    stops = starts[1:] + [m]
    if batchnorm and len(starts) > 1 and stops[-1] - starts[-1] == 1:
        starts.pop()
        stops.pop(-2)
    return list(zip(starts, stops))


def mask_draws(config, rows):
    """Number of doubles a train-mode forward pass draws for ``rows`` rows."""
    return sum(rows * w for w, r in zip(config.hidden_widths, config.layer_dropout()) if r > 0)


@dataclass(frozen=True)
class TrainEvent:
    """What the interrupt hook sees after each mini-batch."""

    epoch: int
    batch_index: int
    n_batches: int
    batch_time: float
    params: ModelParameters
    adam: AdamState
    epoch_rng_state: bytes
    last: bool


def train_epochs(
    params,
    data,
    epochs,
    batch_size,
    state,
    rng,
    interrupt_hook=None,
    *,
    config,
    per_sample_cost=1e-3,
    start_epoch=0,
    start_batch=0,
):
    """Mini-batch Adam training for ``epochs`` epochs.

    Each epoch shuffles with ``rng`` and then draws dropout masks from the same
    stream. ``interrupt_hook(TrainEvent)`` runs after every batch and may raise
    to abort training. To resume inside an epoch, pass ``rng`` positioned at
    the start of ``start_epoch`` and the index of the next batch to run as
    ``start_batch``; the skipped batches' mask draws are stepped over.
    """
    if epochs < 1:
        raise ArgumentError("epochs must be >= 1")
    if batch_size < 1:
        raise ArgumentError("batch_size must be >= 1")
    if data is None or len(data) == 0:
        raise ArgumentError("cannot train on an empty dataset")
    if data.n_features != params.input_dim:
        raise ShapeError("dataset width does not match the model input")
    m = len(data)
    bounds = batch_bounds(m, batch_size, any(layer.has_bn for layer in params.layers))
    drops = config.layer_dropout()
    for epoch in range(start_epoch, epochs):
        epoch_state = pack_state(rng)
        order = np.argsort(rng.random(m), kind="stable")
        first = start_batch if epoch == start_epoch else 0
        if first:
            skipped = sum(mask_draws(config, stop - start) for start, stop in bounds[:first])
            rng.bit_generator.advance(skipped)
        for bi in range(first, len(bounds)):
            start, stop = bounds[bi]
            idx = order[start:stop]
            _, cache = forward(params, data.X[idx], "train", rng, drops)
            grads = backward(params, cache, data.y[idx])
            params, state = adam_step(params, grads, state, config)
            _update_running_stats(params, cache)
            if interrupt_hook is not None:
                interrupt_hook(
                    TrainEvent(
                        epoch,
                        bi,
                        len(bounds),
                        (stop - start) * per_sample_cost,
                        params,
                        state,
                        epoch_state,
                        epoch == epochs - 1 and bi == len(bounds) - 1,
                    )
                )
    return params, state


def predict(params, X, chunk=8192):
    X = np.asarray(X, dtype=np.float64)
    out = [forward(params, X[i:i + chunk])[0] for i in range(0, X.shape[0], chunk)]
    return np.concatenate(out) if out else np.empty(0)
