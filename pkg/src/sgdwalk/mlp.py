"""Feedforward ReLU classifier as pure functions of a flat parameter vector.

Every operation here is a pure function of (architecture spec, parameter
vector, batch). Parameters live in one flat float64 vector, packed layer by
layer: weights in row-major order (fan_in, fan_out), then biases. A flat
layout keeps parameter arithmetic (interpolation, distances, norms) trivial
for the rest of the toolkit.

Sums over samples go through a fixed chunked-pairwise reduction so repeated
evaluations of the same point are bit-identical regardless of calling
context.
"""

import math
from dataclasses import dataclass

import numpy as np

REDUCE_CHUNK = 64


class NonFiniteError(FloatingPointError):
    """Activations, logits, or losses stopped being finite."""


@dataclass(frozen=True)
class MlpSpec:
    """Architecture and init recipe for a ReLU classifier.

    ``layer_sizes`` is ``(d_in, hidden..., num_classes)``. Weights initialize
    uniform in ``[-init_scale/sqrt(fan_in), +init_scale/sqrt(fan_in)]``,
    biases at zero, so ``init_scale=0`` gives the exactly-uniform predictor.
    """

    layer_sizes: tuple
    init_seed: int = 0
    init_scale: float = 1.0

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("layer_sizes needs at least input and output entries")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if sizes[-1] < 2:
            raise ValueError("output layer needs at least 2 classes")
        if not (self.init_scale >= 0):
            raise ValueError("init_scale must be nonnegative")

    @property
    def param_count(self):
        sizes = self.layer_sizes
        return sum((sizes[i] + 1) * sizes[i + 1] for i in range(len(sizes) - 1))

    @property
    def num_classes(self):
        return self.layer_sizes[-1]

    @property
    def input_dim(self):
        return self.layer_sizes[0]


@dataclass(frozen=True)
class Batch:
    """A design matrix ``(n, d)`` with integer class labels ``(n,)``."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or labels.ndim != 1:
            raise ValueError("features must be (n, d) and labels (n,)")
        if features.shape[0] != labels.shape[0]:
            raise ValueError(
                f"{features.shape[0]} feature rows vs {labels.shape[0]} labels"
            )
        if features.shape[0] < 1:
            raise ValueError("batch must hold at least one sample")
        if not np.isfinite(features).all():
            raise ValueError("batch features must be finite")
        if labels.size and int(labels.min()) < 0:
            raise ValueError("labels must be nonnegative class indices")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self):
        return self.features.shape[0]


def chunked_sum(values):
    """Sum in a fixed order: sequential chunks of 64, pairwise merge of chunk sums.

    The order never depends on caller context, so re-evaluating the same
    array always reproduces the same float.
    """
    flat = np.ascontiguousarray(values, dtype=np.float64).ravel()
    if flat.size == 0:
        return 0.0
    partial = np.add.reduceat(flat, np.arange(0, flat.size, REDUCE_CHUNK))
    while partial.size > 1:
        if partial.size % 2:
            partial = np.concatenate([partial, np.zeros(1)])
        partial = partial[0::2] + partial[1::2]
    return float(partial[0])


def chunked_mean(values):
    flat = np.asarray(values, dtype=np.float64).ravel()
    if flat.size == 0:
        raise ValueError("mean of an empty array")
    return chunked_sum(flat) / flat.size


def init_params(spec):
    """Deterministic init for a spec: weights uniform, biases zero."""
    rng = np.random.default_rng(spec.init_seed)
    parts = []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        bound = spec.init_scale / math.sqrt(fan_in)
        parts.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        parts.append(np.zeros(fan_out))
    return np.concatenate(parts)


def _check_params(spec, params):
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.param_count,):
        raise ValueError(
            f"parameter vector has shape {params.shape}, expected ({spec.param_count},)"
        )
    return params


def _check_batch(spec, batch):
    if batch.features.shape[1] != spec.input_dim:
        raise ValueError(
            f"batch features have {batch.features.shape[1]} columns, "
            f"spec expects {spec.input_dim}"
        )
    if int(batch.labels.max()) >= spec.num_classes:
        raise ValueError(
            f"label {int(batch.labels.max())} out of range for "
            f"{spec.num_classes} classes"
        )


def unpack_layers(spec, params):
    """(weight, bias) views into the flat vector, in pack order."""
    params = _check_params(spec, params)
    layers = []
    offset = 0
    sizes = spec.layer_sizes
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weight = params[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        bias = params[offset:offset + fan_out]
        offset += fan_out
        layers.append((weight, bias))
    return layers


def _logits(spec, params, features):
    layers = unpack_layers(spec, params)
    # overflow is reported through NonFiniteError, not as a numpy warning
    with np.errstate(over="ignore", invalid="ignore"):
        act = features
        for weight, bias in layers[:-1]:
            act = np.maximum(act @ weight + bias, 0.0)
        weight, bias = layers[-1]
        logits = act @ weight + bias
    if not np.isfinite(logits).all():
        raise NonFiniteError("non-finite logits in forward pass")
    return logits


def forward_loss(spec, params, batch):
    """Mean negative log likelihood of the true classes over the batch."""
    params = _check_params(spec, params)
    _check_batch(spec, batch)
    logits = _logits(spec, params, batch.features)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=1))
        log_probs = shifted[np.arange(batch.size), batch.labels] - log_norm
        loss = chunked_sum(-log_probs) / batch.size
    if not math.isfinite(loss):
        raise NonFiniteError("non-finite loss")
    return loss


def loss_and_grad(spec, params, batch):
    """Loss plus its exact gradient as a flat vector (reverse accumulation)."""
    params = _check_params(spec, params)
    _check_batch(spec, batch)
    layers = unpack_layers(spec, params)
    n = batch.size

    # overflow is reported through NonFiniteError, not as a numpy warning
    with np.errstate(over="ignore", invalid="ignore"):
        acts = [batch.features]
        pre = []
        act = batch.features
        for weight, bias in layers[:-1]:
            z = act @ weight + bias
            act = np.maximum(z, 0.0)
            pre.append(z)
            acts.append(act)
        weight_out, bias_out = layers[-1]
        logits = acts[-1] @ weight_out + bias_out
    if not np.isfinite(logits).all():
        raise NonFiniteError("non-finite logits in forward pass")

    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        norm = exp.sum(axis=1, keepdims=True)
        rows = np.arange(n)
        log_probs = shifted[rows, batch.labels] - np.log(norm[:, 0])
        loss = chunked_sum(-log_probs) / n
    if not math.isfinite(loss):
        raise NonFiniteError("non-finite loss")

    delta = exp / norm
    delta[rows, batch.labels] -= 1.0
    delta /= n

    grad = np.empty_like(params)
    offset = grad.size
    upstream = delta
    for index in range(len(layers) - 1, -1, -1):
        weight, _ = layers[index]
        fan_in, fan_out = weight.shape
        offset -= fan_out
        grad[offset:offset + fan_out] = upstream.sum(axis=0)
        offset -= fan_in * fan_out
        grad[offset:offset + fan_in * fan_out] = (acts[index].T @ upstream).ravel()
        if index > 0:
            upstream = (upstream @ weight.T) * (pre[index - 1] > 0.0)
    return loss, grad


def iter_per_sample_grads(spec, params, batch, chunk_size=256):
    """Yield (losses, true_probs, grads) for consecutive sample chunks.

    ``grads`` rows are per-sample loss gradients (no 1/n factor) in the same
    flat layout as the parameter vector. Chunking keeps the (n, P) matrix
    from ever materializing for large n unless the caller collects it.
    """
    params = _check_params(spec, params)
    _check_batch(spec, batch)
    layers = unpack_layers(spec, params)
    for start in range(0, batch.size, chunk_size):
        feats = batch.features[start:start + chunk_size]
        labels = batch.labels[start:start + chunk_size]
        m = feats.shape[0]

        # overflow is reported through NonFiniteError, not as a numpy warning
        with np.errstate(over="ignore", invalid="ignore"):
            acts = [feats]
            pre = []
            act = feats
            for weight, bias in layers[:-1]:
                z = act @ weight + bias
                act = np.maximum(z, 0.0)
                pre.append(z)
                acts.append(act)
            weight_out, bias_out = layers[-1]
            logits = acts[-1] @ weight_out + bias_out
        if not np.isfinite(logits).all():
            raise NonFiniteError("non-finite logits in forward pass")

        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        norm = exp.sum(axis=1, keepdims=True)
        rows = np.arange(m)
        probs = exp / norm
        true_probs = probs[rows, labels].copy()
        losses = -(shifted[rows, labels] - np.log(norm[:, 0]))

        delta = probs
        delta[rows, labels] -= 1.0

        pieces = [None] * len(layers)
        upstream = delta
        for index in range(len(layers) - 1, -1, -1):
            weight, _ = layers[index]
            grad_w = np.einsum("bi,bo->bio", acts[index], upstream).reshape(m, -1)
            pieces[index] = (grad_w, upstream)
            if index > 0:
                upstream = (upstream @ weight.T) * (pre[index - 1] > 0.0)
        grads = np.concatenate(
            [part for piece in pieces for part in piece], axis=1
        )
        yield losses, true_probs, grads


def per_sample_stats(spec, params, batch):
    """Per-sample (loss_i, true-class probability p_i, gradient g_i)."""
    stats = []
    total = np.zeros(spec.param_count)
    for losses, probs, grads in iter_per_sample_grads(spec, params, batch):
        total += grads.sum(axis=0)
        for i in range(losses.shape[0]):
            stats.append((float(losses[i]), float(probs[i]), grads[i]))
    if __debug__:
        _, grad = loss_and_grad(spec, params, batch)
        gap = np.abs(total / batch.size - grad).max()
        assert gap < 1e-12 * batch.size, f"per-sample mean drifted from gradient: {gap}"
    return stats


def accuracy(spec, params, batch):
    """Fraction of samples whose top logit matches the label.

    Argmax ties resolve to the lowest class index.
    """
    params = _check_params(spec, params)
    _check_batch(spec, batch)
    predicted = _logits(spec, params, batch.features).argmax(axis=1)
    return float(np.mean(predicted == batch.labels))
