"""Curvature probes: Hessian-vector products, spectral norm, covariance.

Hessian-vector products come from central differences of the analytic
gradient, so they work at any parameter count. Dense constructions (the
brute-force Hessian, the gradient covariance matrix, and the decomposition
check built on them) are deliberately capped at 200 parameters; they exist
as oracles for small fixtures, not as production paths.

The spectral norm uses power iteration on H squared, which converges on the
largest eigenvalue magnitude whether the extreme eigenvalue is positive or
negative.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .data import full_batch
from .metrics import fmt
from .mlp import forward_loss, loss_and_grad, per_sample_stats, unpack_layers

DENSE_PARAM_CAP = 200
HVP_EPS_SCALE = float(np.cbrt(np.finfo(np.float64).eps))
HESS_STEP_SCALE = float(np.finfo(np.float64).eps ** 0.25)
PROB_FLOOR = 1e-300

CURVATURE_HEADER = ["epoch", "spectral_norm", "converged", "power_iters", "val_accuracy"]


@dataclass(frozen=True)
class SpectralEstimate:
    value: float
    iterations_used: int
    converged: bool
    residual: float


@dataclass(frozen=True)
class CovarianceResult:
    matrix: np.ndarray
    mean_grad: np.ndarray
    num_samples: int


def _full_grad_fn(spec, dataset):
    batch = full_batch(dataset)
    return lambda params: loss_and_grad(spec, params, batch)[1]


def hvp_from_grad(grad_fn, params, vec):
    """H @ vec by central differences of a gradient function.

    The probe direction is normalized before stepping so the step size only
    depends on where we are, not on the length of ``vec``.
    """
    params = np.asarray(params, dtype=np.float64)
    vec = np.asarray(vec, dtype=np.float64)
    if params.shape != vec.shape:
        raise ValueError("vector length does not match parameter count")
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ValueError("probe vector must be nonzero")
    unit = vec / norm
    eps = HVP_EPS_SCALE * (1.0 + float(np.linalg.norm(params)))
    delta = grad_fn(params + eps * unit) - grad_fn(params - eps * unit)
    return delta * (norm / (2.0 * eps))


def hvp(spec, dataset, params, vec):
    """Hessian-vector product of the full-dataset loss."""
    return hvp_from_grad(_full_grad_fn(spec, dataset), params, vec)


def hessian_from_loss(loss_fn, params):
    """Dense Hessian of a scalar function by central second differences.

    Step sizes scale with each coordinate: eps**0.25 * (1 + |x_j|). The
    four-point cross formula already treats (j, k) and (k, j) identically;
    the final symmetrization is a formality.
    """
    params = np.asarray(params, dtype=np.float64)
    dim = params.shape[0]
    if dim > DENSE_PARAM_CAP:
        raise ValueError(f"dense Hessian capped at {DENSE_PARAM_CAP} parameters")
    steps = HESS_STEP_SCALE * (1.0 + np.abs(params))
    base = loss_fn(params)
    hess = np.empty((dim, dim))

    def at(offsets):
        shifted = params.copy()
        for idx, step in offsets:
            shifted[idx] += step
        return loss_fn(shifted)

    for j in range(dim):
        hj = steps[j]
        hess[j, j] = (at([(j, hj)]) - 2.0 * base + at([(j, -hj)])) / (hj * hj)
        for k in range(j + 1, dim):
            hk = steps[k]
            cross = (
                at([(j, hj), (k, hk)])
                - at([(j, hj), (k, -hk)])
                - at([(j, -hj), (k, hk)])
                + at([(j, -hj), (k, -hk)])
            ) / (4.0 * hj * hk)
            hess[j, k] = cross
            hess[k, j] = cross
    return 0.5 * (hess + hess.T)


def full_hessian_bruteforce(spec, dataset, params):
    """Dense Hessian of the full-dataset loss (small fixtures only)."""
    batch = full_batch(dataset)
    return hessian_from_loss(lambda p: forward_loss(spec, p, batch), params)


def spectral_norm_from_hvp(hvp_fn, dim, max_iters=200, tol=1e-3, seed=0):
    """Largest |eigenvalue| via power iteration on the squared operator.

    The estimate at a unit vector v is ||H v||, the square root of the
    Rayleigh quotient of H^2. Convergence means successive estimates agree
    to ``tol`` relative AND the eigenpair residual ||Hv - rho v|| (rho the
    signed Rayleigh quotient) is below ``tol * max(1, value)``.
    """
    if dim < 1:
        raise ValueError("operator dimension must be positive")
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)

    estimate_prev = None
    estimate = 0.0
    residual = float("inf")
    used = 0
    for _ in range(max_iters):
        used += 1
        hv = hvp_fn(v)
        estimate = float(np.linalg.norm(hv))
        if estimate == 0.0:
            return SpectralEstimate(0.0, used, True, 0.0)
        rho = float(v @ hv)
        residual = float(np.linalg.norm(hv - rho * v))
        if (
            estimate_prev is not None
            and abs(estimate - estimate_prev) <= tol * estimate
            and residual <= tol * max(1.0, estimate)
        ):
            return SpectralEstimate(estimate, used, True, residual)
        estimate_prev = estimate
        h2v = hvp_fn(hv / estimate)
        norm2 = float(np.linalg.norm(h2v))
        if norm2 == 0.0:
            return SpectralEstimate(0.0, used, True, 0.0)
        v = h2v / norm2

    return SpectralEstimate(estimate, used, False, residual)


def spectral_norm(spec, dataset, params, max_iters=200, tol=1e-3, seed=0):
    """Spectral norm of the full-dataset loss Hessian at ``params``."""
    grad_fn = _full_grad_fn(spec, dataset)
    return spectral_norm_from_hvp(
        lambda vec: hvp_from_grad(grad_fn, params, vec),
        np.asarray(params).shape[0],
        max_iters=max_iters,
        tol=tol,
        seed=seed,
    )


def gradient_covariance(spec, dataset, params):
    """Covariance of per-sample gradients: E[g g^T] - E[g] E[g]^T."""
    if spec.param_count > DENSE_PARAM_CAP:
        raise ValueError(f"dense covariance capped at {DENSE_PARAM_CAP} parameters")
    if dataset.n < 2:
        raise ValueError("need at least 2 samples for a covariance")
    stats = per_sample_stats(spec, params, full_batch(dataset))
    grads = np.stack([g for _, _, g in stats])
    mean = grads.mean(axis=0)
    second = grads.T @ grads / dataset.n
    cov = second - np.outer(mean, mean)
    cov = 0.5 * (cov + cov.T)
    return CovarianceResult(matrix=cov, mean_grad=mean, num_samples=dataset.n)


def _true_prob_fn(spec, dataset, index):
    feats = dataset.features[index:index + 1]
    label = int(dataset.labels[index])

    def prob(params):
        layers = unpack_layers(spec, params)
        act = feats
        for weight, bias in layers[:-1]:
            act = np.maximum(act @ weight + bias, 0.0)
        weight, bias = layers[-1]
        logits = (act @ weight + bias)[0]
        shifted = logits - logits.max()
        exp = np.exp(shifted)
        return float(exp[label] / exp.sum())

    return prob


def gauss_newton_residual(spec, dataset, params):
    """Check the loss-Hessian decomposition for mean negative log likelihood.

    For L_i = -log p_i the per-sample chain rule gives

        H = C + gbar gbar^T + (1/N) sum_i (dL_i/dp_i) d2p_i/dtheta2

    with dL_i/dp_i = -1/p_i. Every term is measured independently: H by
    second differences of the total loss, C and gbar from per-sample
    gradients, the residual term by second differences of each p_i. Returns
    (frobenius gap, gap / frobenius norm of H).
    """
    params = np.asarray(params, dtype=np.float64)
    if spec.param_count > DENSE_PARAM_CAP:
        raise ValueError(f"decomposition check capped at {DENSE_PARAM_CAP} parameters")
    hess = full_hessian_bruteforce(spec, dataset, params)

    stats = per_sample_stats(spec, params, full_batch(dataset))
    probs = np.array([p for _, p, _ in stats])
    for i, p in enumerate(probs):
        if p <= PROB_FLOOR:
            raise ValueError(f"sample {i}: true-class probability underflowed ({p})")
        if p >= 1.0:
            raise ValueError(f"sample {i}: true-class probability saturated at 1")

    if dataset.n == 1:
        mean = stats[0][2]
        cov = np.zeros((spec.param_count, spec.param_count))
    else:
        result = gradient_covariance(spec, dataset, params)
        mean = result.mean_grad
        cov = result.matrix

    residual_term = np.zeros((spec.param_count, spec.param_count))
    for i in range(dataset.n):
        prob_hess = hessian_from_loss(_true_prob_fn(spec, dataset, i), params)
        residual_term += (-1.0 / probs[i]) * prob_hess
    residual_term /= dataset.n

    gap_matrix = hess - cov - np.outer(mean, mean) - residual_term
    gap = float(np.linalg.norm(gap_matrix))
    return gap, gap / float(np.linalg.norm(hess))


def write_curvature_csv(rows, path):
    """Rows are (epoch, SpectralEstimate, val_accuracy) triples."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(CURVATURE_HEADER)
        for epoch, estimate, val_acc in rows:
            writer.writerow([
                epoch,
                fmt(estimate.value),
                "true" if estimate.converged else "false",
                estimate.iterations_used,
                fmt(val_acc),
            ])
