"""Scalar diagnostics along a training trajectory, plus their CSV schemas.

The interesting quantities are relations between consecutive iterates:
cosine between successive gradients, distance from the starting point, and
the bounce height of an update above the interpolated valley floor between
its endpoints.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

DEFAULT_SIGNIFICANCE_REL = 0.01
DEFAULT_SMOOTH_WINDOW = 51

TRAJECTORY_HEADER = [
    "t", "minibatch_loss", "full_loss", "lr", "cosine", "dist_init", "param_norm",
]
EPOCHS_HEADER = [
    "epoch", "mean_height", "height_sem", "barrier_count",
    "significant_barrier_count", "mean_cosine", "end_distance", "end_param_norm",
]


def fmt(value):
    """Full round-trip decimal form; empty string for missing values."""
    if value is None:
        return ""
    return repr(float(value))


def cosine(grad_prev, grad_next):
    """Cosine of the angle between two gradients, clamped to [-1, 1].

    Returns None when either vector has zero norm; a missing value, never 0.
    """
    grad_prev = np.asarray(grad_prev, dtype=np.float64)
    grad_next = np.asarray(grad_next, dtype=np.float64)
    if grad_prev.shape != grad_next.shape:
        raise ValueError("gradient shapes differ")
    norm_prev = float(np.linalg.norm(grad_prev))
    norm_next = float(np.linalg.norm(grad_next))
    if norm_prev == 0.0 or norm_next == 0.0:
        return None
    value = float(grad_prev @ grad_next) / (norm_prev * norm_next)
    return min(1.0, max(-1.0, value))


def distance_from_init(params, params_init):
    """Euclidean distance between the current point and the starting point."""
    params = np.asarray(params, dtype=np.float64)
    params_init = np.asarray(params_init, dtype=np.float64)
    if params.shape != params_init.shape:
        raise ValueError("parameter shapes differ")
    return float(np.linalg.norm(params - params_init))


def param_norm(params):
    return float(np.linalg.norm(np.asarray(params, dtype=np.float64)))


def height(loss_start, loss_end, loss_floor):
    """Average endpoint loss above the valley floor between them.

    ``(loss_start + loss_end - 2 * loss_floor) / 2``. Negative values are
    legitimate and mark pairs whose interior minimum sits above the endpoint
    average; they are reported as-is, never clamped.
    """
    return float((loss_start + loss_end - 2.0 * loss_floor) / 2.0)


def detect_barrier(losses):
    """Barrier test on an interpolated loss sequence (endpoints first/last).

    A barrier exists when some interior loss is strictly higher than both
    endpoint losses. The magnitude is ``max(0, max_interior - max(endpoints))``
    so it is positive exactly when a barrier exists.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 1 or losses.size < 3:
        raise ValueError("need endpoint losses plus at least one interior point")
    interior_max = float(losses[1:-1].max())
    endpoint_max = max(float(losses[0]), float(losses[-1]))
    magnitude = max(0.0, interior_max - endpoint_max)
    return magnitude > 0.0, magnitude


@dataclass(frozen=True)
class EpochSummary:
    epoch: int
    mean_height: float
    height_sem: float
    barrier_count: int
    significant_barrier_count: int
    mean_cosine: float | None
    end_distance: float
    end_param_norm: float


def epoch_summaries(slices, log, iters_per_epoch,
                    significance_rel=DEFAULT_SIGNIFICANCE_REL):
    """Aggregate interpolation slices into per-epoch rows.

    ``slices`` must be strictly increasing in t and lie inside the log. A
    barrier is significant when its magnitude exceeds ``significance_rel``
    times the loss at the slice's left endpoint. Cosines average over every
    defined consecutive-gradient pair in the epoch, not just sliced ones.
    """
    if iters_per_epoch < 1:
        raise ValueError("iters_per_epoch must be at least 1")
    for prev, cur in zip(slices, slices[1:]):
        if cur.t <= prev.t:
            raise ValueError("slices must be strictly increasing in t")
    total = log.num_iterations
    for s in slices:
        if s.t < 0 or s.t + 1 > total:
            raise ValueError(f"slice at t={s.t} falls outside the trajectory log")

    by_epoch = {}
    for s in slices:
        by_epoch.setdefault(s.t // iters_per_epoch, []).append(s)

    summaries = []
    for epoch in sorted(by_epoch):
        group = by_epoch[epoch]
        heights = np.array([s.height for s in group])
        mean_height = float(heights.mean())
        if heights.size > 1:
            sem = float(heights.std(ddof=1) / math.sqrt(heights.size))
        else:
            sem = 0.0
        barrier_count = sum(1 for s in group if s.barrier)
        significant = sum(
            1 for s in group
            if s.barrier and s.barrier_magnitude > significance_rel * s.losses[0]
        )
        cosines = []
        start = epoch * iters_per_epoch
        stop = min((epoch + 1) * iters_per_epoch, total)
        for t in range(max(start, 1), stop):
            value = cosine(log.grad_at(t - 1), log.grad_at(t))
            if value is not None:
                cosines.append(value)
        mean_cosine = float(np.mean(cosines)) if cosines else None
        end_index = min((epoch + 1) * iters_per_epoch, total)
        end_params = log.theta_at(end_index)
        summaries.append(EpochSummary(
            epoch=int(epoch),
            mean_height=mean_height,
            height_sem=sem,
            barrier_count=barrier_count,
            significant_barrier_count=significant,
            mean_cosine=mean_cosine,
            end_distance=distance_from_init(end_params, log.theta0),
            end_param_norm=param_norm(end_params),
        ))
    return summaries


def smoothed_series(values, window=DEFAULT_SMOOTH_WINDOW):
    """Centered moving average; windows shrink near the boundaries.

    ``window=1`` is the identity. Length is always preserved.
    """
    if window < 1:
        raise ValueError("window must be at least 1")
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1:
        raise ValueError("expected a 1-d series")
    n = values.size
    left = (window - 1) // 2
    right = window // 2
    out = np.empty(n)
    for i in range(n):
        lo = max(0, i - left)
        hi = min(n, i + right + 1)
        out[i] = values[lo:hi].mean()
    return out


def write_trajectory_csv(log, path):
    """One row per iteration: losses, lr, consecutive-gradient cosine, geometry."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(TRAJECTORY_HEADER)
        for rec in log.records:
            if rec.t == 0:
                cos = None
            else:
                cos = cosine(log.grad_at(rec.t - 1), log.grad_at(rec.t))
            params = log.theta_at(rec.t)
            writer.writerow([
                rec.t,
                fmt(rec.minibatch_loss),
                fmt(rec.full_loss),
                fmt(rec.lr),
                fmt(cos),
                fmt(distance_from_init(params, log.theta0)),
                fmt(param_norm(params)),
            ])


def write_epochs_csv(summaries, path):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(EPOCHS_HEADER)
        for row in summaries:
            writer.writerow([
                row.epoch,
                fmt(row.mean_height),
                fmt(row.height_sem),
                row.barrier_count,
                row.significant_barrier_count,
                fmt(row.mean_cosine),
                fmt(row.end_distance),
                fmt(row.end_param_norm),
            ])
