"""Loss interpolation between consecutive training iterates.

For each update step the loss is evaluated on the straight line between the
pre- and post-update parameter vectors: both endpoints plus 10 uniformly
spaced interior points. The interior minimum plays the role of the valley
floor between the two iterates; an interior point above both endpoints is a
barrier.
"""

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import metrics
from .data import full_batch
from .mlp import forward_loss

NUM_INTERIOR = 10
ALPHAS = tuple(j / (NUM_INTERIOR + 1) for j in range(NUM_INTERIOR + 2))

INTERP_HEADER = ["t", "alpha", "loss"]


@dataclass(frozen=True)
class InterpolationSlice:
    """Losses along one update segment, plus derived floor/barrier facts.

    ``losses[0]`` and ``losses[-1]`` are exactly the endpoint losses;
    ``floor_index`` is the interior argmin (ties to the lowest index), so a
    negative ``height`` means the interior never dips below the endpoints.
    """

    t: int
    alphas: np.ndarray
    losses: np.ndarray
    floor_index: int
    height: float
    barrier: bool
    barrier_magnitude: float


def interp_points(params_before, params_after):
    """The 12 convex combinations between two parameter vectors.

    alpha = 0 and alpha = 1 reproduce the inputs bit-for-bit.
    """
    params_before = np.asarray(params_before, dtype=np.float64)
    params_after = np.asarray(params_after, dtype=np.float64)
    if params_before.shape != params_after.shape:
        raise ValueError("parameter shapes differ")
    return [
        (alpha, (1.0 - alpha) * params_before + alpha * params_after)
        for alpha in ALPHAS
    ]


def slice_from_loss(loss_fn, params_before, params_after, t):
    """Interpolation slice for an arbitrary scalar loss function."""
    points = interp_points(params_before, params_after)
    losses = np.array([loss_fn(p) for _, p in points])
    interior = losses[1:-1]
    floor_index = 1 + int(np.argmin(interior))
    h = metrics.height(losses[0], losses[-1], losses[floor_index])
    barrier, magnitude = metrics.detect_barrier(losses)
    return InterpolationSlice(
        t=int(t),
        alphas=np.array(ALPHAS),
        losses=losses,
        floor_index=floor_index,
        height=h,
        barrier=barrier,
        barrier_magnitude=magnitude,
    )


def slice_pair(spec, dataset, params_before, params_after, t, batch=None):
    """Slice the full-dataset loss between two consecutive iterates."""
    if batch is None:
        batch = full_batch(dataset)
    return slice_from_loss(
        lambda p: forward_loss(spec, p, batch), params_before, params_after, t
    )


def slice_all(log, spec, dataset, start, stop, workers=1):
    """Slices for every update pair t in [start, stop), in order.

    ``stop`` may be at most ``log.num_iterations``. Work can fan out over a
    thread pool; results are gathered in index order so the worker count
    never changes the output.
    """
    if start < 0 or stop > log.num_iterations:
        raise ValueError(
            f"pair range [{start}, {stop}) outside [0, {log.num_iterations})"
        )
    pairs = [(t, log.theta_at(t), log.theta_at(t + 1)) for t in range(start, stop)]
    batch = full_batch(dataset)
    if workers <= 1:
        return [
            slice_pair(spec, dataset, before, after, t, batch=batch)
            for t, before, after in pairs
        ]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(slice_pair, spec, dataset, before, after, t, batch)
            for t, before, after in pairs
        ]
        return [f.result() for f in futures]


def write_interp_csv(slices, path):
    """12 rows per slice: iteration, alpha, loss at full precision."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(INTERP_HEADER)
        for s in slices:
            for alpha, loss in zip(s.alphas, s.losses):
                writer.writerow([s.t, metrics.fmt(alpha), metrics.fmt(loss)])
