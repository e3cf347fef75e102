"""Exact gradient descent on quadratic surfaces with known spectra.

On L(x) = 0.5 x^T A x each eigencomponent contracts by the factor
|1 - lr * lambda| per step, which cleanly separates five damping regimes.
This module is the controlled counterpart to the measured behavior of real
training runs.
"""

import csv
import enum
from dataclasses import dataclass

import numpy as np

from .metrics import fmt
from .optim import gd_step

RATES_HEADER = ["lambda", "eta", "rate", "class"]


class DampingClass(enum.Enum):
    OVERDAMPED = "overdamped"
    CRITICAL = "critical"
    UNDERDAMPED = "underdamped"
    BOUNDARY = "boundary"
    DIVERGENT = "divergent"


@dataclass(frozen=True)
class QuadSurface:
    """Positive-definite quadratic: eigenvalues plus an optional rotation."""

    eigenvalues: np.ndarray
    rotation: np.ndarray | None = None

    def __post_init__(self):
        eig = np.asarray(self.eigenvalues, dtype=np.float64)
        if eig.ndim != 1 or eig.size < 1:
            raise ValueError("eigenvalues must be a nonempty vector")
        if not (eig > 0).all():
            raise ValueError("quadratic surface requires a positive spectrum")
        object.__setattr__(self, "eigenvalues", eig)
        if self.rotation is not None:
            rot = np.asarray(self.rotation, dtype=np.float64)
            if rot.shape != (eig.size, eig.size):
                raise ValueError("rotation shape does not match the spectrum")
            drift = np.abs(rot.T @ rot - np.eye(eig.size)).max()
            if drift > 1e-12:
                raise ValueError(f"rotation is not orthogonal (drift {drift:.2e})")
            object.__setattr__(self, "rotation", rot)

    @property
    def dim(self):
        return self.eigenvalues.size

    def to_eigenbasis(self, x):
        x = np.asarray(x, dtype=np.float64)
        return x if self.rotation is None else self.rotation.T @ x

    def loss(self, x):
        z = self.to_eigenbasis(x)
        return 0.5 * float(self.eigenvalues @ (z * z))

    def grad(self, x):
        z = self.to_eigenbasis(x)
        g = self.eigenvalues * z
        return g if self.rotation is None else self.rotation @ g


def contraction_rate(lam, lr):
    """Per-step contraction factor |1 - lr * lambda| of one eigencomponent."""
    if not (lam > 0) or not (lr > 0):
        raise ValueError("lambda and lr must be positive")
    return abs(1.0 - lr * lam)


def damping_class(lam, lr):
    """Regime of one eigencomponent under step size lr.

    Boundaries compare the product lr * lambda exactly: 1 is critical,
    2 is the edge of divergence.
    """
    if not (lam > 0) or not (lr > 0):
        raise ValueError("lambda and lr must be positive")
    product = lr * lam
    if product < 1.0:
        return DampingClass.OVERDAMPED
    if product == 1.0:
        return DampingClass.CRITICAL
    if product < 2.0:
        return DampingClass.UNDERDAMPED
    if product == 2.0:
        return DampingClass.BOUNDARY
    return DampingClass.DIVERGENT


def quad_gd_trajectory(surface, lr, start, num_steps):
    """Iterates [x_0, ..., x_T] of exact gradient descent on the surface."""
    if num_steps < 0:
        raise ValueError("num_steps must be nonnegative")
    x = np.asarray(start, dtype=np.float64)
    if x.shape != (surface.dim,):
        raise ValueError("start point does not match the surface dimension")
    points = [x]
    for _ in range(num_steps):
        x = gd_step(x, surface.grad(x), lr)
        points.append(x)
    return points


def write_rates_csv(rows, path):
    """Rows are (lambda, eta, rate, DampingClass) tuples."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(RATES_HEADER)
        for lam, eta, rate, klass in rows:
            writer.writerow([fmt(lam), fmt(eta), fmt(rate), klass.value])
