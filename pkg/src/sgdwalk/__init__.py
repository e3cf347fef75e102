"""Trajectory instrumentation for gradient descent training runs."""

__version__ = "0.1.0"
