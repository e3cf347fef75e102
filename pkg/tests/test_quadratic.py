import csv

import numpy as np
import numpy.testing as npt
import pytest

from sgdwalk.quadratic import (
    RATES_HEADER,
    DampingClass,
    QuadSurface,
    contraction_rate,
    damping_class,
    quad_gd_trajectory,
    write_rates_csv,
)


class TestContractionRate:
    def test_known_values(self):
        assert contraction_rate(2.0, 0.25) == 0.5
        assert contraction_rate(1.0, 1.0) == 0.0
        assert contraction_rate(2.0, 1.5) == 2.0
        assert contraction_rate(0.5, 1.0) == 0.5

    def test_validation(self):
        with pytest.raises(ValueError):
            contraction_rate(0.0, 0.1)
        with pytest.raises(ValueError):
            contraction_rate(1.0, 0.0)


class TestDampingClass:
    def test_exact_product_boundaries(self):
        assert damping_class(2.0, 0.25) is DampingClass.OVERDAMPED
        assert damping_class(2.0, 0.5) is DampingClass.CRITICAL
        assert damping_class(2.0, 0.75) is DampingClass.UNDERDAMPED
        assert damping_class(2.0, 1.0) is DampingClass.BOUNDARY
        assert damping_class(2.0, 1.25) is DampingClass.DIVERGENT

    def test_boundaries_are_exact_not_approximate(self):
        # a product epsilon away from 1 is not critical
        assert damping_class(1.0, 1.0 + 1e-15) is DampingClass.UNDERDAMPED
        assert damping_class(1.0, 1.0 - 1e-15) is DampingClass.OVERDAMPED


class TestQuadSurface:
    def test_loss_and_grad_diagonal(self):
        surface = QuadSurface(np.array([1.0, 4.0]))
        x = np.array([2.0, 1.0])
        assert surface.loss(x) == 0.5 * (1.0 * 4.0 + 4.0 * 1.0)
        npt.assert_array_equal(surface.grad(x), np.array([2.0, 4.0]))

    def test_rotation_preserves_spectrum(self):
        angle = 0.3
        rot = np.array([[np.cos(angle), -np.sin(angle)],
                        [np.sin(angle), np.cos(angle)]])
        surface = QuadSurface(np.array([1.0, 4.0]), rotation=rot)
        z = np.array([2.0, 1.0])
        x = rot @ z
        assert surface.loss(x) == pytest.approx(0.5 * (4.0 + 4.0), rel=1e-12)
        npt.assert_allclose(surface.to_eigenbasis(x), z, atol=1e-12)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            QuadSurface(np.array([1.0, -1.0]))
        with pytest.raises(ValueError):
            QuadSurface(np.array([1.0, 2.0]), rotation=np.eye(3))
        with pytest.raises(ValueError):
            QuadSurface(np.array([1.0, 2.0]),
                        rotation=np.array([[1.0, 0.0], [0.1, 1.0]]))


class TestRecurrence:
    def test_error_follows_closed_form_in_every_class(self):
        # one eigenvalue per damping class at eta = 1
        lambdas = np.array([0.5, 1.0, 1.5, 2.0, 2.5])
        surface = QuadSurface(lambdas)
        start = np.array([1.0, -2.0, 0.5, 1.5, 1e-3])
        eta = 1.0
        points = quad_gd_trajectory(surface, eta, start, 100)
        assert len(points) == 101
        for t, x in enumerate(points):
            for j, lam in enumerate(lambdas):
                expected = (1.0 - eta * lam) ** t * start[j]
                if expected == 0.0:
                    assert x[j] == 0.0
                else:
                    assert abs(x[j] - expected) <= 1e-10 * abs(expected)

    def test_critical_coordinate_lands_exactly_on_zero(self):
        surface = QuadSurface(np.array([2.0]))
        points = quad_gd_trajectory(surface, 0.5, np.array([123.456]), 3)
        assert points[1][0] == 0.0
        assert points[2][0] == 0.0

    def test_boundary_class_oscillates_forever(self):
        surface = QuadSurface(np.array([2.0]))
        points = quad_gd_trajectory(surface, 1.0, np.array([3.0]), 4)
        values = [p[0] for p in points]
        assert values == [3.0, -3.0, 3.0, -3.0, 3.0]

    def test_start_shape_validated(self):
        surface = QuadSurface(np.array([1.0, 2.0]))
        with pytest.raises(ValueError):
            quad_gd_trajectory(surface, 0.1, np.zeros(3), 5)


class TestRatesCsv:
    def test_rows_and_classes(self, tmp_path):
        rows = [
            (0.5, 0.1, contraction_rate(0.5, 0.1), damping_class(0.5, 0.1)),
            (2.0, 1.0, contraction_rate(2.0, 1.0), damping_class(2.0, 1.0)),
        ]
        path = tmp_path / "rates.csv"
        write_rates_csv(rows, path)
        with open(path, newline="") as handle:
            parsed = list(csv.reader(handle))
        assert parsed[0] == RATES_HEADER
        assert parsed[1] == ["0.5", "0.1", "0.95", "overdamped"]
        assert parsed[2] == ["2.0", "1.0", "1.0", "boundary"]
