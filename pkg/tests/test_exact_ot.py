import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import (entropic_2x2, entropic_value, exact_ot_lp, gaussian_weights, half_sq_cost,
                     random_feasible_coupling)
from policyflow.errors import ParameterError
from policyflow.exact_ot import (brute_force_entropic_ot, entropic_objective, quantile_coupling,
                                 w2_exact_1d, w2_gaussian_closed_form)
from policyflow.measures import DiscreteMeasure, make_grid


def on_points(points, weights=None):
    """A measure on an evenly spaced grid whose centres are ``points``."""
    points = np.asarray(points, float)
    w = np.full(len(points), 1 / len(points)) if weights is None else np.asarray(weights, float)
    if len(points) == 1:
        # grids have at least two cells: park an empty cell to the right
        points, w = np.array([points[0], points[0] + 1.0]), np.array([1.0, 0.0])
    h = points[1] - points[0]
    g = make_grid(points[0] - h / 2, points[-1] + h / 2, len(points))
    return DiscreteMeasure.from_weights(g, w)


def random_measure(rng, grid, sparsity=0.0):
    w = rng.dirichlet(np.ones(grid.n))
    w[rng.random(grid.n) < sparsity] = 0.0
    if w.sum() == 0:
        w[0] = 1.0
    return DiscreteMeasure.from_weights(grid, w)


class TestQuantileCoupling:
    def test_identity(self):
        pi = on_points(np.linspace(0, 1, 5), [0.1, 0.2, 0.3, 0.2, 0.2])
        cost, plan = w2_exact_1d(pi, pi)
        assert cost == 0.0
        np.testing.assert_allclose(plan.to_matrix(5, 5), np.diag(pi.w), atol=1e-16)

    def test_point_masses(self):
        cost, plan = w2_exact_1d(on_points([0.0]), on_points([1.0]))
        assert cost == 0.5
        assert len(plan) == 1

    def test_two_point_example_matches_enumeration(self):
        mu, nu = on_points([0.0, 1.0]), on_points([0.0, 2.0])
        cost, plan = w2_exact_1d(mu, nu)
        # every feasible plan is [[p, 1/2 - p], [1/2 - p, p]]; scan p
        C = half_sq_cost([0, 1], [0, 2])
        ps = np.linspace(0, 0.5, 5001)
        enum = min(float(np.sum(C * np.array([[p, 0.5 - p], [0.5 - p, p]]))) for p in ps)
        assert cost == pytest.approx(enum, abs=1e-15)
        assert cost == pytest.approx(0.25, abs=1e-15)
        np.testing.assert_allclose(plan.to_matrix(2, 2), [[0.5, 0], [0, 0.5]])

    @given(st.integers(0, 2**32 - 1), st.integers(2, 12), st.integers(2, 12))
    def test_plan_is_monotone_and_feasible(self, seed, n, m):
        rng = np.random.default_rng(seed)
        mu = random_measure(rng, make_grid(0, 1, n), 0.3)
        nu = random_measure(rng, make_grid(-1, 2, m), 0.3)
        _, plan = w2_exact_1d(mu, nu)
        assert np.all(np.diff(plan.i) >= 0) and np.all(np.diff(plan.j) >= 0)
        assert np.all(plan.mass > 0)
        P = plan.to_matrix(n, m)
        np.testing.assert_allclose(P.sum(1), mu.w, atol=1e-14)
        np.testing.assert_allclose(P.sum(0), nu.w, atol=1e-14)

    def test_matches_linear_program(self, rng):
        for _ in range(30):
            n, m = rng.integers(2, 15, size=2)
            mu = random_measure(rng, make_grid(-1, 1, n), 0.2)
            nu = random_measure(rng, make_grid(-0.3, 2.5, m), 0.2)
            cost, _ = w2_exact_1d(mu, nu)
            lp, _ = exact_ot_lp(mu.w, nu.w, half_sq_cost(mu.grid.centers, nu.grid.centers))
            assert cost == pytest.approx(lp, abs=1e-9)

    def test_zero_mass_cells_are_skipped(self):
        mu = on_points([0, 1, 2, 3], [0.5, 0, 0, 0.5])
        nu = on_points([0, 1, 2, 3], [0, 0.5, 0.5, 0])
        _, plan = w2_exact_1d(mu, nu)
        assert plan.i.tolist() == [0, 3] and plan.j.tolist() == [1, 2]

    def test_round_off_residue_does_not_create_slivers(self):
        a = np.full(10, 0.1)
        b = np.full(3, 1 / 3)
        plan = quantile_coupling(a, b)
        assert np.all(plan.mass > 1e-12)


class TestDistanceProperties:
    def test_symmetry(self, rng):
        g = make_grid(-2, 2, 20)
        for _ in range(50):
            mu, nu = random_measure(rng, g), random_measure(rng, g)
            assert w2_exact_1d(mu, nu)[0] == pytest.approx(w2_exact_1d(nu, mu)[0], abs=1e-14)

    def test_triangle_inequality(self, rng):
        g = make_grid(-2, 2, 24)

        def dist(p, q):
            return math.sqrt(2 * w2_exact_1d(p, q)[0])

        for _ in range(100):
            a, b, c = (random_measure(rng, g, 0.3) for _ in range(3))
            assert dist(a, c) <= dist(a, b) + dist(b, c) + 1e-10

    @pytest.mark.parametrize("t", [0.5, 1.0, 2.0, 3.5])
    def test_translation_is_linear(self, t):
        d = math.sqrt(2 * w2_exact_1d(on_points([0.0]), on_points([t]))[0])
        assert d == pytest.approx(abs(t), rel=1e-14)

    def test_translated_profile(self):
        g1, g2 = make_grid(-3, 3, 60), make_grid(-2, 4, 60)
        w = gaussian_weights(g1.centers, 0.0, 0.7)
        cost, _ = w2_exact_1d(DiscreteMeasure(g1, w), DiscreteMeasure(g2, w))
        assert cost == pytest.approx(0.5, rel=1e-12)


class TestGaussianClosedForm:
    def test_examples(self):
        assert w2_gaussian_closed_form(0.3, 1.2, 0.3, 1.2) == 0
        assert w2_gaussian_closed_form(0, 0.4, 1, 0.4) == 0.5
        assert w2_gaussian_closed_form(0, 1, 0, 2) == 0.5

    @pytest.mark.parametrize("bad", [(0, 0, 0, 1), (0, 1, 0, -1)])
    def test_rejects_nonpositive_std(self, bad):
        with pytest.raises(ParameterError):
            w2_gaussian_closed_form(*bad)

    @pytest.mark.parametrize("m2,s2", [(0.0, 2.0), (1.0, 1.0), (-0.5, 1.5)])
    def test_discretization(self, m2, s2):
        g = make_grid(-14, 14, 2048)
        mu = DiscreteMeasure(g, gaussian_weights(g.centers, 0.0, 1.0))
        nu = DiscreteMeasure(g, gaussian_weights(g.centers, m2, s2))
        exact = w2_gaussian_closed_form(0.0, 1.0, m2, s2)
        assert w2_exact_1d(mu, nu)[0] == pytest.approx(exact, rel=1e-3)


class TestBruteForceEntropic:
    def test_forced_plans(self):
        single = on_points([0.0])
        assert brute_force_entropic_ot(single, single, 0.1).matrix[0, 0] == 1.0
        for eps in (1e-3, 1.0, 50.0):
            P = brute_force_entropic_ot(on_points([0.0]), on_points([1.0]), eps).matrix
            assert P[0, 0] == 1.0 and P.sum() == 1.0

    def test_size_guard(self):
        pi = on_points(np.arange(5.0))
        with pytest.raises(ParameterError):
            brute_force_entropic_ot(pi, pi, 0.1)
        with pytest.raises(ParameterError):
            brute_force_entropic_ot(on_points([0.0, 1.0]), on_points([0.0, 1.0]), 0.0)

    def test_symmetric_instance(self):
        pi = on_points([0.0, 1.0])
        for p in (0.05, 0.2, 0.45):
            init = np.array([[p, 0.5 - p], [0.5 - p, p]])
            P = brute_force_entropic_ot(pi, pi, 0.3, init=init).matrix
            np.testing.assert_allclose(P, P.T, atol=1e-10)

    def test_symmetric_from_asymmetric_start(self, rng):
        # every 2x2 coupling of a uniform pair is already symmetric, so the
        # informative case is 4x4 started from a random asymmetric plan
        pi = on_points(np.linspace(0, 1, 4), [0.1, 0.4, 0.3, 0.2])
        for eps in (0.02, 0.3):
            init = random_feasible_coupling(pi.w, pi.w, rng)
            assert np.max(np.abs(init - init.T)) > 1e-2
            P = brute_force_entropic_ot(pi, pi, eps, init=init).matrix
            np.testing.assert_allclose(P, P.T, atol=1e-10)

    def test_matches_scalar_scan(self, rng):
        for _ in range(20):
            mu = on_points([0.0, 0.8], rng.dirichlet([2, 2]))
            nu = on_points([-0.2, 1.1], rng.dirichlet([2, 2]))
            eps = float(rng.choice([0.05, 0.5, 2.0]))
            C = half_sq_cost(mu.grid.centers, nu.grid.centers)
            P = brute_force_entropic_ot(mu, nu, eps).matrix
            np.testing.assert_allclose(P, entropic_2x2(mu.w, nu.w, C, eps), atol=1e-7)

    def test_marginals_and_optimality(self, rng):
        for shape in [(2, 2), (3, 4), (4, 4), (2, 8)]:
            mu = random_measure(rng, make_grid(0, 1, shape[0]))
            nu = random_measure(rng, make_grid(-0.5, 1.5, shape[1]))
            C = half_sq_cost(mu.grid.centers, nu.grid.centers)
            for eps in (0.01, 0.1, 1.0):
                P = brute_force_entropic_ot(mu, nu, eps).matrix
                np.testing.assert_allclose(P.sum(1), mu.w, atol=1e-10)
                np.testing.assert_allclose(P.sum(0), nu.w, atol=1e-10)
                best = entropic_value(P, C, eps)
                assert entropic_objective(P, C, eps) == pytest.approx(best, abs=1e-14)
                for _ in range(100):
                    Q = random_feasible_coupling(mu.w, nu.w, rng)
                    assert best <= entropic_value(Q, C, eps) + 1e-12

    def test_zero_mass_rows(self):
        mu = on_points([0.0, 1.0, 2.0], [0.5, 0.0, 0.5])
        nu = on_points([0.0, 1.0, 2.0])
        P = brute_force_entropic_ot(mu, nu, 0.2).matrix
        assert np.all(P[1] == 0)
        np.testing.assert_allclose(P.sum(0), nu.w, atol=1e-10)

    def test_vanishing_eps_approaches_exact(self, rng):
        for _ in range(10):
            mu = on_points([0.0, 1.0], rng.dirichlet([1, 1]))
            nu = on_points([0.3, 1.5], rng.dirichlet([1, 1]))
            exact, _ = w2_exact_1d(mu, nu)
            C = half_sq_cost(mu.grid.centers, nu.grid.centers)
            linear = [float(np.sum(C * brute_force_entropic_ot(mu, nu, e).matrix))
                      for e in (1.0, 0.1, 0.01)]
            assert linear[0] >= linear[1] >= linear[2] >= exact - 1e-12
            assert linear[2] - exact < 1e-3
