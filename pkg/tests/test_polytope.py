import numpy as np
import pytest

from softmpc import polytope as pt
from softmpc.polytope import (DimensionMismatch, NoConvergence, PolyIncLyap,
                              Polytope, box, max_positive_invariant,
                              max_rho_contractive, minkowski_eval)

from oracles import forward_invariance_membership, grid_membership


def unit_box():
    return box([-1.0, -1.0], [1.0, 1.0])


class TestContains:
    def test_origin_in_symmetric_box(self):
        assert unit_box().contains(np.zeros(2))

    def test_boundary_exceedance(self):
        assert not unit_box().contains(np.array([1.0001, 0.0]))

    def test_paper_ray_point_on_boundary(self):
        # x = (0.832, 1) sits on the boundary of [-1, 1]^2
        assert unit_box().contains(np.array([0.832, 1.0]))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            unit_box().contains(np.zeros(3))


class TestDistance:
    def test_inside_is_zero(self):
        assert unit_box().distance(np.array([0.3, -0.2])) == 0.0

    def test_axis_projection(self):
        assert abs(unit_box().distance(np.array([2.0, 0.0])) - 1.0) <= 1e-7

    def test_corner_projection(self):
        assert abs(unit_box().distance(np.array([2.0, 2.0])) - np.sqrt(2)) <= 1e-7

    def test_lipschitz_and_membership_equivalence(self, rng):
        P = unit_box()
        pts = rng.uniform(-3, 3, size=(60, 2))
        for i in range(len(pts) - 1):
            d1, d2 = P.distance(pts[i]), P.distance(pts[i + 1])
            assert abs(d1 - d2) <= np.linalg.norm(pts[i] - pts[i + 1]) + 1e-7
            assert (d1 == 0.0) == P.contains(pts[i])


class TestTighten:
    def test_zero_radius_identity(self):
        P = unit_box().tighten_by_ball(0.0)
        assert np.array_equal(P.h, unit_box().h)

    def test_ball_tightening_halves_box(self):
        P = unit_box().tighten_by_ball(0.5)
        assert np.allclose(P.h, 0.5)

    def test_overtightening_flags_empty(self):
        P = unit_box().tighten_by_ball(2.0)
        assert P.is_empty

    def test_ellipsoid_identity_matches_ball(self):
        P1 = unit_box().tighten_by_ellipsoid(np.eye(2), 0.4)
        P2 = unit_box().tighten_by_ball(0.4)
        assert np.allclose(P1.h, P2.h)

    def test_ellipsoid_anisotropic_margins(self):
        # P = diag(4, 1), delta = 1: margins 0.5 on x rows, 1.0 on y rows
        P = unit_box().tighten_by_ellipsoid(np.diag([4.0, 1.0]), 1.0)
        assert np.allclose(P.h, [0.5, 0.0, 0.5, 0.0])
        assert P.is_degenerate and not P.is_empty

    def test_fourtank_row_margins(self):
        X = Polytope(np.vstack([np.eye(4), -np.eye(4)]),
                     np.array([1.36, 1.4, 1.36, 1.4, -0.2, -0.2, -0.2, -0.2]))
        T = X.tighten_by_ellipsoid(np.diag([1.0, 2.0, 1.0, 2.0]), 0.05)
        margins = X.h - T.h
        for i, m in enumerate(margins):
            expected = 0.05 if i % 2 == 0 else 0.05 / np.sqrt(2)
            assert abs(m - expected) <= 1e-12

    def test_minkowski_sum_stays_inside_original(self, rng):
        X = unit_box()
        P = np.array([[2.0, 0.3], [0.3, 1.0]])
        delta = 0.3
        T = X.tighten_by_ellipsoid(P, delta)
        L = np.linalg.cholesky(P)
        for _ in range(1000):
            xbar = T.sample(1, rng)[0]
            d = rng.normal(size=2)
            e = np.linalg.solve(L.T, d / np.linalg.norm(d)) * delta * rng.uniform()
            assert X.contains(xbar + e, tol=1e-7)


class TestInvariantSets:
    def test_deadbeat_returns_constraint(self):
        O = max_positive_invariant(np.zeros((2, 2)), unit_box())
        pts, inside = grid_membership(O.H, O.h, [-1.2, -1.2], [1.2, 1.2], 40)
        _, inside_box = grid_membership(*_hb(unit_box()), [-1.2, -1.2], [1.2, 1.2], 40)
        assert np.array_equal(inside, inside_box)

    def test_contraction_keeps_box(self):
        O = max_positive_invariant(0.5 * np.eye(2), unit_box())
        assert np.all([unit_box().contains(v) for v in O.vertices()])
        assert abs(O.support(np.array([1.0, 0.0])) - 1.0) <= 1e-9

    def test_vertices_map_inside(self, msd_design):
        term = msd_design.terminal
        A_cl = msd_design.system.A + msd_design.system.B @ term.K
        for v in term.X_f.vertices():
            assert term.X_f.contains(A_cl @ v, tol=1e-7)

    def test_grid_agreement_with_simulation_oracle(self, msd_design):
        term = msd_design.terminal
        ls = msd_design.system
        A_cl = ls.A + ls.B @ term.K
        cons = Polytope(np.vstack([ls.X.H, ls.U.H @ term.K]),
                        np.concatenate([ls.X.h, ls.U.h])).normalize()
        pts = np.array([[a, b] for a in np.linspace(-1, 1, 100)
                        for b in np.linspace(-1, 1, 100)])
        mismatches = 0
        for x in pts:
            by_set = term.X_f.contains(x)
            by_sim = forward_invariance_membership(A_cl, cons.H, cons.h, x)
            d = term.X_f.distance(x)
            if by_set != by_sim and d > 1e-6:
                mismatches += 1
        assert mismatches == 0

    def test_unstable_matrix_rejected(self):
        with pytest.raises(ValueError):
            max_positive_invariant(1.1 * np.eye(2), unit_box())


def _hb(p):
    return p.H, p.h


class TestRhoContractive:
    def test_deadbeat_box(self):
        lyap = max_rho_contractive(np.zeros((2, 2)), 0.5, unit_box())
        assert abs(minkowski_eval(lyap, np.array([1.0, 0.0])) - 1.0) <= 1e-9

    def test_scalar_immediate_fixed_point(self):
        lyap = max_rho_contractive(np.array([[0.5]]), 0.6, box([-1.0], [1.0]))
        assert lyap.F.shape == (2, 1)
        assert abs(minkowski_eval(lyap, np.array([0.5])) - 0.5) <= 1e-12
        assert abs(minkowski_eval(lyap, np.array([-2.0])) - 2.0) <= 1e-12

    def test_rho_below_spectral_radius_rejected(self):
        with pytest.raises(NoConvergence):
            max_rho_contractive(np.array([[0.5]]), 0.4, box([-1.0], [1.0]))

    def test_vertex_contraction_certificate(self, msd_design):
        A = msd_design.system.A
        lyap = max_rho_contractive(A, 0.999, msd_design.system.X, max_iter=3000)
        S = lyap.set
        for v in S.vertices():
            assert (minkowski_eval(lyap, A @ v)
                    <= lyap.rho * minkowski_eval(lyap, v) + 1e-9)

    def test_minkowski_eval_origin_and_clamp(self):
        lyap = PolyIncLyap(np.array([[1.0], [-1.0]]), 0.5)
        assert minkowski_eval(lyap, np.zeros(1)) == 0.0


class TestSerialization:
    def test_text_roundtrip(self, rng):
        P = Polytope(rng.normal(size=(5, 3)), rng.normal(size=5))
        Q = Polytope.from_text(P.to_text())
        assert np.array_equal(P.H, Q.H)
        assert np.array_equal(P.h, Q.h)
