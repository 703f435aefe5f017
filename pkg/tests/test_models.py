import numpy as np
import pytest
import scipy.linalg

from softmpc import models

from oracles import rk4_reference


class TestMassSpringDamper:
    def test_small_dt_limit(self):
        ls = models.mass_spring_damper(dt=1e-6)
        A_c = np.array([[0.0, 1.0], [-1.0, -0.1]])
        assert np.abs(ls.A - (np.eye(2) + 1e-6 * A_c)).max() <= 1e-11

    def test_schur_at_default_rate(self):
        ls = models.mass_spring_damper()
        mags = np.abs(np.linalg.eigvals(ls.A))
        assert np.allclose(mags, np.exp(-0.05 * 0.05), atol=1e-12)
        assert mags.max() < 1.0

    def test_zoh_matches_fine_rk4(self, rng):
        ls = models.mass_spring_damper()
        A_c = np.array([[0.0, 1.0], [-1.0, -0.1]])
        B_c = np.array([[0.0], [1.0]])
        f = lambda x, u: A_c @ x + B_c @ u
        for _ in range(5):
            x = rng.normal(size=2)
            u = rng.normal(size=1)
            ref = rk4_reference(f, x, u, 0.05, substeps=100)
            assert np.abs(ls.step(x, u) - ref).max() <= 1e-10

    def test_zoh_against_series(self):
        ls = models.mass_spring_damper()
        A_c = np.array([[0.0, 1.0], [-1.0, -0.1]])
        assert np.abs(ls.A - scipy.linalg.expm(A_c * 0.05)).max() <= 1e-12

    def test_euler_fallback(self):
        ls = models.mass_spring_damper(method="euler")
        A_c = np.array([[0.0, 1.0], [-1.0, -0.1]])
        assert np.allclose(ls.A, np.eye(2) + 0.05 * A_c)


class TestFourTank:
    def test_drainage_only_nonincreasing(self):
        m = models.four_tank()
        x = np.array([1.0, 0.0, 1.0, 0.0])
        dx = m.f_cont(x, np.zeros(2))
        assert np.all(dx <= 1e-12)

    def test_constraint_boxes_verbatim(self):
        m = models.four_tank()
        assert m.X.contains(np.array([1.36, 1.4, 1.36, 1.4]))
        assert not m.X.contains(np.array([1.3601, 1.4, 1.36, 1.4]))
        assert not m.X.contains(np.array([0.19, 0.2, 0.2, 0.2]))
        assert m.U.contains(np.array([3.6, 4.0]))
        assert not m.U.contains(np.array([3.601, 4.0]))
        assert not m.U.contains(np.array([-0.01, 0.0]))

    def test_analytic_steady_state_is_rk4_fixed_point(self):
        p = models.four_tank_default_params()
        m = models.four_tank(p)
        u = np.array([2.0, 2.0])
        xs = models.four_tank_steady_state(p, u)
        assert np.abs(m.step(xs, u) - xs).max() <= 1e-6

    def test_default_params_positive(self):
        p = models.four_tank_default_params()
        assert min(p.c) > 0 and min(p.c_u) > 0

    def test_open_loop_boundedness(self):
        m = models.four_tank()
        x = np.ones(4)
        for _ in range(100):
            x = m.step(x, np.array([2.0, 2.0]))
            assert np.all(x > 0) and np.all(x <= 2.0)

    def test_rk4_order(self, rng):
        m = models.four_tank()
        ratios = []
        for _ in range(10):
            x = rng.uniform(0.3, 1.5, size=4)
            u = rng.uniform(0.5, 3.0, size=2)
            ref = rk4_reference(m.f_cont, x, u, m.dt, substeps=1000)
            import dataclasses

            coarse = dataclasses.replace(m, substeps=5).step(x, u)
            fine = dataclasses.replace(m, substeps=10).step(x, u)
            e_coarse = np.linalg.norm(coarse - ref)
            e_fine = np.linalg.norm(fine - ref)
            if e_fine > 1e-14:
                ratios.append(e_coarse / e_fine)
        med = np.median(ratios)
        assert 12.0 <= med <= 20.0


class TestContractionCheck:
    def test_default_certificate_passes(self):
        m = models.four_tank()
        ok, margin = models.check_contraction(m, np.diag([1.0, 2.0, 1.0, 2.0]))
        assert ok and margin > 0

    def test_large_p2_limit_passes(self):
        m = models.four_tank()
        ok, _ = models.check_contraction(m, np.diag([1.0, 50.0, 1.0, 50.0]),
                                         samples=100)
        assert ok

    def test_small_p2_fails(self):
        m = models.four_tank()
        ok, margin = models.check_contraction(m, np.diag([1.0, 0.01, 1.0, 0.01]),
                                              samples=100)
        assert not ok and margin < 0

    def test_corner_matches_grid_minimum(self):
        m = models.four_tank()
        P = np.diag([1.0, 2.0, 1.0, 2.0])
        lo, hi = m.validity_box
        u0 = np.zeros(2)

        def margin_at(x):
            Jx, _ = m.jac(x, u0)
            S = Jx.T @ P + P @ Jx
            return -float(np.linalg.eigvalsh(S).max())

        grid = [np.array([a, b, c, d])
                for a in np.linspace(lo[0], hi[0], 7)
                for b in np.linspace(lo[1], hi[1], 7)
                for c in np.linspace(lo[2], hi[2], 7)
                for d in np.linspace(lo[3], hi[3], 7)]
        grid_min = min(margin_at(x) for x in grid)
        _, corner_min = models.check_contraction(m, P, samples=0)
        assert corner_min <= grid_min + 1e-9


class TestHarmonicOscillator:
    def test_quarter_turn_rotation(self):
        ls = models.harmonic_oscillator(np.pi / 2)
        assert np.allclose(ls.A, [[0.0, -1.0], [1.0, 0.0]], atol=1e-15)
        x = np.array([0.3, -0.7])
        assert abs(np.linalg.norm(ls.A @ x) - np.linalg.norm(x)) <= 1e-14

    def test_marginal_identity(self):
        ls = models.harmonic_oscillator(0.3)
        assert np.abs(ls.A.T @ ls.A - np.eye(2)).max() <= 1e-14

    def test_dlyap_rejects_marginal(self):
        from softmpc import control_design as cd

        ls = models.harmonic_oscillator(0.3)
        with pytest.raises(cd.SpectralRadiusError):
            cd.dlyap(ls.A, np.eye(2))

    def test_theta_range(self):
        with pytest.raises(ValueError):
            models.harmonic_oscillator(0.0)
