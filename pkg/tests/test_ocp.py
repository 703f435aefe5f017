import numpy as np
import pytest

from softmpc import conic, control_design as cd, models, ocp
from softmpc.conic import Status
from softmpc.polytope import box

RAY = np.array([0.832, 1.0])


def spec_with(msd_design, formulation, terminal=None, lyap="default"):
    d = msd_design
    return ocp.OcpSpec(model=d.system, N=d.N, Q=d.Q, R=d.R, X=d.system.X,
                       U=d.system.U, terminal=terminal or d.terminal,
                       formulation=formulation,
                       lyap=d.lyap if lyap == "default" else lyap)


class TestNominal:
    def test_origin_equilibrium(self, msd_design):
        res = ocp.mpc_step(msd_design.spec("nominal"), np.zeros(2))
        assert res.status == Status.OPTIMAL
        assert abs(res.value) <= 1e-9
        assert np.abs(res.u).max() <= 1e-9

    def test_boundary_point_feasible(self, msd_design):
        assert ocp.mpc_step(msd_design.spec("nominal"), RAY).status == Status.OPTIMAL

    def test_beyond_boundary_infeasible(self, msd_design):
        assert (ocp.mpc_step(msd_design.spec("nominal"), 1.52 * RAY).status
                == Status.INFEASIBLE)

    def test_xbar_equals_state(self, msd_design):
        res = ocp.mpc_step(msd_design.spec("nominal"), 0.5 * RAY)
        assert np.abs(res.x_bar - 0.5 * RAY).max() <= 1e-9


class TestSlackInit:
    def test_domination(self, msd_design, rng):
        nom = msd_design.spec("nominal")
        sl = msd_design.spec("proposed")
        for _ in range(25):
            x = rng.uniform(-1, 1, size=2)
            r_nom = ocp.mpc_step(nom, x)
            if r_nom.status != Status.OPTIMAL:
                continue
            r_sl = ocp.mpc_step(sl, x)
            assert r_sl.value <= r_nom.value + 1e-8

    def test_far_state_feasible(self, msd_design):
        res = ocp.mpc_step(msd_design.spec("proposed"), 4.0 * RAY)
        assert res.status == Status.OPTIMAL

    def test_origin_zero_value(self, msd_design):
        res = ocp.mpc_step(msd_design.spec("proposed"), np.zeros(2))
        assert abs(res.value) <= 1e-9
        assert np.abs(res.x_bar).max() <= 1e-6

    def test_global_feasibility_random(self, msd_design, rng):
        spec = msd_design.spec("proposed")
        for _ in range(50):
            x = rng.normal(size=2) * rng.uniform(0, 100)
            assert ocp.mpc_step(spec, x).status == Status.OPTIMAL

    def test_missing_lyap_rejected(self, msd_design):
        with pytest.raises(ocp.MissingLyap):
            spec_with(msd_design, ocp.SlackInit(1e3), lyap=None)


class TestImplicit:
    def test_penalty_matrix_deadbeat(self):
        assert np.allclose(ocp.implicit_penalty_matrix(np.zeros((2, 2)), 3),
                           np.eye(2))

    def test_penalty_matrix_scalar_geometric(self):
        P = ocp.implicit_penalty_matrix(np.array([[0.5]]), 3)
        assert abs(P[0, 0] - 1.3125) <= 1e-12

    def test_m1_equals_slack_init_with_identity(self, msd_design, rng):
        d = msd_design
        ident = cd.QuadIncLyap(np.eye(2), (1.0, 1.0, 1.0, 2.0), 0.0)
        s_impl = spec_with(d, ocp.ImplicitSlack(1e3, 1))
        s_ref = spec_with(d, ocp.SlackInit(1e3), lyap=ident)
        for _ in range(10):
            x = rng.uniform(-2, 2, size=2)
            a = ocp.mpc_step(s_impl, x)
            b = ocp.mpc_step(s_ref, x)
            assert abs(a.value - b.value) <= 1e-7
            assert np.abs(a.u - b.u).max() <= 1e-6

    def test_condensation_matches_trajectory_sum(self, msd_design, rng):
        A = msd_design.system.A
        B = msd_design.system.B
        M = 7
        P_M = ocp.implicit_penalty_matrix(A, M)
        for _ in range(100):
            x = rng.normal(size=2)
            xbar = rng.normal(size=2)
            u = rng.normal(size=(M, 1))
            acc = 0.0
            a, b = x.copy(), xbar.copy()
            for k in range(M):
                acc += float((a - b) @ (a - b))
                a = A @ a + B @ u[k]
                b = A @ b + B @ u[k]
            quad = float((x - xbar) @ P_M @ (x - xbar))
            assert abs(acc - quad) <= 1e-10 * max(1.0, quad)

    def test_lemma2_sandwich(self, msd_design, rng):
        # c1 = 1, c2 = C (1 - rho^M) / (1 - rho) with (C, rho) from the
        # open-loop difference dynamics e+ = A e
        A = msd_design.system.A
        M = 7
        P_M = ocp.implicit_penalty_matrix(A, M)
        # tight exponential envelope ||A^k e||^2 <= C rho^k ||e||^2
        rho = float(np.abs(np.linalg.eigvals(A)).max()) ** 2
        C = 1.0
        for k in range(1, 60):
            Ak = np.linalg.matrix_power(A, k)
            C = max(C, float(np.linalg.norm(Ak, 2)) ** 2 / rho**k)
        c2 = C * (1 - rho**M) / (1 - rho)
        for _ in range(1000):
            e = rng.normal(size=2)
            v = float(e @ P_M @ e)
            n2 = float(e @ e)
            assert 1.0 * n2 <= v + 1e-12
            assert v <= c2 * n2 + 1e-9


class TestImplicitSoftInput:
    def test_target_equilibrium_penalty_zero(self, fourtank_study):
        base = fourtank_study.spec("proposed")
        spec = ocp.OcpSpec(model=base.model, N=base.N, Q=base.Q, R=base.R,
                           X=base.X, U=base.U, terminal=base.terminal,
                           formulation=ocp.ImplicitSlackSoftInput(1e5, 5),
                           lyap=base.lyap)
        p = fourtank_study.params
        c1, c2, _, _ = p.c
        b1, b2, _, _ = p.c_u
        # steady input reaching the output target exactly
        u_s = np.array([(c1 * np.sqrt(1.3) - c2 * np.sqrt(1.4)) / b1,
                        c2 * np.sqrt(1.4) / b2])
        x_s = models.four_tank_steady_state(p, u_s)
        res = ocp.mpc_step(spec, x_s)
        assert res.status == Status.OPTIMAL
        # matched trajectories at the cost optimum: x_bar stays at the
        # measured state and the two-trajectory penalty vanishes
        assert res.slack <= 1e-3
        assert res.value <= 1e-2

    def test_displaced_penalty_decreases(self, fourtank_study):
        base = fourtank_study.spec("proposed")
        spec = ocp.OcpSpec(model=base.model, N=base.N, Q=base.Q, R=base.R,
                           X=base.X, U=base.U, terminal=base.terminal,
                           formulation=ocp.ImplicitSlackSoftInput(1e4, 5),
                           lyap=base.lyap)
        x = fourtank_study.x0 + np.array([0.1, 0, 0, 0])
        ctrl = ocp.Controller(spec)
        gaps = []
        for _ in range(12):
            res = ctrl.step(x)
            assert res.status == Status.OPTIMAL
            gaps.append(float(np.linalg.norm(x - res.x_bar)))
            x = spec.model.step(x, res.u)
        # the measured-vs-nominal displacement contracts at the open-loop
        # rate once the transient plan settles
        assert gaps[-1] <= 0.9 * gaps[0]
        assert gaps[0] > 1e-4


def tube_specs(msd_design, delta, lam=None):
    d = msd_design
    c1 = d.lyap.c_delta[0]
    Xb = d.system.X.normalize().tighten_by_ball(delta / np.sqrt(c1))
    term = cd.lqr_terminal_ingredients(d.system.A, d.system.B, d.Q, d.R,
                                       Xb, d.system.U)
    base = d.spec("proposed")
    return ocp.make_tube_spec(base, d.lyap, delta, lam=lam, terminal=term)


class TestTube:
    def test_zero_radius_reduces_to_nominal_on_tight_sets(self, msd_design, rng):
        spec = tube_specs(msd_design, 0.0)
        nom = ocp.OcpSpec(model=spec.model, N=spec.N, Q=spec.Q, R=spec.R,
                          X=spec.X, U=spec.U, terminal=spec.terminal,
                          formulation=ocp.Nominal())
        for _ in range(10):
            x = rng.uniform(-0.5, 0.5, size=2)
            a = ocp.mpc_step(spec, x)
            b = ocp.mpc_step(nom, x)
            assert a.status == b.status
            if a.status == Status.OPTIMAL:
                assert abs(a.value - b.value) <= 1e-6
                assert np.abs(a.x_bar - x).max() <= 1e-5

    def test_outside_tube_infeasible(self, msd_design):
        spec = tube_specs(msd_design, 0.05)
        # state far beyond reach of the tightened feasible set plus tube
        assert ocp.mpc_step(spec, np.array([5.0, 5.0])).status == Status.INFEASIBLE

    def test_degenerate_tightening_raises(self, msd_design):
        with pytest.raises(ocp.DegenerateTightening):
            tube_specs(msd_design, 25.0)


class TestTubeSlack:
    def test_slack_inactive_matches_tube(self, msd_design, rng):
        hard = tube_specs(msd_design, 0.1)
        soft = tube_specs(msd_design, 0.1, lam=1e4)
        for _ in range(10):
            x = rng.uniform(-0.4, 0.4, size=2)
            a = ocp.mpc_step(hard, x)
            if a.status != Status.OPTIMAL:
                continue
            b = ocp.mpc_step(soft, x)
            assert b.slack <= 1e-6
            assert abs(a.value - b.value) <= 1e-6

    def test_globally_feasible(self, msd_design, rng):
        spec = tube_specs(msd_design, 0.1, lam=1e4)
        for _ in range(50):
            x = rng.normal(size=2) * rng.uniform(0, 100)
            assert ocp.mpc_step(spec, x).status == Status.OPTIMAL

    def test_zero_delta_matches_slack_init(self, msd_design, rng):
        # with delta = 0 the slack equals sqrt(V_delta), so lam * s^2 is the
        # quadratic penalty of the relaxed-initial-state program on the
        # tightened sets
        spec = tube_specs(msd_design, 0.0, lam=1e3)
        ref = ocp.OcpSpec(model=spec.model, N=spec.N, Q=spec.Q, R=spec.R,
                          X=spec.X, U=spec.U, terminal=spec.terminal,
                          formulation=ocp.SlackInit(1e3), lyap=msd_design.lyap)
        for _ in range(10):
            x = rng.uniform(-2, 2, size=2)
            a = ocp.mpc_step(spec, x)
            b = ocp.mpc_step(ref, x)
            assert abs(a.value - b.value) <= 1e-6 * max(1.0, abs(b.value))


class TestSoftBaselines:
    def test_softp_matches_nominal_inside(self, msd_design, rng):
        nom = msd_design.spec("nominal")
        soft = msd_design.spec("soft_p")
        for _ in range(15):
            x = rng.uniform(-0.7, 0.7, size=2)
            a = ocp.mpc_step(nom, x)
            if a.status != Status.OPTIMAL:
                continue
            b = ocp.mpc_step(soft, x)
            assert abs(b.value - a.value) <= 1e-3 * max(abs(a.value), 1e-6)

    def test_softg_far_state(self, msd_design):
        assert (ocp.mpc_step(msd_design.spec("soft_g"), 4.0 * RAY).status
                == Status.OPTIMAL)

    def test_softp_infeasible_beyond_boundary(self, msd_design):
        assert (ocp.mpc_step(msd_design.spec("soft_p"), 1.52 * RAY).status
                == Status.INFEASIBLE)

    def test_softt_feasible_at_152(self, msd_design):
        assert (ocp.mpc_step(msd_design.spec("soft_t"), 1.52 * RAY).status
                == Status.OPTIMAL)

    def test_softt_and_softp_infeasible_at_4(self, msd_design):
        assert (ocp.mpc_step(msd_design.spec("soft_t"), 4.0 * RAY).status
                == Status.INFEASIBLE)
        assert (ocp.mpc_step(msd_design.spec("soft_p"), 4.0 * RAY).status
                == Status.INFEASIBLE)


class TestMpcStepMisc:
    def test_exact_penalty_recovers_nominal_control(self, msd_design, rng):
        from softmpc.polytope import max_rho_contractive

        d = msd_design
        poly = max_rho_contractive(d.system.A, 0.999, d.system.X, max_iter=3000)
        samples = []
        while len(samples) < 20:
            x = rng.uniform(-1, 1, size=2)
            if ocp.mpc_step(d.spec("nominal"), x).status == Status.OPTIMAL:
                samples.append(x)
        lam = 2.0 * cd.exact_penalty_threshold(d.spec("nominal"), poly,
                                               np.array(samples))
        spec_poly = spec_with(d, ocp.SlackInit(lam), lyap=poly)
        for x in samples:
            a = ocp.mpc_step(d.spec("nominal"), x)
            b = ocp.mpc_step(spec_poly, x)
            assert np.abs(b.x_bar - x).max() <= 1e-6
            assert np.abs(a.u - b.u).max() <= 1e-6

    def test_input_constraint_respected(self, msd_design, rng):
        for name in ("proposed", "soft_g"):
            spec = msd_design.spec(name)
            for _ in range(10):
                x = rng.normal(size=2) * 5
                res = ocp.mpc_step(spec, x)
                assert res.status == Status.OPTIMAL
                assert spec.U.contains(res.u, tol=1e-7)

    def test_sublevel_cap_binds(self, msd_design):
        d = msd_design
        base = d.spec("proposed")
        r0 = ocp.mpc_step(base, RAY)
        capped = ocp.OcpSpec(model=base.model, N=base.N, Q=base.Q, R=base.R,
                             X=base.X, U=base.U, terminal=base.terminal,
                             formulation=base.formulation, lyap=base.lyap,
                             sublevel_cap=0.5 * r0.value)
        r1 = ocp.mpc_step(capped, RAY)
        assert r1.status == Status.OPTIMAL
        assert r1.value >= r0.value - 1e-9
        # nominal part obeys the cap
        assert (r1.value - d.lam * d.lyap.value(RAY, r1.x_bar)
                <= 0.5 * r0.value + 1e-6)
