import numpy as np
import pytest

from softmpc import conic, models, nlp
from softmpc.nlp import ConstraintBlock, NlpProblem, QuadraticObjective

from oracles import finite_difference_jacobian


def linear_nlp(H, f, A_in, b_in):
    obj = QuadraticObjective(H, f)
    blocks = [ConstraintBlock(lambda z: A_in @ z - b_in, lambda z: A_in)]
    return NlpProblem(objective=obj, dim=f.shape[0], in_constraints=blocks)


class TestSqp:
    def test_convex_qp_in_one_iteration(self, rng):
        n = 4
        M = rng.normal(size=(n, n))
        H = M @ M.T + np.eye(n)
        f = rng.normal(size=n)
        A_in = np.vstack([np.eye(n), -np.eye(n)])
        b_in = np.ones(2 * n)
        prob = linear_nlp(H, f, A_in, b_in)
        rep = nlp.sqp_solve(prob, np.zeros(n))
        assert rep.converged and rep.iterations <= 1
        ref = conic.solve(conic.ConicProgram(H=H, f=f, A_in=A_in, b_in=b_in,
                                             var_names={"z": (0, n)}))
        assert abs(rep.objective - ref.objective) <= 1e-6
        assert np.abs(rep.z - ref.z).max() <= 1e-6

    def test_projection_onto_nonconvex_boundary(self):
        # min (z - 2)^2 s.t. z^2 <= 1  ->  z = 1
        obj = QuadraticObjective(np.array([[2.0]]), np.array([-4.0]), 4.0)
        blk = ConstraintBlock(lambda z: np.array([z[0] ** 2 - 1.0]),
                              lambda z: np.array([[2.0 * z[0]]]))
        prob = NlpProblem(objective=obj, dim=1, in_constraints=[blk])
        rep = nlp.sqp_solve(prob, np.array([0.5]))
        assert rep.converged
        assert abs(rep.z[0] - 1.0) <= 1e-6

    def test_fourtank_steady_state_problem(self):
        p = models.four_tank_default_params()
        m = models.four_tank(p)
        target = np.array([1.3, 1.3])
        # variables (x_s, u_s): fixed point + output target
        obj_H = np.zeros((6, 6))
        obj_H[0, 0] = obj_H[2, 2] = 2.0
        obj_f = np.zeros(6)
        obj_f[0] = -2 * target[0]
        obj_f[2] = -2 * target[1]

        def fixed_point(z):
            return m.step(z[:4], z[4:]) - z[:4]

        def fixed_point_jac(z):
            _, Ad, Bd = m.step_with_jacobians(z[:4], z[4:])
            J = np.zeros((4, 6))
            J[:, :4] = Ad - np.eye(4)
            J[:, 4:] = Bd
            return J

        prob = NlpProblem(
            objective=QuadraticObjective(obj_H, obj_f, float(target @ target)),
            dim=6,
            eq_constraints=[ConstraintBlock(fixed_point, fixed_point_jac)],
            in_constraints=[ConstraintBlock(
                lambda z: np.concatenate([z[4:] - [3.6, 4.0], -z[4:]]),
                lambda z: np.vstack([np.hstack([np.zeros((2, 4)), np.eye(2)]),
                                     np.hstack([np.zeros((2, 4)), -np.eye(2)])]))],
        )
        z0 = np.concatenate([np.full(4, 0.8), np.full(2, 2.0)])
        rep = nlp.sqp_solve(prob, z0)
        assert rep.converged and rep.kkt_residual <= 1e-6
        assert np.abs(m.step(rep.z[:4], rep.z[4:]) - rep.z[:4]).max() <= 1e-8

    def test_merit_nonincreasing_across_accepted_steps(self, monkeypatch):
        # instrument the merit value at each accepted iterate
        obj = QuadraticObjective(np.array([[2.0]]), np.array([-4.0]), 4.0)
        blk = ConstraintBlock(lambda z: np.array([z[0] ** 2 - 1.0]),
                              lambda z: np.array([[2.0 * z[0]]]))
        prob = NlpProblem(objective=obj, dim=1, in_constraints=[blk])
        z = np.array([3.0])
        merits = []
        mu = 10.0 * (1.0 + abs(float(obj.gradient(z)[0])))
        for _ in range(30):
            sub, d = nlp._subproblem(prob, z, None)
            sol = conic.solve(sub)
            step = sol.z[:d]
            if np.abs(step).max() < 1e-10:
                break
            phi0 = obj.value(z) + mu * nlp._violation(prob, z)
            deriv = float(obj.gradient(z) @ step) - mu * nlp._violation(prob, z)
            alpha = 1.0
            for _ in range(30):
                cand = z + alpha * step
                if obj.value(cand) + mu * nlp._violation(prob, cand) \
                        <= phi0 + 1e-4 * alpha * deriv + 1e-12:
                    break
                alpha *= 0.5
            z = z + alpha * step
            merits.append(obj.value(z) + mu * nlp._violation(prob, z))
        assert all(merits[i + 1] <= merits[i] + 1e-9 for i in range(len(merits) - 1))

    def test_infeasible_problem_reported(self):
        # z <= -1 and z >= 1 simultaneously
        obj = QuadraticObjective(np.array([[2.0]]), np.zeros(1))
        blk = ConstraintBlock(lambda z: np.array([z[0] - (-1.0), 1.0 - z[0]]),
                              lambda z: np.array([[1.0], [-1.0]]))
        prob = NlpProblem(objective=obj, dim=1, in_constraints=[blk])
        rep = nlp.sqp_solve(prob, np.zeros(1))
        assert not rep.feasible


class TestJacobian:
    def test_linear_map_exact(self, rng):
        A = rng.normal(size=(3, 4))
        J = nlp.jacobian(lambda z: A @ z, rng.normal(size=4))
        assert np.abs(J - A).max() <= 1e-7

    def test_fourtank_structure_at_ones(self):
        m = models.four_tank()
        c1, c2, c3, c4 = m.params["c"]
        Jx, _ = m.jac(np.ones(4), np.zeros(2))
        expected = -0.5 * np.array([
            [c1, -c2, 0, 0],
            [0, c2, 0, 0],
            [0, 0, c3, -c4],
            [0, 0, 0, c4],
        ])
        assert np.abs(Jx - expected).max() <= 1e-14

    def test_fourtank_domain_guard(self):
        m = models.four_tank()
        # clamped region: derivative flattens to zero rather than blowing up
        Jx, _ = m.jac(np.array([1e-6, 1.0, 1.0, 1.0]), np.zeros(2))
        assert Jx[0, 0] == 0.0

    def test_analytic_vs_central_differences(self, rng):
        m = models.four_tank()
        worst = 0.0
        for _ in range(100):
            x = rng.uniform(0.02, 2.0, size=4)
            u = rng.uniform(0.0, 3.6, size=2)
            Jx, Ju = m.jac(x, u)
            J_fd = finite_difference_jacobian(lambda xx: m.f_cont(xx, u), x)
            worst = max(worst, float(np.abs(Jx - J_fd).max()))
            J_fd_u = finite_difference_jacobian(lambda uu: m.f_cont(x, uu), u)
            worst = max(worst, float(np.abs(Ju - J_fd_u).max()))
        assert worst <= 1e-5
