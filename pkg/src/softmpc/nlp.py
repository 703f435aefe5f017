"""Gauss-Newton SQP for the nonlinear-model MPC variants.

All costs in this package are convex quadratics in the decision vector, so
the QP subproblem carries the exact objective; only the constraints are
linearized.  Steps are globalized with an l1 merit line search, and an
elastic (slack-relaxed) subproblem detects genuinely infeasible problems,
which the closed-loop simulator records rather than treating as errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import conic

__all__ = [
    "ConstraintBlock",
    "NlpProblem",
    "QuadraticObjective",
    "SqpReport",
    "jacobian",
    "sqp_solve",
]

KKT_TOL = 1e-6
MAX_SQP_ITER = 100
ARMIJO = 1e-4
BACKTRACK = 0.5
MAX_BACKTRACKS = 30
HESSIAN_REG = 1e-8


@dataclass(frozen=True)
class QuadraticObjective:
    """0.5 z'Hz + f'z + c0."""

    H: np.ndarray
    f: np.ndarray
    c0: float = 0.0

    def value(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.H @ z + self.f @ z + self.c0)

    def gradient(self, z: np.ndarray) -> np.ndarray:
        return self.H @ z + self.f


@dataclass(frozen=True)
class ConstraintBlock:
    """Vector constraint with value map and Jacobian map.

    Interpreted as fun(z) = 0 in ``eq_constraints`` and fun(z) <= 0 in
    ``in_constraints``.  ``jac=None`` falls back to central differences.
    """

    fun: Callable[[np.ndarray], np.ndarray]
    jac: Callable[[np.ndarray], np.ndarray] | None = None

    def jacobian_at(self, z: np.ndarray) -> np.ndarray:
        if self.jac is not None:
            return np.atleast_2d(self.jac(z))
        return jacobian(self.fun, z)


@dataclass
class NlpProblem:
    objective: QuadraticObjective
    dim: int
    eq_constraints: list[ConstraintBlock] = field(default_factory=list)
    in_constraints: list[ConstraintBlock] = field(default_factory=list)
    socs: list[conic.SocConstraint] = field(default_factory=list)
    var_names: dict[str, tuple[int, int]] = field(default_factory=dict)


@dataclass
class SqpReport:
    z: np.ndarray
    kkt_residual: float
    iterations: int
    converged: bool
    feasible: bool
    objective: float


def jacobian(fun: Callable[[np.ndarray], np.ndarray], z: np.ndarray,
             analytic: Callable[[np.ndarray], np.ndarray] | None = None) -> np.ndarray:
    """Jacobian of a vector map: analytic if provided, else central differences
    with per-coordinate step 1e-6 (1 + |z_i|)."""
    if analytic is not None:
        return np.atleast_2d(analytic(z))
    z = np.asarray(z, dtype=float)
    f0 = np.atleast_1d(fun(z))
    J = np.empty((f0.shape[0], z.shape[0]))
    for i in range(z.shape[0]):
        step = 1e-6 * (1.0 + abs(z[i]))
        zp, zm = z.copy(), z.copy()
        zp[i] += step
        zm[i] -= step
        J[:, i] = (np.atleast_1d(fun(zp)) - np.atleast_1d(fun(zm))) / (2 * step)
    return J


def _violation(prob: NlpProblem, z: np.ndarray) -> float:
    v = 0.0
    for blk in prob.eq_constraints:
        v += float(np.abs(np.atleast_1d(blk.fun(z))).sum())
    for blk in prob.in_constraints:
        v += float(np.maximum(np.atleast_1d(blk.fun(z)), 0.0).sum())
    for soc in prob.socs:
        v += max(soc.violation(z), 0.0)
    return v


def _max_violation(prob: NlpProblem, z: np.ndarray) -> float:
    v = 0.0
    for blk in prob.eq_constraints:
        v = max(v, float(np.abs(np.atleast_1d(blk.fun(z))).max(initial=0.0)))
    for blk in prob.in_constraints:
        v = max(v, float(np.atleast_1d(blk.fun(z)).max(initial=0.0)))
    for soc in prob.socs:
        v = max(v, soc.violation(z))
    return v


def _subproblem(prob: NlpProblem, z: np.ndarray, elastic_weight: float | None):
    """QP in the step d (and elastic slacks when requested)."""
    d = prob.dim
    eq_rows, eq_rhs = [], []
    for blk in prob.eq_constraints:
        eq_rows.append(blk.jacobian_at(z))
        eq_rhs.append(-np.atleast_1d(blk.fun(z)))
    in_rows, in_rhs = [], []
    for blk in prob.in_constraints:
        in_rows.append(blk.jacobian_at(z))
        in_rhs.append(-np.atleast_1d(blk.fun(z)))
    A_eq = np.vstack(eq_rows) if eq_rows else None
    b_eq = np.concatenate(eq_rhs) if eq_rhs else None
    A_in = np.vstack(in_rows) if in_rows else None
    b_in = np.concatenate(in_rhs) if in_rhs else None
    socs = [conic.SocConstraint(s.G, s.g + s.G @ z, s.c, s.d + float(s.c @ z))
            for s in prob.socs]

    reg = HESSIAN_REG * (1.0 + float(np.abs(np.diag(prob.objective.H)).max(initial=0.0)))
    H = prob.objective.H + reg * np.eye(d)
    g = prob.objective.gradient(z)
    if elastic_weight is None:
        return conic.ConicProgram(H=H, f=g, A_eq=A_eq, b_eq=b_eq,
                                  A_in=A_in, b_in=b_in, socs=socs), d

    # elastic reformulation: |eq + J d| <= t_eq, in + J d <= t_in, t >= 0
    n_eq = A_eq.shape[0] if A_eq is not None else 0
    n_in = A_in.shape[0] if A_in is not None else 0
    dim = d + n_eq + n_in
    He = reg * np.eye(dim)
    He[:d, :d] += prob.objective.H
    fe = np.concatenate([g, elastic_weight * np.ones(n_eq + n_in)])
    rows, rhs = [], []
    if n_eq:
        E = np.zeros((n_eq, dim))
        E[:, :d] = A_eq
        E[:, d : d + n_eq] = -np.eye(n_eq)
        rows.append(E)
        rhs.append(b_eq)
        E2 = np.zeros((n_eq, dim))
        E2[:, :d] = -A_eq
        E2[:, d : d + n_eq] = -np.eye(n_eq)
        rows.append(E2)
        rhs.append(-b_eq)
    if n_in:
        E = np.zeros((n_in, dim))
        E[:, :d] = A_in
        E[:, d + n_eq :] = -np.eye(n_in)
        rows.append(E)
        rhs.append(b_in)
    T = np.zeros((n_eq + n_in, dim))
    T[:, d:] = -np.eye(n_eq + n_in)
    rows.append(T)
    rhs.append(np.zeros(n_eq + n_in))
    socs_e = [conic.SocConstraint(np.hstack([s.G, np.zeros((s.G.shape[0], dim - d))]),
                                  s.g, np.concatenate([s.c, np.zeros(dim - d)]), s.d)
              for s in socs]
    return conic.ConicProgram(H=He, f=fe, A_in=np.vstack(rows),
                              b_in=np.concatenate(rhs), socs=socs_e), d


def sqp_solve(prob: NlpProblem, z0: np.ndarray, max_iter: int = MAX_SQP_ITER,
              tol: float = KKT_TOL) -> SqpReport:
    """Gauss-Newton SQP with exact quadratic cost and l1 merit line search."""
    z = np.asarray(z0, dtype=float).copy()
    if not np.all(np.isfinite(z)):
        raise ValueError("initial iterate must be finite")
    accepted = 0
    step_norm = np.inf
    for _ in range(max_iter):
        mu = 10.0 * (1.0 + float(np.abs(prob.objective.gradient(z)).max(initial=0.0)))
        sub, d = _subproblem(prob, z, elastic_weight=None)
        sol = conic.solve(sub)
        if sol.status != conic.Status.OPTIMAL:
            weight = 1e4 * (1.0 + float(np.abs(prob.objective.gradient(z)).max(initial=0.0)))
            sub, d = _subproblem(prob, z, elastic_weight=weight)
            sol = conic.solve(sub)
            if sol.status != conic.Status.OPTIMAL:
                break
        step = sol.z[:d]
        step_norm = float(np.abs(step).max(initial=0.0))
        viol = _max_violation(prob, z)
        # optimality proxy: the step is negligible, or the exact QP model
        # predicts no meaningful decrease (flat-direction case)
        pred = -(float(prob.objective.gradient(z) @ step)
                 + 0.5 * float(step @ prob.objective.H @ step))
        rel_pred = abs(pred) / (1.0 + abs(prob.objective.value(z)))
        proxy = max(viol, min(step_norm, rel_pred))
        if proxy <= tol or step_norm <= 1e-9 * (1.0 + np.abs(z).max()):
            feasible = viol <= 1e-6
            return SqpReport(z, proxy, accepted,
                             converged=feasible and proxy <= tol,
                             feasible=feasible, objective=prob.objective.value(z))

        phi0 = prob.objective.value(z) + mu * _violation(prob, z)
        deriv = float(prob.objective.gradient(z) @ step) - mu * _violation(prob, z)
        if deriv > 0:
            mu *= 10.0
            phi0 = prob.objective.value(z) + mu * _violation(prob, z)
            deriv = float(prob.objective.gradient(z) @ step) - mu * _violation(prob, z)
        alpha = 1.0
        ok = False
        for _ in range(MAX_BACKTRACKS):
            cand = z + alpha * step
            if prob.objective.value(cand) + mu * _violation(prob, cand) \
                    <= phi0 + ARMIJO * alpha * deriv + 1e-12:
                ok = True
                break
            alpha *= BACKTRACK
        if not ok:
            viol = _max_violation(prob, z)
            return SqpReport(z, max(viol, step_norm), accepted, converged=False,
                             feasible=viol <= 1e-6,
                             objective=prob.objective.value(z))
        z = z + alpha * step
        accepted += 1
    viol = _max_violation(prob, z)
    return SqpReport(z, max(viol, step_norm), accepted, converged=False,
                     feasible=viol <= 1e-6, objective=prob.objective.value(z))
