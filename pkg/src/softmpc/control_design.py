"""Offline design computations for the relaxed-initial-state MPC family.

Covers the discrete Lyapunov and Riccati equations, quadratic incremental
Lyapunov functions with their contraction constants, robust-invariance
levels for tube designs, LQR terminal ingredients, and a sampling-based
estimate of the exact-penalty weight for polytopic penalties.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conic import Status
from .polytope import PolyIncLyap, Polytope, max_positive_invariant

__all__ = [
    "InfeasibleSample",
    "NoConvergence",
    "NotContractive",
    "QuadIncLyap",
    "SpectralRadiusError",
    "TerminalIngredients",
    "contraction_constants",
    "dare_lqr",
    "dlyap",
    "exact_penalty_threshold",
    "global_quadratic_terminal",
    "lqr_terminal_ingredients",
    "rpi_level",
    "verify_terminal",
]


class SpectralRadiusError(ValueError):
    """System matrix is not Schur stable (see the marginally stable variant)."""


class NoConvergence(RuntimeError):
    pass


class NotContractive(ValueError):
    pass


class InfeasibleSample(ValueError):
    pass


@dataclass(frozen=True)
class QuadIncLyap:
    """Quadratic incremental Lyapunov function V(x, z) = ||x - z||_P^2.

    ``c_delta = (c1, c2, c3, c4)`` are the quadratic comparison constants
    (lower/upper sandwich, decrease, disturbance gain) and ``rho_delta``
    the contraction rate of sqrt(V); ``rho_delta = 1`` marks the marginal
    (non-contractive) case used for undamped oscillators.
    """

    P: np.ndarray
    c_delta: tuple[float, float, float, float]
    rho_delta: float
    A: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        if not np.allclose(P, P.T, atol=1e-10):
            raise ValueError("P must be symmetric")
        if np.linalg.eigvalsh(P).min() <= 0:
            raise ValueError("P must be positive definite")
        if not (0.0 <= self.rho_delta <= 1.0):
            raise ValueError("rho_delta must lie in [0, 1]")
        object.__setattr__(self, "P", P)

    @property
    def is_marginal(self) -> bool:
        return self.rho_delta >= 1.0

    @property
    def sqrt_P(self) -> np.ndarray:
        """Upper Cholesky factor L with L'L = P (so ||L e|| = sqrt(V))."""
        return np.linalg.cholesky(self.P).T

    def value(self, x: np.ndarray, z: np.ndarray) -> float:
        e = np.asarray(x, dtype=float) - np.asarray(z, dtype=float)
        return float(e @ self.P @ e)

    @classmethod
    def marginal(cls, P: np.ndarray) -> "QuadIncLyap":
        """Non-contractive certificate (A'PA - P <= 0 only)."""
        P = np.asarray(P, dtype=float)
        eig = np.linalg.eigvalsh(P)
        return cls(P, (float(eig.min()), float(eig.max()), 0.0, float(eig.max())), 1.0)


@dataclass(frozen=True)
class TerminalIngredients:
    """LQR-style terminal penalty, feedback, and invariant terminal set."""

    P_f: np.ndarray
    K: np.ndarray
    X_f: Polytope
    alpha_N: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.alpha_N <= 1.0):
            raise ValueError("alpha_N must lie in (0, 1]")


def dlyap(A: np.ndarray, Q: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Solve A'PA + Q - P = 0 by Smith doubling.

    Requires A Schur stable; raises SpectralRadiusError otherwise (the
    marginal regime is handled by QuadIncLyap.marginal instead).
    """
    A = np.asarray(A, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if np.abs(np.linalg.eigvals(A)).max(initial=0.0) >= 1.0 - 1e-9:
        raise SpectralRadiusError("spectral radius of A must be < 1")
    P = 0.5 * (Q + Q.T)
    Ak = A.copy()
    for _ in range(200):
        update = Ak.T @ P @ Ak
        P = P + update
        if np.abs(update).max(initial=0.0) < tol:
            return 0.5 * (P + P.T)
        Ak = Ak @ Ak
    raise NoConvergence("Smith iteration did not converge")


def dare_lqr(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray,
             tol: float = 1e-12, max_iter: int = 10_000):
    """Discrete-time LQR: Riccati fixed point P_f and gain K (u = K x)."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        gain = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = Q + A.T @ P @ (A - B @ gain)
        P_next = 0.5 * (P_next + P_next.T)
        if np.abs(P_next - P).max() < tol:
            P = P_next
            break
        P = P_next
    else:
        raise NoConvergence("Riccati recursion did not converge")
    K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    if B.any() and np.abs(np.linalg.eigvals(A + B @ K)).max() >= 1.0:
        raise NoConvergence("Riccati solution does not stabilize the system")
    return P, K


def contraction_constants(A: np.ndarray, P: np.ndarray, Q_dec: np.ndarray,
                          samples: int = 1000, rng_seed: int = 0) -> QuadIncLyap:
    """Comparison constants of V(x,z) = ||x-z||_P^2 for open-loop dynamics A.

    Requires A'PA - P <= -Q_dec.  The disturbance gain c4 splits the cross
    term with the Young-inequality parameter that keeps half of the raw
    contraction margin, inflated where needed so that the pair
    (rho_delta, c4) satisfies V+ <= rho_delta V + c4 ||w||^2 pointwise.

    The reported decrease constant c3 = min eig(Q_dec) is the raw
    certificate A'PA - P <= -Q_dec; jointly with c4 only half of it is
    achievable pointwise (the cross term consumes the other half), so the
    sampled verification certifies V+ <= V - (c3/2)||e||^2 + c4 ||w||^2
    and the geometric form above, which are what the robust-invariance
    and decrease arguments actually use.
    """
    A = np.asarray(A, dtype=float)
    P = np.asarray(P, dtype=float)
    Q_dec = np.asarray(Q_dec, dtype=float)
    M = A.T @ P @ A - P + Q_dec
    if np.linalg.eigvalsh(0.5 * (M + M.T)).max() > 1e-9:
        raise NotContractive("A'PA - P + Q_dec has a positive eigenvalue")
    eig_P = np.linalg.eigvalsh(P)
    c1, c2 = float(eig_P.min()), float(eig_P.max())
    c3 = float(np.linalg.eigvalsh(Q_dec).min())
    rho_sq = 1.0 - c3 / c2
    rho = float(np.sqrt(max(rho_sq, 0.0)))
    eps = 1.0 if rho_sq <= 1.0 / 3.0 else (1.0 - rho_sq) / (2.0 * rho_sq)
    c4_young = (1.0 + 1.0 / eps) * c2
    c4_norm = c2 if rho == 0.0 else c2 / (1.0 - rho)
    c4 = float(max(c4_young, c4_norm))
    lyap = QuadIncLyap(P, (c1, c2, c3, c4), rho, A=A)

    rng = np.random.default_rng(rng_seed)
    n = A.shape[0]
    e = rng.normal(size=(samples, n))
    w = rng.normal(size=(samples, n)) * rng.uniform(0, 1, size=(samples, 1))
    for k in range(samples):
        v_now = e[k] @ P @ e[k]
        ep = A @ e[k] + w[k]
        v_next = ep @ P @ ep
        wn2 = w[k] @ w[k]
        if v_next > v_now - 0.5 * c3 * (e[k] @ e[k]) + c4 * wn2 + 1e-7:
            raise NotContractive("sampled decrease check failed")
        if v_next > rho * v_now + c4 * wn2 + 1e-9 * (1.0 + v_now):
            raise NotContractive("sampled geometric decrease check failed")
    return lyap


def rpi_level(lyap: QuadIncLyap, w_bar: float, samples: int = 1000,
              rng_seed: int = 0) -> float:
    """Sublevel radius delta with {sqrt(V) <= delta} robustly invariant
    for disturbances ||w|| <= w_bar."""
    if w_bar < 0:
        raise ValueError("w_bar must be nonnegative")
    if lyap.is_marginal:
        raise ValueError("marginal Lyapunov function admits no finite RPI level")
    c4 = lyap.c_delta[3]
    delta = float(np.sqrt(c4) * w_bar / (1.0 - lyap.rho_delta))
    if lyap.A is not None and w_bar > 0:
        rng = np.random.default_rng(rng_seed)
        n = lyap.P.shape[0]
        L = lyap.sqrt_P
        Linv = np.linalg.inv(L)
        for _ in range(samples):
            d = rng.normal(size=n)
            e = Linv @ (d / np.linalg.norm(d)) * delta * rng.uniform() ** (1 / n)
            w = rng.normal(size=n)
            w = w / np.linalg.norm(w) * w_bar * rng.uniform() ** (1 / n)
            ep = lyap.A @ e + w
            if np.sqrt(ep @ lyap.P @ ep) > delta + 1e-9:
                raise NoConvergence("sampled robust-invariance check failed")
    return delta


def global_quadratic_terminal(A: np.ndarray, Q: np.ndarray, X: Polytope,
                              Q_xi: np.ndarray) -> np.ndarray:
    """Globally valid terminal penalty A'PA - P + Q + H'Q_xi H = 0.

    H is the normalized constraint matrix of X, matching the per-step
    violation penalty of the globally feasible soft-constrained baseline.
    """
    H = X.normalize().H
    return dlyap(A, Q + H.T @ Q_xi @ H)


def lqr_terminal_ingredients(A: np.ndarray, B: np.ndarray, Q: np.ndarray,
                             R: np.ndarray, X: Polytope, U: Polytope,
                             input_only: bool = False, bound: float = 100.0,
                             max_iter: int = 500) -> TerminalIngredients:
    """LQR terminal cost, gain, and maximal positively invariant terminal set.

    With ``input_only`` the terminal set only enforces the input constraint
    along the closed loop (the softened-terminal baseline); the state
    constraint is replaced by a generous box that the pruning step removes
    whenever the true invariant set is bounded well inside it.
    """
    P_f, K = dare_lqr(A, B, Q, R)
    rows = [U.H @ K]
    rhs = [U.h]
    if input_only:
        n = A.shape[0]
        guard = bound * float(np.abs(X.h).max())
        rows.append(np.vstack([np.eye(n), -np.eye(n)]))
        rhs.append(np.full(2 * n, guard))
    else:
        rows.append(X.H)
        rhs.append(X.h)
    constraint = Polytope(np.vstack(rows), np.concatenate(rhs)).normalize()
    X_f = max_positive_invariant(A + B @ K, constraint, max_iter=max_iter)
    return TerminalIngredients(P_f, K, X_f, alpha_N=1.0)


def verify_terminal(term: TerminalIngredients, A: np.ndarray, B: np.ndarray,
                    Q: np.ndarray, R: np.ndarray, X: Polytope, U: Polytope,
                    samples: int = 1000, rng_seed: int = 0,
                    check_state: bool = True) -> float:
    """Check invariance, constraint admissibility, and CLF decrease of the
    terminal ingredients on vertices plus interior samples; returns the
    worst CLF-decrease slack (nonnegative when all checks pass)."""
    A_cl = A + B @ term.K
    pts = []
    if term.X_f.n <= 3:
        pts.append(term.X_f.vertices())
    pts.append(term.X_f.sample(samples, np.random.default_rng(rng_seed)))
    worst = np.inf
    for x in np.vstack(pts):
        u = term.K @ x
        xp = A_cl @ x
        if not term.X_f.contains(xp, tol=1e-7):
            raise NotContractive("terminal set is not positively invariant")
        if check_state and not X.contains(x, tol=1e-7):
            raise NotContractive("terminal set leaves the state constraints")
        if not U.contains(u, tol=1e-7):
            raise NotContractive("terminal feedback violates input constraints")
        lhs = xp @ term.P_f @ xp - x @ term.P_f @ x
        rhs = -(x @ Q @ x + u @ R @ u)
        worst = min(worst, rhs - lhs)
        if lhs > rhs + 1e-7:
            raise NotContractive("terminal penalty is not a local CLF")
    return float(worst)


def exact_penalty_threshold(spec, poly_lyap: PolyIncLyap,
                            sample_set: np.ndarray) -> float:
    """Estimate of the penalty weight above which the relaxed problem
    returns the measured state exactly on the feasible set.

    Uses the largest finite-difference slope of the nominal value function
    over all sample pairs, inflated by a factor of two, divided by the
    linear lower-bound constant of the Minkowski penalty.  The estimate is
    heuristic; exactness is validated a posteriori by the property tests.
    """
    from . import ocp  # deferred: ocp depends on this module's types

    if poly_lyap.c1 <= 0:
        raise ValueError("poly_lyap lacks a positive linear lower-bound constant")
    samples = np.atleast_2d(np.asarray(sample_set, dtype=float))
    values = []
    for x in samples:
        res = ocp.mpc_step(spec, x)
        if res.status != Status.OPTIMAL:
            raise InfeasibleSample(f"sample state {x} infeasible for the nominal MPC")
        values.append(res.value)
    values = np.asarray(values)
    slope = 0.0
    for i in range(len(samples)):
        d = np.linalg.norm(samples[i + 1 :] - samples[i], axis=1)
        dv = np.abs(values[i + 1 :] - values[i])
        ok = d > 1e-12
        if ok.any():
            slope = max(slope, float((dv[ok] / d[ok]).max()))
    return 2.0 * slope / poly_lyap.c1
