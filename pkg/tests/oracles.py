"""Independent reference implementations used only by the tests.

These deliberately avoid the library's own algorithms: brute-force
enumeration, truncated series, value iteration, dense grids, and finite
differences.
"""

from __future__ import annotations

import itertools

import numpy as np


def dlyap_series(A: np.ndarray, Q: np.ndarray, terms: int = 200) -> np.ndarray:
    """P = sum_k (A')^k Q A^k truncated."""
    P = np.zeros_like(Q, dtype=float)
    Ak = np.eye(A.shape[0])
    for _ in range(terms):
        P += Ak.T @ Q @ Ak
        Ak = Ak @ A
    return P


def lqr_value_iteration(A, B, Q, R, steps: int = 500):
    """Finite-horizon Riccati recursion from P = Q."""
    P = Q.copy()
    for _ in range(steps):
        K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P = Q + K.T @ R @ K + (A + B @ K).T @ P @ (A + B @ K)
        P = 0.5 * (P + P.T)
    K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return P, K


def box_qp_active_set_enumeration(H, f, lo, hi):
    """Global minimum of 0.5 z'Hz + f'z subject to lo <= z <= hi by trying
    all 3^n lower/free/upper patterns."""
    n = f.shape[0]
    best, best_val = None, np.inf
    for pattern in itertools.product((-1, 0, 1), repeat=n):
        fixed = {}
        free = []
        for j, p in enumerate(pattern):
            if p == -1:
                fixed[j] = lo[j]
            elif p == 1:
                fixed[j] = hi[j]
            else:
                free.append(j)
        z = np.zeros(n)
        for j, v in fixed.items():
            z[j] = v
        if free:
            Hff = H[np.ix_(free, free)]
            rhs = -f[free] - sum(H[np.ix_(free, [j])].ravel() * v
                                 for j, v in fixed.items())
            try:
                z_free = np.linalg.solve(Hff, rhs)
            except np.linalg.LinAlgError:
                continue
            z[free] = z_free
        if np.any(z < lo - 1e-9) or np.any(z > hi + 1e-9):
            continue
        val = 0.5 * z @ H @ z + f @ z
        if val < best_val - 1e-12:
            best, best_val = z.copy(), val
    return best, best_val


def grid_membership(H, h, lo, hi, count: int = 100):
    """Dense grid over [lo, hi]^2 with per-point membership (2-D only)."""
    xs = np.linspace(lo[0], hi[0], count)
    ys = np.linspace(lo[1], hi[1], count)
    pts = np.array([[a, b] for a in xs for b in ys])
    inside = np.all(pts @ H.T <= h + 1e-12, axis=1)
    return pts, inside


def forward_invariance_membership(A_cl, H, h, x, steps: int = 200,
                                  tol: float = 1e-9) -> bool:
    """Membership oracle for the maximal positively invariant set: simulate
    and require constraint satisfaction along the whole trajectory."""
    xk = x.copy()
    for _ in range(steps):
        if np.any(H @ xk > h + tol):
            return False
        xk = A_cl @ xk
    return True


def rk4_reference(f, x, u, dt, substeps: int = 1000):
    h = dt / substeps
    x = x.copy()
    for _ in range(substeps):
        k1 = f(x, u)
        k2 = f(x + 0.5 * h * k1, u)
        k3 = f(x + 0.5 * h * k2, u)
        k4 = f(x + h * k3, u)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def finite_difference_jacobian(fun, z, step_scale: float = 1e-6):
    z = np.asarray(z, dtype=float)
    f0 = np.atleast_1d(fun(z))
    J = np.empty((f0.shape[0], z.shape[0]))
    for i in range(z.shape[0]):
        s = step_scale * (1.0 + abs(z[i]))
        zp, zm = z.copy(), z.copy()
        zp[i] += s
        zm[i] -= s
        J[:, i] = (np.atleast_1d(fun(zp)) - np.atleast_1d(fun(zm))) / (2 * s)
    return J
