"""Half-space polytope arithmetic and invariant/contractive set computation.

A :class:`Polytope` is the set ``{x : H x <= h}``.  Operations cover
membership, Euclidean distance/projection, support-function tightening
(Pontryagin difference with balls and ellipsoids), the maximal positively
invariant set of a stable linear map, and maximal rho-contractive sets
whose Minkowski functional serves as a polytopic incremental Lyapunov
function.  Internal LPs use scipy's HiGHS backend; the projection QP is
solved through :mod:`softmpc.conic`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linprog

from . import conic

__all__ = [
    "DimensionMismatch",
    "EmptySetError",
    "NoConvergence",
    "PolyIncLyap",
    "Polytope",
    "box",
    "max_positive_invariant",
    "max_rho_contractive",
    "minkowski_eval",
]

TOL = 1e-9


class DimensionMismatch(ValueError):
    pass


class EmptySetError(ValueError):
    pass


class NoConvergence(RuntimeError):
    pass


def _lp_max(c: np.ndarray, H: np.ndarray, h: np.ndarray):
    """max c'x s.t. Hx <= h.  Returns (value, status) with value=inf if unbounded."""
    res = linprog(-c, A_ub=H, b_ub=h, bounds=(None, None), method="highs")
    if res.status == 0:
        return -res.fun, "optimal"
    if res.status == 3:
        return np.inf, "unbounded"
    if res.status == 2:
        return -np.inf, "infeasible"
    raise NoConvergence(f"LP failed with status {res.status}: {res.message}")


@dataclass(frozen=True)
class Polytope:
    """{x : H x <= h} with no all-zero rows."""

    H: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        h = np.asarray(self.h, dtype=float).ravel()
        if H.shape[0] != h.shape[0]:
            raise DimensionMismatch("H rows and h length differ")
        norms = np.linalg.norm(H, axis=1)
        if H.shape[0] and norms.min(initial=np.inf) < 1e-14:
            raise ValueError("all-zero row in H")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "h", h)

    @property
    def n(self) -> int:
        return self.H.shape[1]

    @property
    def n_rows(self) -> int:
        return self.H.shape[0]

    def normalize(self) -> "Polytope":
        norms = np.linalg.norm(self.H, axis=1)
        return Polytope(self.H / norms[:, None], self.h / norms)

    @property
    def is_normalized(self) -> bool:
        return bool(np.allclose(np.linalg.norm(self.H, axis=1), 1.0, atol=1e-9))

    def contains(self, x: np.ndarray, tol: float = TOL) -> bool:
        x = np.asarray(x, dtype=float).ravel()
        if x.shape[0] != self.n:
            raise DimensionMismatch(f"point dim {x.shape[0]} != {self.n}")
        return bool(np.all(self.H @ x <= self.h + tol))

    def chebyshev(self) -> tuple[float, np.ndarray]:
        """(radius, center) of the largest inscribed ball; radius < 0 if empty."""
        norms = np.linalg.norm(self.H, axis=1)
        A = np.hstack([self.H, norms[:, None]])
        c = np.zeros(self.n + 1)
        c[-1] = -1.0
        res = linprog(c, A_ub=A, b_ub=self.h, bounds=(None, None), method="highs")
        if res.status == 2:
            return -np.inf, np.full(self.n, np.nan)
        if res.status == 3:
            # radius unbounded (set has nonempty interior everywhere)
            return np.inf, np.zeros(self.n)
        if res.status != 0:
            raise NoConvergence(res.message)
        return res.x[-1], res.x[:-1]

    @property
    def is_empty(self) -> bool:
        return self.chebyshev()[0] < -TOL

    @property
    def is_degenerate(self) -> bool:
        """Empty interior (possibly nonempty set of lower dimension)."""
        return self.chebyshev()[0] < TOL

    def project(self, x: np.ndarray) -> np.ndarray:
        """Euclidean projection of x onto the set (via conic QP)."""
        x = np.asarray(x, dtype=float).ravel()
        if x.shape[0] != self.n:
            raise DimensionMismatch(f"point dim {x.shape[0]} != {self.n}")
        if self.contains(x):
            return x.copy()
        prog = conic.ConicProgram(
            H=2.0 * np.eye(self.n), f=-2.0 * x, A_in=self.H, b_in=self.h,
            c0=float(x @ x), var_names={"p": (0, self.n)})
        sol = conic.solve(prog)
        if sol.status != conic.Status.OPTIMAL:
            raise EmptySetError("projection target set is empty")
        return sol.z

    def distance(self, x: np.ndarray) -> float:
        """Euclidean point-to-set distance; 0 iff the point is contained."""
        if self.contains(x):
            return 0.0
        return float(np.linalg.norm(np.asarray(x, dtype=float).ravel() - self.project(x)))

    def tighten_by_ball(self, radius: float) -> "Polytope":
        """Pontryagin difference with the Euclidean ball of given radius."""
        if radius < 0:
            raise ValueError("radius must be nonnegative")
        if not self.is_normalized:
            raise ValueError("tightening requires normalized rows")
        return Polytope(self.H, self.h - radius)

    def tighten_by_ellipsoid(self, P: np.ndarray, delta: float) -> "Polytope":
        """Pontryagin difference with {e : e'Pe <= delta^2} (exact per row)."""
        if delta < 0:
            raise ValueError("delta must be nonnegative")
        if not self.is_normalized:
            raise ValueError("tightening requires normalized rows")
        Pinv = np.linalg.inv(P)
        margins = delta * np.sqrt(np.einsum("ij,jk,ik->i", self.H, Pinv, self.H))
        return Polytope(self.H, self.h - margins)

    def intersect(self, other: "Polytope") -> "Polytope":
        if other.n != self.n:
            raise DimensionMismatch("dimension mismatch in intersection")
        return Polytope(np.vstack([self.H, other.H]), np.concatenate([self.h, other.h]))

    def remove_redundancy(self, tol: float = TOL) -> "Polytope":
        """Drop rows whose removal does not change the set (per-row LP)."""
        H, h = self.H.copy(), self.h.copy()
        keep = np.ones(H.shape[0], dtype=bool)
        for i in range(H.shape[0]):
            mask = keep.copy()
            mask[i] = False
            if not mask.any():
                continue
            val, status = _lp_max(H[i], H[mask], h[mask])
            if status == "optimal" and val <= h[i] + tol:
                keep[i] = False
        return Polytope(H[keep], h[keep])

    def support(self, direction: np.ndarray) -> float:
        val, status = _lp_max(np.asarray(direction, dtype=float), self.H, self.h)
        if status == "infeasible":
            raise EmptySetError("support of empty set")
        return val

    @property
    def is_bounded(self) -> bool:
        for j in range(self.n):
            e = np.zeros(self.n)
            e[j] = 1.0
            if not np.isfinite(self.support(e)) or not np.isfinite(self.support(-e)):
                return False
        return True

    def vertices(self, tol: float = 1e-7) -> np.ndarray:
        """Vertex enumeration by basis intersection; supported for n <= 3."""
        if self.n > 3:
            raise NotImplementedError("vertex enumeration limited to n <= 3")
        pts = []
        for idx in itertools.combinations(range(self.n_rows), self.n):
            A = self.H[list(idx)]
            if abs(np.linalg.det(A)) < 1e-12:
                continue
            v = np.linalg.solve(A, self.h[list(idx)])
            if np.all(self.H @ v <= self.h + tol):
                pts.append(v)
        if not pts:
            return np.zeros((0, self.n))
        out = []
        for v in pts:
            if not any(np.linalg.norm(v - w) < 1e-8 for w in out):
                out.append(v)
        return np.array(out)

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """Rejection-sample interior points using the bounding box."""
        lo = np.array([-self.support(-_unit(self.n, j)) for j in range(self.n)])
        hi = np.array([self.support(_unit(self.n, j)) for j in range(self.n)])
        out = np.empty((count, self.n))
        got = 0
        while got < count:
            cand = rng.uniform(lo, hi, size=(4 * count, self.n))
            ok = np.all(cand @ self.H.T <= self.h + TOL, axis=1)
            take = cand[ok][: count - got]
            out[got : got + take.shape[0]] = take
            got += take.shape[0]
        return out

    # -- plain-text serialization (H rows then h) ----------------------------

    def to_text(self) -> str:
        lines = [f"{self.n_rows} {self.n}"]
        for row in self.H:
            lines.append(" ".join(repr(float(v)) for v in row))
        lines.append(" ".join(repr(float(v)) for v in self.h))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Polytope":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        p, n = (int(v) for v in lines[0].split())
        H = np.array([[float(v) for v in lines[1 + i].split()] for i in range(p)])
        h = np.array([float(v) for v in lines[1 + p].split()])
        return cls(H.reshape(p, n), h)


def _unit(n: int, j: int) -> np.ndarray:
    e = np.zeros(n)
    e[j] = 1.0
    return e


def box(lo, hi) -> Polytope:
    """Axis-aligned box {lo <= x <= hi} with unit-norm rows."""
    lo = np.asarray(lo, dtype=float).ravel()
    hi = np.asarray(hi, dtype=float).ravel()
    n = lo.shape[0]
    H = np.vstack([np.eye(n), -np.eye(n)])
    h = np.concatenate([hi, -lo])
    return Polytope(H, h)


@dataclass(frozen=True)
class PolyIncLyap:
    """Minkowski-functional Lyapunov function of a rho-contractive polytope.

    ``V(x, z) = max_i F_i (x - z)`` where {F x <= 1} is rho-contractive.
    """

    F: np.ndarray
    rho: float
    c1: float = field(default=0.0)  # linear lower bound V >= c1 * ||x - z||

    def __post_init__(self):
        if not (0.0 <= self.rho < 1.0):
            raise ValueError("rho must lie in [0, 1)")
        if self.c1 == 0.0:
            verts = Polytope(self.F, np.ones(self.F.shape[0])).vertices() \
                if self.F.shape[1] <= 3 else None
            if verts is not None and verts.shape[0]:
                object.__setattr__(self, "c1", 1.0 / np.linalg.norm(verts, axis=1).max())

    @property
    def set(self) -> Polytope:
        return Polytope(self.F, np.ones(self.F.shape[0]))

    def value(self, v: np.ndarray) -> float:
        return minkowski_eval(self, v)


def minkowski_eval(lyap: PolyIncLyap | np.ndarray, v: np.ndarray) -> float:
    """max_i F_i v, clamped below at zero."""
    F = lyap.F if isinstance(lyap, PolyIncLyap) else np.asarray(lyap)
    return float(max((F @ np.asarray(v, dtype=float).ravel()).max(initial=0.0), 0.0))


def _certify_invariance(A_cl: np.ndarray, omega: Polytope, samples: int = 10_000) -> None:
    n = omega.n
    if n <= 3:
        for v in omega.vertices():
            if not omega.contains(A_cl @ v, tol=1e-7):
                raise NoConvergence("invariance certification failed on a vertex")
    else:
        rng = np.random.default_rng(0)
        pts = omega.sample(samples, rng)
        # push points outward to the boundary along their ray
        for x in pts:
            gains = omega.h / np.maximum(omega.H @ x, 1e-300)
            t = gains[gains > 0].min(initial=1.0)
            xb = x * min(t, 1.0)
            if not omega.contains(A_cl @ xb, tol=1e-7):
                raise NoConvergence("invariance certification failed on a boundary sample")


def max_positive_invariant(A_cl: np.ndarray, constraint: Polytope,
                           max_iter: int = 500) -> Polytope:
    """Maximal positively invariant set of x+ = A_cl x inside the constraint.

    Fixed point of ``O_{k+1} = O_k ∩ {x : A_cl x ∈ O_k}`` with per-step
    redundancy pruning; invariance certified on vertices (n <= 3) or
    boundary samples.
    """
    A_cl = np.asarray(A_cl, dtype=float)
    if np.abs(np.linalg.eigvals(A_cl)).max() >= 1.0:
        raise ValueError("A_cl must be Schur stable")
    omega = constraint.remove_redundancy()
    base_H, base_h = constraint.H, constraint.h
    power = A_cl
    for _ in range(max_iter):
        new_rows, new_rhs = [], []
        mapped = base_H @ power
        for i in range(mapped.shape[0]):
            val, status = _lp_max(mapped[i], omega.H, omega.h)
            if status == "unbounded" or val > base_h[i] + TOL:
                new_rows.append(mapped[i])
                new_rhs.append(base_h[i])
        if not new_rows:
            _certify_invariance(A_cl, omega)
            return omega
        omega = Polytope(np.vstack([omega.H, np.array(new_rows)]),
                         np.concatenate([omega.h, np.array(new_rhs)])).remove_redundancy()
        power = power @ A_cl
    raise NoConvergence(f"no fixed point within {max_iter} iterations")


def max_rho_contractive(A: np.ndarray, rho: float, constraint: Polytope,
                        max_iter: int = 500) -> PolyIncLyap:
    """Maximal rho-contractive polytope {F x <= 1} inside the constraint.

    Fixed point of ``O_{k+1} = O_k ∩ {x : A x ∈ rho O_k}``; contraction
    certified on the vertices of the result.
    """
    A = np.asarray(A, dtype=float)
    if not (0.0 < rho < 1.0):
        raise ValueError("rho must lie in (0, 1)")
    if np.abs(np.linalg.eigvals(A)).max() >= rho:
        raise NoConvergence("spectral radius of A is >= rho; iteration cannot terminate")
    # scale rows to F x <= 1
    start = constraint.remove_redundancy()
    if (start.h <= TOL).any():
        raise ValueError("constraint must contain the origin in its interior")
    F = start.H / start.h[:, None]
    omega = Polytope(F, np.ones(F.shape[0]))
    base_F = F
    power = A / rho
    for _ in range(max_iter):
        mapped = base_F @ power
        new_rows = []
        for i in range(mapped.shape[0]):
            val, status = _lp_max(mapped[i], omega.H, omega.h)
            if status == "unbounded" or val > 1.0 + TOL:
                new_rows.append(mapped[i])
        if not new_rows:
            break
        omega = Polytope(np.vstack([omega.H, np.array(new_rows)]),
                         np.ones(omega.n_rows + len(new_rows))).remove_redundancy()
        power = power @ (A / rho)
    else:
        raise NoConvergence(f"no fixed point within {max_iter} iterations")
    F_out = omega.H / omega.h[:, None]
    lyap = PolyIncLyap(F_out, rho)
    if omega.n <= 3:
        for v in Polytope(F_out, np.ones(F_out.shape[0])).vertices():
            if minkowski_eval(F_out, A @ v) > rho * minkowski_eval(F_out, v) + 1e-7:
                raise NoConvergence("contraction certification failed on a vertex")
    return lyap
