"""Canonical convex program (QP + second-order cones) and its solver.

Every online optimization problem in this package is expressed as a
:class:`ConicProgram`: a convex quadratic cost with linear equality,
linear inequality, and second-order-cone constraints.  The solver is a
thin wrapper around cvxopt's interior-point methods (``coneqp`` /
``conelp``) with an active-set polish step for pure QPs, which brings
solutions to near machine precision so that downstream tolerance checks
(exact penalties, value-function domination) are not limited by
interior-point accuracy.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from cvxopt import matrix as _cvx
from cvxopt import solvers as _solvers
from scipy.optimize import linprog as _linprog

__all__ = [
    "ConicProgram",
    "IllFormed",
    "SocConstraint",
    "Solution",
    "Status",
    "UnknownVariable",
    "extract",
    "solve",
]

ABS_TOL = 1e-6
REL_TOL = 1e-6
MAX_ITER = 200

_IP_OPTIONS = {
    "show_progress": False,
    "abstol": 1e-9,
    "reltol": 1e-9,
    "feastol": 1e-9,
    "maxiters": MAX_ITER,
}


class IllFormed(ValueError):
    """Program violates its structural invariants (dimensions, PSD cost)."""


class UnknownVariable(KeyError):
    """Requested variable block is not registered in ``var_names``."""


class Status(Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    MAX_ITER = "MaxIter"


@dataclass(frozen=True)
class SocConstraint:
    """Second-order cone constraint ``||G z + g||_2 <= c' z + d``."""

    G: np.ndarray
    g: np.ndarray
    c: np.ndarray
    d: float

    def violation(self, z: np.ndarray) -> float:
        return float(np.linalg.norm(self.G @ z + self.g) - (self.c @ z + self.d))


@dataclass
class ConicProgram:
    """min 0.5 z'Hz + f'z + c0  s.t.  A_eq z = b_eq, A_in z <= b_in, SOCs.

    ``var_names`` maps a block label to ``(start, size)`` within z.
    """

    H: np.ndarray
    f: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None
    socs: list[SocConstraint] = field(default_factory=list)
    var_names: dict[str, tuple[int, int]] = field(default_factory=dict)
    c0: float = 0.0

    @property
    def dim(self) -> int:
        return self.f.shape[0]

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.H @ z + self.f @ z + self.c0)

    def validate(self) -> None:
        d = self.dim
        if self.H.shape != (d, d):
            raise IllFormed(f"cost matrix shape {self.H.shape} != ({d}, {d})")
        if not np.allclose(self.H, self.H.T, atol=1e-12):
            raise IllFormed("cost matrix not symmetric")
        if d and np.linalg.eigvalsh(self.H).min() < -1e-10:
            raise IllFormed("cost matrix not positive semidefinite")
        for A, b, tag in ((self.A_eq, self.b_eq, "eq"), (self.A_in, self.b_in, "in")):
            if (A is None) != (b is None):
                raise IllFormed(f"{tag}: matrix and rhs must be given together")
            if A is not None and (A.ndim != 2 or A.shape[1] != d or A.shape[0] != b.shape[0]):
                raise IllFormed(f"{tag}: inconsistent dimensions")
        for soc in self.socs:
            if soc.G.shape[1] != d or soc.c.shape[0] != d or soc.G.shape[0] != soc.g.shape[0]:
                raise IllFormed("soc: inconsistent dimensions")
        used = np.zeros(d, dtype=bool)
        for name, (start, size) in self.var_names.items():
            if start < 0 or size < 0 or start + size > d:
                raise IllFormed(f"variable block {name!r} out of range")
            if used[start : start + size].any():
                raise IllFormed(f"variable block {name!r} overlaps another block")
            used[start : start + size] = True
        if self.var_names and not used.all():
            raise IllFormed("var_names does not cover every decision variable")

    # -- plain-text serialization for regression fixtures --------------------

    def to_text(self) -> str:
        out = io.StringIO()

        def mat(tag, M):
            M = np.atleast_2d(np.asarray(M, dtype=float))
            out.write(f"{tag} {M.shape[0]} {M.shape[1]}\n")
            for row in M:
                out.write(" ".join(repr(float(v)) for v in row) + "\n")

        mat("H", self.H)
        mat("f", self.f[None, :])
        out.write(f"c0 {float(self.c0)!r}\n")
        if self.A_eq is not None:
            mat("A_eq", self.A_eq)
            mat("b_eq", self.b_eq[None, :])
        if self.A_in is not None:
            mat("A_in", self.A_in)
            mat("b_in", self.b_in[None, :])
        for soc in self.socs:
            mat("soc_G", soc.G)
            mat("soc_g", soc.g[None, :])
            mat("soc_c", soc.c[None, :])
            out.write(f"soc_d {float(soc.d)!r}\n")
        for name, (start, size) in self.var_names.items():
            out.write(f"var {name} {start} {size}\n")
        return out.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "ConicProgram":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        pos = 0

        def read_mat():
            nonlocal pos
            tag, r, c = lines[pos].split()[0], int(lines[pos].split()[1]), int(lines[pos].split()[2])
            pos += 1
            rows = []
            for _ in range(int(r)):
                rows.append([float(v) for v in lines[pos].split()])
                pos += 1
            return tag, np.array(rows).reshape(int(r), int(c))

        _, H = read_mat()
        _, f = read_mat()
        c0 = float(lines[pos].split()[1])
        pos += 1
        kw: dict = {"A_eq": None, "b_eq": None, "A_in": None, "b_in": None}
        socs: list[SocConstraint] = []
        var_names: dict[str, tuple[int, int]] = {}
        while pos < len(lines):
            head = lines[pos].split()[0]
            if head in ("A_eq", "A_in"):
                _, A = read_mat()
                _, b = read_mat()
                kw[head] = A
                kw["b" + head[1:]] = b.ravel()
            elif head == "soc_G":
                _, G = read_mat()
                _, g = read_mat()
                _, c = read_mat()
                d = float(lines[pos].split()[1])
                pos += 1
                socs.append(SocConstraint(G, g.ravel(), c.ravel(), d))
            elif head == "var":
                _, name, start, size = lines[pos].split()
                var_names[name] = (int(start), int(size))
                pos += 1
            else:
                raise ValueError(f"unknown tag {head!r}")
        return cls(H=H, f=f.ravel(), socs=socs, var_names=var_names, c0=c0, **kw)


@dataclass
class Solution:
    z: np.ndarray
    objective: float
    status: Status
    iterations: int
    solve_time: float
    kkt_residual: float = np.inf
    infeasibility_certificate: np.ndarray | None = None


def extract(sol: Solution, prog: ConicProgram, name: str) -> np.ndarray:
    """Sub-vector of the solution for the named variable block."""
    if name not in prog.var_names:
        raise UnknownVariable(name)
    start, size = prog.var_names[name]
    return sol.z[start : start + size].copy()


def _stack_cones(prog: ConicProgram):
    """cvxopt (G, h, dims): nonneg-orthant rows first, then SOC blocks."""
    d = prog.dim
    blocks_G, blocks_h = [], []
    n_lin = 0
    if prog.A_in is not None:
        blocks_G.append(prog.A_in)
        blocks_h.append(prog.b_in)
        n_lin = prog.A_in.shape[0]
    q_dims = []
    for soc in prog.socs:
        blocks_G.append(np.vstack([-soc.c[None, :], -soc.G]))
        blocks_h.append(np.concatenate([[soc.d], soc.g]))
        q_dims.append(soc.G.shape[0] + 1)
    if not blocks_G:
        # cvxopt requires at least one cone row; add a vacuous bound
        blocks_G.append(np.zeros((1, d)))
        blocks_h.append(np.ones(1))
        n_lin = 1
    G = np.vstack(blocks_G)
    h = np.concatenate(blocks_h)
    return G, h, {"l": n_lin, "q": q_dims, "s": []}


def _farkas_certificate(prog: ConicProgram) -> np.ndarray | None:
    """Farkas ray (y, mu) with A_in'y + A_eq'mu = 0, y >= 0, and
    b_in'y + b_eq'mu <= -1, certifying primal infeasibility of the
    linear constraint system."""
    d = prog.dim
    n_in = prog.A_in.shape[0] if prog.A_in is not None else 0
    n_eq = prog.A_eq.shape[0] if prog.A_eq is not None else 0
    if n_in + n_eq == 0:
        return None
    blocks = []
    if n_in:
        blocks.append(prog.A_in.T)
    if n_eq:
        blocks.append(prog.A_eq.T)
    A_eq_f = np.hstack(blocks)
    rhs_row = np.concatenate([
        prog.b_in if n_in else np.zeros(0),
        prog.b_eq if n_eq else np.zeros(0),
    ])
    bounds = [(0, None)] * n_in + [(None, None)] * n_eq
    res = _linprog(np.zeros(n_in + n_eq), A_eq=A_eq_f, b_eq=np.zeros(d),
                   A_ub=rhs_row[None, :], b_ub=np.array([-1.0]),
                   bounds=bounds, method="highs")
    return res.x if res.status == 0 else None


def _primal_residual(prog: ConicProgram, z: np.ndarray) -> float:
    r = 0.0
    if prog.A_eq is not None:
        r = max(r, float(np.abs(prog.A_eq @ z - prog.b_eq).max(initial=0.0)))
    if prog.A_in is not None:
        r = max(r, float(np.maximum(prog.A_in @ z - prog.b_in, 0.0).max(initial=0.0)))
    for soc in prog.socs:
        r = max(r, max(soc.violation(z), 0.0))
    return r


def _stationarity(prog: ConicProgram, G: np.ndarray, z: np.ndarray,
                  cone_dual: np.ndarray | None, eq_dual: np.ndarray | None) -> float:
    """|| H z + f + G' z_cone + A_eq' y ||_inf, scaled by the gradient size."""
    if cone_dual is None:
        return np.inf
    r = prog.H @ z + prog.f + G.T @ cone_dual
    if prog.A_eq is not None:
        if eq_dual is None:
            return np.inf
        r = r + prog.A_eq.T @ eq_dual
    scale = 1.0 + float(np.abs(prog.H @ z + prog.f).max(initial=0.0))
    return float(np.abs(r).max(initial=0.0)) / scale


def _polish_qp(prog: ConicProgram, z: np.ndarray, duals: np.ndarray | None) -> np.ndarray | None:
    """Active-set refinement for pure QPs from an interior-point estimate.

    Bounded add-worst-violator / drop-most-negative-dual iteration seeded
    with the interior-point active set.  Returns a certified KKT point
    (primal feasible, dual signs correct, stationarity verified) or None.
    """
    if prog.socs:
        return None
    d = prog.dim
    scale = 1.0 + float(np.abs(prog.H).max(initial=0.0)) + float(np.abs(prog.f).max(initial=0.0))
    act: np.ndarray = np.zeros(0, dtype=int)
    if prog.A_in is not None:
        slack = prog.b_in - prog.A_in @ z
        act = np.where((slack < 1e-7) | ((duals is not None) & (duals > 1e-7 * scale)))[0]
    n_eq = prog.A_eq.shape[0] if prog.A_eq is not None else 0
    for _ in range(200):
        rows = [prog.A_eq] if prog.A_eq is not None else []
        rhs = [prog.b_eq] if prog.b_eq is not None else []
        if prog.A_in is not None and act.size:
            rows.append(prog.A_in[act])
            rhs.append(prog.b_in[act])
        if rows:
            C = np.vstack(rows)
            c = np.concatenate(rhs)
        else:
            C = np.zeros((0, d))
            c = np.zeros(0)
        k = C.shape[0]
        KKT = np.block([[prog.H, C.T], [C, np.zeros((k, k))]])
        rhs_v = np.concatenate([-prog.f, c])
        try:
            xl, *_ = np.linalg.lstsq(KKT, rhs_v, rcond=None)
        except np.linalg.LinAlgError:
            return None
        zp, lam = xl[:d], xl[d:]
        if np.abs(KKT @ xl - rhs_v).max(initial=0.0) > 1e-7 * scale:
            return None
        mu = lam[n_eq:]
        if prog.A_in is not None:
            slack = prog.b_in - prog.A_in @ zp
            worst = int(np.argmin(slack)) if slack.size else -1
            if slack.size and slack[worst] < -1e-9:
                if worst in act:
                    return None
                act = np.unique(np.append(act, worst))
                continue
            if mu.size and mu.min(initial=0.0) < -1e-9 * scale:
                act = act[mu > -1e-9 * scale]
                continue
        return zp
    return None


def _polish_socs(prog: ConicProgram, z0: np.ndarray,
                 duals: np.ndarray | None) -> np.ndarray | None:
    """Refinement for programs with second-order cones.

    Near-active cones are treated as smooth equalities ||Gz+g|| = c'z+d and
    the point is refined by iterating the tangent-linearized KKT system
    (Newton on the active manifold, reusing the pure-QP polish).  The
    result is accepted only if it is primal feasible and does not worsen
    the objective of the interior-point estimate beyond solver accuracy.
    """
    obj0 = prog.objective(z0)
    act = [j for j, soc in enumerate(prog.socs) if soc.violation(z0) > -1e-5]
    for _ in range(len(prog.socs) + 1):
        z = z0.copy()
        converged = False
        prev_worst = np.inf
        for _ in range(8):
            rows, rhs = [], []
            if prog.A_eq is not None:
                rows.append(prog.A_eq)
                rhs.append(prog.b_eq)
            for j in act:
                soc = prog.socs[j]
                u = soc.G @ z + soc.g
                nrm = np.linalg.norm(u)
                if nrm < 1e-10:
                    return None  # nonsmooth cone tip
                a = soc.G.T @ (u / nrm) - soc.c
                resid = nrm - float(soc.c @ z) - soc.d
                rows.append(a[None, :])
                rhs.append(np.array([float(a @ z) - resid]))
            sub = ConicProgram(H=prog.H, f=prog.f,
                               A_eq=np.vstack(rows) if rows else None,
                               b_eq=np.concatenate(rhs) if rows else None,
                               A_in=prog.A_in, b_in=prog.b_in)
            zp = _polish_qp(sub, z, duals)
            if zp is None:
                break
            z = zp
            worst = max((abs(prog.socs[j].violation(z)) for j in act), default=0.0)
            if worst <= 1e-9:
                converged = True
                break
            if worst >= 0.5 * prev_worst:
                break  # not contracting; the active guess is wrong
            prev_worst = worst
        if converged and _primal_residual(prog, z) <= 1e-9:
            scale = 1.0 + abs(obj0)
            if prog.objective(z) <= obj0 + 1e-6 * scale:
                return z
        # wrong active guess: release the least-binding cone and retry
        if act:
            act = act[:-1]
            continue
        return None
    return None


def solve(prog: ConicProgram, warm_start: np.ndarray | None = None) -> Solution:
    """Solve the program; infeasibility is a result, ill-formedness an error."""
    prog.validate()
    t0 = time.perf_counter()
    d = prog.dim
    G, h, dims = _stack_cones(prog)
    pure_lp = not prog.socs and not prog.H.any()
    kw = {}
    if prog.A_eq is not None:
        kw["A"] = _cvx(np.ascontiguousarray(prog.A_eq))
        kw["b"] = _cvx(prog.b_eq)

    # objective equilibration: the minimizer is invariant, the interior
    # point's primal-dual balance is not (penalty weights reach 1e5 here)
    sigma = 1.0 / (1.0 + max(float(np.abs(prog.H).max(initial=0.0)),
                             float(np.abs(prog.f).max(initial=0.0))))
    raw, iters, failed = None, 0, False
    try:
        if pure_lp:
            raw = _solvers.conelp(_cvx(sigma * prog.f), _cvx(G), _cvx(h), dims=dims,
                                  options=_IP_OPTIONS, **kw)
        else:
            if warm_start is not None and warm_start.shape == (d,):
                kw["initvals"] = {"x": _cvx(warm_start)}
            raw = _solvers.coneqp(_cvx(sigma * prog.H), _cvx(sigma * prog.f),
                                  _cvx(G), _cvx(h), dims=dims,
                                  options=_IP_OPTIONS, **kw)
        iters = int(raw.get("iterations", 0))
        failed = raw["status"] != "optimal"
    except (ValueError, ZeroDivisionError, ArithmeticError):
        failed = True

    if failed:
        # Decide between genuine infeasibility and numerical trouble.  The
        # linear rows alone decide most cases and HiGHS handles them far more
        # robustly than a cone phase-1; SOC rows fall back to conelp.
        lin = _linprog(np.zeros(d), A_ub=prog.A_in, b_ub=prog.b_in,
                       A_eq=prog.A_eq, b_eq=prog.b_eq, bounds=(None, None),
                       method="highs")
        if lin.status == 2:
            return Solution(np.full(d, np.nan), np.inf, Status.INFEASIBLE, iters,
                            time.perf_counter() - t0,
                            infeasibility_certificate=_farkas_certificate(prog))
        if prog.socs:
            probe = _solvers.conelp(_cvx(np.zeros(d)), _cvx(G), _cvx(h), dims=dims,
                                    options=_IP_OPTIONS,
                                    **{k: v for k, v in kw.items() if k in ("A", "b")})
            if probe["status"] == "primal infeasible":
                cert = np.array(probe["z"]).ravel() if probe["z"] is not None else None
                return Solution(np.full(d, np.nan), np.inf, Status.INFEASIBLE, iters,
                                time.perf_counter() - t0,
                                infeasibility_certificate=cert)
            if probe["status"] == "optimal" and (raw is None or raw["x"] is None):
                raw = probe
        elif raw is None or raw["x"] is None:
            if lin.status == 0 and lin.x is not None:
                raw = {"x": _cvx(lin.x), "z": None}
            elif lin.status == 3:
                return Solution(np.full(d, np.nan), -np.inf, Status.UNBOUNDED, iters,
                                time.perf_counter() - t0)
        if raw is None or raw["x"] is None:
            return Solution(np.full(d, np.nan), np.nan, Status.MAX_ITER, iters,
                            time.perf_counter() - t0)

    z = np.array(raw["x"]).ravel()
    cone_dual = None
    eq_dual = None
    if isinstance(raw, dict) or hasattr(raw, "get"):
        zc = raw.get("z") if hasattr(raw, "get") else None
        if zc is not None:
            # duals of the sigma-scaled problem certify the original after
            # rescaling by 1/sigma
            cone_dual = np.array(zc).ravel() / sigma
            if cone_dual.size != G.shape[0]:
                cone_dual = None
        yc = raw.get("y") if hasattr(raw, "get") else None
        if yc is not None and prog.A_eq is not None:
            eq_dual = np.array(yc).ravel() / sigma
    lin_dual = None
    if cone_dual is not None and prog.A_in is not None and dims["l"] >= prog.A_in.shape[0]:
        lin_dual = cone_dual[: prog.A_in.shape[0]]

    # a verified polish point is a certified KKT point of a convex program,
    # hence the optimum; never prefer the (possibly slightly infeasible)
    # interior-point iterate over it
    if prog.socs:
        polished = _polish_socs(prog, z, lin_dual)
    else:
        polished = _polish_qp(prog, z, lin_dual)
    if polished is not None:
        z = polished
    res = _primal_residual(prog, z)
    if polished is not None:
        optimal = res <= ABS_TOL
    else:
        stat = _stationarity(prog, G, z, cone_dual, eq_dual)
        optimal = res <= ABS_TOL and stat <= 1e-6
    status = Status.OPTIMAL if optimal else Status.MAX_ITER
    return Solution(z, prog.objective(z), status, iters,
                    time.perf_counter() - t0, kkt_residual=res)
