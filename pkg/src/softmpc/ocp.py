"""MPC formulation builders and the closed-loop controller step.

Linear-model variants are assembled as sparse (non-condensed) conic
programs with explicit state variables, so that the implicit two-trajectory
penalty and all slack mechanisms share one layout.  Nonlinear models use
the same layout transcribed as an NLP and solved by Gauss-Newton SQP.

Variants
--------
Nominal              hard initial state, hard constraints
SlackInit            free initial state, penalty lam * V_delta(x, xbar)
ImplicitSlack        two-trajectory penalty (condensed for linear models)
ImplicitSlackSoftInput  second input sequence, input deviations penalized
Tube / TubeSlack     robust tube with hard / slack-relaxed initial set
SoftP / SoftT / SoftG   per-step state-constraint slacks with hard, softened,
                     or global terminal ingredients
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import conic, nlp
from .conic import ConicProgram, SocConstraint, Status
from .control_design import QuadIncLyap, TerminalIngredients
from .models import LinearSystem, NonlinearModel
from .polytope import PolyIncLyap, Polytope

__all__ = [
    "Controller",
    "DegenerateTightening",
    "Formulation",
    "GlobalQuadratic",
    "ImplicitSlack",
    "ImplicitSlackSoftInput",
    "MissingLyap",
    "MissingTerminalLaw",
    "Nominal",
    "OcpSpec",
    "SlackInit",
    "SoftG",
    "SoftP",
    "SoftT",
    "StepResult",
    "TerminalEquality",
    "Tube",
    "TubeSlack",
    "build",
    "implicit_penalty_matrix",
    "make_tube_spec",
    "mpc_step",
]


class MissingLyap(ValueError):
    pass


class MissingTerminalLaw(ValueError):
    pass


class DegenerateTightening(ValueError):
    pass


# ---------------------------------------------------------------------------
# formulation and terminal variants
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Nominal:
    pass


@dataclass(frozen=True)
class SlackInit:
    lam: float

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lam must be positive")


@dataclass(frozen=True)
class ImplicitSlack:
    lam: float
    M: int

    def __post_init__(self):
        if self.lam <= 0 or self.M < 1:
            raise ValueError("lam must be positive and M >= 1")


@dataclass(frozen=True)
class ImplicitSlackSoftInput:
    lam: float
    M: int

    def __post_init__(self):
        if self.lam <= 0 or self.M < 1:
            raise ValueError("lam must be positive and M >= 1")


@dataclass(frozen=True)
class Tube:
    delta: float

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")


@dataclass(frozen=True)
class TubeSlack:
    delta: float
    lam: float

    def __post_init__(self):
        if self.delta < 0 or self.lam <= 0:
            raise ValueError("delta must be nonnegative and lam positive")


@dataclass(frozen=True)
class SoftP:
    Q_xi: float | np.ndarray


@dataclass(frozen=True)
class SoftT:
    Q_xi: float | np.ndarray
    M_tail: int = 50

    def __post_init__(self):
        if self.M_tail < 1:
            raise ValueError("M_tail must be >= 1")


@dataclass(frozen=True)
class SoftG:
    Q_xi: float | np.ndarray


Formulation = (Nominal | SlackInit | ImplicitSlack | ImplicitSlackSoftInput
               | Tube | TubeSlack | SoftP | SoftT | SoftG)

_SOFT = (SoftP, SoftT, SoftG)
_NEEDS_LYAP = (SlackInit, Tube, TubeSlack)


@dataclass(frozen=True)
class GlobalQuadratic:
    """Globally valid quadratic terminal penalty, no terminal set."""

    P_g: np.ndarray


@dataclass(frozen=True)
class TerminalEquality:
    """Artificial-setpoint tracking terminal: x_N = x_s, f(x_s, u_s) = x_s,
    with offset cost weight_offset * ||C x_s - y_target||^2."""

    C: np.ndarray
    y_target: np.ndarray
    weight_offset: float


# ---------------------------------------------------------------------------
# problem description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OcpSpec:
    """Everything defining one MPC variant on one system."""

    model: LinearSystem | NonlinearModel
    N: int
    Q: np.ndarray
    R: np.ndarray
    X: Polytope
    U: Polytope
    terminal: TerminalIngredients | TerminalEquality | GlobalQuadratic
    formulation: Formulation
    lyap: QuadIncLyap | PolyIncLyap | None = None
    sublevel_cap: float | None = None

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("horizon must be >= 1")
        object.__setattr__(self, "Q", np.atleast_2d(np.asarray(self.Q, dtype=float)))
        object.__setattr__(self, "R", np.atleast_2d(np.asarray(self.R, dtype=float)))
        if isinstance(self.formulation, _NEEDS_LYAP) and self.lyap is None:
            raise MissingLyap(f"{type(self.formulation).__name__} requires lyap")
        if isinstance(self.formulation, (Tube, TubeSlack)) and not isinstance(self.lyap, QuadIncLyap):
            raise MissingLyap("tube formulations require a quadratic penalty")
        if self.sublevel_cap is not None and self.sublevel_cap <= 0:
            raise ValueError("sublevel_cap must be positive when set")
        if not isinstance(self.terminal, TerminalEquality):
            # regulation setting assumes the origin is strictly feasible
            if not (self.X.contains(np.zeros(self.n)) and self.U.contains(np.zeros(self.m))):
                raise ValueError("origin must lie in the constraint sets")

    @property
    def n(self) -> int:
        return self.model.n

    @property
    def m(self) -> int:
        return self.model.m

    @property
    def is_linear(self) -> bool:
        return isinstance(self.model, LinearSystem)

    def stage_cost(self, x: np.ndarray, u: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return float(x @ self.Q @ x + u @ self.R @ u)


@dataclass
class StepResult:
    u: np.ndarray
    x_bar: np.ndarray
    slack: float
    value: float
    status: Status
    solve_time: float


def _q_xi_matrix(Q_xi, p: int) -> np.ndarray:
    Q_xi = np.asarray(Q_xi, dtype=float)
    if Q_xi.ndim == 0:
        return float(Q_xi) * np.eye(p)
    if Q_xi.shape != (p, p):
        raise ValueError(f"Q_xi must be scalar or {p}x{p}")
    return Q_xi


def implicit_penalty_matrix(A: np.ndarray, M: int) -> np.ndarray:
    """P_M = sum_{k=0}^{M-1} (A^k)'(A^k), the condensed two-trajectory penalty."""
    A = np.asarray(A, dtype=float)
    P = np.zeros_like(A)
    Ak = np.eye(A.shape[0])
    for _ in range(M):
        P = P + Ak.T @ Ak
        Ak = A @ Ak
    return P


# ---------------------------------------------------------------------------
# linear conic assembly
# ---------------------------------------------------------------------------


class _Assembler:
    """Incremental builder for block-structured conic programs."""

    def __init__(self, dim: int):
        self.dim = dim
        self.H = np.zeros((dim, dim))
        self.f = np.zeros(dim)
        self.c0 = 0.0
        self.eq_rows: list[np.ndarray] = []
        self.eq_rhs: list[np.ndarray] = []
        self.in_rows: list[np.ndarray] = []
        self.in_rhs: list[np.ndarray] = []
        self.socs: list[SocConstraint] = []
        self.names: dict[str, tuple[int, int]] = {}

    def grow(self, name: str, size: int) -> int:
        start = self.dim
        self.dim += size
        self.H = np.pad(self.H, ((0, size), (0, size)))
        self.f = np.pad(self.f, (0, size))
        self.eq_rows = [np.pad(E, ((0, 0), (0, size))) for E in self.eq_rows]
        self.in_rows = [np.pad(E, ((0, 0), (0, size))) for E in self.in_rows]
        self.socs = [SocConstraint(np.pad(s.G, ((0, 0), (0, size))), s.g,
                                   np.pad(s.c, (0, size)), s.d) for s in self.socs]
        self.names[name] = (start, size)
        return start

    def add_quad(self, idx: np.ndarray, W: np.ndarray):
        self.H[np.ix_(idx, idx)] += 2.0 * W

    def add_cross(self, idx_a: np.ndarray, idx_b: np.ndarray, W: np.ndarray):
        """Adds the form (z_a - z_b)' W (z_a - z_b)."""
        self.H[np.ix_(idx_a, idx_a)] += 2.0 * W
        self.H[np.ix_(idx_b, idx_b)] += 2.0 * W
        self.H[np.ix_(idx_a, idx_b)] -= 2.0 * W
        self.H[np.ix_(idx_b, idx_a)] -= 2.0 * W

    def add_eq(self, rows: np.ndarray, rhs: np.ndarray):
        self.eq_rows.append(np.atleast_2d(rows))
        self.eq_rhs.append(np.atleast_1d(rhs))

    def add_in(self, rows: np.ndarray, rhs: np.ndarray):
        self.in_rows.append(np.atleast_2d(rows))
        self.in_rhs.append(np.atleast_1d(rhs))

    def rows_on(self, idx: np.ndarray, H: np.ndarray) -> np.ndarray:
        E = np.zeros((H.shape[0], self.dim))
        E[:, idx] = H
        return E

    def finish(self) -> ConicProgram:
        prog = ConicProgram(
            H=self.H, f=self.f, c0=self.c0,
            A_eq=np.vstack(self.eq_rows) if self.eq_rows else None,
            b_eq=np.concatenate(self.eq_rhs) if self.eq_rhs else None,
            A_in=np.vstack(self.in_rows) if self.in_rows else None,
            b_in=np.concatenate(self.in_rhs) if self.in_rhs else None,
            socs=self.socs, var_names=self.names)
        prog.validate()
        return prog


def _linear_base(spec: OcpSpec, x: np.ndarray, hard_init: bool,
                 soft_state: np.ndarray | None = None) -> _Assembler:
    """Common trajectory structure for all linear variants.

    soft_state, when given, is the Q_xi matrix: per-step slack variables
    relax the state path constraints.
    """
    model: LinearSystem = spec.model
    n, m, N = spec.n, spec.m, spec.N
    dim = (N + 1) * n + N * m
    asm = _Assembler(dim)
    xi = lambda k: np.arange(k * n, (k + 1) * n)
    ui = lambda k: np.arange((N + 1) * n + k * m, (N + 1) * n + (k + 1) * m)
    asm.names["xbar"] = (0, n)
    asm.names["xtraj"] = (n, N * n)
    asm.names["u0"] = ((N + 1) * n, m)
    if N > 1:
        asm.names["u_rest"] = ((N + 1) * n + m, (N - 1) * m)

    if hard_init:
        rows = np.zeros((n, dim))
        rows[:, xi(0)] = np.eye(n)
        asm.add_eq(rows, x)
    for k in range(N):
        rows = np.zeros((n, dim))
        rows[:, xi(k + 1)] = np.eye(n)
        rows[:, xi(k)] = -model.A
        rows[:, ui(k)] = -model.B
        asm.add_eq(rows, np.zeros(n))
        asm.add_quad(xi(k), spec.Q)
        asm.add_quad(ui(k), spec.R)
        asm.add_in(asm.rows_on(ui(k), spec.U.H), spec.U.h)

    # with a hard initial state the k=0 constraint carries no decision
    # freedom: feasibility is checked by the caller, the slack penalty is a
    # constant; imposing it would leave the interior-point method no slack
    for k in range(N):
        if k == 0 and hard_init:
            if soft_state is not None:
                xi0 = np.maximum(spec.X.H @ x - spec.X.h, 0.0)
                asm.c0 += float(xi0 @ soft_state @ xi0)
            continue
        if soft_state is None:
            asm.add_in(asm.rows_on(xi(k), spec.X.H), spec.X.h)
        else:
            p = spec.X.n_rows
            s0 = asm.grow(f"xi{k}", p)
            si = np.arange(s0, s0 + p)
            rows = asm.rows_on(xi(k), spec.X.H)
            rows[:, si] = -np.eye(p)
            asm.add_in(rows, spec.X.h)
            asm.add_in(asm.rows_on(si, -np.eye(p)), np.zeros(p))
            asm.add_quad(si, soft_state)

    term = spec.terminal
    if isinstance(term, TerminalIngredients):
        asm.add_quad(xi(N), term.P_f)
        asm.add_in(asm.rows_on(xi(N), term.X_f.H), term.X_f.h)
    elif isinstance(term, GlobalQuadratic):
        asm.add_quad(xi(N), term.P_g)
    else:
        raise NotImplementedError("tracking terminals are supported on nonlinear models")

    if spec.sublevel_cap is not None:
        # J_N(xbar, u) <= Vbar encoded as || sqrt(H_J/2) z || <= sqrt(Vbar)
        H_J = asm.H.copy()
        w, V = np.linalg.eigh(0.5 * (H_J + H_J.T))
        w = np.clip(w, 0.0, None)
        G = (V * np.sqrt(0.5 * w)) @ V.T
        asm.socs.append(SocConstraint(G, np.zeros(dim), np.zeros(dim),
                                      float(np.sqrt(spec.sublevel_cap))))
    return asm


def _attach_quad_penalty(asm: _Assembler, spec: OcpSpec, x: np.ndarray,
                         lam: float, P: np.ndarray):
    n = spec.n
    idx = np.arange(n)
    asm.H[np.ix_(idx, idx)] += 2.0 * lam * P
    asm.f[idx] += -2.0 * lam * (P @ x)
    asm.c0 += lam * float(x @ P @ x)


def _attach_poly_penalty(asm: _Assembler, spec: OcpSpec, x: np.ndarray, lam: float,
                         F: np.ndarray):
    n = spec.n
    t0 = asm.grow("t", 1)
    rows = np.zeros((F.shape[0], asm.dim))
    rows[:, np.arange(n)] = -F
    rows[:, t0] = -1.0
    asm.add_in(rows, -(F @ x))
    neg = np.zeros((1, asm.dim))
    neg[0, t0] = -1.0
    asm.add_in(neg, np.zeros(1))
    asm.f[t0] += lam


def build_nominal(spec: OcpSpec, x: np.ndarray) -> ConicProgram | nlp.NlpProblem:
    if not spec.is_linear:
        return _nonlinear_transcription(spec, x)
    return _linear_base(spec, x, hard_init=True).finish()


def build_slack_init(spec: OcpSpec, x: np.ndarray) -> ConicProgram | nlp.NlpProblem:
    if spec.lyap is None:
        raise MissingLyap("SlackInit requires an incremental Lyapunov function")
    if not spec.is_linear:
        return _nonlinear_transcription(spec, x)
    asm = _linear_base(spec, x, hard_init=False)
    lam = spec.formulation.lam
    if isinstance(spec.lyap, QuadIncLyap):
        _attach_quad_penalty(asm, spec, x, lam, spec.lyap.P)
    else:
        _attach_poly_penalty(asm, spec, x, lam, spec.lyap.F)
    return asm.finish()


def build_implicit(spec: OcpSpec, x: np.ndarray) -> ConicProgram | nlp.NlpProblem:
    form: ImplicitSlack = spec.formulation
    if not spec.is_linear:
        return _nonlinear_transcription(spec, x)
    # linear case condenses: difference dynamics are autonomous, so the
    # two-trajectory sum is a quadratic in (x - xbar) for any input sequence
    asm = _linear_base(spec, x, hard_init=False)
    P_M = implicit_penalty_matrix(spec.model.A, form.M)
    _attach_quad_penalty(asm, spec, x, form.lam, P_M)
    return asm.finish()


def build_implicit_soft_input(spec: OcpSpec, x: np.ndarray) -> nlp.NlpProblem:
    return _nonlinear_transcription(spec, x)


def _tube_soc(asm: _Assembler, spec: OcpSpec, x: np.ndarray, delta: float,
              slack_index: int | None):
    L = spec.lyap.sqrt_P
    n = spec.n
    G = np.zeros((n, asm.dim))
    G[:, np.arange(n)] = -L
    c = np.zeros(asm.dim)
    if slack_index is not None:
        c[slack_index] = 1.0
    asm.socs.append(SocConstraint(G, L @ x, c, delta))


def build_tube(spec: OcpSpec, x: np.ndarray) -> ConicProgram | nlp.NlpProblem:
    if spec.X.is_degenerate:
        raise DegenerateTightening("tightened state set is empty or degenerate")
    if not spec.is_linear:
        return _nonlinear_transcription(spec, x)
    asm = _linear_base(spec, x, hard_init=False)
    _tube_soc(asm, spec, x, spec.formulation.delta, None)
    return asm.finish()


def build_tube_slack(spec: OcpSpec, x: np.ndarray) -> ConicProgram | nlp.NlpProblem:
    if spec.X.is_degenerate:
        raise DegenerateTightening("tightened state set is empty or degenerate")
    if not spec.is_linear:
        return _nonlinear_transcription(spec, x)
    form: TubeSlack = spec.formulation
    asm = _linear_base(spec, x, hard_init=False)
    s0 = asm.grow("s", 1)
    asm.H[s0, s0] += 2.0 * form.lam
    neg = np.zeros((1, asm.dim))
    neg[0, s0] = -1.0
    asm.add_in(neg, np.zeros(1))
    _tube_soc(asm, spec, x, form.delta, s0)
    return asm.finish()


def build_soft_baselines(spec: OcpSpec, x: np.ndarray) -> ConicProgram | nlp.NlpProblem:
    form = spec.formulation
    if not spec.is_linear:
        return _nonlinear_transcription(spec, x)
    Q_xi = _q_xi_matrix(form.Q_xi, spec.X.n_rows)
    asm = _linear_base(spec, x, hard_init=True, soft_state=Q_xi)
    if isinstance(form, SoftT):
        term: TerminalIngredients = spec.terminal
        A_cl = spec.model.A + spec.model.B @ term.K
        n, N = spec.n, spec.N
        xN = np.arange(N * n, (N + 1) * n)
        p = spec.X.n_rows
        s0 = asm.grow("xi_peak", p)
        si = np.arange(s0, s0 + p)
        Ak = np.eye(n)
        for _ in range(form.M_tail):
            rows = asm.rows_on(xN, spec.X.H @ Ak)
            rows[:, si] -= np.eye(p)
            asm.add_in(rows, spec.X.h)
            Ak = A_cl @ Ak
        asm.add_in(asm.rows_on(si, -np.eye(p)), np.zeros(p))
        asm.add_quad(si, Q_xi)
    return asm.finish()


_BUILDERS = {
    Nominal: build_nominal,
    SlackInit: build_slack_init,
    ImplicitSlack: build_implicit,
    ImplicitSlackSoftInput: build_implicit_soft_input,
    Tube: build_tube,
    TubeSlack: build_tube_slack,
    SoftP: build_soft_baselines,
    SoftT: build_soft_baselines,
    SoftG: build_soft_baselines,
}


def build(spec: OcpSpec, x: np.ndarray) -> ConicProgram | nlp.NlpProblem:
    x = np.asarray(x, dtype=float).ravel()
    if x.shape[0] != spec.n:
        raise ValueError("state dimension mismatch")
    return _BUILDERS[type(spec.formulation)](spec, x)


# ---------------------------------------------------------------------------
# nonlinear transcription
# ---------------------------------------------------------------------------


class _Layout:
    """Index bookkeeping for the NLP decision vector."""

    def __init__(self, spec: OcpSpec):
        n, m, N = spec.n, spec.m, spec.N
        self.n, self.m, self.N = n, m, N
        self.x = lambda k: np.arange(k * n, (k + 1) * n)
        self.u = lambda k: np.arange((N + 1) * n + k * m, (N + 1) * n + (k + 1) * m)
        self.dim = (N + 1) * n + N * m
        self.extra: dict[str, tuple[int, int]] = {}

    def grow(self, name: str, size: int) -> np.ndarray:
        start = self.dim
        self.dim += size
        self.extra[name] = (start, size)
        return np.arange(start, start + size)

    def names(self) -> dict[str, tuple[int, int]]:
        n, m, N = self.n, self.m, self.N
        out = {"xbar": (0, n), "xtraj": (n, N * n), "u0": ((N + 1) * n, m)}
        if N > 1:
            out["u_rest"] = ((N + 1) * n + m, (N - 1) * m)
        out.update(self.extra)
        return out


def _dynamics_block(model: NonlinearModel, dim: int, idx_next, idx_x, idx_u):
    def fun(z):
        return z[idx_next] - model.step(z[idx_x], z[idx_u])

    def jac(z):
        _, Ad, Bd = model.step_with_jacobians(z[idx_x], z[idx_u])
        J = np.zeros((model.n, dim))
        # accumulate: the steady-state block reuses idx_next == idx_x
        J[:, idx_next] += np.eye(model.n)
        J[:, idx_x] -= Ad
        J[:, idx_u] -= Bd
        return J

    return nlp.ConstraintBlock(fun, jac)


def _nonlinear_transcription(spec: OcpSpec, x: np.ndarray) -> nlp.NlpProblem:
    """Tracking-form NLP shared by all four-tank variants."""
    if not isinstance(spec.terminal, TerminalEquality):
        raise NotImplementedError("nonlinear models use the tracking terminal")
    model: NonlinearModel = spec.model
    form = spec.formulation
    term: TerminalEquality = spec.terminal
    n, m, N = spec.n, spec.m, spec.N
    lay = _Layout(spec)
    xs = lay.grow("xs", n)
    us = lay.grow("us", m)
    soft = isinstance(form, _SOFT)
    if isinstance(form, (SoftT, SoftG)):
        raise NotImplementedError("only the hard-terminal soft baseline is "
                                  "transcribed for nonlinear models")
    Q_xi = _q_xi_matrix(form.Q_xi, spec.X.n_rows) if soft else None
    # k = 0 is the measured state (hard init), so its slack is a constant
    xi_idx = ({k: lay.grow(f"xi{k}", spec.X.n_rows) for k in range(1, N)}
              if soft else {})
    two_traj = isinstance(form, (ImplicitSlack, ImplicitSlackSoftInput))
    if two_traj:
        M = form.M
        if M > N + 1:
            raise MissingTerminalLaw("two-trajectory horizon exceeds N+1; no "
                                     "terminal law is available beyond the horizon")
        y_idx = [lay.grow(f"y{k}", n) for k in range(1, M)]
    if isinstance(form, ImplicitSlackSoftInput):
        v_idx = [lay.grow(f"v{k}", m) for k in range(form.M)]
    if isinstance(form, TubeSlack):
        s_idx = lay.grow("s", 1)

    dim = lay.dim
    H = np.zeros((dim, dim))
    f = np.zeros(dim)
    c0 = 0.0

    def quad(idx, W):
        H[np.ix_(idx, idx)] += 2.0 * W

    def cross(ia, ib, W):
        H[np.ix_(ia, ia)] += 2.0 * W
        H[np.ix_(ib, ib)] += 2.0 * W
        H[np.ix_(ia, ib)] -= 2.0 * W
        H[np.ix_(ib, ia)] -= 2.0 * W

    for k in range(N):
        cross(lay.x(k), xs, spec.Q)
        cross(lay.u(k), us, spec.R)
    C = np.atleast_2d(term.C)
    H[np.ix_(xs, xs)] += 2.0 * term.weight_offset * (C.T @ C)
    f[xs] += -2.0 * term.weight_offset * (C.T @ term.y_target)
    c0 += term.weight_offset * float(term.y_target @ term.y_target)
    if soft:
        for idx in xi_idx.values():
            quad(idx, Q_xi)

    eqs: list[nlp.ConstraintBlock] = []
    ins: list[nlp.ConstraintBlock] = []
    socs: list[SocConstraint] = []

    def linear_eq(rows, rhs):
        eqs.append(nlp.ConstraintBlock(lambda z, E=rows, r=rhs: E @ z - r,
                                       lambda z, E=rows: E))

    def linear_in(rows, rhs):
        ins.append(nlp.ConstraintBlock(lambda z, E=rows, r=rhs: E @ z - r,
                                       lambda z, E=rows: E))

    def rows_on(idx, Hc):
        E = np.zeros((Hc.shape[0], dim))
        E[:, idx] = Hc
        return E

    hard_init = isinstance(form, (Nominal,) + _SOFT)
    if hard_init:
        linear_eq(rows_on(lay.x(0), np.eye(n)), x)
    for k in range(N):
        eqs.append(_dynamics_block(model, dim, lay.x(k + 1), lay.x(k), lay.u(k)))
        linear_in(rows_on(lay.u(k), spec.U.H), spec.U.h)
        if k == 0 and hard_init:
            # measured state: constraint is decision-free (see linear builder)
            if soft:
                xi0 = np.maximum(spec.X.H @ x - spec.X.h, 0.0)
                c0 += float(xi0 @ Q_xi @ xi0)
            continue
        if soft:
            E = rows_on(lay.x(k), spec.X.H)
            E[:, xi_idx[k]] -= np.eye(spec.X.n_rows)
            linear_in(E, spec.X.h)
            linear_in(rows_on(xi_idx[k], -np.eye(spec.X.n_rows)),
                      np.zeros(spec.X.n_rows))
        else:
            linear_in(rows_on(lay.x(k), spec.X.H), spec.X.h)
    # artificial steady state: dynamics fixed point, constraint admissible
    eqs.append(_dynamics_block(model, dim, xs, xs, us))
    linear_in(rows_on(xs, spec.X.H), spec.X.h)
    linear_in(rows_on(us, spec.U.H), spec.U.h)
    # terminal equality x_N = x_s
    E = rows_on(lay.x(N), np.eye(n))
    E[:, xs] -= np.eye(n)
    linear_eq(E, np.zeros(n))

    if isinstance(form, (SlackInit,)):
        lam = form.lam
        if isinstance(spec.lyap, QuadIncLyap):
            idx = lay.x(0)
            H[np.ix_(idx, idx)] += 2.0 * lam * spec.lyap.P
            f[idx] += -2.0 * lam * (spec.lyap.P @ x)
            c0 += lam * float(x @ spec.lyap.P @ x)
        else:
            raise MissingLyap("nonlinear SlackInit requires a quadratic penalty")
    elif isinstance(form, (Tube, TubeSlack)):
        L = spec.lyap.sqrt_P
        G = np.zeros((n, dim))
        G[:, lay.x(0)] = -L
        c = np.zeros(dim)
        d = form.delta
        if isinstance(form, TubeSlack):
            c[s_idx] = 1.0
            H[s_idx[0], s_idx[0]] += 2.0 * form.lam
            linear_in(rows_on(s_idx, -np.eye(1)), np.zeros(1))
        socs.append(SocConstraint(G, L @ x, c, d))
    elif two_traj:
        lam = form.lam
        M = form.M

        def y_of(k):
            return None if k == 0 else y_idx[k - 1]

        def u2_of(k):
            return v_idx[k] if isinstance(form, ImplicitSlackSoftInput) else lay.u(k)

        for k in range(M - 1):
            prev = y_of(k)
            nxt = y_idx[k]
            ui = u2_of(k)
            if prev is None:
                def fun(z, nxt=nxt, ui=ui):
                    return z[nxt] - model.step(x, z[ui])

                def jacf(z, nxt=nxt, ui=ui):
                    _, _, Bd = model.step_with_jacobians(x, z[ui])
                    J = np.zeros((n, dim))
                    J[:, nxt] = np.eye(n)
                    J[:, ui] = -Bd
                    return J

                eqs.append(nlp.ConstraintBlock(fun, jacf))
            else:
                eqs.append(_dynamics_block(model, dim, nxt, prev, ui))
        # penalty sum_{k<M} ||y_k - x_k||^2 (+ input deviations)
        c0 += lam * float(x @ x)
        H[np.ix_(lay.x(0), lay.x(0))] += 2.0 * lam * np.eye(n)
        f[lay.x(0)] += -2.0 * lam * x
        for k in range(1, M):
            cross(y_idx[k - 1], lay.x(k), lam * np.eye(n))
        if isinstance(form, ImplicitSlackSoftInput):
            for k in range(M):
                cross(v_idx[k], lay.u(k), lam * np.eye(m))

    obj = nlp.QuadraticObjective(H, f, c0)
    return nlp.NlpProblem(objective=obj, dim=dim, eq_constraints=eqs,
                          in_constraints=ins, socs=socs, var_names=lay.names())


# ---------------------------------------------------------------------------
# controller step
# ---------------------------------------------------------------------------


def make_tube_spec(spec: OcpSpec, lyap: QuadIncLyap, delta: float,
                   lam: float | None = None,
                   terminal: TerminalIngredients | TerminalEquality | None = None) -> OcpSpec:
    """Derive the robust variant of a nominal spec: tighten the state set by
    the outer ball of the tube cross-section and install the formulation.

    ``terminal`` must be the terminal ingredients redesigned for the
    tightened sets (or the tracking terminal, which needs no redesign).
    """
    c1 = lyap.c_delta[0]
    Xbar = spec.X.normalize().tighten_by_ball(delta / np.sqrt(c1))
    if Xbar.is_degenerate:
        raise DegenerateTightening("tube tightening empties the state set")
    form = Tube(delta) if lam is None else TubeSlack(delta, lam)
    return OcpSpec(model=spec.model, N=spec.N, Q=spec.Q, R=spec.R, X=Xbar,
                   U=spec.U, terminal=terminal or spec.terminal,
                   formulation=form, lyap=lyap, sublevel_cap=spec.sublevel_cap)


def _nlp_cold_start(spec: OcpSpec, x: np.ndarray, prob: nlp.NlpProblem) -> np.ndarray:
    """Dynamically consistent start: hold the mid-range input and simulate,
    so only the terminal-equality and steady-state residuals are nonzero."""
    n, m, N = spec.n, spec.m, spec.N
    z = np.zeros(prob.dim)
    u_mid = np.zeros(m)
    for j in range(m):
        e = np.zeros(m)
        e[j] = 1.0
        u_mid[j] = 0.5 * (spec.U.support(e) - spec.U.support(-e))
    xk = np.asarray(x, dtype=float).copy()
    path = [xk]
    for _ in range(N):
        xk = spec.model.step(xk, u_mid)
        path.append(xk)
    for k in range(N + 1):
        z[k * n : (k + 1) * n] = path[k]
    for k in range(N):
        z[(N + 1) * n + k * m : (N + 1) * n + (k + 1) * m] = u_mid
    names = prob.var_names
    if "xs" in names:
        s, sz = names["xs"]
        z[s : s + sz] = path[-1]
    if "us" in names:
        s, sz = names["us"]
        z[s : s + sz] = u_mid
    yk = np.asarray(x, dtype=float).copy()
    for k in range(1, N + 2):
        if f"y{k}" in names:
            yk = spec.model.step(yk, u_mid)
            s, sz = names[f"y{k}"]
            z[s : s + sz] = yk
    for name, (s, sz) in names.items():
        if name.startswith("v"):
            z[s : s + sz] = u_mid
        if name.startswith("xi"):
            k = int(name[2:])
            z[s : s + sz] = np.maximum(spec.X.H @ path[k] - spec.X.h, 0.0)
    return z


def _nlp_warm_shift(spec: OcpSpec, x: np.ndarray, prob: nlp.NlpProblem,
                    prev: np.ndarray) -> np.ndarray:
    n, m, N = spec.n, spec.m, spec.N
    z = prev.copy()
    z[: N * n] = prev[n : (N + 1) * n]
    z[(N + 1) * n : (N + 1) * n + (N - 1) * m] = \
        prev[(N + 1) * n + m : (N + 1) * n + N * m]
    return z


def _step_full(spec: OcpSpec, x: np.ndarray,
               warm: np.ndarray | None) -> tuple[StepResult, np.ndarray | None]:
    x = np.asarray(x, dtype=float).ravel()
    if isinstance(spec.formulation, Nominal) and not spec.X.contains(x):
        # hard initial state outside the state constraints: infeasible by
        # inspection (the k = 0 constraint is decision-free)
        return StepResult(np.full(spec.m, np.nan), np.full(spec.n, np.nan),
                          np.nan, np.nan, Status.INFEASIBLE, 0.0), None
    prob = build(spec, x)
    if isinstance(prob, ConicProgram):
        sol = conic.solve(prob, warm_start=warm if warm is not None
                          and warm.shape == (prob.dim,) else None)
        if sol.status != Status.OPTIMAL:
            return StepResult(np.full(spec.m, np.nan), np.full(spec.n, np.nan),
                              np.nan, np.nan, sol.status, sol.solve_time), None
        u0 = conic.extract(sol, prob, "u0")
        x_bar = conic.extract(sol, prob, "xbar")
        slack = _slack_of(spec, prob, sol.z, x, x_bar)
        return StepResult(u0, x_bar, slack, sol.objective, sol.status,
                          sol.solve_time), sol.z
    t0 = time.perf_counter()
    attempts = []
    if warm is not None and warm.shape == (prob.dim,):
        attempts.append(_nlp_warm_shift(spec, x, prob, warm))
    attempts.append(_nlp_cold_start(spec, x, prob))
    rep = None
    for z0 in attempts:
        rep = nlp.sqp_solve(prob, z0)
        if rep.feasible and (rep.converged or rep.kkt_residual <= 1e-5):
            break
    elapsed = time.perf_counter() - t0
    if not rep.feasible:
        return StepResult(np.full(spec.m, np.nan), np.full(spec.n, np.nan),
                          np.nan, np.nan, Status.INFEASIBLE, elapsed), None
    if not (rep.converged or rep.kkt_residual <= 1e-5):
        return StepResult(np.full(spec.m, np.nan), np.full(spec.n, np.nan),
                          np.nan, np.nan, Status.MAX_ITER, elapsed), None
    names = prob.var_names
    start, size = names["u0"]
    if isinstance(spec.formulation, ImplicitSlackSoftInput):
        start, size = names["v0"]
    u0 = rep.z[start : start + size]
    x_bar = rep.z[: spec.n].copy()
    slack = _slack_of(spec, prob, rep.z, x, x_bar)
    return StepResult(u0, x_bar, slack, rep.objective, Status.OPTIMAL,
                      elapsed), rep.z


def mpc_step(spec: OcpSpec, x: np.ndarray, warm: np.ndarray | None = None) -> StepResult:
    """Build, solve, and extract one receding-horizon step."""
    return _step_full(spec, x, warm)[0]


def _slack_of(spec: OcpSpec, prob, z: np.ndarray, x: np.ndarray,
              x_bar: np.ndarray) -> float:
    names = prob.var_names
    if "s" in names:
        start, _ = names["s"]
        return float(max(z[start], 0.0))
    if "t" in names:
        start, _ = names["t"]
        return float(max(z[start], 0.0))
    if isinstance(spec.lyap, QuadIncLyap):
        return float(np.sqrt(spec.lyap.value(x, x_bar)))
    return 0.0


class Controller:
    """Receding-horizon controller with per-instance warm-start state."""

    def __init__(self, spec: OcpSpec):
        self.spec = spec
        self._warm: np.ndarray | None = None

    def step(self, x: np.ndarray) -> StepResult:
        result, z = _step_full(self.spec, x, self._warm)
        if z is not None:
            self._warm = z
        return result
