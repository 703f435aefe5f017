"""Benchmark study compositions: system designs and paper-style experiments.

This module wires the design pipeline (Lyapunov/Riccati equations,
invariant sets, penalties) into ready-to-run controller specifications for
the two benchmark studies (mass-spring-damper comparison, four-tank
disturbance study) and the marginally stable oscillator case.  The CLI and
the acceptance suite both run through these entry points.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import control_design as cd
from . import models, ocp, sim
from .conic import Status
from .polytope import Polytope

__all__ = [
    "FourTankStudy",
    "MsdDesign",
    "design_msd",
    "design_four_tank",
    "design_oscillator",
    "feasibility_boundary",
    "reproduce_fourtank",
    "reproduce_linear",
    "run_to_convergence",
    "worker_count",
]

RAY = np.array([0.832, 1.0])


def worker_count() -> int:
    """Worker pool size for fan-out runs (env SOFTMPC_WORKERS, default 1)."""
    try:
        return max(1, int(os.environ.get("SOFTMPC_WORKERS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# mass-spring-damper comparison (linear study)
# ---------------------------------------------------------------------------


@dataclass
class MsdDesign:
    """All offline artifacts of the linear comparison study."""

    system: models.LinearSystem
    Q: np.ndarray
    R: np.ndarray
    N: int
    lyap: cd.QuadIncLyap
    terminal: cd.TerminalIngredients
    terminal_input_only: cd.TerminalIngredients
    P_g: np.ndarray
    lam: float
    q_xi: float
    specs: dict[str, ocp.OcpSpec] = field(default_factory=dict)

    def spec(self, name: str) -> ocp.OcpSpec:
        return self.specs[name]


def design_msd(lam: float = 1e3, q_xi: float = 1e5, N: int = 10,
               method: str = "zoh") -> MsdDesign:
    """Offline design for the damped oscillator benchmark.

    The incremental Lyapunov penalty solves A'PA + Q - P = 0 with the stage
    weight Q; terminal ingredients come from the LQR; the globally valid
    terminal penalty absorbs the per-step violation weight.
    """
    ls = models.mass_spring_damper(method=method)
    Q = np.diag([1.0, 0.1])
    R = np.array([[0.2]])
    P = cd.dlyap(ls.A, Q)
    lyap = cd.contraction_constants(ls.A, P, Q)
    terminal = cd.lqr_terminal_ingredients(ls.A, ls.B, Q, R, ls.X, ls.U)
    terminal_io = cd.lqr_terminal_ingredients(ls.A, ls.B, Q, R, ls.X, ls.U,
                                              input_only=True)
    P_g = cd.global_quadratic_terminal(ls.A, Q, ls.X, q_xi * np.eye(2 * ls.n))
    base = dict(model=ls, N=N, Q=Q, R=R, X=ls.X, U=ls.U)
    specs = {
        "nominal": ocp.OcpSpec(**base, terminal=terminal,
                               formulation=ocp.Nominal()),
        "proposed": ocp.OcpSpec(**base, terminal=terminal,
                                formulation=ocp.SlackInit(lam), lyap=lyap),
        "soft_p": ocp.OcpSpec(**base, terminal=terminal,
                              formulation=ocp.SoftP(q_xi)),
        "soft_t": ocp.OcpSpec(**base, terminal=terminal_io,
                              formulation=ocp.SoftT(q_xi)),
        "soft_g": ocp.OcpSpec(**base, terminal=ocp.GlobalQuadratic(P_g),
                              formulation=ocp.SoftG(q_xi)),
    }
    return MsdDesign(system=ls, Q=Q, R=R, N=N, lyap=lyap, terminal=terminal,
                     terminal_input_only=terminal_io, P_g=P_g, lam=lam,
                     q_xi=q_xi, specs=specs)


def run_to_convergence(spec: ocp.OcpSpec, x0: np.ndarray,
                       tail_tol: float = 1e-9, block: int = 200,
                       max_steps: int = 4000) -> sim.Trace:
    """Simulate without disturbances until the stage cost tail is negligible."""
    T = block
    while True:
        trace = sim.simulate(spec, x0, sim.DisturbanceProfile(kind="zero"), T)
        if trace.termination != "Completed":
            return trace
        if trace.stage_cost[-1] <= tail_tol or T >= max_steps:
            return trace
        T = min(2 * T, max_steps)


def feasibility_boundary(spec: ocp.OcpSpec, direction: np.ndarray = RAY,
                         lo: float = 0.25, hi: float = 8.0,
                         iters: int = 40) -> float:
    """Largest c with the problem feasible at c * direction (bisection)."""
    direction = np.asarray(direction, dtype=float)
    if ocp.mpc_step(spec, lo * direction).status != Status.OPTIMAL:
        raise ValueError("bisection bracket: lower end must be feasible")
    if ocp.mpc_step(spec, hi * direction).status == Status.OPTIMAL:
        raise ValueError("bisection bracket: upper end must be infeasible")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if ocp.mpc_step(spec, mid * direction).status == Status.OPTIMAL:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _linear_cell(spec: ocp.OcpSpec, c: float):
    x0 = c * RAY
    if ocp.mpc_step(spec, x0).status != Status.OPTIMAL:
        return None, None
    trace = run_to_convergence(spec, x0)
    if trace.termination != "Completed":
        return None, None
    return float(np.sum(trace.stage_cost)), float(trace.solve_time.mean())


def _one_linear_cell(args):
    design_kw, name, c = args
    design = design_msd(**design_kw)
    cost, st = _linear_cell(design.spec(name), c)
    return name, c, cost, st


@dataclass
class LinearComparison:
    c_values: tuple[float, ...]
    cost: dict[tuple[str, float], float | None]
    relative: dict[tuple[str, float], float | None]
    mean_solve_time: dict[str, float]
    boundaries: dict[str, float]

    def table_text(self) -> str:
        names = ["proposed", "soft_p", "soft_t", "soft_g"]
        lines = ["c        " + "".join(f"{n:>12}" for n in names)]
        for c in self.c_values:
            row = [f"c={c:<6.2f}"]
            for n in names:
                r = self.relative[(n, c)]
                row.append(f"{'x':>12}" if r is None else f"{100*r:>11.1f}%")
            lines.append(" ".join(row))
        lines.append("")
        lines.append("mean solve time relative to nominal:")
        base = self.mean_solve_time.get("nominal", None)
        for n in ["nominal", "proposed", "soft_p", "soft_t", "soft_g"]:
            if n in self.mean_solve_time and base:
                lines.append(f"  {n:>9}: {100*self.mean_solve_time[n]/base:7.1f}%")
        lines.append("")
        for k, v in self.boundaries.items():
            lines.append(f"feasibility boundary {k}: c* = {v:.4f}")
        return "\n".join(lines) + "\n"


def reproduce_linear(c_values=(1.0, 1.52, 4.0), lam: float = 1e3,
                     q_xi: float = 1e5, method: str = "zoh") -> LinearComparison:
    """Closed-loop cost comparison of the five controllers on the damped
    oscillator, plus solve-time ratios and feasibility boundaries."""
    design_kw = dict(lam=lam, q_xi=q_xi, method=method)
    design = design_msd(**design_kw)
    names = ["nominal", "proposed", "soft_p", "soft_t", "soft_g"]
    jobs = [(design_kw, n, c) for n in names for c in c_values]
    results = {}
    workers = worker_count()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for name, c, cost, st in pool.map(_one_linear_cell, jobs):
                results[(name, c)] = (cost, st)
    else:
        for name in names:
            for c in c_values:
                results[(name, c)] = _linear_cell(design.spec(name), c)

    cost = {k: v[0] for k, v in results.items()}
    relative = {}
    for (name, c), v in cost.items():
        ref = cost[("proposed", c)]
        relative[(name, c)] = None if (v is None or ref is None) else v / ref
    # solve-time ratios on a feasible grid over the nominal feasible set
    times = _solve_time_grid(design)
    boundaries = {
        "nominal": feasibility_boundary(design.spec("nominal")),
        "soft_p": feasibility_boundary(design.spec("soft_p")),
        "soft_t": feasibility_boundary(design.spec("soft_t")),
    }
    return LinearComparison(tuple(c_values), cost, relative, times, boundaries)


def _solve_time_grid(design: MsdDesign, grid: int = 12) -> dict[str, float]:
    """Mean solve time per controller over a grid of feasible states."""
    pts = []
    for a in np.linspace(-0.95, 0.95, grid):
        for b in np.linspace(-0.95, 0.95, grid):
            x = np.array([a, b])
            if ocp.mpc_step(design.spec("nominal"), x).status == Status.OPTIMAL:
                pts.append(x)
    out = {}
    for name in ["nominal", "proposed", "soft_p", "soft_t", "soft_g"]:
        spec = design.spec(name)
        tt = []
        for x in pts:
            r = ocp.mpc_step(spec, x)
            if r.status == Status.OPTIMAL:
                tt.append(r.solve_time)
        out[name] = float(np.mean(tt)) if tt else float("nan")
    return out


# ---------------------------------------------------------------------------
# four-tank disturbance study (nonlinear)
# ---------------------------------------------------------------------------


@dataclass
class FourTankStudy:
    model: models.NonlinearModel
    params: models.FourTankParams
    terminal: ocp.TerminalEquality
    lyap: cd.QuadIncLyap
    x0: np.ndarray
    specs: dict[str, ocp.OcpSpec]
    delta: float
    w_ball: float

    def spec(self, name: str) -> ocp.OcpSpec:
        return self.specs[name]


def design_four_tank(params: models.FourTankParams | None = None,
                     lam: float = 1e5, q_xi: float = 1e4, v_o: float = 1e4,
                     delta: float = 0.05, w_ball: float = 7e-4,
                     N: int = 10,
                     y_target=(1.3, 1.3)) -> FourTankStudy:
    """Four-tank tracking study: nominal, soft-state, relaxed-initial-state,
    and tube-relaxed controllers sharing the artificial-setpoint terminal."""
    params = params or models.four_tank_default_params()
    model = models.four_tank(params)
    P = np.diag([1.0, 2.0, 1.0, 2.0])
    passed, margin = models.check_contraction(model, P)
    if not passed:
        raise cd.NotContractive(f"diagonal certificate fails (margin {margin:.3e})")
    lyap = cd.QuadIncLyap.marginal(P)
    C = np.array([[1.0, 0, 0, 0], [0, 0, 1.0, 0]])
    terminal = ocp.TerminalEquality(C=C, y_target=np.asarray(y_target, dtype=float),
                                    weight_offset=v_o)
    Q = np.eye(4)
    R = 1e-2 * np.eye(2)
    base = dict(model=model, N=N, Q=Q, R=R, U=model.U, terminal=terminal)
    spec_slack = ocp.OcpSpec(**base, X=model.X,
                             formulation=ocp.SlackInit(lam), lyap=lyap)
    specs = {
        "nominal": ocp.OcpSpec(**base, X=model.X, formulation=ocp.Nominal()),
        "soft_state": ocp.OcpSpec(**base, X=model.X, formulation=ocp.SoftP(q_xi)),
        "proposed": spec_slack,
        "tube_slack": ocp.make_tube_spec(spec_slack, lyap, delta, lam=lam),
    }
    x0 = models.four_tank_steady_state(params, np.array([2.4, 2.8]))
    return FourTankStudy(model=model, params=params, terminal=terminal,
                         lyap=lyap, x0=x0, specs=specs, delta=delta,
                         w_ball=w_ball)


def _one_fourtank_run(args):
    name, seed, steps, study_kw = args
    study = design_four_tank(**study_kw)
    ramp = sim.DisturbanceProfile(kind="ramp_uniform", peak=5e-2, seed=seed)
    trace = sim.simulate(study.spec(name), study.x0, ramp, steps)
    return name, trace


def reproduce_fourtank(seed: int = 1, steps: int = 550,
                       study: FourTankStudy | None = None,
                       names=("nominal", "soft_state", "proposed", "tube_slack"),
                       study_kw: dict | None = None) -> dict[str, sim.Trace]:
    """Matched-seed ramp-disturbance runs of the four controllers."""
    study_kw = dict(study_kw or {})
    jobs = [(n, seed, steps, study_kw) for n in names]
    out = {}
    workers = worker_count()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            for name, trace in pool.map(_one_fourtank_run, jobs):
                out[name] = trace
    else:
        if study is None:
            study = design_four_tank(**study_kw)
        ramp = sim.DisturbanceProfile(kind="ramp_uniform", peak=5e-2, seed=seed)
        for n in names:
            out[n] = sim.simulate(study.spec(n), study.x0, ramp, steps)
    return out


def fourtank_verdicts(traces: dict[str, sim.Trace]) -> str:
    lines = []
    for name, tr in traces.items():
        v = float(np.sum(tr.violation**2))
        if tr.termination == "Completed":
            lines.append(f"{name:>11}: completed {tr.steps} steps, "
                         f"cumulative violation {v:.6f}")
        else:
            lines.append(f"{name:>11}: stopped infeasible at step "
                         f"{tr.stopped_at}, violation up to stop {v:.6f}")
    return "\n".join(lines) + "\n"


def nominal_quadratic_bound(spec: ocp.OcpSpec, samples: int = 200,
                            rng_seed: int = 0, inflation: float = 1.1) -> float:
    """Estimated upper-bound constant c2 with V_nom(x) <= c2 ||x||^2 on the
    feasible set: sampled interior states plus bisected boundary rays,
    inflated by 10%."""
    rng = np.random.default_rng(rng_seed)
    worst = 0.0
    n = spec.n
    count = 0
    while count < samples:
        x = spec.X.sample(1, rng)[0]
        res = ocp.mpc_step(spec, x)
        if res.status != Status.OPTIMAL or np.linalg.norm(x) < 1e-6:
            continue
        worst = max(worst, res.value / float(x @ x))
        count += 1
    for _ in range(24):
        d = rng.normal(size=n)
        d /= np.linalg.norm(d)
        lo, hi = 0.0, float(spec.X.support(d) * 4.0)
        for _ in range(24):
            mid = 0.5 * (lo + hi)
            if ocp.mpc_step(spec, mid * d).status == Status.OPTIMAL:
                lo = mid
            else:
                hi = mid
        if lo > 1e-6:
            x = lo * d
            res = ocp.mpc_step(spec, x)
            if res.status == Status.OPTIMAL:
                worst = max(worst, res.value / float(x @ x))
    return inflation * worst


def audit_constants(design: MsdDesign, lam: float) -> tuple[float, float]:
    """(rho_tilde, gain) for the per-step decrease audit
    V(k+1) <= rho_tilde V(k) + gain ||w(k)||^2 of the relaxed controller."""
    lyap = design.lyap
    c_ell = float(np.linalg.eigvalsh(design.Q).min())
    c2_hat = nominal_quadratic_bound(design.spec("nominal"))
    alpha_N = design.terminal.alpha_N
    rho_nom = 1.0 - c_ell * alpha_N / c2_hat
    rho_tilde = max(lyap.rho_delta, rho_nom)
    return rho_tilde, lam * lyap.c_delta[3]


# ---------------------------------------------------------------------------
# marginally stable oscillator (semi-global case)
# ---------------------------------------------------------------------------


def design_oscillator(theta: float = 0.3, lam: float = 1e4, N: int = 12):
    """Relaxed-initial-state MPC for the undamped oscillator with the
    marginal certificate P = I (A'A = I)."""
    ls = models.harmonic_oscillator(theta)
    Q = np.eye(2)
    R = np.array([[1.0]])
    lyap = cd.QuadIncLyap.marginal(np.eye(2))
    terminal = cd.lqr_terminal_ingredients(ls.A, ls.B, Q, R, ls.X, ls.U)
    spec = ocp.OcpSpec(model=ls, N=N, Q=Q, R=R, X=ls.X, U=ls.U,
                       terminal=terminal, formulation=ocp.SlackInit(lam),
                       lyap=lyap)
    return ls, spec
