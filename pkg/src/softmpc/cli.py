"""Experiment runner.

Subcommands:
  design <config>                 offline design report for the configured model
  simulate <config>               closed-loop run -> trace CSV + JSON summary + figures
  reproduce-linear [--out DIR]    damped-oscillator comparison study
  reproduce-fourtank <config> [--out DIR]  four-tank disturbance study

Exit codes: 0 success (including runs that stop infeasible), 2 config
error, 3 design error.  SOFTMPC_WORKERS sets the fan-out worker count.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import control_design as cd
from . import models, ocp, plots, sim, studies

__all__ = ["main", "cmd_design", "cmd_simulate", "cmd_reproduce_linear",
           "cmd_reproduce_fourtank"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DESIGN = 3


def _load_config(path: str) -> cfgmod.ExperimentConfig:
    return cfgmod.ExperimentConfig.from_text(Path(path).read_text())


def _matrix_lines(name: str, M: np.ndarray) -> list[str]:
    M = np.atleast_2d(M)
    out = [f"{name} ({M.shape[0]}x{M.shape[1]}):"]
    for row in M:
        out.append("  " + "  ".join(f"{v: .8e}" for v in row))
    return out


def cmd_design(cfg: cfgmod.ExperimentConfig, out_dir: Path) -> int:
    """Run the offline design pipeline and write a structured text report."""
    lines: list[str] = [f"design report: {cfg.model_kind}", ""]
    if cfg.model_kind == "harmonic_oscillator":
        ls = models.harmonic_oscillator(cfg.raw.get("model.theta_rad", 0.3))
        try:
            cd.dlyap(ls.A, np.eye(2))
        except cd.SpectralRadiusError as exc:
            print(f"design error: {exc}; eigenvalues on the unit circle -- "
                  "use the marginal certificate (semi-global regime) instead",
                  file=sys.stderr)
            return EXIT_DESIGN
        return EXIT_OK
    if cfg.model_kind == "mass_spring_damper":
        design = studies.design_msd(
            lam=cfg.raw.get("formulation.lambda", 1e3),
            q_xi=cfg.raw.get("formulation.q_xi", 1e5),
            N=cfg.raw.get("horizon", 10),
            method=cfg.raw.get("model.discretization", "zoh"))
        lyap = design.lyap
        lines += _matrix_lines("A", design.system.A)
        lines += _matrix_lines("B", design.system.B)
        lines += _matrix_lines("P (incremental Lyapunov weight)", lyap.P)
        lines += _matrix_lines("P_f (terminal penalty)", design.terminal.P_f)
        lines += _matrix_lines("K (terminal feedback)", design.terminal.K)
        lines.append(f"X_f rows: {design.terminal.X_f.n_rows}")
        c1, c2, c3, c4 = lyap.c_delta
        lines.append(f"c_delta = ({c1:.6e}, {c2:.6e}, {c3:.6e}, {c4:.6e})")
        lines.append(f"rho_delta = {lyap.rho_delta:.10f}")
        w_ball = cfg.raw.get("tube.w_ball")
        if w_ball is not None:
            delta = cd.rpi_level(lyap, w_ball)
            lines.append(f"rpi level delta({w_ball:g}) = {delta:.6e}")
        if "formulation.delta" in cfg.raw:
            delta = cfg.raw["formulation.delta"]
            Xb = design.system.X.normalize().tighten_by_ball(
                delta / np.sqrt(lyap.c_delta[0]))
            lines.append(f"tightened state box rhs: {np.array2string(Xb.h)}")
        rho = cfg.raw.get("design.exact_penalty_rho")
        if rho is not None:
            from .polytope import max_rho_contractive
            poly = max_rho_contractive(design.system.A, rho, design.system.X,
                                       max_iter=2000)
            rng = np.random.default_rng(cfg.seed)
            samples = _feasible_samples(design.spec("nominal"), 20, rng)
            lam_min = cd.exact_penalty_threshold(design.spec("nominal"), poly,
                                                 samples)
            lines.append(f"polytopic penalty rows: {poly.F.shape[0]}, "
                         f"rho = {rho:g}")
            lines.append(f"exact penalty threshold estimate: {lam_min:.6e}")
    elif cfg.model_kind == "four_tank":
        params = cfg.tank_params()
        model = models.four_tank(params)
        P_diag = cfg.raw.get("design.contraction_p_diag", [1.0, 2.0, 1.0, 2.0])
        passed, margin = models.check_contraction(model, np.diag(P_diag))
        lines.append(f"params c = {params.c}")
        lines.append(f"params c_u = {params.c_u} (documented defaults, not "
                     "from the reference experiments)")
        lines.append(f"contraction certificate P = diag{tuple(P_diag)}: "
                     f"{'PASS' if passed else 'FAIL'} (margin {margin:.6e})")
        if not passed:
            print("design error: contraction certificate failed", file=sys.stderr)
            return EXIT_DESIGN
        delta = cfg.raw.get("formulation.delta", 0.05)
        Xb = model.X.normalize().tighten_by_ball(delta / np.sqrt(min(P_diag)))
        lines.append(f"tube tightening delta = {delta:g}; tightened rhs: "
                     f"{np.array2string(Xb.h)}")
    out_dir.mkdir(parents=True, exist_ok=True)
    report = "\n".join(lines) + "\n"
    (out_dir / "design_report.txt").write_text(report)
    print(report, end="")
    return EXIT_OK


def _feasible_samples(spec: ocp.OcpSpec, count: int,
                      rng: np.random.Generator) -> np.ndarray:
    from .conic import Status

    out = []
    while len(out) < count:
        x = spec.X.sample(1, rng)[0]
        if ocp.mpc_step(spec, x).status == Status.OPTIMAL:
            out.append(x)
    return np.array(out)


def _summary(trace: sim.Trace) -> dict:
    done = trace.termination == "Completed"
    return {
        "termination": trace.termination,
        "stopped_at": trace.stopped_at,
        "steps": trace.steps,
        "closed_loop_cost": float(np.sum(trace.stage_cost)) if done else None,
        "cumulative_violation": float(np.sum(trace.violation**2)),
        "mean_solve_time_s": float(trace.solve_time.mean()) if trace.steps else None,
    }


def cmd_simulate(cfg: cfgmod.ExperimentConfig, out_dir: Path) -> int:
    spec = cfg.build_spec()
    trace = sim.simulate(spec, cfg.default_x0(), cfg.disturbance(), cfg.steps)
    out_dir.mkdir(parents=True, exist_ok=True)
    sim.write_csv(trace, out_dir / "trace.csv")
    (out_dir / "summary.json").write_text(json.dumps(_summary(trace), indent=2) + "\n")
    fig_dir = out_dir / "figures"
    fig_dir.mkdir(exist_ok=True)
    plots.plot_trace_timeseries(trace, fig_dir / "trace.png")
    print(f"{trace.termination} after {trace.steps} steps; outputs in {out_dir}")
    return EXIT_OK


def cmd_reproduce_linear(out_dir: Path, method: str = "zoh") -> int:
    comparison = studies.reproduce_linear(method=method)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = comparison.table_text()
    (out_dir / "comparison.txt").write_text(table)
    rows = ["controller,c,closed_loop_cost,relative_to_proposed"]
    for (name, c), v in sorted(comparison.cost.items()):
        rel = comparison.relative[(name, c)]
        rows.append(f"{name},{c},{'' if v is None else repr(v)},"
                    f"{'' if rel is None else repr(rel)}")
    (out_dir / "cost_table.csv").write_text("\n".join(rows) + "\n")
    rows = ["controller,mean_solve_time_s"]
    for name, v in comparison.mean_solve_time.items():
        rows.append(f"{name},{v!r}")
    (out_dir / "solve_times.csv").write_text("\n".join(rows) + "\n")
    design = studies.design_msd(method=method)
    fig_dir = out_dir / "figures"
    fig_dir.mkdir(exist_ok=True)
    for c in comparison.c_values:
        traces = {}
        for name in ("nominal", "proposed", "soft_p", "soft_t", "soft_g"):
            from .conic import Status

            x0 = c * studies.RAY
            if ocp.mpc_step(design.spec(name), x0).status != Status.OPTIMAL:
                continue
            traces[name] = studies.run_to_convergence(design.spec(name), x0)
        plots.plot_phase(traces, design.system.X, fig_dir / f"phase_c{c:g}.png",
                         title=f"c = {c:g}")
    print(table, end="")
    return EXIT_OK


def cmd_reproduce_fourtank(cfg: cfgmod.ExperimentConfig, out_dir: Path) -> int:
    study_kw = dict(params=None, lam=cfg.raw.get("formulation.lambda", 1e5),
                    q_xi=cfg.raw.get("formulation.q_xi", 1e4),
                    v_o=cfg.raw.get("tracking.v_o", 1e4),
                    delta=cfg.raw.get("formulation.delta", 0.05),
                    w_ball=cfg.raw.get("tube.w_ball", 7e-4),
                    N=cfg.raw.get("horizon", 10))
    if any(k.startswith("model.tank.") for k in cfg.raw):
        study_kw["params"] = cfg.tank_params()
    traces = studies.reproduce_fourtank(seed=cfg.seed, steps=cfg.steps,
                                        study_kw=study_kw)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, tr in traces.items():
        sim.write_csv(tr, out_dir / f"trace_{name}.csv")
    verdicts = studies.fourtank_verdicts(traces)
    (out_dir / "verdicts.txt").write_text(verdicts)
    summary = {name: _summary(tr) for name, tr in traces.items()}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    fig_dir = out_dir / "figures"
    fig_dir.mkdir(exist_ok=True)
    plots.plot_levels(traces, fig_dir / "levels_tank1.png", state_index=0)
    plots.plot_levels(traces, fig_dir / "levels_tank2.png", state_index=1,
                      bounds=(0.2, 1.4))
    print(verdicts, end="")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="softmpc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p_design = sub.add_parser("design", help="offline design report")
    p_design.add_argument("config")
    p_design.add_argument("--out", default="out/design")
    p_sim = sub.add_parser("simulate", help="closed-loop simulation")
    p_sim.add_argument("config")
    p_sim.add_argument("--out", default=None)
    p_lin = sub.add_parser("reproduce-linear", help="damped oscillator study")
    p_lin.add_argument("--out", default="out/linear")
    p_lin.add_argument("--discretization", default="zoh", choices=["zoh", "euler"])
    p_ft = sub.add_parser("reproduce-fourtank", help="four-tank disturbance study")
    p_ft.add_argument("config")
    p_ft.add_argument("--out", default="out/fourtank")
    args = parser.parse_args(argv)

    try:
        if args.command == "reproduce-linear":
            return cmd_reproduce_linear(Path(args.out), method=args.discretization)
        cfg = _load_config(args.config)
        if args.command == "design":
            return cmd_design(cfg, Path(args.out))
        if args.command == "simulate":
            out = Path(args.out) if args.out else Path(cfg.out_dir)
            return cmd_simulate(cfg, out)
        if args.command == "reproduce-fourtank":
            return cmd_reproduce_fourtank(cfg, Path(args.out))
    except (cfgmod.ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (cd.SpectralRadiusError, cd.NoConvergence, cd.NotContractive) as exc:
        print(f"design error: {exc}", file=sys.stderr)
        return EXIT_DESIGN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
