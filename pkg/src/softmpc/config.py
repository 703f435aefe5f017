"""Plain-text experiment configuration.

Format: one ``key = value`` assignment per line, ``#`` comments, dotted
keys for hierarchy, units spelled out in key names (``dt_s``,
``peak_winf``).  Values are scalars, words, or whitespace-separated
number lists.  Unknown keys are rejected; serialization is canonical
(sorted keys), so ``serialize(parse(text))`` is idempotent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import control_design as cd
from . import models, ocp, sim, studies

__all__ = ["ConfigError", "ExperimentConfig", "parse", "serialize"]


class ConfigError(ValueError):
    pass


_KNOWN_KEYS = {
    "model.kind": str,
    "model.dt_s": float,
    "model.discretization": str,
    "model.theta_rad": float,
    "model.tank.c1_per_s": float,
    "model.tank.c2_per_s": float,
    "model.tank.c3_per_s": float,
    "model.tank.c4_per_s": float,
    "model.tank.cu1": float,
    "model.tank.cu2": float,
    "model.tank.cu3": float,
    "model.tank.cu4": float,
    "horizon": int,
    "cost.q_diag": list,
    "cost.r_diag": list,
    "formulation.variant": str,
    "formulation.lambda": float,
    "formulation.delta": float,
    "formulation.q_xi": float,
    "formulation.horizon_m": int,
    "formulation.m_tail": int,
    "formulation.sublevel_cap": float,
    "tracking.y_target": list,
    "tracking.v_o": float,
    "tube.w_ball": float,
    "x0": list,
    "x0_ray.direction": list,
    "x0_ray.c": list,
    "disturbance.kind": str,
    "disturbance.radius": float,
    "disturbance.peak_winf": float,
    "disturbance.k_points": list,
    "steps": int,
    "seed": int,
    "out_dir": str,
    "design.contraction_p_diag": list,
    "design.exact_penalty_rho": float,
}


def parse(text: str) -> dict:
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        kind = _KNOWN_KEYS[key]
        try:
            if kind is str:
                out[key] = value
            elif kind is int:
                out[key] = int(value)
            elif kind is float:
                out[key] = float(value)
            else:
                out[key] = [float(v) for v in value.split()]
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    return out


def _fmt(v) -> str:
    if isinstance(v, list):
        return " ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize(cfg: dict) -> str:
    return "".join(f"{k} = {_fmt(cfg[k])}\n" for k in sorted(cfg))


_VARIANTS = {
    "nominal", "slack_init", "implicit", "implicit_soft_input",
    "tube", "tube_slack", "soft_p", "soft_t", "soft_g",
}


@dataclass
class ExperimentConfig:
    """Validated experiment description, buildable into an OcpSpec."""

    raw: dict
    model_kind: str
    variant: str
    steps: int = 100
    seed: int = 0
    out_dir: str = "out"
    x0: np.ndarray | None = None
    ray_direction: np.ndarray | None = None
    ray_c: list[float] = field(default_factory=list)

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        raw = parse(text)
        kind = raw.get("model.kind")
        if kind not in ("mass_spring_damper", "four_tank", "harmonic_oscillator"):
            raise ConfigError(f"model.kind missing or unknown: {kind!r}")
        variant = raw.get("formulation.variant", "nominal")
        if variant not in _VARIANTS:
            raise ConfigError(f"unknown formulation.variant {variant!r}")
        cfg = cls(raw=raw, model_kind=kind, variant=variant,
                  steps=raw.get("steps", 100), seed=raw.get("seed", 0),
                  out_dir=raw.get("out_dir", "out"))
        if "x0" in raw:
            cfg.x0 = np.array(raw["x0"], dtype=float)
        if "x0_ray.direction" in raw:
            cfg.ray_direction = np.array(raw["x0_ray.direction"], dtype=float)
            cfg.ray_c = raw.get("x0_ray.c", [1.0])
        if cfg.x0 is None and cfg.ray_direction is None:
            cfg.x0 = None  # resolved per model default at build time
        return cfg

    # -- model/spec construction --------------------------------------------

    def tank_params(self) -> models.FourTankParams:
        r = self.raw
        default = models.four_tank_default_params()
        c = tuple(r.get(f"model.tank.c{i}_per_s", default.c[i - 1]) for i in range(1, 5))
        cu = tuple(r.get(f"model.tank.cu{i}", default.c_u[i - 1]) for i in range(1, 5))
        return models.FourTankParams(c=c, c_u=cu)

    def build_spec(self) -> ocp.OcpSpec:
        r = self.raw
        lam = r.get("formulation.lambda", 1e3)
        delta = r.get("formulation.delta", 0.05)
        q_xi = r.get("formulation.q_xi", 1e5)
        if self.model_kind == "mass_spring_damper":
            design = studies.design_msd(
                lam=lam, q_xi=q_xi, N=r.get("horizon", 10),
                method=r.get("model.discretization", "zoh"))
            tab = {"nominal": "nominal", "slack_init": "proposed",
                   "soft_p": "soft_p", "soft_t": "soft_t", "soft_g": "soft_g"}
            if self.variant in tab:
                return design.spec(tab[self.variant])
            base = design.spec("proposed")
            if self.variant == "implicit":
                return ocp.OcpSpec(model=base.model, N=base.N, Q=base.Q, R=base.R,
                                   X=base.X, U=base.U, terminal=base.terminal,
                                   formulation=ocp.ImplicitSlack(lam, r.get("formulation.horizon_m", 3)),
                                   lyap=base.lyap)
            if self.variant in ("tube", "tube_slack"):
                lam_or_none = None if self.variant == "tube" else lam
                return ocp.make_tube_spec(
                    base, design.lyap, delta, lam=lam_or_none,
                    terminal=_tightened_linear_terminal(design, delta))
            raise ConfigError(f"variant {self.variant!r} not available for this model")
        if self.model_kind == "four_tank":
            study = studies.design_four_tank(
                params=self.tank_params(), lam=lam,
                q_xi=r.get("formulation.q_xi", 1e4),
                v_o=r.get("tracking.v_o", 1e4), delta=delta,
                w_ball=r.get("tube.w_ball", 7e-4), N=r.get("horizon", 10),
                y_target=tuple(r.get("tracking.y_target", [1.3, 1.3])))
            tab = {"nominal": "nominal", "soft_p": "soft_state",
                   "slack_init": "proposed", "tube_slack": "tube_slack"}
            if self.variant in tab:
                return study.spec(tab[self.variant])
            base = study.spec("proposed")
            if self.variant == "implicit":
                form = ocp.ImplicitSlack(lam, r.get("formulation.horizon_m", 3))
            elif self.variant == "implicit_soft_input":
                form = ocp.ImplicitSlackSoftInput(lam, r.get("formulation.horizon_m", 3))
            else:
                raise ConfigError(f"variant {self.variant!r} not available for this model")
            return ocp.OcpSpec(model=base.model, N=base.N, Q=base.Q, R=base.R,
                               X=base.X, U=base.U, terminal=base.terminal,
                               formulation=form, lyap=base.lyap)
        if self.model_kind == "harmonic_oscillator":
            _, spec = studies.design_oscillator(
                theta=self.raw.get("model.theta_rad", 0.3), lam=lam,
                N=self.raw.get("horizon", 12))
            if self.variant != "slack_init":
                raise ConfigError("oscillator study supports slack_init only")
            return spec
        raise ConfigError(f"unhandled model kind {self.model_kind!r}")

    def default_x0(self) -> np.ndarray:
        if self.x0 is not None:
            return self.x0
        if self.ray_direction is not None:
            return float(self.ray_c[0]) * self.ray_direction
        if self.model_kind == "four_tank":
            return models.four_tank_steady_state(self.tank_params(),
                                                 np.array([1.3, 1.3]))
        return np.zeros(2)

    def disturbance(self) -> sim.DisturbanceProfile:
        r = self.raw
        kind = r.get("disturbance.kind", "zero")
        kw: dict = {"kind": kind, "seed": self.seed}
        if kind == "uniform_ball":
            kw["radius"] = r.get("disturbance.radius", 0.0)
        if kind == "ramp_uniform":
            kw["peak"] = r.get("disturbance.peak_winf", 5e-2)
            pts = r.get("disturbance.k_points")
            if pts is not None:
                kw["k_points"] = tuple(int(v) for v in pts)
        return sim.DisturbanceProfile(**kw)


def _tightened_linear_terminal(design: studies.MsdDesign, delta: float):
    ls = design.system
    c1 = design.lyap.c_delta[0]
    Xbar = ls.X.normalize().tighten_by_ball(delta / np.sqrt(c1))
    return cd.lqr_terminal_ingredients(ls.A, ls.B, design.Q, design.R,
                                       Xbar, ls.U)
