"""MPC with softened initial state constraints.

Library layout:

- :mod:`softmpc.control_design` -- Lyapunov/Riccati equations, contraction
  constants, robust-invariance levels, exact-penalty estimates.
- :mod:`softmpc.polytope` -- half-space sets, tightening, invariant and
  contractive set computation.
- :mod:`softmpc.conic` -- canonical QP/SOC program and solver wrapper.
- :mod:`softmpc.ocp` -- every MPC formulation plus the controller step.
- :mod:`softmpc.nlp` -- Gauss-Newton SQP for the nonlinear variants.
- :mod:`softmpc.models` -- benchmark systems and discretization.
- :mod:`softmpc.sim` -- closed-loop simulation and metrics.
- :mod:`softmpc.cli` -- experiment runner (design, simulate, reproductions).
"""

from . import conic, control_design, models, nlp, ocp, polytope, sim
from .conic import ConicProgram, Solution, Status
from .control_design import QuadIncLyap, TerminalIngredients
from .models import LinearSystem, NonlinearModel
from .ocp import Controller, OcpSpec, mpc_step
from .polytope import PolyIncLyap, Polytope
from .sim import DisturbanceProfile, Trace, simulate

__version__ = "0.1.0"

__all__ = [
    "ConicProgram",
    "Controller",
    "DisturbanceProfile",
    "LinearSystem",
    "NonlinearModel",
    "OcpSpec",
    "PolyIncLyap",
    "Polytope",
    "QuadIncLyap",
    "Solution",
    "Status",
    "TerminalIngredients",
    "Trace",
    "conic",
    "control_design",
    "models",
    "mpc_step",
    "nlp",
    "ocp",
    "polytope",
    "sim",
    "simulate",
]
