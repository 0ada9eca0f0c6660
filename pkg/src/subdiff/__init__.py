"""Point-source recovery for time-fractional subdiffusion.

Forward solver (P1 finite elements + backward-Euler convolution quadrature),
Levenberg-Marquardt inversion, and an experiment harness with presets.
"""

from .fractional import TimeGrid, cq_weights, discrete_caputo_apply, mittag_leffler
from .fem import CoefficientSet, Mesh, build_interval_mesh, build_rect_mesh
from .forward import ForwardOperator, ForwardSolution, SourceSet, solve_forward
from .inverse import LMConfig, ParamVector, lm_step, run_lm
from .config import load_config
from .experiments import run_preset, run_spec

__all__ = [
    "CoefficientSet",
    "ForwardOperator",
    "ForwardSolution",
    "LMConfig",
    "Mesh",
    "ParamVector",
    "SourceSet",
    "TimeGrid",
    "build_interval_mesh",
    "build_rect_mesh",
    "cq_weights",
    "discrete_caputo_apply",
    "lm_step",
    "load_config",
    "mittag_leffler",
    "run_lm",
    "run_preset",
    "run_spec",
    "solve_forward",
]

__version__ = "0.1.0"
