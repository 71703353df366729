"""Temperature-aware SAR planning for phased-array hyperthermia.

Modules
-------
phantom      tissue table, geometric primitives and voxel rasterization
fields       antenna field sets, superposition and SAR
sar_planner  target-to-hotspot quotient and its particle-swarm optimization
bioheat      steady Pennes bioheat solver
gaussfit     Gaussian fit of a focused |E|^2 map
tshape       refinement search and the full planning pipeline
scenario     JSON scenario files
cli          command-line front end
"""

from .bioheat import BoundaryCondition, BoundarySpec, SteadySolver, solve_steady
from .fields import AntennaFieldSet, ExcitationVector, SarMap
from .gaussfit import GaussianParams, fit_gaussian
from .phantom import DEFAULT_TISSUES, BloodModel, Grid, PhantomGrid, rasterize
from .sar_planner import PsoConfig, pso_optimize, thq
from .scenario import Scenario
from .tshape import run_pipeline, sensitivity_sweep, tau90

__version__ = "0.1.0"

__all__ = [
    "AntennaFieldSet",
    "BloodModel",
    "BoundaryCondition",
    "BoundarySpec",
    "DEFAULT_TISSUES",
    "ExcitationVector",
    "GaussianParams",
    "Grid",
    "PhantomGrid",
    "PsoConfig",
    "SarMap",
    "Scenario",
    "SteadySolver",
    "fit_gaussian",
    "pso_optimize",
    "rasterize",
    "run_pipeline",
    "sensitivity_sweep",
    "solve_steady",
    "tau90",
    "thq",
]
