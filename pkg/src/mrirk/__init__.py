"""Adaptive multiresolution finite volumes with implicit Runge-Kutta time stepping.

Modules
-------
grid      multiresolution graded trees, thresholding and ghost cells
fv        finite-volume right-hand side and numerical Jacobians
models    Belousov-Zhabotinski and vortex-ignition benchmarks
tableaux  Butcher tableaux (euler, sdirk2/3/4, radau3/5)
irk       simplified Newton steps and embedded error estimates
linalg    stage matrices, ILUT and GMRES
control   step-size control
runner    time loop, configuration and study harnesses
"""

from .control import StepControlConfig, constant_mode_dt, propose_next_dt, safety_factor
from .fv import FvOperator, assemble_jacobian, eval_rhs, weighted_norm
from .grid import CellId, GradedTreeGrid, MrConfig, adapt, compression_ratio, initialise
from .irk import IrkStepper, NewtonOptions, NewtonReport, estimate_error, step_fully_implicit, step_sdirk
from .linalg import GmresIlutSolver, DirectSolver, assemble_stage_matrix, gmres, ilut_factor
from .models import bz_model, get_model, ignition_model
from .runner import RunConfig, StatsLog, load_config, run
from .tableaux import ButcherTableau, tableau

__version__ = "0.1.0"
