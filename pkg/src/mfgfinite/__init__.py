"""Finite-state mean field games: N-player Nash systems, the MFG system, the
master field, jump-process simulation and CLT/LDP limit objects."""
import os as _os

__version__ = "0.1.0"

# MFG_THREADS caps BLAS/OpenMP threads; it must be applied before numpy loads.
_threads = _os.environ.get("MFG_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .errors import (ConvergenceError, DivergenceError, InputError, IntegrationError,  # noqa: E402
                     MFGError, ModelConfigError, SizeGuardError)
from .model import GameSpec, QuadraticModel, load_model, model_from_dict  # noqa: E402
from .mfg import MfgSolution, TimeGrid, solve_mfg  # noqa: E402
from .master import (MasterEvaluator, MasterField, SimplexGrid, build_master_field,  # noqa: E402
                     master_residual, solve_linearized)
from .nplayer import (projection_residual, solve_counts_reduced, solve_full_tensor,  # noqa: E402
                      theorem1_gap)
from .report import fit_loglog_slope  # noqa: E402

__all__ = [
    "__version__", "MFGError", "ModelConfigError", "InputError", "DivergenceError",
    "IntegrationError", "ConvergenceError", "SizeGuardError", "GameSpec", "QuadraticModel",
    "load_model", "model_from_dict", "TimeGrid", "MfgSolution", "solve_mfg", "SimplexGrid",
    "MasterField", "MasterEvaluator", "build_master_field", "master_residual",
    "solve_linearized", "solve_full_tensor", "solve_counts_reduced", "theorem1_gap",
    "projection_residual", "fit_loglog_slope",
]
