"""Fixed-effects GMM for panels with individual-specific coefficients.

Estimation (:func:`fit`), analytic incidental-parameter bias corrections
(:func:`correct`), bias-corrected functionals of the individual effects
(:func:`estimate_functional`) and a Monte Carlo harness for a dynamic
random-coefficient demand design (:mod:`panel_fegmm.montecarlo`).
"""

__version__ = "0.1.0"

from .bias import correct, correct_bc, correct_ibc, correct_sbc, make_estimator
from .errors import (ConvergenceError, DataError, FEGMMError, NumericError, ParseError, SchemaError,
                     UnderIdentifiedError, WeakIdentificationError, WeightingError)
from .functionals import (ZetaFunctional, builtin_mean_effect, builtin_sd_effect, estimate_functional,
                          estimate_mu, estimate_sd, estimate_zeta, register)
from .gmm import FitReport, fit, solve_common, solve_individual, two_step
from .kernels import BACKEND
from .moments import (LinearRCIV, ModelDims, MomentModel, VarianceComponents, check_derivatives,
                      finite_difference_suite, linear_rc_iv, variance_components)
from .panel import CsvSchema, IndividualBlock, PanelDataset, load_csv, write_csv
from .weighting import WeightMatrix, optimal_weight

__all__ = [
    "BACKEND", "ConvergenceError", "CsvSchema", "DataError", "FEGMMError", "FitReport", "IndividualBlock",
    "LinearRCIV", "ModelDims", "MomentModel", "NumericError", "PanelDataset", "ParseError", "SchemaError",
    "UnderIdentifiedError", "VarianceComponents", "WeakIdentificationError", "WeightMatrix", "WeightingError",
    "ZetaFunctional", "builtin_mean_effect", "builtin_sd_effect", "check_derivatives", "correct",
    "correct_bc", "correct_ibc", "correct_sbc", "estimate_functional", "estimate_mu", "estimate_sd",
    "estimate_zeta", "finite_difference_suite", "fit", "linear_rc_iv", "load_csv", "make_estimator",
    "optimal_weight", "register", "solve_common", "solve_individual", "two_step", "variance_components",
    "write_csv",
]
