"""Transported stochastic mediation effects with missing-mediator
sensitivity analysis.

The pipeline: simulate or load observational data from two environments,
fit nuisance models, target the stochastic direct/indirect effect estimates
(TMLE), and bound how far mediator missingness can move the transported
indirect effect, parameterized by an r2 residual-variation budget.
"""

__version__ = "1.0.0"

from .dgp import (Mechanism, MissingnessSpec, ObservationTable, OracleEffects,
                  StructuralParams, apply_missingness, generate,
                  oracle_effects)
from .errors import (BootstrapError, CalibrationError, ConfigurationError,
                     DataValidationError, DegenerateDensityError,
                     EstimationError, MedtransportError, PositivityError,
                     SchemaError, SeparationError, SingularDesignError,
                     StratumError, TargetingError)
from .nuisance import NuisanceFit, fit_nuisances
from .sensitivity import (CurveRow, NullCrossing, SensitivityAnalysis,
                          SensitivityConfig, SensitivityCurve, WeightFamily,
                          bounded_sie, ci_alpha, empirical_r2,
                          sensitivity_bounds, sweep)
from .tmle import (EffectEstimate, PsiEstimate, estimate_psi, estimate_sde,
                   estimate_sie)

__all__ = [
    "__version__",
    "Mechanism", "MissingnessSpec", "ObservationTable", "OracleEffects",
    "StructuralParams", "apply_missingness", "generate", "oracle_effects",
    "BootstrapError", "CalibrationError", "ConfigurationError",
    "DataValidationError", "DegenerateDensityError", "EstimationError",
    "MedtransportError", "PositivityError", "SchemaError", "SeparationError",
    "SingularDesignError", "StratumError", "TargetingError",
    "NuisanceFit", "fit_nuisances",
    "CurveRow", "NullCrossing", "SensitivityAnalysis", "SensitivityConfig",
    "SensitivityCurve", "WeightFamily", "bounded_sie", "ci_alpha",
    "empirical_r2", "sensitivity_bounds", "sweep",
    "EffectEstimate", "PsiEstimate", "estimate_psi", "estimate_sde",
    "estimate_sie",
]
