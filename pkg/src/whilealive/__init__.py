"""While-alive loss-rate regression for weighted recurrent and terminal events.

Time-varying covariate effects on the ratio of expected weighted events to
restricted mean survival are estimated from stacked inverse-probability-of-
censoring weighted estimating equations over a grid of horizons.
"""

__version__ = "0.1.0"

from .basis import BasisConfig, evaluate_basis
from .censoring import CensoringModel, fit_cox_censoring, fit_km_censoring, ipcw_weights
from .crossval import CvGrid, CvResult, select
from .data import EventDataset, EventRecord, WeightScheme, ingest_long, read_csv, write_csv
from .estimator import CensoringSpec, FitResult, FitSpec, LinkFunction, fit_landmark, solve
from .inference import averaged_effect, effect_curve, global_wald, pointwise_ci, predict_rate

__all__ = [
    "BasisConfig",
    "CensoringModel",
    "CensoringSpec",
    "CvGrid",
    "CvResult",
    "EventDataset",
    "EventRecord",
    "FitResult",
    "FitSpec",
    "LinkFunction",
    "WeightScheme",
    "averaged_effect",
    "effect_curve",
    "evaluate_basis",
    "fit_cox_censoring",
    "fit_km_censoring",
    "fit_landmark",
    "global_wald",
    "ingest_long",
    "ipcw_weights",
    "pointwise_ci",
    "predict_rate",
    "read_csv",
    "select",
    "solve",
    "write_csv",
]
