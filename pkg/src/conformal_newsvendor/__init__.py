"""Calibrated contextual quantile prediction for the newsvendor problem.

A quantile model trained on one part of the data is corrected with
conformity scores from a held-out calibration part, pooled either globally
or from the query's neighbourhood.
"""

from __future__ import annotations

__version__ = "0.1.0"

from ._accel import BACKEND
from .bounds import (ConfidenceInterval, GapSpec, MarginSpec, RegionModel, confidence_interval,
                     make_margin, optimal_diameter_prop1, phi, solve_tilde_delta, theorem4_z,
                     two_approx_pool_search)
from .conformal import (CalibratedModel, calibrate, conformal_quantile, coverage_bounds, cqpc_fit,
                        gtlc_select, predict_calibrated, reference_interval)
from .core import CostParams, Dataset, RngStream, SplitSpec, read_csv, split, standardize, write_csv
from .datagen import GeneratorSpec, generate, true_quantile
from .errors import (ConfigError, DataError, DegenerateTreeError, EmptyPoolError,
                     InsufficientDataError, IntervalEscapesError, NewsvendorError, NoCrossingError,
                     NumericalError)
from .estimation import algorithm3_loop, estimate_kappa, estimate_margins, fit_kappa
from .loss import PinballLoss, empirical_pinball, pinball
from .neighbors import NeighborIndex, PoolingSpec
from .regressors import (FixedLearner, GBQConfig, KNNQConfig, LinearQRConfig, fit_gbq, fit_knnq,
                         fit_linear_qr, make_learner)

__all__ = [
    "BACKEND", "CalibratedModel", "ConfidenceInterval", "ConfigError", "CostParams", "DataError",
    "Dataset", "DegenerateTreeError", "EmptyPoolError", "FixedLearner", "GBQConfig", "GapSpec",
    "GeneratorSpec", "InsufficientDataError", "IntervalEscapesError", "KNNQConfig", "LinearQRConfig",
    "MarginSpec", "NeighborIndex", "NewsvendorError", "NoCrossingError", "NumericalError",
    "PinballLoss", "PoolingSpec", "RegionModel", "RngStream", "SplitSpec", "algorithm3_loop",
    "calibrate", "confidence_interval", "conformal_quantile", "coverage_bounds", "cqpc_fit",
    "empirical_pinball", "estimate_kappa", "estimate_margins", "fit_gbq", "fit_kappa", "fit_knnq",
    "fit_linear_qr", "generate", "gtlc_select", "make_learner", "make_margin",
    "optimal_diameter_prop1", "phi", "pinball", "predict_calibrated", "read_csv",
    "reference_interval", "solve_tilde_delta", "split", "standardize", "theorem4_z",
    "true_quantile", "two_approx_pool_search", "write_csv",
]
