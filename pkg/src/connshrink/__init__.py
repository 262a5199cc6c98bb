"""Functional-connectivity estimation, empirical Bayes shrinkage and reliability."""

__version__ = "0.1.0"

from .connectivity import (
    ConnectivityMatrix,
    EdgeIndex,
    PearsonConnectivity,
    devectorize,
    group_mean,
    pearson_matrix,
    vectorize,
)
from .reliability import (
    Kind,
    Method,
    ReliabilityRecord,
    ReliabilitySummary,
    ape,
    endpoint_records,
    intersession_records,
    percent_change,
    summarize,
)
from .shrinkage import (
    ComponentMethod,
    OracleShrinkage,
    ShrinkageWeights,
    SingleSessionShrinkage,
    VarianceComponents,
    apply_shrinkage,
    compute_lambda,
    estimate_oracle_components,
    estimate_single_session_components,
)
from .simulator import (
    GenerativeParams,
    SyntheticCohort,
    ground_truth_lambda,
    simulate_parameter_level,
    simulate_timeseries_level,
)
from .timeseries import (
    DualRegression,
    ScanManifest,
    SpatialMaps,
    SubsampleScheme,
    TimeSeriesMatrix,
    dual_regression_stage1,
    load_manifest,
    load_timeseries,
    save_timeseries,
    subsample,
    truncate,
)

__all__ = [name for name in dir() if not name.startswith("_")]
