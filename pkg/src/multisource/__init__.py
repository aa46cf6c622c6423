"""Estimation from merged datasets with overlapping sources and
unidentified duplicated records: duplication-corrected weighted empirical
measures, optimal duplication weights, calibration, model fitting
(linear / logistic / Cox) with design-based variance estimation, and a
reproducible Monte Carlo harness.
"""
from .calibration import (
    AFFINE,
    EXP_BOUNDED,
    LOGISTIC_SHIFTED,
    SAMPLE_SPECIFIC,
    SOURCE_SPECIFIC,
    STANDARD,
    CalibratedMeasure,
    CalibrationError,
    GFunction,
    calibrate,
    variance_calibrated,
)
from .estimators import (
    COX,
    LINEAR,
    LOGISTIC,
    CoxEstimator,
    FitError,
    LinearEstimator,
    LogisticEstimator,
    breslow_cumhaz,
    check_score_gradient,
    fit_cox,
    fit_linear,
    fit_logistic,
)
from .hmeasure import (
    HMeasure,
    VarianceDecomposition,
    estimate_N,
    h_mean,
    h_mean_ratio,
    variance_bernoulli,
    variance_stratified,
    variance_unknown_N,
    variance_wor,
)
from .model import (
    FitResult,
    MergedSample,
    SourceLayout,
    WeightScheme,
    mask_bits,
    validate_sample,
)
from .rho import (
    BALANCED,
    OPT_BERNOULLI,
    OPT_WOR,
    SINGLE_FRAME,
    RhoRecipe,
    balanced_rho,
    build_scheme,
    od,
    optimal_rho_bernoulli,
    optimal_rho_wor,
    single_frame_rho,
)
from .sampling import (
    BERNOULLI,
    STRATIFIED_WOR,
    WOR,
    DesignSpec,
    draw_population,
    draw_selections,
    enumerate_selections,
    enumeration_count,
    substream,
)
from .simulate import (
    PRESETS,
    MCSummary,
    Scenario,
    censoring_scale,
    compare_weights,
    get_scenario,
    qq_data,
    run_scenario,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "1.0.0"
