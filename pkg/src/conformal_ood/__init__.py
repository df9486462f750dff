"""Conformal multiple testing for out-of-distribution detection.

Combine K score functions through conformal p-values and a corrected
Benjamini-Hochberg step-up test, with a conditional false-alarm guarantee
that holds once the calibration set is large enough.
"""

from .conformal import CalibrationSet, NormalCDF, conformal_p_value, conformal_p_values, oracle_p_value
from .errors import (
    CalibrationError,
    CapacityError,
    ChecksumError,
    ConfigurationError,
    ConformalOODError,
    DomainError,
    FittingError,
    ParseError,
    SchemaVersionError,
    ValidationError,
)
from .evaluation import auroc, empirical_fwer, power_at_false_alarm
from .multiple_testing import (
    CalSizeRequest,
    DetectionResult,
    DetectorConfig,
    Method,
    bh_detect,
    bonferroni_detect,
    calibrate_naive_thresholds,
    correction_constant,
    naive_average_detect,
    required_cal_size,
    required_cal_size_bonferroni,
)
from .numerics import normal_sf, normal_sf_inv, reg_inc_beta
from .scores import (
    ClassStats,
    EnergyConfig,
    FeatureBundle,
    energy_score,
    fit_gram,
    fit_mahalanobis,
    gram_deviation_score,
    mahalanobis_score,
)
from .simulation import (
    MonteCarloReport,
    SyntheticModel,
    estimate_power,
    power_bound,
    simulate_test_t1,
    simulate_test_t2,
    verify_conditional_false_alarm,
)

__version__ = "0.1.0"
