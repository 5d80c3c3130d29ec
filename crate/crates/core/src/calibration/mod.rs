//! Calibration metrics, reliability/confidence reports, and post-hoc calibrators.

mod metrics;
mod scaling;

pub use metrics::{
    accuracy, bin_index, confidence, confidence_histogram, ece, nll, nll_floor_count, reliability_report,
    BinStats, ConfidenceHistogram, HistogramBin, PredictionSet, ReliabilityReport, PROB_FLOOR, ROW_SUM_TOL,
};
pub use scaling::{
    apply_calibrator, fit_affine, fit_logistic_scaling, fit_temperature, golden_section_min, AffineCalibrator,
    AffineStructure, Calibrator, LogisticVariant, LOGISTIC_L2, LOGISTIC_STEPS, LOGISTIC_STEP_SIZE, TEMPERATURE_RANGE,
    TEMPERATURE_TOL,
};
