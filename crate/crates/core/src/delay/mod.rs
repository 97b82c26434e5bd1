//! Stage 1: delay technology.
//!
//! A cross-fitted random forest maps priority and mempool state to log
//! confirmation delay. Each epoch's fitted schedule is swept over a priority
//! grid, projected onto weakly decreasing sequences, and differenced to give
//! the positive delay gradient used in the fee equation.

mod crossfit;
mod forest;
mod pava;
mod schedule;

pub use crossfit::{
    assign_folds, crossfit_predict, regime_report, DelayConfig, DelayData, DelayFit, DelayMetrics, EpochRegime,
    GradientRegimeReport, ScheduleMode, DELAY_FEATURES,
};
pub use forest::{FeatureMatrix, Forest, ForestConfig, Tree};
pub use pava::{pava_decreasing, pava_increasing};
pub use schedule::{local_slope, monotone_schedule, priority_grid, MonotoneSchedule, SlopeConfig, DEFAULT_GRID};

pub(crate) use forest::mix;
