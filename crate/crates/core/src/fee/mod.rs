//! Stage 2: the log-fee equation.
//!
//! Log fee rates are regressed on the log delay gradient, transaction
//! controls and mempool state with epoch fixed effects absorbed by
//! within-epoch demeaning. An optional impatience term enters through a
//! monotone I-spline with non-negative coefficients. Inference clusters on
//! epochs; level predictions use a smearing retransformation.

mod bootstrap;
mod inference;
mod ispline;
mod linalg;
mod model;
mod nnls;
mod predict;

pub use bootstrap::{epoch_bootstrap, resample_epochs, BootstrapResult, EpochDraw};
pub use inference::{cluster_covariance, hc1_covariance, t_critical, t_test};
pub use ispline::{ispline_basis, ISplineBasis};
pub use linalg::{collinear_columns, demean_by_group, group_means, ols};
pub use model::{
    fit_fee_model, spline_term_name, Column, FeeData, FeeFit, FeeSpec, FittedSpline, SplineSpec, Term, TermKind,
    MISSING_IMPATIENCE_TERM, STRUCTURAL_TERM,
};
pub use nnls::nnls_gram;
pub use predict::{aggregate_spline_effect, counterfactual, linear_predictor, smearing_predict, spline_effect_between};

#[cfg(test)]
use crate::error::Error;
