//! Shared transaction and epoch data model.
//!
//! Everything downstream (simulator exports, both estimation stages,
//! diagnostics) works on [`TxRecord`] and [`EpochState`].

mod cpfp;
mod epochs;
mod rank;
mod types;
mod weights;

pub use cpfp::collapse_cpfp;
pub use epochs::{assign_epochs, EpochAssignment, EpochConfig};
pub use rank::{rank_within_epochs, tie_aware_numerators, tie_aware_percentile, RankedTx};
pub use types::{EpochState, FeeRate, Snapshot, TxRecord, TxState, WeightSource, DEFAULT_EPS_RESP};
pub use weights::{correct_weights, CorrectionReport, ExternalWeight};
