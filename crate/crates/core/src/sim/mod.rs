//! Priority-queue simulator and VCG pricing oracles.
//!
//! Agents arrive as a Poisson stream, bid fee rates, and are mined greedily
//! by fee rate into weight-limited blocks arriving at Poisson times. In
//! equilibrium mode fees follow the VCG schedule implied by a planned
//! (pilot-estimated) delay schedule. A separate structural generator draws
//! fees straight from the log decomposition with a known delay technology.

mod config;
mod queue;
mod structural;
mod vcg;

pub use config::{AgentSpec, Dist, FeePolicy, SimConfig};
pub use queue::{
    check_single_crossing, greedy_violations, simulate_queue, single_crossing_pairs, BlockRecord, PlannedSchedule,
    SimAgent, SimDataset, SimMode, SingleCrossingReport,
};
pub use structural::{generate_structural, StructuralConfig, StructuralDataset, StructuralTruth};
pub use vcg::{
    compute_vcg_schedule, foc_residuals, position_delays, vcg_payment_bruteforce, vcg_payment_discrete,
    StaticInstance, VcgSchedule,
};

#[cfg(test)]
mod tests;
