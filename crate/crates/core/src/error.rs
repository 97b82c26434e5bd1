use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty ranking set")]
    EmptyRanking,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid record {tx_id}: {reason}")]
    InvalidRecord { tx_id: String, reason: String },

    #[error("cycle in CPFP parent links involving {0}")]
    CpfpCycle(String),

    #[error("link references unknown transaction {0}")]
    UnknownTx(String),

    #[error("index {index} out of range 1..={n}")]
    OutOfRange { index: usize, n: usize },

    #[error("negative {what} sample {value} at q = {at}")]
    NegativeIntegrand { what: &'static str, value: f64, at: f64 },

    #[error("single-crossing check requires equilibrium mode")]
    NotEquilibrium,

    #[error("fee policy has no fee for agent {0}")]
    MissingFee(u64),

    #[error("need at least {needed} epochs, found {found}")]
    NotEnoughEpochs { needed: usize, found: usize },

    #[error("cross-fitting with {folds} folds needs at least {folds} epochs, found {found}")]
    TooFewEpochsForFolds { folds: usize, found: usize },

    #[error("not enough rows: need {needed}, found {found}")]
    NotEnoughRows { needed: usize, found: usize },

    #[error("slope window collapsed after clipping at p = {0}")]
    DegenerateSlopeWindow(f64),

    #[error("epoch {0} has no state")]
    MissingEpochState(usize),

    #[error("epoch {0} has no out-of-fold forest")]
    MissingForest(usize),

    #[error("rank-deficient design; collinear columns: {}", .0.join(", "))]
    RankDeficient(Vec<String>),

    #[error("missing regressor {0}")]
    MissingRegressor(String),

    #[error("duplicate knot {0}")]
    DuplicateKnot(f64),

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("no epoch state available")]
    NoEpochState,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("too many malformed lines in {file}: {bad} of {total}")]
    TooManyErrors { file: String, bad: usize, total: usize },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Machine-readable category used for CLI exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Stage { source, .. } => source.category(),
            Error::InvalidConfig(_) | Error::NotEnoughEpochs { .. } | Error::TooFewEpochsForFolds { .. } => "config",
            Error::Parse { .. }
            | Error::TooManyErrors { .. }
            | Error::NoEpochState
            | Error::InvalidRecord { .. }
            | Error::CpfpCycle(_)
            | Error::UnknownTx(_)
            | Error::Json(_)
            | Error::Csv(_) => "input",
            Error::Io(_) => "io",
            _ => "estimation",
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage { stage, source: Box::new(self) }
    }
}
