use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("rank deficient design; offending columns: {}", .columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("degenerate first stage: D'P_Z D = {value:e} is not positive")]
    DegenerateFirstStage { value: f64 },

    #[error("zero residual variance in {0}")]
    ZeroResidual(&'static str),

    #[error("covariance estimate is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("pre-test was not passed; the conditional law on this branch is undefined")]
    PretestNotPassed,

    #[error("pre-test was passed; use the strong-instrument (TSLS) branch")]
    PretestPassed,

    #[error("sufficient statistic S is zero")]
    ZeroS,

    #[error("log-density is not finite at the initial state ({0})")]
    NonFiniteInit(String),

    #[error("sampler accepted no proposals during burn-in for `{0}`")]
    ChainStuck(&'static str),

    #[error("conditioning event has probability {prob:e}; the data could not have produced it")]
    EmptyTruncation { prob: f64 },

    #[error("quadrature did not converge: Richardson estimate {estimate:e} > tol {tol:e}")]
    QuadratureNonConvergence { estimate: f64, tol: f64 },

    #[error("confidence-interval grid exhausted at |beta| >= {limit:e}")]
    GridExhausted { limit: f64 },

    #[error("lasso selected no instruments")]
    EmptySupport,

    #[error("coordinate descent did not converge after {sweeps} sweeps (gap {gap:e})")]
    NonConvergence { sweeps: usize, gap: f64 },

    #[error("only {got} replications on the requested branch (need {need})")]
    InsufficientBranch { got: usize, need: usize },

    #[error("rejection oracle retained {retained} of {tried} draws (rate {rate:e}); need {need}")]
    RetentionTooLow {
        retained: usize,
        tried: usize,
        rate: f64,
        need: usize,
    },

    #[error("parse error at row {row}, column \"{column}\": {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("missing column \"{0}\"")]
    MissingColumn(String),

    #[error("missing value at row {row}, column \"{column}\"")]
    MissingValue { row: usize, column: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
