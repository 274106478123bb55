use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("step range {from}..{to} out of bounds for a grid with {n_steps} steps")]
    StepRange {
        from: usize,
        to: usize,
        n_steps: usize,
    },

    #[error("point is not on the boundary: psi = {psi:e}, tolerance = {tol:e}")]
    NotOnBoundary { psi: f64, tol: f64 },

    #[error("starting point lies outside the closed domain (psi = {psi:e})")]
    StartOutsideDomain { psi: f64 },

    #[error("start time {0} is not a node of the time grid")]
    StartNotOnGrid(f64),

    #[error("regression at step {step} is rank deficient (condition number {condition:e})")]
    RankDeficient { step: usize, condition: f64 },

    #[error("penalty too stiff for the explicit scheme: n*dt = {n_dt} exceeds cap {cap}")]
    StiffPenalty { n_dt: f64, cap: f64 },

    #[error("an obstacle is required for this operation")]
    MissingObstacle,

    #[error("the noise coefficient depends on z; use the Picard fixpoint solver")]
    NoiseDependsOnZ,

    #[error("comparison requires both coefficient sets to share the same noise coefficient")]
    DifferentNoise,

    #[error("comparison is only defined without an obstacle")]
    ObstacleNotAllowed,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(
        "flow derivative D_y eta = {0:e} is not positive; the flow is not a diffeomorphism here"
    )]
    NonMonotoneFlow(f64),

    #[error("value {value} outside the tabulated range [{lo}, {hi}] ({what})")]
    OutsideTable {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("{context}: {source}")]
    At {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Wraps the error with a location description, e.g. the field point being solved.
    pub fn at(self, context: impl Into<String>) -> Self {
        Error::At {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True for failures caused by invalid inputs rather than numerics.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::RankDeficient { .. }
            | Error::NonMonotoneFlow(_)
            | Error::OutsideTable { .. } => false,
            Error::At { source, .. } => source.is_validation(),
            _ => true,
        }
    }
}
