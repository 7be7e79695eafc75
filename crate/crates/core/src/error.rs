use thiserror::Error;

/// Errors raised by the measure, kernel, integration and metric routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("particle {index} at {position} lies outside the domain [{left}, {right}]")]
    OutsideDomain {
        index: usize,
        position: f64,
        left: f64,
        right: f64,
    },

    #[error("density is negative ({value}) at x = {x}")]
    NegativeDensity { x: f64, value: f64 },

    #[error("weight of particle {index} became non-positive ({weight}) at t = {time}; reduce the time step")]
    NonPositiveWeight { time: f64, index: usize, weight: f64 },

    #[error("naive evaluation needs {cost} kernel calls, above the limit of {limit}")]
    TooExpensive { cost: f64, limit: f64 },

    #[error("source kernel {0} is not supported by this routine")]
    UnsupportedSource(String),

    #[error("time step {dt} times source bound {bound} is {product}, above the allowed {limit}")]
    StepTooLarge {
        dt: f64,
        bound: f64,
        product: f64,
        limit: f64,
    },

    #[error("cell {cell} would receive negative mass {mass} after the source half-step")]
    NegativeMass { cell: usize, mass: f64 },

    #[error("characteristic from x = {from} reaches {to}, outside [{left}, {right}]; enlarge the domain")]
    LeftDomain {
        from: f64,
        to: f64,
        left: f64,
        right: f64,
    },

    #[error("expected a probability measure: {0}")]
    NotProbability(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
