use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("occupation out of range: n_a={n_a}, n_b={n_b}, n_c={n_c}")]
    OccupationOutOfRange { n_a: u8, n_b: u8, n_c: u8 },

    #[error("tunnel coupling is zero")]
    ZeroCoupling,

    #[error("steady state is not unique: nullspace dimension {dimension}")]
    DegenerateSteadyState { dimension: usize },

    #[error("no transport through the device: {0}")]
    NoTransport(String),

    #[error("step-size guard violated: dt * {scale} = {product} exceeds {limit}")]
    StepGuard { scale: f64, product: f64, limit: f64 },

    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("no steady current on lead {0}")]
    ZeroCurrent(&'static str),

    #[error("denominator integral vanishes at tau = {0}")]
    ZeroDenominator(f64),

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("event stream is not time-sorted at index {0}")]
    UnsortedStream(usize),

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
