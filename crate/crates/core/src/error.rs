use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("linear system is singular or failed to solve: {0}")]
    Singular(String),

    #[error("gain is unstable: {0}")]
    UnstableGain(String),

    #[error("no stabilizing initial gain found")]
    NoStabilizingGain,

    /// The policy row at `state` is too close to a vertex of the simplex for
    /// its Jacobian to be inverted on the tangent space.
    #[error("ill-conditioned policy Jacobian at state {state} (min probability {min_prob:e})")]
    IllConditioned { state: usize, min_prob: f64 },

    /// A sampled inventory path touched a kink of the piecewise-linear cost.
    #[error("pathwise derivative undefined: kink hit at period {period}")]
    KinkHit { period: usize },

    #[error("kink rate too high: {kinks} kinks in {draws} draws")]
    ExcessiveKinkRate { kinks: usize, draws: usize },

    #[error("line search failed after {halvings} halvings (last step {last_step:e})")]
    LineSearch { halvings: usize, last_step: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("search bracket exhausted at upper end {upper}")]
    BracketExhausted { upper: f64 },

    #[error("parameters are not near-stationary (gradient norm {grad_norm:e} > {tol:e})")]
    NotStationary { grad_norm: f64, tol: f64 },

    #[error("zero-probability action {action} taken at state {state}")]
    ZeroProbabilityAction { state: usize, action: usize },
}
