use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    /// A forward or loss evaluation produced NaN or infinity.
    #[error("non-finite value produced by layer `{layer}`")]
    NonFinite { layer: String },

    /// The input has zero standard deviation, so a perturbation scaled to it is undefined.
    #[error("degenerate input: standard deviation is zero")]
    DegenerateInput,

    #[error("zero denominator: perturbed and clean inputs are identical")]
    ZeroPerturbation,

    /// Rank correlation with a constant argument.
    #[error("rank correlation undefined: zero rank variance in `{0}`")]
    ZeroRankVariance(&'static str),

    #[error("no referral fraction reaches mae limit {limit}; minimum achievable mean MAE is {min_mae}")]
    Infeasible { limit: f64, min_mae: f64 },

    #[error("model mismatch: {0}")]
    ModelMismatch(String),
}
