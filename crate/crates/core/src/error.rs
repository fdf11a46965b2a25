use thiserror::Error;

use crate::estimation::FitResult;
use crate::families::Family;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone)]
pub enum Error {
    #[error("{family} mean {value} lies outside the mean domain")]
    MeanDomain { family: Family, value: f64 },

    #[error("{family} canonical parameter {value} lies outside the canonical domain")]
    CanonicalDomain { family: Family, value: f64 },

    #[error("{family} response {value} lies outside the support{}", trials.map(|n| format!(" (trials = {n})")).unwrap_or_default())]
    Support {
        family: Family,
        value: f64,
        trials: Option<u32>,
    },

    #[error("{family} prior parameters chi = {chi}, nu = {nu} are not integrable")]
    PriorParameter { family: Family, chi: f64, nu: f64 },

    #[error("{family} posterior parameters chi = {chi}, nu = {nu} are not integrable")]
    DegeneratePosterior { family: Family, chi: f64, nu: f64 },

    #[error("invalid {family} kernel: {reason}")]
    Kernel { family: Family, reason: String },

    #[error(
        "the binomial family has no non-trivial solution set; \
         unit-level covariates cannot be incorporated with a closed-form likelihood"
    )]
    BinomialUnitLevel,

    #[error("transform violates its baseline constraint: {0}")]
    Baseline(String),

    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("invalid model: {0}")]
    Model(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("covariate `{column}` is not constant within group `{group}`")]
    GroupConstancy { column: String, group: String },

    #[error("gamma random-effect mean is undefined for C = {0} (requires C > 1)")]
    MeanUndefined(f64),

    #[error("non-finite value {value} for `{name}`")]
    NonFinite { name: String, value: f64 },

    #[error("quadrature failed: {0}")]
    Quadrature(String),

    #[error("invalid simulation plan: {0}")]
    Plan(String),

    #[error(
        "optimizer did not converge after {} iterations (log-likelihood {:.6}, gradient norm {:.3e})",
        best.iterations, best.loglik, best.gradient_norm
    )]
    NotConverged { best: Box<FitResult> },
}
