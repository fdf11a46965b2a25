//! Maximum-likelihood fitting of conjugate generalized linear mixed models.
//!
//! Each group's random effect carries the conjugate distribution of its
//! exponential family, so the marginal likelihood is available in closed form
//! as a ratio of conjugate normalizers. Unit-level covariates are admitted
//! through affine modifications of the canonical parameter that keep the
//! integrand conjugate (Gaussian, Poisson, Gamma); the binomial family admits
//! none and is restricted to group-level covariates.
//!
//! The [`oracle`] module integrates the random effect out numerically and is
//! independent of the closed-form path, so every likelihood value can be
//! cross-checked.

pub mod conjugacy;
pub mod error;
pub mod estimation;
pub mod families;
pub mod likelihood;
pub mod model;
pub mod oracle;
pub mod simulate;
mod special;

pub use conjugacy::{CovariateTransform, Predictor, SolutionSet, SolutionValues};
pub use error::{Error, Result};
pub use estimation::{fit, FitOptions, FitResult};
pub use families::{ConjugatePrior, Family, FamilyKernel};
pub use likelihood::{group_loglik, group_stats, total_loglik, unit_loglik, GroupStats};
pub use model::{BoundModel, Group, GroupedDataset, ModelSpec, ParamLayout};
pub use oracle::QuadratureConfig;
pub use simulate::{random_plan, simulate, CovariateGenerator, GroupSizes, SimulationPlan, Simulated};
