//! Bayesian estimation of the joint model.

pub mod confounder_fit;
pub mod layout;
pub mod likelihood;
pub mod posterior;
pub mod recovery;
pub mod prior;
pub mod rhat;
pub mod sampler;

pub use confounder_fit::{run_confounder_mcmc, ConfounderDraws};
pub use layout::{ModelStructure, ParamLayout, LAYOUT_VERSION};
pub use likelihood::{log_posterior, subject_loglik};
pub use posterior::{
    check_monotonicity, pointwise_loglik, posterior_bounds, posterior_effects, posterior_effects_multi, MonotonicityReport, PosteriorBounds,
    PosteriorEffects, PosteriorEffectsSettings,
};
pub use prior::PriorSpec;
pub use recovery::{recovery_study, RecoveryReport, RecoverySettings};
pub use rhat::{confounder_rhat, effective_sample_size, gelman_rubin, split_rhat, RhatEntry, RhatFlag, RhatReport};
pub use sampler::{run_mcmc, Chain, McmcSettings, PosteriorDraws};
