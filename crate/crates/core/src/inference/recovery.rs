//! Simulation-recovery harness: replicate datasets from the oracle at known
//! parameters, fit each, and tally credible-interval coverage.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{emit_observational, simulate_truth, ScmConfig};
use crate::rng::{child_seed, domain};
use crate::stats;

use super::layout::{ModelStructure, ParamLayout};
use super::prior::PriorSpec;
use super::sampler::{run_mcmc, McmcSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverySettings {
    pub datasets: usize,
    /// Chains, iterations and frozen coordinates for every fit. Frozen
    /// coordinates are held at the truth; listed names only.
    pub mcmc: McmcSettings,
    pub freeze: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterCoverage {
    pub name: String,
    pub truth: f64,
    pub covered: usize,
    /// Posterior mean inside its own central 95% interval.
    pub mean_inside: usize,
    pub mean_bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub datasets: usize,
    /// Datasets where every free fixed-effect interval covered the truth.
    pub all_covered: usize,
    pub per_parameter: Vec<ParameterCoverage>,
    pub max_rhat: Vec<f64>,
}

struct FitSummary {
    covered: Vec<bool>,
    inside: Vec<bool>,
    mean: Vec<f64>,
    rhat: f64,
}

pub fn recovery_study(cfg: &ScmConfig, structure: &ModelStructure, priors: &PriorSpec, settings: &RecoverySettings) -> Result<RecoveryReport> {
    cfg.validate()?;
    let layout = ParamLayout::new(structure.clone());
    let truth = layout.from_params(&cfg.params)?;
    let mut mcmc = settings.mcmc.clone();
    for name in &settings.freeze {
        let i = layout.index_of(name).ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        mcmc.frozen.insert(name.clone(), truth[i]);
    }
    mcmc.store_random_effects = false;
    let targets: Vec<usize> = (0..layout.len())
        .filter(|&i| layout.is_fixed_effect(i) && !mcmc.frozen.contains_key(&layout.names[i]))
        .collect();
    let fits: Vec<FitSummary> = (0..settings.datasets)
        .into_par_iter()
        .map(|r| {
            let seed = child_seed(settings.seed, domain::RECOVERY, r as u64);
            let truths = simulate_truth(cfg, seed)?;
            let data = emit_observational(cfg, &truths, seed)?;
            let s = McmcSettings { seed, ..mcmc.clone() };
            let draws = run_mcmc(&data, structure, priors, &s)?;
            let rhat = super::rhat::gelman_rubin(&draws).map(|r| r.max_free).unwrap_or(f64::NAN);
            let mut covered = Vec::new();
            let mut inside = Vec::new();
            let mut mean = Vec::new();
            for &i in &targets {
                let v: Vec<f64> = draws.flat().map(|t| t[i]).collect();
                let sm = stats::summarize(&v);
                covered.push(sm.q025 <= truth[i] && truth[i] <= sm.q975);
                inside.push(sm.q025 <= sm.mean && sm.mean <= sm.q975);
                mean.push(sm.mean);
            }
            Ok(FitSummary { covered, inside, mean, rhat })
        })
        .collect::<Result<_>>()?;
    let per_parameter = targets
        .iter()
        .enumerate()
        .map(|(k, &i)| ParameterCoverage {
            name: layout.names[i].clone(),
            truth: truth[i],
            covered: fits.iter().filter(|f| f.covered[k]).count(),
            mean_inside: fits.iter().filter(|f| f.inside[k]).count(),
            mean_bias: stats::mean(&fits.iter().map(|f| f.mean[k] - truth[i]).collect::<Vec<_>>()),
        })
        .collect();
    Ok(RecoveryReport {
        datasets: settings.datasets,
        all_covered: fits.iter().filter(|f| f.covered.iter().all(|c| *c)).count(),
        per_parameter,
        max_rhat: fits.iter().map(|f| f.rhat).collect(),
    })
}
