//! Split-chain potential scale reduction.

use serde::{Deserialize, Serialize};

use super::confounder_fit::ConfounderDraws;
use super::sampler::PosteriorDraws;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhatFlag {
    /// Every draw is identical; reported as 1.
    ZeroVariance,
    /// Chains are constant but differ; reported as infinity.
    ConstantChainsDisagree,
    /// All chains are the same sequence.
    DuplicateChains,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhatEntry {
    pub name: String,
    pub rhat: f64,
    pub ess: f64,
    pub free: bool,
    pub flag: Option<RhatFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhatReport {
    pub entries: Vec<RhatEntry>,
    /// Largest R-hat over free parameters.
    pub max_free: f64,
}

impl RhatReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_free <= threshold
    }
}

/// R-hat of one scalar from equal-length chains.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<(f64, Option<RhatFlag>)> {
    if chains.len() < 2 {
        return Err(Error::invalid("R-hat needs at least two chains"));
    }
    let n = chains[0].len();
    if n < 10 || chains.iter().any(|c| c.len() != n) {
        return Err(Error::invalid("R-hat needs equal chains of at least 10 draws"));
    }
    let half = n / 2;
    let mut pieces: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        pieces.push(&c[..half]);
        pieces.push(&c[n - half..]);
    }
    let m = pieces.len() as f64;
    let len = half as f64;
    let means: Vec<f64> = pieces.iter().map(|p| crate::stats::mean(p)).collect();
    let w = pieces.iter().map(|p| crate::stats::variance(p)).sum::<f64>() / m;
    let b = len * crate::stats::variance(&means);
    let duplicate = chains.iter().all(|c| c == &chains[0]);
    if w == 0.0 {
        return Ok(if b == 0.0 {
            (1.0, Some(RhatFlag::ZeroVariance))
        } else {
            (f64::INFINITY, Some(RhatFlag::ConstantChainsDisagree))
        });
    }
    let var_plus = (len - 1.0) / len * w + b / len;
    let r = (var_plus / w).sqrt();
    Ok((r, duplicate.then_some(RhatFlag::DuplicateChains)))
}

/// Effective sample size over all chains, from autocorrelations averaged
/// across chains and truncated at the first negative pair sum.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.first().map_or(0, |c| c.len());
    if m == 0 || n < 4 {
        return 0.0;
    }
    let means: Vec<f64> = chains.iter().map(|c| crate::stats::mean(c)).collect();
    let vars: Vec<f64> = chains.iter().map(|c| crate::stats::variance(c)).collect();
    let w = crate::stats::mean(&vars);
    let b_over_n = if m > 1 { crate::stats::variance(&means) } else { 0.0 };
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b_over_n;
    if !(var_plus > 0.0) {
        return (m * n) as f64;
    }
    let autocov = |lag: usize| -> f64 {
        chains
            .iter()
            .zip(&means)
            .map(|(c, mu)| (0..n - lag).map(|t| (c[t] - mu) * (c[t + lag] - mu)).sum::<f64>() / n as f64)
            .sum::<f64>()
            / m as f64
    };
    let rho = |lag: usize| 1.0 - (w - autocov(lag)) / var_plus;
    let mut tau = -1.0;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = rho(lag) + rho(lag + 1);
        if pair < 0.0 {
            break;
        }
        tau += 2.0 * pair;
        lag += 2;
    }
    (m * n) as f64 / tau.max(1.0 / (m * n) as f64)
}

/// Per-parameter R-hat over the flat parameter vector.
pub fn gelman_rubin(draws: &PosteriorDraws) -> Result<RhatReport> {
    let mut entries = Vec::with_capacity(draws.names.len());
    let mut max_free = 1.0f64;
    for (i, name) in draws.names.iter().enumerate() {
        let chains: Vec<Vec<f64>> = draws.chains.iter().map(|c| c.theta.iter().map(|t| t[i]).collect()).collect();
        let (rhat, flag) = split_rhat(&chains)?;
        let free = draws.free[i];
        if free {
            max_free = max_free.max(rhat);
        }
        entries.push(RhatEntry {
            name: name.clone(),
            rhat,
            ess: effective_sample_size(&chains),
            free,
            flag,
        });
    }
    Ok(RhatReport { entries, max_free })
}

/// The same report for the confounder-model chains; every coordinate is free.
pub fn confounder_rhat(draws: &ConfounderDraws) -> Result<RhatReport> {
    let mut entries = Vec::with_capacity(draws.names.len());
    let mut max_free = 1.0f64;
    for (i, name) in draws.names.iter().enumerate() {
        let chains: Vec<Vec<f64>> = draws.chains.iter().map(|c| c.iter().map(|t| t[i]).collect()).collect();
        let (rhat, flag) = split_rhat(&chains)?;
        max_free = max_free.max(rhat);
        entries.push(RhatEntry {
            name: name.clone(),
            rhat,
            ess: effective_sample_size(&chains),
            free: true,
            flag,
        });
    }
    Ok(RhatReport { entries, max_free })
}
