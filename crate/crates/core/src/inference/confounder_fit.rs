//! Separate Bayesian fit of the multinomial-logit confounder model.
//!
//! Each iteration is an independence step from a multivariate t centred at
//! the posterior mode followed by a random-walk step; both proposals are
//! shaped by the inverse negative Hessian at the mode, and the random-walk
//! scale adapts during burn-in.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::confounder::{ConfounderParams, ConfounderRecord, PatternCounts};
use crate::error::{Error, Result};
use crate::rng::{domain, substream};

use super::prior::PriorSpec;
use super::sampler::McmcSettings;

const TARGET_ACCEPT: f64 = 0.30;
const MIN_ACCEPT: f64 = 0.01;
const MAX_NEWTON: usize = 100;
/// Degrees of freedom and inflation of the independence proposal.
const T_DOF: f64 = 4.0;
const T_INFLATE: f64 = 1.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfounderDraws {
    pub w_dim: usize,
    pub names: Vec<String>,
    /// Retained draws in the [`ConfounderParams::flat`] layout, per chain.
    pub chains: Vec<Vec<Vec<f64>>>,
    pub acceptance: Vec<f64>,
    pub seed: u64,
    pub warnings: Vec<String>,
}

impl ConfounderDraws {
    pub fn draws_per_chain(&self) -> usize {
        self.chains.first().map_or(0, Vec::len)
    }

    /// Draw `t` of chain `c`, both taken modulo the available counts.
    pub fn params_at(&self, c: usize, t: usize) -> ConfounderParams {
        let chain = &self.chains[c % self.chains.len()];
        ConfounderParams::from_flat(&chain[t % chain.len()], self.w_dim)
    }

    pub fn flat(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.chains.iter().flat_map(|c| c.iter())
    }
}

pub fn confounder_names(w_dim: usize) -> Vec<String> {
    let mut names = Vec::new();
    for c in 1..=2 {
        names.push(format!("phi0[{c}]"));
        names.push(format!("phi1[{c}]"));
        names.extend((0..w_dim).map(|k| format!("phi2[{c}][{k}]")));
    }
    names
}

/// Log posterior with gradient and Hessian.
fn objective(counts: &PatternCounts, priors: &PriorSpec, theta: &[f64], derivs: bool) -> (f64, DVector<f64>, DMatrix<f64>) {
    let (mut f, mut g, mut h) = counts.loglik(theta, derivs);
    let s2 = priors.regression_sd * priors.regression_sd;
    for (i, v) in theta.iter().enumerate() {
        f += priors.normal_logpdf(*v);
        if derivs {
            g[i] -= v / s2;
            h[(i, i)] -= 1.0 / s2;
        }
    }
    (f, g, h)
}

fn posterior_mode(counts: &PatternCounts, priors: &PriorSpec, d: usize) -> (Vec<f64>, DMatrix<f64>) {
    let mut theta = vec![0.0; d];
    for _ in 0..MAX_NEWTON {
        let (f0, g, h) = objective(counts, priors, &theta, true);
        if g.amax() < 1e-10 {
            break;
        }
        // the prior makes −H positive definite
        let Some(ch) = (-h).cholesky() else { break };
        let step = ch.solve(&g);
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            if objective(counts, priors, &cand, false).0 >= f0 || t < 1e-12 {
                theta = cand;
                break;
            }
            t *= 0.5;
        }
    }
    let (_, _, h) = objective(counts, priors, &theta, true);
    (theta, -h)
}

/// Posterior draws of the confounder model, deterministic given the seed.
pub fn run_confounder_mcmc(records: &[ConfounderRecord], w_dim: usize, priors: &PriorSpec, settings: &McmcSettings) -> Result<ConfounderDraws> {
    priors.validate()?;
    if settings.chains == 0 || settings.samples == 0 || settings.thin == 0 {
        return Err(Error::invalid("chains, samples and thin must be positive"));
    }
    if records.iter().any(|r| r.w.len() != w_dim) {
        return Err(Error::invalid("confounder record covariate dimension differs from the model"));
    }
    let counts = PatternCounts::new(records)?;
    let d = 2 * (2 + w_dim);
    let (mode, neg_h) = posterior_mode(&counts, priors, d);
    let post_chol = neg_h
        .try_inverse()
        .and_then(|c| c.cholesky())
        .ok_or_else(|| Error::invalid("confounder posterior curvature is singular"))?
        .l();
    let base = &post_chol * (2.38 / (d as f64).sqrt());
    let post_chol_inv = post_chol
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::invalid("confounder posterior curvature is singular"))?;
    // log density of the t proposal up to a constant
    let log_q = |theta: &[f64]| -> f64 {
        let diff = DVector::from_iterator(d, theta.iter().zip(&mode).map(|(a, m)| a - m));
        let r2 = (&post_chol_inv * diff).norm_squared() / (T_INFLATE * T_INFLATE);
        -0.5 * (T_DOF + d as f64) * (1.0 + r2 / T_DOF).ln()
    };
    let chi2 = ChiSquared::new(T_DOF).expect("positive degrees of freedom");
    let runs: Vec<(Vec<Vec<f64>>, f64)> = (0..settings.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = substream(settings.seed, domain::CONFOUNDER_CHAIN, c as u64);
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let start = &post_chol * z * 2.0;
            let mut theta: Vec<f64> = mode.iter().zip(start.iter()).map(|(m, s)| m + s).collect();
            let mut lp = objective(&counts, priors, &theta, false).0;
            let mut log_scale = 0.0f64;
            let (mut tries, mut accepts) = (0.0, 0.0);
            let mut kept = Vec::with_capacity(settings.samples);
            for t in 0..settings.burn_in + settings.samples * settings.thin {
                let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                let w: f64 = rng.sample(chi2);
                let step = &post_chol * z * (T_INFLATE / (w / T_DOF).sqrt());
                let cand: Vec<f64> = mode.iter().zip(step.iter()).map(|(m, s)| m + s).collect();
                let lp_c = objective(&counts, priors, &cand, false).0;
                if lp_c.is_finite() && rng.random::<f64>().ln() < lp_c - lp + log_q(&theta) - log_q(&cand) {
                    theta = cand;
                    lp = lp_c;
                }
                let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                let step = &base * z * log_scale.exp();
                let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, s)| a + s).collect();
                let lp_c = objective(&counts, priors, &cand, false).0;
                let prob = if lp_c.is_finite() { (lp_c - lp).min(0.0).exp() } else { 0.0 };
                let accept = rng.random::<f64>() < prob;
                if accept {
                    theta = cand;
                    lp = lp_c;
                }
                if t < settings.burn_in {
                    log_scale += (t as f64 + 1.0).powf(-0.6) * (prob - TARGET_ACCEPT);
                } else {
                    tries += 1.0;
                    accepts += accept as u8 as f64;
                    let k = t - settings.burn_in;
                    if (k + 1) % settings.thin == 0 {
                        kept.push(theta.clone());
                    }
                }
            }
            (kept, accepts / tries)
        })
        .collect();
    let mut warnings = Vec::new();
    for (c, (_, rate)) in runs.iter().enumerate() {
        if *rate < MIN_ACCEPT {
            warnings.push(format!("adaptation_failure: confounder chain {c} acceptance {rate:.4}"));
        }
    }
    Ok(ConfounderDraws {
        w_dim,
        names: confounder_names(w_dim),
        acceptance: runs.iter().map(|r| r.1).collect(),
        chains: runs.into_iter().map(|r| r.0).collect(),
        seed: settings.seed,
        warnings,
    })
}
