//! Quantities computed over posterior draws: pointwise log-likelihoods,
//! effect decompositions and the monotonicity diagnostics.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::confounder::{confounder_probs, p11_interval, MarginalPair};
use crate::data::Dataset;
use crate::effects::{self, Components, EffectBounds, EffectDecomposition, InfeasiblePolicy, McSettings, ReferenceLevels, RhoPolicy, StratumWeights};
use crate::model::ModelParams;
use crate::error::{Error, Result};
use crate::mediator::RandomEffects;
use crate::stats::{self, Summary};

use super::confounder_fit::ConfounderDraws;
use super::likelihood::subject_loglik;
use super::sampler::PosteriorDraws;

const FEASIBILITY_TOL: f64 = 1e-12;

/// `(retained draws) × (subjects)` matrix of per-subject log-likelihoods,
/// longitudinal plus survival, chains in order.
pub fn pointwise_loglik(draws: &PosteriorDraws, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let layout = draws.layout();
    let pairs: Vec<(&Vec<f64>, &Vec<[f64; 4]>)> = draws
        .chains
        .iter()
        .map(|c| {
            if c.random_effects.len() != c.theta.len() {
                return Err(Error::invalid("pointwise export needs stored random effects"));
            }
            Ok(c.theta.iter().zip(&c.random_effects))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    if pairs.iter().any(|(_, re)| re.len() != data.len()) {
        return Err(Error::invalid("stored random effects do not match the number of subjects"));
    }
    Ok(pairs
        .par_iter()
        .map(|(theta, re)| {
            let p = layout.to_params(theta);
            data.subjects
                .iter()
                .zip(re.iter())
                .map(|(s, r)| subject_loglik(&p, s, &RandomEffects { r: *r }))
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorEffectsSettings {
    pub rho_policy: RhoPolicy,
    pub infeasible: InfeasiblePolicy,
    pub mc: McSettings,
    /// Use every `stride`-th retained draw of each chain.
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummaries {
    pub de: Summary,
    pub ie: Summary,
    pub te: Summary,
    pub de_r: Summary,
    pub ie_r: Summary,
    pub delta_de: Summary,
    pub delta_ie: Summary,
    pub delta: Summary,
}

impl ComponentSummaries {
    pub fn from_draws(v: &[Components]) -> Self {
        let s = |f: fn(&Components) -> f64| stats::summarize(&v.iter().map(f).collect::<Vec<_>>());
        ComponentSummaries {
            de: s(|c| c.de),
            ie: s(|c| c.ie),
            te: s(|c| c.te),
            de_r: s(|c| c.de_r),
            ie_r: s(|c| c.ie_r),
            delta_de: s(|c| c.delta_de),
            delta_ie: s(|c| c.delta_ie),
            delta: s(|c| c.delta),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumFailure {
    pub label: String,
    pub failing: usize,
    pub draws: usize,
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorEffects {
    pub rho_policy: String,
    pub references: ReferenceLevels,
    pub mc_draws: usize,
    pub draws_used: usize,
    /// Draws dropped because some stratum admitted no monotone table.
    pub draws_skipped: usize,
    pub summary: ComponentSummaries,
    pub monotonicity: Vec<StratumFailure>,
    /// Every retained decomposition passed its identity checks.
    pub checks_passed: bool,
    pub per_draw: Vec<Components>,
}

/// `(chain, iteration)` indices visited with the given stride.
fn draw_index(draws: &PosteriorDraws, stride: usize) -> Vec<(usize, usize)> {
    draws
        .chains
        .iter()
        .enumerate()
        .flat_map(|(c, ch)| (0..ch.theta.len()).step_by(stride.max(1)).map(move |t| (c, t)))
        .collect()
}

fn feasible(m: &MarginalPair) -> bool {
    let (lo, hi) = p11_interval(m);
    lo <= hi + FEASIBILITY_TOL
}

/// Decomposes every visited draw, pairing joint-model draw `t` of chain `c`
/// with confounder draw `t` of chain `c` (indices taken modulo the
/// confounder run's dimensions).
pub fn posterior_effects(
    joint: &PosteriorDraws,
    confounder: &ConfounderDraws,
    weights: &StratumWeights,
    refs: &ReferenceLevels,
    settings: &PosteriorEffectsSettings,
) -> Result<PosteriorEffects> {
    let mut out = posterior_effects_multi(joint, confounder, weights, refs, std::slice::from_ref(&settings.rho_policy), settings)?;
    Ok(out.remove(0))
}

/// Paired model parameters of every visited draw.
fn paired_params(joint: &PosteriorDraws, confounder: &ConfounderDraws, stride: usize) -> Result<Vec<ModelParams>> {
    if confounder.chains.is_empty() || confounder.draws_per_chain() == 0 {
        return Err(Error::invalid("the confounder model has no draws"));
    }
    let index = draw_index(joint, stride);
    if index.is_empty() {
        return Err(Error::invalid("the joint model has no draws"));
    }
    let layout = joint.layout();
    Ok(index
        .iter()
        .map(|&(c, t)| {
            let mut p = layout.to_params(&joint.chains[c].theta[t]);
            p.confounder = confounder.params_at(c, t);
            p
        })
        .collect())
}

fn failing_strata(p: &ModelParams, weights: &StratumWeights) -> Vec<bool> {
    weights
        .strata
        .iter()
        .map(|s| {
            let m = MarginalPair {
                mu: confounder_probs(&p.confounder, 1, &s.w).to_vec(),
                phi: confounder_probs(&p.confounder, 0, &s.w).to_vec(),
            };
            !feasible(&m)
        })
        .collect()
}

/// As [`posterior_effects`] for several ρ policies sharing one Monte Carlo
/// preparation per draw; `settings.rho_policy` is ignored.
pub fn posterior_effects_multi(
    joint: &PosteriorDraws,
    confounder: &ConfounderDraws,
    weights: &StratumWeights,
    refs: &ReferenceLevels,
    policies: &[RhoPolicy],
    settings: &PosteriorEffectsSettings,
) -> Result<Vec<PosteriorEffects>> {
    weights.validate()?;
    let params = paired_params(joint, confounder, settings.stride)?;
    type DrawResult = (Vec<bool>, Vec<Result<EffectDecomposition>>);
    let results: Vec<DrawResult> = params
        .par_iter()
        .map(|p| {
            let fails = failing_strata(p, weights);
            let prep = effects::prepare(p, weights, refs, &settings.mc)?;
            Ok((fails, policies.iter().map(|pol| prep.decompose(pol, settings.infeasible)).collect()))
        })
        .collect::<Result<_>>()?;
    let n = params.len();
    let mut failing = vec![0usize; weights.strata.len()];
    let mut columns: Vec<Vec<Result<EffectDecomposition>>> = policies.iter().map(|_| Vec::with_capacity(n)).collect();
    for (fails, ds) in results {
        for (f, x) in failing.iter_mut().zip(&fails) {
            *f += usize::from(*x);
        }
        for (col, d) in columns.iter_mut().zip(ds) {
            col.push(d);
        }
    }
    let monotonicity: Vec<StratumFailure> = weights
        .strata
        .iter()
        .zip(&failing)
        .map(|(s, &f)| StratumFailure {
            label: s.label.clone(),
            failing: f,
            draws: n,
            proportion: f as f64 / n as f64,
        })
        .collect();
    policies
        .iter()
        .zip(columns)
        .map(|(pol, col)| {
            let mut per_draw = Vec::new();
            let mut skipped = 0;
            let mut skipped_labels = BTreeSet::new();
            let mut checks_passed = true;
            let mut mc_draws = 0;
            for d in col {
                match d {
                    Ok(d) => {
                        checks_passed &= d.checks.passed;
                        mc_draws = d.mc_draws;
                        per_draw.push(d.value);
                    }
                    Err(Error::InfeasibleStratum(labels)) => {
                        skipped += 1;
                        skipped_labels.extend(labels);
                    }
                    Err(e) => return Err(e),
                }
            }
            if per_draw.is_empty() {
                return Err(Error::InfeasibleStratum(skipped_labels.into_iter().collect()));
            }
            Ok(PosteriorEffects {
                rho_policy: pol.describe(),
                references: *refs,
                mc_draws,
                draws_used: per_draw.len(),
                draws_skipped: skipped,
                summary: ComponentSummaries::from_draws(&per_draw),
                monotonicity: monotonicity.clone(),
                checks_passed,
                per_draw,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalSummary {
    pub lower: Summary,
    pub upper: Summary,
}

fn interval_summary(v: &[(f64, f64)]) -> Option<IntervalSummary> {
    (!v.is_empty()).then(|| IntervalSummary {
        lower: stats::summarize(&v.iter().map(|x| x.0).collect::<Vec<_>>()),
        upper: stats::summarize(&v.iter().map(|x| x.1).collect::<Vec<_>>()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorBounds {
    pub references: ReferenceLevels,
    pub mc_draws: usize,
    pub draws: usize,
    pub te: Summary,
    pub de_unconstrained: IntervalSummary,
    pub ie_unconstrained: IntervalSummary,
    /// Over draws where every stratum admits a monotone table.
    pub de_monotone: Option<IntervalSummary>,
    pub ie_monotone: Option<IntervalSummary>,
    pub monotone_unavailable: usize,
    /// Monotone bounds nested in the unconstrained ones on every draw.
    pub nested: bool,
    pub per_draw: Vec<EffectBounds>,
}

/// Posterior of the relaxed-monotonicity bounds on DE and IE.
pub fn posterior_bounds(
    joint: &PosteriorDraws,
    confounder: &ConfounderDraws,
    weights: &StratumWeights,
    refs: &ReferenceLevels,
    mc: &McSettings,
    stride: usize,
) -> Result<PosteriorBounds> {
    weights.validate()?;
    let params = paired_params(joint, confounder, stride)?;
    let per_draw: Vec<EffectBounds> = params.par_iter().map(|p| effects::relaxed_bounds(p, weights, refs, mc)).collect::<Result<_>>()?;
    let tol = 1e-9;
    let inside = |a: (f64, f64), b: (f64, f64)| a.0 >= b.0 - tol && a.1 <= b.1 + tol;
    let nested = per_draw
        .iter()
        .all(|b| b.monotone.is_none_or(|m| inside(m.de, b.unconstrained.de) && inside(m.ie, b.unconstrained.ie)));
    let mono: Vec<_> = per_draw.iter().filter_map(|b| b.monotone).collect();
    Ok(PosteriorBounds {
        references: *refs,
        mc_draws: per_draw[0].mc_draws,
        draws: per_draw.len(),
        te: stats::summarize(&per_draw.iter().map(|b| b.te).collect::<Vec<_>>()),
        de_unconstrained: interval_summary(&per_draw.iter().map(|b| b.unconstrained.de).collect::<Vec<_>>()).expect("nonempty"),
        ie_unconstrained: interval_summary(&per_draw.iter().map(|b| b.unconstrained.ie).collect::<Vec<_>>()).expect("nonempty"),
        de_monotone: interval_summary(&mono.iter().map(|m| m.de).collect::<Vec<_>>()),
        ie_monotone: interval_summary(&mono.iter().map(|m| m.ie).collect::<Vec<_>>()),
        monotone_unavailable: per_draw.len() - mono.len(),
        nested,
        per_draw,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumMonotonicity {
    pub label: String,
    pub draws: usize,
    pub failing: usize,
    pub proportion: f64,
    /// Summaries of the p11 interval endpoints over feasible draws.
    pub p_min: Option<Summary>,
    pub p_max: Option<Summary>,
    /// `p_min ≤ p_max` held on every feasible draw.
    pub ordered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub strata: Vec<StratumMonotonicity>,
    pub draws: usize,
    /// Share of draws with at least one failing stratum.
    pub any_failing: f64,
}

/// Per-stratum diagnostics of the monotonicity condition over confounder
/// posterior draws.
pub fn check_monotonicity(confounder: &ConfounderDraws, weights: &StratumWeights) -> Result<MonotonicityReport> {
    weights.validate()?;
    let all: Vec<&Vec<f64>> = confounder.flat().collect();
    if all.is_empty() {
        return Err(Error::invalid("the confounder model has no draws"));
    }
    if weights.strata.iter().any(|s| s.w.len() != confounder.w_dim) {
        return Err(Error::invalid("stratum covariate dimension differs from the confounder model"));
    }
    let params: Vec<_> = all.iter().map(|v| crate::confounder::ConfounderParams::from_flat(v, confounder.w_dim)).collect();
    let mut any = vec![false; params.len()];
    let strata = weights
        .strata
        .iter()
        .map(|s| {
            let mut lo = Vec::new();
            let mut hi = Vec::new();
            let mut failing = 0;
            let mut ordered = true;
            for (k, cp) in params.iter().enumerate() {
                let m = MarginalPair {
                    mu: confounder_probs(cp, 1, &s.w).to_vec(),
                    phi: confounder_probs(cp, 0, &s.w).to_vec(),
                };
                let (a, b) = p11_interval(&m);
                if feasible(&m) {
                    let b = b.max(a);
                    ordered &= a <= b;
                    lo.push(a);
                    hi.push(b);
                } else {
                    failing += 1;
                    any[k] = true;
                }
            }
            StratumMonotonicity {
                label: s.label.clone(),
                draws: params.len(),
                failing,
                proportion: failing as f64 / params.len() as f64,
                p_min: (!lo.is_empty()).then(|| stats::summarize(&lo)),
                p_max: (!hi.is_empty()).then(|| stats::summarize(&hi)),
                ordered,
            }
        })
        .collect();
    Ok(MonotonicityReport {
        strata,
        draws: params.len(),
        any_failing: any.iter().filter(|x| **x).count() as f64 / params.len() as f64,
    })
}
