//! Metropolis-within-Gibbs sampler for the joint model.
//!
//! Sweep order: per-subject random effects, mediator coefficients, shift
//! moves, residual SD, baseline levels, survival coefficients, random-effect
//! covariance. The two Gaussian-linear blocks (random effects and mediator
//! coefficients) use preconditioned Crank–Nicolson proposals built from
//! their Gaussian conditional under the longitudinal model, so only the
//! survival part enters the acceptance ratio. Baseline levels have a
//! conjugate gamma update. The remaining blocks use random walks with
//! adapted covariance.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use rand::Rng;
use rand_distr::{ChiSquared, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mediator::{gaussian_loglik, trajectory, MediatorBases, RandomEffects, RandomEffectsLaw, RE_DIM};
use crate::model::ModelParams;
use crate::rng::{child_seed, domain, substream};

use super::layout::{corr_cholesky_from_unconstrained, unconstrained_from_corr_cholesky, ModelStructure, ParamLayout};
use super::likelihood::{add_exposures, cached_survival_loglik, SubjectDesign, SurvCache, SurvKey};
use super::prior::PriorSpec;

const TARGET_ACCEPT: f64 = 0.30;
const MIN_ACCEPT: f64 = 0.01;
const SURV_SUBSTEPS: usize = 8;
const WHITENED_SUBSTEPS: usize = 3;
/// Mediator sub-block visits per sweep: 0 level, 1 shape.
const MEDIATOR_SCHEDULE: [usize; 4] = [0, 1, 1, 1];
const COV_SUBSTEPS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcSettings {
    #[serde(default = "default_chains")]
    pub chains: usize,
    #[serde(default = "default_phase")]
    pub burn_in: usize,
    #[serde(default = "default_phase")]
    pub samples: usize,
    #[serde(default = "default_thin")]
    pub thin: usize,
    #[serde(default)]
    pub seed: u64,
    /// Parameters held at the given values instead of sampled.
    #[serde(default)]
    pub frozen: BTreeMap<String, f64>,
    #[serde(default = "default_true")]
    pub store_random_effects: bool,
}

fn default_chains() -> usize {
    4
}
fn default_phase() -> usize {
    2000
}
fn default_thin() -> usize {
    1
}
fn default_true() -> bool {
    true
}

impl Default for McmcSettings {
    fn default() -> Self {
        McmcSettings {
            chains: 4,
            burn_in: 2000,
            samples: 2000,
            thin: 1,
            seed: 0,
            frozen: BTreeMap::new(),
            store_random_effects: true,
        }
    }
}

impl McmcSettings {
    pub fn validate(&self, layout: &ParamLayout) -> Result<()> {
        if self.chains == 0 || self.samples == 0 || self.thin == 0 {
            return Err(Error::invalid("chains, samples and thin must be positive"));
        }
        for (k, v) in &self.frozen {
            if layout.index_of(k).is_none() {
                return Err(Error::invalid(format!("unknown frozen parameter `{k}`")));
            }
            if !v.is_finite() {
                return Err(Error::invalid(format!("frozen value of `{k}` is not finite")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    /// Retained draws of the flat parameter vector.
    pub theta: Vec<Vec<f64>>,
    /// Retained random effects, one vector per subject (empty if not stored).
    pub random_effects: Vec<Vec<[f64; RE_DIM]>>,
    /// Post-adaptation acceptance rate per block.
    pub acceptance: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub layout_version: u32,
    pub names: Vec<String>,
    pub structure: ModelStructure,
    /// `false` for frozen coordinates.
    pub free: Vec<bool>,
    pub chains: Vec<Chain>,
    pub burn_in: usize,
    pub samples: usize,
    pub thin: usize,
    pub seed: u64,
    pub warnings: Vec<String>,
}

impl PosteriorDraws {
    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.structure.clone())
    }

    pub fn draws_per_chain(&self) -> usize {
        self.chains.first().map_or(0, |c| c.theta.len())
    }

    /// All retained draws, chains concatenated in order.
    pub fn flat(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.chains.iter().flat_map(|c| c.theta.iter())
    }

    pub fn params_at(&self, theta: &[f64]) -> ModelParams {
        self.layout().to_params(theta)
    }

    pub fn adaptation_failed(&self) -> bool {
        self.warnings.iter().any(|w| w.starts_with("adaptation_failure"))
    }
}

/// Running mean and covariance for proposal adaptation.
#[derive(Debug, Clone)]
struct Welford {
    n: f64,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl Welford {
    fn new(d: usize) -> Self {
        Welford {
            n: 0.0,
            mean: DVector::zeros(d),
            m2: DMatrix::zeros(d, d),
        }
    }
    fn push(&mut self, x: &DVector<f64>) {
        self.n += 1.0;
        let delta = x - &self.mean;
        self.mean += &delta / self.n;
        let delta2 = x - &self.mean;
        self.m2 += &delta * delta2.transpose();
    }
    fn cov(&self) -> Option<DMatrix<f64>> {
        (self.n > 2.0).then(|| &self.m2 / (self.n - 1.0))
    }
}

/// Random-walk block over a subset of coordinates.
#[derive(Debug, Clone)]
struct RwBlock {
    idx: Vec<usize>,
    chol: DMatrix<f64>,
    log_scale: f64,
    stats: Welford,
    tries: f64,
    accepts: f64,
    shaped: bool,
}

impl RwBlock {
    fn new(idx: Vec<usize>, init_sd: f64) -> Self {
        let d = idx.len();
        RwBlock {
            chol: DMatrix::identity(d, d) * init_sd,
            log_scale: 0.0,
            stats: Welford::new(d),
            idx,
            tries: 0.0,
            accepts: 0.0,
            shaped: false,
        }
    }
    fn propose<R: Rng>(&self, theta: &[f64], rng: &mut R) -> Vec<f64> {
        let d = self.idx.len();
        let e = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let step = &self.chol * e * self.log_scale.exp();
        let mut out = theta.to_vec();
        for (k, &i) in self.idx.iter().enumerate() {
            out[i] += step[k];
        }
        out
    }
    fn current(&self, theta: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.idx.len(), self.idx.iter().map(|&i| theta[i]))
    }
    fn step(&mut self, adapting: bool, t: usize, burn_in: usize, alpha: f64, theta: &[f64], first: bool) {
        if adapting {
            self.adapt(t, burn_in, alpha, theta, first);
        } else {
            self.record(alpha);
        }
    }
    fn adapt(&mut self, t: usize, burn_in: usize, alpha: f64, theta: &[f64], reshape: bool) {
        self.log_scale += rm_gain(t) * (alpha - TARGET_ACCEPT);
        self.stats.push(&self.current(theta));
        let d = self.idx.len();
        if reshape && t >= burn_in / 4 && t % 50 == 0 && self.stats.n > 2.0 * d as f64 + 10.0 {
            if let Some(cov) = self.stats.cov() {
                let reg = cov + DMatrix::identity(d, d) * 1e-10;
                if let Some(ch) = reg.cholesky() {
                    self.chol = ch.l() * (2.38 / (d as f64).sqrt());
                    if !self.shaped {
                        self.log_scale = 0.0;
                        self.shaped = true;
                    }
                }
            }
        }
    }
    fn record(&mut self, alpha: f64) {
        self.tries += 1.0;
        self.accepts += alpha;
    }
}

fn rm_gain(t: usize) -> f64 {
    (t as f64 + 1.0).powf(-0.6)
}

fn logistic(s: f64) -> f64 {
    1.0 / (1.0 + (-s).exp())
}

#[derive(Debug, Clone)]
struct SubjectState {
    cache: SurvCache,
    ss: f64,
    surv: f64,
}

/// Data-side precomputation shared by all chains.
struct Prepared<'a> {
    layout: &'a ParamLayout,
    priors: &'a PriorSpec,
    data: &'a Dataset,
    designs: Vec<SubjectDesign>,
    free: Vec<bool>,
    /// Free mediator coordinates (offsets within the mediator block).
    med_free: Vec<usize>,
    med_fixed: Vec<usize>,
    /// `Σ_i Φ_{i,F}'Φ_{i,F}` over free mediator coordinates
    ptp_sum: DMatrix<f64>,
    /// `Σ_i Φ_{i,F}' y_i` and `Σ_i Φ_{i,F}'Φ_{i,X}` (X the frozen coordinates)
    pty_sum: DVector<f64>,
    ptx_sum: DMatrix<f64>,
    /// `Z_i' y_i` and `Z_i' Φ_{i,X}` per subject
    zty: Vec<DVector<f64>>,
    ztx: Vec<DMatrix<f64>>,
    /// `Φ_{i,F}' Z_i` per subject
    ptz: Vec<DMatrix<f64>>,
    /// `Z_i' Z_i` per subject
    ztz: Vec<Matrix4<f64>>,
    n_obs: Vec<usize>,
}

/// Gaussian conditional of one subject's random effects given the
/// longitudinal data, `N(mean, P^{-1})` with `P = L L'`, and the log
/// marginal density of the measurements.
struct Conditional {
    mean: Vector4<f64>,
    chol: Matrix4<f64>,
    marginal: f64,
}

impl Conditional {
    fn whiten(&self, r: &[f64; RE_DIM]) -> Vector4<f64> {
        self.chol.transpose() * (Vector4::from(*r) - self.mean)
    }
    fn unwhiten(&self, w: &Vector4<f64>) -> [f64; RE_DIM] {
        let v = self.mean + self.chol.transpose().solve_upper_triangular(w).expect("positive diagonal");
        [v[0], v[1], v[2], v[3]]
    }
}

impl<'a> Prepared<'a> {
    fn new(layout: &'a ParamLayout, priors: &'a PriorSpec, data: &'a Dataset, free: Vec<bool>) -> Self {
        let designs: Vec<SubjectDesign> = data.subjects.iter().map(|s| SubjectDesign::new(layout, s)).collect();
        let med_free: Vec<usize> = layout.mediator.clone().filter(|&i| free[i]).map(|i| i - layout.mediator.start).collect();
        let med_fixed: Vec<usize> = layout.mediator.clone().filter(|&i| !free[i]).map(|i| i - layout.mediator.start).collect();
        let df = med_free.len();
        let nx = med_fixed.len();
        let mut ptp_sum = DMatrix::zeros(df, df);
        let mut pty_sum = DVector::zeros(df);
        let mut ptx_sum = DMatrix::zeros(df, nx);
        let mut zty = Vec::with_capacity(designs.len());
        let mut ztx = Vec::with_capacity(designs.len());
        let mut ptz = Vec::with_capacity(designs.len());
        let mut ztz = Vec::with_capacity(designs.len());
        for d in &designs {
            let mut pz = DMatrix::zeros(df, RE_DIM);
            let mut zz = Matrix4::zeros();
            let mut zy = DVector::zeros(RE_DIM);
            let mut zx = DMatrix::zeros(RE_DIM, nx);
            for ((row, z), y) in d.phi.iter().zip(&d.z).zip(&d.y) {
                for k in 0..RE_DIM {
                    zy[k] += z[k] * y;
                    for (b, &j) in med_fixed.iter().enumerate() {
                        zx[(k, b)] += z[k] * row[j];
                    }
                }
                for (a, &i) in med_free.iter().enumerate() {
                    pty_sum[a] += row[i] * y;
                    for (b, &j) in med_fixed.iter().enumerate() {
                        ptx_sum[(a, b)] += row[i] * row[j];
                    }
                    for (b, &j) in med_free.iter().enumerate() {
                        ptp_sum[(a, b)] += row[i] * row[j];
                    }
                    for k in 0..RE_DIM {
                        pz[(a, k)] += row[i] * z[k];
                    }
                }
                zz += Vector4::from(*z) * Vector4::from(*z).transpose();
            }
            ptz.push(pz);
            ztz.push(zz);
            zty.push(zy);
            ztx.push(zx);
        }
        Prepared {
            n_obs: designs.iter().map(|d| d.y.len()).collect(),
            layout,
            priors,
            data,
            designs,
            free,
            med_free,
            med_fixed,
            ptp_sum,
            pty_sum,
            ptx_sum,
            zty,
            ztx,
            ptz,
            ztz,
        }
    }

    /// Residuals `y − Φ b` and `Z' (y − Φ b)`.
    fn residuals(&self, i: usize, b: &[f64]) -> (Vec<f64>, Vector4<f64>) {
        let d = &self.designs[i];
        let mut zte = Vector4::zeros();
        let e: Vec<f64> = d
            .phi
            .iter()
            .zip(&d.z)
            .zip(&d.y)
            .map(|((row, z), y)| {
                let e = y - row.iter().zip(b).map(|(a, c)| a * c).sum::<f64>();
                zte += Vector4::from(*z) * e;
                e
            })
            .collect();
        (e, zte)
    }

    fn conditional(&self, i: usize, b: &[f64], sigma: f64, law: &RandomEffectsLaw, prec_re: &Matrix4<f64>) -> Option<Conditional> {
        let sigma2 = sigma * sigma;
        let (e, zte) = self.residuals(i, b);
        let p = self.ztz[i] / sigma2 + prec_re;
        let ch = p.cholesky()?;
        let q = zte / sigma2;
        let mean = ch.solve(&q);
        let l = ch.l();
        let m = e.len() as f64;
        let log_det_p = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let log_det_s = 2.0 * law.cholesky().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let quad = e.iter().map(|v| v * v).sum::<f64>() / sigma2 - q.dot(&mean);
        let marginal = -0.5 * (m * (2.0 * std::f64::consts::PI * sigma2).ln() + log_det_s + log_det_p + quad);
        Some(Conditional { mean, chol: l, marginal })
    }

    fn key(&self, i: usize) -> SurvKey<'_> {
        let s = &self.data.subjects[i];
        SurvKey {
            arm: s.arm,
            u: s.u,
            w: &s.w,
            event: s.event,
        }
    }

    fn subject_state(&self, p: &ModelParams, b: &[f64], i: usize, r: &[f64; RE_DIM]) -> SubjectState {
        let s = &self.data.subjects[i];
        let d = &self.designs[i];
        let path = trajectory(&p.mediator, &d.x, &s.w, &RandomEffects { r: *r }).expect("dimensions checked");
        let cache = SurvCache::new(&self.layout.structure, &path, s.exit_time);
        let surv = cached_survival_loglik(&p.survival, self.key(i), r[0], &cache);
        SubjectState {
            ss: d.residual_ss(b, r),
            cache,
            surv,
        }
    }
}

struct ChainState {
    theta: Vec<f64>,
    params: ModelParams,
    re: Vec<[f64; RE_DIM]>,
    subj: Vec<SubjectState>,
    law: RandomEffectsLaw,
}

impl ChainState {
    fn b<'s>(&'s self, layout: &ParamLayout) -> &'s [f64] {
        &self.theta[layout.mediator.clone()]
    }
}

/// Adaptive pCN step size, `β = logistic(s)`.
#[derive(Debug, Clone, Copy)]
struct PcnTuner {
    s: f64,
    tries: f64,
    accepts: f64,
}

impl PcnTuner {
    fn new() -> Self {
        PcnTuner {
            s: 0.0,
            tries: 0.0,
            accepts: 0.0,
        }
    }
    fn rho(&self) -> f64 {
        let beta = logistic(self.s);
        (1.0 - beta * beta).sqrt()
    }
    fn beta(&self) -> f64 {
        logistic(self.s)
    }
}

/// Symmetric shift proposal scale.
#[derive(Debug, Clone, Copy)]
struct ShiftTuner {
    log_sd: f64,
    tries: f64,
    accepts: f64,
}

fn chol_solve_sample<R: Rng>(prec: &DMatrix<f64>, rhs: &DVector<f64>, rng: &mut R) -> Option<(DVector<f64>, DVector<f64>)> {
    let ch = prec.clone().cholesky()?;
    let mean = ch.solve(rhs);
    let e = DVector::from_fn(rhs.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let l = ch.l();
    let noise = l.transpose().solve_upper_triangular(&e)?;
    Some((mean, noise))
}

fn accept_prob(log_ratio: f64) -> f64 {
    if log_ratio.is_nan() {
        0.0
    } else {
        log_ratio.min(0.0).exp()
    }
}

/// Half-Cauchy and LKJ terms of the random-effect covariance.
fn re_prior(priors: &PriorSpec, layout: &ParamLayout, theta: &[f64]) -> f64 {
    let rr = layout.random_effects.clone();
    let mut v = priors.log_lkj_on_unconstrained(&theta[rr.start + RE_DIM..rr.end]);
    for i in rr.start..rr.start + RE_DIM {
        v += priors.log_half_cauchy_on_log(theta[i]);
    }
    v
}

/// `log |dΣ/dy|` for `y = (log SDs, partial-correlation coordinates)`, up to
/// a constant.
fn log_cov_jacobian(layout: &ParamLayout, theta: &[f64]) -> f64 {
    let rr = layout.random_effects.clone();
    let k = RE_DIM as f64;
    let log_sd: f64 = theta[rr.start..rr.start + RE_DIM].iter().sum();
    let (l, log_jac) = corr_cholesky_from_unconstrained(&theta[rr.start + RE_DIM..rr.end]);
    let mut v = (k + 1.0) * log_sd + log_jac;
    for i in 1..RE_DIM {
        v += (k - i as f64 - 1.0) * l[(i, i)].ln();
    }
    v
}

/// Independence proposal for the random-effect covariance from the
/// inverse-Wishart law `IW(n, Σ r r')`, which is the likelihood of the
/// random effects times `|Σ|^{-(K+1)/2}`. Returns the acceptance probability.
fn wishart_move<R: Rng>(prep: &Prepared, st: &mut ChainState, rng: &mut R) -> f64 {
    let layout = prep.layout;
    let n = st.re.len();
    let mut scatter = Matrix4::zeros();
    for r in &st.re {
        let v = Vector4::from(*r);
        scatter += v * v.transpose();
    }
    let Some(inv) = scatter.try_inverse() else { return 0.0 };
    let Some(ch) = inv.cholesky() else { return 0.0 };
    // Bartlett decomposition of a Wishart(n, S^{-1}) draw
    let mut a = Matrix4::zeros();
    for i in 0..RE_DIM {
        let chi = ChiSquared::new((n - i) as f64).expect("positive degrees of freedom");
        a[(i, i)] = rng.sample(chi).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let la = ch.l() * a;
    let Some(cov) = (la * la.transpose()).try_inverse() else { return 0.0 };
    let cov = 0.5 * (cov + cov.transpose());
    let sd: [f64; RE_DIM] = std::array::from_fn(|i| cov[(i, i)].sqrt());
    let corr = Matrix4::from_fn(|i, j| cov[(i, j)] / (sd[i] * sd[j]));
    let Some(cc) = corr.cholesky() else { return 0.0 };
    let mut prop = st.theta.clone();
    let rr = layout.random_effects.clone();
    for i in 0..RE_DIM {
        prop[rr.start + i] = sd[i].ln();
    }
    prop[rr.start + RE_DIM..rr.end].copy_from_slice(&unconstrained_from_corr_cholesky(&cc.l()));
    let p_new = layout.to_params(&prop);
    let Ok(new_law) = p_new.re_law() else { return 0.0 };
    let half = 0.5 * (RE_DIM as f64 + 1.0);
    let log_det = |law: &RandomEffectsLaw| 2.0 * law.cholesky().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let weight = |th: &[f64], law: &RandomEffectsLaw| re_prior(prep.priors, layout, th) + half * log_det(law) - log_cov_jacobian(layout, th);
    let alpha = accept_prob(weight(&prop, &new_law) - weight(&st.theta, &st.law));
    if rng.random::<f64>() < alpha {
        st.theta = prop;
        st.params = p_new;
        st.law = new_law;
    }
    alpha
}

/// Exact conjugate update of the free baseline levels.
fn gibbs_baseline<R: Rng>(prep: &Prepared, st: &mut ChainState, rng: &mut R) -> Result<()> {
    let layout = prep.layout;
    let jn = layout.structure.pieces();
    let mut expo = vec![vec![0.0; jn]; 2];
    let mut events = vec![vec![0.0; jn]; 2];
    for i in 0..prep.data.len() {
        let key = prep.key(i);
        add_exposures(&st.params.survival, key, st.re[i][0], &st.subj[i].cache, &mut expo[key.arm as usize]);
        if key.event {
            events[key.arm as usize][st.subj[i].cache.piece_exit] += 1.0;
        }
    }
    let mut changed = false;
    for a in 0..2 {
        for j in 0..jn {
            let idx = layout.baseline.start + a * jn + j;
            if !prep.free[idx] {
                continue;
            }
            let shape = prep.priors.baseline_shape + events[a][j];
            let rate = prep.priors.baseline_rate + expo[a][j];
            let g = Gamma::new(shape, 1.0 / rate).map_err(|_| Error::invalid("invalid gamma update"))?;
            let lam: f64 = rng.sample(g);
            st.theta[idx] = lam.max(f64::MIN_POSITIVE).ln();
            changed = true;
        }
    }
    if changed {
        st.params = layout.to_params(&st.theta);
        for i in 0..prep.data.len() {
            st.subj[i].surv = cached_survival_loglik(&st.params.survival, prep.key(i), st.re[i][0], &st.subj[i].cache);
        }
    }
    Ok(())
}

fn init_theta(prep: &Prepared, settings: &McmcSettings, chain: usize) -> Vec<f64> {
    let layout = prep.layout;
    let mut rng = substream(settings.seed, domain::MCMC_INIT, chain as u64);
    let mut jitter = |sd: f64| sd * rng.sample::<f64, _>(StandardNormal);
    let mut theta = vec![0.0; layout.len()];
    // prior median for regression coefficients, moment-based starts for scales
    for i in layout.mediator.clone().chain(layout.survival.clone()) {
        theta[i] = jitter(0.1);
    }
    let within = within_subject_sd(prep.data).unwrap_or(0.5).max(0.05);
    theta[layout.sigma] = within.ln() + jitter(0.1);
    let events = prep.data.subjects.iter().filter(|s| s.event).count() as f64;
    let exposure: f64 = prep.data.subjects.iter().map(|s| s.exit_time).sum();
    let rate = if exposure > 0.0 { ((events + 0.5) / (exposure + 0.5)).max(1e-4) } else { 1.0 };
    for i in layout.baseline.clone() {
        theta[i] = rate.ln() + jitter(0.1);
    }
    let re = layout.random_effects.clone();
    for i in re.start..re.start + RE_DIM {
        theta[i] = 0.3f64.ln() + jitter(0.1);
    }
    for i in re.start + RE_DIM..re.end {
        theta[i] = jitter(0.1);
    }
    for (k, v) in &settings.frozen {
        theta[layout.index_of(k).expect("validated")] = *v;
    }
    theta
}

fn within_subject_sd(data: &Dataset) -> Option<f64> {
    let mut ss = 0.0;
    let mut df = 0usize;
    for s in &data.subjects {
        let n = s.visits.len();
        if n < 2 {
            continue;
        }
        let m = s.visits.iter().map(|v| v.m_obs).sum::<f64>() / n as f64;
        ss += s.visits.iter().map(|v| (v.m_obs - m).powi(2)).sum::<f64>();
        df += n - 1;
    }
    (df > 0).then(|| (ss / df as f64).sqrt())
}

struct ChainOutput {
    chain: Chain,
    warnings: Vec<String>,
}

fn run_chain(prep: &Prepared, settings: &McmcSettings, chain: usize) -> Result<ChainOutput> {
    let layout = prep.layout;
    let priors = prep.priors;
    let n = prep.data.len();
    let theta = init_theta(prep, settings, chain);
    let params = layout.to_params(&theta);
    let law = params.re_law()?;
    let re = vec![[0.0; RE_DIM]; n];
    let subj = (0..n)
        .into_par_iter()
        .map(|i| prep.subject_state(&params, &theta[layout.mediator.clone()], i, &re[i]))
        .collect();
    let mut st = ChainState {
        theta,
        params,
        re,
        subj,
        law,
    };
    let chain_root = child_seed(settings.seed, domain::MCMC_CHAIN, chain as u64);
    let mut rng = substream(chain_root, domain::MCMC_CHAIN, u64::MAX);

    let mut re_tuner = PcnTuner::new();
    // level coefficients (β) and shape coefficients (α, ψ), as positions in the free list
    let n_level = 1 + crate::mediator::X_DIM + layout.structure.w_dim;
    let med_blocks: [Vec<usize>; 2] = [
        (0..prep.med_free.len()).filter(|&x| prep.med_free[x] < n_level).collect(),
        (0..prep.med_free.len()).filter(|&x| prep.med_free[x] >= n_level).collect(),
    ];
    let mut med_tuners = [PcnTuner::new(); 2];
    let bases = MediatorBases::standard();
    let free = &prep.free;
    let beta0_free = free[layout.mediator.start];
    let alpha_idx: Vec<usize> = (0..4).map(|k| layout.index_of(&format!("alpha[{k}]")).unwrap()).collect();
    let slope_shift = bases.random_in_population.filter(|_| alpha_idx.iter().all(|&i| free[i]));
    let mut shifts = [ShiftTuner { log_sd: (0.05f64).ln(), tries: 0.0, accepts: 0.0 }; RE_DIM];
    let mut sigma_block = RwBlock::new(vec![layout.sigma].into_iter().filter(|&i| free[i]).collect(), 0.05);
    // baseline log-levels join the survival coefficients so the adapted
    // covariance can follow their correlation with the loadings
    let mut surv_block = RwBlock::new(layout.baseline.clone().chain(layout.survival.clone()).filter(|&i| free[i]).collect(), 0.05);
    let mut re_block = RwBlock::new(layout.random_effects.clone().filter(|&i| free[i]).collect(), 0.05);
    let mut re_nc_block = re_block.clone();
    let re_all_free = re_block.idx.len() == layout.random_effects.len();
    let mut iw_stats = (0.0, 0.0);

    let total = settings.burn_in + settings.samples;
    let mut kept = Chain {
        theta: Vec::new(),
        random_effects: Vec::new(),
        acceptance: BTreeMap::new(),
    };
    for t in 0..total {
        let adapting = t < settings.burn_in;
        let iter_seed = child_seed(chain_root, t as u64, 1);

        // per-subject random effects
        {
            let rho = re_tuner.rho();
            let beta = re_tuner.beta();
            let sigma2 = st.params.mediator.sigma.powi(2);
            let prec_re = st.law.covariance().try_inverse().ok_or_else(|| Error::invalid("singular random-effect covariance"))?;
            let b = st.b(layout).to_vec();
            let results: Vec<(f64, Option<([f64; RE_DIM], SubjectState)>)> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut r_rng = substream(iter_seed, domain::MCMC_CHAIN, i as u64);
                    let d = &prep.designs[i];
                    let p = prep.ztz[i] / sigma2 + prec_re;
                    let mut zte = Vector4::zeros();
                    for ((row, z), y) in d.phi.iter().zip(&d.z).zip(&d.y) {
                        let fit: f64 = row.iter().zip(&b).map(|(a, c)| a * c).sum();
                        for k in 0..RE_DIM {
                            zte[k] += z[k] * (y - fit);
                        }
                    }
                    let Some(ch) = p.cholesky() else { return (0.0, None) };
                    let mean = ch.solve(&(zte / sigma2));
                    let e = Vector4::from_fn(|_, _| r_rng.sample::<f64, _>(StandardNormal));
                    let noise = ch.l().transpose().solve_upper_triangular(&e).unwrap_or(e);
                    let cur = Vector4::from(st.re[i]);
                    let prop = mean + (cur - mean) * rho + noise * beta;
                    let r_new = [prop[0], prop[1], prop[2], prop[3]];
                    let cand = prep.subject_state(&st.params, &b, i, &r_new);
                    let log_a = cand.surv - st.subj[i].surv;
                    let alpha = accept_prob(log_a);
                    if r_rng.random::<f64>() < alpha {
                        (alpha, Some((r_new, cand)))
                    } else {
                        (alpha, None)
                    }
                })
                .collect();
            let mut acc = 0.0;
            for (i, (alpha, upd)) in results.into_iter().enumerate() {
                acc += alpha;
                if let Some((r, s)) = upd {
                    st.re[i] = r;
                    st.subj[i] = s;
                }
            }
            if n > 0 {
                let mean_acc = acc / n as f64;
                if adapting {
                    re_tuner.s += rm_gain(t) * (mean_acc - TARGET_ACCEPT);
                } else {
                    re_tuner.tries += 1.0;
                    re_tuner.accepts += mean_acc;
                }
            }
        }

        // mediator coefficients, random effects moved with their conditional
        if !prep.med_free.is_empty() {
            let sigma = st.params.mediator.sigma;
            let sigma2 = sigma * sigma;
            let df = prep.med_free.len();
            let prec_re = st.law.covariance().try_inverse().ok_or_else(|| Error::invalid("singular random-effect covariance"))?;
            let b = st.b(layout).to_vec();
            let b_x = DVector::from_iterator(prep.med_fixed.len(), prep.med_fixed.iter().map(|&j| b[j]));
            // collapsed precision Σ Φ'V^{-1}Φ = Σ Φ'Φ/σ² − M M' with M_i = Φ'Z L_i^{-T} / σ²
            let mut stacked = DMatrix::zeros(df, RE_DIM * n);
            let mut whitened = DVector::zeros(RE_DIM * n);
            let mut pinvs = Vec::with_capacity(n);
            let mut ok = true;
            for i in 0..n {
                let zte = &prep.zty[i] - &prep.ztx[i] * &b_x;
                let Some(ch) = (prep.ztz[i] / sigma2 + prec_re).cholesky() else {
                    ok = false;
                    break;
                };
                let linv = ch.l().try_inverse().expect("positive diagonal");
                pinvs.push(linv.transpose() * linv);
                let v = linv * Vector4::from_iterator(zte.iter().copied());
                let pz = &prep.ptz[i];
                for c in 0..RE_DIM {
                    whitened[RE_DIM * i + c] = v[c];
                    for a in 0..df {
                        let mut acc = 0.0;
                        for k in 0..=c {
                            acc += pz[(a, k)] * linv[(c, k)];
                        }
                        stacked[(a, RE_DIM * i + c)] = acc / sigma2;
                    }
                }
            }
            let mut rhs = (&prep.pty_sum - &prep.ptx_sum * &b_x) / sigma2;
            rhs.gemv(-1.0 / sigma2, &stacked, &whitened, 1.0);
            let mut prec = &prep.ptp_sum / sigma2 + DMatrix::identity(df, df) / priors.regression_sd.powi(2);
            prec.gemm(-1.0, &stacked, &stacked.transpose(), 1.0);
            for &blk in &MEDIATOR_SCHEDULE {
                let positions = &med_blocks[blk];
                if !ok || positions.is_empty() {
                    continue;
                }
                let tuner = &mut med_tuners[blk];
                let b = st.b(layout).to_vec();
                let cur_free = DVector::from_iterator(df, prep.med_free.iter().map(|&j| b[j]));
                // Gaussian conditional of this block given the other free coordinates
                let ds = positions.len();
                let q_ss = DMatrix::from_fn(ds, ds, |x, y| prec[(positions[x], positions[y])]);
                let mut rhs_s = DVector::from_fn(ds, |x, _| rhs[positions[x]]);
                for (x, &px) in positions.iter().enumerate() {
                    for c in 0..df {
                        if !positions.contains(&c) {
                            rhs_s[x] -= prec[(px, c)] * cur_free[c];
                        }
                    }
                }
                let Some((mean, noise)) = chol_solve_sample(&q_ss, &rhs_s, &mut rng) else { continue };
                let cur = DVector::from_fn(ds, |x, _| cur_free[positions[x]]);
                let prop = &mean + (&cur - &mean) * tuner.rho() + noise * tuner.beta();
                let mut step = DVector::zeros(df);
                let mut theta_new = st.theta.clone();
                for (x, &px) in positions.iter().enumerate() {
                    step[px] = prop[x] - cur[x];
                    theta_new[layout.mediator.start + prep.med_free[px]] = prop[x];
                }
                let p_new = layout.to_params(&theta_new);
                let b_new = theta_new[layout.mediator.clone()].to_vec();
                let moved: Vec<(SubjectState, [f64; RE_DIM])> = (0..n)
                    .into_par_iter()
                    .map(|i| {
                        let shift = pinvs[i] * Vector4::from_iterator((prep.ptz[i].transpose() * &step).iter().copied()) / sigma2;
                        let r: [f64; RE_DIM] = std::array::from_fn(|k| st.re[i][k] - shift[k]);
                        (prep.subject_state(&p_new, &b_new, i, &r), r)
                    })
                    .collect();
                let log_a: f64 = moved.iter().map(|c| c.0.surv).sum::<f64>() - st.subj.iter().map(|c| c.surv).sum::<f64>();
                let alpha = accept_prob(log_a);
                if rng.random::<f64>() < alpha {
                    st.theta = theta_new;
                    st.params = p_new;
                    for (i, (s, r)) in moved.into_iter().enumerate() {
                        st.subj[i] = s;
                        st.re[i] = r;
                    }
                }
                if adapting {
                    tuner.s += rm_gain(t) * (alpha - TARGET_ACCEPT);
                } else {
                    tuner.tries += 1.0;
                    tuner.accepts += alpha;
                }
            }
        }

        // shift moves: population coefficients against the mean of the random effects
        for k in 0..RE_DIM {
            let coef: Vec<(usize, f64)> = if k == 0 {
                if !beta0_free {
                    continue;
                }
                vec![(layout.mediator.start, 1.0)]
            } else {
                let Some(c) = slope_shift else { continue };
                alpha_idx.iter().enumerate().map(|(j, &i)| (i, c[k - 1][j])).collect()
            };
            let tuner = &mut shifts[k];
            let c: f64 = tuner.log_sd.exp() * rng.sample::<f64, _>(StandardNormal);
            let mut theta_new = st.theta.clone();
            let mut dlp = 0.0;
            for &(i, w) in &coef {
                theta_new[i] += c * w;
                dlp += priors.normal_logpdf(theta_new[i]) - priors.normal_logpdf(st.theta[i]);
            }
            let re_new: Vec<[f64; RE_DIM]> = st
                .re
                .iter()
                .map(|r| {
                    let mut v = *r;
                    v[k] -= c;
                    v
                })
                .collect();
            for (a, b) in re_new.iter().zip(&st.re) {
                dlp += st.law.log_density(&RandomEffects { r: *a }) - st.law.log_density(&RandomEffects { r: *b });
            }
            let p_new = layout.to_params(&theta_new);
            let mut surv_new = Vec::new();
            if k == 0 {
                surv_new = (0..n)
                    .map(|i| cached_survival_loglik(&p_new.survival, prep.key(i), re_new[i][0], &st.subj[i].cache))
                    .collect();
                dlp += surv_new.iter().sum::<f64>() - st.subj.iter().map(|s| s.surv).sum::<f64>();
            }
            let alpha = accept_prob(dlp);
            if rng.random::<f64>() < alpha {
                st.theta = theta_new;
                st.params = p_new;
                st.re = re_new;
                for (s, v) in st.subj.iter_mut().zip(surv_new) {
                    s.surv = v;
                }
            }
            if adapting {
                tuner.log_sd += rm_gain(t) * (alpha - TARGET_ACCEPT);
            } else {
                tuner.tries += 1.0;
                tuner.accepts += alpha;
            }
        }

        // residual SD
        if !sigma_block.idx.is_empty() {
            let prop = sigma_block.propose(&st.theta, &mut rng);
            let (s0, s1) = (st.theta[layout.sigma].exp(), prop[layout.sigma].exp());
            let mut dlp = priors.log_half_cauchy_on_log(prop[layout.sigma]) - priors.log_half_cauchy_on_log(st.theta[layout.sigma]);
            for (s, &m) in st.subj.iter().zip(&prep.n_obs) {
                dlp += gaussian_loglik(s.ss, m, s1) - gaussian_loglik(s.ss, m, s0);
            }
            let alpha = accept_prob(dlp);
            if rng.random::<f64>() < alpha {
                st.theta = prop;
                st.params.mediator.sigma = s1;
            }
            sigma_block.step(adapting, t, settings.burn_in, alpha, &st.theta, true);
        }

        // baseline levels (conjugate gamma) alternating with survival coefficients
        for sub in 0..SURV_SUBSTEPS {
            gibbs_baseline(prep, &mut st, &mut rng)?;
            if surv_block.idx.is_empty() {
                break;
            }
            let prop = surv_block.propose(&st.theta, &mut rng);
            let p_new = layout.to_params(&prop);
            let surv_new: Vec<f64> = (0..n)
                .map(|i| cached_survival_loglik(&p_new.survival, prep.key(i), st.re[i][0], &st.subj[i].cache))
                .collect();
            let mut dlp: f64 = surv_new.iter().sum::<f64>() - st.subj.iter().map(|s| s.surv).sum::<f64>();
            for &i in &surv_block.idx {
                dlp += if layout.baseline.contains(&i) {
                    priors.log_gamma_on_log(prop[i]) - priors.log_gamma_on_log(st.theta[i])
                } else {
                    priors.normal_logpdf(prop[i]) - priors.normal_logpdf(st.theta[i])
                };
            }
            let alpha = accept_prob(dlp);
            if rng.random::<f64>() < alpha {
                st.theta = prop;
                st.params = p_new;
                for (s, v) in st.subj.iter_mut().zip(surv_new) {
                    s.surv = v;
                }
            }
            surv_block.step(adapting, t, settings.burn_in, alpha, &st.theta, sub == 0);
        }

        // random-effect covariance given the random effects
        if re_all_free && n > RE_DIM {
            let alpha = wishart_move(prep, &mut st, &mut rng);
            if !adapting {
                iw_stats.0 += 1.0;
                iw_stats.1 += alpha;
            }
        } else {
            for sub in 0..COV_SUBSTEPS {
                if re_block.idx.is_empty() {
                    break;
                }
                let prop = re_block.propose(&st.theta, &mut rng);
                let p_new = layout.to_params(&prop);
                let alpha = match p_new.re_law() {
                    Ok(new_law) => {
                        let density = |law: &RandomEffectsLaw| st.re.iter().map(|r| law.log_density(&RandomEffects { r: *r })).sum::<f64>();
                        let dlp = re_prior(priors, layout, &prop) - re_prior(priors, layout, &st.theta) + density(&new_law) - density(&st.law);
                        let alpha = accept_prob(dlp);
                        if rng.random::<f64>() < alpha {
                            st.theta = prop;
                            st.params = p_new;
                            st.law = new_law;
                        }
                        alpha
                    }
                    Err(_) => 0.0,
                };
                re_block.step(adapting, t, settings.burn_in, alpha, &st.theta, sub == 0);
            }
        }

        // random-effect covariance with the conditionally whitened random effects held fixed
        for sub in 0..WHITENED_SUBSTEPS {
            if re_nc_block.idx.is_empty() {
                break;
            }
            let prop = re_nc_block.propose(&st.theta, &mut rng);
            let p_new = layout.to_params(&prop);
            let alpha = match p_new.re_law() {
                Ok(new_law) => {
                    let sigma = st.params.mediator.sigma;
                    let b = st.b(layout).to_vec();
                    let old_prec = st.law.covariance().try_inverse().expect("positive definite");
                    let new_prec = new_law.covariance().try_inverse();
                    let moved: Option<Vec<(SubjectState, [f64; RE_DIM], f64)>> = new_prec.and_then(|new_prec| {
                        (0..n)
                            .into_par_iter()
                            .map(|i| {
                                let old = prep.conditional(i, &b, sigma, &st.law, &old_prec)?;
                                let new = prep.conditional(i, &b, sigma, &new_law, &new_prec)?;
                                let r = new.unwhiten(&old.whiten(&st.re[i]));
                                Some((prep.subject_state(&p_new, &b, i, &r), r, new.marginal - old.marginal))
                            })
                            .collect()
                    });
                    match moved {
                        Some(moved) => {
                            let dlp = re_prior(priors, layout, &prop) - re_prior(priors, layout, &st.theta)
                                + moved.iter().map(|m| m.2 + m.0.surv).sum::<f64>()
                                - st.subj.iter().map(|s| s.surv).sum::<f64>();
                            let alpha = accept_prob(dlp);
                            if rng.random::<f64>() < alpha {
                                st.theta = prop;
                                st.params = p_new;
                                st.law = new_law;
                                for (i, (s, r, _)) in moved.into_iter().enumerate() {
                                    st.subj[i] = s;
                                    st.re[i] = r;
                                }
                            }
                            alpha
                        }
                        None => 0.0,
                    }
                }
                Err(_) => 0.0,
            };
            re_nc_block.step(adapting, t, settings.burn_in, alpha, &st.theta, sub == 0);
        }

        if !adapting && (t - settings.burn_in) % settings.thin == 0 {
            kept.theta.push(st.theta.clone());
            if settings.store_random_effects {
                kept.random_effects.push(st.re.clone());
            }
        }
    }

    let mut warnings = Vec::new();
    let mut acc = BTreeMap::new();
    let mut report = |name: &str, tries: f64, accepts: f64| {
        if tries > 0.0 {
            let rate = accepts / tries;
            acc.insert(name.to_string(), rate);
            if rate < MIN_ACCEPT {
                warnings.push(format!("adaptation_failure: chain {chain} block {name} acceptance {rate:.4}"));
            }
        }
    };
    report("random_effects", re_tuner.tries, re_tuner.accepts);
    report("mediator_level", med_tuners[0].tries, med_tuners[0].accepts);
    report("mediator_shape", med_tuners[1].tries, med_tuners[1].accepts);
    for (k, s) in shifts.iter().enumerate() {
        report(&format!("shift[{k}]"), s.tries, s.accepts);
    }
    report("sigma", sigma_block.tries, sigma_block.accepts);
    report("survival", surv_block.tries, surv_block.accepts);
    report("re_covariance", re_block.tries + iw_stats.0, re_block.accepts + iw_stats.1);
    report("re_covariance_whitened", re_nc_block.tries, re_nc_block.accepts);
    kept.acceptance = acc;
    Ok(ChainOutput { chain: kept, warnings })
}

/// Runs all chains. Deterministic given the seed.
pub fn run_mcmc(data: &Dataset, structure: &ModelStructure, priors: &PriorSpec, settings: &McmcSettings) -> Result<PosteriorDraws> {
    priors.validate()?;
    let layout = ParamLayout::new(structure.clone());
    settings.validate(&layout)?;
    if data.subjects.iter().any(|s| s.w.len() != structure.w_dim) {
        return Err(Error::invalid("subject covariate dimension differs from the model structure"));
    }
    let mut free = vec![true; layout.len()];
    for k in settings.frozen.keys() {
        free[layout.index_of(k).expect("validated")] = false;
    }
    let prep = Prepared::new(&layout, priors, data, free.clone());
    let outputs: Vec<ChainOutput> = (0..settings.chains)
        .into_par_iter()
        .map(|c| run_chain(&prep, settings, c))
        .collect::<Result<_>>()?;
    let mut warnings = Vec::new();
    let mut chains = Vec::new();
    for o in outputs {
        warnings.extend(o.warnings);
        chains.push(o.chain);
    }
    Ok(PosteriorDraws {
        layout_version: super::layout::LAYOUT_VERSION,
        names: layout.names.clone(),
        structure: structure.clone(),
        free,
        chains,
        burn_in: settings.burn_in,
        samples: settings.samples,
        thin: settings.thin,
        seed: settings.seed,
        warnings,
    })
}
