//! Structural simulator with every counterfactual world materialised.
//!
//! Each subject gets one covariate pattern, one counterfactual confounder
//! pair `(U_{a*}, U_a)`, one random-effect vector and one exponential
//! threshold, all shared by the four worlds. In the nested world
//! `(a, M_{a*})` the hazard sees `U_a` while the trajectory is built from
//! `U_{a*}`.

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::CubicSpline;
use crate::confounder::{confounder_probs, joint_from_rho, JointConfounderMatrix, MarginalPair};
use crate::data::{Dataset, Subject};
use crate::effects::StratumWeights;
use crate::error::{Error, Result};
use crate::mediator::{trajectory, x_design, LongitudinalRecord};
use crate::model::ModelParams;
use crate::rng::{domain, substream};
use crate::stats;
use crate::survival::SubjectHazard;

const MARGINAL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CensoringLaw {
    /// End of follow-up; `None` means the horizon `t_max`.
    #[serde(default)]
    pub admin_time: Option<f64>,
    /// Rate of independent exponential censoring.
    #[serde(default)]
    pub exp_rate: f64,
}

impl Default for CensoringLaw {
    fn default() -> Self {
        CensoringLaw {
            admin_time: None,
            exp_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisitSchedule {
    pub times: Vec<f64>,
    /// Probability of dropping out just before each visit.
    pub dropout: Vec<f64>,
}

impl VisitSchedule {
    pub fn annual(last: usize, dropout: f64) -> Self {
        VisitSchedule {
            times: (0..=last).map(|t| t as f64).collect(),
            dropout: (0..=last).map(|k| if k == 0 { 0.0 } else { dropout }).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmConfig {
    pub params: ModelParams,
    pub weights: StratumWeights,
    /// Joint law of `(U_{a*}, U_a)` per stratum, rows indexed by `U_{a*}`.
    pub joints: Vec<JointConfounderMatrix>,
    pub n: usize,
    pub censoring: CensoringLaw,
    pub schedule: VisitSchedule,
    /// Measurement noise SD; defaults to the model's residual SD.
    #[serde(default)]
    pub noise_sd: Option<f64>,
}

impl ScmConfig {
    /// Config whose joint laws are the monotone tables at `rho`.
    pub fn with_rho(
        params: ModelParams,
        weights: StratumWeights,
        rho: f64,
        n: usize,
        censoring: CensoringLaw,
        schedule: VisitSchedule,
    ) -> Result<Self> {
        let joints = weights
            .strata
            .iter()
            .map(|s| joint_from_rho(&stratum_marginals(&params, &s.w), rho))
            .collect::<Result<_>>()?;
        Ok(ScmConfig {
            params,
            weights,
            joints,
            n,
            censoring,
            schedule,
            noise_sd: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.weights.validate()?;
        if self.joints.len() != self.weights.strata.len() {
            return Err(Error::invalid("one joint confounder table per stratum is required"));
        }
        for (s, j) in self.weights.strata.iter().zip(&self.joints) {
            if s.w.len() != self.params.w_dim() {
                return Err(Error::invalid(format!("stratum `{}` has the wrong covariate dimension", s.label)));
            }
            j.validate_against(&stratum_marginals(&self.params, &s.w), MARGINAL_TOL)?;
        }
        let t = &self.schedule.times;
        if t.iter().any(|v| !(*v >= 0.0)) || t.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::invalid("visit times must be nonnegative and increasing"));
        }
        if self.schedule.dropout.len() != t.len() || self.schedule.dropout.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("one dropout probability in [0, 1] per visit is required"));
        }
        if self.noise_sd.is_some_and(|v| !(v >= 0.0)) {
            return Err(Error::invalid("noise SD must be nonnegative"));
        }
        if !(self.censoring.exp_rate >= 0.0) || self.censoring.admin_time.is_some_and(|a| !(a > 0.0)) {
            return Err(Error::invalid("censoring law is invalid"));
        }
        Ok(())
    }

    fn horizon(&self) -> f64 {
        let t_max = self.params.survival.t_max;
        self.censoring.admin_time.map_or(t_max, |a| a.max(t_max))
    }
}

/// Confounder marginals `(μ, φ)` = `(P(U | a, w), P(U | a*, w))`.
pub fn stratum_marginals(params: &ModelParams, w: &[f64]) -> MarginalPair {
    MarginalPair {
        mu: confounder_probs(&params.confounder, 1, w).to_vec(),
        phi: confounder_probs(&params.confounder, 0, w).to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmTruth {
    pub subject_id: usize,
    pub stratum: usize,
    pub w: Vec<f64>,
    pub r: [f64; 4],
    pub u_astar: u8,
    pub u_a: u8,
    pub m_a: CubicSpline,
    pub m_astar: CubicSpline,
    /// `min(T_{a,M_a}, t_max)`
    pub t_a_ma: f64,
    /// `min(T_{a,M_{a*}}, t_max)`
    pub t_a_mastar: f64,
    /// `min(T_{a*,M_{a*}}, t_max)`
    pub t_astar_mastar: f64,
    /// `min(T_{a*,M_a}, t_max)`
    pub t_astar_ma: f64,
    /// Untruncated event times in the two factual worlds, capped at the
    /// follow-up horizon (`None` beyond it).
    pub event_a: Option<f64>,
    pub event_astar: Option<f64>,
    pub arm: u8,
}

fn draw_index<R: Rng>(rng: &mut R, probs: impl Iterator<Item = f64>) -> usize {
    let v: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if v < acc {
            return i;
        }
    }
    last
}

pub fn simulate_truth(cfg: &ScmConfig, seed: u64) -> Result<Vec<ScmTruth>> {
    cfg.validate()?;
    let law = cfg.params.re_law()?;
    let sp = &cfg.params.survival;
    let t_max = sp.t_max;
    let horizon = cfg.horizon();
    (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, domain::ORACLE_TRUTH, i as u64);
            let stratum = draw_index(&mut rng, cfg.weights.strata.iter().map(|s| s.mass));
            let w = &cfg.weights.strata[stratum].w;
            let cell = draw_index(&mut rng, cfg.joints[stratum].p.iter().flatten().copied());
            let (u_astar, u_a) = ((cell / 3) as u8, (cell % 3) as u8);
            let r = law.sample(&mut rng);
            let arm = u8::from(rng.random::<bool>());
            let e: f64 = rng.sample(Exp1);
            let m_a = trajectory(&cfg.params.mediator, &x_design(1, u_a), w, &r)?;
            let m_astar = trajectory(&cfg.params.mediator, &x_design(0, u_astar), w, &r)?;
            let time = |a: u8, u: u8, m: &CubicSpline| SubjectHazard::new(sp, a, u, w, m, r.r[0]).invert(e, horizon);
            let ev_a = time(1, u_a, &m_a);
            let ev_x = time(1, u_a, &m_astar);
            let ev_s = time(0, u_astar, &m_astar);
            let ev_y = time(0, u_astar, &m_a);
            let trunc = |t: Option<f64>| t.map_or(t_max, |v| v.min(t_max));
            Ok(ScmTruth {
                subject_id: i,
                stratum,
                w: w.clone(),
                r: r.r,
                u_astar,
                u_a,
                t_a_ma: trunc(ev_a),
                t_a_mastar: trunc(ev_x),
                t_astar_mastar: trunc(ev_s),
                t_astar_ma: trunc(ev_y),
                event_a: ev_a,
                event_astar: ev_s,
                m_a,
                m_astar,
                arm,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleEffects {
    pub de: f64,
    pub ie: f64,
    pub te: f64,
    pub de_se: f64,
    pub ie_se: f64,
    pub te_se: f64,
    /// Means of `T_{a,M_a}`, `T_{a,M_{a*}}`, `T_{a*,M_{a*}}`, `T_{a*,M_a}`.
    pub world_means: [f64; 4],
    pub n: usize,
}

pub fn oracle_effects(truths: &[ScmTruth]) -> Result<OracleEffects> {
    if truths.is_empty() {
        return Err(Error::invalid("oracle effects need at least one subject"));
    }
    let col = |f: fn(&ScmTruth) -> f64| truths.iter().map(f).collect::<Vec<f64>>();
    let de = col(|t| t.t_a_mastar - t.t_astar_mastar);
    let ie = col(|t| t.t_a_ma - t.t_a_mastar);
    let te = col(|t| t.t_a_ma - t.t_astar_mastar);
    let (de_m, ie_m) = (stats::mean(&de), stats::mean(&ie));
    Ok(OracleEffects {
        de: de_m,
        ie: ie_m,
        te: de_m + ie_m,
        de_se: stats::std_error(&de),
        ie_se: stats::std_error(&ie),
        te_se: stats::std_error(&te),
        world_means: [
            stats::mean(&col(|t| t.t_a_ma)),
            stats::mean(&col(|t| t.t_a_mastar)),
            stats::mean(&col(|t| t.t_astar_mastar)),
            stats::mean(&col(|t| t.t_astar_ma)),
        ],
        n: truths.len(),
    })
}

/// What a study would see: randomised arm, the factual confounder and
/// trajectory, noisy visits with monotone dropout, and censored exits.
pub fn emit_observational(cfg: &ScmConfig, truths: &[ScmTruth], seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let sigma = cfg.noise_sd.unwrap_or(cfg.params.mediator.sigma);
    let t_max = cfg.params.survival.t_max;
    let admin = cfg.censoring.admin_time.unwrap_or(t_max);
    let subjects = truths
        .par_iter()
        .map(|tr| {
            let mut rng = substream(seed, domain::ORACLE_OBSERVE, tr.subject_id as u64);
            let (u, m, event_time) = if tr.arm == 1 {
                (tr.u_a, &tr.m_a, tr.event_a)
            } else {
                (tr.u_astar, &tr.m_astar, tr.event_astar)
            };
            let censor = if cfg.censoring.exp_rate > 0.0 {
                let e: f64 = rng.sample(Exp1);
                (e / cfg.censoring.exp_rate).min(admin)
            } else {
                admin
            };
            let (exit_time, event) = match event_time {
                Some(t) if t <= censor => (t, true),
                _ => (censor, false),
            };
            let mut visits = Vec::new();
            for (&t, &p) in cfg.schedule.times.iter().zip(&cfg.schedule.dropout) {
                let stay = p == 0.0 || rng.random::<f64>() >= p;
                if !stay || t > exit_time {
                    break;
                }
                let noise: f64 = if sigma > 0.0 { sigma * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
                visits.push(LongitudinalRecord { t, m_obs: m.value(t) + noise });
            }
            Subject {
                id: format!("s{:06}", tr.subject_id),
                arm: tr.arm,
                u,
                w: tr.w.clone(),
                exit_time,
                event,
                visits,
            }
        })
        .collect();
    Ok(Dataset { subjects })
}

/// A nontrivial parameter set with one binary covariate, used by examples
/// and tests.
pub fn example_params() -> ModelParams {
    let mut med = crate::mediator::MediatorParams::zeros(1);
    med.beta0 = 0.4;
    med.beta1 = [-0.3, 0.3, 0.5, -0.1, -0.2];
    med.beta2 = vec![0.2];
    med.alpha = [0.05, 0.1, -0.05, 0.02];
    med.psi[0] = [-0.08, 0.02, 0.03, -0.02, 0.0];
    med.sigma = 0.2;
    let mut sp = crate::survival::SurvivalParams::constant(0.05, 1, crate::survival::FunctionalKind::ThreeYearLegacy);
    sp.baseline_control = crate::survival::PiecewiseHazard::new(vec![0.0, 3.0, 7.0], vec![0.04, 0.06, 0.08]).unwrap();
    sp.baseline_treated = crate::survival::PiecewiseHazard::new(vec![0.0, 3.0, 7.0], vec![0.03, 0.05, 0.07]).unwrap();
    sp.gamma1 = [0.4, 0.8];
    sp.gamma2 = [-0.1, -0.3];
    sp.gamma3 = vec![0.3];
    sp.zeta = [0.4, 0.3, -0.3, 0.1];
    sp.xi = 0.6;
    let mut cp = crate::confounder::ConfounderParams::zeros(1);
    cp.phi0 = [0.0, -0.5];
    cp.phi1 = [0.5, 1.0];
    cp.phi2 = [vec![0.3], vec![0.2]];
    ModelParams {
        mediator: med,
        survival: sp,
        confounder: cp,
        re_covariance: [
            [0.2, 0.02, 0.0, 0.0],
            [0.02, 0.04, 0.0, 0.0],
            [0.0, 0.0, 0.03, 0.0],
            [0.0, 0.0, 0.0, 0.02],
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::effects::{decompose, InfeasiblePolicy, McSettings, ReferenceLevels, RhoPolicy, Stratum};
    use crate::survival::km_restricted_auc;

    fn fixture() -> ModelParams {
        example_params()
    }

    fn weights() -> StratumWeights {
        StratumWeights {
            strata: vec![
                Stratum { label: "w0".into(), w: vec![0.0], mass: 0.5 },
                Stratum { label: "w1".into(), w: vec![1.0], mass: 0.5 },
            ],
        }
    }

    fn inert(mut p: ModelParams) -> ModelParams {
        p.mediator.beta1[0] = 0.0;
        p.mediator.beta1[3] = 0.0;
        p.mediator.beta1[4] = 0.0;
        for k in 0..4 {
            p.mediator.psi[k][0] = 0.0;
            p.mediator.psi[k][3] = 0.0;
            p.mediator.psi[k][4] = 0.0;
        }
        p.survival.baseline_treated = p.survival.baseline_control.clone();
        p.survival.gamma2 = [0.0; 2];
        p.survival.zeta[3] = 0.0;
        p.confounder.phi1 = [0.0; 2];
        p
    }

    fn diagonal_joints(p: &ModelParams, w: &StratumWeights) -> Vec<JointConfounderMatrix> {
        w.strata
            .iter()
            .map(|s| {
                let m = stratum_marginals(p, &s.w);
                let mut j = JointConfounderMatrix::zeros(3);
                for k in 0..3 {
                    j.p[k][k] = m.phi[k];
                }
                j
            })
            .collect()
    }

    fn cfg_for(p: ModelParams, n: usize) -> ScmConfig {
        ScmConfig::with_rho(p, weights(), 0.5, n, CensoringLaw::default(), VisitSchedule::annual(5, 0.0)).unwrap()
    }

    #[test]
    fn inert_treatment_gives_identical_worlds() {
        let p = inert(fixture());
        let joints = diagonal_joints(&p, &weights());
        let cfg = ScmConfig { joints, ..cfg_for(p, 500) };
        let truths = simulate_truth(&cfg, 1).unwrap();
        for t in &truths {
            assert_eq!(t.u_a, t.u_astar);
            assert_eq!(t.t_a_ma, t.t_a_mastar);
            assert_eq!(t.t_a_ma, t.t_astar_mastar);
            assert_eq!(t.t_a_ma, t.t_astar_ma);
        }
        let o = oracle_effects(&truths).unwrap();
        assert_eq!((o.de, o.ie, o.te), (0.0, 0.0, 0.0));
    }

    #[test]
    fn no_direct_pathway() {
        let mut p = fixture();
        p.survival.zeta = [0.0; 4];
        p.survival.gamma2 = [0.0; 2];
        p.survival.gamma1 = [0.0; 2];
        p.survival.baseline_treated = p.survival.baseline_control.clone();
        let truths = simulate_truth(&cfg_for(p, 300), 2).unwrap();
        for t in &truths {
            assert_eq!(t.t_a_mastar, t.t_astar_mastar);
        }
    }

    #[test]
    fn pure_direct_config_ties_mediated_worlds() {
        let mut p = fixture();
        p.mediator.beta1[0] = 0.0;
        p.mediator.beta1[3] = 0.0;
        p.mediator.beta1[4] = 0.0;
        for k in 0..4 {
            p.mediator.psi[k] = [0.0; 5];
        }
        p.mediator.beta1[1] = 0.0;
        p.mediator.beta1[2] = 0.0;
        let truths = simulate_truth(&cfg_for(p, 300), 3).unwrap();
        for t in &truths {
            assert_eq!(t.t_a_ma, t.t_a_mastar);
        }
    }

    #[test]
    fn telescoping_and_bounds() {
        let truths = simulate_truth(&cfg_for(fixture(), 400), 4).unwrap();
        let o = oracle_effects(&truths).unwrap();
        assert_eq!(o.te, o.de + o.ie);
        for t in &truths {
            for v in [t.t_a_ma, t.t_a_mastar, t.t_astar_mastar, t.t_astar_ma] {
                assert!(v > 0.0 && v <= 15.0);
            }
            assert!(t.u_a >= t.u_astar);
        }
    }

    #[test]
    fn sampled_pairs_follow_the_joint_law() {
        let cfg = cfg_for(fixture(), 40_000);
        let truths = simulate_truth(&cfg, 5).unwrap();
        for (s, j) in cfg.joints.iter().enumerate() {
            let sub: Vec<&ScmTruth> = truths.iter().filter(|t| t.stratum == s).collect();
            let n = sub.len() as f64;
            for a in 0..3 {
                for b in 0..3 {
                    let c = sub.iter().filter(|t| t.u_astar as usize == a && t.u_a as usize == b).count() as f64;
                    let p = j.p[a][b];
                    let se = (p * (1.0 - p) / n).sqrt();
                    assert!((c / n - p).abs() <= 3.0 * se + 1e-12, "cell ({a},{b})");
                }
            }
        }
    }

    #[test]
    fn factual_mean_matches_plug_in_rmst() {
        let p = fixture();
        let cfg = cfg_for(p.clone(), 20_000);
        let truths = simulate_truth(&cfg, 6).unwrap();
        let o = oracle_effects(&truths).unwrap();
        let v: Vec<f64> = truths.iter().map(|t| t.t_a_ma).collect();
        let se_o = stats::std_error(&v);
        let d = decompose(&p, &weights(), &RhoPolicy::Global(0.5), &ReferenceLevels::default(), &McSettings { draws: 4000, seed: 1 }, InfeasiblePolicy::SkipDraw).unwrap();
        let se = (se_o.powi(2) + d.worlds_se.treated.powi(2)).sqrt();
        assert!((o.world_means[0] - d.worlds.treated).abs() < 3.0 * se, "{} vs {}", o.world_means[0], d.worlds.treated);
    }

    #[test]
    fn observation_is_consistent() {
        let cfg = ScmConfig { noise_sd: Some(0.0), ..cfg_for(fixture(), 300) };
        let truths = simulate_truth(&cfg, 7).unwrap();
        let obs = emit_observational(&cfg, &truths, 8).unwrap();
        for (t, s) in truths.iter().zip(&obs.subjects) {
            let (u, m) = if s.arm == 1 { (t.u_a, &t.m_a) } else { (t.u_astar, &t.m_astar) };
            assert_eq!(s.u, u);
            let ev = if s.arm == 1 { t.event_a } else { t.event_astar };
            assert_eq!(s.event, ev.is_some_and(|v| v <= 15.0));
            for v in &s.visits {
                assert_eq!(v.m_obs, m.value(v.t));
            }
        }
    }

    #[test]
    fn dropout_is_monotone() {
        let mut cfg = cfg_for(fixture(), 500);
        cfg.schedule = VisitSchedule::annual(8, 0.3);
        let truths = simulate_truth(&cfg, 9).unwrap();
        let obs = emit_observational(&cfg, &truths, 10).unwrap();
        let mut short = 0;
        for s in &obs.subjects {
            for (k, v) in s.visits.iter().enumerate() {
                assert_eq!(v.t, k as f64);
            }
            short += usize::from(s.visits.len() < 9);
        }
        assert!(short > 0);
    }

    #[test]
    fn km_on_censored_treated_arm_matches_truth() {
        let mut cfg = cfg_for(fixture(), 20_000);
        cfg.censoring.exp_rate = 0.07;
        let truths = simulate_truth(&cfg, 11).unwrap();
        let obs = emit_observational(&cfg, &truths, 12).unwrap();
        let censored = obs.subjects.iter().filter(|s| !s.event && s.exit_time < 15.0).count() as f64;
        assert!(censored / obs.len() as f64 > 0.3);
        let km = km_restricted_auc(&obs.outcomes(1), 15.0).unwrap();
        let v: Vec<f64> = truths.iter().map(|t| t.t_a_ma).collect();
        let se = (km.se.powi(2) + stats::std_error(&v).powi(2)).sqrt();
        assert!((km.estimate - stats::mean(&v)).abs() < 3.0 * se);
    }

    #[test]
    fn randomization_is_balanced() {
        let cfg = cfg_for(fixture(), 100_000);
        let truths = simulate_truth(&cfg, 13).unwrap();
        let n = truths.len() as f64;
        let a: Vec<f64> = truths.iter().map(|t| t.arm as f64).collect();
        let corr = |x: Vec<f64>| {
            let (ma, mx) = (stats::mean(&a), stats::mean(&x));
            let cov: f64 = a.iter().zip(&x).map(|(p, q)| (p - ma) * (q - mx)).sum::<f64>() / n;
            cov / (stats::variance(&a) * stats::variance(&x)).sqrt()
        };
        // |corr| · sqrt(n) is approximately standard normal; 2.576 is the 1% level
        for x in [
            truths.iter().map(|t| t.r[0]).collect::<Vec<_>>(),
            truths.iter().map(|t| t.w[0]).collect(),
            truths.iter().map(|t| t.u_a as f64).collect(),
        ] {
            assert!(corr(x).abs() * n.sqrt() < 2.576);
        }
        // chi-square for arm × (u_astar, u_a) over the six monotone cells, 5 df, 1% critical value 15.09
        let mut tab = [[0.0f64; 9]; 2];
        for t in &truths {
            tab[t.arm as usize][t.u_astar as usize * 3 + t.u_a as usize] += 1.0;
        }
        let mut chi = 0.0;
        for c in 0..9 {
            let col = tab[0][c] + tab[1][c];
            if col == 0.0 {
                continue;
            }
            for r in 0..2 {
                let row: f64 = tab[r].iter().sum();
                let e = row * col / n;
                chi += (tab[r][c] - e).powi(2) / e;
            }
        }
        assert!(chi < 15.09, "{chi}");
    }

    #[test]
    fn inconsistent_joint_is_rejected() {
        let mut cfg = cfg_for(fixture(), 10);
        cfg.joints[0].p[0][0] += 0.01;
        cfg.joints[0].p[0][1] -= 0.01;
        assert!(simulate_truth(&cfg, 1).is_err());
    }
}
