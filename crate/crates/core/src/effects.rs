//! Natural direct and indirect effects on the restricted mean event-free
//! time, with treatment `a = 1` and control `a* = 0`.
//!
//! With `Q(a, m, u)` the RMST for hazard arm `a`, trajectory `m` and
//! confounder level `u` at one random-effect draw, the four β terms are
//! differences of `Q` against the references `(m†, u†)`:
//!
//! * `β_m(a, m)     = Q(a, m, u†) − Q(a, m†, u†)`
//! * `β_u(a, u)     = Q(a, m†, u) − Q(a, m†, u†)`
//! * `β_mu(a, m, u) = Q(a, m, u) − Q(a, m†, u) − Q(a, m, u†) + Q(a, m†, u†)`
//! * `β̄(a)         = Q(a, m†, u†)`
//!
//! and the decomposition `DE = DE^(r) − Δ_DE + δ`, `IE = IE^(r) + Δ_IE − δ`
//! follows by summing them against the confounder laws. Only `δ` involves
//! the cross-world joint law of `(U_{a*}, U_a)`.
//!
//! All terms share one set of antithetic random-effect draws. Per-draw
//! quantities are stored per stratum so that ρ sweeps and bounds reuse them.

use std::collections::BTreeMap;

use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::CubicSpline;
use crate::confounder::{confounder_probs, joint_from_rho, JointConfounderMatrix, MarginalPair};
use crate::error::{Error, Result};
use crate::mediator::{trajectory, x_design, MediatorPath, RandomEffects, RandomEffectsLaw};
use crate::model::ModelParams;
use crate::polytope::{optimize_linear_over_polytope, PolytopeConstraint};
use crate::rng::{domain, substream};
use crate::stats;
use crate::survival::{panel_edges, FunctionalKind, NodeGrid, SubjectHazard, SurvivalParams};

pub const DEFAULT_MC_DRAWS: usize = 2000;
const IDENTITY_TOL: f64 = 1e-10;

/// One baseline-covariate stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub label: String,
    pub w: Vec<f64>,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumWeights {
    pub strata: Vec<Stratum>,
}

impl StratumWeights {
    pub fn single(w: Vec<f64>) -> Self {
        StratumWeights {
            strata: vec![Stratum {
                label: "all".into(),
                w,
                mass: 1.0,
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strata.is_empty() {
            return Err(Error::invalid("at least one stratum is required"));
        }
        if self.strata.iter().any(|s| !(s.mass >= 0.0 && s.mass.is_finite())) {
            return Err(Error::invalid("stratum masses must be nonnegative"));
        }
        let total: f64 = self.strata.iter().map(|s| s.mass).sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::invalid(format!("stratum masses sum to {total}, not 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ReferenceTrajectory {
    /// `M(t) = M(0)`, so the trajectory functional is identically zero.
    #[default]
    BaselineConstant,
    /// `M(t) = M(0) + slope · t`.
    Linear { slope: f64 },
}

impl ReferenceTrajectory {
    pub fn path(&self) -> CubicSpline {
        let mut s = CubicSpline::constant(0.0);
        if let ReferenceTrajectory::Linear { slope } = self {
            s.slope = *slope;
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceLevels {
    #[serde(default)]
    pub u_ref: u8,
    #[serde(default)]
    pub m_ref: ReferenceTrajectory,
}

impl Default for ReferenceLevels {
    fn default() -> Self {
        ReferenceLevels {
            u_ref: 0,
            m_ref: ReferenceTrajectory::BaselineConstant,
        }
    }
}

impl ReferenceLevels {
    pub fn validate(&self) -> Result<()> {
        if self.u_ref > 2 {
            return Err(Error::invalid("reference confounder level must be 0, 1 or 2"));
        }
        Ok(())
    }
}

/// How ρ is chosen per stratum. `Min` and `Max` put every stratum at the ρ
/// endpoint that minimises (respectively maximises) its δ, hence DE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoPolicy {
    Global(f64),
    PerStratum(BTreeMap<String, f64>),
    Min,
    Max,
}

impl RhoPolicy {
    pub fn describe(&self) -> String {
        match self {
            RhoPolicy::Global(r) => format!("global:{r}"),
            RhoPolicy::PerStratum(_) => "per_stratum".into(),
            RhoPolicy::Min => "min".into(),
            RhoPolicy::Max => "max".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InfeasiblePolicy {
    /// Report the infeasible strata as an error; posterior sweeps drop the draw.
    #[default]
    SkipDraw,
    /// Drop infeasible strata and renormalise the remaining masses.
    SkipAndReweight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McSettings {
    pub draws: usize,
    pub seed: u64,
}

impl Default for McSettings {
    fn default() -> Self {
        McSettings {
            draws: DEFAULT_MC_DRAWS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Components {
    pub de: f64,
    pub ie: f64,
    pub te: f64,
    pub de_r: f64,
    pub ie_r: f64,
    pub delta_de: f64,
    pub delta_ie: f64,
    pub delta: f64,
}

impl Components {
    fn from_parts(de_r: f64, ie_r: f64, delta_de: f64, delta_ie: f64, delta: f64) -> Self {
        let de = de_r - delta_de + delta;
        let ie = ie_r + delta_ie - delta;
        Components {
            de,
            ie,
            te: de + ie,
            de_r,
            ie_r,
            delta_de,
            delta_ie,
            delta,
        }
    }
}

/// Expected restricted times in the three worlds entering the contrasts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WorldMeans {
    /// `E[T_{a, M_a}]`
    pub treated: f64,
    /// `E[T_{a, M_{a*}}]`
    pub cross: f64,
    /// `E[T_{a*, M_{a*}}]`
    pub control: f64,
}

/// Residuals of the identities every decomposition must satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelfChecks {
    /// `|DE − (E[T_{a,M_{a*}}] − E[T_{a*,M_{a*}}])|`
    pub de_world: f64,
    /// `|IE − (E[T_{a,M_a}] − E[T_{a,M_{a*}}])|`
    pub ie_world: f64,
    /// `|TE − (DE + IE)|`
    pub te_sum: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectDecomposition {
    #[serde(flatten)]
    pub value: Components,
    pub mc_se: Components,
    pub worlds: WorldMeans,
    pub worlds_se: WorldMeans,
    pub rho_policy: String,
    /// ρ used per stratum label.
    pub rho: BTreeMap<String, f64>,
    pub references: ReferenceLevels,
    pub mc_draws: usize,
    pub skipped_strata: Vec<String>,
    pub checks: SelfChecks,
}

/// The four β terms at one random-effect draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaTerms {
    pub beta_m: f64,
    pub beta_u: f64,
    pub beta_mu: f64,
    pub beta_bar: f64,
}

/// β terms for arm `a`, mediator path `m` and level `u` at frailty `r0`.
pub fn beta_terms(
    params: &ModelParams,
    a: u8,
    w: &[f64],
    r0: f64,
    m: &dyn MediatorPath,
    u: u8,
    refs: &ReferenceLevels,
) -> Result<BetaTerms> {
    refs.validate()?;
    let sp = &params.survival;
    let m_ref = refs.m_ref.path();
    let q = |path: &dyn MediatorPath, uu: u8| SubjectHazard::new(sp, a, uu, w, path, r0).rmst(sp.t_max);
    let q_mu = q(m, u);
    let q_m_ur = q(m, refs.u_ref);
    let q_mr_u = q(&m_ref, u);
    let q_ref = q(&m_ref, refs.u_ref);
    Ok(BetaTerms {
        beta_m: q_m_ur - q_ref,
        beta_u: q_mr_u - q_ref,
        beta_mu: q_mu - q_mr_u - q_m_ur + q_ref,
        beta_bar: q_ref,
    })
}

/// Per-unit (antithetic pair averaged) quantities for one stratum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UnitTerms {
    pub de_r: f64,
    pub ie_r: f64,
    pub delta_de: f64,
    pub delta_ie: f64,
    /// `E[T_{a,M_a}]` contribution.
    pub t_treated: f64,
    /// `E[T_{a*,M_{a*}}]` contribution.
    pub t_control: f64,
    /// `β_mu(a, m(a*, u'), u)` at `[u'][u]`.
    pub b: [[f64; 3]; 3],
    /// `Q(a, m(a*, u'), u)` at `[u'][u]`.
    pub qx: [[f64; 3]; 3],
}

impl UnitTerms {
    fn add_scaled(&mut self, o: &UnitTerms, s: f64) {
        self.de_r += s * o.de_r;
        self.ie_r += s * o.ie_r;
        self.delta_de += s * o.delta_de;
        self.delta_ie += s * o.delta_ie;
        self.t_treated += s * o.t_treated;
        self.t_control += s * o.t_control;
        for i in 0..3 {
            for j in 0..3 {
                self.b[i][j] += s * o.b[i][j];
                self.qx[i][j] += s * o.qx[i][j];
            }
        }
    }
}

/// Integration panels shared by every trajectory under the current-change
/// functional.
struct Panels {
    coarse: Vec<f64>,
}

impl Panels {
    fn new(sp: &SurvivalParams) -> Self {
        let bases = crate::mediator::MediatorBases::standard();
        let mut knots = bases.population.knots();
        knots.extend(bases.random.knots());
        Panels {
            coarse: panel_edges(&sp.cut_union(), &knots, sp.t_max),
        }
    }
}

/// `Q[a][u]` for one trajectory.
fn q_row(sp: &SurvivalParams, path: &CubicSpline, w: &[f64], r0: f64, panels: Option<&Panels>) -> [[f64; 3]; 2] {
    let mut out = [[0.0; 3]; 2];
    match (sp.functional_kind, panels) {
        (FunctionalKind::CurrentChange, Some(p)) => {
            let coarse = NodeGrid::new(p.coarse.clone(), path);
            let fine = coarse.refined(path);
            for a in 0..2u8 {
                for u in 0..3u8 {
                    let eta = sp.linear_predictor(a, u, w, r0);
                    let load = sp.g_loading(a, u);
                    let base = sp.baseline(a);
                    let r1 = coarse.rmst(base, eta, load);
                    let r2 = fine.rmst(base, eta, load);
                    out[a as usize][u as usize] = if (r1 - r2).abs() <= 1e-8 * r2.abs() {
                        r2
                    } else {
                        SubjectHazard::new(sp, a, u, w, path, r0).rmst(sp.t_max)
                    };
                }
            }
        }
        _ => {
            for a in 0..2u8 {
                for u in 0..3u8 {
                    out[a as usize][u as usize] = SubjectHazard::new(sp, a, u, w, path, r0).rmst(sp.t_max);
                }
            }
        }
    }
    out
}

fn unit_terms_at(
    params: &ModelParams,
    w: &[f64],
    p1: &[f64; 3],
    p0: &[f64; 3],
    r: &RandomEffects,
    refs: &ReferenceLevels,
    m_ref: &CubicSpline,
    panels: Option<&Panels>,
) -> Result<UnitTerms> {
    let sp = &params.survival;
    let r0 = r.r[0];
    // trajectory index: a_m * 3 + u_m, and 6 for the reference
    let mut q = [[[0.0; 3]; 7]; 2];
    for a_m in 0..2u8 {
        for u_m in 0..3u8 {
            let path = trajectory(&params.mediator, &x_design(a_m, u_m), w, r)?;
            let row = q_row(sp, &path, w, r0, panels);
            for a in 0..2 {
                q[a][(a_m * 3 + u_m) as usize] = row[a];
            }
        }
    }
    let row = q_row(sp, m_ref, w, r0, panels);
    for a in 0..2 {
        q[a][6] = row[a];
    }
    let ur = refs.u_ref as usize;
    let beta_m = |a: usize, t: usize| q[a][t][ur] - q[a][6][ur];
    let beta_u = |a: usize, u: usize| q[a][6][u] - q[a][6][ur];
    let beta_mu = |a: usize, t: usize, u: usize| q[a][t][u] - q[a][6][u] - q[a][t][ur] + q[a][6][ur];
    let beta_bar = |a: usize| q[a][6][ur];
    let t = |a_m: usize, u_m: usize| a_m * 3 + u_m;

    let mut out = UnitTerms::default();
    for u in 0..3 {
        out.de_r += p0[u] * (beta_m(1, t(0, u)) - beta_m(0, t(0, u)));
        out.de_r += beta_u(1, u) * p1[u] - beta_u(0, u) * p0[u];
        out.ie_r += p1[u] * beta_m(1, t(1, u)) - p0[u] * beta_m(1, t(0, u));
        out.delta_de += p0[u] * beta_mu(0, t(0, u), u);
        out.delta_ie += p1[u] * beta_mu(1, t(1, u), u);
        out.t_treated += p1[u] * q[1][t(1, u)][u];
        out.t_control += p0[u] * q[0][t(0, u)][u];
        for v in 0..3 {
            out.b[u][v] = beta_mu(1, t(0, u), v);
            out.qx[u][v] = q[1][t(0, u)][v];
        }
    }
    out.de_r += beta_bar(1) - beta_bar(0);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct StratumTerms {
    pub label: String,
    pub mass: f64,
    pub marginals: MarginalPair,
    pub units: Vec<UnitTerms>,
}

impl StratumTerms {
    /// Draw-averaged δ weight matrix `E_r[β_mu(a, m(a*, u'), u)]`.
    pub fn delta_weight(&self) -> Vec<Vec<f64>> {
        let mut w = vec![vec![0.0; 3]; 3];
        for u in &self.units {
            for i in 0..3 {
                for j in 0..3 {
                    w[i][j] += u.b[i][j];
                }
            }
        }
        let n = self.units.len() as f64;
        for v in w.iter_mut().flatten() {
            *v /= n;
        }
        w
    }
}

/// Monte Carlo terms for every stratum, computed once and reused.
#[derive(Debug, Clone)]
pub struct EffectsPrep {
    pub strata: Vec<StratumTerms>,
    pub references: ReferenceLevels,
    pub mc_draws: usize,
}

/// Standard normal vectors for `pairs` antithetic units.
pub fn antithetic_normals(mc: &McSettings) -> Vec<[f64; 4]> {
    let pairs = mc.draws.div_ceil(2).max(1);
    (0..pairs)
        .map(|i| {
            let mut rng = substream(mc.seed, domain::EFFECTS_MC, i as u64);
            std::array::from_fn(|_| rand::Rng::sample(&mut rng, StandardNormal))
        })
        .collect()
}

pub fn prepare(params: &ModelParams, weights: &StratumWeights, refs: &ReferenceLevels, mc: &McSettings) -> Result<EffectsPrep> {
    params.validate()?;
    weights.validate()?;
    refs.validate()?;
    if mc.draws == 0 {
        return Err(Error::invalid("at least one Monte Carlo draw is required"));
    }
    let law: RandomEffectsLaw = params.re_law()?;
    let normals = antithetic_normals(mc);
    let panels = (params.survival.functional_kind == FunctionalKind::CurrentChange).then(|| Panels::new(&params.survival));
    let m_ref = refs.m_ref.path();
    let mut strata = Vec::with_capacity(weights.strata.len());
    for s in &weights.strata {
        if s.w.len() != params.w_dim() {
            return Err(Error::invalid(format!("stratum `{}` has the wrong covariate dimension", s.label)));
        }
        let p1 = confounder_probs(&params.confounder, 1, &s.w);
        let p0 = confounder_probs(&params.confounder, 0, &s.w);
        let units: Vec<UnitTerms> = normals
            .par_iter()
            .map(|z| {
                let plus = law.transform(z);
                let minus = RandomEffects { r: plus.r.map(|v| -v) };
                let a = unit_terms_at(params, &s.w, &p1, &p0, &plus, refs, &m_ref, panels.as_ref())?;
                let b = unit_terms_at(params, &s.w, &p1, &p0, &minus, refs, &m_ref, panels.as_ref())?;
                let mut u = UnitTerms::default();
                u.add_scaled(&a, 0.5);
                u.add_scaled(&b, 0.5);
                Ok(u)
            })
            .collect::<Result<_>>()?;
        strata.push(StratumTerms {
            label: s.label.clone(),
            mass: s.mass,
            marginals: MarginalPair {
                mu: p1.to_vec(),
                phi: p0.to_vec(),
            },
            units,
        });
    }
    Ok(EffectsPrep {
        strata,
        references: *refs,
        mc_draws: 2 * normals.len(),
    })
}

/// Aggregated per-unit values of every reported quantity.
struct UnitSeries {
    comps: Vec<Components>,
    worlds: Vec<WorldMeans>,
}

impl EffectsPrep {
    fn units(&self) -> usize {
        self.strata.first().map_or(0, |s| s.units.len())
    }

    /// Joint tables per stratum for a ρ policy; `None` marks infeasible strata.
    pub fn joints_for(&self, policy: &RhoPolicy) -> Result<Vec<Option<(f64, JointConfounderMatrix)>>> {
        self.strata
            .iter()
            .map(|s| {
                let rho = match policy {
                    RhoPolicy::Global(r) => *r,
                    RhoPolicy::PerStratum(map) => *map.get(&s.label).ok_or_else(|| {
                        Error::invalid(format!("no rho given for stratum `{}`", s.label))
                    })?,
                    RhoPolicy::Min | RhoPolicy::Max => {
                        let w = s.delta_weight();
                        let (Ok(j0), Ok(j1)) = (joint_from_rho(&s.marginals, 0.0), joint_from_rho(&s.marginals, 1.0)) else {
                            return Ok(None);
                        };
                        let (d0, d1) = (j0.dot(&w), j1.dot(&w));
                        let pick_one = if matches!(policy, RhoPolicy::Min) { d1 < d0 } else { d1 > d0 };
                        return Ok(Some(if pick_one { (1.0, j1) } else { (0.0, j0) }));
                    }
                };
                if !(0.0..=1.0).contains(&rho) {
                    return Err(Error::invalid("rho must lie in [0, 1]"));
                }
                match joint_from_rho(&s.marginals, rho) {
                    Ok(j) => Ok(Some((rho, j))),
                    Err(Error::MonotonicityInfeasible { .. }) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect()
    }

    fn series(&self, joints: &[Option<JointConfounderMatrix>], masses: &[f64]) -> UnitSeries {
        let n = self.units();
        let mut comps = Vec::with_capacity(n);
        let mut worlds = Vec::with_capacity(n);
        for i in 0..n {
            let (mut de_r, mut ie_r, mut dde, mut die, mut delta) = (0.0, 0.0, 0.0, 0.0, 0.0);
            let mut wm = WorldMeans::default();
            for ((s, j), &mass) in self.strata.iter().zip(joints).zip(masses) {
                let Some(j) = j else { continue };
                if mass == 0.0 {
                    continue;
                }
                let u = &s.units[i];
                let mut d = 0.0;
                let mut cross = 0.0;
                for a in 0..3 {
                    for b in 0..3 {
                        d += j.p[a][b] * u.b[a][b];
                        cross += j.p[a][b] * u.qx[a][b];
                    }
                }
                de_r += mass * u.de_r;
                ie_r += mass * u.ie_r;
                dde += mass * u.delta_de;
                die += mass * u.delta_ie;
                delta += mass * d;
                wm.treated += mass * u.t_treated;
                wm.control += mass * u.t_control;
                wm.cross += mass * cross;
            }
            comps.push(Components::from_parts(de_r, ie_r, dde, die, delta));
            worlds.push(wm);
        }
        UnitSeries { comps, worlds }
    }

    /// Decomposition for explicit per-stratum joint tables (any table with
    /// the stratum's marginals, monotone or not).
    pub fn decompose_with_joints(
        &self,
        joints: &[Option<JointConfounderMatrix>],
        rho: BTreeMap<String, f64>,
        policy_label: String,
    ) -> Result<EffectDecomposition> {
        let mut masses: Vec<f64> = self.strata.iter().map(|s| s.mass).collect();
        let skipped: Vec<String> = self
            .strata
            .iter()
            .zip(joints)
            .filter(|(_, j)| j.is_none())
            .map(|(s, _)| s.label.clone())
            .collect();
        if !skipped.is_empty() {
            let kept: f64 = masses.iter().zip(joints).filter(|(_, j)| j.is_some()).map(|(m, _)| m).sum();
            if kept <= 0.0 {
                return Err(Error::InfeasibleStratum(skipped));
            }
            for (m, j) in masses.iter_mut().zip(joints) {
                *m = if j.is_some() { *m / kept } else { 0.0 };
            }
        }
        let series = self.series(joints, &masses);
        let col = |f: fn(&Components) -> f64| -> (f64, f64) {
            let v: Vec<f64> = series.comps.iter().map(f).collect();
            (stats::mean(&v), stats::std_error(&v))
        };
        let wcol = |f: fn(&WorldMeans) -> f64| -> (f64, f64) {
            let v: Vec<f64> = series.worlds.iter().map(f).collect();
            (stats::mean(&v), stats::std_error(&v))
        };
        let (de_r, de_r_se) = col(|c| c.de_r);
        let (ie_r, ie_r_se) = col(|c| c.ie_r);
        let (dde, dde_se) = col(|c| c.delta_de);
        let (die, die_se) = col(|c| c.delta_ie);
        let (delta, delta_se) = col(|c| c.delta);
        let (_, de_se) = col(|c| c.de);
        let (_, ie_se) = col(|c| c.ie);
        let (_, te_se) = col(|c| c.te);
        let value = Components::from_parts(de_r, ie_r, dde, die, delta);
        let (tt, tt_se) = wcol(|w| w.treated);
        let (tx, tx_se) = wcol(|w| w.cross);
        let (tc, tc_se) = wcol(|w| w.control);
        let worlds = WorldMeans { treated: tt, cross: tx, control: tc };
        let scale = 1.0 + tt.abs().max(tc.abs());
        let de_world = (value.de - (tx - tc)).abs();
        let ie_world = (value.ie - (tt - tx)).abs();
        let te_sum = (value.te - (value.de + value.ie)).abs();
        let checks = SelfChecks {
            de_world,
            ie_world,
            te_sum,
            passed: de_world <= IDENTITY_TOL * scale && ie_world <= IDENTITY_TOL * scale && te_sum == 0.0,
        };
        Ok(EffectDecomposition {
            value,
            mc_se: Components {
                de: de_se,
                ie: ie_se,
                te: te_se,
                de_r: de_r_se,
                ie_r: ie_r_se,
                delta_de: dde_se,
                delta_ie: die_se,
                delta: delta_se,
            },
            worlds,
            worlds_se: WorldMeans {
                treated: tt_se,
                cross: tx_se,
                control: tc_se,
            },
            rho_policy: policy_label,
            rho,
            references: self.references,
            mc_draws: self.mc_draws,
            skipped_strata: skipped,
            checks,
        })
    }

    pub fn decompose(&self, policy: &RhoPolicy, infeasible: InfeasiblePolicy) -> Result<EffectDecomposition> {
        let chosen = self.joints_for(policy)?;
        let bad: Vec<String> = self
            .strata
            .iter()
            .zip(&chosen)
            .filter(|(_, j)| j.is_none())
            .map(|(s, _)| s.label.clone())
            .collect();
        if !bad.is_empty() && infeasible == InfeasiblePolicy::SkipDraw {
            return Err(Error::InfeasibleStratum(bad));
        }
        let rho = self
            .strata
            .iter()
            .zip(&chosen)
            .filter_map(|(s, j)| j.as_ref().map(|(r, _)| (s.label.clone(), *r)))
            .collect();
        let joints: Vec<Option<JointConfounderMatrix>> = chosen.into_iter().map(|j| j.map(|(_, m)| m)).collect();
        self.decompose_with_joints(&joints, rho, policy.describe())
    }

    pub fn rho_sweep(&self, grid: &[f64], infeasible: InfeasiblePolicy) -> Result<RhoSweep> {
        let points = grid
            .iter()
            .map(|&r| Ok((r, self.decompose(&RhoPolicy::Global(r), infeasible)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(RhoSweep {
            points,
            min: self.decompose(&RhoPolicy::Min, infeasible)?,
            max: self.decompose(&RhoPolicy::Max, infeasible)?,
        })
    }

    /// Bounds on DE and IE over joint laws with the stratum marginals.
    pub fn relaxed_bounds(&self) -> Result<EffectBounds> {
        let base = self.decompose_with_joints(
            &self.strata.iter().map(|s| Some(JointConfounderMatrix::outer(&s.marginals))).collect::<Vec<_>>(),
            BTreeMap::new(),
            "independence".into(),
        )?;
        let fixed_de = base.value.de_r - base.value.delta_de;
        let fixed_ie = base.value.ie_r + base.value.delta_ie;
        let mut un = (0.0, 0.0);
        let mut mono = Some((0.0, 0.0));
        let mut per_stratum = Vec::new();
        for s in &self.strata {
            let w = s.delta_weight();
            let u = optimize_linear_over_polytope(&s.marginals, &w, PolytopeConstraint::Unconstrained)?;
            un.0 += s.mass * u.min_value;
            un.1 += s.mass * u.max_value;
            let m = optimize_linear_over_polytope(&s.marginals, &w, PolytopeConstraint::Monotone).ok();
            mono = match (mono, &m) {
                (Some(acc), Some(o)) => Some((acc.0 + s.mass * o.min_value, acc.1 + s.mass * o.max_value)),
                _ => None,
            };
            per_stratum.push(StratumDeltaBounds {
                label: s.label.clone(),
                unconstrained: (u.min_value, u.max_value),
                monotone: m.map(|o| (o.min_value, o.max_value)),
            });
        }
        let to_effects = |d: (f64, f64)| EffectInterval {
            de: (fixed_de + d.0, fixed_de + d.1),
            ie: (fixed_ie - d.1, fixed_ie - d.0),
            delta: d,
        };
        Ok(EffectBounds {
            unconstrained: to_effects(un),
            monotone: mono.map(to_effects),
            te: base.value.te,
            per_stratum,
            references: self.references,
            mc_draws: self.mc_draws,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoSweep {
    pub points: Vec<(f64, EffectDecomposition)>,
    pub min: EffectDecomposition,
    pub max: EffectDecomposition,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectInterval {
    pub de: (f64, f64),
    pub ie: (f64, f64),
    pub delta: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumDeltaBounds {
    pub label: String,
    pub unconstrained: (f64, f64),
    pub monotone: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectBounds {
    pub unconstrained: EffectInterval,
    /// `None` when some stratum admits no monotone table.
    pub monotone: Option<EffectInterval>,
    pub te: f64,
    pub per_stratum: Vec<StratumDeltaBounds>,
    pub references: ReferenceLevels,
    pub mc_draws: usize,
}

pub fn decompose(
    params: &ModelParams,
    weights: &StratumWeights,
    rho_policy: &RhoPolicy,
    refs: &ReferenceLevels,
    mc: &McSettings,
    infeasible: InfeasiblePolicy,
) -> Result<EffectDecomposition> {
    prepare(params, weights, refs, mc)?.decompose(rho_policy, infeasible)
}

pub fn rho_sweep(
    params: &ModelParams,
    weights: &StratumWeights,
    refs: &ReferenceLevels,
    mc: &McSettings,
    grid: &[f64],
) -> Result<RhoSweep> {
    prepare(params, weights, refs, mc)?.rho_sweep(grid, InfeasiblePolicy::SkipDraw)
}

pub fn relaxed_bounds(params: &ModelParams, weights: &StratumWeights, refs: &ReferenceLevels, mc: &McSettings) -> Result<EffectBounds> {
    prepare(params, weights, refs, mc)?.relaxed_bounds()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProportionMediated {
    pub pm_mean: f64,
    pub pm_interval: (f64, f64),
    pub n_discarded: usize,
    pub n_used: usize,
}

/// `IE / TE` over posterior draws with nonnegative DE and IE.
pub fn proportion_mediated(draws: &[(f64, f64)]) -> Result<ProportionMediated> {
    if draws.is_empty() {
        return Err(Error::invalid("proportion mediated needs at least one draw"));
    }
    let kept: Vec<f64> = draws
        .iter()
        .filter(|(de, ie)| *de >= 0.0 && *ie >= 0.0 && de + ie > 0.0)
        .map(|(de, ie)| ie / (de + ie))
        .collect();
    if kept.is_empty() {
        return Err(Error::AllDrawsDiscarded);
    }
    let s = stats::summarize(&kept);
    Ok(ProportionMediated {
        pm_mean: s.mean,
        pm_interval: (s.q025, s.q975),
        n_discarded: draws.len() - kept.len(),
        n_used: kept.len(),
    })
}

pub fn proportion_mediated_from(decomps: &[EffectDecomposition]) -> Result<ProportionMediated> {
    let pairs: Vec<(f64, f64)> = decomps.iter().map(|d| (d.value.de, d.value.ie)).collect();
    proportion_mediated(&pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::confounder::ConfounderParams;
    use crate::mediator::MediatorParams;
    use crate::survival::PiecewiseHazard;

    pub(crate) fn fixture(kind: FunctionalKind) -> ModelParams {
        let mut med = MediatorParams::zeros(1);
        med.beta0 = 0.5;
        med.beta1 = [-0.3, 0.2, 0.4, -0.1, -0.2];
        med.beta2 = vec![0.3];
        med.alpha = [0.05, 0.1, -0.05, 0.02];
        med.psi[0] = [-0.06, 0.02, 0.03, -0.01, 0.0];
        med.sigma = 0.2;
        let mut sp = SurvivalParams::constant(0.05, 1, kind);
        sp.baseline_control = PiecewiseHazard::new(vec![0.0, 2.0, 6.0], vec![0.03, 0.05, 0.07]).unwrap();
        sp.baseline_treated = PiecewiseHazard::new(vec![0.0, 2.0, 6.0], vec![0.025, 0.04, 0.06]).unwrap();
        sp.gamma1 = [0.3, 0.6];
        sp.gamma2 = [-0.1, -0.2];
        sp.gamma3 = vec![0.4];
        sp.zeta = if kind == FunctionalKind::ThreeYearLegacy { [0.3, 0.2, -0.25, 0.1] } else { [0.8, 0.5, -0.6, 0.2] };
        sp.xi = 0.5;
        let mut cp = ConfounderParams::zeros(1);
        cp.phi0 = [0.1, -0.4];
        cp.phi1 = [0.4, 1.0];
        cp.phi2 = [vec![0.2], vec![0.3]];
        ModelParams {
            mediator: med,
            survival: sp,
            confounder: cp,
            re_covariance: [
                [0.25, 0.02, 0.0, 0.0],
                [0.02, 0.04, 0.01, 0.0],
                [0.0, 0.01, 0.04, 0.0],
                [0.0, 0.0, 0.0, 0.02],
            ],
        }
    }

    fn two_strata() -> StratumWeights {
        StratumWeights {
            strata: vec![
                Stratum { label: "w0".into(), w: vec![0.0], mass: 0.6 },
                Stratum { label: "w1".into(), w: vec![1.0], mass: 0.4 },
            ],
        }
    }

    #[test]
    fn beta_terms_vanish_at_references() {
        let p = fixture(FunctionalKind::ThreeYearLegacy);
        let refs = ReferenceLevels::default();
        let m = refs.m_ref.path();
        let b = beta_terms(&p, 1, &[0.0], 0.1, &m, 0, &refs).unwrap();
        assert_eq!((b.beta_m, b.beta_u, b.beta_mu), (0.0, 0.0, 0.0));
        let direct = SubjectHazard::new(&p.survival, 1, 0, &[0.0], &m, 0.1).rmst(15.0);
        assert_eq!(b.beta_bar, direct);
    }

    #[test]
    fn beta_u_differences_do_not_depend_on_u_ref() {
        let p = fixture(FunctionalKind::ThreeYearLegacy);
        let m = CubicSpline::constant(0.0);
        let r0 = ReferenceLevels { u_ref: 0, ..Default::default() };
        let r2 = ReferenceLevels { u_ref: 2, ..Default::default() };
        let d = |refs: &ReferenceLevels| {
            let a = beta_terms(&p, 1, &[1.0], 0.0, &m, 1, refs).unwrap().beta_u;
            let b = beta_terms(&p, 1, &[1.0], 0.0, &m, 2, refs).unwrap().beta_u;
            a - b
        };
        assert!((d(&r0) - d(&r2)).abs() < 1e-12);
    }

    #[test]
    fn beta_mu_vanishes_when_confounder_has_no_hazard_effect() {
        let mut p = fixture(FunctionalKind::ThreeYearLegacy);
        p.survival.zeta[1] = 0.0;
        p.survival.zeta[2] = 0.0;
        p.survival.gamma1 = [0.0; 2];
        p.survival.gamma2 = [0.0; 2];
        let path = crate::basis::make_population_basis().combine(&[0.2, 0.1, -0.1, 0.05]);
        for u in 0..3 {
            let b = beta_terms(&p, 1, &[1.0], 0.2, &path, u, &ReferenceLevels::default()).unwrap();
            assert!(b.beta_mu.abs() < 1e-13);
        }
        // with a U main effect the RMST scale is nonlinear and β_mu ≠ 0
        p.survival.gamma1 = [0.5, 1.0];
        let b = beta_terms(&p, 1, &[1.0], 0.2, &path, 2, &ReferenceLevels::default()).unwrap();
        assert!(b.beta_mu.abs() > 1e-4);
    }

    #[test]
    fn identities_hold_for_both_functionals() {
        for kind in [FunctionalKind::ThreeYearLegacy, FunctionalKind::CurrentChange] {
            let p = fixture(kind);
            let mc = McSettings { draws: 64, seed: 3 };
            let d = decompose(&p, &two_strata(), &RhoPolicy::Global(0.5), &ReferenceLevels::default(), &mc, InfeasiblePolicy::SkipDraw).unwrap();
            assert!(d.checks.passed, "{:?}", d.checks);
            let v = d.value;
            assert!((v.de - (v.de_r - v.delta_de + v.delta)).abs() < 1e-10);
            assert!((v.ie - (v.ie_r + v.delta_ie - v.delta)).abs() < 1e-10);
            assert_eq!(v.te, v.de + v.ie);
            assert_eq!(d.mc_draws, 64);
        }
    }

    #[test]
    fn null_treatment_gives_zero_effects() {
        let mut p = fixture(FunctionalKind::ThreeYearLegacy);
        p.mediator.beta1 = [0.0, 0.2, 0.4, 0.0, 0.0];
        for k in 0..4 {
            p.mediator.psi[k][0] = 0.0;
            p.mediator.psi[k][3] = 0.0;
            p.mediator.psi[k][4] = 0.0;
        }
        p.survival.baseline_treated = p.survival.baseline_control.clone();
        p.survival.gamma2 = [0.0; 2];
        p.survival.zeta[3] = 0.0;
        p.confounder.phi1 = [0.0; 2];
        let mc = McSettings { draws: 200, seed: 1 };
        for policy in [RhoPolicy::Global(0.0), RhoPolicy::Global(1.0), RhoPolicy::Min] {
            let d = decompose(&p, &two_strata(), &policy, &ReferenceLevels::default(), &mc, InfeasiblePolicy::SkipDraw).unwrap();
            for (v, se) in [(d.value.de, d.mc_se.de), (d.value.ie, d.mc_se.ie), (d.value.te, d.mc_se.te)] {
                assert!(v.abs() <= 3.0 * se + 1e-10, "{v} vs {se}");
            }
        }
    }

    #[test]
    fn rho_machinery() {
        let p = fixture(FunctionalKind::ThreeYearLegacy);
        let prep = prepare(&p, &two_strata(), &ReferenceLevels::default(), &McSettings { draws: 100, seed: 9 }).unwrap();
        let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let sweep = prep.rho_sweep(&grid, InfeasiblePolicy::SkipDraw).unwrap();
        let te0 = sweep.points[0].1.value.te;
        let de: Vec<f64> = sweep.points.iter().map(|(_, d)| d.value.de).collect();
        for (_, d) in &sweep.points {
            assert!((d.value.te - te0).abs() < 1e-12 * te0.abs().max(1.0));
        }
        // affine in ρ
        let slope = (de[10] - de[0]) / 1.0;
        for (i, v) in de.iter().enumerate() {
            let fit = de[0] + slope * grid[i];
            assert!((v - fit).abs() < 1e-10 * de[0].abs().max(1.0));
        }
        assert!(sweep.min.value.de <= de.iter().cloned().fold(f64::INFINITY, f64::min) + 1e-12);
        assert!(sweep.max.value.de >= de.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - 1e-12);
    }

    #[test]
    fn stratum_additivity_and_reference_invariance() {
        let p = fixture(FunctionalKind::ThreeYearLegacy);
        let mc = McSettings { draws: 60, seed: 5 };
        let refs = ReferenceLevels::default();
        let all = decompose(&p, &two_strata(), &RhoPolicy::Global(0.3), &refs, &mc, InfeasiblePolicy::SkipDraw).unwrap();
        let mut avg = Components::default();
        for s in two_strata().strata {
            let mass = s.mass;
            let one = decompose(&p, &StratumWeights { strata: vec![Stratum { mass: 1.0, ..s }] }, &RhoPolicy::Global(0.3), &refs, &mc, InfeasiblePolicy::SkipDraw).unwrap();
            avg.de += mass * one.value.de;
            avg.ie += mass * one.value.ie;
            avg.delta += mass * one.value.delta;
        }
        assert!((all.value.de - avg.de).abs() < 1e-12);
        assert!((all.value.ie - avg.ie).abs() < 1e-12);
        assert!((all.value.delta - avg.delta).abs() < 1e-12);

        let alt = ReferenceLevels { u_ref: 2, m_ref: ReferenceTrajectory::Linear { slope: 0.1 } };
        let other = decompose(&p, &two_strata(), &RhoPolicy::Global(0.3), &alt, &mc, InfeasiblePolicy::SkipDraw).unwrap();
        assert!((other.value.de - all.value.de).abs() < 1e-10);
        assert!((other.value.ie - all.value.ie).abs() < 1e-10);
        assert!((other.value.de_r - all.value.de_r).abs() > 1e-6);
    }

    #[test]
    fn delta_at_endpoints_matches_polytope_optimum() {
        let p = fixture(FunctionalKind::ThreeYearLegacy);
        let prep = prepare(&p, &StratumWeights::single(vec![1.0]), &ReferenceLevels::default(), &McSettings { draws: 40, seed: 2 }).unwrap();
        let s = &prep.strata[0];
        let o = optimize_linear_over_polytope(&s.marginals, &s.delta_weight(), PolytopeConstraint::Monotone).unwrap();
        let d0 = prep.decompose(&RhoPolicy::Global(0.0), InfeasiblePolicy::SkipDraw).unwrap().value.delta;
        let d1 = prep.decompose(&RhoPolicy::Global(1.0), InfeasiblePolicy::SkipDraw).unwrap().value.delta;
        assert!((d0.min(d1) - o.min_value).abs() < 1e-12);
        assert!((d0.max(d1) - o.max_value).abs() < 1e-12);
        let min = prep.decompose(&RhoPolicy::Min, InfeasiblePolicy::SkipDraw).unwrap();
        assert!((min.value.delta - o.min_value).abs() < 1e-12);
    }

    #[test]
    fn bounds_nest_and_collapse() {
        let p = fixture(FunctionalKind::ThreeYearLegacy);
        let mc = McSettings { draws: 40, seed: 4 };
        let b = relaxed_bounds(&p, &two_strata(), &ReferenceLevels::default(), &mc).unwrap();
        let m = b.monotone.unwrap();
        assert!(m.de.0 >= b.unconstrained.de.0 - 1e-12 && m.de.1 <= b.unconstrained.de.1 + 1e-12);
        assert!(m.ie.0 >= b.unconstrained.ie.0 - 1e-12 && m.ie.1 <= b.unconstrained.ie.1 + 1e-12);

        let mut q = p.clone();
        q.survival.zeta[1] = 0.0;
        q.survival.zeta[2] = 0.0;
        q.survival.gamma1 = [0.0; 2];
        q.survival.gamma2 = [0.0; 2];
        let b = relaxed_bounds(&q, &two_strata(), &ReferenceLevels::default(), &mc).unwrap();
        assert!((b.unconstrained.de.0 - b.unconstrained.de.1).abs() < 1e-12);
        assert!((b.unconstrained.ie.0 - b.unconstrained.ie.1).abs() < 1e-12);
    }

    #[test]
    fn no_additive_interaction_gives_zero_delta() {
        let mut p = fixture(FunctionalKind::CurrentChange);
        p.survival.zeta[1] = 0.0;
        p.survival.zeta[2] = 0.0;
        p.survival.gamma1 = [0.0; 2];
        p.survival.gamma2 = [0.0; 2];
        let d = decompose(&p, &two_strata(), &RhoPolicy::Global(0.5), &ReferenceLevels::default(), &McSettings { draws: 30, seed: 8 }, InfeasiblePolicy::SkipDraw).unwrap();
        let v = d.value;
        assert!(v.delta.abs() < 1e-12 && v.delta_de.abs() < 1e-12 && v.delta_ie.abs() < 1e-12);
        assert!((v.de - v.de_r).abs() < 1e-12 && (v.ie - v.ie_r).abs() < 1e-12);
    }

    #[test]
    fn unconstrained_bounds_match_grid_search() {
        let p = fixture(FunctionalKind::ThreeYearLegacy);
        let prep = prepare(&p, &two_strata(), &ReferenceLevels::default(), &McSettings { draws: 20, seed: 11 }).unwrap();
        let b = prep.relaxed_bounds().unwrap();
        let step = 0.02;
        let n = (1.0 / step) as usize;
        let mut agg = (0.0, 0.0);
        for s in &prep.strata {
            let w = s.delta_weight();
            let (mu, phi) = (&s.marginals.mu, &s.marginals.phi);
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for i in 0..=n {
                for j in 0..=n {
                    for k in 0..=n {
                        for l in 0..=n {
                            let (p00, p01, p10, p11) = (i as f64 * step, j as f64 * step, k as f64 * step, l as f64 * step);
                            let p02 = phi[0] - p00 - p01;
                            let p12 = phi[1] - p10 - p11;
                            let p20 = mu[0] - p00 - p10;
                            let p21 = mu[1] - p01 - p11;
                            let p22 = phi[2] - p20 - p21;
                            if [p02, p12, p20, p21, p22].iter().any(|v| *v < 0.0) {
                                continue;
                            }
                            let t = [[p00, p01, p02], [p10, p11, p12], [p20, p21, p22]];
                            let d: f64 = (0..3).flat_map(|a| (0..3).map(move |c| (a, c))).map(|(a, c)| t[a][c] * w[a][c]).sum();
                            lo = lo.min(d);
                            hi = hi.max(d);
                        }
                    }
                }
            }
            agg.0 += s.mass * lo;
            agg.1 += s.mass * hi;
        }
        let scale: f64 = prep.strata.iter().flat_map(|s| s.delta_weight().into_iter().flatten()).map(f64::abs).fold(0.0, f64::max);
        let tol = 4.0 * step * scale;
        let (dlo, dhi) = b.unconstrained.delta;
        assert!(dlo <= agg.0 + 1e-12 && agg.0 - dlo <= tol, "{dlo} {}", agg.0);
        assert!(dhi >= agg.1 - 1e-12 && dhi - agg.1 <= tol, "{dhi} {}", agg.1);
    }

    #[test]
    fn infeasible_strata_policies() {
        let mut p = fixture(FunctionalKind::ThreeYearLegacy);
        // treatment lowers the confounder sharply in stratum w1 only
        p.confounder.phi1 = [0.0, 0.0];
        p.confounder.phi2 = [vec![-3.0], vec![-3.0]];
        p.confounder.phi0 = [0.0, 0.0];
        let mut cp = p.confounder.clone();
        cp.phi1 = [-2.5, -2.5];
        p.confounder = cp;
        let mc = McSettings { draws: 10, seed: 1 };
        let r = decompose(&p, &two_strata(), &RhoPolicy::Global(0.5), &ReferenceLevels::default(), &mc, InfeasiblePolicy::SkipDraw);
        match r {
            Err(Error::InfeasibleStratum(v)) => assert!(!v.is_empty()),
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn proportion_mediated_examples() {
        let pm = proportion_mediated(&[(1.0, 1.0), (1.0, 1.0)]).unwrap();
        assert_eq!((pm.pm_mean, pm.n_discarded), (0.5, 0));
        let pm = proportion_mediated(&[(1.0, 1.0), (-1.0, 2.0)]).unwrap();
        assert_eq!((pm.pm_mean, pm.n_discarded), (0.5, 1));
        assert!(matches!(proportion_mediated(&[(-1.0, 1.0)]), Err(Error::AllDrawsDiscarded)));
    }

    proptest::proptest! {
        #[test]
        fn pm_in_unit_interval(v in proptest::collection::vec((-1.0f64..2.0, -1.0f64..2.0), 1..30)) {
            if let Ok(pm) = proportion_mediated(&v) {
                proptest::prop_assert!((0.0..=1.0).contains(&pm.pm_mean));
                proptest::prop_assert!(pm.pm_interval.0 >= 0.0 && pm.pm_interval.1 <= 1.0);
            }
        }
    }
}
