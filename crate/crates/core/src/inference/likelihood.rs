//! Joint-model likelihood: a direct route through the model modules and a
//! cached route used inside the sampler.

use crate::basis::CubicSpline;
use crate::data::{Dataset, Subject};
use crate::mediator::{longitudinal_loglik, trajectory, x_design, MediatorBases, RandomEffects, POP_DIM, RE_DIM, X_DIM};
use crate::model::ModelParams;
use crate::quadrature::gl16;
use crate::survival::{panel_edges, survival_loglik, FunctionalKind, SurvivalParams};

use super::layout::{ModelStructure, ParamLayout};
use super::prior::PriorSpec;

const LEGACY_WINDOW: f64 = 3.0;

/// Log posterior of `(θ, r_1..r_n)` on the unconstrained scale. Returns
/// `−∞` whenever any term is not finite.
pub fn log_posterior(layout: &ParamLayout, priors: &PriorSpec, theta: &[f64], re: &[[f64; RE_DIM]], data: &Dataset) -> f64 {
    if theta.len() != layout.len() || re.len() != data.len() || theta.iter().any(|v| !v.is_finite()) {
        return f64::NEG_INFINITY;
    }
    let lp = priors.log_prior(layout, theta);
    let p = layout.to_params(theta);
    let Ok(law) = p.re_law() else {
        return f64::NEG_INFINITY;
    };
    let mut total = lp;
    for (s, r) in data.subjects.iter().zip(re) {
        let r = RandomEffects { r: *r };
        total += subject_loglik(&p, s, &r) + law.log_density(&r);
    }
    if total.is_finite() {
        total
    } else {
        f64::NEG_INFINITY
    }
}

/// Longitudinal plus survival log-likelihood of one subject.
pub fn subject_loglik(p: &ModelParams, s: &Subject, r: &RandomEffects) -> f64 {
    let x = x_design(s.arm, s.u);
    let Ok(long) = longitudinal_loglik(&p.mediator, &x, &s.w, r, &s.visits) else {
        return f64::NEG_INFINITY;
    };
    let Ok(path) = trajectory(&p.mediator, &x, &s.w, r) else {
        return f64::NEG_INFINITY;
    };
    let surv = survival_loglik(&p.survival, s.arm, s.u, &s.w, &path, r.r[0], &s.outcome()).unwrap_or(f64::NEG_INFINITY);
    long + surv
}

/// Fixed design pieces of one subject's longitudinal model.
#[derive(Debug, Clone)]
pub(crate) struct SubjectDesign {
    pub x: [f64; X_DIM],
    /// Rows of the mediator fixed-effect design, one per visit.
    pub phi: Vec<Vec<f64>>,
    /// Rows `(1, B^r(t))` of the random-effect design.
    pub z: Vec<[f64; RE_DIM]>,
    pub y: Vec<f64>,
}

impl SubjectDesign {
    pub fn new(layout: &ParamLayout, s: &Subject) -> Self {
        let bases = MediatorBases::standard();
        let x = x_design(s.arm, s.u);
        let d = layout.mediator.len();
        let mut phi = Vec::with_capacity(s.visits.len());
        let mut z = Vec::with_capacity(s.visits.len());
        let mut b = [0.0; POP_DIM];
        let mut br = [0.0; RE_DIM - 1];
        for v in &s.visits {
            bases.population.eval_into(v.t, &mut b);
            bases.random.eval_into(v.t, &mut br);
            let mut row = Vec::with_capacity(d);
            row.push(1.0);
            row.extend(x);
            row.extend(&s.w);
            row.extend(b);
            for bk in b {
                row.extend(x.iter().map(|xl| bk * xl));
            }
            phi.push(row);
            z.push([1.0, br[0], br[1], br[2]]);
        }
        SubjectDesign {
            x,
            phi,
            z,
            y: s.visits.iter().map(|v| v.m_obs).collect(),
        }
    }

    pub fn residual_ss(&self, b: &[f64], r: &[f64; RE_DIM]) -> f64 {
        let mut ss = 0.0;
        for ((row, z), y) in self.phi.iter().zip(&self.z).zip(&self.y) {
            let mut m = 0.0;
            for (p, c) in row.iter().zip(b) {
                m += p * c;
            }
            for k in 0..RE_DIM {
                m += z[k] * r[k];
            }
            ss += (y - m) * (y - m);
        }
        ss
    }
}

/// Quadrature of `∫_0^T λ(t) exp(load·g(t)) dt` split by baseline piece:
/// entries `(piece, weight, g)`.
#[derive(Debug, Clone, Default)]
pub(crate) struct SurvCache {
    pub nodes: Vec<(usize, f64, f64)>,
    pub g_exit: f64,
    pub piece_exit: usize,
}

impl SurvCache {
    pub fn new(structure: &ModelStructure, path: &CubicSpline, exit: f64) -> Self {
        let cuts = &structure.cut_points;
        let piece_of = |t: f64| cuts.partition_point(|&c| c <= t).saturating_sub(1);
        let piece_exit = piece_of(exit);
        match structure.functional_kind {
            FunctionalKind::ThreeYearLegacy => {
                let g = path.integral(0.0, LEGACY_WINDOW) - LEGACY_WINDOW * path.value(0.0);
                let nodes = (0..cuts.len())
                    .filter_map(|j| {
                        let hi = cuts.get(j + 1).copied().unwrap_or(f64::INFINITY).min(exit);
                        (hi > cuts[j]).then(|| (j, hi - cuts[j], g))
                    })
                    .collect();
                SurvCache { nodes, g_exit: g, piece_exit }
            }
            FunctionalKind::CurrentChange => {
                let gl = gl16();
                let m0 = path.value(0.0);
                let knots: Vec<f64> = path.terms.iter().map(|t| t.0).collect();
                let edges = panel_edges(cuts, &knots, exit);
                let mut nodes = Vec::with_capacity((edges.len() - 1) * gl.len());
                for e in edges.windows(2) {
                    let half = 0.5 * (e[1] - e[0]);
                    let j = piece_of(0.5 * (e[0] + e[1]));
                    for i in 0..gl.len() {
                        nodes.push((j, half * gl.weights[i], path.value(gl.node_on(i, e[0], e[1])) - m0));
                    }
                }
                SurvCache {
                    nodes,
                    g_exit: path.value(exit) - m0,
                    piece_exit,
                }
            }
        }
    }
}

/// Per-subject quantities the survival likelihood needs besides the cache.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SurvKey<'a> {
    pub arm: u8,
    pub u: u8,
    pub w: &'a [f64],
    pub event: bool,
}

pub(crate) fn cached_survival_loglik(sp: &SurvivalParams, k: SurvKey, r0: f64, c: &SurvCache) -> f64 {
    let eta = sp.linear_predictor(k.arm, k.u, k.w, r0);
    let load = sp.g_loading(k.arm, k.u);
    let lam = &sp.baseline(k.arm).levels;
    let mut h = 0.0;
    for &(j, w, g) in &c.nodes {
        h += lam[j] * w * (load * g).exp();
    }
    let mut ll = -eta.exp() * h;
    if k.event {
        ll += lam[c.piece_exit].ln() + eta + load * c.g_exit;
    }
    ll
}

/// Adds `∫_{piece j} exp(eta + load·g)` to `out[j]` (unit baseline).
pub(crate) fn add_exposures(sp: &SurvivalParams, k: SurvKey, r0: f64, c: &SurvCache, out: &mut [f64]) {
    let eta = sp.linear_predictor(k.arm, k.u, k.w, r0);
    let load = sp.g_loading(k.arm, k.u);
    let scale = eta.exp();
    for &(j, w, g) in &c.nodes {
        out[j] += scale * w * (load * g).exp();
    }
}
