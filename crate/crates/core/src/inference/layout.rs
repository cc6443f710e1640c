//! Flat unconstrained parameter vector of the joint model.

use std::ops::Range;

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::confounder::ConfounderParams;
use crate::error::{Error, Result};
use crate::mediator::{MediatorParams, POP_DIM, RE_DIM, X_DIM};
use crate::model::ModelParams;
use crate::survival::{FunctionalKind, PiecewiseHazard, SurvivalParams};

pub const LAYOUT_VERSION: u32 = 1;
/// Free correlations of a 4×4 correlation matrix.
pub const N_CPC: usize = RE_DIM * (RE_DIM - 1) / 2;

/// Model dimensions fixed by the data and configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStructure {
    pub w_dim: usize,
    /// Cut points shared by both arms' baselines, starting at 0.
    pub cut_points: Vec<f64>,
    pub functional_kind: FunctionalKind,
    pub t_max: f64,
}

impl ModelStructure {
    pub fn pieces(&self) -> usize {
        self.cut_points.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Mediator,
    Sigma,
    Baseline,
    Survival,
    RandomEffects,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub structure: ModelStructure,
    pub names: Vec<String>,
    pub mediator: Range<usize>,
    pub sigma: usize,
    pub baseline: Range<usize>,
    pub survival: Range<usize>,
    pub random_effects: Range<usize>,
}

impl ParamLayout {
    pub fn new(structure: ModelStructure) -> Self {
        let w = structure.w_dim;
        let j = structure.pieces();
        let mut names = vec!["beta0".to_string()];
        names.extend((0..X_DIM).map(|k| format!("beta1[{k}]")));
        names.extend((0..w).map(|k| format!("beta2[{k}]")));
        names.extend((0..POP_DIM).map(|k| format!("alpha[{k}]")));
        for k in 0..POP_DIM {
            names.extend((0..X_DIM).map(|l| format!("psi[{k}][{l}]")));
        }
        let mediator = 0..names.len();
        let sigma = names.len();
        names.push("log_sigma".into());
        let b0 = names.len();
        names.extend((0..j).map(|k| format!("log_lambda0[{k}]")));
        names.extend((0..j).map(|k| format!("log_lambda1[{k}]")));
        let baseline = b0..names.len();
        let s0 = names.len();
        names.extend((0..2).map(|k| format!("gamma1[{k}]")));
        names.extend((0..2).map(|k| format!("gamma2[{k}]")));
        names.extend((0..w).map(|k| format!("gamma3[{k}]")));
        names.extend((0..4).map(|k| format!("zeta[{k}]")));
        names.push("xi".into());
        let survival = s0..names.len();
        let r0 = names.len();
        names.extend((0..RE_DIM).map(|k| format!("log_sd[{k}]")));
        names.extend((0..N_CPC).map(|k| format!("cpc[{k}]")));
        let random_effects = r0..names.len();
        ParamLayout {
            structure,
            names,
            mediator,
            sigma,
            baseline,
            survival,
            random_effects,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn block_of(&self, i: usize) -> Block {
        if self.mediator.contains(&i) {
            Block::Mediator
        } else if i == self.sigma {
            Block::Sigma
        } else if self.baseline.contains(&i) {
            Block::Baseline
        } else if self.survival.contains(&i) {
            Block::Survival
        } else {
            Block::RandomEffects
        }
    }

    /// Regression coefficients of the mediator and survival models.
    pub fn is_fixed_effect(&self, i: usize) -> bool {
        self.mediator.contains(&i) || self.survival.contains(&i)
    }

    /// Model parameters from the flat vector (confounder part zero).
    pub fn to_params(&self, theta: &[f64]) -> ModelParams {
        let w = self.structure.w_dim;
        let mut it = theta.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { (0..n).map(|_| it.next().expect("theta length")).collect() };
        let mut med = MediatorParams::zeros(w);
        med.beta0 = take(1)[0];
        med.beta1.copy_from_slice(&take(X_DIM));
        med.beta2 = take(w);
        med.alpha.copy_from_slice(&take(POP_DIM));
        for k in 0..POP_DIM {
            med.psi[k].copy_from_slice(&take(X_DIM));
        }
        med.sigma = take(1)[0].exp();
        let j = self.structure.pieces();
        let cuts = self.structure.cut_points.clone();
        let lam0: Vec<f64> = take(j).into_iter().map(f64::exp).collect();
        let lam1: Vec<f64> = take(j).into_iter().map(f64::exp).collect();
        let g1 = take(2);
        let g2 = take(2);
        let g3 = take(w);
        let zeta = take(4);
        let xi = take(1)[0];
        let log_sd = take(RE_DIM);
        let cpc = take(N_CPC);
        let sp = SurvivalParams {
            baseline_control: PiecewiseHazard {
                cut_points: cuts.clone(),
                levels: lam0,
            },
            baseline_treated: PiecewiseHazard {
                cut_points: cuts,
                levels: lam1,
            },
            gamma1: [g1[0], g1[1]],
            gamma2: [g2[0], g2[1]],
            gamma3: g3,
            zeta: [zeta[0], zeta[1], zeta[2], zeta[3]],
            xi,
            functional_kind: self.structure.functional_kind,
            t_max: self.structure.t_max,
        };
        let sd: [f64; RE_DIM] = std::array::from_fn(|k| log_sd[k].exp());
        let (l, _) = corr_cholesky_from_unconstrained(&cpc);
        let mut cov = [[0.0; RE_DIM]; RE_DIM];
        let corr = l * l.transpose();
        for a in 0..RE_DIM {
            for b in 0..RE_DIM {
                cov[a][b] = sd[a] * sd[b] * corr[(a, b)];
            }
        }
        ModelParams {
            mediator: med,
            survival: sp,
            confounder: ConfounderParams::zeros(w),
            re_covariance: cov,
        }
    }

    /// Inverse of [`ParamLayout::to_params`].
    pub fn from_params(&self, p: &ModelParams) -> Result<Vec<f64>> {
        let w = self.structure.w_dim;
        let sp = &p.survival;
        if p.w_dim() != w || sp.baseline_control.cut_points != self.structure.cut_points || sp.baseline_treated.cut_points != self.structure.cut_points {
            return Err(Error::invalid("parameters do not match the model structure"));
        }
        let m = &p.mediator;
        let mut v = vec![m.beta0];
        v.extend(m.beta1);
        v.extend(&m.beta2);
        v.extend(m.alpha);
        for k in 0..POP_DIM {
            v.extend(m.psi[k]);
        }
        v.push(m.sigma.ln());
        v.extend(sp.baseline_control.levels.iter().map(|l| l.ln()));
        v.extend(sp.baseline_treated.levels.iter().map(|l| l.ln()));
        v.extend(sp.gamma1);
        v.extend(sp.gamma2);
        v.extend(&sp.gamma3);
        v.extend(sp.zeta);
        v.push(sp.xi);
        let cov = Matrix4::from_fn(|a, b| p.re_covariance[a][b]);
        let sd: [f64; RE_DIM] = std::array::from_fn(|k| cov[(k, k)].sqrt());
        v.extend(sd.iter().map(|s| s.ln()));
        let corr = Matrix4::from_fn(|a, b| cov[(a, b)] / (sd[a] * sd[b]));
        let l = corr
            .cholesky()
            .ok_or_else(|| Error::invalid("random-effect covariance is not positive definite"))?
            .l();
        v.extend(unconstrained_from_corr_cholesky(&l));
        Ok(v)
    }
}

/// Cholesky factor of a correlation matrix from unconstrained values via
/// canonical partial correlations `z = tanh(y)`, with the log Jacobian of
/// the map `y → L`.
pub fn corr_cholesky_from_unconstrained(y: &[f64]) -> (Matrix4<f64>, f64) {
    let mut l = Matrix4::zeros();
    let mut log_jac = 0.0;
    let mut k = 0;
    l[(0, 0)] = 1.0;
    for i in 1..RE_DIM {
        let mut sum_sq = 0.0f64;
        for j in 0..i {
            let z = y[k].tanh();
            log_jac += (1.0 - z * z).ln();
            k += 1;
            if j > 0 {
                log_jac += 0.5 * (1.0 - sum_sq).ln();
            }
            let v = z * (1.0 - sum_sq).sqrt();
            l[(i, j)] = v;
            sum_sq += v * v;
        }
        l[(i, i)] = (1.0 - sum_sq).max(0.0).sqrt();
    }
    (l, log_jac)
}

pub fn unconstrained_from_corr_cholesky(l: &Matrix4<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(N_CPC);
    for i in 1..RE_DIM {
        let mut sum_sq = 0.0f64;
        for j in 0..i {
            let z = l[(i, j)] / (1.0 - sum_sq).sqrt();
            out.push(z.clamp(-1.0 + 1e-15, 1.0 - 1e-15).atanh());
            sum_sq += l[(i, j)] * l[(i, j)];
        }
    }
    out
}
