//! The ordinal treatment-dependent confounder: its multinomial-logit model
//! and the algebra of the counterfactual joint law of `(U_{a*}, U_a)`.
//!
//! Joint tables have rows indexed by the control-world level `U_{a*}` and
//! columns by the treated-world level `U_a`. Monotonicity means `U_a ≥ U_{a*}`,
//! i.e. no mass strictly below the diagonal.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROB_TOL: f64 = 1e-10;
pub const K3: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfounderParams {
    /// Intercepts for categories 1 and 2 (category 0 is the reference).
    pub phi0: [f64; 2],
    /// Treatment coefficients.
    pub phi1: [f64; 2],
    /// Baseline-covariate coefficients, one row per category.
    pub phi2: [Vec<f64>; 2],
}

impl ConfounderParams {
    pub fn zeros(w_dim: usize) -> Self {
        ConfounderParams {
            phi0: [0.0; 2],
            phi1: [0.0; 2],
            phi2: [vec![0.0; w_dim], vec![0.0; w_dim]],
        }
    }

    pub fn w_dim(&self) -> usize {
        self.phi2[0].len()
    }

    /// Coefficients of category `c ∈ {1, 2}` as `(intercept, treatment, w...)`.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * (2 + self.w_dim()));
        for c in 0..2 {
            v.push(self.phi0[c]);
            v.push(self.phi1[c]);
            v.extend_from_slice(&self.phi2[c]);
        }
        v
    }

    pub fn from_flat(v: &[f64], w_dim: usize) -> Self {
        let d = 2 + w_dim;
        assert_eq!(v.len(), 2 * d);
        ConfounderParams {
            phi0: [v[0], v[d]],
            phi1: [v[1], v[d + 1]],
            phi2: [v[2..d].to_vec(), v[d + 2..2 * d].to_vec()],
        }
    }
}

/// `P(U = · | A = a, W = w)`.
pub fn confounder_probs(cp: &ConfounderParams, a: u8, w: &[f64]) -> [f64; 3] {
    let a = f64::from(a.min(1));
    let eta: [f64; 2] = std::array::from_fn(|c| {
        cp.phi0[c] + cp.phi1[c] * a + cp.phi2[c].iter().zip(w).map(|(b, x)| b * x).sum::<f64>()
    });
    softmax3(eta)
}

fn softmax3(eta: [f64; 2]) -> [f64; 3] {
    let m = eta[0].max(eta[1]).max(0.0);
    let e = [(-m).exp(), (eta[0] - m).exp(), (eta[1] - m).exp()];
    let s = e[0] + e[1] + e[2];
    [e[0] / s, e[1] / s, e[2] / s]
}

/// Marginals of the joint table: `mu` for `U_a` (columns), `phi` for
/// `U_{a*}` (rows).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalPair {
    pub mu: Vec<f64>,
    pub phi: Vec<f64>,
}

impl MarginalPair {
    pub fn new(mu: Vec<f64>, phi: Vec<f64>) -> Result<Self> {
        let m = MarginalPair { mu, phi };
        m.validate()?;
        Ok(m)
    }

    pub fn k(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.len() != self.phi.len() || self.mu.len() < 2 {
            return Err(Error::invalid("marginals must have equal length of at least 2"));
        }
        for v in [&self.mu, &self.phi] {
            if v.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(Error::invalid("marginal probabilities must be nonnegative"));
            }
            if (v.iter().sum::<f64>() - 1.0).abs() > PROB_TOL {
                return Err(Error::invalid("marginal probabilities must sum to 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointConfounderMatrix {
    /// `p[j][k] = P(U_{a*} = j, U_a = k)`.
    pub p: Vec<Vec<f64>>,
}

impl JointConfounderMatrix {
    pub fn zeros(k: usize) -> Self {
        JointConfounderMatrix { p: vec![vec![0.0; k]; k] }
    }

    pub fn k(&self) -> usize {
        self.p.len()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.p.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.k()).map(|c| self.p.iter().map(|r| r[c]).sum()).collect()
    }

    pub fn total(&self) -> f64 {
        self.p.iter().flatten().sum()
    }

    pub fn marginals(&self) -> MarginalPair {
        MarginalPair {
            mu: self.col_sums(),
            phi: self.row_sums(),
        }
    }

    pub fn is_monotone(&self, tol: f64) -> bool {
        (0..self.k()).all(|j| (0..j).all(|k| self.p[j][k] <= tol))
    }

    /// Checks nonnegativity, total mass and agreement with `m`.
    pub fn validate_against(&self, m: &MarginalPair, tol: f64) -> Result<()> {
        if self.p.iter().flatten().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("joint table has negative entries"));
        }
        if (self.total() - 1.0).abs() > tol {
            return Err(Error::invalid("joint table mass differs from 1"));
        }
        let ok = self.row_sums().iter().zip(&m.phi).all(|(a, b)| (a - b).abs() <= tol)
            && self.col_sums().iter().zip(&m.mu).all(|(a, b)| (a - b).abs() <= tol);
        if !ok {
            return Err(Error::invalid("joint table marginals differ from the targets"));
        }
        Ok(())
    }

    /// `Σ_{jk} weight[j][k] p[j][k]`.
    pub fn dot(&self, weight: &[Vec<f64>]) -> f64 {
        self.p
            .iter()
            .zip(weight)
            .map(|(r, w)| r.iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }

    /// Outer product `phi · mu'`, the independence coupling.
    pub fn outer(m: &MarginalPair) -> Self {
        JointConfounderMatrix {
            p: m.phi.iter().map(|f| m.mu.iter().map(|u| f * u).collect()).collect(),
        }
    }
}

fn require_k3(m: &MarginalPair) -> Result<()> {
    m.validate()?;
    if m.k() != K3 {
        return Err(Error::invalid("this operation is defined for three confounder levels"));
    }
    Ok(())
}

/// Interval of `p11 = P(U_{a*} = 1, U_a = 1)` over monotone tables with the
/// given marginals: `[max{0, 1 − Φ3 − Φ4}, min{Φ2, Φ5}]`.
pub fn p11_bounds(m: &MarginalPair) -> Result<(f64, f64)> {
    require_k3(m)?;
    let (p_min, p_max) = p11_interval(m);
    if p_min > p_max + 1e-12 {
        return Err(Error::MonotonicityInfeasible { p_min, p_max });
    }
    Ok((p_min, p_max.max(p_min)))
}

/// The raw interval endpoints without the feasibility check.
pub fn p11_interval(m: &MarginalPair) -> (f64, f64) {
    let p_min = (1.0 - m.mu[2] - m.phi[0]).max(0.0);
    let p_max = m.mu[1].min(m.phi[1]);
    (p_min, p_max)
}

fn clamp_tiny(v: f64) -> f64 {
    if v < 0.0 && v > -PROB_TOL {
        0.0
    } else {
        v
    }
}

/// The monotone table with `p11 = p_min + ρ (p_max − p_min)`.
pub fn joint_from_rho(m: &MarginalPair, rho: f64) -> Result<JointConfounderMatrix> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid("rho must lie in [0, 1]"));
    }
    let (p_min, p_max) = p11_bounds(m)?;
    let p11 = p_min + rho * (p_max - p_min);
    let (mu, phi) = (&m.mu, &m.phi);
    let p01 = mu[1] - p11;
    let p12 = phi[1] - p11;
    let p02 = phi[0] - mu[0] - p01;
    let mut j = JointConfounderMatrix::zeros(3);
    j.p[0][0] = mu[0];
    j.p[0][1] = clamp_tiny(p01);
    j.p[0][2] = clamp_tiny(p02);
    j.p[1][1] = p11;
    j.p[1][2] = clamp_tiny(p12);
    j.p[2][2] = phi[2];
    if j.p.iter().flatten().any(|v| *v < 0.0) {
        return Err(Error::MonotonicityInfeasible { p_min, p_max });
    }
    Ok(j)
}

/// The unique step-monotone table (mass only on `(j, j)` and `(j, j+1)`).
pub fn step_monotone_joint(m: &MarginalPair) -> Result<JointConfounderMatrix> {
    m.validate()?;
    let k = m.k();
    let mut j = JointConfounderMatrix::zeros(k);
    for i in 0..k {
        let phi_below: f64 = m.phi[..i].iter().sum();
        let mu_above: f64 = m.mu[i + 1..].iter().sum();
        set_checked(&mut j, i, i, 1.0 - phi_below - mu_above)?;
        if i + 1 < k {
            let phi_above: f64 = m.phi[i + 1..].iter().sum();
            let mu_upto: f64 = m.mu[..=i].iter().sum();
            set_checked(&mut j, i, i + 1, 1.0 - phi_above - mu_upto)?;
        }
    }
    Ok(j)
}

fn set_checked(j: &mut JointConfounderMatrix, row: usize, col: usize, value: f64) -> Result<()> {
    if value < -PROB_TOL {
        return Err(Error::StepMonotonicityInconsistent { row, col, value });
    }
    j.p[row][col] = value.max(0.0);
    Ok(())
}

/// Pairs `(l, r)`, `1 < l ≤ r < K` (1-based, as in the usual statement of
/// the condition), where `max{0, 1 − ||φ^L|| − ||μ^R||} > min{||φ^C||, ||μ^C||}`.
/// An empty list means the necessary condition for monotonicity holds.
pub fn check_monotone_feasibility_k(m: &MarginalPair) -> Vec<(usize, usize)> {
    let k = m.k();
    let mut out = Vec::new();
    for l in 2..k {
        for r in l..k {
            let phi_l: f64 = m.phi[..l - 1].iter().sum();
            let mu_r: f64 = m.mu[r..].iter().sum();
            let phi_c: f64 = m.phi[l - 1..r].iter().sum();
            let mu_c: f64 = m.mu[l - 1..r].iter().sum();
            let lower = (1.0 - phi_l - mu_r).max(0.0);
            if lower > phi_c.min(mu_c) + PROB_TOL {
                out.push((l, r));
            }
        }
    }
    out
}

/// One observation for the confounder model.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfounderRecord {
    pub a: u8,
    pub w: Vec<f64>,
    pub u: u8,
}

pub const RIDGE: f64 = 1e-6;
const MAX_NEWTON: usize = 200;
const GRAD_TOL: f64 = 1e-8;

/// Records aggregated by covariate pattern, in a canonical order.
pub(crate) struct PatternCounts {
    pub rows: Vec<(Vec<f64>, [f64; 3])>,
}

impl PatternCounts {
    pub fn new(records: &[ConfounderRecord]) -> Result<Self> {
        let w_dim = records.first().map_or(0, |r| r.w.len());
        let mut map: BTreeMap<Vec<u64>, [f64; 3]> = BTreeMap::new();
        for r in records {
            if r.w.len() != w_dim {
                return Err(Error::invalid("inconsistent covariate dimension in confounder records"));
            }
            if r.u > 2 {
                return Err(Error::invalid("confounder level must be 0, 1 or 2"));
            }
            let mut key = vec![u64::from(r.a.min(1))];
            key.extend(r.w.iter().map(|v| v.to_bits()));
            map.entry(key).or_insert([0.0; 3])[r.u as usize] += 1.0;
        }
        let rows = map
            .into_iter()
            .map(|(key, c)| {
                let mut x = vec![1.0, key[0] as f64];
                x.extend(key[1..].iter().map(|b| f64::from_bits(*b)));
                (x, c)
            })
            .collect();
        Ok(PatternCounts { rows })
    }

    /// Multinomial log-likelihood and its gradient/Hessian in the flat layout.
    pub fn loglik(&self, theta: &[f64], with_derivs: bool) -> (f64, DVector<f64>, DMatrix<f64>) {
        let d = theta.len() / 2;
        let mut ll = 0.0;
        let mut g = DVector::zeros(2 * d);
        let mut h = DMatrix::zeros(2 * d, 2 * d);
        for (x, counts) in &self.rows {
            let eta: [f64; 2] = std::array::from_fn(|c| x.iter().zip(&theta[c * d..(c + 1) * d]).map(|(a, b)| a * b).sum());
            let p = softmax3(eta);
            let n: f64 = counts.iter().sum();
            for (c, &nc) in counts.iter().enumerate() {
                if nc > 0.0 {
                    ll += nc * p[c].max(f64::MIN_POSITIVE).ln();
                }
            }
            if !with_derivs {
                continue;
            }
            for c in 0..2 {
                let resid = counts[c + 1] - n * p[c + 1];
                for i in 0..d {
                    g[c * d + i] += resid * x[i];
                }
                for c2 in 0..2 {
                    let cov = n * (if c == c2 { p[c + 1] } else { 0.0 } - p[c + 1] * p[c2 + 1]);
                    for i in 0..d {
                        for j in 0..d {
                            h[(c * d + i, c2 * d + j)] -= cov * x[i] * x[j];
                        }
                    }
                }
            }
        }
        (ll, g, h)
    }
}

/// Penalised maximum-likelihood fit by Newton's method with step halving.
pub fn fit_confounder_mle(records: &[ConfounderRecord]) -> Result<ConfounderParams> {
    if records.is_empty() {
        return Err(Error::invalid("confounder fit requires at least one record"));
    }
    let w_dim = records[0].w.len();
    let counts = PatternCounts::new(records)?;
    let d = 2 + w_dim;
    let objective = |theta: &[f64], derivs: bool| {
        let (ll, mut g, mut h) = counts.loglik(theta, derivs);
        let pen: f64 = theta.iter().map(|v| v * v).sum::<f64>() * RIDGE;
        if derivs {
            for i in 0..2 * d {
                g[i] -= 2.0 * RIDGE * theta[i];
                h[(i, i)] -= 2.0 * RIDGE;
            }
        }
        (ll - pen, g, h)
    };
    let mut theta = vec![0.0; 2 * d];
    let mut grad_norm = f64::INFINITY;
    for _ in 0..MAX_NEWTON {
        let (f0, g, h) = objective(&theta, true);
        grad_norm = g.amax();
        if grad_norm < GRAD_TOL {
            return Ok(ConfounderParams::from_flat(&theta, w_dim));
        }
        let neg_h = -h;
        let step = match neg_h.clone().cholesky() {
            Some(ch) => ch.solve(&g),
            None => neg_h.lu().solve(&g).unwrap_or_else(|| g.clone()),
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            let (f1, _, _) = objective(&cand, false);
            if f1 >= f0 - 1e-12 * f0.abs() {
                theta = cand;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let (_, g, _) = objective(&theta, true);
    grad_norm = grad_norm.min(g.amax());
    if g.amax() < GRAD_TOL {
        return Ok(ConfounderParams::from_flat(&theta, w_dim));
    }
    Err(Error::NoConvergence {
        iterations: MAX_NEWTON,
        gradient_norm: grad_norm,
        last: Box::new(ConfounderParams::from_flat(&theta, w_dim)),
    })
}
