//! Latent mediator trajectories and the Gaussian measurement model.
//!
//! `M(t) = (β0 + r0) + β1'x + β2'w + Σ_k (α_k + ψ_k'x) B_k(t) + Σ_k r_k B^r_k(t)`
//! where `x = (A, I(U=1), I(U=2), A·I(U=1), A·I(U=2))` and `w` is the
//! dummy-coded baseline covariate row. Measurements are standardised units.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::{Matrix4, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::basis::{make_population_basis, make_random_effect_basis, CubicSpline, SplineBasis};
use crate::error::{Error, Result};

pub const X_DIM: usize = 5;
pub const POP_DIM: usize = 4;
pub const RE_DIM: usize = 4;

/// Treatment/confounder design `(A, I(U=1), I(U=2), A·I(U=1), A·I(U=2))`.
pub fn x_design(a: u8, u: u8) -> [f64; X_DIM] {
    let a = f64::from(a.min(1));
    let u1 = if u == 1 { 1.0 } else { 0.0 };
    let u2 = if u == 2 { 1.0 } else { 0.0 };
    [a, u1, u2, a * u1, a * u2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediatorParams {
    pub beta0: f64,
    pub beta1: [f64; X_DIM],
    pub beta2: Vec<f64>,
    pub alpha: [f64; POP_DIM],
    /// `psi[k][j]`: interaction of spline function `k` with design slot `j`.
    pub psi: [[f64; X_DIM]; POP_DIM],
    pub sigma: f64,
}

impl MediatorParams {
    pub fn zeros(w_dim: usize) -> Self {
        MediatorParams {
            beta0: 0.0,
            beta1: [0.0; X_DIM],
            beta2: vec![0.0; w_dim],
            alpha: [0.0; POP_DIM],
            psi: [[0.0; X_DIM]; POP_DIM],
            sigma: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = std::iter::once(self.beta0)
            .chain(self.beta1)
            .chain(self.beta2.iter().copied())
            .chain(self.alpha)
            .chain(self.psi.iter().flatten().copied())
            .all(f64::is_finite);
        if !finite {
            return Err(Error::invalid("mediator parameters must be finite"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("mediator residual SD must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RandomEffects {
    pub r: [f64; RE_DIM],
}

impl RandomEffects {
    pub fn r0(&self) -> f64 {
        self.r[0]
    }
}

/// Zero-mean multivariate normal law of the random effects.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomEffectsLaw {
    covariance: Matrix4<f64>,
    chol: Matrix4<f64>,
}

impl RandomEffectsLaw {
    pub fn new(covariance: Matrix4<f64>) -> Result<Self> {
        if covariance.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("random-effect covariance must be finite"));
        }
        let asym = (covariance - covariance.transpose()).amax();
        if asym > 1e-12 * (1.0 + covariance.amax()) {
            return Err(Error::invalid("random-effect covariance must be symmetric"));
        }
        let chol = covariance
            .cholesky()
            .ok_or_else(|| Error::invalid("random-effect covariance must be positive definite"))?
            .l();
        if chol.diagonal().iter().any(|d| !(*d > 0.0)) {
            return Err(Error::invalid("random-effect covariance must be positive definite"));
        }
        Ok(RandomEffectsLaw { covariance, chol })
    }

    /// Builds the law from SDs and a lower-triangular correlation Cholesky factor.
    pub fn from_sd_and_corr_chol(sd: [f64; RE_DIM], corr_chol: &Matrix4<f64>) -> Result<Self> {
        let d = Matrix4::from_diagonal(&Vector4::from(sd));
        let l = d * corr_chol;
        let cov = l * l.transpose();
        let cov = 0.5 * (cov + cov.transpose());
        Self::new(cov)
    }

    pub fn identity() -> Self {
        Self::new(Matrix4::identity()).expect("identity is positive definite")
    }

    pub fn covariance(&self) -> &Matrix4<f64> {
        &self.covariance
    }

    pub fn cholesky(&self) -> &Matrix4<f64> {
        &self.chol
    }

    /// `L z` for a standard-normal vector `z`.
    pub fn transform(&self, z: &[f64; RE_DIM]) -> RandomEffects {
        let v = self.chol * Vector4::from(*z);
        RandomEffects {
            r: [v[0], v[1], v[2], v[3]],
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> RandomEffects {
        let z: [f64; RE_DIM] = std::array::from_fn(|_| rng.sample(StandardNormal));
        self.transform(&z)
    }

    /// Log density of `r` under the law, including normalising constants.
    pub fn log_density(&self, r: &RandomEffects) -> f64 {
        let y = self
            .chol
            .solve_lower_triangular(&Vector4::from(r.r))
            .expect("factor has positive diagonal");
        let log_det: f64 = self.chol.diagonal().iter().map(|d| d.ln()).sum();
        -0.5 * y.norm_squared() - log_det - 0.5 * RE_DIM as f64 * (2.0 * PI).ln()
    }
}

/// Draws one random-effect vector from a seeded generator.
pub fn sample_random_effects(law: &RandomEffectsLaw, seed: u64) -> RandomEffects {
    let mut rng = crate::rng::substream(seed, crate::rng::domain::GENERIC, 0);
    law.sample(&mut rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalRecord {
    pub t: f64,
    pub m_obs: f64,
}

/// A mediator path as seen by the hazard: its value over time and the
/// locations where it is not smooth.
pub trait MediatorPath: Sync {
    fn value(&self, t: f64) -> f64;
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
}

impl MediatorPath for CubicSpline {
    #[inline]
    fn value(&self, t: f64) -> f64 {
        CubicSpline::value(self, t)
    }
    fn breakpoints(&self) -> Vec<f64> {
        self.knots().collect()
    }
}

impl<F: Fn(f64) -> f64 + Sync> MediatorPath for F {
    fn value(&self, t: f64) -> f64 {
        self(t)
    }
}

/// Population and subject-level bases used by the mediator model.
#[derive(Debug, Clone)]
pub struct MediatorBases {
    pub population: SplineBasis,
    pub random: SplineBasis,
    /// `random_in_population[k][j]`: coefficient of population function `j`
    /// in subject-level function `k`, when the subject-level space is
    /// contained in the population space.
    pub random_in_population: Option<[[f64; POP_DIM]; RE_DIM - 1]>,
}

impl MediatorBases {
    pub fn standard() -> &'static MediatorBases {
        static B: OnceLock<MediatorBases> = OnceLock::new();
        B.get_or_init(|| {
            let population = make_population_basis();
            let random = make_random_effect_basis();
            let random_in_population = embed(&population, &random);
            MediatorBases {
                population,
                random,
                random_in_population,
            }
        })
    }
}

/// Expresses each function of `inner` in the span of `outer` by least squares
/// on a fine grid, returning `None` when the fit is not exact.
fn embed(outer: &SplineBasis, inner: &SplineBasis) -> Option<[[f64; POP_DIM]; RE_DIM - 1]> {
    use nalgebra::{DMatrix, DVector};
    if outer.dimension() != POP_DIM || inner.dimension() != RE_DIM - 1 {
        return None;
    }
    let grid: Vec<f64> = (0..241).map(|i| i as f64 * 0.05).collect();
    let mut x = DMatrix::zeros(grid.len(), POP_DIM);
    let mut y = DMatrix::zeros(grid.len(), RE_DIM - 1);
    let mut ob = [0.0; POP_DIM];
    let mut ib = [0.0; RE_DIM - 1];
    for (i, &t) in grid.iter().enumerate() {
        outer.eval_into(t, &mut ob);
        inner.eval_into(t, &mut ib);
        for j in 0..POP_DIM {
            x[(i, j)] = ob[j];
        }
        for j in 0..RE_DIM - 1 {
            y[(i, j)] = ib[j];
        }
    }
    let svd = x.clone().svd(true, true);
    let mut out = [[0.0; POP_DIM]; RE_DIM - 1];
    for k in 0..RE_DIM - 1 {
        let col: DVector<f64> = y.column(k).into_owned();
        let c = svd.solve(&col, 1e-12).ok()?;
        if (&x * &c - &col).amax() > 1e-9 {
            return None;
        }
        for j in 0..POP_DIM {
            out[k][j] = c[j];
        }
    }
    Some(out)
}

/// Time-constant part `β0 + r0 + β1'x + β2'w`.
pub fn trajectory_offset(p: &MediatorParams, x: &[f64; X_DIM], w: &[f64], r: &RandomEffects) -> f64 {
    p.beta0
        + r.r[0]
        + dot(&p.beta1, x)
        + p.beta2.iter().zip(w).map(|(b, v)| b * v).sum::<f64>()
}

/// Population spline coefficients `α_k + ψ_k'x`.
pub fn spline_coefficients(p: &MediatorParams, x: &[f64; X_DIM]) -> [f64; POP_DIM] {
    std::array::from_fn(|k| p.alpha[k] + dot(&p.psi[k], x))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_w(p: &MediatorParams, w: &[f64]) -> Result<()> {
    if p.beta2.len() != w.len() {
        return Err(Error::invalid(format!(
            "W design has length {} but beta2 has length {}",
            w.len(),
            p.beta2.len()
        )));
    }
    Ok(())
}

/// The full trajectory as a cubic spline.
pub fn trajectory(
    p: &MediatorParams,
    x: &[f64; X_DIM],
    w: &[f64],
    r: &RandomEffects,
) -> Result<CubicSpline> {
    check_w(p, w)?;
    let bases = MediatorBases::standard();
    let mut spline = bases.population.combine(&spline_coefficients(p, x));
    spline.add_scaled(&bases.random.combine(&r.r[1..]), 1.0);
    spline.constant += trajectory_offset(p, x, w, r);
    Ok(spline)
}

pub fn trajectory_value(
    p: &MediatorParams,
    x: &[f64; X_DIM],
    w: &[f64],
    r: &RandomEffects,
    t: f64,
) -> Result<f64> {
    check_w(p, w)?;
    if !t.is_finite() {
        return Err(Error::invalid("trajectory evaluated at non-finite time"));
    }
    let bases = MediatorBases::standard();
    let mut b = [0.0; POP_DIM];
    let mut br = [0.0; RE_DIM - 1];
    bases.population.eval_into(t, &mut b);
    bases.random.eval_into(t, &mut br);
    let coef = spline_coefficients(p, x);
    Ok(trajectory_offset(p, x, w, r) + dot(&coef, &b) + dot(&r.r[1..], &br))
}

/// Gaussian log density of the measurements given the trajectory.
pub fn gaussian_loglik(residual_ss: f64, n: usize, sigma: f64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    -(n as f64) * (sigma.ln() + 0.5 * (2.0 * PI).ln()) - 0.5 * residual_ss / (sigma * sigma)
}

pub fn longitudinal_loglik(
    p: &MediatorParams,
    x: &[f64; X_DIM],
    w: &[f64],
    r: &RandomEffects,
    records: &[LongitudinalRecord],
) -> Result<f64> {
    if records.is_empty() {
        return Ok(0.0);
    }
    if !(p.sigma > 0.0) {
        return Err(Error::invalid("mediator residual SD must be positive"));
    }
    let mut ss = 0.0;
    for rec in records {
        let e = rec.m_obs - trajectory_value(p, x, w, r, rec.t)?;
        ss += e * e;
    }
    Ok(gaussian_loglik(ss, records.len(), p.sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rand_params(rng: &mut impl Rng, w_dim: usize) -> MediatorParams {
        let mut g = || rng.random_range(-1.0..1.0);
        MediatorParams {
            beta0: g(),
            beta1: std::array::from_fn(|_| g()),
            beta2: (0..w_dim).map(|_| g()).collect(),
            alpha: std::array::from_fn(|_| g()),
            psi: std::array::from_fn(|_| std::array::from_fn(|_| g())),
            sigma: 0.5,
        }
    }

    #[test]
    fn intercept_only_is_constant() {
        let mut p = MediatorParams::zeros(2);
        p.beta0 = 1.3;
        let x = x_design(1, 2);
        let r = RandomEffects::default();
        for t in [0.0, 0.7, 4.0, 12.0] {
            assert_eq!(trajectory_value(&p, &x, &[1.0, 0.0], &r, t).unwrap(), 1.3);
        }
    }

    #[test]
    fn x_design_pattern() {
        assert_eq!(x_design(0, 0), [0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(x_design(1, 0), [1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(x_design(0, 1), [0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(x_design(1, 1), [1.0, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(x_design(0, 2), [0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(x_design(1, 2), [1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn hand_computed_value_at_generic_time() {
        // B_k(2.0) tabulated from the truncated-power definition by hand:
        // N1 = 2; d_k(2) = (2-κ_k)^3 / (10-κ_k) for κ_k < 2.
        let d = |k: f64| if 2.0 > k { (2.0 - k).powi(3) / (10.0 - k) } else { 0.0 };
        let b = [2.0, d(0.0) - d(5.0), d(1.0) - d(5.0), d(3.0) - d(5.0)];
        let br = [2.0, d(0.0) - d(5.0), d(1.0) - d(5.0)];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let p = rand_params(&mut rng, 1);
        let x = x_design(1, 1);
        let r = RandomEffects { r: [0.2, -0.3, 0.4, 0.1] };
        let mut want = p.beta0 + r.r[0] + p.beta2[0] * 1.0;
        for j in 0..X_DIM {
            want += p.beta1[j] * x[j];
        }
        for k in 0..4 {
            let mut c = p.alpha[k];
            for j in 0..X_DIM {
                c += p.psi[k][j] * x[j];
            }
            want += c * b[k];
        }
        for k in 0..3 {
            want += r.r[k + 1] * br[k];
        }
        let got = trajectory_value(&p, &x, &[1.0], &r, 2.0).unwrap();
        assert!((got - want).abs() < 1e-12);
        // at t = 0 only the offset survives
        let got0 = trajectory_value(&p, &x, &[1.0], &r, 0.0).unwrap();
        assert!((got0 - trajectory_offset(&p, &x, &[1.0], &r)).abs() < 1e-14);
    }

    #[test]
    fn spline_trajectory_matches_pointwise_value() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let p = rand_params(&mut rng, 2);
        let x = x_design(1, 2);
        let w = [0.0, 1.0];
        let r = RandomEffects { r: [0.1, 0.5, -0.2, 0.3] };
        let s = trajectory(&p, &x, &w, &r).unwrap();
        for t in [0.0, 0.3, 1.0, 2.5, 6.0, 9.9, 14.0] {
            let v = trajectory_value(&p, &x, &w, &r, t).unwrap();
            assert!((s.value(t) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = MediatorParams::zeros(2);
        let r = RandomEffects::default();
        assert!(trajectory_value(&p, &x_design(0, 0), &[1.0], &r, 1.0).is_err());
        assert!(trajectory(&p, &x_design(0, 0), &[1.0, 0.0, 0.0], &r).is_err());
    }

    #[test]
    fn loglik_closed_forms() {
        let mut p = MediatorParams::zeros(0);
        let r = RandomEffects::default();
        let x = x_design(0, 0);
        let one = [LongitudinalRecord { t: 1.0, m_obs: 0.0 }];
        assert!((longitudinal_loglik(&p, &x, &[], &r, &one).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-12);
        p.sigma = 2.0;
        let two = [LongitudinalRecord { t: 1.0, m_obs: 2.0 }];
        let want = -(2f64).ln() - 0.5 - 0.5 * (2.0 * PI).ln();
        let got = longitudinal_loglik(&p, &x, &[], &r, &two).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got + 2.112_085_713_764_618).abs() < 1e-6);
        assert_eq!(longitudinal_loglik(&p, &x, &[], &r, &[]).unwrap(), 0.0);
        let doubled = [two[0], two[0]];
        assert!((longitudinal_loglik(&p, &x, &[], &r, &doubled).unwrap() - 2.0 * got).abs() < 1e-12);
    }

    #[test]
    fn random_effect_space_embeds_in_population_space() {
        let b = MediatorBases::standard();
        let c = b.random_in_population.expect("knot set {1,5} is contained in {1,3,5}");
        for t in [0.0, 0.5, 2.0, 4.0, 7.0, 12.0] {
            let pb = b.population.eval(t).unwrap();
            let rb = b.random.eval(t).unwrap();
            for k in 0..3 {
                let v: f64 = (0..4).map(|j| c[k][j] * pb[j]).sum();
                assert!((v - rb[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sample_covariance_near_identity() {
        let law = RandomEffectsLaw::identity();
        let mut rng = crate::rng::substream(11, 0, 0);
        let n = 100_000;
        let mut s = Matrix4::<f64>::zeros();
        for _ in 0..n {
            let v = Vector4::from(law.sample(&mut rng).r);
            s += v * v.transpose();
        }
        s /= n as f64;
        assert!((s - Matrix4::identity()).amax() < 0.05);
    }

    #[test]
    fn degenerate_scale_and_determinism_and_rejection() {
        let tiny = RandomEffectsLaw::new(Matrix4::identity() * 1e-12).unwrap();
        let r = sample_random_effects(&tiny, 9);
        assert!(r.r.iter().all(|v| v.abs() < 1e-4));
        let law = RandomEffectsLaw::identity();
        assert_eq!(sample_random_effects(&law, 4), sample_random_effects(&law, 4));
        let mut bad = Matrix4::identity();
        bad[(0, 0)] = -1.0;
        assert!(RandomEffectsLaw::new(bad).is_err());
        let mut asym = Matrix4::identity();
        asym[(0, 1)] = 0.3;
        assert!(RandomEffectsLaw::new(asym).is_err());
    }

    #[test]
    fn log_density_matches_independent_normal() {
        let mut cov = Matrix4::from_diagonal(&Vector4::new(1.0, 4.0, 0.25, 9.0));
        let law = RandomEffectsLaw::new(cov).unwrap();
        let r = RandomEffects { r: [0.5, -1.0, 0.2, 3.0] };
        let sd = [1.0, 2.0, 0.5, 3.0];
        let want: f64 = (0..4)
            .map(|i| -0.5 * (r.r[i] / sd[i]).powi(2) - sd[i].ln() - 0.5 * (2.0 * PI).ln())
            .sum();
        assert!((law.log_density(&r) - want).abs() < 1e-12);
        cov[(0, 1)] = 0.5;
        cov[(1, 0)] = 0.5;
        let law = RandomEffectsLaw::new(cov).unwrap();
        let inv = cov.try_inverse().unwrap();
        let v = Vector4::from(r.r);
        let want = -0.5 * (v.transpose() * inv * v)[0] - 0.5 * cov.determinant().ln() - 2.0 * (2.0 * PI).ln();
        assert!((law.log_density(&r) - want).abs() < 1e-10);
    }

    proptest::proptest! {
        #[test]
        fn trajectory_is_affine_in_parameters(seed in 0u64..1000, t in 0.0f64..14.0, s in -2.0f64..2.0) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let p1 = rand_params(&mut rng, 2);
            let p2 = rand_params(&mut rng, 2);
            let x = x_design((seed % 2) as u8, (seed % 3) as u8);
            let w = [1.0, 0.0];
            let r1 = RandomEffects { r: std::array::from_fn(|_| rng.random_range(-1.0..1.0)) };
            let r2 = RandomEffects { r: std::array::from_fn(|_| rng.random_range(-1.0..1.0)) };
            let mix = |a: f64, b: f64| a + s * (b - a);
            let pm = MediatorParams {
                beta0: mix(p1.beta0, p2.beta0),
                beta1: std::array::from_fn(|j| mix(p1.beta1[j], p2.beta1[j])),
                beta2: p1.beta2.iter().zip(&p2.beta2).map(|(a, b)| mix(*a, *b)).collect(),
                alpha: std::array::from_fn(|j| mix(p1.alpha[j], p2.alpha[j])),
                psi: std::array::from_fn(|k| std::array::from_fn(|j| mix(p1.psi[k][j], p2.psi[k][j]))),
                sigma: 1.0,
            };
            let rm = RandomEffects { r: std::array::from_fn(|j| mix(r1.r[j], r2.r[j])) };
            let f1 = trajectory_value(&p1, &x, &w, &r1, t).unwrap();
            let f2 = trajectory_value(&p2, &x, &w, &r2, t).unwrap();
            let fm = trajectory_value(&pm, &x, &w, &rm, t).unwrap();
            proptest::prop_assert!((fm - mix(f1, f2)).abs() <= 1e-12 * (1.0 + fm.abs()) * 100.0);
        }

        #[test]
        fn loglik_is_permutation_invariant(seed in 0u64..500) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let p = rand_params(&mut rng, 0);
            let x = x_design(1, 0);
            let r = RandomEffects::default();
            let mut recs: Vec<_> = (0..6)
                .map(|_| LongitudinalRecord { t: rng.random_range(0.0..10.0), m_obs: rng.random_range(-2.0..2.0) })
                .collect();
            let a = longitudinal_loglik(&p, &x, &[], &r, &recs).unwrap();
            recs.reverse();
            recs.swap(0, 3);
            let b = longitudinal_loglik(&p, &x, &[], &r, &recs).unwrap();
            proptest::prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
