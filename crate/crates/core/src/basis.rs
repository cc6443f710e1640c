//! Natural cubic spline bases for the population-level and subject-level
//! time trends of the mediator.
//!
//! With knots `κ_1 < … < κ_K` (boundary knots included) the basis is
//! `N_1(t) = t` and `N_{k+1}(t) = d_k(t) − d_{K−1}(t)` for `k = 1..K−2`, where
//! `d_k(t) = [(t−κ_k)₊³ − (t−κ_K)₊³] / (κ_K − κ_k)`. The intercept is carried
//! by the mediator model, so the basis has `K − 1 = #interior + 1` functions,
//! each vanishing at the lower boundary. Beyond either boundary knot every
//! function is linear; in particular the trend is extrapolated linearly
//! past the upper boundary (10 years for the standard bases).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A natural cubic spline basis without intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    boundary_knots: (f64, f64),
    interior_knots: Vec<f64>,
    /// Truncated-power coefficients: `functions[j]` lists `(knot, coef)` pairs
    /// for function `j + 1` (function 0 is the linear term).
    functions: Vec<Vec<(f64, f64)>>,
}

impl SplineBasis {
    pub fn new(boundary_knots: (f64, f64), interior_knots: Vec<f64>) -> Result<Self> {
        let (lo, hi) = boundary_knots;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid("boundary knots must be finite and increasing"));
        }
        if interior_knots.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("interior knots must be strictly increasing"));
        }
        if interior_knots.iter().any(|&k| !(k > lo && k < hi)) {
            return Err(Error::invalid("interior knots must lie strictly inside the boundary"));
        }
        let mut knots = Vec::with_capacity(interior_knots.len() + 2);
        knots.push(lo);
        knots.extend_from_slice(&interior_knots);
        knots.push(hi);
        let last = knots.len() - 1;
        let c = |k: usize| 1.0 / (knots[last] - knots[k]);
        let c_pen = c(last - 1);
        let functions = (0..last - 1)
            .map(|k| {
                let ck = c(k);
                vec![
                    (knots[k], ck),
                    (knots[last - 1], -c_pen),
                    (knots[last], c_pen - ck),
                ]
            })
            .collect();
        Ok(SplineBasis {
            boundary_knots,
            interior_knots,
            functions,
        })
    }

    pub fn boundary_knots(&self) -> (f64, f64) {
        self.boundary_knots
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.interior_knots
    }

    /// Boundary and interior knots in increasing order.
    pub fn knots(&self) -> Vec<f64> {
        let mut k = vec![self.boundary_knots.0];
        k.extend_from_slice(&self.interior_knots);
        k.push(self.boundary_knots.1);
        k
    }

    pub fn dimension(&self) -> usize {
        self.interior_knots.len() + 1
    }

    /// Writes the basis values at `t` into `out` (length `dimension`).
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dimension());
        let t0 = t - self.boundary_knots.0;
        out[0] = t0;
        for (slot, terms) in out[1..].iter_mut().zip(&self.functions) {
            *slot = terms
                .iter()
                .map(|&(k, c)| {
                    let d = t - k;
                    if d > 0.0 {
                        c * d * d * d
                    } else {
                        0.0
                    }
                })
                .sum();
        }
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        if !t.is_finite() {
            return Err(Error::invalid(format!("basis evaluated at non-finite t = {t}")));
        }
        let mut out = vec![0.0; self.dimension()];
        self.eval_into(t, &mut out);
        Ok(out)
    }

    /// Derivative of the given order (0..=3) of every basis function at `t`.
    pub fn eval_derivative(&self, t: f64, order: u8) -> Result<Vec<f64>> {
        if !t.is_finite() {
            return Err(Error::invalid(format!("basis evaluated at non-finite t = {t}")));
        }
        if order == 0 {
            return self.eval(t);
        }
        if order > 3 {
            return Err(Error::invalid("derivative order must be at most 3"));
        }
        let mut out = vec![0.0; self.dimension()];
        out[0] = if order == 1 { 1.0 } else { 0.0 };
        for (slot, terms) in out[1..].iter_mut().zip(&self.functions) {
            *slot = terms
                .iter()
                .map(|&(k, c)| truncated_cube_derivative(t - k, order) * c)
                .sum();
        }
        Ok(out)
    }

    /// `Σ_j coefs[j] · B_j(t)` as a cubic spline in truncated-power form.
    pub fn combine(&self, coefs: &[f64]) -> CubicSpline {
        assert_eq!(coefs.len(), self.dimension(), "coefficient length mismatch");
        let mut spline = CubicSpline::constant(0.0);
        spline.slope = coefs[0];
        spline.constant = -coefs[0] * self.boundary_knots.0;
        for (&w, terms) in coefs[1..].iter().zip(&self.functions) {
            for &(k, c) in terms {
                spline.push_term(k, w * c);
            }
        }
        spline
    }

    /// `∫_a^b B_j(v) dv` for every basis function (closed form).
    pub fn integral(&self, a: f64, b: f64) -> Vec<f64> {
        (0..self.dimension())
            .map(|j| {
                let mut e = vec![0.0; self.dimension()];
                e[j] = 1.0;
                self.combine(&e).integral(a, b)
            })
            .collect()
    }
}

#[inline]
fn truncated_cube_derivative(d: f64, order: u8) -> f64 {
    if d <= 0.0 {
        return 0.0;
    }
    match order {
        0 => d * d * d,
        1 => 3.0 * d * d,
        2 => 6.0 * d,
        _ => 6.0,
    }
}

/// Population-level basis: boundary knots 0 and 10 years, interior knots at
/// 1, 3 and 5 years.
pub fn make_population_basis() -> SplineBasis {
    SplineBasis::new((0.0, 10.0), vec![1.0, 3.0, 5.0]).expect("static knots are valid")
}

/// Subject-level basis: boundary knots 0 and 10 years, interior knots at 1 and 5.
pub fn make_random_effect_basis() -> SplineBasis {
    SplineBasis::new((0.0, 10.0), vec![1.0, 5.0]).expect("static knots are valid")
}

/// A cubic spline `c + s·t + Σ_j w_j (t − κ_j)₊³`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubicSpline {
    pub constant: f64,
    pub slope: f64,
    /// `(knot, coefficient)` pairs sorted by knot, knots distinct.
    pub terms: Vec<(f64, f64)>,
}

impl CubicSpline {
    pub fn constant(c: f64) -> Self {
        CubicSpline {
            constant: c,
            slope: 0.0,
            terms: Vec::new(),
        }
    }

    fn push_term(&mut self, knot: f64, coef: f64) {
        match self
            .terms
            .binary_search_by(|(k, _)| k.partial_cmp(&knot).expect("finite knots"))
        {
            Ok(i) => self.terms[i].1 += coef,
            Err(i) => self.terms.insert(i, (knot, coef)),
        }
    }

    /// `self + scale · other`.
    pub fn add_scaled(&mut self, other: &CubicSpline, scale: f64) {
        self.constant += scale * other.constant;
        self.slope += scale * other.slope;
        for &(k, c) in &other.terms {
            self.push_term(k, scale * c);
        }
    }

    #[inline]
    pub fn value(&self, t: f64) -> f64 {
        let mut v = self.constant + self.slope * t;
        for &(k, c) in &self.terms {
            let d = t - k;
            if d > 0.0 {
                v += c * d * d * d;
            } else {
                break;
            }
        }
        v
    }

    pub fn derivative(&self, t: f64, order: u8) -> f64 {
        match order {
            0 => self.value(t),
            _ => {
                let base = if order == 1 { self.slope } else { 0.0 };
                base + self
                    .terms
                    .iter()
                    .map(|&(k, c)| c * truncated_cube_derivative(t - k, order))
                    .sum::<f64>()
            }
        }
    }

    /// `∫_a^b` of the spline (closed form).
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        let prim = |t: f64| {
            let mut v = self.constant * t + 0.5 * self.slope * t * t;
            for &(k, c) in &self.terms {
                let d = t - k;
                if d > 0.0 {
                    v += 0.25 * c * d * d * d * d;
                }
            }
            v
        };
        prim(b) - prim(a)
    }

    pub fn knots(&self) -> impl Iterator<Item = f64> + '_ {
        self.terms.iter().map(|&(k, _)| k)
    }
}
