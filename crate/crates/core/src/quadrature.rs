//! Gauss–Legendre rules on [-1, 1] and the spectral integration matrix used
//! for running integrals of smooth integrands.

use std::sync::OnceLock;

/// An `n`-point Gauss–Legendre rule together with the matrix that maps
/// integrand values at the nodes to running integrals `∫_{-1}^{x_i}`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    running: Vec<f64>,
}

/// Legendre polynomials P_0..=P_max at `x`.
fn legendre_values(x: f64, max: usize, out: &mut [f64]) {
    out[0] = 1.0;
    if max >= 1 {
        out[1] = x;
    }
    for n in 1..max {
        let nf = n as f64;
        out[n + 1] = ((2.0 * nf + 1.0) * x * out[n] - nf * out[n - 1]) / (nf + 1.0);
    }
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let mut p = vec![0.0; n + 1];
        for i in 0..n {
            // Chebyshev-style initial guess, then Newton on P_n.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                legendre_values(x, n, &mut p);
                let dp = n as f64 * (x * p[n] - p[n - 1]) / (x * x - 1.0);
                let step = p[n] / dp;
                x -= step;
                if step.abs() < 1e-16 {
                    break;
                }
            }
            legendre_values(x, n, &mut p);
            let dp = n as f64 * (x * p[n] - p[n - 1]) / (x * x - 1.0);
            nodes[i] = x;
            weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
        // ascending order
        nodes.reverse();
        weights.reverse();

        let mut gl = GaussLegendre {
            nodes,
            weights,
            running: Vec::new(),
        };
        let mut running = vec![0.0; n * n];
        for i in 0..n {
            let row = gl.running_weights(gl.nodes[i]);
            running[i * n..(i + 1) * n].copy_from_slice(&row);
        }
        gl.running = running;
        gl
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Weights `c_j` with `∫_{-1}^{x} p(v) dv = Σ_j c_j f(x_j)` for the
    /// degree-(n-1) interpolant `p` of `f` at the nodes.
    pub fn running_weights(&self, x: f64) -> Vec<f64> {
        let n = self.len();
        let mut px = vec![0.0; n + 1];
        legendre_values(x, n, &mut px);
        // ∫_{-1}^{x} P_k = (P_{k+1}(x) - P_{k-1}(x)) / (2k+1), and x + 1 for k = 0.
        let mut integ = vec![0.0; n];
        integ[0] = x + 1.0;
        for k in 1..n {
            integ[k] = (px[k + 1] - px[k - 1]) / (2.0 * k as f64 + 1.0);
        }
        let mut pj = vec![0.0; n + 1];
        let mut out = vec![0.0; n];
        for j in 0..n {
            legendre_values(self.nodes[j], n, &mut pj);
            let mut acc = 0.0;
            for k in 0..n {
                acc += (2.0 * k as f64 + 1.0) / 2.0 * pj[k] * integ[k];
            }
            out[j] = self.weights[j] * acc;
        }
        out
    }

    /// Row `i` of the running-integral matrix.
    pub fn running_row(&self, i: usize) -> &[f64] {
        let n = self.len();
        &self.running[i * n..(i + 1) * n]
    }

    /// ∫_a^b f using the rule mapped onto [a, b].
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mid + half * x);
        }
        acc * half
    }

    /// Maps node `i` onto [a, b].
    #[inline]
    pub fn node_on(&self, i: usize, a: f64, b: f64) -> f64 {
        0.5 * (a + b) + 0.5 * (b - a) * self.nodes[i]
    }
}

/// Shared 16-point rule.
pub fn gl16() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(16))
}

/// Shared 4-point rule (exact for polynomials of degree 7).
pub fn gl4() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(4))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_two() {
        for n in [1, 2, 4, 8, 16] {
            let gl = GaussLegendre::new(n);
            let s: f64 = gl.weights.iter().sum();
            assert!((s - 2.0).abs() < 1e-14, "n={n} sum={s}");
        }
    }

    #[test]
    fn exact_for_polynomials_up_to_degree_2n_minus_1() {
        let gl = GaussLegendre::new(4);
        // ∫_0^3 v^7 dv = 3^8 / 8
        let got = gl.integrate(0.0, 3.0, |v| v.powi(7));
        assert!((got - 3f64.powi(8) / 8.0).abs() < 1e-10);
    }

    #[test]
    fn running_integral_of_exponential() {
        let gl = gl16();
        // ∫_{-1}^{x_i} e^v dv = e^{x_i} - e^{-1}
        let f: Vec<f64> = gl.nodes.iter().map(|x| x.exp()).collect();
        for i in 0..gl.len() {
            let got: f64 = gl.running_row(i).iter().zip(&f).map(|(c, v)| c * v).sum();
            let want = gl.nodes[i].exp() - (-1f64).exp();
            assert!((got - want).abs() < 1e-14, "i={i} got={got} want={want}");
        }
        let full = gl.running_weights(1.0);
        for (a, b) in full.iter().zip(&gl.weights) {
            assert!((a - b).abs() < 1e-13);
        }
    }
}
