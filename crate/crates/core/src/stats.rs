//! Small summary-statistic helpers.

use serde::{Deserialize, Serialize};

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance with denominator `n − 1` (0 for fewer than two values).
pub fn variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

/// Standard error of the mean.
pub fn std_error(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    (variance(v) / v.len() as f64).sqrt()
}

/// Linear-interpolation quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
}

/// Mean, SD and central 95% interval. Values are sorted first so the result
/// does not depend on input order.
pub fn summarize(values: &[f64]) -> Summary {
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    Summary {
        mean: mean(&s),
        sd: variance(&s).sqrt(),
        q025: quantile_sorted(&s, 0.025),
        q975: quantile_sorted(&s, 0.975),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_summaries() {
        let v = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(mean(&v), 2.5);
        assert!((variance(&v) - 5.0 / 3.0).abs() < 1e-15);
        let s = summarize(&v);
        assert!((s.q025 - 1.075).abs() < 1e-12 && (s.q975 - 3.925).abs() < 1e-12);
        let mut r = v;
        r.reverse();
        assert_eq!(summarize(&r), s);
    }
}
