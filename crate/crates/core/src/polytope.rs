//! Exact linear optimisation over transportation polytopes.
//!
//! Vertices of `{P ≥ 0 : row sums = φ, column sums = μ, P_jk = 0 off the
//! allowed cells}` are basic solutions supported on spanning trees of the
//! bipartite row/column graph of allowed cells. Every spanning tree is
//! enumerated, its unique solution computed by peeling leaves, and the
//! nonnegative ones compared. Tree lists are cached per `(K, constraint)`.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::confounder::{JointConfounderMatrix, MarginalPair, PROB_TOL};
use crate::error::{Error, Result};

pub const MAX_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolytopeConstraint {
    Unconstrained,
    Monotone,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolytopeOptimum {
    pub min_value: f64,
    pub max_value: f64,
    pub argmin: JointConfounderMatrix,
    pub argmax: JointConfounderMatrix,
}

type Tree = Vec<(usize, usize)>;

fn allowed_cells(k: usize, c: PolytopeConstraint) -> Vec<(usize, usize)> {
    let mut cells = Vec::new();
    for r in 0..k {
        for col in 0..k {
            if c == PolytopeConstraint::Unconstrained || col >= r {
                cells.push((r, col));
            }
        }
    }
    cells
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// All spanning trees of the bipartite graph on `2k` nodes with the given
/// edges (row `r` is node `r`, column `c` is node `k + c`).
fn spanning_trees(k: usize, edges: &[(usize, usize)]) -> Vec<Tree> {
    let need = 2 * k - 1;
    let mut out = Vec::new();
    let mut chosen = Vec::with_capacity(need);
    fn rec(
        k: usize,
        edges: &[(usize, usize)],
        start: usize,
        need: usize,
        chosen: &mut Vec<(usize, usize)>,
        out: &mut Vec<Tree>,
    ) {
        if chosen.len() == need {
            out.push(chosen.clone());
            return;
        }
        if edges.len() - start < need - chosen.len() {
            return;
        }
        for i in start..edges.len() {
            if edges.len() - i < need - chosen.len() {
                break;
            }
            let (r, c) = edges[i];
            // cycle check against the current forest
            let mut parent: Vec<usize> = (0..2 * k).collect();
            for &(a, b) in chosen.iter() {
                let (x, y) = (find(&mut parent, a), find(&mut parent, k + b));
                parent[x] = y;
            }
            if find(&mut parent, r) == find(&mut parent, k + c) {
                continue;
            }
            chosen.push((r, c));
            rec(k, edges, i + 1, need, chosen, out);
            chosen.pop();
        }
    }
    rec(k, edges, 0, need, &mut chosen, &mut out);
    out
}

fn cached_trees(k: usize, c: PolytopeConstraint) -> &'static [Tree] {
    static CACHE: [[OnceLock<Vec<Tree>>; MAX_K + 1]; 2] = [const { [const { OnceLock::new() }; MAX_K + 1] }; 2];
    let slot = match c {
        PolytopeConstraint::Unconstrained => 0,
        PolytopeConstraint::Monotone => 1,
    };
    CACHE[slot][k].get_or_init(|| spanning_trees(k, &allowed_cells(k, c)))
}

/// Solves the tree-supported system by repeatedly fixing leaf edges.
fn solve_tree(k: usize, tree: &Tree, m: &MarginalPair) -> Option<JointConfounderMatrix> {
    let mut rem: Vec<f64> = m.phi.iter().chain(&m.mu).copied().collect();
    let mut degree = vec![0usize; 2 * k];
    for &(r, c) in tree {
        degree[r] += 1;
        degree[k + c] += 1;
    }
    let mut alive = vec![true; tree.len()];
    let mut out = JointConfounderMatrix::zeros(k);
    for _ in 0..tree.len() {
        // the first live edge touching a leaf node
        let (e, leaf) = tree.iter().enumerate().find_map(|(i, &(r, c))| {
            if !alive[i] {
                None
            } else if degree[r] == 1 {
                Some((i, r))
            } else if degree[k + c] == 1 {
                Some((i, k + c))
            } else {
                None
            }
        })?;
        let (r, c) = tree[e];
        let other = if leaf == r { k + c } else { r };
        let x = rem[leaf];
        if x < -PROB_TOL {
            return None;
        }
        let x = x.max(0.0);
        out.p[r][c] = x;
        rem[leaf] = 0.0;
        rem[other] -= x;
        degree[r] -= 1;
        degree[k + c] -= 1;
        alive[e] = false;
    }
    if rem.iter().any(|v| v.abs() > 1e-9) {
        return None;
    }
    Some(out)
}

/// Minimises and maximises `Σ weight_jk P_jk` over the polytope.
pub fn optimize_linear_over_polytope(
    m: &MarginalPair,
    weight: &[Vec<f64>],
    constraint: PolytopeConstraint,
) -> Result<PolytopeOptimum> {
    m.validate()?;
    let k = m.k();
    if k > MAX_K {
        return Err(Error::UnsupportedDimension(k));
    }
    if weight.len() != k || weight.iter().any(|r| r.len() != k) {
        return Err(Error::invalid("weight matrix must be K x K"));
    }
    if weight.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("weight matrix must be finite"));
    }
    let mut best: Option<PolytopeOptimum> = None;
    for tree in cached_trees(k, constraint) {
        let Some(p) = solve_tree(k, tree, m) else { continue };
        let v = p.dot(weight);
        match &mut best {
            None => {
                best = Some(PolytopeOptimum {
                    min_value: v,
                    max_value: v,
                    argmin: p.clone(),
                    argmax: p,
                })
            }
            Some(b) => {
                if v < b.min_value {
                    b.min_value = v;
                    b.argmin = p.clone();
                }
                if v > b.max_value {
                    b.max_value = v;
                    b.argmax = p;
                }
            }
        }
    }
    best.ok_or_else(|| {
        let (p_min, p_max) = if k == 3 {
            crate::confounder::p11_interval(m)
        } else {
            (f64::NAN, f64::NAN)
        };
        Error::MonotonicityInfeasible { p_min, p_max }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::confounder::{joint_from_rho, p11_bounds};
    use rand::{Rng, SeedableRng};

    fn grid_marginals(rng: &mut impl Rng) -> MarginalPair {
        // marginals on the 0.01 grid so grid search contains all vertices
        let draw = |rng: &mut dyn rand::RngCore| {
            let a = rng.random_range(1..98u32);
            let b = rng.random_range(1..(99 - a));
            let c = 100 - a - b;
            vec![a as f64 / 100.0, b as f64 / 100.0, c as f64 / 100.0]
        };
        MarginalPair { mu: draw(rng), phi: draw(rng) }
    }

    /// Brute force over the 4-dimensional free part of a 3×3 table on the
    /// 0.01 grid.
    fn brute(m: &MarginalPair, w: &[Vec<f64>], monotone: bool) -> Option<(f64, f64)> {
        let q = |v: f64| (v * 100.0).round() as i64;
        let phi: Vec<i64> = m.phi.iter().map(|v| q(*v)).collect();
        let mu: Vec<i64> = m.mu.iter().map(|v| q(*v)).collect();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for p00 in 0..=100 {
            for p01 in 0..=100 - p00 {
                let p02 = phi[0] - p00 - p01;
                if p02 < 0 {
                    continue;
                }
                for p10 in 0..=100 {
                    for p11 in 0..=100 - p10 {
                        let p12 = phi[1] - p10 - p11;
                        let p20 = mu[0] - p00 - p10;
                        let p21 = mu[1] - p01 - p11;
                        let p22 = mu[2] - p02 - p12;
                        if p12 < 0 || p20 < 0 || p21 < 0 || p22 < 0 || p20 + p21 + p22 != phi[2] {
                            continue;
                        }
                        if monotone && (p10 != 0 || p20 != 0 || p21 != 0) {
                            continue;
                        }
                        let p = [[p00, p01, p02], [p10, p11, p12], [p20, p21, p22]];
                        let v: f64 = (0..3)
                            .flat_map(|r| (0..3).map(move |c| (r, c)))
                            .map(|(r, c)| w[r][c] * p[r][c] as f64 / 100.0)
                            .sum();
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
            }
        }
        lo.is_finite().then_some((lo, hi))
    }

    #[test]
    fn tree_counts_match_known_formulas() {
        // K_{m,n} has m^{n-1} n^{m-1} spanning trees
        assert_eq!(cached_trees(2, PolytopeConstraint::Unconstrained).len(), 4);
        assert_eq!(cached_trees(3, PolytopeConstraint::Unconstrained).len(), 81);
        assert_eq!(cached_trees(3, PolytopeConstraint::Monotone).len(), 4);
    }

    #[test]
    fn null_objective() {
        let m = MarginalPair::new(vec![0.2, 0.3, 0.5], vec![0.4, 0.4, 0.2]).unwrap();
        let w = vec![vec![0.0; 3]; 3];
        for c in [PolytopeConstraint::Monotone, PolytopeConstraint::Unconstrained] {
            let o = optimize_linear_over_polytope(&m, &w, c).unwrap();
            assert_eq!((o.min_value, o.max_value), (0.0, 0.0));
        }
    }

    #[test]
    fn p11_objective_matches_bounds() {
        let m = MarginalPair::new(vec![0.2, 0.3, 0.5], vec![0.4, 0.4, 0.2]).unwrap();
        let mut w = vec![vec![0.0; 3]; 3];
        w[1][1] = 1.0;
        let o = optimize_linear_over_polytope(&m, &w, PolytopeConstraint::Monotone).unwrap();
        let (lo, hi) = p11_bounds(&m).unwrap();
        assert!((o.min_value - lo).abs() < 1e-12 && (o.max_value - hi).abs() < 1e-12);
        assert!(o.argmin.validate_against(&m, 1e-10).is_ok());
        assert!(o.argmax.is_monotone(0.0));
    }

    #[test]
    fn infeasible_and_unsupported() {
        let m = MarginalPair::new(vec![0.6, 0.1, 0.3], vec![0.3, 0.1, 0.6]).unwrap();
        let w = vec![vec![1.0; 3]; 3];
        assert!(matches!(
            optimize_linear_over_polytope(&m, &w, PolytopeConstraint::Monotone),
            Err(Error::MonotonicityInfeasible { .. })
        ));
        assert!(optimize_linear_over_polytope(&m, &w, PolytopeConstraint::Unconstrained).is_ok());
        let k6 = MarginalPair::new(vec![1.0 / 6.0; 6], vec![1.0 / 6.0; 6]).unwrap();
        assert!(matches!(
            optimize_linear_over_polytope(&k6, &vec![vec![0.0; 6]; 6], PolytopeConstraint::Unconstrained),
            Err(Error::UnsupportedDimension(6))
        ));
    }

    #[test]
    fn agrees_with_grid_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let mut checked = 0;
        while checked < 12 {
            let m = grid_marginals(&mut rng);
            let w: Vec<Vec<f64>> = (0..3).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let un = optimize_linear_over_polytope(&m, &w, PolytopeConstraint::Unconstrained).unwrap();
            let (blo, bhi) = brute(&m, &w, false).unwrap();
            assert!((un.min_value - blo).abs() < 1e-9 && (un.max_value - bhi).abs() < 1e-9);
            if let Some((mlo, mhi)) = brute(&m, &w, true) {
                let mo = optimize_linear_over_polytope(&m, &w, PolytopeConstraint::Monotone).unwrap();
                assert!((mo.min_value - mlo).abs() < 1e-9 && (mo.max_value - mhi).abs() < 1e-9);
                assert!(mo.min_value >= un.min_value - 1e-12 && mo.max_value <= un.max_value + 1e-12);
            }
            checked += 1;
        }
    }

    #[test]
    fn monotone_optimum_is_at_rho_endpoint() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(18);
        let mut n = 0;
        while n < 200 {
            let m = grid_marginals(&mut rng);
            if p11_bounds(&m).is_err() {
                continue;
            }
            let w: Vec<Vec<f64>> = (0..3).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let o = optimize_linear_over_polytope(&m, &w, PolytopeConstraint::Monotone).unwrap();
            let vals: Vec<f64> = (0..=100).map(|i| joint_from_rho(&m, i as f64 / 100.0).unwrap().dot(&w)).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!((o.min_value - lo).abs() < 1e-12 && (o.max_value - hi).abs() < 1e-12);
            let ends = [vals[0], vals[100]];
            assert!(ends.iter().any(|v| (v - lo).abs() < 1e-12));
            assert!(ends.iter().any(|v| (v - hi).abs() < 1e-12));
            n += 1;
        }
    }

    #[test]
    fn outer_product_is_feasible_and_within_bounds() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(19);
        for k in 2..=4 {
            for _ in 0..20 {
                let raw = |rng: &mut dyn rand::RngCore| {
                    let v: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.01).collect();
                    let s: f64 = v.iter().sum();
                    v.into_iter().map(|x| x / s).collect::<Vec<_>>()
                };
                let m = MarginalPair::new(raw(&mut rng), raw(&mut rng)).unwrap();
                let outer = JointConfounderMatrix::outer(&m);
                assert!(outer.validate_against(&m, 1e-10).is_ok());
                let w: Vec<Vec<f64>> = (0..k).map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
                let o = optimize_linear_over_polytope(&m, &w, PolytopeConstraint::Unconstrained).unwrap();
                let v = outer.dot(&w);
                assert!(v >= o.min_value - 1e-12 && v <= o.max_value + 1e-12);
            }
        }
    }

    #[test]
    fn k5_runs() {
        let m = MarginalPair::new(vec![0.2; 5], vec![0.2; 5]).unwrap();
        let mut w = vec![vec![0.0; 5]; 5];
        for (i, row) in w.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        let o = optimize_linear_over_polytope(&m, &w, PolytopeConstraint::Monotone).unwrap();
        assert!((o.max_value - 1.0).abs() < 1e-12);
        let u = optimize_linear_over_polytope(&m, &w, PolytopeConstraint::Unconstrained).unwrap();
        assert!(u.min_value.abs() < 1e-12);
    }
}
