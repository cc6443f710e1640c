//! Proportional-hazards outcome model with piecewise-constant arm-specific
//! baselines, trajectory functionals, RMST and event-time simulation, plus
//! the Kaplan–Meier restricted area.
//!
//! The hazard is `λ_a(t) · exp{γ1'U + γ2'U·a + γ3'w + g(t)·(ζ1 + ζ2 I(U=1) +
//! ζ3 I(U=2) + ζ4 a) + ξ r0}`. Under the three-year legacy functional `g` is
//! constant and everything is closed form. Under the current-change
//! functional the hazard is smooth between breakpoints (baseline cuts, spline
//! knots) and is integrated with 16-point Gauss–Legendre panels of width at
//! most one year.

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mediator::MediatorPath;
use crate::quadrature::{gl16, gl4};

pub const DEFAULT_CUT_POINTS: [f64; 10] = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 7.0, 9.0, 11.0, 13.0];
pub const DEFAULT_T_MAX: f64 = 15.0;
pub const EVENT_HORIZON: f64 = 500.0;
const LEGACY_WINDOW: f64 = 3.0;
const MAX_PANEL: f64 = 1.0;
const REFINE_TOL: f64 = 1e-8;
const MAX_REFINE: usize = 8;
const INVERT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseHazard {
    pub cut_points: Vec<f64>,
    pub levels: Vec<f64>,
}

impl PiecewiseHazard {
    pub fn new(cut_points: Vec<f64>, levels: Vec<f64>) -> Result<Self> {
        let h = PiecewiseHazard { cut_points, levels };
        h.validate()?;
        Ok(h)
    }

    pub fn constant(level: f64) -> Self {
        PiecewiseHazard {
            cut_points: vec![0.0],
            levels: vec![level],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cut_points.is_empty() || self.cut_points[0] != 0.0 {
            return Err(Error::invalid("baseline cut points must start at 0"));
        }
        if self.cut_points.windows(2).any(|w| !(w[0] < w[1])) || self.cut_points.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("baseline cut points must be finite and strictly increasing"));
        }
        if self.levels.len() != self.cut_points.len() {
            return Err(Error::invalid("one baseline level is required per cut point"));
        }
        if self.levels.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::invalid("baseline levels must be positive and finite"));
        }
        Ok(())
    }

    /// Index of the piece containing `t` (pieces are right-open).
    pub fn piece_index(&self, t: f64) -> usize {
        self.cut_points.partition_point(|&c| c <= t).saturating_sub(1)
    }

    pub fn level_at(&self, t: f64) -> f64 {
        self.levels[self.piece_index(t)]
    }

    /// End of piece `j` (infinite for the last piece).
    pub fn piece_end(&self, j: usize) -> f64 {
        self.cut_points.get(j + 1).copied().unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionalKind {
    ThreeYearLegacy,
    CurrentChange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalParams {
    pub baseline_control: PiecewiseHazard,
    pub baseline_treated: PiecewiseHazard,
    pub gamma1: [f64; 2],
    pub gamma2: [f64; 2],
    pub gamma3: Vec<f64>,
    pub zeta: [f64; 4],
    pub xi: f64,
    pub functional_kind: FunctionalKind,
    pub t_max: f64,
}

impl SurvivalParams {
    /// Null covariate effects with a common constant baseline.
    pub fn constant(level: f64, w_dim: usize, kind: FunctionalKind) -> Self {
        SurvivalParams {
            baseline_control: PiecewiseHazard::constant(level),
            baseline_treated: PiecewiseHazard::constant(level),
            gamma1: [0.0; 2],
            gamma2: [0.0; 2],
            gamma3: vec![0.0; w_dim],
            zeta: [0.0; 4],
            xi: 0.0,
            functional_kind: kind,
            t_max: DEFAULT_T_MAX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.baseline_control.validate()?;
        self.baseline_treated.validate()?;
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return Err(Error::invalid("t_max must be positive"));
        }
        let finite = self
            .gamma1
            .iter()
            .chain(&self.gamma2)
            .chain(&self.gamma3)
            .chain(&self.zeta)
            .chain(std::iter::once(&self.xi))
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("survival coefficients must be finite"));
        }
        Ok(())
    }

    pub fn baseline(&self, a: u8) -> &PiecewiseHazard {
        if a == 0 {
            &self.baseline_control
        } else {
            &self.baseline_treated
        }
    }

    /// `γ1'U + γ2'U·a + γ3'w + ξ r0`.
    pub fn linear_predictor(&self, a: u8, u: u8, w: &[f64], r0: f64) -> f64 {
        let a = f64::from(a.min(1));
        let u_ind = [(u == 1) as u8 as f64, (u == 2) as u8 as f64];
        let mut eta = self.xi * r0;
        for k in 0..2 {
            eta += u_ind[k] * (self.gamma1[k] + self.gamma2[k] * a);
        }
        eta + self.gamma3.iter().zip(w).map(|(g, v)| g * v).sum::<f64>()
    }

    /// Loading of the trajectory functional, `ζ1 + ζ2 I(U=1) + ζ3 I(U=2) + ζ4 a`.
    pub fn g_loading(&self, a: u8, u: u8) -> f64 {
        let mut z = self.zeta[0] + self.zeta[3] * f64::from(a.min(1));
        if u == 1 {
            z += self.zeta[1];
        } else if u == 2 {
            z += self.zeta[2];
        }
        z
    }

    /// Union of both baselines' cut points.
    pub fn cut_union(&self) -> Vec<f64> {
        let mut c: Vec<f64> = self
            .baseline_control
            .cut_points
            .iter()
            .chain(&self.baseline_treated.cut_points)
            .copied()
            .collect();
        c.sort_by(|a, b| a.partial_cmp(b).expect("finite cuts"));
        c.dedup();
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalOutcome {
    pub exit_time: f64,
    pub event: bool,
}

/// `∫_0^3 [M(v) − M(0)] dv` by 4-point Gauss–Legendre panels split at the
/// path's breakpoints, which is exact for the piecewise-cubic trajectories.
pub fn legacy_g<P: MediatorPath + ?Sized>(path: &P) -> f64 {
    let m0 = path.value(0.0);
    let mut edges = vec![0.0];
    let mut inner: Vec<f64> = path
        .breakpoints()
        .into_iter()
        .filter(|&b| b > 0.0 && b < LEGACY_WINDOW)
        .collect();
    if inner.is_empty() {
        inner.push(1.0);
    }
    inner.sort_by(|a, b| a.partial_cmp(b).unwrap());
    inner.dedup();
    edges.extend(inner);
    edges.push(LEGACY_WINDOW);
    let gl = gl4();
    edges
        .windows(2)
        .map(|e| gl.integrate(e[0], e[1], |v| path.value(v) - m0))
        .sum()
}

pub fn g_functional<P: MediatorPath + ?Sized>(kind: FunctionalKind, path: &P, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::invalid("trajectory functional requires t >= 0"));
    }
    Ok(match kind {
        FunctionalKind::ThreeYearLegacy => legacy_g(path),
        FunctionalKind::CurrentChange => path.value(t) - path.value(0.0),
    })
}

/// Closed-form quantities of a hazard `c·λ(t)` with piecewise-constant `λ`.
pub mod piecewise {
    use super::PiecewiseHazard;

    pub fn cumulative(base: &PiecewiseHazard, scale: f64, t: f64) -> f64 {
        let mut h = 0.0;
        for (j, &s) in base.cut_points.iter().enumerate() {
            if s >= t {
                break;
            }
            let e = base.piece_end(j).min(t);
            h += base.levels[j] * (e - s);
        }
        scale * h
    }

    /// `∫_0^{t_max} exp(−H(v)) dv`.
    pub fn rmst(base: &PiecewiseHazard, scale: f64, t_max: f64) -> f64 {
        let mut h = 0.0f64;
        let mut area = 0.0;
        for (j, &s) in base.cut_points.iter().enumerate() {
            if s >= t_max {
                break;
            }
            let len = base.piece_end(j).min(t_max) - s;
            let rate = scale * base.levels[j];
            let x = rate * len;
            let surv = (-h).exp();
            area += if x > 1e-300 {
                surv * (-(-x).exp_m1()) / rate
            } else {
                surv * len
            };
            h += x;
        }
        area
    }

    /// `inf{t : H(t) ≥ e}`, or `None` when `H(horizon) < e`.
    pub fn invert(base: &PiecewiseHazard, scale: f64, e: f64, horizon: f64) -> Option<f64> {
        let mut h = 0.0;
        for (j, &s) in base.cut_points.iter().enumerate() {
            if s >= horizon {
                break;
            }
            let end = base.piece_end(j).min(horizon);
            let rate = scale * base.levels[j];
            let next = h + rate * (end - s);
            if next >= e && rate > 0.0 {
                return Some((s + (e - h) / rate).min(end));
            }
            h = next;
        }
        None
    }
}

/// The trajectory functional of one subject as seen by the hazard.
#[derive(Clone, Copy)]
pub enum GPath<'a> {
    /// `g` constant in time.
    Constant(f64),
    /// `g(t) = M(t) − M(0)`.
    Change(&'a dyn MediatorPath),
}

impl<'a> GPath<'a> {
    pub fn new(kind: FunctionalKind, path: &'a dyn MediatorPath) -> Self {
        match kind {
            FunctionalKind::ThreeYearLegacy => GPath::Constant(legacy_g(path)),
            FunctionalKind::CurrentChange => GPath::Change(path),
        }
    }
}

/// Panel edges for smooth integration: baseline cuts, path breakpoints and
/// `end`, with every panel at most one year wide.
pub fn panel_edges(cuts: &[f64], path_breaks: &[f64], end: f64) -> Vec<f64> {
    let mut raw: Vec<f64> = cuts
        .iter()
        .chain(path_breaks)
        .copied()
        .filter(|&b| b > 0.0 && b < end)
        .collect();
    raw.push(0.0);
    raw.push(end);
    raw.sort_by(|a, b| a.partial_cmp(b).unwrap());
    raw.dedup();
    let mut edges = vec![raw[0]];
    for w in raw.windows(2) {
        let n = ((w[1] - w[0]) / MAX_PANEL).ceil().max(1.0) as usize;
        for k in 1..=n {
            edges.push(if k == n { w[1] } else { w[0] + (w[1] - w[0]) * k as f64 / n as f64 });
        }
    }
    edges
}

fn subdivide(edges: &[f64], parts: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity((edges.len() - 1) * parts + 1);
    out.push(edges[0]);
    for w in edges.windows(2) {
        for k in 1..=parts {
            out.push(if k == parts { w[1] } else { w[0] + (w[1] - w[0]) * k as f64 / parts as f64 });
        }
    }
    out
}

/// Values of `g` at the Gauss–Legendre nodes of every panel.
#[derive(Debug, Clone)]
pub struct NodeGrid {
    pub edges: Vec<f64>,
    /// `g` at node `i` of panel `p`, stored at `p * 16 + i`.
    pub g: Vec<f64>,
}

impl NodeGrid {
    pub fn new(edges: Vec<f64>, path: &dyn MediatorPath) -> Self {
        let gl = gl16();
        let m0 = path.value(0.0);
        let mut g = Vec::with_capacity((edges.len() - 1) * gl.len());
        for w in edges.windows(2) {
            for i in 0..gl.len() {
                g.push(path.value(gl.node_on(i, w[0], w[1])) - m0);
            }
        }
        NodeGrid { edges, g }
    }

    pub fn refined(&self, path: &dyn MediatorPath) -> Self {
        NodeGrid::new(subdivide(&self.edges, 2), path)
    }

    /// RMST on `[0, edges.last]` for the hazard `λ(t) exp(eta + load·g(t))`.
    pub fn rmst(&self, base: &PiecewiseHazard, eta: f64, load: f64) -> f64 {
        let gl = gl16();
        let n = gl.len();
        let mut h_start = 0.0;
        let mut area = 0.0;
        let mut f = [0.0; 16];
        for (p, w) in self.edges.windows(2).enumerate() {
            let half = 0.5 * (w[1] - w[0]);
            let lam = base.level_at(0.5 * (w[0] + w[1]));
            for i in 0..n {
                f[i] = lam * (eta + load * self.g[p * n + i]).exp();
            }
            let mut piece = 0.0;
            for i in 0..n {
                let row = gl.running_row(i);
                let mut hi = 0.0;
                for j in 0..n {
                    hi += row[j] * f[j];
                }
                piece += gl.weights[i] * (-(h_start + half * hi)).exp();
            }
            area += half * piece;
            let mut total = 0.0;
            for j in 0..n {
                total += gl.weights[j] * f[j];
            }
            h_start += half * total;
        }
        area
    }

    /// Cumulative hazard at every panel edge.
    pub fn cumulative_at_edges(&self, base: &PiecewiseHazard, eta: f64, load: f64) -> Vec<f64> {
        let gl = gl16();
        let n = gl.len();
        let mut out = Vec::with_capacity(self.edges.len());
        let mut h = 0.0;
        out.push(0.0);
        for (p, w) in self.edges.windows(2).enumerate() {
            let half = 0.5 * (w[1] - w[0]);
            let lam = base.level_at(0.5 * (w[0] + w[1]));
            let mut total = 0.0;
            for j in 0..n {
                total += gl.weights[j] * lam * (eta + load * self.g[p * n + j]).exp();
            }
            h += half * total;
            out.push(h);
        }
        out
    }
}

/// Refines until two successive estimates agree to `REFINE_TOL` relative.
fn refine_until<F: FnMut(&NodeGrid) -> f64>(start: NodeGrid, path: &dyn MediatorPath, mut f: F) -> f64 {
    let mut grid = start;
    let mut prev = f(&grid);
    for _ in 0..MAX_REFINE {
        grid = grid.refined(path);
        let next = f(&grid);
        if (next - prev).abs() <= REFINE_TOL * next.abs().max(f64::MIN_POSITIVE) {
            return next;
        }
        prev = next;
    }
    prev
}

/// Hazard of a single subject in one world.
#[derive(Clone, Copy)]
pub struct SubjectHazard<'a> {
    pub base: &'a PiecewiseHazard,
    pub eta: f64,
    pub load: f64,
    pub g: GPath<'a>,
}

impl<'a> SubjectHazard<'a> {
    pub fn new(
        sp: &'a SurvivalParams,
        a: u8,
        u: u8,
        w: &[f64],
        path: &'a dyn MediatorPath,
        r0: f64,
    ) -> Self {
        SubjectHazard {
            base: sp.baseline(a),
            eta: sp.linear_predictor(a, u, w, r0),
            load: sp.g_loading(a, u),
            g: GPath::new(sp.functional_kind, path),
        }
    }

    /// Scale applied to the baseline when `g` is constant.
    fn constant_scale(&self) -> Option<f64> {
        match self.g {
            GPath::Constant(g) => Some((self.eta + self.load * g).exp()),
            GPath::Change(_) => None,
        }
    }

    pub fn hazard(&self, t: f64) -> f64 {
        let lam = self.base.level_at(t);
        match self.g {
            GPath::Constant(g) => lam * (self.eta + self.load * g).exp(),
            GPath::Change(p) => lam * (self.eta + self.load * (p.value(t) - p.value(0.0))).exp(),
        }
    }

    fn edges(&self, path: &dyn MediatorPath, end: f64) -> Vec<f64> {
        panel_edges(&self.base.cut_points, &path.breakpoints(), end)
    }

    pub fn cumulative(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        if let Some(scale) = self.constant_scale() {
            return piecewise::cumulative(self.base, scale, t);
        }
        let GPath::Change(path) = self.g else { unreachable!() };
        if self.load == 0.0 {
            return piecewise::cumulative(self.base, self.eta.exp(), t);
        }
        let grid = NodeGrid::new(self.edges(path, t), path);
        refine_until(grid, path, |g| {
            *g.cumulative_at_edges(self.base, self.eta, self.load).last().unwrap()
        })
    }

    pub fn rmst(&self, t_max: f64) -> f64 {
        if let Some(scale) = self.constant_scale() {
            return piecewise::rmst(self.base, scale, t_max);
        }
        let GPath::Change(path) = self.g else { unreachable!() };
        if self.load == 0.0 {
            return piecewise::rmst(self.base, self.eta.exp(), t_max);
        }
        let grid = NodeGrid::new(self.edges(path, t_max), path);
        refine_until(grid, path, |g| g.rmst(self.base, self.eta, self.load))
    }

    pub fn loglik(&self, outcome: &SurvivalOutcome) -> f64 {
        let h = self.cumulative(outcome.exit_time);
        if outcome.event {
            self.hazard(outcome.exit_time).ln() - h
        } else {
            -h
        }
    }

    /// `inf{t : H(t) ≥ e}` within `horizon`, `None` beyond it.
    pub fn invert(&self, e: f64, horizon: f64) -> Option<f64> {
        if let Some(scale) = self.constant_scale() {
            return piecewise::invert(self.base, scale, e, horizon);
        }
        let GPath::Change(path) = self.g else { unreachable!() };
        if self.load == 0.0 {
            return piecewise::invert(self.base, self.eta.exp(), e, horizon);
        }
        let edges = self.edges(path, horizon);
        let gl = gl16();
        let m0 = path.value(0.0);
        let rate = |v: f64| self.base.level_at(v) * (self.eta + self.load * (path.value(v) - m0)).exp();
        let mut h = 0.0;
        for w in edges.windows(2) {
            let (s, end) = (w[0], w[1]);
            // Panels never straddle a baseline cut, so the level is fixed here.
            let piece = gl.integrate(s, end, rate);
            if h + piece >= e {
                let target = e - h;
                let (mut lo, mut hi) = (s, end);
                while hi - lo > INVERT_TOL {
                    let mid = 0.5 * (lo + hi);
                    if gl.integrate(s, mid, rate) >= target {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                return Some(0.5 * (lo + hi));
            }
            h += piece;
        }
        None
    }
}

pub fn hazard(sp: &SurvivalParams, a: u8, u: u8, w: &[f64], path: &dyn MediatorPath, r0: f64, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::invalid("hazard requires t >= 0"));
    }
    Ok(SubjectHazard::new(sp, a, u, w, path, r0).hazard(t))
}

pub fn cumulative_hazard(
    sp: &SurvivalParams,
    a: u8,
    u: u8,
    w: &[f64],
    path: &dyn MediatorPath,
    r0: f64,
    t: f64,
) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::invalid("cumulative hazard requires t >= 0"));
    }
    Ok(SubjectHazard::new(sp, a, u, w, path, r0).cumulative(t))
}

pub fn rmst(sp: &SurvivalParams, a: u8, u: u8, w: &[f64], path: &dyn MediatorPath, r0: f64) -> f64 {
    SubjectHazard::new(sp, a, u, w, path, r0).rmst(sp.t_max)
}

pub fn survival_loglik(
    sp: &SurvivalParams,
    a: u8,
    u: u8,
    w: &[f64],
    path: &dyn MediatorPath,
    r0: f64,
    outcome: &SurvivalOutcome,
) -> Result<f64> {
    if !(outcome.exit_time > 0.0 && outcome.exit_time.is_finite()) {
        return Err(Error::invalid("exit time must be positive and finite"));
    }
    Ok(SubjectHazard::new(sp, a, u, w, path, r0).loglik(outcome))
}

/// An uncensored event time; `beyond_horizon` marks draws where the
/// cumulative hazard stayed below the threshold up to the horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventDraw {
    pub time: f64,
    pub beyond_horizon: bool,
}

impl EventDraw {
    pub fn from_inversion(t: Option<f64>, horizon: f64) -> Self {
        match t {
            Some(time) => EventDraw { time, beyond_horizon: false },
            None => EventDraw { time: horizon, beyond_horizon: true },
        }
    }
}

/// Inverse-CDF event time with threshold `E ~ Exp(1)` drawn from `rng`.
pub fn simulate_event_time<R: Rng + ?Sized>(
    sp: &SurvivalParams,
    a: u8,
    u: u8,
    w: &[f64],
    path: &dyn MediatorPath,
    r0: f64,
    rng: &mut R,
) -> EventDraw {
    let e: f64 = rng.sample(Exp1);
    let h = SubjectHazard::new(sp, a, u, w, path, r0);
    EventDraw::from_inversion(h.invert(e, EVENT_HORIZON), EVENT_HORIZON)
}

/// Seeded convenience wrapper around [`simulate_event_time`].
pub fn simulate_event_time_seeded(
    sp: &SurvivalParams,
    a: u8,
    u: u8,
    w: &[f64],
    path: &dyn MediatorPath,
    r0: f64,
    seed: u64,
) -> EventDraw {
    let mut rng = crate::rng::substream(seed, crate::rng::domain::GENERIC, 1);
    simulate_event_time(sp, a, u, w, path, r0, &mut rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KmArea {
    pub estimate: f64,
    pub se: f64,
}

/// Area under the Kaplan–Meier curve on `[0, t_max]` with the Greenwood
/// variance `Σ_j A_j² d_j / (n_j (n_j − d_j))`, `A_j = ∫_{t_j}^{t_max} Ŝ`.
/// Events are processed before censorings at tied times.
pub fn km_restricted_auc(outcomes: &[SurvivalOutcome], t_max: f64) -> Result<KmArea> {
    if outcomes.is_empty() {
        return Err(Error::invalid("Kaplan-Meier requires at least one subject"));
    }
    if !(t_max > 0.0 && t_max.is_finite()) {
        return Err(Error::invalid("t_max must be positive"));
    }
    if outcomes.iter().any(|o| !(o.exit_time >= 0.0) || o.exit_time.is_nan()) {
        return Err(Error::invalid("exit times must be nonnegative"));
    }
    if outcomes.iter().all(|o| o.exit_time <= 0.0) {
        return Err(Error::DegenerateRiskSet);
    }
    let mut sorted: Vec<SurvivalOutcome> = outcomes.to_vec();
    sorted.sort_by(|a, b| a.exit_time.partial_cmp(&b.exit_time).unwrap().then(b.event.cmp(&a.event)));
    // distinct event times within the window with (n at risk, events)
    let mut steps: Vec<(f64, usize, usize)> = Vec::new();
    let n = sorted.len();
    let mut i = 0;
    while i < n {
        let t = sorted[i].exit_time;
        let mut j = i;
        let mut d = 0;
        while j < n && sorted[j].exit_time == t {
            d += sorted[j].event as usize;
            j += 1;
        }
        if d > 0 && t <= t_max {
            steps.push((t, n - i, d));
        }
        i = j;
    }
    // survival levels after each step
    let mut surv = Vec::with_capacity(steps.len());
    let mut s = 1.0;
    for &(_, n_j, d_j) in &steps {
        s *= 1.0 - d_j as f64 / n_j as f64;
        surv.push(s);
    }
    // A_j = ∫_{t_j}^{t_max} Ŝ, accumulated backwards
    let mut tail = vec![0.0; steps.len()];
    let mut acc = 0.0;
    for k in (0..steps.len()).rev() {
        let next = steps.get(k + 1).map_or(t_max, |s| s.0);
        acc += surv[k] * (next - steps[k].0);
        tail[k] = acc;
    }
    let first = steps.first().map_or(t_max, |s| s.0);
    let estimate = first + acc;
    let mut var = 0.0;
    for (k, &(_, n_j, d_j)) in steps.iter().enumerate() {
        if n_j > d_j {
            var += tail[k] * tail[k] * d_j as f64 / (n_j as f64 * (n_j - d_j) as f64);
        }
    }
    Ok(KmArea {
        estimate,
        se: var.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::CubicSpline;

    fn flat() -> CubicSpline {
        CubicSpline::constant(0.4)
    }

    #[test]
    fn g_functional_examples() {
        let c = |_: f64| 2.0;
        for kind in [FunctionalKind::ThreeYearLegacy, FunctionalKind::CurrentChange] {
            assert_eq!(g_functional(kind, &c, 4.0).unwrap(), 0.0);
        }
        let lin = |t: f64| 1.0 + t;
        assert!((g_functional(FunctionalKind::ThreeYearLegacy, &lin, 0.0).unwrap() - 4.5).abs() < 1e-14);
        assert!((g_functional(FunctionalKind::CurrentChange, &lin, 2.0).unwrap() - 2.0).abs() < 1e-14);
        assert!(g_functional(FunctionalKind::CurrentChange, &lin, -1.0).is_err());
    }

    #[test]
    fn legacy_g_is_exact_for_spline_trajectories() {
        let b = crate::basis::make_population_basis();
        let s = b.combine(&[0.3, -1.0, 2.0, 0.5]);
        let exact = s.integral(0.0, 3.0) - 3.0 * s.value(0.0);
        assert!((legacy_g(&s) - exact).abs() < 1e-13);
    }

    #[test]
    fn hazard_examples() {
        let sp = SurvivalParams::constant(0.1, 0, FunctionalKind::ThreeYearLegacy);
        let p = flat();
        assert!((hazard(&sp, 1, 2, &[], &p, 0.0, 3.0).unwrap() - 0.1).abs() < 1e-15);
        let mut sp2 = sp.clone();
        sp2.xi = 1.0;
        assert!((hazard(&sp2, 0, 0, &[], &p, 2f64.ln(), 3.0).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn legacy_hazard_is_constant_within_pieces() {
        let mut sp = SurvivalParams::constant(0.1, 0, FunctionalKind::ThreeYearLegacy);
        sp.baseline_treated = PiecewiseHazard::new(DEFAULT_CUT_POINTS.to_vec(), (1..=10).map(|k| 0.01 * k as f64).collect()).unwrap();
        sp.zeta = [0.5, 0.1, -0.2, 0.3];
        let path = |t: f64| 0.2 * t - 0.01 * t * t;
        let h = SubjectHazard::new(&sp, 1, 1, &[], &path, 0.3);
        for (j, &c) in DEFAULT_CUT_POINTS.iter().enumerate() {
            let end = if j + 1 < 10 { DEFAULT_CUT_POINTS[j + 1] } else { c + 5.0 };
            let h0 = h.hazard(c);
            for f in [0.1, 0.5, 0.9] {
                assert_eq!(h.hazard(c + f * (end - c)), h0);
            }
        }
    }

    #[test]
    fn cumulative_hazard_examples() {
        let p = flat();
        let sp = SurvivalParams::constant(0.1, 0, FunctionalKind::ThreeYearLegacy);
        assert!((cumulative_hazard(&sp, 0, 0, &[], &p, 0.0, 15.0).unwrap() - 1.5).abs() < 1e-14);
        let mut sp2 = sp.clone();
        sp2.baseline_control = PiecewiseHazard::new(vec![0.0, 5.0], vec![0.2, 0.05]).unwrap();
        assert!((cumulative_hazard(&sp2, 0, 0, &[], &p, 0.0, 15.0).unwrap() - 1.5).abs() < 1e-14);
    }

    #[test]
    fn current_change_matches_exponential_closed_form() {
        for &(h0, z, c) in &[(0.1, 0.8, 0.5), (0.05, -1.2, 0.7), (0.3, 0.3, -0.4)] {
            let mut sp = SurvivalParams::constant(h0, 0, FunctionalKind::CurrentChange);
            sp.baseline_control = PiecewiseHazard::new(DEFAULT_CUT_POINTS.to_vec(), vec![h0; 10]).unwrap();
            sp.zeta[0] = z;
            let path = move |t: f64| 1.0 + c * t;
            for t in [0.5, 3.3, 9.0, 15.0] {
                let got = cumulative_hazard(&sp, 0, 0, &[], &path, 0.0, t).unwrap();
                let want = h0 * ((z * c * t).exp() - 1.0) / (z * c);
                assert!((got - want).abs() <= 1e-8 * want, "t={t} got={got} want={want}");
            }
        }
    }

    #[test]
    fn rmst_examples() {
        let p = flat();
        let sp = SurvivalParams::constant(0.1, 0, FunctionalKind::ThreeYearLegacy);
        let r = rmst(&sp, 0, 0, &[], &p, 0.0);
        assert!((r - 7.768_698).abs() < 1e-6);
        assert!((r - (1.0 - (-1.5f64).exp()) / 0.1).abs() < 1e-12);
        let mut sp2 = sp.clone();
        sp2.baseline_control = PiecewiseHazard::new(vec![0.0, 5.0], vec![0.2, 1e-300]).unwrap();
        let r2 = rmst(&sp2, 0, 0, &[], &p, 0.0);
        assert!((r2 - 6.839_397).abs() < 1e-6);
        let sp3 = SurvivalParams::constant(1e-12, 0, FunctionalKind::ThreeYearLegacy);
        assert!((rmst(&sp3, 0, 0, &[], &p, 0.0) - 15.0).abs() < 1e-6);
    }

    #[test]
    fn current_change_rmst_matches_constant_path_closed_form() {
        let mut sp = SurvivalParams::constant(0.1, 0, FunctionalKind::CurrentChange);
        sp.zeta[0] = 0.7;
        let p = flat();
        let r = rmst(&sp, 0, 0, &[], &p, 0.0);
        assert!((r - (1.0 - (-1.5f64).exp()) / 0.1).abs() < 1e-12);
        // linear path: compare with an independent fine trapezoid integration
        let path = |t: f64| 0.3 * t;
        let h = SubjectHazard::new(&sp, 0, 0, &[], &path, 0.0);
        let big = |t: f64| 0.1 * ((0.7 * 0.3 * t).exp() - 1.0) / (0.7 * 0.3);
        let n = 200_000;
        let dt = 15.0 / n as f64;
        let trap: f64 = (0..=n)
            .map(|i| {
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * (-big(i as f64 * dt)).exp()
            })
            .sum::<f64>()
            * dt;
        assert!((h.rmst(15.0) - trap).abs() < 1e-8);
    }

    #[test]
    fn loglik_examples() {
        let p = flat();
        let sp = SurvivalParams::constant(0.1, 0, FunctionalKind::ThreeYearLegacy);
        let ev = SurvivalOutcome { exit_time: 3.0, event: true };
        let ce = SurvivalOutcome { exit_time: 3.0, event: false };
        assert!((survival_loglik(&sp, 0, 0, &[], &p, 0.0, &ev).unwrap() - (0.1f64.ln() - 0.3)).abs() < 1e-14);
        assert!((survival_loglik(&sp, 0, 0, &[], &p, 0.0, &ev).unwrap() + 2.602_585).abs() < 1e-6);
        assert!((survival_loglik(&sp, 0, 0, &[], &p, 0.0, &ce).unwrap() + 0.3).abs() < 1e-14);
        let bad = SurvivalOutcome { exit_time: 0.0, event: true };
        assert!(survival_loglik(&sp, 0, 0, &[], &p, 0.0, &bad).is_err());
    }

    #[test]
    fn event_density_normalises() {
        // ∫_0^∞ h e^{−H} for constant hazard, truncated far out
        let h = 0.1;
        let gl = gl16();
        let total: f64 = (0..400)
            .map(|k| gl.integrate(k as f64, k as f64 + 1.0, |t| h * (-h * t).exp()))
            .sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn deterministic_inversion() {
        let p = flat();
        let sp = SurvivalParams::constant(0.1, 0, FunctionalKind::ThreeYearLegacy);
        let h = SubjectHazard::new(&sp, 0, 0, &[], &p, 0.0);
        assert_eq!(h.invert(1.5, EVENT_HORIZON), Some(15.0));
        let spc = SurvivalParams::constant(0.1, 0, FunctionalKind::CurrentChange);
        let mut spc2 = spc.clone();
        spc2.zeta[0] = 0.5;
        let path = |t: f64| 0.2 * t;
        let hc = SubjectHazard::new(&spc2, 0, 0, &[], &path, 0.0);
        let t = hc.invert(1.0, EVENT_HORIZON).unwrap();
        // H(t) = 0.1 (e^{0.1 t} − 1) / 0.1 = e^{0.1 t} − 1 ⇒ t = 10 ln 2
        assert!((t - 10.0 * 2f64.ln()).abs() < 1e-7);
        assert!(h.invert(1e9, EVENT_HORIZON).is_none());
    }

    #[test]
    fn exponential_mean_and_dominance() {
        let p = flat();
        let sp = SurvivalParams::constant(0.1, 0, FunctionalKind::ThreeYearLegacy);
        let mut rng = crate::rng::substream(21, 0, 0);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| simulate_event_time(&sp, 0, 0, &[], &p, 0.0, &mut rng).time)
            .sum::<f64>()
            / n as f64;
        assert!((mean - 10.0).abs() < 0.15, "mean {mean}");

        let mut sp2 = sp.clone();
        sp2.baseline_control.levels[0] = 0.2;
        let h1 = SubjectHazard::new(&sp, 0, 0, &[], &p, 0.0);
        let h2 = SubjectHazard::new(&sp2, 0, 0, &[], &p, 0.0);
        let mut rng = crate::rng::substream(22, 0, 0);
        for _ in 0..10_000 {
            let e: f64 = rng.sample(Exp1);
            let t1 = h1.invert(e, EVENT_HORIZON).unwrap();
            let t2 = h2.invert(e, EVENT_HORIZON).unwrap();
            assert!(t2 <= t1);
            assert!((t2 - 0.5 * t1).abs() < 1e-9 * t1);
        }
    }

    #[test]
    fn mean_loglik_at_simulated_times() {
        let p = flat();
        let sp = SurvivalParams::constant(0.1, 0, FunctionalKind::ThreeYearLegacy);
        let mut rng = crate::rng::substream(23, 0, 0);
        let n = 50_000;
        let vals: Vec<f64> = (0..n)
            .map(|_| {
                let t = simulate_event_time(&sp, 0, 0, &[], &p, 0.0, &mut rng).time;
                survival_loglik(&sp, 0, 0, &[], &p, 0.0, &SurvivalOutcome { exit_time: t, event: true }).unwrap()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        // log h − h T has mean log h − 1 and SD 1
        assert!((mean - (0.1f64.ln() - 1.0)).abs() < 4.0 / (n as f64).sqrt());
    }

    #[test]
    fn km_examples() {
        let ev = |t: f64| SurvivalOutcome { exit_time: t, event: true };
        let ce = |t: f64| SurvivalOutcome { exit_time: t, event: false };
        let r = km_restricted_auc(&[ev(2.0), ev(4.0), ev(20.0)], 15.0).unwrap();
        assert_eq!(r.estimate, 7.0);
        let r = km_restricted_auc(&[ce(2.0), ev(4.0)], 15.0).unwrap();
        assert_eq!(r.estimate, 4.0);
        let r = km_restricted_auc(&[ce(2.0), ce(4.0), ce(30.0)], 15.0).unwrap();
        assert_eq!(r.estimate, 15.0);
        assert_eq!(r.se, 0.0);
        assert!(matches!(km_restricted_auc(&[ce(0.0), ce(0.0)], 15.0), Err(Error::DegenerateRiskSet)));
        assert!(km_restricted_auc(&[], 15.0).is_err());
    }

    #[test]
    fn km_greenwood_matches_hand_computation() {
        // events at 1, 3; censoring at 2; n = 4 (one survives beyond t_max)
        let ev = |t: f64| SurvivalOutcome { exit_time: t, event: true };
        let ce = |t: f64| SurvivalOutcome { exit_time: t, event: false };
        let data = [ev(1.0), ce(2.0), ev(3.0), ce(10.0)];
        let r = km_restricted_auc(&data, 5.0).unwrap();
        // Ŝ = 1 on [0,1), 3/4 on [1,3), 3/8 on [3,5]
        let est = 1.0 + 0.75 * 2.0 + 0.375 * 2.0;
        assert!((r.estimate - est).abs() < 1e-14);
        let a1: f64 = 0.75 * 2.0 + 0.375 * 2.0;
        let a2 = 0.375 * 2.0;
        let var = a1 * a1 / (4.0 * 3.0) + a2 * a2 / (2.0 * 1.0);
        assert!((r.se - var.sqrt()).abs() < 1e-14);
    }

    proptest::proptest! {
        #[test]
        fn km_without_censoring_is_truncated_mean(times in proptest::collection::vec(0.01f64..30.0, 1..40)) {
            let data: Vec<_> = times.iter().map(|&t| SurvivalOutcome { exit_time: t, event: true }).collect();
            let r = km_restricted_auc(&data, 15.0).unwrap();
            let mean = times.iter().map(|t| t.min(15.0)).sum::<f64>() / times.len() as f64;
            proptest::prop_assert!((r.estimate - mean).abs() < 1e-10);
        }

        #[test]
        fn rmst_bounded_and_decreasing_in_levels(
            levels in proptest::collection::vec(0.001f64..0.5, 10),
            bump in 0usize..10,
            z in -1.0f64..1.0,
            kind in proptest::prop_oneof![proptest::strategy::Just(FunctionalKind::ThreeYearLegacy), proptest::strategy::Just(FunctionalKind::CurrentChange)],
        ) {
            let mut sp = SurvivalParams::constant(0.1, 0, kind);
            sp.baseline_control = PiecewiseHazard::new(DEFAULT_CUT_POINTS.to_vec(), levels.clone()).unwrap();
            sp.zeta[0] = z;
            let b = crate::basis::make_population_basis();
            let path = b.combine(&[0.1, -0.3, 0.2, 0.4]);
            let r1 = rmst(&sp, 0, 1, &[], &path, 0.2);
            let mut sp2 = sp.clone();
            sp2.baseline_control.levels[bump] *= 1.5;
            let r2 = rmst(&sp2, 0, 1, &[], &path, 0.2);
            proptest::prop_assert!(r1 <= 15.0 && r1 > 0.0);
            if DEFAULT_CUT_POINTS[bump] < 15.0 {
                proptest::prop_assert!(r2 < r1);
            }
        }

        #[test]
        fn cumulative_hazard_monotone_from_zero(t1 in 0.0f64..20.0, dt in 0.0f64..5.0, z in -1.0f64..1.0) {
            let mut sp = SurvivalParams::constant(0.1, 0, FunctionalKind::CurrentChange);
            sp.zeta[0] = z;
            let path = crate::basis::make_population_basis().combine(&[0.2, 0.5, -0.3, 0.1]);
            let h = SubjectHazard::new(&sp, 0, 0, &[], &path, 0.0);
            proptest::prop_assert_eq!(h.cumulative(0.0), 0.0);
            proptest::prop_assert!(h.cumulative(t1 + dt) >= h.cumulative(t1) - 1e-12);
        }
    }
}
