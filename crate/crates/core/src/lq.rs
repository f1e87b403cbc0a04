//! Optimal feedback law and optimal value of the general LQ problem.

use alloc::format;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::backward::{same_grid, simpson, BackwardGrid, LinearRole, LinearSolution, RiccatiSolution, Stage};
use crate::chain::{occupation_distribution, point_mass, RegimeGenerator};
use crate::linalg::solve_spd;
use crate::market::LqData;
use crate::{Error, Result};

fn gain_error(stage: Stage, regime: usize, reason: alloc::string::String) -> Error {
    Error::GainSingularity { t: stage.t(), regime, reason }
}

/// The optimal feedback `u*(t, X, i)`, affine in `X`.
#[derive(Debug, Clone, Copy)]
pub struct FeedbackLaw<'a> {
    pub data: &'a LqData,
    pub ric: &'a RiccatiSolution,
    pub k: &'a LinearSolution,
}

impl<'a> FeedbackLaw<'a> {
    pub fn new(data: &'a LqData, ric: &'a RiccatiSolution, k: &'a LinearSolution) -> Result<Self> {
        same_grid(&[ric.grid(), k.grid()])?;
        Ok(Self { data, ric, k })
    }

    /// `(slope, intercept)` with `u* = slope * X + intercept`.
    pub fn affine(&self, t: f64, regime: usize) -> Result<(DVector<f64>, DVector<f64>)> {
        let grid = self.ric.grid();
        if !(t >= 0.0 && t <= grid.horizon()) {
            return Err(Error::TimeRange { t, horizon: grid.horizon() });
        }
        if regime >= self.data.regimes {
            return Err(Error::RegimeIndex { regime, regimes: self.data.regimes });
        }
        let stage = grid.stage(grid.locate(t), t);
        let c = self.data.coefficients(stage.point, regime);
        let p = self.ric.p.at_stage(stage, regime);
        let k = self.k.values.at_stage(stage, regime);
        let s = c.gain_matrix(p);
        let x_coef = (c.d.tr_mul(&c.c) + &c.b) * p;
        let constant = c.d.tr_mul(&c.rho) * p - &c.b * k - &c.r * &c.p;
        let slope = -solve_spd(&s, &x_coef).map_err(|r| gain_error(stage, regime, r))?;
        let intercept = -solve_spd(&s, &constant).map_err(|r| gain_error(stage, regime, r))?;
        Ok((slope, intercept))
    }

    pub fn control(&self, t: f64, x: f64, regime: usize) -> Result<DVector<f64>> {
        let (slope, intercept) = self.affine(t, regime)?;
        Ok(slope * x + intercept)
    }
}

/// `u* = -(R + P D'D)^{-1} [(P D'C + P B) X + P D'rho - K B - R p]`.
pub fn feedback_control(
    t: f64,
    x: f64,
    regime: usize,
    ric: &RiccatiSolution,
    k: &LinearSolution,
    data: &LqData,
) -> Result<DVector<f64>> {
    FeedbackLaw::new(data, ric, k)?.control(t, x, regime)
}

/// Optimal value with its breakdown; `value` is the sum of the four terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqValueReport {
    pub value: f64,
    pub quadratic: f64,
    pub linear: f64,
    pub terminal: f64,
    pub running: f64,
}

impl LqValueReport {
    fn from_terms(quadratic: f64, linear: f64, terminal: f64, running: f64) -> Self {
        Self { value: quadratic + linear + terminal + running, quadratic, linear, terminal, running }
    }
}

fn check_inputs(data: &LqData, gen: &RegimeGenerator, x: f64, i0: usize) -> Result<()> {
    data.check_structure()?;
    if gen.regimes() != data.regimes {
        return Err(Error::Structural(format!(
            "generator has {} regimes, data has {}",
            gen.regimes(),
            data.regimes
        )));
    }
    if i0 >= data.regimes {
        return Err(Error::RegimeIndex { regime: i0, regimes: data.regimes });
    }
    if !x.is_finite() {
        return Err(Error::Structural("initial state must be finite".into()));
    }
    Ok(())
}

/// Law of the chain at every grid node, started at `i0`.
pub fn occupation_on_grid(gen: &RegimeGenerator, i0: usize, grid: &BackwardGrid) -> Result<Vec<Vec<f64>>> {
    occupation_distribution(gen, &point_mass(gen.regimes(), i0), grid.nodes())
}

/// Optimal value
/// `V = P(0,i0) x^2 - 2 K(0,i0) x + E[G g^2]
///      + E int [P rho'rho - 2 K b + Q q^2 + p'R p - w'(R + P D'D)^{-1} w] dt`,
/// `w = D'(P rho) - K B - R p`, with chain expectations taken under the
/// occupation law and the time integral by composite Simpson.
pub fn lq_optimal_value(
    x: f64,
    i0: usize,
    ric: &RiccatiSolution,
    k: &LinearSolution,
    data: &LqData,
    gen: &RegimeGenerator,
) -> Result<LqValueReport> {
    check_inputs(data, gen, x, i0)?;
    if k.role != LinearRole::K {
        return Err(Error::Structural(format!("expected the K system, got {:?}", k.role)));
    }
    let grid = ric.grid();
    same_grid(&[grid, k.grid()])?;
    let law = occupation_on_grid(gen, i0, grid)?;
    let p0 = ric.p.initial(i0);
    let k0 = k.initial(i0);
    let last = law.len() - 1;
    let terminal: f64 = (0..data.regimes)
        .map(|i| law[last][i] * data.terminal_weight[i] * data.terminal_target[i] * data.terminal_target[i])
        .sum();
    let running = simpson(grid, |stage, node| {
        let mut acc = 0.0;
        for i in 0..data.regimes {
            let c = data.coefficients(stage.point, i);
            let p = ric.p.value(node, i);
            let kv = k.value(node, i);
            let w = c.d.tr_mul(&c.rho) * p - &c.b * kv - &c.r * &c.p;
            let sw = solve_spd(&c.gain_matrix(p), &w).map_err(|r| gain_error(stage, i, r))?;
            let integrand = p * c.rho.dot(&c.rho) - 2.0 * kv * c.drift
                + c.q_weight * c.q_target * c.q_target
                + c.p.dot(&(&c.r * &c.p))
                - w.dot(&sw);
            acc += law[node][i] * integrand;
        }
        Ok(acc)
    })?;
    Ok(LqValueReport::from_terms(p0 * x * x, -2.0 * k0 * x, terminal, running))
}

/// Optimal value through `h = K / P`:
/// `V = P(0,i0) (x - h(0,i0))^2 + E int [Q (h - q)^2
///      + P (rho + hC)'(I - P D S^{-1} D')(rho + hC) + p'(R - R S^{-1} R) p
///      + 2 P (rho + hC)' D S^{-1} R p + sum_j q_ij P_j (h_i - h_j)^2] dt`,
/// `S = R + P D'D`.
pub fn lq_value_h_form(
    x: f64,
    i0: usize,
    ric: &RiccatiSolution,
    h: &LinearSolution,
    data: &LqData,
    gen: &RegimeGenerator,
) -> Result<LqValueReport> {
    check_inputs(data, gen, x, i0)?;
    if h.role != LinearRole::H {
        return Err(Error::Structural(format!("expected the h system, got {:?}", h.role)));
    }
    let grid = ric.grid();
    same_grid(&[grid, h.grid()])?;
    let law = occupation_on_grid(gen, i0, grid)?;
    let l = data.regimes;
    let n = data.noise;
    let gap = x - h.initial(i0);
    let running = simpson(grid, |stage, node| {
        let mut acc = 0.0;
        for i in 0..l {
            let c = data.coefficients(stage.point, i);
            let p = ric.p.value(node, i);
            let hv = h.value(node, i);
            let s = c.gain_matrix(p);
            let v = &c.rho + &c.c * hv;
            // S^{-1} D' v and S^{-1} R p
            let dv = c.d.tr_mul(&v);
            let s_dv = solve_spd(&s, &dv).map_err(|r| gain_error(stage, i, r))?;
            let rp = &c.r * &c.p;
            let s_rp = solve_spd(&s, &rp).map_err(|r| gain_error(stage, i, r))?;
            let projected = v.dot(&v) - p * dv.dot(&s_dv);
            let control_part = c.p.dot(&rp) - rp.dot(&s_rp);
            let cross = 2.0 * p * dv.dot(&s_rp);
            let jumps: f64 = (0..l)
                .map(|j| {
                    let d = hv - h.value(node, j);
                    gen.rate(i, j) * ric.p.value(node, j) * d * d
                })
                .sum();
            let dq = hv - c.q_target;
            let integrand = c.q_weight * dq * dq + p * projected + control_part + cross + jumps;
            debug_assert!(n == c.rho.len());
            acc += law[node][i] * integrand;
        }
        Ok(acc)
    })?;
    Ok(LqValueReport::from_terms(ric.p.initial(i0) * gap * gap, 0.0, 0.0, running))
}

/// `(I - P D S^{-1} D')` as a matrix, for diagnostics and tests.
pub fn projection_complement(data: &LqData, ric: &RiccatiSolution, node: usize, regime: usize) -> Result<DMatrix<f64>> {
    let grid = ric.grid();
    let stage = grid.node_stage(node);
    let c = data.coefficients(stage.point, regime);
    let p = ric.p.value(node, regime);
    let s = c.gain_matrix(p);
    let mut out = DMatrix::identity(data.noise, data.noise);
    for col in 0..data.noise {
        let e = c.d.row(col).transpose();
        let x = solve_spd(&s, &e).map_err(|r| gain_error(stage, regime, r))?;
        let colv = &c.d * x * p;
        for row in 0..data.noise {
            out[(row, col)] -= colv[row];
        }
    }
    Ok(out)
}
