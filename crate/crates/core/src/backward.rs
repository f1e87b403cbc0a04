//! Terminal-value integrators for the coupled per-regime backward systems.
//!
//! With coefficients deterministic in time within each regime, the martingale
//! parts of all backward equations vanish and each system becomes an
//! `l`-dimensional ODE integrated from `T` down to `0` by classical RK4. The
//! zero martingale integrands are still carried on the solution types.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::DVector;

use crate::chain::RegimeGenerator;
use crate::linalg::solve_spd;
use crate::market::{LqCoefficients, LqData, MvAlmData};
use crate::math;
use crate::table::StagePoint;
use crate::{Error, Result};

/// Default number of RK4 steps.
pub const DEFAULT_STEPS: usize = 2000;

/// Riccati values at or below this are treated as a loss of positivity.
pub const POSITIVITY_FLOOR: f64 = 1e-12;

/// Default Picard tolerance and iteration cap.
pub const PICARD_TOLERANCE: f64 = 1e-10;
pub const PICARD_MAX_ITER: usize = 200;

const MIN_SEGMENT_STEPS: usize = 4;

/// Time nodes on `[0, T]` for backward integration.
///
/// Coefficient breakpoints are always nodes, so no RK4 step straddles a jump
/// of a piecewise-constant table. Each breakpoint segment is split into an
/// even number (at least four) of uniform steps, roughly in proportion to its
/// length.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardGrid {
    nodes: Vec<f64>,
    /// Node index ranges `[start, end]` of the uniform segments.
    segments: Vec<(usize, usize)>,
    /// Segment of each cell.
    cell_segment: Vec<usize>,
}

impl BackwardGrid {
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        Self::with_breakpoints(horizon, steps, &[0.0, horizon])
    }

    /// `steps` is the target total; the actual count is rounded per segment.
    pub fn with_breakpoints(horizon: f64, steps: usize, breakpoints: &[f64]) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Structural(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::Structural("step count must be positive".into()));
        }
        let tol = 1e-12 * horizon.max(1.0);
        let mut cuts: Vec<f64> = breakpoints.iter().copied().filter(|&b| b > tol && b < horizon - tol).collect();
        cuts.push(0.0);
        cuts.push(horizon);
        cuts.sort_by(f64::total_cmp);
        cuts.dedup_by(|a, b| (*a - *b).abs() <= tol);

        let mut nodes = vec![0.0];
        let mut segments = Vec::new();
        let mut cell_segment = Vec::new();
        for (s, w) in cuts.windows(2).enumerate() {
            let (lo, hi) = (w[0], w[1]);
            let share = math::round(steps as f64 * (hi - lo) / horizon) as usize;
            let mut n = share.max(MIN_SEGMENT_STEPS);
            n += n % 2;
            let start = nodes.len() - 1;
            let h = (hi - lo) / n as f64;
            for k in 1..n {
                nodes.push(lo + k as f64 * h);
            }
            nodes.push(hi);
            segments.push((start, nodes.len() - 1));
            cell_segment.extend(core::iter::repeat(s).take(n));
        }
        Ok(Self { nodes, segments, cell_segment })
    }

    /// Grid honouring all coefficient breakpoints of an LQ problem.
    pub fn for_lq(data: &LqData, steps: usize) -> Result<Self> {
        Self::with_breakpoints(data.horizon, steps, &data.breakpoints())
    }

    pub fn for_mv(data: &MvAlmData, steps: usize) -> Result<Self> {
        Self::with_breakpoints(data.horizon, steps, &data.breakpoints())
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    /// Node index ranges of the uniform segments.
    pub fn segments(&self) -> &[(usize, usize)] {
        &self.segments
    }

    pub fn cell(&self, k: usize) -> (f64, f64) {
        (self.nodes[k], self.nodes[k + 1])
    }

    /// Cell containing `t`; nodes belong to the cell on their right except `T`.
    pub fn locate(&self, t: f64) -> usize {
        let last = self.steps() - 1;
        let seg = self.segments.partition_point(|&(s0, _)| self.nodes[s0] <= t).saturating_sub(1);
        let (s0, s1) = self.segments[seg];
        let h = (self.nodes[s1] - self.nodes[s0]) / (s1 - s0) as f64;
        let guess = ((t - self.nodes[s0]) / h).max(0.0);
        let mut k = if guess.is_finite() { (s0 + guess as usize).min(last) } else { last };
        while k > 0 && self.nodes[k] > t {
            k -= 1;
        }
        while k < last && self.nodes[k + 1] <= t {
            k += 1;
        }
        k
    }

    /// Cell used for evaluating coefficients at node `k` (right limit, except at `T`).
    pub fn node_cell(&self, k: usize) -> usize {
        k.min(self.steps() - 1)
    }

    pub fn stage(&self, cell: usize, t: f64) -> Stage {
        let (lo, hi) = self.cell(cell);
        Stage { point: StagePoint::new(t, lo, hi), cell }
    }

    pub fn node_stage(&self, k: usize) -> Stage {
        self.stage(self.node_cell(k), self.nodes[k])
    }

    fn check_horizon(&self, horizon: f64) -> Result<()> {
        if (self.horizon() - horizon).abs() > 1e-12 * horizon.max(1.0) {
            return Err(Error::GridMismatch(format!(
                "grid ends at {}, problem horizon is {horizon}",
                self.horizon()
            )));
        }
        Ok(())
    }

    /// Four interpolation nodes around `cell` that stay inside its segment.
    fn stencil(&self, cell: usize) -> core::ops::Range<usize> {
        let (s0, s1) = self.segments[self.cell_segment[cell]];
        let width = (s1 - s0 + 1).min(4);
        let start = cell.saturating_sub(1).max(s0).min(s1 + 1 - width);
        start..start + width
    }
}

/// An RK4 stage: the time point plus the index of the cell it lies in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage {
    pub point: StagePoint,
    pub cell: usize,
}

impl Stage {
    pub fn t(&self) -> f64 {
        self.point.t
    }
}

/// Per-regime values sampled on a [`BackwardGrid`]; `width` entries per node
/// and regime.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: BackwardGrid,
    regimes: usize,
    width: usize,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn zeros(grid: &BackwardGrid, regimes: usize, width: usize) -> Self {
        Self { grid: grid.clone(), regimes, width, values: vec![0.0; grid.nodes.len() * regimes * width] }
    }

    fn from_scalar(grid: &BackwardGrid, regimes: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.nodes.len() * regimes);
        Self { grid: grid.clone(), regimes, width: 1, values }
    }

    pub fn grid(&self) -> &BackwardGrid {
        &self.grid
    }

    pub fn regimes(&self) -> usize {
        self.regimes
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Scalar value at node `k`, regime `i`.
    #[inline]
    pub fn value(&self, k: usize, i: usize) -> f64 {
        self.values[(k * self.regimes + i) * self.width]
    }

    pub fn entry(&self, k: usize, i: usize) -> &[f64] {
        let base = (k * self.regimes + i) * self.width;
        &self.values[base..base + self.width]
    }

    fn entry_mut(&mut self, k: usize, i: usize) -> &mut [f64] {
        let base = (k * self.regimes + i) * self.width;
        &mut self.values[base..base + self.width]
    }

    /// Value at `t = 0`.
    pub fn initial(&self, i: usize) -> f64 {
        self.value(0, i)
    }

    /// Value at `T`.
    pub fn terminal(&self, i: usize) -> f64 {
        self.value(self.grid.nodes.len() - 1, i)
    }

    /// Cubic Lagrange interpolation inside the segment of `stage.cell`.
    pub fn at_stage(&self, stage: Stage, i: usize) -> f64 {
        let t = stage.point.t;
        let idx = self.grid.stencil(stage.cell);
        let nodes = &self.grid.nodes;
        let mut acc = 0.0;
        for a in idx.clone() {
            let mut w = 1.0;
            for b in idx.clone() {
                if a != b {
                    w *= (t - nodes[b]) / (nodes[a] - nodes[b]);
                }
            }
            acc += w * self.value(a, i);
        }
        acc
    }

    /// Interpolated scalar value at an arbitrary `t` in `[0, T]`.
    pub fn at(&self, t: f64, i: usize) -> f64 {
        let cell = self.grid.locate(t);
        self.at_stage(self.grid.stage(cell, t), i)
    }

    /// Maximum absolute node-wise difference.
    pub fn sup_distance(&self, other: &Self) -> f64 {
        self.values.iter().zip(&other.values).fold(0.0, |acc, (a, b)| acc.max((a - b).abs()))
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Integrates `dy/dt = f(t, y)` from `terminal` at `T` down to `0` with
/// classical RK4 on `grid`.
///
/// `rhs(stage, y, dy)` writes the drift; a non-finite state or drift aborts
/// with [`Error::BlowUp`]. Returns one `y` vector (as regimes) per node.
pub fn integrate_backward<F>(grid: &BackwardGrid, terminal: &[f64], mut rhs: F) -> Result<GridFunction>
where
    F: FnMut(Stage, &[f64], &mut [f64]) -> Result<()>,
{
    let dim = terminal.len();
    let nodes = grid.nodes();
    let n = nodes.len();
    let mut out = vec![0.0; n * dim];
    out[(n - 1) * dim..].copy_from_slice(terminal);
    let mut y = terminal.to_vec();
    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];
    let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());

    for cell in (0..n - 1).rev() {
        let (lo, hi) = (nodes[cell], nodes[cell + 1]);
        let h = lo - hi;
        let mid = hi + 0.5 * h;
        let st = |t| Stage { point: StagePoint::new(t, lo, hi), cell };

        rhs(st(hi), &y, &mut k1)?;
        if !finite(&k1) {
            return Err(Error::BlowUp { t: hi });
        }
        for j in 0..dim {
            tmp[j] = y[j] + 0.5 * h * k1[j];
        }
        rhs(st(mid), &tmp, &mut k2)?;
        for j in 0..dim {
            tmp[j] = y[j] + 0.5 * h * k2[j];
        }
        rhs(st(mid), &tmp, &mut k3)?;
        for j in 0..dim {
            tmp[j] = y[j] + h * k3[j];
        }
        rhs(st(lo), &tmp, &mut k4)?;
        for j in 0..dim {
            y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        if !finite(&y) || !finite(&k2) || !finite(&k3) || !finite(&k4) {
            return Err(Error::BlowUp { t: lo });
        }
        out[cell * dim..(cell + 1) * dim].copy_from_slice(&y);
    }
    Ok(GridFunction::from_scalar(grid, dim, out))
}

/// `q_ii * own + sum_{j != i} q_ij * other(j)`.
///
/// Shared by the coupled and the Picard solvers so both evaluate the same
/// floating-point expression.
#[inline]
fn coupling(gen: &RegimeGenerator, i: usize, own: f64, other: impl Fn(usize) -> f64) -> f64 {
    let mut acc = gen.rate(i, i) * own;
    for j in 0..gen.regimes() {
        if j != i {
            acc += gen.rate(i, j) * other(j);
        }
    }
    acc
}

fn check_regimes(expected: usize, gen: &RegimeGenerator) -> Result<()> {
    if gen.regimes() != expected {
        return Err(Error::Structural(format!(
            "generator has {} regimes, data has {expected}",
            gen.regimes()
        )));
    }
    Ok(())
}

fn gain_error(stage: Stage, regime: usize, reason: alloc::string::String) -> Error {
    Error::GainSingularity { t: stage.t(), regime, reason }
}

/// Feedback gain `Gamma = (R + P D'D)^{-1} (P B + P D'C)` at one stage.
fn feedback_gain(c: &LqCoefficients, p: f64, stage: Stage, regime: usize) -> Result<DVector<f64>> {
    let v = (&c.b + c.d.tr_mul(&c.c)) * p;
    solve_spd(&c.gain_matrix(p), &v).map_err(|r| gain_error(stage, regime, r))
}

/// Solution of the Riccati system. `lambda` is the (identically zero)
/// martingale integrand; `gamma` is the feedback gain at each node.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub p: GridFunction,
    pub lambda: GridFunction,
    pub gamma: GridFunction,
}

impl RiccatiSolution {
    pub fn grid(&self) -> &BackwardGrid {
        self.p.grid()
    }

    /// Smallest `P` over all nodes and regimes.
    pub fn min_p(&self) -> f64 {
        self.p.min_value()
    }
}

/// Integrates the Riccati system
/// `dP_i/dt = -[(2A + C'C) P_i + Q + H(P_i) + sum_j q_ij P_j]`,
/// `H(P) = -P^2 (B + D'C)' (R + P D'D)^{-1} (B + D'C)`, `P(T, i) = G(i)`.
pub fn solve_riccati(data: &LqData, gen: &RegimeGenerator, grid: &BackwardGrid) -> Result<RiccatiSolution> {
    data.check_structure()?;
    check_regimes(data.regimes, gen)?;
    grid.check_horizon(data.horizon)?;
    let l = data.regimes;
    let p = integrate_backward(grid, &data.terminal_weight, |stage, y, dy| {
        for i in 0..l {
            let pi = y[i];
            if !(pi > POSITIVITY_FLOOR) {
                return Err(Error::Positivity { t: stage.t(), regime: i, value: pi });
            }
            let c = data.coefficients(stage.point, i);
            let v = &c.b + c.d.tr_mul(&c.c);
            let x = solve_spd(&c.gain_matrix(pi), &v).map_err(|r| gain_error(stage, i, r))?;
            let hamiltonian = -pi * pi * v.dot(&x);
            let cc = c.c.dot(&c.c);
            dy[i] = -((2.0 * c.a + cc) * pi + c.q_weight + hamiltonian + coupling(gen, i, pi, |j| y[j]));
        }
        Ok(())
    })?;
    for k in 0..grid.nodes().len() {
        for i in 0..l {
            let v = p.value(k, i);
            if !(v > POSITIVITY_FLOOR) {
                return Err(Error::Positivity { t: grid.nodes()[k], regime: i, value: v });
            }
        }
    }
    let mut gamma = GridFunction::zeros(grid, l, data.controls);
    for k in 0..grid.nodes().len() {
        let stage = grid.node_stage(k);
        for i in 0..l {
            let c = data.coefficients(stage.point, i);
            let g = feedback_gain(&c, p.value(k, i), stage, i)?;
            gamma.entry_mut(k, i).copy_from_slice(g.as_slice());
        }
    }
    Ok(RiccatiSolution { lambda: GridFunction::zeros(grid, l, data.noise), p, gamma })
}

/// Which linear backward system a [`LinearSolution`] solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearRole {
    /// `K`, terminal `G g`.
    K,
    /// `h = K / P`, terminal `g`.
    H,
    /// `h_1`, terminal 0.
    H1,
    /// `h_2`, terminal 1.
    H2,
    /// Feasibility system `psi`, terminal 1.
    Psi,
}

/// Solution of a linear backward system; `martingale` (`L`, `eta`, `xi`) is
/// identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSolution {
    pub role: LinearRole,
    pub values: GridFunction,
    pub martingale: GridFunction,
}

impl LinearSolution {
    fn new(role: LinearRole, values: GridFunction, noise: usize) -> Self {
        let martingale = GridFunction::zeros(values.grid(), values.regimes(), noise);
        Self { role, values, martingale }
    }

    pub fn grid(&self) -> &BackwardGrid {
        self.values.grid()
    }

    pub fn value(&self, k: usize, i: usize) -> f64 {
        self.values.value(k, i)
    }

    pub fn initial(&self, i: usize) -> f64 {
        self.values.initial(i)
    }

    pub fn at(&self, t: f64, i: usize) -> f64 {
        self.values.at(t, i)
    }
}

fn check_same_grid(a: &BackwardGrid, b: &BackwardGrid) -> Result<()> {
    if a != b {
        return Err(Error::GridMismatch("solutions live on different grids".to_string()));
    }
    Ok(())
}

/// `(A - B'Gamma, (P D'rho - R p)'Gamma + q Q - P (C'rho + b))`: the linear
/// coefficient and the source of the `K` equation at one stage.
fn k_terms(c: &LqCoefficients, p: f64, stage: Stage, regime: usize) -> Result<(f64, f64)> {
    let gamma = feedback_gain(c, p, stage, regime)?;
    let linear = c.a - c.b.dot(&gamma);
    let w = c.d.tr_mul(&c.rho) * p - &c.r * &c.p;
    let source = w.dot(&gamma) + c.q_target * c.q_weight - p * (c.c.dot(&c.rho) + c.drift);
    Ok((linear, source))
}

/// Integrates the coupled linear system
/// `dK_i/dt = -[(A - B'Gamma_i) K_i + (P D'rho - R p)'Gamma_i + q Q - P (C'rho + b) + sum_j q_ij K_j]`,
/// `K(T, i) = G(i) g(i)`.
pub fn solve_linear_k(data: &LqData, gen: &RegimeGenerator, ric: &RiccatiSolution) -> Result<LinearSolution> {
    check_regimes(data.regimes, gen)?;
    let grid = ric.grid();
    grid.check_horizon(data.horizon)?;
    let l = data.regimes;
    let terminal: Vec<f64> = (0..l).map(|i| data.terminal_weight[i] * data.terminal_target[i]).collect();
    let k = integrate_backward(grid, &terminal, |stage, y, dy| {
        for i in 0..l {
            let c = data.coefficients(stage.point, i);
            let (linear, source) = k_terms(&c, ric.p.at_stage(stage, i), stage, i)?;
            dy[i] = -(linear * y[i] + source + coupling(gen, i, y[i], |j| y[j]));
        }
        Ok(())
    })?;
    Ok(LinearSolution::new(LinearRole::K, k, data.noise))
}

/// Result of the Picard iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct PicardOutcome {
    pub solution: LinearSolution,
    pub iterations: usize,
    pub residual: f64,
}

/// Solves the `K` system as the fixed point of the map that freezes the
/// cross-regime coupling `sum_{j != i} q_ij U_j` at the previous iterate and
/// solves each regime's scalar equation separately. Starts from `U = 0` and
/// stops once successive iterates differ by at most `tol` in sup norm.
pub fn solve_by_contraction(
    data: &LqData,
    gen: &RegimeGenerator,
    ric: &RiccatiSolution,
    tol: f64,
    max_iter: usize,
) -> Result<PicardOutcome> {
    check_regimes(data.regimes, gen)?;
    let grid = ric.grid();
    grid.check_horizon(data.horizon)?;
    let l = data.regimes;
    let n = grid.nodes().len();
    let mut current = GridFunction::zeros(grid, l, 1);
    let mut residual = f64::INFINITY;

    for iteration in 1..=max_iter {
        let solve_regime = |i: usize| -> Result<Vec<f64>> {
            let terminal = [data.terminal_weight[i] * data.terminal_target[i]];
            let prev = &current;
            let sol = integrate_backward(grid, &terminal, |stage, y, dy| {
                let c = data.coefficients(stage.point, i);
                let (linear, source) = k_terms(&c, ric.p.at_stage(stage, i), stage, i)?;
                dy[0] = -(linear * y[0] + source + coupling(gen, i, y[0], |j| prev.at_stage(stage, j)));
                Ok(())
            })?;
            Ok((0..n).map(|k| sol.value(k, 0)).collect())
        };
        #[cfg(feature = "std")]
        let columns: Vec<Vec<f64>> = {
            use rayon::prelude::*;
            (0..l).into_par_iter().map(solve_regime).collect::<Result<_>>()?
        };
        #[cfg(not(feature = "std"))]
        let columns: Vec<Vec<f64>> = (0..l).map(solve_regime).collect::<Result<_>>()?;

        let mut next = GridFunction::zeros(grid, l, 1);
        for (i, col) in columns.iter().enumerate() {
            for (k, &v) in col.iter().enumerate() {
                next.entry_mut(k, i)[0] = v;
            }
        }
        residual = next.sup_distance(&current);
        current = next;
        // without cross-regime rates the map is constant after one solve
        if residual <= tol || gen.is_decoupled() {
            return Ok(PicardOutcome {
                solution: LinearSolution::new(LinearRole::K, current, data.noise),
                iterations: iteration,
                residual: if gen.is_decoupled() { 0.0 } else { residual },
            });
        }
    }
    Err(Error::NonConvergence { iterations: max_iter, residual })
}

/// Integrates the `h = K / P` system
/// `dh_i/dt = [A + C'C + Q/P - C'D Gamma] h_i - (D'rho - R p / P)'Gamma - q Q / P
///            + b + rho'C + (1/P_i) sum_j q_ij P_j (h_i - h_j)`, `h(T, i) = g(i)`.
pub fn solve_h(data: &LqData, gen: &RegimeGenerator, ric: &RiccatiSolution) -> Result<LinearSolution> {
    check_regimes(data.regimes, gen)?;
    let grid = ric.grid();
    grid.check_horizon(data.horizon)?;
    let l = data.regimes;
    let h = integrate_backward(grid, &data.terminal_target, |stage, y, dy| {
        let ps: Vec<f64> = (0..l).map(|j| ric.p.at_stage(stage, j)).collect();
        for i in 0..l {
            let c = data.coefficients(stage.point, i);
            let p = ps[i];
            let gamma = feedback_gain(&c, p, stage, i)?;
            let linear = c.a + c.c.dot(&c.c) + c.q_weight / p - c.c.dot(&(&c.d * &gamma));
            let w = c.d.tr_mul(&c.rho) - &c.r * &c.p / p;
            let source = -w.dot(&gamma) - c.q_target * c.q_weight / p + c.drift + c.rho.dot(&c.c);
            let jumps: f64 = (0..l).map(|j| gen.rate(i, j) * ps[j] * (y[i] - y[j])).sum::<f64>() / p;
            dy[i] = linear * y[i] + source + jumps;
        }
        Ok(())
    })?;
    Ok(LinearSolution::new(LinearRole::H, h, data.noise))
}

/// `mu'(sigma sigma')^{-1} sigma rho - b` at one stage.
fn mv_h_source(data: &MvAlmData, stage: Stage, i: usize) -> Result<f64> {
    let c = data.coefficients(stage.point, i);
    let w = solve_spd(&c.covariance(), &c.mu).map_err(|reason| Error::GainSingularity { t: stage.t(), regime: i, reason })?;
    Ok(w.dot(&(&c.sigma * &c.rho)) - c.b)
}

/// `dh_i/dt = r h_i - s * [mu'(sigma sigma')^{-1} sigma rho - b] + (1/P_i) sum_j q_ij P_j (h_i - h_j)`
/// with source weight `s` and terminal value `terminal` in every regime.
fn solve_mv_h(
    data: &MvAlmData,
    gen: &RegimeGenerator,
    ric: &RiccatiSolution,
    terminal: f64,
    source_weight: f64,
    role: LinearRole,
) -> Result<LinearSolution> {
    data.check_structure()?;
    check_regimes(data.regimes, gen)?;
    let grid = ric.grid();
    grid.check_horizon(data.horizon)?;
    let l = data.regimes;
    let h = integrate_backward(grid, &vec![terminal; l], |stage, y, dy| {
        let ps: Vec<f64> = (0..l).map(|j| ric.p.at_stage(stage, j)).collect();
        for i in 0..l {
            let r = data.rate.stage_scalar(stage.point, i);
            let source = if source_weight == 0.0 { 0.0 } else { source_weight * mv_h_source(data, stage, i)? };
            let jumps: f64 = (0..l).map(|j| gen.rate(i, j) * ps[j] * (y[i] - y[j])).sum::<f64>() / ps[i];
            dy[i] = r * y[i] - source + jumps;
        }
        Ok(())
    })?;
    Ok(LinearSolution::new(role, h, data.noise))
}

/// The pair `(h_1, h_2)` splitting the mean-variance `h` system:
/// `h = h_1 + (lambda + z) h_2`. `ric` must solve the mean-variance Riccati
/// system (`P(T) = 1`).
pub fn solve_h_systems(
    data: &MvAlmData,
    gen: &RegimeGenerator,
    ric: &RiccatiSolution,
) -> Result<(LinearSolution, LinearSolution)> {
    let h1 = solve_mv_h(data, gen, ric, 0.0, 1.0, LinearRole::H1)?;
    let h2 = solve_mv_h(data, gen, ric, 1.0, 0.0, LinearRole::H2)?;
    Ok((h1, h2))
}

/// The mean-variance `h` system solved directly with terminal `lambda + z`.
pub fn solve_mv_h_direct(
    data: &MvAlmData,
    gen: &RegimeGenerator,
    ric: &RiccatiSolution,
    lambda: f64,
) -> Result<LinearSolution> {
    solve_mv_h(data, gen, ric, lambda + data.z, 1.0, LinearRole::H)
}

/// Feasibility system `dpsi_i/dt = -(r psi_i + sum_j q_ij psi_j)`, `psi(T, i) = 1`.
pub fn solve_feasibility_psi(data: &MvAlmData, gen: &RegimeGenerator, grid: &BackwardGrid) -> Result<LinearSolution> {
    data.check_structure()?;
    check_regimes(data.regimes, gen)?;
    grid.check_horizon(data.horizon)?;
    let l = data.regimes;
    let psi = integrate_backward(grid, &vec![1.0; l], |stage, y, dy| {
        for i in 0..l {
            let r = data.rate.stage_scalar(stage.point, i);
            dy[i] = -(r * y[i] + coupling(gen, i, y[i], |j| y[j]));
        }
        Ok(())
    })?;
    Ok(LinearSolution::new(LinearRole::Psi, psi, data.noise))
}

/// Composite Simpson integral over `[0, T]` of `f(stage, node)`.
///
/// Each uniform segment is integrated separately; segment end nodes are
/// evaluated inside their own segment so breakpoint jumps are respected.
pub fn simpson<F>(grid: &BackwardGrid, mut f: F) -> Result<f64>
where
    F: FnMut(Stage, usize) -> Result<f64>,
{
    let nodes = grid.nodes();
    let mut total = 0.0;
    for &(s0, s1) in grid.segments() {
        let h = (nodes[s1] - nodes[s0]) / (s1 - s0) as f64;
        let mut acc = 0.0;
        for k in s0..=s1 {
            let cell = if k == s1 { k - 1 } else { k };
            let w = if k == s0 || k == s1 {
                1.0
            } else if (k - s0) % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += w * f(grid.stage(cell, nodes[k]), k)?;
        }
        total += acc * h / 3.0;
    }
    Ok(total)
}

/// Checks that all solutions share one grid.
pub fn same_grid(grids: &[&BackwardGrid]) -> Result<()> {
    for w in grids.windows(2) {
        check_same_grid(w[0], w[1])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
