//! Mean-variance asset-liability layer: feasibility, the frontier constants,
//! the optimal multiplier, the efficient frontier and the optimal portfolio.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::DVector;

use crate::backward::{
    same_grid, simpson, solve_feasibility_psi, solve_h_systems, solve_linear_k, solve_riccati, BackwardGrid,
    LinearRole, LinearSolution, RiccatiSolution, Stage,
};
use crate::chain::RegimeGenerator;
use crate::linalg::solve_spd;
use crate::lq::occupation_on_grid;
use crate::market::{mv_to_lq, MvAlmData, MvCoefficients};
use crate::math;
use crate::{Error, Result};

/// Metrics at or below this count as zero.
pub const FEASIBILITY_TOLERANCE: f64 = 1e-12;

/// Number of points of the automatic frontier grid.
pub const AUTO_GRID_POINTS: usize = 21;

fn singular(stage: Stage, regime: usize, reason: alloc::string::String) -> Error {
    Error::GainSingularity { t: stage.t(), regime, reason }
}

fn check_regimes(data: &MvAlmData, gen: &RegimeGenerator) -> Result<()> {
    if gen.regimes() != data.regimes {
        return Err(Error::Structural(format!(
            "generator has {} regimes, data has {}",
            gen.regimes(),
            data.regimes
        )));
    }
    Ok(())
}

fn check_role(s: &LinearSolution, role: LinearRole) -> Result<()> {
    if s.role != role {
        return Err(Error::Structural(format!("expected the {role:?} system, got {:?}", s.role)));
    }
    Ok(())
}

/// Feasibility of the expectation constraint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeasibilityReport {
    /// `int_0^T sum_i p_i psi^2 |mu|^2 dt`.
    pub metric: f64,
    pub feasible: bool,
    /// Expected terminal surplus with no risky investment.
    pub ex0t: f64,
}

impl FeasibilityReport {
    /// Scale `beta` of the portfolio `beta * psi(t, alpha_t) mu(t, alpha_t)`
    /// whose expected terminal surplus is `z`.
    pub fn witness_beta(&self, z: f64) -> Result<f64> {
        let gap = z - self.ex0t;
        if !self.feasible {
            if gap.abs() <= FEASIBILITY_TOLERANCE * (1.0 + z.abs()) {
                return Ok(0.0);
            }
            return Err(Error::Infeasible { metric: self.metric });
        }
        Ok(gap / self.metric)
    }
}

/// Feasibility metric and the expected surplus of the zero portfolio.
///
/// `E[X^0(T)] = sum_i m_i(T)` with `m_i' = r_i m_i + b_i p_i + sum_j q_ji m_j`,
/// `m_i(0) = x0 1{i = i0}`, integrated jointly with the occupation law.
pub fn feasibility_metric(data: &MvAlmData, gen: &RegimeGenerator, psi: &LinearSolution) -> Result<FeasibilityReport> {
    data.check_structure()?;
    check_regimes(data, gen)?;
    check_role(psi, LinearRole::Psi)?;
    let grid = psi.grid();
    let law = occupation_on_grid(gen, data.i0, grid)?;
    let metric = simpson(grid, |stage, node| {
        let mut acc = 0.0;
        for i in 0..data.regimes {
            let mu = data.excess_return.stage_vector(stage.point, i);
            let v = psi.value(node, i);
            acc += law[node][i] * v * v * mu.norm_squared();
        }
        Ok(acc)
    })?;
    let ex0t = expected_uncontrolled_surplus(data, gen, grid)?;
    Ok(FeasibilityReport { metric, feasible: metric > FEASIBILITY_TOLERANCE, ex0t })
}

fn expected_uncontrolled_surplus(data: &MvAlmData, gen: &RegimeGenerator, grid: &BackwardGrid) -> Result<f64> {
    let l = data.regimes;
    let h_max = 0.01_f64.min(0.01 / gen.max_exit_rate().max(1e-300));
    // y = (p, m)
    let mut y = vec![0.0; 2 * l];
    y[data.i0] = 1.0;
    y[l + data.i0] = data.x0;
    let rhs = |stage: Stage, y: &[f64], dy: &mut [f64]| {
        for i in 0..l {
            let mut dp = 0.0;
            let mut dm = 0.0;
            for j in 0..l {
                dp += gen.rate(j, i) * y[j];
                dm += gen.rate(j, i) * y[l + j];
            }
            let r = data.rate.stage_scalar(stage.point, i);
            let b = data.liability_drift.stage_scalar(stage.point, i);
            dy[i] = dp;
            dy[l + i] = r * y[l + i] + b * y[i] + dm;
        }
    };
    let n = 2 * l;
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for cell in 0..grid.steps() {
        let (lo, hi) = grid.cell(cell);
        let sub = libm::ceil((hi - lo) / h_max).max(1.0) as usize;
        let h = (hi - lo) / sub as f64;
        for s in 0..sub {
            let t = lo + s as f64 * h;
            rhs(grid.stage(cell, t), &y, &mut k1);
            for q in 0..n {
                tmp[q] = y[q] + 0.5 * h * k1[q];
            }
            rhs(grid.stage(cell, t + 0.5 * h), &tmp, &mut k2);
            for q in 0..n {
                tmp[q] = y[q] + 0.5 * h * k2[q];
            }
            rhs(grid.stage(cell, t + 0.5 * h), &tmp, &mut k3);
            for q in 0..n {
                tmp[q] = y[q] + h * k3[q];
            }
            rhs(grid.stage(cell, t + h), &tmp, &mut k4);
            for q in 0..n {
                y[q] += h / 6.0 * (k1[q] + 2.0 * k2[q] + 2.0 * k3[q] + k4[q]);
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { t: hi });
        }
    }
    Ok(y[l..].iter().sum())
}

/// The frontier constants `M_1`, `M_2`, `M_3`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MConstants {
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
}

/// `rho'(I - sigma'(sigma sigma')^{-1} sigma) rho`.
fn rho_projection(c: &MvCoefficients, stage: Stage, regime: usize) -> Result<f64> {
    if c.rho.iter().all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    let sr = &c.sigma * &c.rho;
    let w = solve_spd(&c.covariance(), &sr).map_err(|r| singular(stage, regime, r))?;
    Ok(c.rho.norm_squared() - sr.dot(&w))
}

/// `M_1 = E int sum_j q_ij P_j (h2_i - h2_j)^2`,
/// `M_2 = E int sum_j q_ij P_j (h1_i - h1_j)(h2_i - h2_j)`,
/// `M_3 = E int [sum_j q_ij P_j (h1_i - h1_j)^2 + P_i rho'(I - sigma'(sigma sigma')^{-1} sigma) rho]`,
/// expectations under the occupation law from `i0`.
pub fn compute_m_constants(
    data: &MvAlmData,
    gen: &RegimeGenerator,
    ric: &RiccatiSolution,
    h1: &LinearSolution,
    h2: &LinearSolution,
) -> Result<MConstants> {
    data.check_structure()?;
    check_regimes(data, gen)?;
    check_role(h1, LinearRole::H1)?;
    check_role(h2, LinearRole::H2)?;
    let grid = ric.grid();
    same_grid(&[grid, h1.grid(), h2.grid()])?;
    let law = occupation_on_grid(gen, data.i0, grid)?;
    let l = data.regimes;
    let integrand = |which: usize| {
        simpson(grid, |stage, node| {
            let mut acc = 0.0;
            for i in 0..l {
                let mut jumps = 0.0;
                for j in 0..l {
                    if j == i {
                        continue;
                    }
                    let d1 = h1.value(node, i) - h1.value(node, j);
                    let d2 = h2.value(node, i) - h2.value(node, j);
                    let prod = match which {
                        1 => d2 * d2,
                        2 => d1 * d2,
                        _ => d1 * d1,
                    };
                    jumps += gen.rate(i, j) * ric.p.value(node, j) * prod;
                }
                if which == 3 {
                    let c = data.coefficients(stage.point, i);
                    jumps += ric.p.value(node, i) * rho_projection(&c, stage, i)?;
                }
                acc += law[node][i] * jumps;
            }
            Ok(acc)
        })
    };
    Ok(MConstants { m1: integrand(1)?, m2: integrand(2)?, m3: integrand(3)? })
}

/// Optimal multiplier
/// `lambda* = (M_2 + a z - P_0 h2_0 (x - h1_0)) / (1 - a)`, `a = P_0 h2_0^2 + M_1`.
pub fn lambda_star(p0: f64, h10: f64, h20: f64, m: &MConstants, x: f64, z: f64) -> Result<f64> {
    let a = p0 * h20 * h20 + m.m1;
    if !(a > 0.0 && a < 1.0) {
        return Err(Error::FrontierDomain { value: a });
    }
    Ok((m.m2 + a * z - p0 * h20 * (x - h10)) / (1.0 - a))
}

/// One point of the frontier curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontierPoint {
    pub z: f64,
    pub variance: f64,
    pub stddev: f64,
    pub lambda_star: f64,
}

/// The efficient frontier `Var(z) = slope (z - vertex_z)^2 + base_var`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontierReport {
    pub p0: f64,
    pub h10: f64,
    pub h20: f64,
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    /// Initial surplus.
    pub x: f64,
    /// Target the report was built for.
    pub z: f64,
    pub lambda_star: f64,
    pub slope: f64,
    pub vertex_z: f64,
    pub base_var: f64,
    pub feasibility_metric: f64,
}

impl FrontierReport {
    /// `P_0 h2_0^2 + M_1`, strictly inside `(0, 1)`.
    pub fn domain_value(&self) -> f64 {
        self.p0 * self.h20 * self.h20 + self.m1
    }

    /// Distance of `domain_value` to the nearer end of `(0, 1)`.
    pub fn domain_margin(&self) -> f64 {
        let a = self.domain_value();
        a.min(1.0 - a)
    }

    fn constants(&self) -> MConstants {
        MConstants { m1: self.m1, m2: self.m2, m3: self.m3 }
    }

    pub fn variance(&self, z: f64) -> f64 {
        let d = z - self.vertex_z;
        self.slope * d * d + self.base_var
    }

    pub fn lambda_star_at(&self, z: f64) -> f64 {
        // domain already checked at construction
        lambda_star(self.p0, self.h10, self.h20, &self.constants(), self.x, z).unwrap_or(f64::NAN)
    }

    pub fn point(&self, z: f64) -> FrontierPoint {
        let variance = self.variance(z);
        FrontierPoint { z, variance, stddev: math::sqrt(variance.max(0.0)), lambda_star: self.lambda_star_at(z) }
    }

    /// `vertex_z +- 3 sqrt(base_var + 1) / slope` in equal steps.
    pub fn auto_grid(&self) -> Vec<f64> {
        let half = 3.0 * math::sqrt(self.base_var.max(0.0) + 1.0) / self.slope;
        let n = AUTO_GRID_POINTS - 1;
        (0..=n).map(|k| self.vertex_z - half + 2.0 * half * k as f64 / n as f64).collect()
    }

    pub fn curve(&self, zs: &[f64]) -> Vec<FrontierPoint> {
        zs.iter().map(|&z| self.point(z)).collect()
    }
}

/// Assembles the frontier from solved systems.
pub fn efficient_frontier(
    data: &MvAlmData,
    gen: &RegimeGenerator,
    ric: &RiccatiSolution,
    h1: &LinearSolution,
    h2: &LinearSolution,
    feasibility: &FeasibilityReport,
) -> Result<FrontierReport> {
    if !feasibility.feasible {
        return Err(Error::Infeasible { metric: feasibility.metric });
    }
    let m = compute_m_constants(data, gen, ric, h1, h2)?;
    let i0 = data.i0;
    let (p0, h10, h20, x) = (ric.p.initial(i0), h1.initial(i0), h2.initial(i0), data.x0);
    let lambda = lambda_star(p0, h10, h20, &m, x, data.z)?;
    let a = p0 * h20 * h20 + m.m1;
    let cross = p0 * h20 * (x - h10) - m.m2;
    Ok(FrontierReport {
        p0,
        h10,
        h20,
        m1: m.m1,
        m2: m.m2,
        m3: m.m3,
        x,
        z: data.z,
        lambda_star: lambda,
        slope: a / (1.0 - a),
        vertex_z: cross / a,
        base_var: -cross * cross / a + m.m3 + p0 * (x - h10) * (x - h10),
        feasibility_metric: feasibility.metric,
    })
}

/// Per-cell pieces of the optimal portfolio: the target
/// `h1 + (lambda* + z) h2` sampled at four equispaced points of the cell, and
/// `(sigma sigma')^{-1} mu`, `(sigma sigma')^{-1} sigma rho` at both cell ends.
#[derive(Debug, Clone)]
struct PortfolioTable {
    m: usize,
    regimes: usize,
    stride: usize,
    values: Vec<f64>,
}

impl PortfolioTable {
    fn build(data: &MvAlmData, h1: &LinearSolution, h2: &LinearSolution, scale: f64) -> Result<Self> {
        let grid = h1.grid();
        let (m, l) = (data.assets, data.regimes);
        let stride = 4 + 4 * m;
        let mut values = Vec::with_capacity(grid.steps() * l * stride);
        for cell in 0..grid.steps() {
            let (lo, hi) = grid.cell(cell);
            for i in 0..l {
                for j in 0..4 {
                    let stage = grid.stage(cell, lo + (hi - lo) * j as f64 / 3.0);
                    values.push(h1.values.at_stage(stage, i) + scale * h2.values.at_stage(stage, i));
                }
                for t in [lo, hi] {
                    let stage = grid.stage(cell, t);
                    let c = data.coefficients(stage.point, i);
                    let cov = c.covariance();
                    let a = solve_spd(&cov, &c.mu).map_err(|r| singular(stage, i, r))?;
                    let sr = &c.sigma * &c.rho;
                    let h = solve_spd(&cov, &sr).map_err(|r| singular(stage, i, r))?;
                    values.extend(a.iter());
                    values.extend(h.iter());
                }
            }
        }
        Ok(Self { m, regimes: l, stride, values })
    }

    fn block(&self, cell: usize, regime: usize) -> &[f64] {
        let start = (cell * self.regimes + regime) * self.stride;
        &self.values[start..start + self.stride]
    }
}

/// Cubic through four equispaced samples at `u = 0, 1/3, 2/3, 1`.
#[inline]
fn cubic(samples: &[f64], u: f64) -> f64 {
    let v = 3.0 * u;
    let (a, b, c) = (v - 1.0, v - 2.0, v - 3.0);
    -a * b * c / 6.0 * samples[0] + v * b * c / 2.0 * samples[1] - v * a * c / 2.0 * samples[2]
        + v * a * b / 6.0 * samples[3]
}

/// The optimal mean-variance portfolio
/// `pi*(t, X, i) = -(sigma sigma')^{-1} [mu (X - h1 - (lambda* + z) h2) + sigma rho]`.
#[derive(Debug, Clone)]
pub struct MvFeedback {
    grid: BackwardGrid,
    table: PortfolioTable,
    pub lambda_star: f64,
    pub z: f64,
}

impl MvFeedback {
    pub fn new(
        data: &MvAlmData,
        h1: &LinearSolution,
        h2: &LinearSolution,
        lambda_star: f64,
        z: f64,
    ) -> Result<Self> {
        data.check_structure()?;
        check_role(h1, LinearRole::H1)?;
        check_role(h2, LinearRole::H2)?;
        same_grid(&[h1.grid(), h2.grid()])?;
        if h1.values.regimes() != data.regimes {
            return Err(Error::Structural("solution regime count differs from data".into()));
        }
        let table = PortfolioTable::build(data, h1, h2, lambda_star + z)?;
        Ok(Self { grid: h1.grid().clone(), table, lambda_star, z })
    }

    pub fn assets(&self) -> usize {
        self.table.m
    }

    pub fn horizon(&self) -> f64 {
        self.grid.horizon()
    }

    fn locate(&self, t: f64) -> (usize, f64) {
        let cell = self.grid.locate(t);
        let (lo, hi) = self.grid.cell(cell);
        (cell, ((t - lo) / (hi - lo)).clamp(0.0, 1.0))
    }

    /// Wealth level at which the portfolio is pure hedge: `h1 + (lambda* + z) h2`.
    pub fn target(&self, t: f64, regime: usize) -> f64 {
        let (cell, u) = self.locate(t);
        cubic(&self.table.block(cell, regime)[..4], u)
    }

    /// Writes `pi*(t, x, regime)` into `out` (length m). No range checks.
    pub fn write_portfolio(&self, t: f64, x: f64, regime: usize, out: &mut [f64]) {
        let (cell, u) = self.locate(t);
        let block = self.table.block(cell, regime);
        let gap = x - cubic(&block[..4], u);
        let m = self.table.m;
        let (lo, hi) = block[4..].split_at(2 * m);
        for k in 0..out.len() {
            let a = lo[k] + u * (hi[k] - lo[k]);
            let c = lo[m + k] + u * (hi[m + k] - lo[m + k]);
            out[k] = -(a * gap + c);
        }
    }

    pub fn portfolio(&self, t: f64, x: f64, regime: usize) -> Result<DVector<f64>> {
        let horizon = self.horizon();
        if !(t >= 0.0 && t <= horizon) {
            return Err(Error::TimeRange { t, horizon });
        }
        if regime >= self.table.regimes {
            return Err(Error::RegimeIndex { regime, regimes: self.table.regimes });
        }
        let mut out = DVector::zeros(self.table.m);
        self.write_portfolio(t, x, regime, out.as_mut_slice());
        Ok(out)
    }
}

/// `pi*(t, X, i)` as a free function.
#[allow(clippy::too_many_arguments)]
pub fn mv_feedback(
    t: f64,
    x: f64,
    regime: usize,
    data: &MvAlmData,
    h1: &LinearSolution,
    h2: &LinearSolution,
    lambda_star: f64,
    z: f64,
) -> Result<DVector<f64>> {
    MvFeedback::new(data, h1, h2, lambda_star, z)?.portfolio(t, x, regime)
}

/// Optimal relaxed cost
/// `min J(lambda) = P_0 x^2 - 2 K_0 x + (lambda + z)^2 - lambda^2
///   + E int [P rho'rho - 2 K b - (1/P)(P sigma rho - K mu)'(sigma sigma')^{-1}(P sigma rho - K mu)] dt`,
/// with `k` solving the `K` system of the relaxed problem for this `lambda`.
pub fn relaxed_value(
    data: &MvAlmData,
    gen: &RegimeGenerator,
    ric: &RiccatiSolution,
    k: &LinearSolution,
    lambda: f64,
) -> Result<f64> {
    data.check_structure()?;
    check_regimes(data, gen)?;
    check_role(k, LinearRole::K)?;
    let grid = ric.grid();
    same_grid(&[grid, k.grid()])?;
    let g = lambda + data.z;
    let last = grid.nodes().len() - 1;
    for i in 0..data.regimes {
        if (k.value(last, i) - g).abs() > 1e-12 * (1.0 + g.abs()) {
            return Err(Error::Structural(format!("K was not solved for lambda = {lambda}")));
        }
    }
    let law = occupation_on_grid(gen, data.i0, grid)?;
    let running = simpson(grid, |stage, node| {
        let mut acc = 0.0;
        for i in 0..data.regimes {
            let c = data.coefficients(stage.point, i);
            let p = ric.p.value(node, i);
            let kv = k.value(node, i);
            let w = &c.sigma * &c.rho * p - &c.mu * kv;
            let sw = solve_spd(&c.covariance(), &w).map_err(|r| singular(stage, i, r))?;
            acc += law[node][i] * (p * c.rho.norm_squared() - 2.0 * kv * c.b - w.dot(&sw) / p);
        }
        Ok(acc)
    })?;
    let (p0, k0, x) = (ric.p.initial(data.i0), k.initial(data.i0), data.x0);
    Ok(p0 * x * x - 2.0 * k0 * x + g * g - lambda * lambda + running)
}

/// Solves the relaxed `K` system for `lambda` and returns its optimal cost.
pub fn relaxed_value_at(data: &MvAlmData, gen: &RegimeGenerator, ric: &RiccatiSolution, lambda: f64) -> Result<f64> {
    let lq = mv_to_lq(data, lambda)?;
    let k = solve_linear_k(&lq, gen, ric)?;
    relaxed_value(data, gen, ric, &k, lambda)
}

/// Golden-section maximum of a concave function on `[lo, hi]`: `(argmax, max)`.
pub fn golden_section_max<F>(mut f: F, mut lo: f64, mut hi: f64, tol: f64) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let inv_phi = (math::sqrt(5.0) - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    while hi - lo > tol {
        if fc > fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c)?;
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d)?;
        }
    }
    let mid = 0.5 * (lo + hi);
    Ok((mid, f(mid)?))
}

/// Dual maximum `max_lambda min J(lambda)` searched over
/// `lambda* +- 5 (1 + |lambda*|)`; returns `(argmax, max)`.
pub fn dual_maximum(
    data: &MvAlmData,
    gen: &RegimeGenerator,
    ric: &RiccatiSolution,
    lambda_star: f64,
) -> Result<(f64, f64)> {
    let half = 5.0 * (1.0 + lambda_star.abs());
    golden_section_max(
        |l| relaxed_value_at(data, gen, ric, l),
        lambda_star - half,
        lambda_star + half,
        1e-7 * (1.0 + lambda_star.abs()),
    )
}

/// Every backward solution and derived quantity of one mean-variance problem.
#[derive(Debug, Clone)]
pub struct MvPipeline {
    pub ric: RiccatiSolution,
    pub h1: LinearSolution,
    pub h2: LinearSolution,
    pub psi: LinearSolution,
    pub feasibility: FeasibilityReport,
}

impl MvPipeline {
    /// Validates ellipticity and solves `P`, `h1`, `h2` and `psi` on a grid
    /// of about `steps` RK4 steps.
    pub fn solve(data: &MvAlmData, gen: &RegimeGenerator, steps: usize) -> Result<Self> {
        data.validate()?;
        check_regimes(data, gen)?;
        let grid = BackwardGrid::for_mv(data, steps)?;
        let lq = mv_to_lq(data, 0.0)?;
        let ric = solve_riccati(&lq, gen, &grid)?;
        let (h1, h2) = solve_h_systems(data, gen, &ric)?;
        let psi = solve_feasibility_psi(data, gen, &grid)?;
        let feasibility = feasibility_metric(data, gen, &psi)?;
        Ok(Self { ric, h1, h2, psi, feasibility })
    }

    pub fn grid(&self) -> &BackwardGrid {
        self.ric.grid()
    }

    pub fn frontier(&self, data: &MvAlmData, gen: &RegimeGenerator) -> Result<FrontierReport> {
        efficient_frontier(data, gen, &self.ric, &self.h1, &self.h2, &self.feasibility)
    }

    /// Optimal portfolio for target `z`.
    pub fn feedback(&self, data: &MvAlmData, frontier: &FrontierReport, z: f64) -> Result<MvFeedback> {
        MvFeedback::new(data, &self.h1, &self.h2, frontier.lambda_star_at(z), z)
    }
}
