//! Euler simulation of the controlled surplus under a feedback law, with
//! moment estimates and the frontier and optimality checks built on them.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backward::{LinearRole, LinearSolution};
use crate::chain::{sample_chain_path, ChainPath, RegimeGenerator};
use crate::market::MvAlmData;
use crate::math;
use crate::mv::{FrontierReport, MvFeedback};
use crate::table::{CoefficientTable, Interpolation};
use crate::{Error, Result};

/// Runs with fewer paths than this are reported as inconclusive.
pub const MIN_CONCLUSIVE_PATHS: usize = 1000;

/// Relative Euler allowance on the terminal variance, per `1 / time_steps`.
pub const EULER_VARIANCE_FACTOR: f64 = 5.0;

/// Absolute floor of the variance allowance, times `1 + z^2`.
pub const VARIANCE_ALLOWANCE_FLOOR: f64 = 1e-10;

const CHAIN_DOMAIN: u64 = 0x6368_6169_6e00_0001;
const BROWNIAN_DOMAIN: u64 = 0x6277_6e00_0000_0002;

/// A portfolio rule `(t, X, regime) -> m-vector`.
pub trait FeedbackLaw: Sync {
    fn assets(&self) -> usize;

    /// Writes the portfolio into `out` (length `assets()`).
    fn evaluate(&self, t: f64, x: f64, regime: usize, out: &mut [f64]);
}

impl FeedbackLaw for MvFeedback {
    fn assets(&self) -> usize {
        MvFeedback::assets(self)
    }

    fn evaluate(&self, t: f64, x: f64, regime: usize, out: &mut [f64]) {
        self.write_portfolio(t, x, regime, out);
    }
}

/// The zero portfolio.
#[derive(Debug, Clone, Copy)]
pub struct ZeroLaw {
    pub assets: usize,
}

impl FeedbackLaw for ZeroLaw {
    fn assets(&self) -> usize {
        self.assets
    }

    fn evaluate(&self, _t: f64, _x: f64, _regime: usize, out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// A law given by a closure.
pub struct FnLaw<F> {
    assets: usize,
    f: F,
}

impl<F> FnLaw<F>
where
    F: Fn(f64, f64, usize, &mut [f64]) + Sync,
{
    pub fn new(assets: usize, f: F) -> Self {
        Self { assets, f }
    }
}

impl<F> FeedbackLaw for FnLaw<F>
where
    F: Fn(f64, f64, usize, &mut [f64]) + Sync,
{
    fn assets(&self) -> usize {
        self.assets
    }

    fn evaluate(&self, t: f64, x: f64, regime: usize, out: &mut [f64]) {
        (self.f)(t, x, regime, out)
    }
}

/// `base + eps * direction`.
pub struct Perturbed<'a> {
    pub base: &'a dyn FeedbackLaw,
    pub direction: &'a dyn FeedbackLaw,
    pub eps: f64,
}

impl FeedbackLaw for Perturbed<'_> {
    fn assets(&self) -> usize {
        self.base.assets()
    }

    fn evaluate(&self, t: f64, x: f64, regime: usize, out: &mut [f64]) {
        self.base.evaluate(t, x, regime, out);
        let mut extra = [0.0; 8];
        if out.len() <= extra.len() {
            let d = &mut extra[..out.len()];
            self.direction.evaluate(t, x, regime, d);
            for (o, v) in out.iter_mut().zip(d.iter()) {
                *o += self.eps * v;
            }
        } else {
            let mut d = vec![0.0; out.len()];
            self.direction.evaluate(t, x, regime, &mut d);
            for (o, v) in out.iter_mut().zip(d.iter()) {
                *o += self.eps * v;
            }
        }
    }
}

/// The feasibility witness `beta * psi(t, alpha_t) mu(t, alpha_t)`.
#[derive(Debug, Clone)]
pub struct WitnessLaw {
    psi: LinearSolution,
    excess_return: CoefficientTable,
    assets: usize,
    pub beta: f64,
}

impl WitnessLaw {
    pub fn new(data: &MvAlmData, psi: &LinearSolution, beta: f64) -> Result<Self> {
        if psi.role != LinearRole::Psi {
            return Err(Error::Structural(format!("expected the Psi system, got {:?}", psi.role)));
        }
        Ok(Self { psi: psi.clone(), excess_return: data.excess_return.clone(), assets: data.assets, beta })
    }
}

impl FeedbackLaw for WitnessLaw {
    fn assets(&self) -> usize {
        self.assets
    }

    fn evaluate(&self, t: f64, _x: f64, regime: usize, out: &mut [f64]) {
        self.excess_return.eval_unchecked(t, regime, out);
        let scale = self.beta * self.psi.at(t, regime);
        for v in out.iter_mut() {
            *v *= scale;
        }
    }
}

/// Simulation settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimConfig {
    pub num_paths: usize,
    pub time_steps: usize,
    pub seed: u64,
    pub antithetic: bool,
    /// Overrides the Brownian key derived from `seed`; chain paths keep
    /// following `seed`.
    pub brownian_seed: Option<u64>,
}

impl SimConfig {
    pub fn new(num_paths: usize, time_steps: usize, seed: u64, antithetic: bool) -> Self {
        Self { num_paths, time_steps, seed, antithetic, brownian_seed: None }
    }

    pub fn check(&self) -> Result<()> {
        if self.num_paths < 2 {
            return Err(Error::Structural(format!("need at least 2 paths, got {}", self.num_paths)));
        }
        if self.time_steps == 0 {
            return Err(Error::Structural("need at least one time step".into()));
        }
        Ok(())
    }

    /// Independent sampling units: antithetic pairs or single paths.
    pub fn units(&self) -> usize {
        if self.antithetic {
            self.num_paths.div_ceil(2)
        } else {
            self.num_paths
        }
    }

    fn paths_per_unit(&self) -> usize {
        if self.antithetic {
            2
        } else {
            1
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Counter-based stream: key from `(seed, domain)`, stream number `unit`.
fn stream(seed: u64, domain: u64, unit: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut s = seed ^ domain;
    for chunk in key.chunks_mut(8) {
        s = splitmix(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(unit as u64);
    rng
}

/// The chain path of sampling unit `unit`.
pub fn unit_chain_path(gen: &RegimeGenerator, i0: usize, horizon: f64, cfg: &SimConfig, unit: usize) -> ChainPath {
    let mut rng = stream(cfg.seed, CHAIN_DOMAIN, unit);
    sample_chain_path(gen, i0, horizon, &mut rng)
}

/// A mean estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

fn estimate(units: &[f64]) -> Estimate {
    let n = units.len() as f64;
    let mean = math::pairwise_sum(units) / n;
    let dev: Vec<f64> = units.iter().map(|u| (u - mean) * (u - mean)).collect();
    let var = if units.len() > 1 { math::pairwise_sum(&dev) / (n - 1.0) } else { 0.0 };
    Estimate { value: mean, se: math::sqrt(var / n) }
}

/// Terminal surplus samples and their moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub mean_xt: f64,
    pub var_xt: f64,
    pub se_mean: f64,
    pub se_var: f64,
    pub paths_used: usize,
    pub antithetic: bool,
    /// `X(T)` in path order; antithetic partners are adjacent.
    pub terminal: Vec<f64>,
}

impl SimOutcome {
    fn from_terminal(terminal: Vec<f64>, antithetic: bool) -> Self {
        let k = if antithetic { 2 } else { 1 };
        let n = terminal.len();
        let unit_mean: Vec<f64> = terminal.chunks(k).map(|c| c.iter().sum::<f64>() / k as f64).collect();
        let mean = estimate(&unit_mean);
        let m = mean.value;
        let unit_sq: Vec<f64> =
            terminal.chunks(k).map(|c| c.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / k as f64).collect();
        let sq = estimate(&unit_sq);
        let var_xt = (sq.value * n as f64 / (n as f64 - 1.0)).max(0.0);
        Self { mean_xt: m, var_xt, se_mean: mean.se, se_var: sq.se, paths_used: n, antithetic, terminal }
    }

    /// Per-unit values of `(X(T) - target)^2 - offset`.
    pub fn unit_costs(&self, target: f64, offset: f64) -> Vec<f64> {
        let k = if self.antithetic { 2 } else { 1 };
        self.terminal
            .chunks(k)
            .map(|c| c.iter().map(|x| (x - target) * (x - target)).sum::<f64>() / k as f64 - offset)
            .collect()
    }

    /// Relaxed cost `E(X(T) - (lambda + z))^2 - lambda^2`.
    pub fn cost(&self, lambda: f64, z: f64) -> Estimate {
        estimate(&self.unit_costs(lambda + z, lambda * lambda))
    }
}

/// Scratch buffers of one path, with the market coefficients cached while
/// the regime and the constant piece stay the same.
struct Workspace<'a> {
    data: &'a MvAlmData,
    /// Merged table breakpoints when every table is piecewise constant.
    pieces: Option<Vec<f64>>,
    cached: Option<(usize, usize)>,
    pi: Vec<f64>,
    r: f64,
    b: f64,
    mu: Vec<f64>,
    sigma: Vec<f64>,
    rho: Vec<f64>,
    dw: Vec<f64>,
}

impl<'a> Workspace<'a> {
    fn new(data: &'a MvAlmData, pieces: Option<Vec<f64>>) -> Self {
        let (m, n) = (data.assets, data.noise);
        Self {
            data,
            pieces,
            cached: None,
            pi: vec![0.0; m],
            r: 0.0,
            b: 0.0,
            mu: vec![0.0; m],
            sigma: vec![0.0; m * n],
            rho: vec![0.0; n],
            dw: vec![0.0; n],
        }
    }

    fn load(&mut self, t: f64, regime: usize) {
        if let Some(p) = &self.pieces {
            let piece = p.partition_point(|&s| s <= t);
            if self.cached == Some((regime, piece)) {
                return;
            }
            self.cached = Some((regime, piece));
        }
        let d = self.data;
        let mut scalar = [0.0];
        d.rate.eval_unchecked(t, regime, &mut scalar);
        self.r = scalar[0];
        d.liability_drift.eval_unchecked(t, regime, &mut scalar);
        self.b = scalar[0];
        d.excess_return.eval_unchecked(t, regime, &mut self.mu);
        d.volatility.eval_unchecked(t, regime, &mut self.sigma);
        d.liability_diffusion.eval_unchecked(t, regime, &mut self.rho);
    }
}

fn constant_pieces(data: &MvAlmData) -> Option<Vec<f64>> {
    let tables = [
        &data.rate,
        &data.excess_return,
        &data.volatility,
        &data.liability_drift,
        &data.liability_diffusion,
    ];
    if tables.iter().all(|t| t.interpolation() == Interpolation::PiecewiseConstantLeft) {
        Some(data.breakpoints())
    } else {
        None
    }
}

/// Drift and the noise term `(pi'sigma + rho') dw` of one Euler step.
fn step_terms(law: &dyn FeedbackLaw, t: f64, x: f64, regime: usize, ws: &mut Workspace) -> (f64, f64) {
    let (m, n) = (ws.data.assets, ws.data.noise);
    law.evaluate(t, x, regime, &mut ws.pi);
    ws.load(t, regime);
    let mut drift = ws.r * x + ws.b;
    for a in 0..m {
        drift += ws.pi[a] * ws.mu[a];
    }
    let mut noise = 0.0;
    for j in 0..n {
        let mut load = ws.rho[j];
        for a in 0..m {
            load += ws.pi[a] * ws.sigma[a * n + j];
        }
        noise += load * ws.dw[j];
    }
    (drift, noise)
}

/// Simulates one sampling unit; writes one or two terminal values.
fn simulate_unit(
    data: &MvAlmData,
    law: &dyn FeedbackLaw,
    cfg: &SimConfig,
    gen: &RegimeGenerator,
    unit: usize,
    out: &mut [f64],
) -> Result<()> {
    let horizon = data.horizon;
    let chain = unit_chain_path(gen, data.i0, horizon, cfg, unit);
    let mut rng = stream(cfg.brownian_seed.unwrap_or(cfg.seed), BROWNIAN_DOMAIN, unit);
    let k = out.len();
    let mut ws = Workspace::new(data, constant_pieces(data));
    let mut xs = [data.x0; 2];
    let mut z = vec![0.0; data.noise];
    let dt_grid = horizon / cfg.time_steps as f64;
    let mut jump = 0;
    let mut t = 0.0;
    let mut node = 1;
    while t < horizon {
        let grid_next = if node >= cfg.time_steps { horizon } else { node as f64 * dt_grid };
        let jump_next = chain.jump_times.get(jump).copied().unwrap_or(f64::INFINITY);
        let next = grid_next.min(jump_next);
        let dt = next - t;
        let regime = chain.states[jump];
        if dt > 0.0 {
            let sd = math::sqrt(dt);
            for v in z.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            for (p, x) in xs.iter_mut().enumerate().take(k) {
                let sign = if p == 0 { 1.0 } else { -1.0 };
                for (w, v) in ws.dw.iter_mut().zip(&z) {
                    *w = sign * sd * v;
                }
                let (drift, noise) = step_terms(law, t, *x, regime, &mut ws);
                *x += drift * dt + noise;
                if !x.is_finite() {
                    return Err(Error::SimulationBlowUp { path: unit * cfg.paths_per_unit() + p, t: next });
                }
            }
        }
        if jump_next <= grid_next {
            jump += 1;
        }
        if grid_next <= jump_next {
            node += 1;
        }
        t = next;
    }
    out.copy_from_slice(&xs[..k]);
    Ok(())
}

#[cfg(feature = "std")]
fn run_units(
    data: &MvAlmData,
    law: &dyn FeedbackLaw,
    cfg: &SimConfig,
    gen: &RegimeGenerator,
) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    let k = cfg.paths_per_unit();
    let mut terminal = vec![0.0; cfg.units() * k];
    terminal
        .par_chunks_mut(k)
        .enumerate()
        .try_for_each(|(unit, out)| simulate_unit(data, law, cfg, gen, unit, out))?;
    Ok(terminal)
}

#[cfg(not(feature = "std"))]
fn run_units(
    data: &MvAlmData,
    law: &dyn FeedbackLaw,
    cfg: &SimConfig,
    gen: &RegimeGenerator,
) -> Result<Vec<f64>> {
    let k = cfg.paths_per_unit();
    let mut terminal = vec![0.0; cfg.units() * k];
    for (unit, out) in terminal.chunks_mut(k).enumerate() {
        simulate_unit(data, law, cfg, gen, unit, out)?;
    }
    Ok(terminal)
}

/// Event-aligned Euler simulation of
/// `dX = [r X + pi'mu + b] dt + [pi'sigma + rho'] dW` from `(x0, i0)`.
///
/// Chain jump times are inserted into the uniform grid of `time_steps`
/// steps. Each sampling unit draws its chain path and its Brownian
/// increments from separate counter-based streams, so results do not depend
/// on the number of worker threads.
pub fn simulate_wealth_paths(
    data: &MvAlmData,
    law: &dyn FeedbackLaw,
    cfg: &SimConfig,
    gen: &RegimeGenerator,
) -> Result<SimOutcome> {
    cfg.check()?;
    data.check_structure()?;
    if gen.regimes() != data.regimes {
        return Err(Error::Structural(format!(
            "generator has {} regimes, data has {}",
            gen.regimes(),
            data.regimes
        )));
    }
    if law.assets() != data.assets {
        return Err(Error::Structural(format!("law has {} assets, data has {}", law.assets(), data.assets)));
    }
    let terminal = run_units(data, law, cfg, gen)?;
    Ok(SimOutcome::from_terminal(terminal, cfg.antithetic))
}

/// Outcome of a statistical check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    Inconclusive,
}

impl CheckStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            CheckStatus::Pass => "pass",
            CheckStatus::Fail => "fail",
            CheckStatus::Inconclusive => "inconclusive",
        }
    }
}

/// Simulated moments of the optimal surplus against the analytic frontier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerificationReport {
    pub z: f64,
    pub mean_xt: f64,
    pub se_mean: f64,
    pub var_xt: f64,
    pub analytic_var: f64,
    pub se_var: f64,
    /// Euler allowance added to the variance band.
    pub allowance: f64,
    /// Band minus error; negative when the band is missed.
    pub mean_margin: f64,
    pub var_margin: f64,
    pub paths_used: usize,
    pub status: CheckStatus,
}

impl VerificationReport {
    pub fn pass(&self) -> bool {
        self.status == CheckStatus::Pass
    }
}

/// `5 Var(z) / time_steps`, floored at `1e-10 (1 + z^2)`.
pub fn variance_allowance(analytic_var: f64, z: f64, time_steps: usize) -> f64 {
    (EULER_VARIANCE_FACTOR * analytic_var.max(0.0) / time_steps as f64).max(VARIANCE_ALLOWANCE_FLOOR * (1.0 + z * z))
}

/// Simulates the optimal portfolio `law` and checks
/// `|mean - z| <= 3 se_mean` and `|var - Var(z)| <= 3 se_var + allowance`.
pub fn verify_frontier(
    data: &MvAlmData,
    gen: &RegimeGenerator,
    frontier: &FrontierReport,
    law: &MvFeedback,
    cfg: &SimConfig,
) -> Result<VerificationReport> {
    let z = law.z;
    let sim = simulate_wealth_paths(data, law, cfg, gen)?;
    let analytic_var = frontier.variance(z);
    let allowance = variance_allowance(analytic_var, z, cfg.time_steps);
    let mean_margin = 3.0 * sim.se_mean - (sim.mean_xt - z).abs();
    let var_margin = 3.0 * sim.se_var + allowance - (sim.var_xt - analytic_var).abs();
    let status = if sim.paths_used < MIN_CONCLUSIVE_PATHS {
        CheckStatus::Inconclusive
    } else if mean_margin >= 0.0 && var_margin >= 0.0 {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    };
    Ok(VerificationReport {
        z,
        mean_xt: sim.mean_xt,
        se_mean: sim.se_mean,
        var_xt: sim.var_xt,
        analytic_var,
        se_var: sim.se_var,
        allowance,
        mean_margin,
        var_margin,
        paths_used: sim.paths_used,
        status,
    })
}

/// Cost increase of one perturbation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationEntry {
    /// Mean of `J(pi* + eps v) - J(pi*)` over sampling units.
    pub increase: f64,
    pub paired_se: f64,
    /// `increase >= -3 paired_se`.
    pub nonnegative: bool,
    /// `increase > 3 paired_se`.
    pub strictly_positive: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationReport {
    pub eps: f64,
    pub lambda_star: f64,
    pub optimal_cost: Estimate,
    pub entries: Vec<PerturbationEntry>,
}

impl PerturbationReport {
    pub fn pass(&self) -> bool {
        self.entries.iter().all(|e| e.nonnegative)
    }

    pub fn any_strictly_positive(&self) -> bool {
        self.entries.iter().any(|e| e.strictly_positive)
    }
}

/// Compares the relaxed cost of `optimal + eps * v` with that of `optimal`
/// for each `v`, on common random numbers.
pub fn perturbation_optimality_check(
    data: &MvAlmData,
    gen: &RegimeGenerator,
    optimal: &MvFeedback,
    cfg: &SimConfig,
    perturbations: &[&dyn FeedbackLaw],
    eps: f64,
) -> Result<PerturbationReport> {
    if !(eps > 0.0) {
        return Err(Error::Structural(format!("eps must be positive, got {eps}")));
    }
    let lambda = optimal.lambda_star;
    let z = optimal.z;
    let base = simulate_wealth_paths(data, optimal, cfg, gen)?;
    let base_units = base.unit_costs(lambda + z, lambda * lambda);
    let mut entries = Vec::with_capacity(perturbations.len());
    for v in perturbations {
        let law = Perturbed { base: optimal, direction: *v, eps };
        let sim = simulate_wealth_paths(data, &law, cfg, gen)?;
        let diff: Vec<f64> = sim
            .unit_costs(lambda + z, lambda * lambda)
            .iter()
            .zip(&base_units)
            .map(|(a, b)| a - b)
            .collect();
        let e = estimate(&diff);
        entries.push(PerturbationEntry {
            increase: e.value,
            paired_se: e.se,
            nonnegative: e.value >= -3.0 * e.se,
            strictly_positive: e.value > 3.0 * e.se,
        });
    }
    Ok(PerturbationReport { eps, lambda_star: lambda, optimal_cost: estimate(&base_units), entries })
}
