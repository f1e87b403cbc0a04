//! Problem data: the general LQ model, the mean-variance ALM market, and the
//! checks of their standing assumptions.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::linalg::{is_symmetric, min_eigenvalue, PSD_TOLERANCE};
use crate::table::{CoefficientTable, StagePoint};
use crate::{Error, Result};

/// Coefficients of the scalar-state LQ problem with regime switching.
///
/// State: `dX = [A X + B'u + b] dt + [C'X + u'D' + rho'] dW`.
/// Cost: `E[ int Q (X - q)^2 + (u - p)' R (u - p) dt + G (X(T) - g)^2 ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LqData {
    pub horizon: f64,
    pub regimes: usize,
    /// Control dimension `m`.
    pub controls: usize,
    /// Brownian dimension `n`.
    pub noise: usize,
    /// `A`, scalar.
    pub state_drift: CoefficientTable,
    /// `B`, m-vector.
    pub control_drift: CoefficientTable,
    /// `C`, n-vector.
    pub state_diffusion: CoefficientTable,
    /// `D`, n x m.
    pub control_diffusion: CoefficientTable,
    /// `b`, scalar.
    pub drift_offset: CoefficientTable,
    /// `rho`, n-vector.
    pub diffusion_offset: CoefficientTable,
    /// `Q`, scalar.
    pub state_weight: CoefficientTable,
    /// `q`, scalar.
    pub state_target: CoefficientTable,
    /// `R`, symmetric m x m.
    pub control_weight: CoefficientTable,
    /// `p`, m-vector.
    pub control_target: CoefficientTable,
    /// `G(i)` per regime.
    pub terminal_weight: Vec<f64>,
    /// `g(i)` per regime.
    pub terminal_target: Vec<f64>,
    pub delta: f64,
}

/// LQ coefficients resolved at one time point and regime.
#[derive(Debug, Clone)]
pub(crate) struct LqCoefficients {
    pub a: f64,
    pub b: DVector<f64>,
    pub c: DVector<f64>,
    pub d: DMatrix<f64>,
    pub drift: f64,
    pub rho: DVector<f64>,
    pub q_weight: f64,
    pub q_target: f64,
    pub r: DMatrix<f64>,
    pub p: DVector<f64>,
}

impl LqCoefficients {
    /// `R + P D'D`.
    pub fn gain_matrix(&self, p: f64) -> DMatrix<f64> {
        &self.r + self.d.tr_mul(&self.d) * p
    }
}

fn check_table(
    name: &str,
    t: &CoefficientTable,
    horizon: f64,
    regimes: usize,
    shape: (usize, usize),
) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::Structural(format!(
            "{name}: expected shape {}x{}, got {}x{}",
            shape.0,
            shape.1,
            t.shape().0,
            t.shape().1
        )));
    }
    if t.regimes() != regimes {
        return Err(Error::Structural(format!(
            "{name}: expected {regimes} regimes, got {}",
            t.regimes()
        )));
    }
    if (t.horizon() - horizon).abs() > 1e-12 * horizon.max(1.0) {
        return Err(Error::Structural(format!(
            "{name}: grid ends at {}, horizon is {horizon}",
            t.horizon()
        )));
    }
    Ok(())
}

/// Sorted union of table grids; nodes closer than `1e-12 * T` are merged.
fn merged_breakpoints<'a>(horizon: f64, tables: impl IntoIterator<Item = &'a CoefficientTable>) -> Vec<f64> {
    let mut pts: Vec<f64> = tables.into_iter().flat_map(|t| t.grid().iter().copied()).collect();
    pts.push(0.0);
    pts.push(horizon);
    pts.sort_by(f64::total_cmp);
    let tol = 1e-12 * horizon.max(1.0);
    let mut out: Vec<f64> = Vec::with_capacity(pts.len());
    for p in pts {
        match out.last() {
            Some(&last) if p - last <= tol => {}
            _ => out.push(p),
        }
    }
    let n = out.len();
    out[n - 1] = horizon;
    out
}

impl LqData {
    fn tables(&self) -> [(&'static str, &CoefficientTable, (usize, usize)); 10] {
        let (m, n) = (self.controls, self.noise);
        [
            ("A", &self.state_drift, (1, 1)),
            ("B", &self.control_drift, (m, 1)),
            ("C", &self.state_diffusion, (n, 1)),
            ("D", &self.control_diffusion, (n, m)),
            ("b", &self.drift_offset, (1, 1)),
            ("rho", &self.diffusion_offset, (n, 1)),
            ("Q", &self.state_weight, (1, 1)),
            ("q", &self.state_target, (1, 1)),
            ("R", &self.control_weight, (m, m)),
            ("p", &self.control_target, (m, 1)),
        ]
    }

    /// Shape, horizon and dimension consistency.
    pub fn check_structure(&self) -> Result<()> {
        if !(self.horizon > 0.0) {
            return Err(Error::Structural(format!("horizon must be positive, got {}", self.horizon)));
        }
        if self.regimes == 0 || self.controls == 0 || self.noise == 0 {
            return Err(Error::Structural("regimes, controls and noise must be positive".into()));
        }
        if self.controls > self.noise {
            return Err(Error::Structural(format!(
                "control dimension m = {} exceeds noise dimension n = {}",
                self.controls, self.noise
            )));
        }
        for (name, t, shape) in self.tables() {
            check_table(name, t, self.horizon, self.regimes, shape)?;
        }
        if self.terminal_weight.len() != self.regimes || self.terminal_target.len() != self.regimes {
            return Err(Error::Structural("terminal data must have one entry per regime".into()));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Structural(format!("delta must be positive, got {}", self.delta)));
        }
        Ok(())
    }

    /// Every node of every coefficient table.
    pub fn breakpoints(&self) -> Vec<f64> {
        merged_breakpoints(self.horizon, self.tables().into_iter().map(|(_, t, _)| t))
    }

    pub(crate) fn coefficients(&self, at: StagePoint, regime: usize) -> LqCoefficients {
        LqCoefficients {
            a: self.state_drift.stage_scalar(at, regime),
            b: self.control_drift.stage_vector(at, regime),
            c: self.state_diffusion.stage_vector(at, regime),
            d: self.control_diffusion.stage_matrix(at, regime),
            drift: self.drift_offset.stage_scalar(at, regime),
            rho: self.diffusion_offset.stage_vector(at, regime),
            q_weight: self.state_weight.stage_scalar(at, regime),
            q_target: self.state_target.stage_scalar(at, regime),
            r: self.control_weight.stage_matrix(at, regime),
            p: self.control_target.stage_vector(at, regime),
        }
    }
}

/// Which case of the LQ well-posedness assumption holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssumptionCase {
    /// `Q >= 0`, `R >= delta I`, `G >= delta`.
    Standard,
    /// `Q >= 0`, `R >= 0`, `G >= delta`, `D'D >= delta I`.
    Singular,
    Both,
    Neither,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub case: AssumptionCase,
    pub delta: f64,
    pub min_state_weight: f64,
    pub min_control_weight_eigenvalue: f64,
    pub min_diffusion_gram_eigenvalue: f64,
    pub min_terminal_weight: f64,
    pub nodes_checked: usize,
}

impl ValidationReport {
    pub fn is_fatal(&self) -> bool {
        self.case == AssumptionCase::Neither
    }

    pub fn standard_holds(&self) -> bool {
        matches!(self.case, AssumptionCase::Standard | AssumptionCase::Both)
    }

    pub fn singular_holds(&self) -> bool {
        matches!(self.case, AssumptionCase::Singular | AssumptionCase::Both)
    }

    /// Turns a fatal report into [`Error::Assumption`].
    pub fn require(self) -> Result<Self> {
        if self.is_fatal() {
            return Err(Error::Assumption(format!(
                "neither the standard nor the singular case holds with delta = {}: \
                 min Q = {:e}, min eig R = {:e}, min eig D'D = {:e}, min G = {:e}",
                self.delta,
                self.min_state_weight,
                self.min_control_weight_eigenvalue,
                self.min_diffusion_gram_eigenvalue,
                self.min_terminal_weight
            )));
        }
        Ok(self)
    }
}

/// Checks the standard and singular cases at every coefficient node.
pub fn validate_lq_assumptions(data: &LqData) -> Result<ValidationReport> {
    data.check_structure()?;
    let nodes = data.breakpoints();
    let mut min_q = f64::INFINITY;
    let mut min_r = f64::INFINITY;
    let mut min_dtd = f64::INFINITY;
    for &t in &nodes {
        for i in 0..data.regimes {
            min_q = min_q.min(data.state_weight.scalar_at(t, i)?);
            let mut buf = vec![0.0; data.controls * data.controls];
            data.control_weight.evaluate_into(t, i, &mut buf)?;
            let r = DMatrix::from_row_slice(data.controls, data.controls, &buf);
            if !is_symmetric(&r, 1e-12) {
                return Err(Error::Structural(format!("R not symmetric at t = {t}, regime {i}")));
            }
            min_r = min_r.min(min_eigenvalue(&r));
            let mut buf = vec![0.0; data.noise * data.controls];
            data.control_diffusion.evaluate_into(t, i, &mut buf)?;
            let d = DMatrix::from_row_slice(data.noise, data.controls, &buf);
            min_dtd = min_dtd.min(min_eigenvalue(&d.tr_mul(&d)));
        }
    }
    let min_g = data.terminal_weight.iter().copied().fold(f64::INFINITY, f64::min);
    let delta = data.delta;
    let tol = PSD_TOLERANCE;
    let q_ok = min_q >= -tol;
    let g_ok = min_g >= delta - tol;
    let standard = q_ok && g_ok && min_r >= delta - tol;
    let singular = q_ok && g_ok && min_r >= -tol && min_dtd >= delta - tol;
    let case = match (standard, singular) {
        (true, true) => AssumptionCase::Both,
        (true, false) => AssumptionCase::Standard,
        (false, true) => AssumptionCase::Singular,
        (false, false) => AssumptionCase::Neither,
    };
    Ok(ValidationReport {
        case,
        delta,
        min_state_weight: min_q,
        min_control_weight_eigenvalue: min_r,
        min_diffusion_gram_eigenvalue: min_dtd,
        min_terminal_weight: min_g,
        nodes_checked: nodes.len(),
    })
}

/// Market data of the mean-variance asset-liability problem.
///
/// Surplus: `dX = [r X + pi'mu + b] dt + [pi'sigma + rho'] dW`, `X(0) = x0`,
/// `alpha_0 = i0` (0-based regime index).
#[derive(Debug, Clone, PartialEq)]
pub struct MvAlmData {
    pub horizon: f64,
    pub regimes: usize,
    pub assets: usize,
    pub noise: usize,
    /// Interest rate, scalar.
    pub rate: CoefficientTable,
    /// Mean excess return, m-vector.
    pub excess_return: CoefficientTable,
    /// Volatility, m x n.
    pub volatility: CoefficientTable,
    /// Liability drift offset `b`, scalar.
    pub liability_drift: CoefficientTable,
    /// Liability diffusion `rho`, n-vector.
    pub liability_diffusion: CoefficientTable,
    pub x0: f64,
    pub i0: usize,
    /// Target expected terminal surplus.
    pub z: f64,
    pub delta: f64,
}

/// Mean-variance coefficients resolved at one time point and regime.
#[derive(Debug, Clone)]
pub(crate) struct MvCoefficients {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub b: f64,
    pub rho: DVector<f64>,
}

impl MvCoefficients {
    /// `sigma sigma'`.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.sigma * self.sigma.transpose()
    }
}

impl MvAlmData {
    /// A market without liability (`b = 0`, `rho = 0`) and constant coefficients.
    ///
    /// `mu[i]` has `m` entries, `sigma[i]` has `m * n` entries row-major.
    #[allow(clippy::too_many_arguments)]
    pub fn constant(
        horizon: f64,
        assets: usize,
        noise: usize,
        rate: &[f64],
        mu: &[Vec<f64>],
        sigma: &[Vec<f64>],
        x0: f64,
        i0: usize,
        z: f64,
        delta: f64,
    ) -> Result<Self> {
        let regimes = rate.len();
        Ok(Self {
            horizon,
            regimes,
            assets,
            noise,
            rate: CoefficientTable::scalar(horizon, rate)?,
            excess_return: CoefficientTable::constant(horizon, assets, 1, mu)?,
            volatility: CoefficientTable::constant(horizon, assets, noise, sigma)?,
            liability_drift: CoefficientTable::zeros(horizon, regimes, 1, 1)?,
            liability_diffusion: CoefficientTable::zeros(horizon, regimes, noise, 1)?,
            x0,
            i0,
            z,
            delta,
        })
    }

    /// Replaces the liability with constant per-regime `b` and `rho`.
    pub fn with_liability(mut self, b: &[f64], rho: &[Vec<f64>]) -> Result<Self> {
        self.liability_drift = CoefficientTable::scalar(self.horizon, b)?;
        self.liability_diffusion = CoefficientTable::constant(self.horizon, self.noise, 1, rho)?;
        Ok(self)
    }

    fn tables(&self) -> [(&'static str, &CoefficientTable, (usize, usize)); 5] {
        let (m, n) = (self.assets, self.noise);
        [
            ("r", &self.rate, (1, 1)),
            ("mu", &self.excess_return, (m, 1)),
            ("sigma", &self.volatility, (m, n)),
            ("b", &self.liability_drift, (1, 1)),
            ("rho", &self.liability_diffusion, (n, 1)),
        ]
    }

    pub fn check_structure(&self) -> Result<()> {
        if !(self.horizon > 0.0) {
            return Err(Error::Structural(format!("horizon must be positive, got {}", self.horizon)));
        }
        if self.regimes == 0 || self.assets == 0 || self.noise == 0 {
            return Err(Error::Structural("regimes, assets and noise must be positive".into()));
        }
        if self.assets > self.noise {
            return Err(Error::Structural(format!(
                "asset count m = {} exceeds noise dimension n = {}",
                self.assets, self.noise
            )));
        }
        for (name, t, shape) in self.tables() {
            check_table(name, t, self.horizon, self.regimes, shape)?;
        }
        if self.i0 >= self.regimes {
            return Err(Error::RegimeIndex { regime: self.i0, regimes: self.regimes });
        }
        if !self.x0.is_finite() || !self.z.is_finite() {
            return Err(Error::Structural("x0 and z must be finite".into()));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Structural(format!("delta must be positive, got {}", self.delta)));
        }
        Ok(())
    }

    /// Structure plus `sigma sigma' >= delta I` at every node and regime.
    pub fn validate(&self) -> Result<()> {
        self.check_structure()?;
        let (t, regime, min_eigenvalue) = self.ellipticity_minimum();
        if min_eigenvalue < self.delta - PSD_TOLERANCE {
            return Err(Error::Ellipticity { t, regime, min_eigenvalue });
        }
        Ok(())
    }

    /// Smallest eigenvalue of `sigma sigma'` over all nodes and regimes, with
    /// its location. This is the largest `delta` the data supports.
    pub fn ellipticity_minimum(&self) -> (f64, usize, f64) {
        let mut worst = (0.0, 0, f64::INFINITY);
        for &t in &self.breakpoints() {
            for i in 0..self.regimes {
                let mut buf = vec![0.0; self.assets * self.noise];
                self.volatility.eval_unchecked(t, i, &mut buf);
                let s = DMatrix::from_row_slice(self.assets, self.noise, &buf);
                let ev = min_eigenvalue(&(&s * s.transpose()));
                if ev < worst.2 {
                    worst = (t, i, ev);
                }
            }
        }
        worst
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        merged_breakpoints(self.horizon, self.tables().into_iter().map(|(_, t, _)| t))
    }

    /// True when `b` and `rho` vanish identically.
    pub fn has_no_liability(&self) -> bool {
        self.liability_drift.is_zero() && self.liability_diffusion.is_zero()
    }

    pub(crate) fn coefficients(&self, at: StagePoint, regime: usize) -> MvCoefficients {
        MvCoefficients {
            mu: self.excess_return.stage_vector(at, regime),
            sigma: self.volatility.stage_matrix(at, regime),
            b: self.liability_drift.stage_scalar(at, regime),
            rho: self.liability_diffusion.stage_vector(at, regime),
        }
    }

    /// `delta` carried into the LQ problem; the terminal weight is 1, so the
    /// LQ assumption can only hold with `delta <= 1`.
    pub fn effective_delta(&self) -> f64 {
        self.delta.min(1.0)
    }
}

/// The relaxed problem with multiplier `lambda` as an LQ problem:
/// `A = r`, `B = mu`, `C = 0`, `D = sigma'`, `Q = q = R = p = 0`, `G = 1`,
/// `g = lambda + z`.
pub fn mv_to_lq(data: &MvAlmData, lambda: f64) -> Result<LqData> {
    data.check_structure()?;
    let (h, l, m, n) = (data.horizon, data.regimes, data.assets, data.noise);
    Ok(LqData {
        horizon: h,
        regimes: l,
        controls: m,
        noise: n,
        state_drift: data.rate.clone(),
        control_drift: data.excess_return.clone(),
        state_diffusion: CoefficientTable::zeros(h, l, n, 1)?,
        control_diffusion: data.volatility.transpose(),
        drift_offset: data.liability_drift.clone(),
        diffusion_offset: data.liability_diffusion.clone(),
        state_weight: CoefficientTable::zeros(h, l, 1, 1)?,
        state_target: CoefficientTable::zeros(h, l, 1, 1)?,
        control_weight: CoefficientTable::zeros(h, l, m, m)?,
        control_target: CoefficientTable::zeros(h, l, m, 1)?,
        terminal_weight: vec![1.0; l],
        terminal_target: vec![lambda + data.z; l],
        delta: data.effective_delta(),
    })
}
