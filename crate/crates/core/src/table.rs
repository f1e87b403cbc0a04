//! Sampled per-regime coefficient tables.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// How a table is evaluated between its grid nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    /// Value at the greatest node `<= t`.
    #[default]
    PiecewiseConstantLeft,
    PiecewiseLinear,
}

/// A time point inside the integration cell `[lo, hi]`.
///
/// Piecewise-constant tables are evaluated on the cell rather than at `t`, so
/// a Runge–Kutta stage sitting on a breakpoint sees the value of the cell it
/// belongs to instead of the neighbouring one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StagePoint {
    pub t: f64,
    pub lo: f64,
    pub hi: f64,
}

impl StagePoint {
    pub fn new(t: f64, lo: f64, hi: f64) -> Self {
        Self { t, lo, hi }
    }
}

/// One coefficient (scalar, vector or matrix valued) sampled on a time grid,
/// with one sample array per regime.
///
/// Matrix entries are stored row-major; vectors are `rows x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientTable {
    grid: Vec<f64>,
    rows: usize,
    cols: usize,
    samples: Vec<Vec<f64>>,
    interpolation: Interpolation,
}

const TIME_SLACK: f64 = 1e-12;

impl CoefficientTable {
    /// `samples[i]` holds `grid.len() * rows * cols` values for regime `i`,
    /// node-major.
    pub fn new(
        grid: Vec<f64>,
        rows: usize,
        cols: usize,
        samples: Vec<Vec<f64>>,
        interpolation: Interpolation,
    ) -> Result<Self> {
        if grid.len() < 2 {
            return Err(Error::Structural(format!(
                "table grid needs at least two nodes, got {}",
                grid.len()
            )));
        }
        if grid[0] != 0.0 {
            return Err(Error::Structural(format!("table grid must start at 0, got {}", grid[0])));
        }
        if let Some(w) = grid.windows(2).find(|w| !(w[1] > w[0])) {
            return Err(Error::Structural(format!(
                "table grid not strictly increasing near {} -> {}",
                w[0], w[1]
            )));
        }
        if rows == 0 || cols == 0 {
            return Err(Error::Structural("table entry shape must be nonempty".into()));
        }
        if samples.is_empty() {
            return Err(Error::Structural("table has no regimes".into()));
        }
        let expected = grid.len() * rows * cols;
        for (i, s) in samples.iter().enumerate() {
            if s.len() != expected {
                return Err(Error::Structural(format!(
                    "regime {i}: expected {expected} samples ({} nodes x {rows}x{cols}), got {}",
                    grid.len(),
                    s.len()
                )));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::Structural(format!("regime {i}: non-finite sample")));
            }
        }
        Ok(Self { grid, rows, cols, samples, interpolation })
    }

    /// Time-constant table: `values[i]` is the `rows * cols` entry for regime `i`.
    pub fn constant(horizon: f64, rows: usize, cols: usize, values: &[Vec<f64>]) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(Error::Structural(format!("horizon must be positive, got {horizon}")));
        }
        let samples = values
            .iter()
            .map(|v| {
                let mut s = v.clone();
                s.extend_from_slice(v);
                s
            })
            .collect();
        Self::new(vec![0.0, horizon], rows, cols, samples, Interpolation::PiecewiseConstantLeft)
    }

    /// Time-constant scalar table with one value per regime.
    pub fn scalar(horizon: f64, per_regime: &[f64]) -> Result<Self> {
        let values: Vec<Vec<f64>> = per_regime.iter().map(|&v| vec![v]).collect();
        Self::constant(horizon, 1, 1, &values)
    }

    pub fn zeros(horizon: f64, regimes: usize, rows: usize, cols: usize) -> Result<Self> {
        Self::constant(horizon, rows, cols, &vec![vec![0.0; rows * cols]; regimes])
    }

    pub fn horizon(&self) -> f64 {
        self.grid[self.grid.len() - 1]
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn regimes(&self) -> usize {
        self.samples.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn entries(&self) -> usize {
        self.rows * self.cols
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    pub fn with_interpolation(mut self, interpolation: Interpolation) -> Self {
        self.interpolation = interpolation;
        self
    }

    /// Stored sample at grid node `node` for regime `regime`.
    pub fn sample(&self, node: usize, regime: usize) -> &[f64] {
        let e = self.entries();
        &self.samples[regime][node * e..(node + 1) * e]
    }

    /// Interpolated value at `(t, regime)`.
    pub fn evaluate(&self, t: f64, regime: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.entries()];
        self.evaluate_into(t, regime, &mut out)?;
        Ok(out)
    }

    pub fn evaluate_into(&self, t: f64, regime: usize, out: &mut [f64]) -> Result<()> {
        let horizon = self.horizon();
        let slack = TIME_SLACK * horizon.max(1.0);
        if !(t >= -slack && t <= horizon + slack) {
            return Err(Error::TimeRange { t, horizon });
        }
        if regime >= self.regimes() {
            return Err(Error::RegimeIndex { regime, regimes: self.regimes() });
        }
        self.eval_unchecked(t.clamp(0.0, horizon), regime, out);
        Ok(())
    }

    /// Scalar value at `(t, regime)`; the table must be 1x1.
    pub fn scalar_at(&self, t: f64, regime: usize) -> Result<f64> {
        debug_assert_eq!(self.entries(), 1);
        let mut out = [0.0];
        self.evaluate_into(t, regime, &mut out)?;
        Ok(out[0])
    }

    pub(crate) fn eval_unchecked(&self, t: f64, regime: usize, out: &mut [f64]) {
        let e = self.entries();
        let s = &self.samples[regime];
        let last = self.grid.len() - 1;
        // greatest node <= t
        let k = self.grid.partition_point(|&g| g <= t).saturating_sub(1).min(last);
        match self.interpolation {
            Interpolation::PiecewiseConstantLeft => out.copy_from_slice(&s[k * e..(k + 1) * e]),
            Interpolation::PiecewiseLinear => {
                if k == last {
                    out.copy_from_slice(&s[k * e..(k + 1) * e]);
                } else {
                    let (t0, t1) = (self.grid[k], self.grid[k + 1]);
                    let w = (t - t0) / (t1 - t0);
                    for (j, o) in out.iter_mut().enumerate() {
                        let a = s[k * e + j];
                        let b = s[(k + 1) * e + j];
                        *o = a + w * (b - a);
                    }
                }
            }
        }
    }

    /// Evaluation inside an integration cell; see [`StagePoint`].
    pub(crate) fn eval_stage(&self, at: StagePoint, regime: usize, out: &mut [f64]) {
        let t = match self.interpolation {
            Interpolation::PiecewiseConstantLeft => 0.5 * (at.lo + at.hi),
            Interpolation::PiecewiseLinear => at.t.clamp(at.lo, at.hi),
        };
        self.eval_unchecked(t.clamp(0.0, self.horizon()), regime, out);
    }

    pub(crate) fn stage_scalar(&self, at: StagePoint, regime: usize) -> f64 {
        let mut out = [0.0];
        self.eval_stage(at, regime, &mut out);
        out[0]
    }

    pub(crate) fn stage_vector(&self, at: StagePoint, regime: usize) -> DVector<f64> {
        let mut v = DVector::zeros(self.entries());
        self.eval_stage(at, regime, v.as_mut_slice());
        v
    }

    pub(crate) fn stage_matrix(&self, at: StagePoint, regime: usize) -> DMatrix<f64> {
        let mut buf = vec![0.0; self.entries()];
        self.eval_stage(at, regime, &mut buf);
        DMatrix::from_row_slice(self.rows, self.cols, &buf)
    }

    /// Matrix value of node `node`, regime `regime`.
    pub fn node_matrix(&self, node: usize, regime: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, self.sample(node, regime))
    }

    /// Entry-wise transpose of a matrix-valued table.
    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows, self.cols);
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let mut t = vec![0.0; s.len()];
                for node in 0..self.grid.len() {
                    let base = node * r * c;
                    for i in 0..r {
                        for j in 0..c {
                            t[base + j * r + i] = s[base + i * c + j];
                        }
                    }
                }
                t
            })
            .collect();
        Self { grid: self.grid.clone(), rows: c, cols: r, samples, interpolation: self.interpolation }
    }

    pub fn is_zero(&self) -> bool {
        self.samples.iter().all(|s| s.iter().all(|&v| v == 0.0))
    }
}
