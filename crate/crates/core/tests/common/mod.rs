#![allow(dead_code)]

use regime_lq::chain::{validate_generator, RegimeGenerator};
use regime_lq::market::{LqData, MvAlmData};
use regime_lq::table::{CoefficientTable, Interpolation};

pub const R: f64 = 0.05;
pub const MU: f64 = 0.2;
pub const SIGMA: f64 = 0.3;

pub fn theta2() -> f64 {
    MU * MU / (SIGMA * SIGMA)
}

/// Classical single-regime market without liability.
pub fn single_market(z: f64) -> MvAlmData {
    MvAlmData::constant(1.0, 1, 1, &[R], &[vec![MU]], &[vec![SIGMA]], 1.0, 0, z, 0.05).unwrap()
}

pub fn single_incomplete_market() -> MvAlmData {
    MvAlmData::constant(1.0, 1, 2, &[0.04], &[vec![0.15]], &[vec![0.25, 0.1]], 0.8, 0, 1.1, 0.05)
        .unwrap()
        .with_liability(&[0.05], &[vec![0.05, 0.1]])
        .unwrap()
}

pub fn two_regime_market() -> (MvAlmData, RegimeGenerator) {
    let data = MvAlmData::constant(
        1.0,
        1,
        1,
        &[0.05, 0.02],
        &[vec![0.2], vec![0.1]],
        &[vec![0.3], vec![0.4]],
        1.0,
        0,
        1.2,
        0.05,
    )
    .unwrap()
    .with_liability(&[0.1, -0.05], &[vec![0.05], vec![0.1]])
    .unwrap();
    let gen = validate_generator(&[vec![-1.0, 1.0], vec![2.0, -2.0]]).unwrap();
    (data, gen)
}

pub fn two_regime_without_liability() -> (MvAlmData, RegimeGenerator) {
    let (data, gen) = two_regime_market();
    let data = data.with_liability(&[0.0, 0.0], &[vec![0.0], vec![0.0]]).unwrap();
    (data, gen)
}

pub fn two_asset_market() -> (MvAlmData, RegimeGenerator) {
    let data = MvAlmData::constant(
        2.0,
        2,
        3,
        &[0.03, 0.01],
        &[vec![0.1, 0.05], vec![0.02, 0.08]],
        &[vec![0.3, 0.1, 0.0, 0.0, 0.2, 0.1], vec![0.4, 0.0, 0.1, 0.1, 0.3, 0.0]],
        0.5,
        1,
        1.0,
        0.01,
    )
    .unwrap()
    .with_liability(&[0.05, 0.02], &[vec![0.05, 0.02, 0.1], vec![0.0, 0.1, 0.05]])
    .unwrap();
    let gen = validate_generator(&[vec![-0.5, 0.5], vec![1.5, -1.5]]).unwrap();
    (data, gen)
}

/// Three regimes with coefficients switching at t = 0.4 and t = 0.75.
pub fn three_regime_time_varying() -> (MvAlmData, RegimeGenerator) {
    let grid = vec![0.0, 0.4, 0.75, 1.5];
    let table = |per_regime: [[f64; 4]; 3]| {
        CoefficientTable::new(
            grid.clone(),
            1,
            1,
            per_regime.iter().map(|v| v.to_vec()).collect(),
            Interpolation::PiecewiseConstantLeft,
        )
        .unwrap()
    };
    let data = MvAlmData {
        horizon: 1.5,
        regimes: 3,
        assets: 1,
        noise: 1,
        rate: table([[0.03, 0.05, 0.04, 0.04], [0.01, 0.02, 0.02, 0.02], [0.06, 0.03, 0.05, 0.05]]),
        excess_return: table([[0.1, 0.15, 0.12, 0.12], [0.05, 0.02, 0.08, 0.08], [0.2, 0.1, 0.15, 0.15]]),
        volatility: table([[0.2, 0.25, 0.3, 0.3], [0.35, 0.4, 0.3, 0.3], [0.25, 0.2, 0.2, 0.2]]),
        liability_drift: table([[0.02, 0.0, -0.01, -0.01], [0.05, 0.05, 0.0, 0.0], [-0.02, 0.01, 0.03, 0.03]]),
        liability_diffusion: table([[0.05, 0.05, 0.1, 0.1], [0.0, 0.1, 0.05, 0.05], [0.1, 0.0, 0.02, 0.02]]),
        x0: 1.0,
        i0: 2,
        z: 1.3,
        delta: 0.01,
    };
    let gen = validate_generator(&[vec![-1.5, 1.0, 0.5], vec![0.5, -1.0, 0.5], vec![2.0, 1.0, -3.0]]).unwrap();
    (data, gen)
}

/// Every mean-variance configuration of the regression set, by name.
pub fn mv_regression_set() -> Vec<(&'static str, MvAlmData, RegimeGenerator)> {
    let (a, ga) = two_regime_market();
    let (b, gb) = two_asset_market();
    let (c, gc) = three_regime_time_varying();
    let (d, gd) = two_regime_without_liability();
    vec![
        ("single", single_market(1.2), RegimeGenerator::single()),
        ("single-incomplete", single_incomplete_market(), RegimeGenerator::single()),
        ("two-regime", a, ga),
        ("two-asset", b, gb),
        ("three-regime-tv", c, gc),
        ("two-regime-no-liability", d, gd),
    ]
}

pub fn three_regime_lq() -> (LqData, RegimeGenerator) {
    let h = 1.0;
    let s = |v: [f64; 3]| CoefficientTable::scalar(h, &v).unwrap();
    let data = LqData {
        horizon: h,
        regimes: 3,
        controls: 1,
        noise: 1,
        state_drift: s([0.1, -0.2, 0.05]),
        control_drift: s([1.0, 0.5, -0.3]),
        state_diffusion: s([0.2, 0.0, 0.1]),
        control_diffusion: s([0.5, 0.3, 0.4]),
        drift_offset: s([0.1, 0.2, -0.1]),
        diffusion_offset: s([0.1, 0.05, 0.2]),
        state_weight: s([1.0, 0.5, 0.0]),
        state_target: s([0.3, -0.2, 0.1]),
        control_weight: s([1.0, 0.5, 2.0]),
        control_target: s([0.1, 0.0, -0.2]),
        terminal_weight: vec![1.0, 2.0, 0.5],
        terminal_target: vec![1.0, 0.5, -0.5],
        delta: 0.1,
    };
    let gen = validate_generator(&[vec![-2.0, 1.5, 0.5], vec![0.5, -1.0, 0.5], vec![1.0, 1.0, -2.0]]).unwrap();
    (data, gen)
}

/// Two controls, two noises, two regimes.
pub fn two_control_lq() -> (LqData, RegimeGenerator) {
    let h = 1.0;
    let s = |v: [f64; 2]| CoefficientTable::scalar(h, &v).unwrap();
    let c = |rows, cols, v: [&[f64]; 2]| {
        CoefficientTable::constant(h, rows, cols, &[v[0].to_vec(), v[1].to_vec()]).unwrap()
    };
    let data = LqData {
        horizon: h,
        regimes: 2,
        controls: 2,
        noise: 2,
        state_drift: s([0.1, -0.1]),
        control_drift: c(2, 1, [&[1.0, 0.3], &[0.5, -0.2]]),
        state_diffusion: c(2, 1, [&[0.2, 0.1], &[0.0, 0.3]]),
        control_diffusion: c(2, 2, [&[0.5, 0.1, 0.0, 0.4], &[0.3, 0.0, 0.2, 0.6]]),
        drift_offset: s([0.1, -0.2]),
        diffusion_offset: c(2, 1, [&[0.1, 0.0], &[0.05, 0.2]]),
        state_weight: s([0.5, 1.0]),
        state_target: s([0.2, -0.1]),
        control_weight: c(2, 2, [&[1.0, 0.2, 0.2, 0.8], &[0.5, 0.0, 0.0, 0.5]]),
        control_target: c(2, 1, [&[0.1, -0.1], &[0.0, 0.3]]),
        terminal_weight: vec![1.0, 1.5],
        terminal_target: vec![0.5, 1.0],
        delta: 0.1,
    };
    let gen = validate_generator(&[vec![-1.0, 1.0], vec![3.0, -3.0]]).unwrap();
    (data, gen)
}

/// Matrix exponential oracle for the chain law: `p(t) = p0 exp(Q t)`.
pub fn law_by_matrix_exponential(gen: &RegimeGenerator, p0: &[f64], t: f64) -> Vec<f64> {
    let rows = gen.to_rows();
    let l = rows.len();
    let q = nalgebra::DMatrix::from_fn(l, l, |i, j| rows[i][j] * t);
    let e = q.exp();
    (0..l).map(|j| (0..l).map(|i| p0[i] * e[(i, j)]).sum()).collect()
}
