use super::*;
use crate::chain::validate_generator;
use crate::market::{mv_to_lq, MvAlmData};
use crate::table::{CoefficientTable, Interpolation};

const R: f64 = 0.05;
const MU: f64 = 0.2;
const SIGMA: f64 = 0.3;

fn theta2() -> f64 {
    MU * MU / (SIGMA * SIGMA)
}

fn single_market() -> MvAlmData {
    MvAlmData::constant(1.0, 1, 1, &[R], &[vec![MU]], &[vec![SIGMA]], 1.0, 0, 1.2, 0.05).unwrap()
}

fn two_regime_market() -> (MvAlmData, RegimeGenerator) {
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

fn three_regime_lq() -> (LqData, RegimeGenerator) {
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

#[test]
fn grid_construction() {
    let g = BackwardGrid::uniform(1.0, 2000).unwrap();
    assert_eq!(g.steps(), 2000);
    assert_eq!(g.nodes()[0], 0.0);
    assert_eq!(g.horizon(), 1.0);
    let g = BackwardGrid::with_breakpoints(1.0, 2000, &[0.0, 0.5, 1.0]).unwrap();
    assert_eq!(g.steps(), 2000);
    assert!(g.nodes().contains(&0.5));
    assert_eq!(g.segments(), &[(0, 1000), (1000, 2000)]);
    // tiny segment still gets an even number of steps
    let g = BackwardGrid::with_breakpoints(1.0, 10, &[0.01]).unwrap();
    assert!(g.segments().iter().all(|(a, b)| (b - a) % 2 == 0 && b - a >= 4));
    assert!(g.nodes().windows(2).all(|w| w[1] > w[0]));
    assert!(BackwardGrid::uniform(0.0, 10).is_err());
    assert!(BackwardGrid::uniform(1.0, 0).is_err());
}

#[test]
fn constant_solution() {
    let g = BackwardGrid::uniform(1.0, 100).unwrap();
    let y = integrate_backward(&g, &[1.0], |_, _, dy| {
        dy[0] = 0.0;
        Ok(())
    })
    .unwrap();
    assert!((0..=100).all(|k| y.value(k, 0) == 1.0));
}

#[test]
fn exponential_closed_form() {
    let g = BackwardGrid::uniform(1.0, 1000).unwrap();
    let y = integrate_backward(&g, &[1.0], |_, y, dy| {
        dy[0] = y[0];
        Ok(())
    })
    .unwrap();
    let exact = libm::exp(-1.0);
    assert!((y.initial(0) - exact).abs() <= 1e-8);
    assert!((exact - 0.367879).abs() < 1e-6);
}

#[test]
fn coupled_closed_form() {
    // y1' = y2, y2' = y1 with y(T) = (1, 1): eigenvector (1,1), eigenvalue 1
    let g = BackwardGrid::uniform(2.0, 1000).unwrap();
    let y = integrate_backward(&g, &[1.0, 1.0], |_, y, dy| {
        dy[0] = y[1];
        dy[1] = y[0];
        Ok(())
    })
    .unwrap();
    for (k, &t) in g.nodes().iter().enumerate() {
        let exact = libm::exp(t - 2.0);
        assert!((y.value(k, 0) - exact).abs() < 1e-10);
        assert!((y.value(k, 1) - exact).abs() < 1e-10);
    }
}

#[test]
fn rk4_fourth_order() {
    let err = |steps| {
        let g = BackwardGrid::uniform(1.0, steps).unwrap();
        let y = integrate_backward(&g, &[1.0], |_, y, dy| {
            dy[0] = 3.0 * y[0];
            Ok(())
        })
        .unwrap();
        (y.initial(0) - libm::exp(-3.0)).abs()
    };
    let mut prev = err(8);
    for steps in [16, 32, 64] {
        let e = err(steps);
        assert!(prev / e >= 12.0, "ratio {} at {steps}", prev / e);
        prev = e;
    }
}

#[test]
fn blow_up_reports_time() {
    let g = BackwardGrid::uniform(1.0, 100).unwrap();
    let err = integrate_backward(&g, &[1.0], |st, _, dy| {
        dy[0] = if st.t() < 0.5 { f64::NAN } else { 0.0 };
        Ok(())
    })
    .unwrap_err();
    match err {
        Error::BlowUp { t } => assert!(t <= 0.5 && t >= 0.49, "{t}"),
        e => panic!("{e:?}"),
    }
}

#[test]
fn riccati_scalar_closed_form() {
    let data = single_market();
    let lq = mv_to_lq(&data, 0.0).unwrap();
    let gen = RegimeGenerator::single();
    let grid = BackwardGrid::uniform(1.0, DEFAULT_STEPS).unwrap();
    let ric = solve_riccati(&lq, &gen, &grid).unwrap();
    let exact = libm::exp(2.0 * R - theta2());
    assert!((ric.p.initial(0) - exact).abs() <= 1e-7);
    assert!((exact - 0.708614).abs() < 1e-6);
    assert_eq!(ric.p.terminal(0), 1.0);

    // independent cross-check: explicit Euler with 1e6 steps
    let n = 1_000_000;
    let h = 1.0 / n as f64;
    let mut p = 1.0;
    for _ in 0..n {
        p += h * (2.0 * R - theta2()) * p;
    }
    assert!((ric.p.initial(0) - p).abs() < 1e-6);
    // Gamma = (sigma sigma')^{-1} mu for the mean-variance problem
    assert!((ric.gamma.entry(0, 0)[0] - MU / (SIGMA * SIGMA)).abs() < 1e-12);
    assert!(ric.lambda.sup_norm() == 0.0);
}

#[test]
fn riccati_constant_when_all_terms_vanish() {
    let (mut data, gen) = three_regime_lq();
    let z = |d: &LqData, r, c| CoefficientTable::zeros(d.horizon, d.regimes, r, c).unwrap();
    data.control_drift = z(&data, 1, 1);
    data.state_diffusion = z(&data, 1, 1);
    data.state_drift = z(&data, 1, 1);
    data.state_weight = z(&data, 1, 1);
    data.terminal_weight = vec![1.0; 3];
    let grid = BackwardGrid::uniform(1.0, 200).unwrap();
    let ric = solve_riccati(&data, &gen, &grid).unwrap();
    for k in 0..=200 {
        for i in 0..3 {
            assert!((ric.p.value(k, i) - 1.0).abs() < 1e-14);
        }
    }
}

#[test]
fn riccati_positivity_violation() {
    let (mut data, gen) = three_regime_lq();
    data.state_weight = CoefficientTable::scalar(1.0, &[-10.0, -10.0, -10.0]).unwrap();
    let grid = BackwardGrid::uniform(1.0, 200).unwrap();
    let err = solve_riccati(&data, &gen, &grid).unwrap_err();
    assert!(matches!(err, Error::Positivity { .. }), "{err:?}");
}

#[test]
fn riccati_gain_singularity() {
    let (mut data, gen) = three_regime_lq();
    data.control_weight = CoefficientTable::zeros(1.0, 3, 1, 1).unwrap();
    data.control_diffusion = CoefficientTable::zeros(1.0, 3, 1, 1).unwrap();
    let grid = BackwardGrid::uniform(1.0, 50).unwrap();
    let err = solve_riccati(&data, &gen, &grid).unwrap_err();
    assert!(matches!(err, Error::GainSingularity { .. }), "{err:?}");
}

#[test]
fn k_scalar_closed_form() {
    let data = single_market();
    let gen = RegimeGenerator::single();
    let grid = BackwardGrid::uniform(1.0, DEFAULT_STEPS).unwrap();
    for lambda in [-1.2, 0.0, 0.7] {
        let lq = mv_to_lq(&data, lambda).unwrap();
        let ric = solve_riccati(&lq, &gen, &grid).unwrap();
        let k = solve_linear_k(&lq, &gen, &ric).unwrap();
        let exact = (lambda + data.z) * libm::exp(R - theta2());
        assert!((k.initial(0) - exact).abs() <= 1e-7, "lambda {lambda}");
        assert_eq!(k.values.terminal(0), lambda + data.z);
    }
}

#[test]
fn k_vanishes_without_sources() {
    let (mut data, gen) = three_regime_lq();
    let z = |r, c| CoefficientTable::zeros(1.0, 3, r, c).unwrap();
    data.terminal_target = vec![0.0; 3];
    data.drift_offset = z(1, 1);
    data.diffusion_offset = z(1, 1);
    data.control_target = z(1, 1);
    data.state_target = z(1, 1);
    let grid = BackwardGrid::uniform(1.0, 200).unwrap();
    let ric = solve_riccati(&data, &gen, &grid).unwrap();
    let k = solve_linear_k(&data, &gen, &ric).unwrap();
    assert_eq!(k.values.sup_norm(), 0.0);
    let picard = solve_by_contraction(&data, &gen, &ric, PICARD_TOLERANCE, PICARD_MAX_ITER).unwrap();
    assert_eq!(picard.iterations, 1);
    assert_eq!(picard.solution.values.sup_norm(), 0.0);
}

#[test]
fn picard_single_regime_is_exact() {
    let data = single_market().with_liability(&[0.1], &[vec![0.05]]).unwrap();
    let lq = mv_to_lq(&data, 0.4).unwrap();
    let gen = RegimeGenerator::single();
    let grid = BackwardGrid::uniform(1.0, 500).unwrap();
    let ric = solve_riccati(&lq, &gen, &grid).unwrap();
    let k = solve_linear_k(&lq, &gen, &ric).unwrap();
    let picard = solve_by_contraction(&lq, &gen, &ric, PICARD_TOLERANCE, PICARD_MAX_ITER).unwrap();
    assert_eq!(picard.iterations, 1);
    assert_eq!(picard.solution.values, k.values);
}

#[test]
fn picard_matches_coupled_solve() {
    let (data, gen) = three_regime_lq();
    let grid = BackwardGrid::uniform(1.0, DEFAULT_STEPS).unwrap();
    let ric = solve_riccati(&data, &gen, &grid).unwrap();
    let k = solve_linear_k(&data, &gen, &ric).unwrap();
    let picard = solve_by_contraction(&data, &gen, &ric, PICARD_TOLERANCE, PICARD_MAX_ITER).unwrap();
    assert!(picard.iterations <= 60, "{}", picard.iterations);
    assert!(picard.solution.values.sup_distance(&k.values) <= 1e-8);
}

#[test]
fn picard_non_convergence() {
    let (data, gen) = three_regime_lq();
    let grid = BackwardGrid::uniform(1.0, 100).unwrap();
    let ric = solve_riccati(&data, &gen, &grid).unwrap();
    let err = solve_by_contraction(&data, &gen, &ric, 1e-14, 2).unwrap_err();
    assert!(matches!(err, Error::NonConvergence { iterations: 2, .. }));
}

#[test]
fn h_systems_single_regime() {
    let data = single_market();
    let gen = RegimeGenerator::single();
    let grid = BackwardGrid::uniform(1.0, DEFAULT_STEPS).unwrap();
    let ric = solve_riccati(&mv_to_lq(&data, 0.0).unwrap(), &gen, &grid).unwrap();
    let (h1, h2) = solve_h_systems(&data, &gen, &ric).unwrap();
    assert!((h2.initial(0) - libm::exp(-R)).abs() <= 1e-8);
    assert_eq!(h1.values.sup_norm(), 0.0);
}

#[test]
fn h2_constant_at_zero_rate() {
    let (mut data, gen) = two_regime_market();
    data.rate = CoefficientTable::scalar(1.0, &[0.0, 0.0]).unwrap();
    let grid = BackwardGrid::uniform(1.0, 400).unwrap();
    let ric = solve_riccati(&mv_to_lq(&data, 0.0).unwrap(), &gen, &grid).unwrap();
    let (_, h2) = solve_h_systems(&data, &gen, &ric).unwrap();
    assert!((h2.values.sup_norm() - 1.0).abs() < 1e-15);
    assert!((h2.values.min_value() - 1.0).abs() < 1e-15);
}

#[test]
fn psi_closed_forms() {
    let data = single_market();
    let grid = BackwardGrid::uniform(1.0, DEFAULT_STEPS).unwrap();
    let psi = solve_feasibility_psi(&data, &RegimeGenerator::single(), &grid).unwrap();
    assert!((psi.initial(0) - libm::exp(R)).abs() < 1e-10);
    assert_eq!(psi.values.terminal(0), 1.0);

    let (mut data, gen) = two_regime_market();
    data.rate = CoefficientTable::scalar(1.0, &[0.0, 0.0]).unwrap();
    let psi = solve_feasibility_psi(&data, &gen, &grid).unwrap();
    assert!((psi.values.sup_norm() - 1.0).abs() < 1e-15 && (psi.values.min_value() - 1.0).abs() < 1e-15);
}

#[test]
fn psi_respects_rate_breakpoint() {
    // r = 0.02 on [0, 0.5), 0.08 on [0.5, 1]: psi(0) = exp(0.01 + 0.04)
    let mut data = single_market();
    data.rate = CoefficientTable::new(
        vec![0.0, 0.5, 1.0],
        1,
        1,
        vec![vec![0.02, 0.08, 0.08]],
        Interpolation::PiecewiseConstantLeft,
    )
    .unwrap();
    let grid = BackwardGrid::for_mv(&data, 200).unwrap();
    let psi = solve_feasibility_psi(&data, &RegimeGenerator::single(), &grid).unwrap();
    assert!((psi.initial(0) - libm::exp(0.05)).abs() < 1e-12);
}

#[test]
fn h_split_identity() {
    let (data, gen) = two_regime_market();
    let grid = BackwardGrid::uniform(1.0, DEFAULT_STEPS).unwrap();
    let ric = solve_riccati(&mv_to_lq(&data, 0.0).unwrap(), &gen, &grid).unwrap();
    let (h1, h2) = solve_h_systems(&data, &gen, &ric).unwrap();
    for lambda in [-data.z, 0.0, 1.0] {
        let h = solve_mv_h_direct(&data, &gen, &ric, lambda).unwrap();
        for k in 0..grid.nodes().len() {
            for i in 0..2 {
                let split = h1.value(k, i) + (lambda + data.z) * h2.value(k, i);
                assert!((h.value(k, i) - split).abs() <= 1e-8);
            }
        }
    }
}

#[test]
fn k_over_p_matches_h() {
    let (data, gen) = two_regime_market();
    let grid = BackwardGrid::uniform(1.0, DEFAULT_STEPS).unwrap();
    for lambda in [-0.5, 0.3] {
        let lq = mv_to_lq(&data, lambda).unwrap();
        let ric = solve_riccati(&lq, &gen, &grid).unwrap();
        let k = solve_linear_k(&lq, &gen, &ric).unwrap();
        let h_mv = solve_mv_h_direct(&data, &gen, &ric, lambda).unwrap();
        let h_lq = solve_h(&lq, &gen, &ric).unwrap();
        for kk in 0..grid.nodes().len() {
            for i in 0..2 {
                let ratio = k.value(kk, i) / ric.p.value(kk, i);
                assert!((ratio - h_mv.value(kk, i)).abs() <= 1e-7);
                assert!((ratio - h_lq.value(kk, i)).abs() <= 1e-7);
            }
        }
    }
}

#[test]
fn k_over_p_matches_h_general_lq() {
    let (data, gen) = three_regime_lq();
    let grid = BackwardGrid::uniform(1.0, DEFAULT_STEPS).unwrap();
    let ric = solve_riccati(&data, &gen, &grid).unwrap();
    let k = solve_linear_k(&data, &gen, &ric).unwrap();
    let h = solve_h(&data, &gen, &ric).unwrap();
    for kk in 0..grid.nodes().len() {
        for i in 0..3 {
            assert!((k.value(kk, i) / ric.p.value(kk, i) - h.value(kk, i)).abs() <= 1e-7);
        }
    }
    assert!(ric.min_p() > 0.0);
}

#[test]
fn cubic_interpolation_inside_segment() {
    let grid = BackwardGrid::with_breakpoints(1.0, 40, &[0.5]).unwrap();
    let f = integrate_backward(&grid, &[1.0], |_, y, dy| {
        dy[0] = y[0];
        Ok(())
    })
    .unwrap();
    for t in [0.013, 0.26, 0.499, 0.5, 0.77, 1.0] {
        assert!((f.at(t, 0) - libm::exp(t - 1.0)).abs() < 1e-8, "t = {t}");
    }
}

#[test]
fn grid_mismatch_detected() {
    let data = single_market();
    let lq = mv_to_lq(&data, 0.0).unwrap();
    let grid = BackwardGrid::uniform(2.0, 100).unwrap();
    let err = solve_riccati(&lq, &RegimeGenerator::single(), &grid).unwrap_err();
    assert!(matches!(err, Error::GridMismatch(_)));
}

#[test]
fn simpson_integrates_cubics_exactly_and_respects_breakpoints() {
    let grid = BackwardGrid::with_breakpoints(2.0, 20, &[0.7]).unwrap();
    let v = simpson(&grid, |st, _| Ok(st.t() * st.t() * st.t() - st.t())).unwrap();
    assert!((v - (4.0 - 2.0)).abs() < 1e-13);
    // step function 1 on [0, 0.7), 3 on [0.7, 2]
    let v = simpson(&grid, |st, _| Ok(if st.point.lo < 0.7 - 1e-12 { 1.0 } else { 3.0 })).unwrap();
    assert!((v - (0.7 + 3.0 * 1.3)).abs() < 1e-13);
}

proptest::proptest! {
    #[test]
    fn locate_agrees_with_binary_search(
        steps in 4usize..300,
        cut in 0.05..0.95f64,
        t in 0.0..2.0f64,
    ) {
        let grid = BackwardGrid::with_breakpoints(2.0, steps, &[0.0, 2.0 * cut, 2.0]).unwrap();
        let nodes = grid.nodes();
        let slow = nodes.partition_point(|&s| s <= t).saturating_sub(1).min(grid.steps() - 1);
        proptest::prop_assert_eq!(grid.locate(t), slow);
        for (k, &node) in nodes.iter().enumerate() {
            let slow = nodes.partition_point(|&s| s <= node).saturating_sub(1).min(grid.steps() - 1);
            proptest::prop_assert_eq!(grid.locate(node), slow, "node {}", k);
        }
    }
}
