//! Continuous-time Markov chain of market regimes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use rand_distr::Exp1;

use crate::{Error, Result};

const ROW_SUM_TOLERANCE: f64 = 1e-12;
const PROBABILITY_TOLERANCE: f64 = 1e-10;

/// Validated generator `Q = (q_ij)`: nonnegative off-diagonal rates, rows
/// summing to zero. Rates are per unit time.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeGenerator {
    size: usize,
    rates: Vec<f64>,
}

/// Validates a square rate matrix given by rows.
pub fn validate_generator(rows: &[Vec<f64>]) -> Result<RegimeGenerator> {
    let size = rows.len();
    if size == 0 {
        return Err(Error::Structural("generator must have at least one regime".into()));
    }
    let mut rates = Vec::with_capacity(size * size);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != size {
            return Err(Error::Structural(format!(
                "generator row {i} has {} entries, expected {size}",
                row.len()
            )));
        }
        for (j, &q) in row.iter().enumerate() {
            if !q.is_finite() {
                return Err(Error::Structural(format!("generator entry ({i}, {j}) is not finite")));
            }
            if i != j && q < 0.0 {
                return Err(Error::NegativeRate { row: i, col: j, rate: q });
            }
        }
        let sum: f64 = row.iter().sum();
        if sum.abs() > ROW_SUM_TOLERANCE {
            return Err(Error::Conservation { row: i, sum });
        }
        rates.extend_from_slice(row);
    }
    Ok(RegimeGenerator { size, rates })
}

impl RegimeGenerator {
    /// The trivial single-regime chain `Q = [0]`.
    pub fn single() -> Self {
        Self { size: 1, rates: vec![0.0] }
    }

    pub fn regimes(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.rates[i * self.size + j]
    }

    /// `-q_ii`, the total intensity of leaving regime `i`.
    pub fn exit_rate(&self, i: usize) -> f64 {
        -self.rate(i, i)
    }

    pub fn max_exit_rate(&self) -> f64 {
        (0..self.size).map(|i| self.exit_rate(i)).fold(0.0, f64::max)
    }

    /// True when no regime can be left.
    pub fn is_decoupled(&self) -> bool {
        self.max_exit_rate() == 0.0
    }

    /// Rows of the matrix.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rates.chunks(self.size).map(|r| r.to_vec()).collect()
    }

    /// `dp/dt = Q'p`, written into `out`.
    fn forward_rhs(&self, p: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = (0..self.size).map(|i| self.rate(i, j) * p[i]).sum();
        }
    }
}

fn check_probability(p0: &[f64], size: usize) -> Result<()> {
    if p0.len() != size {
        return Err(Error::Probability(format!("expected {size} entries, got {}", p0.len())));
    }
    if let Some(v) = p0.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Probability(format!("negative or non-finite entry {v}")));
    }
    let s: f64 = p0.iter().sum();
    if (s - 1.0).abs() > PROBABILITY_TOLERANCE {
        return Err(Error::Probability(format!("entries sum to {s}")));
    }
    Ok(())
}

/// Point mass on regime `i`.
pub fn point_mass(size: usize, i: usize) -> Vec<f64> {
    let mut p = vec![0.0; size];
    p[i] = 1.0;
    p
}

/// Law of `alpha_t` at each grid node, starting from `p0` at `grid[0]`.
///
/// Integrates the forward Kolmogorov equation `dp/dt = Q'p` with classical
/// RK4. Grid intervals are subdivided so each step is at most
/// `min(0.01, 0.01 / max exit rate)`.
pub fn occupation_distribution(gen: &RegimeGenerator, p0: &[f64], grid: &[f64]) -> Result<Vec<Vec<f64>>> {
    let l = gen.regimes();
    check_probability(p0, l)?;
    if let Some(w) = grid.windows(2).find(|w| !(w[1] >= w[0])) {
        return Err(Error::Structural(format!("grid not increasing near {} -> {}", w[0], w[1])));
    }
    let h_max = 0.01_f64.min(0.01 / gen.max_exit_rate().max(1e-300));
    let mut out = Vec::with_capacity(grid.len());
    let mut p = p0.to_vec();
    let mut k1 = vec![0.0; l];
    let mut k2 = vec![0.0; l];
    let mut k3 = vec![0.0; l];
    let mut k4 = vec![0.0; l];
    let mut tmp = vec![0.0; l];
    if !grid.is_empty() {
        out.push(p.clone());
    }
    for w in grid.windows(2) {
        let span = w[1] - w[0];
        if span > 0.0 && !gen.is_decoupled() {
            let steps = libm::ceil(span / h_max).max(1.0) as usize;
            let h = span / steps as f64;
            for _ in 0..steps {
                gen.forward_rhs(&p, &mut k1);
                for i in 0..l {
                    tmp[i] = p[i] + 0.5 * h * k1[i];
                }
                gen.forward_rhs(&tmp, &mut k2);
                for i in 0..l {
                    tmp[i] = p[i] + 0.5 * h * k2[i];
                }
                gen.forward_rhs(&tmp, &mut k3);
                for i in 0..l {
                    tmp[i] = p[i] + h * k3[i];
                }
                gen.forward_rhs(&tmp, &mut k4);
                for i in 0..l {
                    p[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
        }
        out.push(p.clone());
    }
    Ok(out)
}

/// A sampled regime trajectory on `[0, T]`: right-continuous, constant
/// between jumps.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainPath {
    /// Strictly increasing, in `(0, T]`.
    pub jump_times: Vec<f64>,
    /// `states[0]` is the initial regime; `states[k + 1]` holds from `jump_times[k]`.
    pub states: Vec<usize>,
}

impl ChainPath {
    pub fn jumps(&self) -> usize {
        self.jump_times.len()
    }

    pub fn state_at(&self, t: f64) -> usize {
        let k = self.jump_times.partition_point(|&s| s <= t);
        self.states[k]
    }

    pub fn initial(&self) -> usize {
        self.states[0]
    }
}

/// Exact path sampling: exponential holding times with rate `-q_ii`, next
/// state `j` with probability `q_ij / (-q_ii)`.
pub fn sample_chain_path<R: Rng + ?Sized>(
    gen: &RegimeGenerator,
    i0: usize,
    horizon: f64,
    rng: &mut R,
) -> ChainPath {
    let mut jump_times = Vec::new();
    let mut states = vec![i0];
    let mut state = i0;
    let mut t = 0.0;
    loop {
        let rate = gen.exit_rate(state);
        if rate <= 0.0 {
            break;
        }
        let hold: f64 = rng.sample::<f64, _>(Exp1) / rate;
        t += hold;
        if t > horizon {
            break;
        }
        let mut u = rng.random::<f64>() * rate;
        let mut next = state;
        for j in 0..gen.regimes() {
            if j == state {
                continue;
            }
            let q = gen.rate(state, j);
            if q <= 0.0 {
                continue;
            }
            next = j;
            if u < q {
                break;
            }
            u -= q;
        }
        jump_times.push(t);
        states.push(next);
        state = next;
    }
    ChainPath { jump_times, states }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sym() -> RegimeGenerator {
        validate_generator(&[vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap()
    }

    #[test]
    fn validation_cases() {
        assert!(validate_generator(&[vec![-1.0, 1.0], vec![2.0, -2.0]]).is_ok());
        let single = validate_generator(&[vec![0.0]]).unwrap();
        assert_eq!(single, RegimeGenerator::single());
        let err = validate_generator(&[vec![-1.0, 0.5], vec![1.0, -1.0]]).unwrap_err();
        assert_eq!(err, Error::Conservation { row: 0, sum: -0.5 });
        let err = validate_generator(&[vec![1.0, -1.0], vec![1.0, -1.0]]).unwrap_err();
        assert!(matches!(err, Error::NegativeRate { row: 0, col: 1, .. }));
        assert!(validate_generator(&[vec![-1.0, 1.0]]).is_err());
    }

    #[test]
    fn single_regime_law_is_constant() {
        let grid: Vec<f64> = (0..=10).map(|k| k as f64 * 0.1).collect();
        let p = occupation_distribution(&RegimeGenerator::single(), &[1.0], &grid).unwrap();
        assert!(p.iter().all(|v| v == &[1.0]));
    }

    #[test]
    fn symmetric_two_state_closed_form() {
        let grid: Vec<f64> = (0..=100).map(|k| k as f64 * 0.01).collect();
        let p = occupation_distribution(&sym(), &[1.0, 0.0], &grid).unwrap();
        let expected = (1.0 + libm::exp(-2.0)) / 2.0;
        assert!((p[100][0] - expected).abs() < 1e-10, "{}", p[100][0]);
        assert!((expected - 0.567667).abs() < 1e-6);
    }

    #[test]
    fn stationary_law_is_preserved() {
        // pi'Q = 0 for Q = [[-1,1],[2,-2]] at pi = (2/3, 1/3)
        let gen = validate_generator(&[vec![-1.0, 1.0], vec![2.0, -2.0]]).unwrap();
        let pi = [2.0 / 3.0, 1.0 / 3.0];
        let grid: Vec<f64> = (0..=20).map(|k| k as f64 * 0.05).collect();
        for p in occupation_distribution(&gen, &pi, &grid).unwrap() {
            assert!((p[0] - pi[0]).abs() < 1e-13 && (p[1] - pi[1]).abs() < 1e-13);
        }
    }

    #[test]
    fn rejects_invalid_initial_law() {
        let grid = [0.0, 1.0];
        assert!(matches!(occupation_distribution(&sym(), &[0.5, 0.6], &grid), Err(Error::Probability(_))));
        assert!(matches!(occupation_distribution(&sym(), &[-0.1, 1.1], &grid), Err(Error::Probability(_))));
        assert!(matches!(occupation_distribution(&sym(), &[1.0], &grid), Err(Error::Probability(_))));
    }

    #[test]
    fn single_regime_path_has_no_jumps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let path = sample_chain_path(&RegimeGenerator::single(), 0, 5.0, &mut rng);
        assert_eq!(path.jumps(), 0);
        assert_eq!(path.state_at(4.9), 0);
    }

    #[test]
    fn absorbing_state_never_left() {
        let gen = validate_generator(&[vec![0.0, 0.0], vec![3.0, -3.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            assert_eq!(sample_chain_path(&gen, 0, 10.0, &mut rng).jumps(), 0);
        }
    }

    #[test]
    fn path_structure() {
        let gen = validate_generator(&[
            vec![-3.0, 1.0, 2.0],
            vec![0.5, -1.0, 0.5],
            vec![1.0, 1.0, -2.0],
        ])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let path = sample_chain_path(&gen, 1, 2.0, &mut rng);
            assert_eq!(path.states.len(), path.jump_times.len() + 1);
            assert!(path.jump_times.windows(2).all(|w| w[1] > w[0]));
            assert!(path.jump_times.iter().all(|&t| t > 0.0 && t <= 2.0));
            assert!(path.states.windows(2).all(|w| w[0] != w[1]));
            for (k, &t) in path.jump_times.iter().enumerate() {
                assert_eq!(path.state_at(t), path.states[k + 1]);
            }
        }
    }

    #[test]
    fn mean_jump_count_matches_intensity() {
        // E[N(1)] = int_0^1 sum_i p_i(t)(-q_ii) dt = 1 for the symmetric chain
        let gen = sym();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let counts: Vec<f64> = (0..n).map(|_| sample_chain_path(&gen, 0, 1.0, &mut rng).jumps() as f64).collect();
        let mean = counts.iter().sum::<f64>() / n as f64;
        let var = counts.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / (n - 1) as f64;
        let se = libm::sqrt(var / n as f64);
        assert!((mean - 1.0).abs() <= 3.0 * se, "mean {mean}, se {se}");
    }

    proptest::proptest! {
        #[test]
        fn law_stays_normalized(q01 in 0.0f64..5.0, q02 in 0.0f64..5.0, q10 in 0.0f64..5.0,
                                q12 in 0.0f64..5.0, q20 in 0.0f64..5.0, q21 in 0.0f64..5.0,
                                start in 0usize..3) {
            let gen = validate_generator(&[
                vec![-(q01 + q02), q01, q02],
                vec![q10, -(q10 + q12), q12],
                vec![q20, q21, -(q20 + q21)],
            ]).unwrap();
            let grid: Vec<f64> = (0..=40).map(|k| k as f64 * 0.05).collect();
            for p in occupation_distribution(&gen, &point_mass(3, start), &grid).unwrap() {
                let s: f64 = p.iter().sum();
                proptest::prop_assert!((s - 1.0).abs() < 1e-10);
                proptest::prop_assert!(p.iter().all(|&v| v >= -1e-10));
            }
        }
    }
}
