use mixrec_core::bosearch::{
    bits_of, bo_search, po_exact, po_monte_carlo, AlphaTable, BoConfig,
};
use mixrec_core::model::ArchitectureGenome;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded objective over 6 bits: weighted agreement with a hidden target
/// plus positive pairwise bonuses, so the target is the unique maximizer.
struct Benchmark {
    target: Vec<bool>,
    w: Vec<f64>,
    pair: Vec<Vec<f64>>,
}

impl Benchmark {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            target: (0..6).map(|_| rng.random()).collect(),
            w: (0..6).map(|_| rng.random_range(0.2..1.0)).collect(),
            pair: (0..6).map(|_| (0..6).map(|_| rng.random_range(0.0..0.3)).collect()).collect(),
        }
    }

    fn eval(&self, z: &[bool]) -> f64 {
        let hit: Vec<f64> = z.iter().zip(&self.target).map(|(a, b)| (a == b) as u8 as f64).collect();
        let mut f: f64 = hit.iter().zip(&self.w).map(|(h, w)| h * w).sum();
        for i in 0..6 {
            for j in i + 1..6 {
                f += self.pair[i][j] * hit[i] * hit[j];
            }
        }
        f
    }
}

#[test]
fn benchmark_has_unique_optimum() {
    let b = Benchmark::new(2024);
    let values: Vec<f64> = (0..64).map(|c| b.eval(&bits_of(c, 6))).collect();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(values.iter().filter(|&&v| v == max).count(), 1);
    assert_eq!(bits_of(values.iter().position(|&v| v == max).unwrap(), 6), b.target);
}

#[test]
fn bo_beats_random_search_on_six_bits() {
    let b = Benchmark::new(2024);
    let optimum = (0..64).map(|c| b.eval(&bits_of(c, 6))).fold(f64::NEG_INFINITY, f64::max);
    let mut hits = 0;
    let (mut bo_sum, mut rs_sum) = (0.0, 0.0);
    for seed in 0..20 {
        let cfg = BoConfig::new(6, 5, 25, seed);
        let r = bo_search(&cfg, |g: &ArchitectureGenome| Ok(b.eval(g.bits())), |_| {}).unwrap();
        assert_eq!(r.trace.len(), 30);
        hits += (r.best_f == optimum) as usize;
        bo_sum += r.best_f;
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        rs_sum += sample(&mut rng, 64, 30)
            .iter()
            .map(|c| b.eval(&bits_of(c, 6)))
            .fold(f64::NEG_INFINITY, f64::max);
    }
    assert!(hits >= 18, "optimum found in {hits}/20 seeds");
    assert!(bo_sum > rs_sum, "bo mean {} vs random {}", bo_sum / 20.0, rs_sum / 20.0);
}

#[test]
fn exact_po_gradient_matches_finite_differences_on_nine_bits() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let alpha: Vec<f64> = (0..512).map(|_| rng.random_range(0.0..2.0)).collect();
    let table = AlphaTable { n_bits: 9, values: alpha };
    let theta: Vec<f64> = (0..9).map(|_| rng.random_range(0.1..0.9)).collect();
    let e = po_exact(&theta, &table);
    for i in 0..9 {
        let h = 1e-5;
        let mut a = theta.clone();
        let mut b = theta.clone();
        a[i] += h;
        b[i] -= h;
        let n = (po_exact(&a, &table).value - po_exact(&b, &table).value) / (2.0 * h);
        assert!((n - e.grad[i]).abs() <= 1e-6, "bit {i}: {} vs {n}", e.grad[i]);
    }
}

#[test]
fn monte_carlo_po_is_within_three_standard_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let alpha: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let table = AlphaTable { n_bits: 6, values: alpha };
        let theta: Vec<f64> = (0..6).map(|_| rng.random_range(0.05..0.95)).collect();
        let exact = po_exact(&theta, &table);
        let mc = po_monte_carlo(&theta, |z| table.get(z), 10_000, &mut rng);
        assert!((mc.value - exact.value).abs() <= 3.0 * mc.value_se);
    }
}

#[test]
fn monte_carlo_estimates_are_unbiased() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let alpha: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
    let table = AlphaTable { n_bits: 6, values: alpha };
    let theta = [0.3, 0.7, 0.5, 0.2, 0.9, 0.6];
    let exact = po_exact(&theta, &table);
    let reps: Vec<f64> = (0..200)
        .map(|_| po_monte_carlo(&theta, |z| table.get(z), 200, &mut rng).grad[0])
        .collect();
    let mean = reps.iter().sum::<f64>() / 200.0;
    let sd = (reps.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / 199.0).sqrt();
    assert!((mean - exact.grad[0]).abs() <= 3.0 * sd / 200f64.sqrt());
}
