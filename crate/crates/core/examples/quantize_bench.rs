//! Times bin generation on Gaussian features: `quantize_bench [M] [m] [N]`.

use std::time::Instant;

use dq_core::{generate_bins, FeatureMatrix, QuantizeConfig};
use rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let (rows, cols, bins) = (
        args.first().copied().unwrap_or(10_000),
        args.get(1).copied().unwrap_or(128),
        args.get(2).copied().unwrap_or(10),
    );
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
    // Box-Muller
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| {
            let u1 = ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
            let u2 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    let features = FeatureMatrix::new(data, rows, cols).unwrap();
    let start = Instant::now();
    let set = generate_bins(&features, &QuantizeConfig::with_bins(bins)).unwrap();
    println!("M={rows} m={cols} N={bins}: {:.2?} ({} bins)", start.elapsed(), set.bins.len());
}
