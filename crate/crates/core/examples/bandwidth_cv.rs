//! Cross-validated bandwidth selection for the local-linear smoother.

use erfmi::smoother::cv_bandwidth;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> Result<(), erfmi::Error> {
    let n = 300;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a: Vec<f64> = (0..n).map(|_| rng.random_range(6.0..14.0)).collect();
    let noise = Normal::new(0.0, 0.15).unwrap();
    let offsets: Vec<f64> = (0..n).map(|_| rng.random_range(10.0..100.0)).collect();
    let grid = [0.1, 0.15, 0.2, 0.3, 0.4, 0.6, 0.8, 1.2];

    for (name, signal) in [
        ("gentle trend", Box::new(|a: f64| 0.2 * a) as Box<dyn Fn(f64) -> f64>),
        ("cosine bump", Box::new(|a: f64| (std::f64::consts::PI * (a - 6.0) / 4.0).cos())),
        ("tight oscillation", Box::new(|a: f64| (2.5 * a).sin())),
    ] {
        let xi: Vec<f64> = a.iter().map(|&v| signal(v) + noise.sample(&mut rng)).collect();
        let h = cv_bandwidth(&xi, &a, &offsets, &grid, 5, 1)?;
        println!("{name:>18}: selected h = {h}");
    }
    Ok(())
}
