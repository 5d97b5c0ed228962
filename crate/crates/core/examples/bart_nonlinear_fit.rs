//! The weighted tree-ensemble outcome model on a nonlinear signal,
//! compared against an ordinary linear fit.

use erfmi::bart::{BartHyper, BartOutcome};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> Result<(), erfmi::Error> {
    let n = 400;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..3).map(|_| rng.random::<f64>()).collect())
        .collect();
    let a: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0).collect();
    let truth: Vec<f64> = (0..n)
        .map(|i| (a[i] * 1.5).sin() * 3.0 + 4.0 * (x[i][0] - 0.5).powi(2) + 2.0 * x[i][1])
        .collect();
    let noise = Normal::new(0.0, 0.3).unwrap();
    let ybar: Vec<f64> = truth.iter().map(|t| t + noise.sample(&mut rng)).collect();
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(5.0..50.0)).collect();

    let hyper = BartHyper {
        n_trees: 100,
        ..Default::default()
    };
    let mut model = BartOutcome::new(&x, &a, &ybar, &weights, hyper)?;
    for _ in 0..400 {
        model.iterate(&a, &mut rng)?;
    }
    let mut fit = vec![0.0; n];
    let post_draws = 100;
    for _ in 0..post_draws {
        model.iterate(&a, &mut rng)?;
        for i in 0..n {
            fit[i] += model.predict(a[i], &x[i]) / post_draws as f64;
        }
    }
    let rmse = (truth
        .iter()
        .zip(&fit)
        .map(|(t, f)| (t - f).powi(2))
        .sum::<f64>()
        / n as f64)
        .sqrt();
    println!("posterior-mean fit RMSE vs truth: {rmse:.4}");
    println!("residual sd (psi): {:.4}", model.psi2_original().sqrt());
    for i in (0..n).step_by(n / 8) {
        println!(
            "a={:5.2} truth={:7.3} fit={:7.3}",
            a[i], truth[i], fit[i]
        );
    }
    Ok(())
}
