//! The two routes to the true exposure-response curve: Monte-Carlo
//! averaging over fresh covariate draws, and the closed form from the
//! lognormal moment identity (correct-specification generator only).

use erfmi::dgp::{true_erf, true_erf_closed_form};

fn main() -> Result<(), erfmi::Error> {
    let grid = [6.0, 8.0, 10.0, 11.0, 12.0, 14.0];
    let mc = true_erf(&grid, false, 1_000_000, 7)?;
    let cf = true_erf_closed_form(&grid);
    println!("{:>6} {:>12} {:>12} {:>10}", "a", "monte-carlo", "closed-form", "rel diff");
    for k in 0..grid.len() {
        println!(
            "{:>6} {:>12.6} {:>12.6} {:>9.4}%",
            grid[k],
            mc.theta[k],
            cf.theta[k],
            100.0 * (mc.theta[k] - cf.theta[k]) / cf.theta[k]
        );
    }
    Ok(())
}
