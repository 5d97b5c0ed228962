//! Desk-scale comparison of the four methods on one measurement-error
//! scenario: no correction, regression calibration, and the two
//! multiple-imputation variants.
//!
//! ```text
//! cargo run --release --example compare_methods -- [replicates] [n] [m] [omega2] [tau2]
//! ```

use erfmi::dgp::ScenarioConfig;
use erfmi::harness::{run_replicates, HarnessConfig, McmcSettings};

fn main() -> Result<(), erfmi::Error> {
    let mut args = std::env::args().skip(1);
    let replicates: usize = args.next().and_then(|v| v.parse().ok()).unwrap_or(4);
    let n: usize = args.next().and_then(|v| v.parse().ok()).unwrap_or(400);
    let m: usize = args.next().and_then(|v| v.parse().ok()).unwrap_or(2000);
    let omega2: f64 = args.next().and_then(|v| v.parse().ok()).unwrap_or(2.0);
    let tau2: f64 = args.next().and_then(|v| v.parse().ok()).unwrap_or(2.0);

    let cfg = HarnessConfig {
        scenario: ScenarioConfig {
            n,
            m,
            omega2,
            tau2,
            seed: 1,
            ..Default::default()
        },
        mcmc: McmcSettings {
            burnin: 2000,
            samples: 2000,
            thin: 20,
            ..Default::default()
        },
        ..Default::default()
    };

    eprintln!(
        "running {} replicates of n={n}, m={m}, omega2={omega2}, tau2={tau2} ...",
        replicates
    );
    let t0 = std::time::Instant::now();
    let out = run_replicates(&cfg, replicates)?;
    eprintln!("done in {:.1}s", t0.elapsed().as_secs_f64());

    println!(
        "{:>24} {:>13} {:>14} {:>9} {:>15}",
        "method", "avg rel bias", "bias at a=11", "coverage", "cover at a=11"
    );
    for row in &out.rows {
        println!(
            "{:>24} {:>13.3} {:>14.3} {:>9.3} {:>15.3}",
            row.method.as_str(),
            row.avg_rel_bias,
            row.point_rel_bias,
            row.coverage,
            row.point_coverage
        );
    }
    for f in &out.failures {
        eprintln!("failure: {f}");
    }
    Ok(())
}
