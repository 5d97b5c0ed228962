//! End-to-end fit on one synthetic dataset with the log-linear outcome
//! model: chain, smoothing, and a comparison of the estimate against the
//! truth at a few exposure levels.

use erfmi::dgp::{generate, true_erf_closed_form, ScenarioConfig};
use erfmi::harness::{fit_method, FitMethodKind, HarnessConfig, McmcSettings, SmootherSettings};

fn main() -> Result<(), erfmi::Error> {
    let scenario = ScenarioConfig {
        n: 200,
        m: 1000,
        omega2: 1.0,
        tau2: 1.0,
        seed: 11,
        ..Default::default()
    };
    let cfg = HarnessConfig {
        scenario: scenario.clone(),
        mcmc: McmcSettings {
            burnin: 1000,
            samples: 1000,
            thin: 20,
            ..Default::default()
        },
        smoother: SmootherSettings {
            grid_points: 41,
            ..Default::default()
        },
        ..Default::default()
    };

    let g = generate(&scenario)?;
    let fit = fit_method(&g.dataset, FitMethodKind::MiGlm, &cfg, 5)?;
    let truth = true_erf_closed_form(&fit.erf.grid);

    if let Some(diag) = &fit.diagnostics {
        println!(
            "chain: {} retained draws, exposure acceptance {:?}",
            diag.retained, diag.accept_rate_a
        );
        for (name, s) in &diag.params {
            println!("  {name}: mean {:.4} [{:.4}, {:.4}]", s.mean, s.q025, s.q975);
        }
    }
    println!(
        "\n{:>6} {:>10} {:>10} {:>22}",
        "a", "estimate", "truth", "95% interval"
    );
    for k in (0..fit.erf.grid.len()).step_by(8) {
        println!(
            "{:>6.1} {:>10.4} {:>10.4}       [{:.4}, {:.4}]",
            fit.erf.grid[k],
            fit.erf.theta[k],
            truth.theta[k],
            fit.erf.ci_low[k],
            fit.erf.ci_high[k]
        );
    }
    Ok(())
}
