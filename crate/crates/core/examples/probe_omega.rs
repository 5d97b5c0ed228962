//! Temporary probe: posterior mean of the variance components across
//! seeds and designs.

use erfmi::dgp::{generate, ScenarioConfig};
use erfmi::engine::{run_chain, McmcConfig, OutcomeKind};
use erfmi::linear::Priors;

fn main() -> Result<(), erfmi::Error> {
    for (n, m, vf, seed) in [
        (400usize, 2000usize, 0.1f64, 909u64),
        (400, 2000, 0.1, 910),
        (400, 2000, 0.1, 911),
        (400, 4000, 0.1, 912),
        (400, 2000, 0.5, 913),
        (400, 2000, 0.9, 914),
    ] {
        let sc = ScenarioConfig {
            n,
            m,
            omega2: 1.0,
            tau2: 1.0,
            validation_fraction: vf,
            seed,
            ..Default::default()
        };
        let g = generate(&sc)?;
        let cfg = McmcConfig {
            burnin: 1500,
            samples: 1500,
            thin: 50,
            seed: seed + 1,
            outcome_kind: OutcomeKind::Glm,
            ..Default::default()
        };
        let (_, diag) = run_chain(&g.dataset, &Priors::default(), &cfg)?;
        let o = &diag.params["omega2"];
        let t = &diag.params["tau2"];
        println!(
            "n={n} m={m} vf={vf} seed={seed}: omega2 {:.3} [{:.3},{:.3}]  tau2 {:.3} [{:.3},{:.3}]",
            o.mean, o.q025, o.q975, t.mean, t.q025, t.q975
        );
    }
    Ok(())
}
