//! Generate a synthetic dataset and write it (with truth side files) to a
//! directory.
//!
//! ```text
//! cargo run --release --example simulate_dataset -- /tmp/erfmi-data
//! ```

use erfmi::data::aggregate_epe;
use erfmi::dgp::{generate, ScenarioConfig};
use erfmi::harness::{cmd_simulate, HarnessConfig};

fn main() -> Result<(), erfmi::Error> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "/tmp/erfmi-data".into());

    let scenario = ScenarioConfig {
        n: 200,
        m: 1000,
        omega2: 1.0,
        tau2: 1.0,
        seed: 42,
        ..Default::default()
    };

    // In-memory look at what the generator produces.
    let g = generate(&scenario)?;
    let ds = &g.dataset;
    let agg = aggregate_epe(ds);
    println!(
        "generated {} clusters / {} cells, {} validation cells",
        ds.n(),
        ds.m(),
        ds.validation_count()
    );
    let mean_a = g.a_true.iter().sum::<f64>() / ds.n() as f64;
    let mean_z = agg.z_tilde.iter().sum::<f64>() / ds.n() as f64;
    println!("mean true exposure {mean_a:.3}, mean aggregate prediction {mean_z:.3}");

    // The same scenario through the file-writing command.
    let cfg = HarnessConfig {
        scenario,
        ..Default::default()
    };
    cmd_simulate(&cfg, std::path::Path::new(&out), true)?;
    println!("wrote clusters.csv, cells.csv, truth_clusters.csv, truth_erf.csv to {out}");
    Ok(())
}
