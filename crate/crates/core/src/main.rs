use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use erfmi::harness::{
    cmd_evaluate, cmd_fit, cmd_replicate, cmd_simulate, cmd_truth, FitMethodKind, HarnessConfig,
};
use erfmi::Error;

/// Exposure-response estimation from error-prone exposure predictions.
#[derive(Parser)]
#[command(name = "erfmi", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with truth side files.
    Simulate {
        /// JSON configuration; defaults are used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
        /// Print the effective configuration and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Write the true exposure-response curve for the configured scenario.
    Truth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        print_config: bool,
    },
    /// Fit one method on a dataset directory (clusters.csv, cells.csv,
    /// optional adjacency.csv) and write erf.csv + diagnostics.json.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        method: FitMethodKind,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        print_config: bool,
    },
    /// Score replicate erf.csv files against a truth_erf.csv.
    Evaluate {
        #[arg(long)]
        truth: PathBuf,
        /// Where to write metrics.csv (stdout summary otherwise).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replicate erf.csv files.
        #[arg(required = true)]
        erf: Vec<PathBuf>,
    },
    /// Run scenarios x methods over many replicates and write table.csv.
    Replicate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        replicates: usize,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads for replicate-level parallelism.
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        print_config: bool,
    },
}

fn run() -> Result<(), Error> {
    match Cli::parse().cmd {
        Cmd::Simulate {
            config,
            out,
            seed,
            force,
            print_config,
        } => {
            let mut cfg = HarnessConfig::load(config.as_deref())?;
            if let Some(seed) = seed {
                cfg.scenario.seed = seed;
            }
            if print_config {
                println!("{}", cfg.to_json());
                return Ok(());
            }
            cfg.scenario.validate()?;
            cmd_simulate(&cfg, &out, force)?;
            eprintln!("wrote dataset and truth files to {}", out.display());
            Ok(())
        }
        Cmd::Truth {
            config,
            out,
            print_config,
        } => {
            let cfg = HarnessConfig::load(config.as_deref())?;
            if print_config {
                println!("{}", cfg.to_json());
                return Ok(());
            }
            cmd_truth(&cfg, &out)?;
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Cmd::Fit {
            data,
            method,
            config,
            out,
            seed,
            force,
            print_config,
        } => {
            let cfg = HarnessConfig::load(config.as_deref())?;
            if print_config {
                println!("{}", cfg.to_json());
                return Ok(());
            }
            let result = cmd_fit(&data, method, &cfg, seed, &out, force)?;
            if let Some(diag) = &result.diagnostics {
                for w in &diag.warnings {
                    eprintln!("warning: {w}");
                }
            }
            eprintln!(
                "fit {} (bandwidth {:.4}, {} imputation draw(s)); wrote {}",
                method.as_str(),
                result.erf.bandwidth,
                result.erf.n_imputations,
                out.display()
            );
            Ok(())
        }
        Cmd::Evaluate { truth, out, erf } => {
            let report = cmd_evaluate(&erf, &truth, out.as_deref())?;
            println!(
                "avg_rel_bias={:.4} point_rel_bias={:.4} rmse={:.5} coverage={:.3} point_coverage={:.3} (a={}, {} replicates)",
                report.avg_rel_bias,
                report.point_rel_bias,
                report.rmse,
                report.coverage,
                report.point_coverage,
                report.point_a,
                report.n_replicates
            );
            Ok(())
        }
        Cmd::Replicate {
            config,
            replicates,
            out,
            workers,
            force,
            print_config,
        } => {
            let cfg = HarnessConfig::load(config.as_deref())?;
            if print_config {
                println!("{}", cfg.to_json());
                return Ok(());
            }
            let output = cmd_replicate(&cfg, replicates, &out, workers, force)?;
            for row in &output.rows {
                println!(
                    "{} {}: avg_rel_bias={:.4} point_rel_bias={:.4} coverage={:.3} point_coverage={:.3} [{}/{} ok, {}]",
                    row.label,
                    row.method.as_str(),
                    row.avg_rel_bias,
                    row.point_rel_bias,
                    row.coverage,
                    row.point_coverage,
                    row.n_ok,
                    row.n_replicates,
                    row.status
                );
            }
            if !output.failures.is_empty() {
                eprintln!(
                    "{} replicate failure(s); see {}",
                    output.failures.len(),
                    out.join("failures.log").display()
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
