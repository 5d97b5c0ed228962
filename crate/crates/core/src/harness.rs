//! Command-level plumbing behind the `erfmi` binary: structured run
//! configuration, the four fitting methods, truth files, metrics, and the
//! replication table.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bart::{BartHyper, BartOutcome};
use crate::data::{aggregate_epe, Dataset};
use crate::dgp::{equal_grid, generate, true_erf, true_erf_closed_form, ScenarioConfig, TrueErf};
use crate::engine::{
    counterfactual_columns, run_chain_with, Diagnostics, ImputationDraw, McmcConfig, OutcomeKind,
};
use crate::error::{Error, Result};
use crate::glm::{irls_poisson, GlmBasis};
use crate::linear::{mu_s, ols_calibration, Priors};
use crate::smoother::{
    Bandwidth, ErfAccumulator, ErfEstimate, MarginalWeighting, PseudoKind, SmootherConfig,
};

/// 64-bit mix used to derive independent seeds from (base, parts).
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = splitmix64(base ^ 0xa076_1d64_78bd_642f);
    for &p in parts {
        z = splitmix64(z ^ splitmix64(p));
    }
    z
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum FitMethodKind {
    /// Aggregate predictions used as the exposure, single imputation.
    NoCorrection,
    /// Least-squares calibrated aggregates, single imputation.
    RegressionCalibration,
    /// Full chain with the tree-ensemble outcome model.
    MiBart,
    /// Full chain with the log-linear outcome model.
    MiGlm,
}

impl FitMethodKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FitMethodKind::NoCorrection => "no_correction",
            FitMethodKind::RegressionCalibration => "regression_calibration",
            FitMethodKind::MiBart => "mi_bart",
            FitMethodKind::MiGlm => "mi_glm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthSetting {
    /// Sample-size rule: 0.4 below 600 clusters, 0.2 from 600 up.
    Auto,
    Cv,
    Fixed(f64),
}

impl Serialize for BandwidthSetting {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BandwidthSetting::Auto => s.serialize_str("auto"),
            BandwidthSetting::Cv => s.serialize_str("cv"),
            BandwidthSetting::Fixed(h) => s.serialize_f64(*h),
        }
    }
}

impl<'de> Deserialize<'de> for BandwidthSetting {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Word(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(h) => Ok(BandwidthSetting::Fixed(h)),
            Repr::Word(w) if w == "auto" => Ok(BandwidthSetting::Auto),
            Repr::Word(w) if w == "cv" => Ok(BandwidthSetting::Cv),
            Repr::Word(w) => Err(serde::de::Error::custom(format!(
                "bandwidth must be \"auto\", \"cv\" or a number, got \"{w}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SmootherSettings {
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_points: usize,
    pub bandwidth: BandwidthSetting,
    pub cv_folds: usize,
    pub cv_grid: Vec<f64>,
    pub pseudo: PseudoKind,
    pub marginal_weighting: MarginalWeighting,
}

impl Default for SmootherSettings {
    fn default() -> Self {
        SmootherSettings {
            grid_min: 6.0,
            grid_max: 14.0,
            grid_points: 201,
            bandwidth: BandwidthSetting::Auto,
            cv_folds: 5,
            cv_grid: vec![0.1, 0.15, 0.2, 0.3, 0.4, 0.6, 0.8, 1.2],
            pseudo: PseudoKind::Plain,
            marginal_weighting: MarginalWeighting::UniformMeasure,
        }
    }
}

impl SmootherSettings {
    pub fn grid(&self) -> Vec<f64> {
        equal_grid(self.grid_min, self.grid_max, self.grid_points)
    }

    pub fn resolve(&self, n: usize, cv_seed: u64) -> SmootherConfig {
        let bandwidth = match self.bandwidth {
            BandwidthSetting::Fixed(h) => Bandwidth::Fixed(h),
            BandwidthSetting::Cv => Bandwidth::Cv,
            BandwidthSetting::Auto => Bandwidth::Fixed(if n >= 600 { 0.2 } else { 0.4 }),
        };
        SmootherConfig {
            grid: self.grid(),
            bandwidth,
            cv_folds: self.cv_folds,
            cv_grid: self.cv_grid.clone(),
            cv_seed,
            pseudo_kind: self.pseudo,
            weighting: self.marginal_weighting,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct McmcSettings {
    pub burnin: usize,
    pub samples: usize,
    pub thin: usize,
    pub outcome: OutcomeKind,
    pub car: bool,
    pub calibrate: bool,
    pub glm_basis: GlmBasis,
    pub glm_prior_var: f64,
    pub bart: BartHyper,
    pub cf_columns: Option<usize>,
    pub tuner_window: usize,
    pub tuner_target: f64,
}

impl Default for McmcSettings {
    fn default() -> Self {
        McmcSettings {
            burnin: 2000,
            samples: 2000,
            thin: 20,
            outcome: OutcomeKind::Bart,
            car: true,
            calibrate: true,
            glm_basis: GlmBasis::Cosine,
            glm_prior_var: 1e6,
            bart: BartHyper::default(),
            cf_columns: None,
            tuner_window: 50,
            tuner_target: 0.44,
        }
    }
}

impl McmcSettings {
    fn to_engine(&self, outcome: OutcomeKind, seed: u64, store_gps: bool) -> McmcConfig {
        McmcConfig {
            burnin: self.burnin,
            samples: self.samples,
            thin: self.thin,
            seed,
            outcome_kind: outcome,
            car_enabled: self.car,
            calibrate_enabled: self.calibrate,
            glm_basis: self.glm_basis,
            glm_prior_var: self.glm_prior_var,
            bart: self.bart,
            cf_columns: self.cf_columns,
            store_gps_density: store_gps,
            tuner_window: self.tuner_window,
            tuner_target: self.tuner_target,
            initial_delta: None,
        }
    }
}

/// One structured configuration file drives every command; `scenarios` is
/// only consulted by `replicate` (falling back to the single `scenario`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    pub scenario: ScenarioConfig,
    pub scenarios: Vec<ScenarioConfig>,
    pub mcmc: McmcSettings,
    pub smoother: SmootherSettings,
    pub priors: Priors,
    pub methods: Vec<FitMethodKind>,
    pub truth_mc_draws: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            scenario: ScenarioConfig::default(),
            scenarios: Vec::new(),
            mcmc: McmcSettings::default(),
            smoother: SmootherSettings::default(),
            priors: Priors::default(),
            methods: vec![
                FitMethodKind::NoCorrection,
                FitMethodKind::RegressionCalibration,
                FitMethodKind::MiBart,
                FitMethodKind::MiGlm,
            ],
            truth_mc_draws: 1_000_000,
        }
    }
}

impl HarnessConfig {
    pub fn load(path: Option<&Path>) -> Result<HarnessConfig> {
        match path {
            None => Ok(HarnessConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Io { path: p.to_path_buf(), source: e })?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization")
    }

    pub fn replicate_scenarios(&self) -> Vec<ScenarioConfig> {
        if self.scenarios.is_empty() {
            vec![self.scenario.clone()]
        } else {
            self.scenarios.clone()
        }
    }

    /// Truth curve for a scenario on this configuration's grid: closed form
    /// under the correct outcome generator, Monte Carlo otherwise.
    pub fn truth_for(&self, scenario: &ScenarioConfig) -> Result<TrueErf> {
        let grid = self.smoother.grid();
        if scenario.misspec_outcome {
            true_erf(
                &grid,
                true,
                self.truth_mc_draws,
                derive_seed(scenario.seed, &[0x7275_7468]),
            )
        } else {
            Ok(true_erf_closed_form(&grid))
        }
    }
}

/// Fitted curve plus sampler diagnostics when a chain ran.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub method: FitMethodKind,
    pub seed: u64,
    pub erf: ErfEstimate,
    pub diagnostics: Option<Diagnostics>,
}

/// Least-squares calibrated aggregate exposures.
pub fn calibrated_aggregates(ds: &Dataset) -> Result<Vec<f64>> {
    if ds.validation_count() == 0 {
        return Err(Error::Validation(
            "regression calibration requires validation data".into(),
        ));
    }
    let alpha = ols_calibration(ds)?;
    Ok((0..ds.n())
        .map(|i| {
            let cells = ds.cells_of(i);
            cells
                .iter()
                .map(|c| mu_s(&alpha, c.s_tilde, &c.w))
                .sum::<f64>()
                / cells.len() as f64
        })
        .collect())
}

/// Fits one method on a loaded dataset.
pub fn fit_method(
    ds: &Dataset,
    method: FitMethodKind,
    cfg: &HarnessConfig,
    seed: u64,
) -> Result<FitResult> {
    let single = matches!(
        method,
        FitMethodKind::NoCorrection | FitMethodKind::RegressionCalibration
    );
    if single && cfg.smoother.pseudo == PseudoKind::DoublyRobust {
        return Err(Error::Config(
            "the doubly robust pseudo-outcome requires a multiple-imputation method".into(),
        ));
    }
    let smoother = cfg.smoother.resolve(ds.n(), derive_seed(seed, &[77]));
    let (erf, diagnostics) = match method {
        FitMethodKind::NoCorrection => {
            let a = aggregate_epe(ds).z_tilde;
            (single_imputation_fit(ds, &a, cfg, seed, &smoother)?, None)
        }
        FitMethodKind::RegressionCalibration => {
            let a = calibrated_aggregates(ds)?;
            (single_imputation_fit(ds, &a, cfg, seed, &smoother)?, None)
        }
        FitMethodKind::MiBart | FitMethodKind::MiGlm => {
            let outcome = if method == FitMethodKind::MiBart {
                OutcomeKind::Bart
            } else {
                OutcomeKind::Glm
            };
            let engine_cfg = cfg.mcmc.to_engine(outcome, seed, true);
            let mut acc = ErfAccumulator::new(ds, smoother)?;
            let diag = run_chain_with(ds, &cfg.priors, &engine_cfg, |draw| acc.add_draw(&draw))?;
            (acc.finish()?, Some(diag))
        }
    };
    Ok(FitResult {
        method,
        seed,
        erf,
        diagnostics,
    })
}

/// Single-imputation path: fit the configured outcome model at fixed
/// exposures and smooth the resulting pseudo-outcome with L = 1.
fn single_imputation_fit(
    ds: &Dataset,
    a_fixed: &[f64],
    cfg: &HarnessConfig,
    seed: u64,
    smoother: &SmootherConfig,
) -> Result<ErfEstimate> {
    let draw = match cfg.mcmc.outcome {
        OutcomeKind::Glm => single_imputation_draw_glm(ds, a_fixed, cfg)?,
        OutcomeKind::Bart => single_imputation_draw_bart(ds, a_fixed, cfg, seed)?,
    };
    let mut acc = ErfAccumulator::new(ds, smoother.clone())?;
    acc.add_draw(&draw)?;
    acc.finish()
}

/// Deterministic maximum-likelihood outcome fit; no sampling involved.
fn single_imputation_draw_glm(
    ds: &Dataset,
    a_fixed: &[f64],
    cfg: &HarnessConfig,
) -> Result<ImputationDraw> {
    let (gamma, _) = irls_poisson(ds, a_fixed, cfg.mcmc.glm_basis)?;
    let basis = cfg.mcmc.glm_basis;
    let cf_cols = counterfactual_columns(ds.n(), cfg.mcmc.cf_columns)?;
    let n = ds.n();
    let predict = |a: f64, x: &[f64]| basis.row(a, x).dot(&gamma).exp();
    let fitted: Vec<f64> = (0..n)
        .map(|i| predict(a_fixed[i], &ds.clusters[i].x))
        .collect();
    let mut data = vec![0.0; n * cf_cols.len()];
    for (c, &ci) in cf_cols.iter().enumerate() {
        let x = &ds.clusters[ci].x;
        for i in 0..n {
            data[c * n + i] = predict(a_fixed[i], x);
        }
    }
    Ok(ImputationDraw {
        index: 1,
        a: a_fixed.to_vec(),
        fitted,
        counterfactual: nalgebra::DMatrix::from_vec(n, cf_cols.len(), data),
        cf_columns: cf_cols,
        gps: None,
    })
}

/// Posterior-mean outcome fit: run the tree-ensemble sampler at fixed
/// exposures and average the retained draws' predictions.
fn single_imputation_draw_bart(
    ds: &Dataset,
    a_fixed: &[f64],
    cfg: &HarnessConfig,
    seed: u64,
) -> Result<ImputationDraw> {
    let mcmc = &cfg.mcmc;
    let n = ds.n();
    let cf_cols = counterfactual_columns(n, mcmc.cf_columns)?;
    let x_rows: Vec<Vec<f64>> = ds.clusters.iter().map(|c| c.x.clone()).collect();
    let mut model = BartOutcome::new(&x_rows, a_fixed, &ds.ybar(), &ds.offsets(), mcmc.bart)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut fitted_sum = vec![0.0; n];
    let mut cf_sum = vec![0.0; n * cf_cols.len()];
    let mut kept = 0usize;
    let total = mcmc.burnin + mcmc.samples;
    let x_cols: Vec<&[f64]> = cf_cols.iter().map(|&ci| ds.clusters[ci].x.as_slice()).collect();
    for k in 1..=total {
        model.iterate(a_fixed, &mut rng)?;
        if k > mcmc.burnin && (k - mcmc.burnin) % mcmc.thin == 0 {
            kept += 1;
            for i in 0..n {
                fitted_sum[i] += model.predict(a_fixed[i], &x_rows[i]);
            }
            let grid = model.predict_grid(a_fixed, &x_cols);
            for (acc, v) in cf_sum.iter_mut().zip(&grid) {
                *acc += v;
            }
        }
    }
    if kept == 0 {
        return Err(Error::Config("mcmc: no retained draws".into()));
    }
    let scale = 1.0 / kept as f64;
    let fitted: Vec<f64> = fitted_sum.into_iter().map(|v| v * scale).collect();
    let data: Vec<f64> = cf_sum.into_iter().map(|v| v * scale).collect();
    Ok(ImputationDraw {
        index: 1,
        a: a_fixed.to_vec(),
        fitted,
        counterfactual: nalgebra::DMatrix::from_vec(n, cf_cols.len(), data),
        cf_columns: cf_cols,
        gps: None,
    })
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    /// Mean over grid and replicates of (estimate - truth) / truth.
    pub avg_rel_bias: f64,
    /// Same at the single reporting point.
    pub point_rel_bias: f64,
    /// Per-gridpoint RMSE over replicates, averaged over the grid.
    pub rmse: f64,
    /// Fraction of replicate intervals covering the truth, averaged over
    /// the grid.
    pub coverage: f64,
    pub point_coverage: f64,
    pub point_a: f64,
    pub n_replicates: usize,
}

const REPORT_POINT: f64 = 11.0;

fn grids_align(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-9)
}

pub fn compute_metrics(estimates: &[&ErfEstimate], truth: &TrueErf) -> Result<MetricsReport> {
    if estimates.is_empty() {
        return Err(Error::Validation("no estimates to evaluate".into()));
    }
    for est in estimates {
        if !grids_align(&est.grid, &truth.grid) {
            return Err(Error::Validation(
                "estimate grid does not match the truth grid".into(),
            ));
        }
    }
    let g = truth.grid.len();
    let r = estimates.len();
    let point_idx = (0..g)
        .min_by(|&i, &j| {
            (truth.grid[i] - REPORT_POINT)
                .abs()
                .partial_cmp(&(truth.grid[j] - REPORT_POINT).abs())
                .unwrap()
        })
        .unwrap();

    let mut avg_rel_bias = 0.0;
    let mut point_rel_bias = 0.0;
    let mut rmse = 0.0;
    let mut coverage = 0.0;
    let mut point_coverage = 0.0;
    for k in 0..g {
        let th = truth.theta[k];
        let mut mse = 0.0;
        for est in estimates {
            let rel = (est.theta[k] - th) / th;
            avg_rel_bias += rel;
            mse += (est.theta[k] - th).powi(2);
            let covered = est.ci_low[k] <= th && th <= est.ci_high[k];
            coverage += covered as u8 as f64;
            if k == point_idx {
                point_rel_bias += rel;
                point_coverage += covered as u8 as f64;
            }
        }
        rmse += (mse / r as f64).sqrt();
    }
    Ok(MetricsReport {
        avg_rel_bias: avg_rel_bias / (g * r) as f64,
        point_rel_bias: point_rel_bias / r as f64,
        rmse: rmse / g as f64,
        coverage: coverage / (g * r) as f64,
        point_coverage: point_coverage / r as f64,
        point_a: truth.grid[point_idx],
        n_replicates: r,
    })
}

// ---------------------------------------------------------------------------
// Commands

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.to_path_buf(), source: e }
}

/// Creates `dir`, refusing to reuse a non-empty one without `force`.
pub fn ensure_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::Validation(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

pub fn write_truth_erf(truth: &TrueErf, path: &Path) -> Result<()> {
    let mut out = String::from("a,theta\n");
    for (a, t) in truth.grid.iter().zip(&truth.theta) {
        out.push_str(&format!("{a},{t}\n"));
    }
    write_text(path, &out)
}

pub fn read_truth_erf(path: &Path) -> Result<TrueErf> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    let mut lines = text.lines();
    if lines.next() != Some("a,theta") {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "expected header \"a,theta\"".into(),
        });
    }
    let mut grid = Vec::new();
    let mut theta = Vec::new();
    for (idx, line) in lines.enumerate() {
        let mut it = line.split(',');
        let parse = |s: Option<&str>| -> Result<f64> {
            s.and_then(|v| v.parse().ok()).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: idx as u64 + 2,
                message: "bad row".into(),
            })
        };
        grid.push(parse(it.next())?);
        theta.push(parse(it.next())?);
    }
    Ok(TrueErf { grid, theta })
}

/// Generates one dataset and writes it with its truth side files.
pub fn cmd_simulate(cfg: &HarnessConfig, out_dir: &Path, force: bool) -> Result<()> {
    ensure_out_dir(out_dir, force)?;
    let generated = generate(&cfg.scenario)?;
    generated.dataset.write_csv(out_dir)?;

    let mut truth_clusters = String::from("cluster_id,a_true\n");
    for (cl, a) in generated.dataset.clusters.iter().zip(&generated.a_true) {
        truth_clusters.push_str(&format!("{},{}\n", cl.cluster_id, a));
    }
    write_text(&out_dir.join("truth_clusters.csv"), &truth_clusters)?;
    write_truth_erf(&cfg.truth_for(&cfg.scenario)?, &out_dir.join("truth_erf.csv"))?;
    write_text(&out_dir.join("config.json"), &cfg.to_json())?;
    Ok(())
}

/// Writes the true curve alone.
pub fn cmd_truth(cfg: &HarnessConfig, out: &Path) -> Result<()> {
    write_truth_erf(&cfg.truth_for(&cfg.scenario)?, out)
}

/// Loads a dataset directory (adjacency optional), fits one method and
/// writes `erf.csv` + `diagnostics.json`. The truth side files are never
/// read here.
pub fn cmd_fit(
    data_dir: &Path,
    method: FitMethodKind,
    cfg: &HarnessConfig,
    seed: Option<u64>,
    out_dir: &Path,
    force: bool,
) -> Result<FitResult> {
    let adjacency = data_dir.join("adjacency.csv");
    let ds = Dataset::load(
        &data_dir.join("clusters.csv"),
        &data_dir.join("cells.csv"),
        adjacency.exists().then_some(adjacency.as_path()),
    )?;
    let seed = seed.unwrap_or(cfg.scenario.seed);
    let result = fit_method(&ds, method, cfg, seed)?;
    ensure_out_dir(out_dir, force)?;
    result.erf.write_csv(&out_dir.join("erf.csv"))?;

    #[derive(Serialize)]
    struct FitSummary<'a> {
        method: &'static str,
        seed: u64,
        bandwidth: f64,
        n_imputations: usize,
        engine: &'a Option<Diagnostics>,
    }
    let summary = FitSummary {
        method: result.method.as_str(),
        seed,
        bandwidth: result.erf.bandwidth,
        n_imputations: result.erf.n_imputations,
        engine: &result.diagnostics,
    };
    write_text(
        &out_dir.join("diagnostics.json"),
        &serde_json::to_string_pretty(&summary).expect("diagnostics serialization"),
    )?;
    Ok(result)
}

/// Scores replicate curve files against a truth file.
pub fn cmd_evaluate(
    erf_paths: &[PathBuf],
    truth_path: &Path,
    out: Option<&Path>,
) -> Result<MetricsReport> {
    let truth = read_truth_erf(truth_path)?;
    let estimates: Vec<ErfEstimate> = erf_paths
        .iter()
        .map(|p| ErfEstimate::read_csv(p))
        .collect::<Result<_>>()?;
    let refs: Vec<&ErfEstimate> = estimates.iter().collect();
    let report = compute_metrics(&refs, &truth)?;
    if let Some(path) = out {
        write_metrics_csv(std::slice::from_ref(&report), &["all"], path)?;
    }
    Ok(report)
}

fn write_metrics_csv(reports: &[MetricsReport], labels: &[&str], path: &Path) -> Result<()> {
    let mut out = String::from(
        "label,avg_rel_bias,point_rel_bias,rmse,coverage,point_coverage,point_a,n_replicates\n",
    );
    for (r, l) in reports.iter().zip(labels) {
        out.push_str(&format!(
            "{l},{},{},{},{},{},{},{}\n",
            r.avg_rel_bias,
            r.point_rel_bias,
            r.rmse,
            r.coverage,
            r.point_coverage,
            r.point_a,
            r.n_replicates
        ));
    }
    write_text(path, &out)
}

#[derive(Debug, Clone, Serialize)]
pub struct TableRow {
    pub label: String,
    pub n: usize,
    pub m: usize,
    pub omega2: f64,
    pub tau2: f64,
    pub misspec_gps: bool,
    pub misspec_outcome: bool,
    pub misspec_epe: bool,
    pub method: FitMethodKind,
    pub avg_rel_bias: f64,
    pub point_rel_bias: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub point_coverage: f64,
    pub n_ok: usize,
    pub n_replicates: usize,
    pub status: String,
}

pub struct ReplicateOutput {
    pub rows: Vec<TableRow>,
    pub failures: Vec<String>,
}

/// Runs every scenario x method over `replicates` independent datasets and
/// aggregates the scoring table. Replicates run in parallel; each derives
/// its own seeds, so results do not depend on scheduling.
pub fn run_replicates(cfg: &HarnessConfig, replicates: usize) -> Result<ReplicateOutput> {
    if replicates == 0 {
        return Err(Error::Config("replicate: need at least one replicate".into()));
    }
    let methods = &cfg.methods;
    if methods.is_empty() {
        return Err(Error::Config("replicate: no methods configured".into()));
    }
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for scenario in cfg.replicate_scenarios() {
        scenario.validate()?;
        let truth = cfg.truth_for(&scenario)?;
        let label = scenario
            .label
            .clone()
            .unwrap_or_else(|| format!("n{}_m{}_w{}_t{}", scenario.n, scenario.m, scenario.omega2, scenario.tau2));

        type RepResult = Vec<std::result::Result<ErfEstimate, String>>;
        let results: Vec<RepResult> = (0..replicates)
            .into_par_iter()
            .map(|rep| {
                let mut sc = scenario.clone();
                sc.seed = derive_seed(scenario.seed, &[rep as u64 + 1]);
                let generated = match generate(&sc) {
                    Ok(g) => g,
                    Err(e) => return vec![Err(format!("replicate {rep}: {e}")); methods.len()],
                };
                methods
                    .iter()
                    .enumerate()
                    .map(|(mi, &method)| {
                        let seed = derive_seed(scenario.seed, &[rep as u64 + 1, 1000 + mi as u64]);
                        fit_method(&generated.dataset, method, cfg, seed)
                            .map(|r| r.erf)
                            .map_err(|e| format!("replicate {rep} {}: {e}", method.as_str()))
                    })
                    .collect()
            })
            .collect();

        for (mi, &method) in methods.iter().enumerate() {
            let mut ok = Vec::new();
            for rep in &results {
                match &rep[mi] {
                    Ok(est) => ok.push(est),
                    Err(e) => failures.push(format!("{label}: {e}")),
                }
            }
            let n_ok = ok.len();
            let metrics = if n_ok > 0 {
                compute_metrics(&ok, &truth)?
            } else {
                MetricsReport {
                    avg_rel_bias: f64::NAN,
                    point_rel_bias: f64::NAN,
                    rmse: f64::NAN,
                    coverage: f64::NAN,
                    point_coverage: f64::NAN,
                    point_a: REPORT_POINT,
                    n_replicates: 0,
                }
            };
            let status = if n_ok * 10 >= replicates * 9 { "ok" } else { "incomplete" };
            rows.push(TableRow {
                label: label.clone(),
                n: scenario.n,
                m: scenario.m,
                omega2: scenario.omega2,
                tau2: scenario.tau2,
                misspec_gps: scenario.misspec_gps,
                misspec_outcome: scenario.misspec_outcome,
                misspec_epe: scenario.misspec_epe,
                method,
                avg_rel_bias: metrics.avg_rel_bias,
                point_rel_bias: metrics.point_rel_bias,
                rmse: metrics.rmse,
                coverage: metrics.coverage,
                point_coverage: metrics.point_coverage,
                n_ok,
                n_replicates: replicates,
                status: status.into(),
            });
        }
    }
    Ok(ReplicateOutput { rows, failures })
}

/// `replicate` command: runs the study and writes `table.csv` (and
/// `failures.log` when something failed).
pub fn cmd_replicate(
    cfg: &HarnessConfig,
    replicates: usize,
    out_dir: &Path,
    workers: Option<usize>,
    force: bool,
) -> Result<ReplicateOutput> {
    ensure_out_dir(out_dir, force)?;
    let output = match workers {
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w.max(1))
                .build()
                .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
            pool.install(|| run_replicates(cfg, replicates))?
        }
        None => run_replicates(cfg, replicates)?,
    };
    write_table_csv(&output.rows, &out_dir.join("table.csv"))?;
    if !output.failures.is_empty() {
        write_text(&out_dir.join("failures.log"), &output.failures.join("\n"))?;
    }
    write_text(&out_dir.join("config.json"), &cfg.to_json())?;
    Ok(output)
}

pub fn write_table_csv(rows: &[TableRow], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = std::io::BufWriter::new(file);
    writeln!(
        out,
        "label,n,m,omega2,tau2,misspec_gps,misspec_outcome,misspec_epe,method,\
         avg_rel_bias,point_rel_bias,rmse,coverage,point_coverage,n_ok,n_replicates,status"
    )
    .map_err(io_err(path))?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.label,
            r.n,
            r.m,
            r.omega2,
            r.tau2,
            r.misspec_gps,
            r.misspec_outcome,
            r.misspec_epe,
            r.method.as_str(),
            r.avg_rel_bias,
            r.point_rel_bias,
            r.rmse,
            r.coverage,
            r.point_coverage,
            r.n_ok,
            r.n_replicates,
            r.status
        )
        .map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))?;
    Ok(())
}
