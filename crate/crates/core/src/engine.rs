//! Chain orchestration: imputation stage then analysis stage each
//! iteration, burn-in, thinning to retained imputation draws, and
//! diagnostics.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bart::{BartHyper, BartOutcome};
use crate::car::CarModel;
use crate::data::{aggregate_epe, Dataset};
use crate::error::{Error, Result};
use crate::glm::{GlmBasis, GlmOutcome};
use crate::impute::{impute_cells, propose_accept_a, MhTuner};
use crate::linear::{mu_a, mu_s, sample_alpha, sample_beta_gps, sample_variance_ig, Priors};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Bart,
    Glm,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct McmcConfig {
    pub burnin: usize,
    /// Post-burn-in iterations.
    pub samples: usize,
    /// Keep every `thin`-th post-burn-in state.
    pub thin: usize,
    pub seed: u64,
    pub outcome_kind: OutcomeKind,
    pub car_enabled: bool,
    pub calibrate_enabled: bool,
    pub glm_basis: GlmBasis,
    pub glm_prior_var: f64,
    pub bart: BartHyper,
    /// Covariate columns of the counterfactual matrix; `None` keeps all n.
    pub cf_columns: Option<usize>,
    /// Store the exposure-density values needed by the doubly robust
    /// pseudo-outcome.
    pub store_gps_density: bool,
    pub tuner_window: usize,
    pub tuner_target: f64,
    /// Initial random-walk scale for the exposure updates; derived from the
    /// aggregate-prediction spread when absent.
    pub initial_delta: Option<f64>,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            burnin: 2000,
            samples: 2000,
            thin: 20,
            seed: 1,
            outcome_kind: OutcomeKind::Bart,
            car_enabled: true,
            calibrate_enabled: true,
            glm_basis: GlmBasis::Cosine,
            glm_prior_var: 1e6,
            bart: BartHyper::default(),
            cf_columns: None,
            store_gps_density: true,
            tuner_window: 50,
            tuner_target: 0.44,
            initial_delta: None,
        }
    }
}

impl McmcConfig {
    pub fn retained(&self) -> usize {
        self.samples / self.thin
    }

    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 || self.samples == 0 {
            return Err(Error::Config("mcmc: samples and thin must be positive".into()));
        }
        if self.samples % self.thin != 0 {
            return Err(Error::Config(format!(
                "mcmc: samples ({}) must be divisible by thin ({})",
                self.samples, self.thin
            )));
        }
        if !(self.glm_prior_var > 0.0) {
            return Err(Error::Config("mcmc: glm_prior_var must be positive".into()));
        }
        Ok(())
    }
}

/// Exposure-density values of one retained draw, for the doubly robust
/// pseudo-outcome: the density at the cluster's own covariates and its
/// covariate-marginalized value.
#[derive(Debug, Clone)]
pub struct GpsDensity {
    pub at_own: Vec<f64>,
    pub marginal: Vec<f64>,
}

/// One retained (thinned) draw.
#[derive(Debug, Clone)]
pub struct ImputationDraw {
    pub index: usize,
    pub a: Vec<f64>,
    /// Outcome-model prediction at each cluster's own exposure/covariates.
    pub fitted: Vec<f64>,
    /// `counterfactual[(i, c)] = mu(a_i, x_{cf_columns[c]})`.
    pub counterfactual: DMatrix<f64>,
    pub cf_columns: Vec<usize>,
    pub gps: Option<GpsDensity>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamSummary {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub n: usize,
    pub m: usize,
    pub burnin: usize,
    pub samples: usize,
    pub thin: usize,
    pub retained: usize,
    pub outcome_kind: OutcomeKind,
    pub degenerate_mode: bool,
    pub calibrated: bool,
    pub car_enabled: bool,
    /// Post-burn-in acceptance rate of the exposure updates.
    pub accept_rate_a: Option<f64>,
    pub accept_rate_rho: Option<f64>,
    pub accept_rate_gamma: Option<f64>,
    pub divergent_gamma: u64,
    pub params: BTreeMap<String, ParamSummary>,
    pub warnings: Vec<String>,
}

enum OutcomeState {
    Bart(BartOutcome),
    Glm(GlmOutcome),
}

impl OutcomeState {
    fn iterate(&mut self, ds: &Dataset, a: &[f64], rng: &mut ChaCha8Rng) -> Result<()> {
        match self {
            OutcomeState::Bart(b) => b.iterate(a, rng),
            OutcomeState::Glm(g) => g.iterate(ds, a, rng),
        }
    }

    fn loglik(&self, ds: &Dataset, i: usize, a: f64) -> f64 {
        let cl = &ds.clusters[i];
        match self {
            OutcomeState::Bart(b) => b.loglik(cl.ybar(), cl.n_offset, a, &cl.x),
            OutcomeState::Glm(g) => g.loglik(cl.y, cl.n_offset, a, &cl.x),
        }
    }

    fn predict_rate(&self, a: f64, x: &[f64]) -> f64 {
        match self {
            OutcomeState::Bart(b) => b.predict(a, x),
            OutcomeState::Glm(g) => g.predict(a, x),
        }
    }

    /// Outcome log density at the current exposure using cached fits where
    /// the model keeps them.
    fn loglik_current(&self, ds: &Dataset, i: usize, a_i: f64) -> f64 {
        let cl = &ds.clusters[i];
        match self {
            OutcomeState::Bart(b) => b.cached_loglik(i, cl.ybar(), cl.n_offset),
            OutcomeState::Glm(g) => g.loglik(cl.y, cl.n_offset, a_i, &cl.x),
        }
    }

    fn psi2(&self) -> Option<f64> {
        match self {
            OutcomeState::Bart(b) => Some(b.psi2_original()),
            OutcomeState::Glm(_) => None,
        }
    }
}

/// Evenly spaced counterfactual column choice.
pub fn counterfactual_columns(n: usize, requested: Option<usize>) -> Result<Vec<usize>> {
    match requested {
        None => Ok((0..n).collect()),
        Some(k) if k == 0 || k > n => Err(Error::Config(format!(
            "mcmc: cf_columns must lie in 1..={n}"
        ))),
        Some(k) => Ok((0..k).map(|j| j * n / k).collect()),
    }
}

/// Builds the counterfactual prediction matrix for the given draw.
fn build_counterfactual(
    outcome: &OutcomeState,
    ds: &Dataset,
    a: &[f64],
    cf_cols: &[usize],
) -> DMatrix<f64> {
    let n = a.len();
    match outcome {
        OutcomeState::Bart(b) => {
            let x_cols: Vec<&[f64]> = cf_cols
                .iter()
                .map(|&ci| ds.clusters[ci].x.as_slice())
                .collect();
            DMatrix::from_vec(n, cf_cols.len(), b.predict_grid(a, &x_cols))
        }
        OutcomeState::Glm(_) => {
            let mut data = vec![0.0f64; n * cf_cols.len()];
            data.par_chunks_mut(n)
                .zip(cf_cols.par_iter())
                .for_each(|(col, &ci)| {
                    let x = &ds.clusters[ci].x;
                    for (i, slot) in col.iter_mut().enumerate() {
                        *slot = outcome.predict_rate(a[i], x);
                    }
                });
            DMatrix::from_vec(n, cf_cols.len(), data)
        }
    }
}

fn gaussian_pdf(resid: f64, var: f64) -> f64 {
    (-resid * resid / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

fn gps_density(ds: &Dataset, a: &[f64], beta: &DVector<f64>, phi: &[f64], sigma2: f64) -> GpsDensity {
    let n = ds.n();
    let mu_fixed: Vec<f64> = ds.clusters.iter().map(|cl| mu_a(beta, &cl.x)).collect();
    let mut at_own = vec![0.0; n];
    let mut marginal = vec![0.0; n];
    for i in 0..n {
        at_own[i] = gaussian_pdf(a[i] - phi[i] - mu_fixed[i], sigma2);
        let mut acc = 0.0;
        for mf in &mu_fixed {
            acc += gaussian_pdf(a[i] - phi[i] - mf, sigma2);
        }
        marginal[i] = acc / n as f64;
    }
    GpsDensity { at_own, marginal }
}

/// Exact-zero measurement error: every cluster's predictions are constant
/// and all observed values coincide with them. The chain then pins the
/// exposures at the aggregate predictions.
fn detect_degenerate(ds: &Dataset) -> bool {
    for i in 0..ds.n() {
        let cells = ds.cells_of(i);
        let first = cells[0].s_tilde;
        for c in cells {
            if c.s_tilde != first {
                return false;
            }
            if let Some(obs) = c.s_observed {
                if obs != c.s_tilde {
                    return false;
                }
            }
        }
    }
    true
}

fn ols_residual_variance(resid: impl Iterator<Item = f64>, dof: f64) -> f64 {
    let rss: f64 = resid.map(|r| r * r).sum();
    (rss / dof.max(1.0)).max(1e-8)
}

struct Traces {
    values: BTreeMap<&'static str, Vec<f64>>,
}

impl Traces {
    fn new() -> Self {
        Traces {
            values: BTreeMap::new(),
        }
    }

    fn push(&mut self, key: &'static str, v: f64) {
        self.values.entry(key).or_default().push(v);
    }

    fn summaries(&self) -> BTreeMap<String, ParamSummary> {
        self.values
            .iter()
            .map(|(k, v)| {
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
                let mut sorted = v.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let q = |p: f64| sorted[((p * (sorted.len() - 1) as f64).round() as usize).min(sorted.len() - 1)];
                (
                    k.to_string(),
                    ParamSummary {
                        mean,
                        sd: var.sqrt(),
                        q025: q(0.025),
                        q975: q(0.975),
                    },
                )
            })
            .collect()
    }
}

/// Runs the chain, handing each retained draw to `sink` as soon as it is
/// built. [`run_chain`] collects them instead.
pub fn run_chain_with(
    ds: &Dataset,
    priors: &Priors,
    cfg: &McmcConfig,
    mut sink: impl FnMut(ImputationDraw) -> Result<()>,
) -> Result<Diagnostics> {
    cfg.validate()?;
    priors.validate()?;
    let n = ds.n();
    let m = ds.m();
    if n < 2 {
        return Err(Error::Validation("chain needs at least two clusters".into()));
    }
    let calibrate = cfg.calibrate_enabled;
    if calibrate && ds.validation_count() == 0 {
        return Err(Error::Validation(
            "no validation data; disable calibration".into(),
        ));
    }
    let cf_cols = counterfactual_columns(n, cfg.cf_columns)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let degenerate = detect_degenerate(ds);
    let agg = aggregate_epe(ds);
    let z_tilde = agg.z_tilde;

    // --- Initialization ---
    let mut a = z_tilde.clone();
    let mut s: Vec<f64> = ds
        .cells
        .iter()
        .map(|c| c.s_observed.unwrap_or(c.s_tilde))
        .collect();

    let mut alpha = if calibrate {
        Some(crate::linear::ols_calibration(ds)?)
    } else {
        None
    };
    let mut tau2 = match &alpha {
        Some(al) => {
            let validation = ds.validation_cells();
            ols_residual_variance(
                validation.iter().map(|&j| {
                    let c = &ds.cells[j];
                    s[j] - mu_s(al, c.s_tilde, &c.w)
                }),
                validation.len() as f64 - (2 + ds.q) as f64,
            )
        }
        None => 1.0,
    };

    let mut beta = crate::linear::ols_gps(ds, &a)?;
    let mut sigma2 = ols_residual_variance(
        (0..n).map(|i| a[i] - mu_a(&beta, &ds.clusters[i].x)),
        n as f64 - (1 + ds.p) as f64,
    );
    let mut omega2 = if degenerate {
        1e-12
    } else {
        ols_residual_variance(
            ds.cells.iter().enumerate().map(|(j, c)| s[j] - z_tilde[c.cluster]),
            m as f64,
        )
    };
    if degenerate {
        tau2 = tau2.min(1e-12);
    }

    let mut car = if cfg.car_enabled {
        CarModel::new(&ds.adjacency, n)
    } else {
        CarModel::disabled(n)
    };

    let x_rows: Vec<Vec<f64>> = ds.clusters.iter().map(|c| c.x.clone()).collect();
    let mut outcome = match cfg.outcome_kind {
        OutcomeKind::Bart => OutcomeState::Bart(BartOutcome::new(
            &x_rows,
            &a,
            &ds.ybar(),
            &ds.offsets(),
            cfg.bart,
        )?),
        OutcomeKind::Glm => OutcomeState::Glm(GlmOutcome::new(
            ds,
            &a,
            cfg.glm_basis,
            cfg.glm_prior_var,
        )?),
    };

    let spread = {
        let mean = z_tilde.iter().sum::<f64>() / n as f64;
        (z_tilde.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
    };
    let delta0 = cfg.initial_delta.unwrap_or((0.25 * spread).max(0.05));
    let mut tuner = MhTuner::new(n, delta0, cfg.tuner_target, cfg.tuner_window);

    let validation = ds.validation_cells();
    let mut traces = Traces::new();
    let total = cfg.burnin + cfg.samples;
    let mut retained = 0usize;

    // Per-cluster sufficient statistics of the current cell truths.
    let mut cell_count = vec![0.0f64; n];
    let mut cell_sum = vec![0.0f64; n];
    for (i, count) in cell_count.iter_mut().enumerate() {
        *count = ds.clusters[i].n_cells() as f64;
    }

    for k in 1..=total {
        // Imputation stage.
        if !degenerate {
            impute_cells(ds, &a, alpha.as_ref(), tau2, omega2, &mut s, &mut rng)?;
            for i in 0..n {
                let range = ds.clusters[i].cell_range.clone();
                cell_sum[i] = s[range].iter().sum();
            }
            for i in 0..n {
                let mu_a_i = car.phi[i] + mu_a(&beta, &ds.clusters[i].x);
                let (next, accepted) = propose_accept_a(
                    i,
                    a[i],
                    outcome.loglik_current(ds, i, a[i]),
                    |av| outcome.loglik(ds, i, av),
                    mu_a_i,
                    sigma2,
                    cell_count[i],
                    cell_sum[i],
                    omega2,
                    tuner.delta[i],
                    &mut rng,
                )
                .map_err(|e| Error::Numerical(format!("iteration {k}: {e}")))?;
                a[i] = next;
                tuner.record(i, accepted);
            }
            tuner.end_sweep();
        }

        // Analysis stage.
        if calibrate && !degenerate {
            let al = sample_alpha(ds, &s, tau2, priors, &mut rng)?;
            let rss: f64 = validation
                .iter()
                .map(|&j| {
                    let c = &ds.cells[j];
                    (s[j] - mu_s(&al, c.s_tilde, &c.w)).powi(2)
                })
                .sum();
            tau2 = sample_variance_ig(priors.r_tau, validation.len() as f64, rss, &mut rng);
            alpha = Some(al);
        }

        if car.enabled() {
            let resid: Vec<f64> = (0..n)
                .map(|i| a[i] - mu_a(&beta, &ds.clusters[i].x))
                .collect();
            car.sample_phi(&resid, sigma2, &mut rng);
        }
        beta = sample_beta_gps(ds, &a, &car.phi, sigma2, priors, &mut rng)?;
        let rss_a: f64 = (0..n)
            .map(|i| (a[i] - car.phi[i] - mu_a(&beta, &ds.clusters[i].x)).powi(2))
            .sum();
        sigma2 = sample_variance_ig(priors.r_sigma, n as f64, rss_a, &mut rng);

        if !degenerate {
            let rss_s: f64 = ds
                .cells
                .iter()
                .enumerate()
                .map(|(j, c)| (s[j] - a[c.cluster]).powi(2))
                .sum();
            omega2 = sample_variance_ig(priors.r_omega, m as f64, rss_s, &mut rng);
        }

        if car.enabled() {
            car.sample_nu2(priors, &mut rng);
            car.sample_rho(&mut rng);
        }

        outcome
            .iterate(ds, &a, &mut rng)
            .map_err(|e| Error::Numerical(format!("iteration {k}: {e}")))?;

        if k == cfg.burnin {
            tuner.freeze();
            car.freeze();
            if let OutcomeState::Glm(g) = &mut outcome {
                g.freeze();
            }
        }

        if k > cfg.burnin {
            traces.push("sigma2", sigma2);
            traces.push("omega2", omega2);
            if calibrate {
                traces.push("tau2", tau2);
            }
            if car.enabled() {
                traces.push("nu2", car.nu2);
                traces.push("rho", car.rho);
            }
            if let Some(psi2) = outcome.psi2() {
                traces.push("psi2", psi2);
            }

            if (k - cfg.burnin) % cfg.thin == 0 {
                retained += 1;
                let fitted: Vec<f64> = (0..n)
                    .map(|i| outcome.predict_rate(a[i], &ds.clusters[i].x))
                    .collect();
                let counterfactual = build_counterfactual(&outcome, ds, &a, &cf_cols);
                if cfg.cf_columns.is_none() {
                    for i in 0..n {
                        debug_assert!(
                            (counterfactual[(i, i)] - fitted[i]).abs() <= 1e-10,
                            "counterfactual diagonal mismatch at {i}"
                        );
                    }
                }
                let gps = cfg
                    .store_gps_density
                    .then(|| gps_density(ds, &a, &beta, &car.phi, sigma2));
                sink(ImputationDraw {
                    index: retained,
                    a: a.clone(),
                    fitted,
                    counterfactual,
                    cf_columns: cf_cols.clone(),
                    gps,
                })?;
            }
        }
    }

    let accept_rate_a = if degenerate { None } else { tuner.frozen_rate() };
    let mut warnings = Vec::new();
    if let Some(rate) = accept_rate_a {
        if !(0.1..=0.7).contains(&rate) {
            warnings.push(format!(
                "exposure-update acceptance rate {rate:.3} outside [0.1, 0.7]"
            ));
        }
    }
    let (accept_rate_gamma, divergent_gamma) = match &outcome {
        OutcomeState::Glm(g) => (g.acceptance(), g.divergent),
        _ => (None, 0),
    };

    Ok(Diagnostics {
        n,
        m,
        burnin: cfg.burnin,
        samples: cfg.samples,
        thin: cfg.thin,
        retained,
        outcome_kind: cfg.outcome_kind,
        degenerate_mode: degenerate,
        calibrated: calibrate,
        car_enabled: car.enabled(),
        accept_rate_a,
        accept_rate_rho: car.rho_acceptance(),
        accept_rate_gamma,
        divergent_gamma,
        params: traces.summaries(),
        warnings,
    })
}

/// Runs the chain and collects the retained draws.
pub fn run_chain(
    ds: &Dataset,
    priors: &Priors,
    cfg: &McmcConfig,
) -> Result<(Vec<ImputationDraw>, Diagnostics)> {
    let mut draws = Vec::with_capacity(cfg.retained());
    let diag = run_chain_with(ds, priors, cfg, |d| {
        draws.push(d);
        Ok(())
    })?;
    Ok((draws, diag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{generate, ScenarioConfig};

    fn small_scenario(omega2: f64, tau2: f64, seed: u64) -> Dataset {
        let cfg = ScenarioConfig {
            n: 60,
            m: 300,
            omega2,
            tau2,
            seed,
            ..Default::default()
        };
        generate(&cfg).unwrap().dataset
    }

    fn fast_cfg() -> McmcConfig {
        McmcConfig {
            burnin: 100,
            samples: 100,
            thin: 50,
            seed: 7,
            outcome_kind: OutcomeKind::Glm,
            ..Default::default()
        }
    }

    #[test]
    fn thinning_arithmetic_is_exact() {
        let ds = small_scenario(1.0, 1.0, 1);
        let (draws, diag) = run_chain(&ds, &Priors::default(), &fast_cfg()).unwrap();
        assert_eq!(draws.len(), 2);
        assert_eq!(diag.retained, 2);
        assert_eq!(draws[0].index, 1);
        assert_eq!(draws[1].index, 2);
    }

    #[test]
    fn zero_error_data_short_circuits_to_aggregates() {
        let ds = small_scenario(0.0, 0.0, 2);
        let (draws, diag) = run_chain(&ds, &Priors::default(), &fast_cfg()).unwrap();
        assert!(diag.degenerate_mode);
        let z = aggregate_epe(&ds).z_tilde;
        for d in &draws {
            assert_eq!(d.a, z);
        }
        assert!(diag.accept_rate_a.is_none());
    }

    #[test]
    fn chains_are_bit_reproducible() {
        let ds = small_scenario(1.0, 1.0, 3);
        let cfg = fast_cfg();
        let (d1, _) = run_chain(&ds, &Priors::default(), &cfg).unwrap();
        let (d2, _) = run_chain(&ds, &Priors::default(), &cfg).unwrap();
        for (a, b) in d1.iter().zip(&d2) {
            assert_eq!(a.a, b.a);
            assert_eq!(a.fitted, b.fitted);
            assert_eq!(a.counterfactual, b.counterfactual);
        }
    }

    #[test]
    fn counterfactual_diagonal_matches_fitted() {
        let ds = small_scenario(1.0, 1.0, 4);
        let (draws, _) = run_chain(&ds, &Priors::default(), &fast_cfg()).unwrap();
        for d in &draws {
            for i in 0..ds.n() {
                assert!((d.counterfactual[(i, i)] - d.fitted[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn calibration_without_validation_data_errors() {
        let mut ds = small_scenario(1.0, 1.0, 5);
        for c in &mut ds.cells {
            c.s_observed = None;
        }
        let err = run_chain(&ds, &Priors::default(), &fast_cfg()).unwrap_err();
        assert!(err.to_string().contains("no validation data"));
        // Substitute mode runs fine on the same data.
        let cfg = McmcConfig {
            calibrate_enabled: false,
            ..fast_cfg()
        };
        let (draws, diag) = run_chain(&ds, &Priors::default(), &cfg).unwrap();
        assert_eq!(draws.len(), 2);
        assert!(!diag.calibrated);
    }

    #[test]
    fn gps_density_is_stored_and_positive() {
        let ds = small_scenario(1.0, 1.0, 6);
        let (draws, _) = run_chain(&ds, &Priors::default(), &fast_cfg()).unwrap();
        for d in &draws {
            let gps = d.gps.as_ref().unwrap();
            assert!(gps.at_own.iter().all(|&v| v > 0.0));
            assert!(gps.marginal.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn cf_subsampling_bounds_columns() {
        let ds = small_scenario(1.0, 1.0, 8);
        let cfg = McmcConfig {
            cf_columns: Some(10),
            ..fast_cfg()
        };
        let (draws, _) = run_chain(&ds, &Priors::default(), &cfg).unwrap();
        assert_eq!(draws[0].counterfactual.ncols(), 10);
        assert_eq!(draws[0].cf_columns.len(), 10);
        assert!(counterfactual_columns(5, Some(9)).is_err());
    }

    #[test]
    fn invalid_thinning_is_rejected() {
        let ds = small_scenario(1.0, 1.0, 9);
        let cfg = McmcConfig {
            samples: 90,
            thin: 40,
            ..fast_cfg()
        };
        assert!(run_chain(&ds, &Priors::default(), &cfg).is_err());
    }
}
