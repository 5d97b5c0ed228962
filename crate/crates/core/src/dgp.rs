//! Synthetic data generation for the simulation study, plus the true
//! exposure-response oracle used only for scoring.
//!
//! The generator draws, per cluster: four standard-normal covariates, a true
//! exposure around a linear covariate signal, per-cell true values with
//! classical error `omega2`, error-prone predictions with prediction error
//! `tau2`, a uniform person-time offset and a Poisson outcome count whose
//! log-mean combines a linear trend, a cosine bump and an
//! exposure-covariate interaction. Misspecification flags swap in
//! transformed covariates (GPS/outcome) or a biased prediction mean (EPE).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::data::{Adjacency, ClusterRecord, Dataset};
use crate::error::{Error, Result};

use serde::{Deserialize, Serialize};

/// One simulation scenario.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub n: usize,
    /// Nominal total cell count; selects the block distribution for the
    /// per-cluster cell counts (mean m/n). The realized total is the sum of
    /// the drawn counts.
    pub m: usize,
    pub sigma2: f64,
    pub omega2: f64,
    pub tau2: f64,
    pub misspec_gps: bool,
    pub misspec_outcome: bool,
    pub misspec_epe: bool,
    pub validation_fraction: f64,
    pub seed: u64,
    /// Explicit support for the per-cluster cell-count draw; required for
    /// (n, m) pairs outside the built-in ones.
    pub m_blocks: Option<Vec<usize>>,
    /// Optional label used in report tables.
    pub label: Option<String>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n: 400,
            m: 2000,
            sigma2: 4.0,
            omega2: 1.0,
            tau2: 1.0,
            misspec_gps: false,
            misspec_outcome: false,
            misspec_epe: false,
            validation_fraction: 0.1,
            seed: 1,
            m_blocks: None,
            label: None,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("scenario: n must be positive".into()));
        }
        if !(self.sigma2 >= 0.0 && self.omega2 >= 0.0 && self.tau2 >= 0.0) {
            return Err(Error::Config("scenario: variances must be nonnegative".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction <= 1.0) {
            return Err(Error::Config(
                "scenario: validation_fraction must lie in (0, 1]".into(),
            ));
        }
        self.blocks().map(|_| ())
    }

    /// Cell-count support. The built-in pairs use blocks with mean 5
    /// (m = 5n) or mean 10 (m = 10n).
    fn blocks(&self) -> Result<Vec<usize>> {
        if let Some(blocks) = &self.m_blocks {
            if blocks.is_empty() || blocks.contains(&0) {
                return Err(Error::Config("scenario: m_blocks must be positive".into()));
            }
            return Ok(blocks.clone());
        }
        let base: Vec<usize> = vec![1, 2, 3, 4, 6, 7, 8, 9];
        if self.m == 5 * self.n {
            Ok(base)
        } else if self.m == 10 * self.n {
            Ok(base.into_iter().map(|b| 2 * b).collect())
        } else {
            Err(Error::Config(format!(
                "scenario: unsupported (n, m) = ({}, {}); provide m_blocks",
                self.n, self.m
            )))
        }
    }
}

/// A generated dataset together with the latent truths, which are written to
/// side files for scoring and never consumed by the estimator.
#[derive(Debug, Clone)]
pub struct Generated {
    pub dataset: Dataset,
    pub a_true: Vec<f64>,
}

/// True exposure-response values on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueErf {
    pub grid: Vec<f64>,
    pub theta: Vec<f64>,
}

const GPS_COEF: [f64; 4] = [0.5, -0.5, -0.5, 0.5];
const OUTCOME_COEF: [f64; 4] = [-0.5, -0.25, 0.25, 0.5];

/// Transformed covariates before standardization.
fn transform_raw(x: &[f64; 4]) -> [f64; 4] {
    [
        (x[0] / 2.0).exp(),
        x[1] / (1.0 + x[0]) + 10.0,
        (x[0] * x[2] / 25.0 + 0.6).powi(3),
        (x[1] + x[3] + 10.0).powi(2),
    ]
}

/// Scales and centers each column to sample mean 0 and sample variance 1.
fn standardize_columns(cols: &mut [Vec<f64>]) {
    for col in cols {
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let sd = var.sqrt().max(f64::MIN_POSITIVE);
        for v in col.iter_mut() {
            *v = (*v - mean) / sd;
        }
    }
}

fn draw_normal<R: Rng>(rng: &mut R, mean: f64, var: f64) -> f64 {
    if var > 0.0 {
        Normal::new(mean, var.sqrt()).unwrap().sample(rng)
    } else {
        mean
    }
}

/// Log mean rate (offset excluded) of the outcome model at exposure `a` and
/// covariate row `x` (already transformed when the outcome is misspecified).
fn log_mean_rate(a: f64, x: &[f64]) -> f64 {
    let mut lp = -3.0 + 0.25 * (a - 8.0)
        - 0.75 * (std::f64::consts::PI * (a - 6.0) / 4.0).cos()
        - 0.25 * (a - 10.0) * x[0];
    for (c, v) in OUTCOME_COEF.iter().zip(x) {
        lp += c * v;
    }
    lp
}

/// Generates one synthetic dataset.
pub fn generate(cfg: &ScenarioConfig) -> Result<Generated> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n;
    let blocks = cfg.blocks()?;

    // Covariates, offsets and cell counts first so that the transformed
    // covariates can be standardized over the full batch.
    let mut x = vec![[0.0f64; 4]; n];
    let mut offsets = vec![0.0f64; n];
    let mut m_i = vec![0usize; n];
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    for i in 0..n {
        for k in 0..4 {
            x[i][k] = std_normal.sample(&mut rng);
        }
        offsets[i] = rng.random_range(10.0..1000.0);
        m_i[i] = blocks[rng.random_range(0..blocks.len())];
    }

    let mut x_tilde_cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); 4];
    for xi in &x {
        let t = transform_raw(xi);
        for k in 0..4 {
            x_tilde_cols[k].push(t[k]);
        }
    }
    standardize_columns(&mut x_tilde_cols);
    let x_tilde: Vec<[f64; 4]> = (0..n)
        .map(|i| [0, 1, 2, 3].map(|k| x_tilde_cols[k][i]))
        .collect();

    // True cluster exposures.
    let mut a_true = vec![0.0f64; n];
    for i in 0..n {
        let basis = if cfg.misspec_gps { &x_tilde[i] } else { &x[i] };
        let mean = 10.0 + GPS_COEF.iter().zip(basis).map(|(c, v)| c * v).sum::<f64>();
        a_true[i] = draw_normal(&mut rng, mean, cfg.sigma2);
    }

    // Cells: true value, features, prediction.
    struct RawCell {
        cluster: usize,
        s_true: f64,
        s_tilde: f64,
        w: [f64; 2],
    }
    let mut cells = Vec::with_capacity(m_i.iter().sum());
    for i in 0..n {
        for _ in 0..m_i[i] {
            let s_true = draw_normal(&mut rng, a_true[i], cfg.omega2);
            let w1 = draw_normal(&mut rng, 1.0, 2.0);
            let w2 = draw_normal(&mut rng, x[i][1], 1.0);
            let pred_mean = if cfg.misspec_epe {
                s_true - 1.0 + 0.5 * w1 + 0.5 * w2
            } else {
                s_true
            };
            let s_tilde = draw_normal(&mut rng, pred_mean, cfg.tau2);
            cells.push(RawCell {
                cluster: i,
                s_true,
                s_tilde,
                w: [w1, w2],
            });
        }
    }

    // Outcome counts.
    let mut y = vec![0u64; n];
    for i in 0..n {
        let basis: &[f64] = if cfg.misspec_outcome { &x_tilde[i] } else { &x[i] };
        let mu = offsets[i] * log_mean_rate(a_true[i], basis).exp();
        y[i] = Poisson::new(mu)
            .map_err(|e| Error::Numerical(format!("poisson mean {mu}: {e}")))?
            .sample(&mut rng) as u64;
    }

    // Validation subset: a fixed fraction of cells, drawn without
    // replacement via a partial shuffle.
    let m_total = cells.len();
    let n_val = ((cfg.validation_fraction * m_total as f64).round() as usize).clamp(1, m_total);
    let mut order: Vec<usize> = (0..m_total).collect();
    for k in 0..n_val {
        let j = rng.random_range(k..m_total);
        order.swap(k, j);
    }
    let mut observed = vec![false; m_total];
    for &j in &order[..n_val] {
        observed[j] = true;
    }

    let clusters: Vec<ClusterRecord> = (0..n)
        .map(|i| ClusterRecord {
            cluster_id: format!("c{:06}", i + 1),
            y: y[i],
            n_offset: offsets[i],
            x: x[i].to_vec(),
            cell_range: 0..0,
        })
        .collect();
    let cell_parts: Vec<(String, String, f64, Option<f64>, Vec<f64>)> = cells
        .iter()
        .enumerate()
        .map(|(j, c)| {
            (
                format!("g{:07}", j + 1),
                format!("c{:06}", c.cluster + 1),
                c.s_tilde,
                observed[j].then_some(c.s_true),
                c.w.to_vec(),
            )
        })
        .collect();
    let dataset = Dataset::from_parts(clusters, cell_parts, Some(Adjacency::empty(n)))?;
    Ok(Generated { dataset, a_true })
}

/// Monte-Carlo estimate of the true exposure-response curve
/// `theta(a) = E[exp(log mean rate)]` over fresh covariate draws.
///
/// When `misspec_outcome` is set, the covariates feeding the outcome mean are
/// the standardized transforms of the Monte-Carlo batch, matching the
/// generator.
pub fn true_erf(grid: &[f64], misspec_outcome: bool, mc_draws: usize, seed: u64) -> Result<TrueErf> {
    if grid.is_empty() {
        return Err(Error::Config("true_erf: empty grid".into()));
    }
    if mc_draws < 10_000 {
        return Err(Error::Config("true_erf: mc_draws must be at least 10^4".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut x = vec![[0.0f64; 4]; mc_draws];
    for xi in x.iter_mut() {
        for v in xi.iter_mut() {
            *v = std_normal.sample(&mut rng);
        }
    }
    let rows: Vec<[f64; 4]> = if misspec_outcome {
        let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(mc_draws); 4];
        for xi in &x {
            let t = transform_raw(xi);
            for k in 0..4 {
                cols[k].push(t[k]);
            }
        }
        standardize_columns(&mut cols);
        (0..mc_draws).map(|i| [0, 1, 2, 3].map(|k| cols[k][i])).collect()
    } else {
        x
    };

    // exp(base + interaction * x1) with the a-dependent part factored out.
    let theta = grid
        .iter()
        .map(|&a| {
            let shift = -3.0 + 0.25 * (a - 8.0)
                - 0.75 * (std::f64::consts::PI * (a - 6.0) / 4.0).cos();
            let interact = -0.25 * (a - 10.0);
            let mean = rows
                .iter()
                .map(|x| {
                    let mut lp = shift + interact * x[0];
                    for (c, v) in OUTCOME_COEF.iter().zip(x) {
                        lp += c * v;
                    }
                    lp.exp()
                })
                .sum::<f64>()
                / mc_draws as f64;
            mean
        })
        .collect();
    Ok(TrueErf {
        grid: grid.to_vec(),
        theta,
    })
}

/// Closed-form curve for the correctly specified generator, via the
/// lognormal moment identity applied to the four independent Gaussian
/// covariate terms.
pub fn true_erf_closed_form(grid: &[f64]) -> TrueErf {
    let theta = grid
        .iter()
        .map(|&a| {
            let shift = -3.0 + 0.25 * (a - 8.0)
                - 0.75 * (std::f64::consts::PI * (a - 6.0) / 4.0).cos();
            let t1 = OUTCOME_COEF[0] - 0.25 * (a - 10.0);
            let quad = t1.powi(2)
                + OUTCOME_COEF[1].powi(2)
                + OUTCOME_COEF[2].powi(2)
                + OUTCOME_COEF[3].powi(2);
            (shift + 0.5 * quad).exp()
        })
        .collect();
    TrueErf {
        grid: grid.to_vec(),
        theta,
    }
}

/// Default evaluation grid: `points` equally spaced values over [lo, hi].
pub fn equal_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![lo];
    }
    let step = (hi - lo) / (points - 1) as f64;
    (0..points).map(|k| lo + step * k as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::aggregate_epe;

    #[test]
    fn zero_variances_collapse_to_truth() {
        let cfg = ScenarioConfig {
            n: 50,
            m: 250,
            omega2: 0.0,
            tau2: 0.0,
            seed: 7,
            ..Default::default()
        };
        let g = generate(&cfg).unwrap();
        for cell in &g.dataset.cells {
            assert_eq!(cell.s_tilde, g.a_true[cell.cluster]);
            if let Some(s) = cell.s_observed {
                assert_eq!(s, cell.s_tilde);
            }
        }
        let agg = aggregate_epe(&g.dataset);
        for (z, a) in agg.z_tilde.iter().zip(&g.a_true) {
            assert!((z - a).abs() < 1e-12);
        }
    }

    #[test]
    fn exposure_mean_matches_generator() {
        // E[A] = 10 since the covariates are centered; 10^5 clusters keeps
        // the Monte-Carlo error within +/- 0.02 (about 3 standard errors).
        let cfg = ScenarioConfig {
            n: 100_000,
            m: 500_000,
            seed: 11,
            ..Default::default()
        };
        let g = generate(&cfg).unwrap();
        let mean = g.a_true.iter().sum::<f64>() / g.a_true.len() as f64;
        assert!((mean - 10.0).abs() < 0.02, "mean(A) = {mean}");
    }

    #[test]
    fn classical_error_variance_is_recovered() {
        let cfg = ScenarioConfig {
            n: 2000,
            m: 10_000,
            omega2: 1.0,
            tau2: 0.0,
            seed: 3,
            ..Default::default()
        };
        let g = generate(&cfg).unwrap();
        // With tau2 = 0 the predictions equal the true cell values.
        let var = g
            .dataset
            .cells
            .iter()
            .map(|c| (c.s_tilde - g.a_true[c.cluster]).powi(2))
            .sum::<f64>()
            / g.dataset.m() as f64;
        assert!((var - 1.0).abs() < 0.02, "var = {var}");
    }

    #[test]
    fn generation_is_bit_reproducible() {
        let cfg = ScenarioConfig {
            n: 30,
            m: 150,
            seed: 5,
            ..Default::default()
        };
        let g1 = generate(&cfg).unwrap();
        let g2 = generate(&cfg).unwrap();
        assert_eq!(g1.dataset, g2.dataset);
        assert_eq!(g1.a_true, g2.a_true);
    }

    #[test]
    fn transformed_covariates_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let std_normal = Normal::new(0.0, 1.0).unwrap();
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); 4];
        for _ in 0..5000 {
            let x = [0; 4].map(|_| std_normal.sample(&mut rng));
            let t = transform_raw(&x);
            for k in 0..4 {
                cols[k].push(t[k]);
            }
        }
        standardize_columns(&mut cols);
        for col in &cols {
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            assert!(mean.abs() < 0.05, "mean {mean}");
            assert!((var - 1.0).abs() < 0.05, "var {var}");
        }
    }

    #[test]
    fn closed_form_matches_hand_values() {
        let t = true_erf_closed_form(&[10.0, 11.0]);
        assert!((t.theta[0] - 0.2375).abs() < 5e-4, "{}", t.theta[0]);
        assert!((t.theta[1] - 0.2863).abs() < 5e-4, "{}", t.theta[1]);
    }

    #[test]
    fn monte_carlo_matches_closed_form() {
        let grid = [8.0, 10.0, 12.0];
        let mc = true_erf(&grid, false, 200_000, 9).unwrap();
        let cf = true_erf_closed_form(&grid);
        for (m, c) in mc.theta.iter().zip(&cf.theta) {
            assert!(
                (m - c).abs() / c < 0.01,
                "mc {m} vs closed form {c}"
            );
        }
    }

    #[test]
    fn monte_carlo_is_consistent_across_sizes() {
        // Small and large Monte-Carlo runs agree within 3 standard errors.
        let grid = [9.0];
        let small = true_erf(&grid, false, 10_000, 13).unwrap().theta[0];
        let large = true_erf(&grid, false, 1_000_000, 14).unwrap().theta[0];
        // The integrand has (lognormal) sd of roughly theta; be generous.
        let se = 3.0 * large / (10_000f64).sqrt();
        assert!((small - large).abs() < 3.0 * se, "{small} vs {large}");
    }

    #[test]
    fn unsupported_pair_requires_blocks() {
        let cfg = ScenarioConfig {
            n: 100,
            m: 333,
            ..Default::default()
        };
        assert!(generate(&cfg).is_err());
        let cfg = ScenarioConfig {
            m_blocks: Some(vec![3, 4]),
            ..cfg
        };
        assert!(generate(&cfg).is_ok());
    }

    #[test]
    fn validation_fraction_is_honored() {
        let cfg = ScenarioConfig {
            n: 400,
            m: 2000,
            seed: 21,
            ..Default::default()
        };
        let g = generate(&cfg).unwrap();
        let m = g.dataset.m() as f64;
        let frac = g.dataset.validation_count() as f64 / m;
        assert!((frac - 0.1).abs() < 0.002, "frac = {frac}");
    }
}
