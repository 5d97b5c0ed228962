//! Conjugate updates for the Gaussian linear pieces of the model: the
//! prediction-calibration coefficients, the exposure-mean coefficients, and
//! the inverse-gamma variance draws.
//!
//! Both coefficient designs carry a leading intercept column: calibration
//! rows are `(1, s_tilde, w...)`, exposure rows are `(1, x...)`. Draws come
//! from the exact Gaussian full conditionals with ridge term
//! `noise_var / prior_var` on the normal equations.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Inverse-gamma shape/rate pair.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct IgPrior {
    pub shape: f64,
    pub rate: f64,
}

impl Default for IgPrior {
    fn default() -> Self {
        IgPrior {
            shape: 0.001,
            rate: 0.001,
        }
    }
}

/// Prior settings for all variance and coefficient blocks.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Priors {
    pub r_sigma: IgPrior,
    pub r_tau: IgPrior,
    pub r_omega: IgPrior,
    pub r_nu: IgPrior,
    pub r_psi: IgPrior,
    /// Gaussian prior variance for the calibration coefficients.
    pub b_alpha2: f64,
    /// Gaussian prior variance for the exposure-mean coefficients.
    pub b_beta2: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Priors {
            r_sigma: IgPrior::default(),
            r_tau: IgPrior::default(),
            r_omega: IgPrior::default(),
            r_nu: IgPrior::default(),
            r_psi: IgPrior::default(),
            b_alpha2: 1e6,
            b_beta2: 1e6,
        }
    }
}

impl Priors {
    pub fn validate(&self) -> Result<()> {
        let igs = [self.r_sigma, self.r_tau, self.r_omega, self.r_nu, self.r_psi];
        if igs.iter().any(|p| !(p.shape > 0.0 && p.rate > 0.0)) {
            return Err(Error::Config("priors: IG shapes and rates must be positive".into()));
        }
        if !(self.b_alpha2 > 0.0 && self.b_beta2 > 0.0) {
            return Err(Error::Config("priors: coefficient variances must be positive".into()));
        }
        Ok(())
    }
}

/// Draws from `N((XtX + ridge I)^-1 Xty, noise_var (XtX + ridge I)^-1)`.
///
/// `xtx` and `xty` are the accumulated normal equations. The ridge term is
/// `noise_var / prior_var`, which keeps the system positive definite for any
/// finite prior variance.
pub fn sample_gaussian_coefficients<R: Rng>(
    mut xtx: DMatrix<f64>,
    xty: DVector<f64>,
    noise_var: f64,
    prior_var: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let d = xtx.nrows();
    let ridge = noise_var / prior_var;
    for k in 0..d {
        xtx[(k, k)] += ridge;
    }
    let chol = Cholesky::new(xtx).ok_or_else(|| {
        Error::Numerical("coefficient update: normal equations not positive definite".into())
    })?;
    let mean = chol.solve(&xty);
    // x ~ N(0, M^-1) via solving L^T x = z.
    let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let noise = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::Numerical("coefficient update: singular factor".into()))?;
    Ok(mean + noise_var.sqrt() * noise)
}

/// Calibration design row `(1, s_tilde, w...)`.
pub fn calibration_row(s_tilde: f64, w: &[f64]) -> DVector<f64> {
    let mut row = DVector::zeros(2 + w.len());
    row[0] = 1.0;
    row[1] = s_tilde;
    for (k, v) in w.iter().enumerate() {
        row[2 + k] = *v;
    }
    row
}

/// Calibrated cell mean `(1, s_tilde, w...) . alpha`.
pub fn mu_s(alpha: &DVector<f64>, s_tilde: f64, w: &[f64]) -> f64 {
    let mut v = alpha[0] + alpha[1] * s_tilde;
    for (k, wv) in w.iter().enumerate() {
        v += alpha[2 + k] * wv;
    }
    v
}

/// Exposure-mean design row `(1, x...)`.
pub fn gps_row(x: &[f64]) -> DVector<f64> {
    let mut row = DVector::zeros(1 + x.len());
    row[0] = 1.0;
    for (k, v) in x.iter().enumerate() {
        row[1 + k] = *v;
    }
    row
}

/// Exposure mean without the spatial effect: `(1, x...) . beta`.
pub fn mu_a(beta: &DVector<f64>, x: &[f64]) -> f64 {
    let mut v = beta[0];
    for (k, xv) in x.iter().enumerate() {
        v += beta[1 + k] * xv;
    }
    v
}

/// Samples the calibration coefficients from their Gaussian full conditional
/// over the validation cells, given the current cell truths `s`.
pub fn sample_alpha<R: Rng>(
    ds: &Dataset,
    s: &[f64],
    tau2: f64,
    priors: &Priors,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let validation = ds.validation_cells();
    if validation.is_empty() {
        return Err(Error::Validation(
            "no validation data; disable calibration".into(),
        ));
    }
    let d = 2 + ds.q;
    let mut xtx = DMatrix::zeros(d, d);
    let mut xty = DVector::zeros(d);
    for &j in &validation {
        let cell = &ds.cells[j];
        let row = calibration_row(cell.s_tilde, &cell.w);
        xtx.syger(1.0, &row, &row, 1.0);
        xty.axpy(s[j], &row, 1.0);
    }
    symmetrize(&mut xtx);
    sample_gaussian_coefficients(xtx, xty, tau2, priors.b_alpha2, rng)
}

/// Samples the exposure-mean coefficients with response `a - phi`.
pub fn sample_beta_gps<R: Rng>(
    ds: &Dataset,
    a: &[f64],
    phi: &[f64],
    sigma2: f64,
    priors: &Priors,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let d = 1 + ds.p;
    let mut xtx = DMatrix::zeros(d, d);
    let mut xty = DVector::zeros(d);
    for (i, cl) in ds.clusters.iter().enumerate() {
        let row = gps_row(&cl.x);
        xtx.syger(1.0, &row, &row, 1.0);
        xty.axpy(a[i] - phi[i], &row, 1.0);
    }
    symmetrize(&mut xtx);
    sample_gaussian_coefficients(xtx, xty, sigma2, priors.b_beta2, rng)
}

// syger fills only the lower triangle.
fn symmetrize(m: &mut DMatrix<f64>) {
    let d = m.nrows();
    for r in 0..d {
        for c in (r + 1)..d {
            m[(r, c)] = m[(c, r)];
        }
    }
}

fn solve_ridged(mut xtx: DMatrix<f64>, xty: DVector<f64>) -> Result<DVector<f64>> {
    for k in 0..xtx.nrows() {
        xtx[(k, k)] += 1e-8;
    }
    Cholesky::new(xtx)
        .map(|ch| ch.solve(&xty))
        .ok_or_else(|| Error::Numerical("least-squares solve failed".into()))
}

/// Ordinary least squares of the observed cell truths on the calibration
/// design over the validation set.
pub fn ols_calibration(ds: &Dataset) -> Result<DVector<f64>> {
    let validation = ds.validation_cells();
    if validation.is_empty() {
        return Err(Error::Validation(
            "no validation data; disable calibration".into(),
        ));
    }
    let d = 2 + ds.q;
    let mut xtx = DMatrix::zeros(d, d);
    let mut xty = DVector::zeros(d);
    for &j in &validation {
        let c = &ds.cells[j];
        let row = calibration_row(c.s_tilde, &c.w);
        xtx.syger(1.0, &row, &row, 1.0);
        xty.axpy(c.s_observed.expect("validation cell"), &row, 1.0);
    }
    symmetrize(&mut xtx);
    solve_ridged(xtx, xty)
}

/// Ordinary least squares of the exposures on the `[1, x]` design.
pub fn ols_gps(ds: &Dataset, a: &[f64]) -> Result<DVector<f64>> {
    let d = 1 + ds.p;
    let mut xtx = DMatrix::zeros(d, d);
    let mut xty = DVector::zeros(d);
    for (i, cl) in ds.clusters.iter().enumerate() {
        let row = gps_row(&cl.x);
        xtx.syger(1.0, &row, &row, 1.0);
        xty.axpy(a[i], &row, 1.0);
    }
    symmetrize(&mut xtx);
    solve_ridged(xtx, xty)
}

/// Inverse-gamma draw with shape `prior.shape + count/2` and rate
/// `prior.rate + rss/2`.
pub fn sample_variance_ig<R: Rng>(prior: IgPrior, count: f64, rss: f64, rng: &mut R) -> f64 {
    let shape = prior.shape + 0.5 * count;
    let rate = prior.rate + 0.5 * rss;
    // 1/Gamma(shape, scale = 1/rate) is IG(shape, rate).
    let g = Gamma::new(shape, 1.0 / rate).expect("positive IG parameters");
    let draw: f64 = g.sample(rng);
    (1.0 / draw).max(1e-300)
}
