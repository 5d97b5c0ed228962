//! Log-linear Poisson outcome model with offset, sampled by adaptive joint
//! random-walk Metropolis, plus a deterministic maximum-likelihood fit used
//! by the single-imputation paths.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Linear predictor basis for the rate scale (offset excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlmBasis {
    /// `[1, a-10, cos(pi (a-6)/4), (a-10) x1, x...]` — a centered trend, a
    /// cosine bump and an exposure interaction with the first covariate.
    Cosine,
    /// `[1, a, x...]`.
    Linear,
}

impl GlmBasis {
    pub fn dim(&self, p: usize) -> usize {
        match self {
            GlmBasis::Cosine => 4 + p,
            GlmBasis::Linear => 2 + p,
        }
    }

    pub fn fill_row(&self, a: f64, x: &[f64], out: &mut [f64]) {
        match self {
            GlmBasis::Cosine => {
                out[0] = 1.0;
                out[1] = a - 10.0;
                out[2] = (std::f64::consts::PI * (a - 6.0) / 4.0).cos();
                out[3] = (a - 10.0) * x[0];
                out[4..4 + x.len()].copy_from_slice(x);
            }
            GlmBasis::Linear => {
                out[0] = 1.0;
                out[1] = a;
                out[2..2 + x.len()].copy_from_slice(x);
            }
        }
    }

    pub fn row(&self, a: f64, x: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim(x.len()));
        self.fill_row(a, x, out.as_mut_slice());
        out
    }
}

/// Poisson log-mass at `y` with mean `mu`.
pub fn poisson_log_pmf(y: u64, mu: f64) -> f64 {
    if mu <= 0.0 {
        return f64::NEG_INFINITY;
    }
    y as f64 * mu.ln() - mu - ln_gamma(y as f64 + 1.0)
}

/// Number of Metropolis sub-steps per Gibbs iteration; a joint random walk
/// in ~8 dimensions needs a few moves per outer iteration to mix.
const SUBSTEPS: usize = 5;

#[derive(Debug, Clone)]
pub struct GlmOutcome {
    pub basis: GlmBasis,
    pub gamma: DVector<f64>,
    pub prior_var: f64,
    /// Cholesky factor of the scaled proposal covariance.
    proposal: DMatrix<f64>,
    // Running moments of the chain, used to adapt the proposal.
    adapt_n: f64,
    adapt_mean: DVector<f64>,
    adapt_m2: DMatrix<f64>,
    pub frozen: bool,
    pub accepts: u64,
    pub proposals: u64,
    pub divergent: u64,
}

impl GlmOutcome {
    /// Initializes at the maximum-likelihood fit, with the observed
    /// information shaping the initial proposal.
    pub fn new(ds: &Dataset, a: &[f64], basis: GlmBasis, prior_var: f64) -> Result<Self> {
        if matches!(basis, GlmBasis::Cosine) && ds.p == 0 {
            return Err(Error::Config(
                "the cosine outcome basis requires at least one covariate".into(),
            ));
        }
        let d = basis.dim(ds.p);
        let (gamma, info) = irls_poisson(ds, a, basis)?;
        let scale = 2.38f64.powi(2) / d as f64;
        let proposal = proposal_factor(&(info_to_cov(&info, d)? * scale), d)?;
        Ok(GlmOutcome {
            basis,
            gamma,
            prior_var,
            proposal,
            adapt_n: 0.0,
            adapt_mean: DVector::zeros(d),
            adapt_m2: DMatrix::zeros(d, d),
            frozen: false,
            accepts: 0,
            proposals: 0,
            divergent: 0,
        })
    }

    /// Joint Poisson log likelihood of `gamma` (gamma-dependent terms only).
    fn log_kernel(&self, ds: &Dataset, rows: &DMatrix<f64>, gamma: &DVector<f64>) -> f64 {
        let eta = rows * gamma;
        let mut ll = 0.0;
        for (i, cl) in ds.clusters.iter().enumerate() {
            let e = eta[i];
            if e.abs() > 700.0 {
                return f64::NEG_INFINITY;
            }
            ll += cl.y as f64 * e - cl.n_offset * e.exp();
        }
        // Gaussian prior on each coefficient.
        ll - gamma.norm_squared() / (2.0 * self.prior_var)
    }

    fn basis_matrix(&self, ds: &Dataset, a: &[f64]) -> DMatrix<f64> {
        let d = self.basis.dim(ds.p);
        let mut rows = DMatrix::zeros(ds.n(), d);
        let mut buf = vec![0.0; d];
        for (i, cl) in ds.clusters.iter().enumerate() {
            self.basis.fill_row(a[i], &cl.x, &mut buf);
            for (k, v) in buf.iter().enumerate() {
                rows[(i, k)] = *v;
            }
        }
        rows
    }

    /// One Gibbs iteration: a few adaptive random-walk Metropolis sub-steps
    /// on the full coefficient vector.
    pub fn iterate<R: Rng>(&mut self, ds: &Dataset, a: &[f64], rng: &mut R) -> Result<()> {
        let d = self.gamma.len();
        let rows = self.basis_matrix(ds, a);
        let mut ll_cur = self.log_kernel(ds, &rows, &self.gamma);
        if ll_cur == f64::NEG_INFINITY {
            return Err(Error::Numerical(
                "outcome coefficients diverged: linear predictor out of range".into(),
            ));
        }
        for _ in 0..SUBSTEPS {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let prop = &self.gamma + &self.proposal * z;
            let ll_prop = self.log_kernel(ds, &rows, &prop);
            self.proposals += 1;
            if ll_prop == f64::NEG_INFINITY {
                self.divergent += 1;
            } else if rng.random::<f64>().ln() < ll_prop - ll_cur {
                self.gamma = prop;
                ll_cur = ll_prop;
                self.accepts += 1;
            }
        }
        if !self.frozen {
            self.update_adaptation();
        }
        Ok(())
    }

    fn update_adaptation(&mut self) {
        let d = self.gamma.len();
        self.adapt_n += 1.0;
        let delta = &self.gamma - &self.adapt_mean;
        self.adapt_mean += &delta / self.adapt_n;
        let delta2 = &self.gamma - &self.adapt_mean;
        self.adapt_m2 += delta * delta2.transpose();
        // Refresh the proposal once enough history exists.
        if self.adapt_n >= (10 * d) as f64 {
            let scale = 2.38f64.powi(2) / d as f64;
            let cov = &self.adapt_m2 / (self.adapt_n - 1.0) * scale;
            if let Ok(factor) = proposal_factor(&cov, d) {
                self.proposal = factor;
            }
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.accepts = 0;
        self.proposals = 0;
    }

    pub fn acceptance(&self) -> Option<f64> {
        (self.proposals > 0).then(|| self.accepts as f64 / self.proposals as f64)
    }

    /// Poisson log-mass of the observed count at exposure `a`.
    pub fn loglik(&self, y: u64, n_offset: f64, a: f64, x: &[f64]) -> f64 {
        let eta = self.basis.row(a, x).dot(&self.gamma);
        if eta.abs() > 700.0 {
            return f64::NEG_INFINITY;
        }
        poisson_log_pmf(y, n_offset * eta.exp())
    }

    /// Rate-scale prediction (offset excluded).
    pub fn predict(&self, a: f64, x: &[f64]) -> f64 {
        self.basis.row(a, x).dot(&self.gamma).exp()
    }
}

fn info_to_cov(info: &DMatrix<f64>, d: usize) -> Result<DMatrix<f64>> {
    let mut m = info.clone();
    for k in 0..d {
        m[(k, k)] += 1e-10;
    }
    m.try_inverse()
        .ok_or_else(|| Error::Numerical("singular information matrix".into()))
}

fn proposal_factor(cov: &DMatrix<f64>, d: usize) -> Result<DMatrix<f64>> {
    let mut c = cov.clone();
    for k in 0..d {
        c[(k, k)] += 1e-8;
    }
    Cholesky::new(c)
        .map(|ch| ch.l())
        .ok_or_else(|| Error::Numerical("proposal covariance not positive definite".into()))
}

/// Deterministic Poisson maximum-likelihood fit by iteratively reweighted
/// least squares. Returns the coefficients and the observed information.
pub fn irls_poisson(
    ds: &Dataset,
    a: &[f64],
    basis: GlmBasis,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = basis.dim(ds.p);
    let n = ds.n();
    let mut rows = DMatrix::zeros(n, d);
    let mut buf = vec![0.0; d];
    for (i, cl) in ds.clusters.iter().enumerate() {
        basis.fill_row(a[i], &cl.x, &mut buf);
        for (k, v) in buf.iter().enumerate() {
            rows[(i, k)] = *v;
        }
    }
    let y: Vec<f64> = ds.clusters.iter().map(|c| c.y as f64).collect();
    let offs: Vec<f64> = ds.clusters.iter().map(|c| c.n_offset).collect();

    let total_y: f64 = y.iter().sum();
    let total_n: f64 = offs.iter().sum();
    let mut gamma = DVector::zeros(d);
    gamma[0] = (total_y.max(0.5) / total_n).ln();

    let mut info = DMatrix::zeros(d, d);
    for _ in 0..100 {
        let eta = &rows * &gamma;
        let mut xtwx = DMatrix::zeros(d, d);
        let mut xtwz = DVector::zeros(d);
        for i in 0..n {
            let e = eta[i].clamp(-30.0, 30.0);
            let mu = offs[i] * e.exp();
            let w = mu;
            let z = e + (y[i] - mu) / mu;
            let row = rows.row(i).transpose();
            xtwx.syger(w, &row, &row, 1.0);
            xtwz.axpy(w * z, &row, 1.0);
        }
        for r in 0..d {
            for c in (r + 1)..d {
                xtwx[(r, c)] = xtwx[(c, r)];
            }
        }
        info = xtwx.clone();
        for k in 0..d {
            xtwx[(k, k)] += 1e-10;
        }
        let chol = Cholesky::new(xtwx)
            .ok_or_else(|| Error::Numerical("IRLS normal equations not positive definite".into()))?;
        let next = chol.solve(&xtwz);
        let step = (&next - &gamma).amax();
        gamma = next;
        if step < 1e-10 {
            break;
        }
    }
    if gamma.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("IRLS diverged".into()));
    }
    Ok((gamma, info))
}
