//! Imputation stage: posterior-predictive draws of the cell-level truths and
//! random-walk Metropolis updates of the cluster-level exposures.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linear::mu_s;

/// Per-cluster random-walk proposal scales, adapted in batches toward a
/// target acceptance rate during burn-in and frozen afterwards.
#[derive(Debug, Clone)]
pub struct MhTuner {
    pub delta: Vec<f64>,
    pub target_accept: f64,
    pub window: usize,
    accepts: Vec<u32>,
    sweeps: usize,
    pub frozen: bool,
    frozen_accepts: u64,
    frozen_proposals: u64,
}

impl MhTuner {
    pub fn new(n: usize, initial_delta: f64, target_accept: f64, window: usize) -> Self {
        MhTuner {
            delta: vec![initial_delta.max(1e-8); n],
            target_accept,
            window: window.max(1),
            accepts: vec![0; n],
            sweeps: 0,
            frozen: false,
            frozen_accepts: 0,
            frozen_proposals: 0,
        }
    }

    pub fn record(&mut self, i: usize, accepted: bool) {
        if self.frozen {
            self.frozen_proposals += 1;
            self.frozen_accepts += accepted as u64;
        } else {
            self.accepts[i] += accepted as u32;
        }
    }

    /// Call once per full sweep; adapts every `window` sweeps.
    pub fn end_sweep(&mut self) {
        if self.frozen {
            return;
        }
        self.sweeps += 1;
        if self.sweeps >= self.window {
            for (d, acc) in self.delta.iter_mut().zip(self.accepts.iter_mut()) {
                let rate = *acc as f64 / self.sweeps as f64;
                *d = (*d * (rate - self.target_accept).exp()).clamp(1e-8, 1e8);
                *acc = 0;
            }
            self.sweeps = 0;
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Post-freeze acceptance rate across all clusters.
    pub fn frozen_rate(&self) -> Option<f64> {
        (self.frozen_proposals > 0)
            .then(|| self.frozen_accepts as f64 / self.frozen_proposals as f64)
    }
}

/// Current draws of the latent exposures: cluster truths `a`, cell truths `s`.
#[derive(Debug, Clone)]
pub struct LatentExposures {
    pub a: Vec<f64>,
    pub s: Vec<f64>,
}

/// Precision-weighted posterior of one cell truth: mean and variance of
/// `N(eta, Sigma^2)` with `Sigma^2 = (1/omega2 + 1/tau2)^-1` and
/// `eta = Sigma^2 (a/omega2 + mu_s/tau2)`.
pub fn cell_posterior(a: f64, mu_s_cell: f64, omega2: f64, tau2: f64) -> (f64, f64) {
    let var = 1.0 / (1.0 / omega2 + 1.0 / tau2);
    let eta = var * (a / omega2 + mu_s_cell / tau2);
    (eta, var)
}

/// Draws every cell truth given the cluster truths.
///
/// With `alpha` present, each unobserved cell is drawn from its
/// precision-weighted Gaussian; with `alpha` absent the error-prone
/// prediction is substituted deterministically. Validation cells always end
/// up at their observed values.
pub fn impute_cells<R: Rng>(
    ds: &Dataset,
    a: &[f64],
    alpha: Option<&DVector<f64>>,
    tau2: f64,
    omega2: f64,
    s: &mut [f64],
    rng: &mut R,
) -> Result<()> {
    match alpha {
        Some(alpha) => {
            if !(omega2 > 0.0 && tau2 > 0.0) {
                return Err(Error::Numerical(format!(
                    "impute_cells: nonpositive variances (omega2 = {omega2}, tau2 = {tau2})"
                )));
            }
            for (j, cell) in ds.cells.iter().enumerate() {
                if let Some(obs) = cell.s_observed {
                    s[j] = obs;
                    continue;
                }
                let mu = mu_s(alpha, cell.s_tilde, &cell.w);
                let (eta, var) = cell_posterior(a[cell.cluster], mu, omega2, tau2);
                s[j] = eta + var.sqrt() * rng.sample::<f64, _>(StandardNormal);
            }
        }
        None => {
            for (j, cell) in ds.cells.iter().enumerate() {
                s[j] = cell.s_observed.unwrap_or(cell.s_tilde);
            }
        }
    }
    Ok(())
}

/// Log acceptance ratio for a proposed cluster exposure.
///
/// `cell_count` and `cell_sum` are the sufficient statistics of the member
/// cells' current truths; the quadratic cell product telescopes to an O(1)
/// expression in them.
#[allow(clippy::too_many_arguments)]
pub fn log_accept_ratio(
    a_prop: f64,
    a_cur: f64,
    outcome_ll_prop: f64,
    outcome_ll_cur: f64,
    mu_a_i: f64,
    sigma2: f64,
    cell_count: f64,
    cell_sum: f64,
    omega2: f64,
) -> f64 {
    debug_assert!(cell_count >= 1.0, "clusters must have at least one cell");
    let outcome = outcome_ll_prop - outcome_ll_cur;
    let gps = (-(a_prop - mu_a_i).powi(2) + (a_cur - mu_a_i).powi(2)) / (2.0 * sigma2);
    let cells = -(cell_count * (a_prop.powi(2) - a_cur.powi(2))
        - 2.0 * cell_sum * (a_prop - a_cur))
        / (2.0 * omega2);
    outcome + gps + cells
}

/// One random-walk Metropolis update of cluster `i`'s exposure.
///
/// `outcome_ll_cur` is the outcome log density at the current value (often
/// available from the outcome model's cached fit); `outcome_loglik`
/// evaluates it at the proposal. Returns the new value and whether the
/// proposal was accepted.
#[allow(clippy::too_many_arguments)]
pub fn propose_accept_a<R: Rng, F: Fn(f64) -> f64>(
    i: usize,
    a_cur: f64,
    outcome_ll_cur: f64,
    outcome_loglik: F,
    mu_a_i: f64,
    sigma2: f64,
    cell_count: f64,
    cell_sum: f64,
    omega2: f64,
    delta: f64,
    rng: &mut R,
) -> Result<(f64, bool)> {
    let a_prop = Normal::new(a_cur, delta)
        .map_err(|e| Error::Numerical(format!("cluster {i}: bad proposal scale: {e}")))?
        .sample(rng);
    let ll_cur = outcome_ll_cur;
    let ll_prop = outcome_loglik(a_prop);
    if ll_cur.is_nan() || ll_prop.is_nan() || ll_cur == f64::NEG_INFINITY {
        return Err(Error::Numerical(format!(
            "cluster {i}: non-finite outcome log density (current {ll_cur}, proposal {ll_prop})"
        )));
    }
    let log_ratio = log_accept_ratio(
        a_prop, a_cur, ll_prop, ll_cur, mu_a_i, sigma2, cell_count, cell_sum, omega2,
    );
    if log_ratio.is_nan() {
        return Err(Error::Numerical(format!(
            "cluster {i}: non-finite acceptance ratio"
        )));
    }
    let accept = rng.random::<f64>().ln() < log_ratio;
    Ok((if accept { a_prop } else { a_cur }, accept))
}
