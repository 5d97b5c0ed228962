//! From retained draws to a smooth exposure-response curve: pseudo-outcome
//! construction (plain and doubly robust), Gaussian-kernel local-linear
//! regression, the sandwich variance with its marginal-estimation
//! correction term, multiple-imputation combining, and cross-validated
//! bandwidth selection.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::engine::ImputationDraw;
use crate::error::{Error, Result};

use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoKind {
    Plain,
    DoublyRobust,
}

/// Weighting of the empirical exposure measure inside the sandwich
/// correction term: uniform mass 1/n per imputed exposure (the kernel
/// weight itself carries the offsets), or mass proportional to the offsets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginalWeighting {
    UniformMeasure,
    OffsetMeasure,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    Cv,
}

#[derive(Debug, Clone)]
pub struct SmootherConfig {
    /// Strictly increasing evaluation grid.
    pub grid: Vec<f64>,
    pub bandwidth: Bandwidth,
    pub cv_folds: usize,
    pub cv_grid: Vec<f64>,
    pub cv_seed: u64,
    pub pseudo_kind: PseudoKind,
    pub weighting: MarginalWeighting,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        SmootherConfig {
            grid: crate::dgp::equal_grid(6.0, 14.0, 201),
            bandwidth: Bandwidth::Fixed(0.4),
            cv_folds: 5,
            cv_grid: vec![0.1, 0.15, 0.2, 0.3, 0.4, 0.6, 0.8, 1.2],
            cv_seed: 0,
            pseudo_kind: PseudoKind::Plain,
            weighting: MarginalWeighting::UniformMeasure,
        }
    }
}

impl SmootherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::Config("smoother: empty grid".into()));
        }
        if self.grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("smoother: grid must be strictly increasing".into()));
        }
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if !(h > 0.0) {
                return Err(Error::Config("smoother: bandwidth must be positive".into()));
            }
        }
        if matches!(self.bandwidth, Bandwidth::Cv) && self.cv_grid.is_empty() {
            return Err(Error::Config("smoother: empty bandwidth candidate grid".into()));
        }
        Ok(())
    }
}

/// Pointwise curve estimate with multiple-imputation variance components.
#[derive(Debug, Clone, PartialEq)]
pub struct ErfEstimate {
    pub grid: Vec<f64>,
    pub theta: Vec<f64>,
    pub within_var: Vec<f64>,
    pub between_var: Vec<f64>,
    pub total_var: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    pub bandwidth: f64,
    pub n_imputations: usize,
}

impl ErfEstimate {
    pub fn se(&self) -> Vec<f64> {
        self.total_var.iter().map(|v| v.sqrt()).collect()
    }

    /// `a,estimate,se,ci_low,ci_high,within_var,between_var`
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)
            .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        let mut out = std::io::BufWriter::new(file);
        let io_err = |e: std::io::Error| Error::Io { path: path.to_path_buf(), source: e };
        writeln!(out, "a,estimate,se,ci_low,ci_high,within_var,between_var").map_err(io_err)?;
        for k in 0..self.grid.len() {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.grid[k],
                self.theta[k],
                self.total_var[k].sqrt(),
                self.ci_low[k],
                self.ci_high[k],
                self.within_var[k],
                self.between_var[k]
            )
            .map_err(io_err)?;
        }
        out.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<ErfEstimate> {
        let content = std::fs::read_to_string(path)
            .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        let mut lines = content.lines();
        let header = lines.next().unwrap_or_default();
        if header != "a,estimate,se,ci_low,ci_high,within_var,between_var" {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: "unexpected header".into(),
            });
        }
        let mut est = ErfEstimate {
            grid: vec![],
            theta: vec![],
            within_var: vec![],
            between_var: vec![],
            total_var: vec![],
            ci_low: vec![],
            ci_high: vec![],
            bandwidth: f64::NAN,
            n_imputations: 0,
        };
        for (idx, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 7 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: idx as u64 + 2,
                    message: "expected 7 fields".into(),
                });
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: idx as u64 + 2,
                    message: format!("non-numeric field \"{s}\""),
                })
            };
            est.grid.push(parse(fields[0])?);
            est.theta.push(parse(fields[1])?);
            let se = parse(fields[2])?;
            est.total_var.push(se * se);
            est.ci_low.push(parse(fields[3])?);
            est.ci_high.push(parse(fields[4])?);
            est.within_var.push(parse(fields[5])?);
            est.between_var.push(parse(fields[6])?);
        }
        Ok(est)
    }
}

/// Residual-plus-marginal pseudo-outcome of one draw:
/// `xi_i = (ybar_i - fitted_i) + mean_c counterfactual[(i, c)]`.
pub fn pseudo_outcome(draw: &ImputationDraw, ds: &Dataset) -> Vec<f64> {
    let n = ds.n();
    let ncf = draw.counterfactual.ncols() as f64;
    (0..n)
        .map(|i| {
            let marginal = draw.counterfactual.row(i).sum() / ncf;
            (ds.clusters[i].ybar() - draw.fitted[i]) + marginal
        })
        .collect()
}

/// Doubly robust variant: the residual is stabilized by the ratio of the
/// covariate-marginalized exposure density to the density at the cluster's
/// own covariates.
pub fn pseudo_outcome_dr(draw: &ImputationDraw, ds: &Dataset) -> Result<Vec<f64>> {
    let gps = draw.gps.as_ref().ok_or_else(|| {
        Error::Validation("doubly robust pseudo-outcome needs stored exposure densities".into())
    })?;
    let floor = 1e-12;
    let offenders: Vec<String> = (0..ds.n())
        .filter(|&i| gps.at_own[i] < floor)
        .map(|i| ds.clusters[i].cluster_id.clone())
        .collect();
    if !offenders.is_empty() {
        return Err(Error::Validation(format!(
            "exposure density below {floor:e} (positivity violated) for clusters: {}",
            offenders.join(", ")
        )));
    }
    let ncf = draw.counterfactual.ncols() as f64;
    Ok((0..ds.n())
        .map(|i| {
            let marginal_mu = draw.counterfactual.row(i).sum() / ncf;
            let weight = gps.marginal[i] / gps.at_own[i];
            (ds.clusters[i].ybar() - draw.fitted[i]) * weight + marginal_mu
        })
        .collect())
}

/// Gaussian kernel weight `q = N / (h sqrt(2 pi)) exp(-(a_i - a0)^2 / 2h^2)`.
fn kernel_weight(a_i: f64, a0: f64, h: f64, n_offset: f64) -> f64 {
    n_offset / (h * (2.0 * std::f64::consts::PI).sqrt())
        * (-(a_i - a0).powi(2) / (2.0 * h * h)).exp()
}

#[derive(Debug, Clone, Copy)]
pub struct LocalFit {
    pub theta: f64,
    pub lambda: [f64; 2],
}

/// Kernel-weighted least squares of the pseudo-outcomes on the local-linear
/// basis `[1, (a_i - a0)/h]`; the intercept is the curve estimate at `a0`.
///
/// Errors when the effective sample size `sum(q)/max(q)` falls below 2.
pub fn local_linear_fit(
    xi: &[f64],
    a: &[f64],
    n_offsets: &[f64],
    a0: f64,
    h: f64,
) -> Result<LocalFit> {
    match local_linear_fit_impl(xi, a, n_offsets, a0, h) {
        (_, false) => Err(Error::Validation(format!(
            "bandwidth too small at a0 = {a0}: effective sample size below 2"
        ))),
        (fit, true) => fit,
    }
}

/// Returns the fit (the Gaussian kernel gives every point positive weight,
/// so the system is solvable whenever two distinct exposures exist) and
/// whether the effective-sample-size floor held.
fn local_linear_fit_impl(
    xi: &[f64],
    a: &[f64],
    n_offsets: &[f64],
    a0: f64,
    h: f64,
) -> (Result<LocalFit>, bool) {
    let mut s00 = 0.0;
    let mut s01 = 0.0;
    let mut s11 = 0.0;
    let mut b0 = 0.0;
    let mut b1 = 0.0;
    let mut q_max = 0.0f64;
    let mut q_sum = 0.0;
    for i in 0..xi.len() {
        let q = kernel_weight(a[i], a0, h, n_offsets[i]);
        let c1 = (a[i] - a0) / h;
        s00 += q;
        s01 += q * c1;
        s11 += q * c1 * c1;
        b0 += q * xi[i];
        b1 += q * xi[i] * c1;
        q_sum += q;
        q_max = q_max.max(q);
    }
    let supported = q_max > 0.0 && q_sum / q_max >= 2.0;
    let det = s00 * s11 - s01 * s01;
    if !det.is_finite() || det.abs() < 1e-300 {
        return (
            Err(Error::Numerical(format!(
                "degenerate local design at a0 = {a0}"
            ))),
            supported,
        );
    }
    let l0 = (s11 * b0 - s01 * b1) / det;
    let l1 = (s00 * b1 - s01 * b0) / det;
    (
        Ok(LocalFit {
            theta: l0,
            lambda: [l0, l1],
        }),
        supported,
    )
}

/// Per-draw scratch shared by all grid points: the row-centered
/// counterfactual matrix.
pub struct DrawWorkspace {
    /// `centered[(i'', c)] = M[(i'', c)] - rowmean(i'')`.
    pub centered: DMatrix<f64>,
}

pub fn draw_workspace(draw: &ImputationDraw) -> DrawWorkspace {
    let mut centered = draw.counterfactual.clone();
    let ncf = centered.ncols() as f64;
    for mut row in centered.row_iter_mut() {
        let mean = row.sum() / ncf;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    DrawWorkspace { centered }
}

/// Sandwich covariance of the local fit at `a0`, including the correction
/// for the estimated marginal term. Returns the 2x2 matrix and its (1,1)
/// entry, the variance of the curve estimate.
#[allow(clippy::too_many_arguments)]
pub fn sandwich_at(
    ws: &DrawWorkspace,
    draw: &ImputationDraw,
    ds: &Dataset,
    xi: &[f64],
    a0: f64,
    h: f64,
    lambda: [f64; 2],
    weighting: MarginalWeighting,
) -> ([[f64; 2]; 2], f64) {
    let n = ds.n();
    let offsets: Vec<f64> = ds.clusters.iter().map(|c| c.n_offset).collect();
    let q: Vec<f64> = (0..n)
        .map(|i| kernel_weight(draw.a[i], a0, h, offsets[i]))
        .collect();
    let c1: Vec<f64> = (0..n).map(|i| (draw.a[i] - a0) / h).collect();

    let norm = match weighting {
        MarginalWeighting::UniformMeasure => n as f64,
        MarginalWeighting::OffsetMeasure => offsets.iter().sum(),
    };
    // Correction-term vectors: g0 = q/norm, g1 = q c1 / norm over the
    // imputed exposures.
    let g0: Vec<f64> = (0..n).map(|i| q[i] / norm).collect();
    let g1: Vec<f64> = (0..n).map(|i| q[i] * c1[i] / norm).collect();

    let mut d00 = 0.0;
    let mut d01 = 0.0;
    let mut d11 = 0.0;
    for i in 0..n {
        d00 += q[i];
        d01 += q[i] * c1[i];
        d11 += q[i] * c1[i] * c1[i];
    }

    // Accumulate sum over clusters of zeta zeta'.
    let mut s00 = 0.0;
    let mut s01 = 0.0;
    let mut s11 = 0.0;
    // Column positions of each cluster owning covariates in the
    // counterfactual matrix.
    let mut col_of = vec![usize::MAX; n];
    for (c, &cl) in draw.cf_columns.iter().enumerate() {
        col_of[cl] = c;
    }
    for i in 0..n {
        let resid = xi[i] - (lambda[0] + lambda[1] * c1[i]);
        let mut z0 = q[i] * resid;
        let mut z1 = q[i] * resid * c1[i];
        if col_of[i] != usize::MAX {
            let col = ws.centered.column(col_of[i]);
            let mut i0 = 0.0;
            let mut i1 = 0.0;
            for k in 0..n {
                let m = col[k];
                i0 += g0[k] * m;
                i1 += g1[k] * m;
            }
            z0 += i0;
            z1 += i1;
        }
        s00 += z0 * z0;
        s01 += z0 * z1;
        s11 += z1 * z1;
    }

    // Omega = D^-1 S D^-1 for symmetric 2x2 D.
    let det = d00 * d11 - d01 * d01;
    let inv = [[d11 / det, -d01 / det], [-d01 / det, d00 / det]];
    let sd = [
        [
            inv[0][0] * s00 + inv[0][1] * s01,
            inv[0][0] * s01 + inv[0][1] * s11,
        ],
        [
            inv[1][0] * s00 + inv[1][1] * s01,
            inv[1][0] * s01 + inv[1][1] * s11,
        ],
    ];
    let omega = [
        [
            sd[0][0] * inv[0][0] + sd[0][1] * inv[0][1],
            sd[0][0] * inv[1][0] + sd[0][1] * inv[1][1],
        ],
        [
            sd[1][0] * inv[0][0] + sd[1][1] * inv[0][1],
            sd[1][0] * inv[1][0] + sd[1][1] * inv[1][1],
        ],
    ];
    debug_assert!(omega[0][0] >= -1e-10 && omega[1][1] >= -1e-10);
    (omega, omega[0][0].max(0.0))
}

/// Standalone sandwich evaluation at one point (builds the per-draw
/// workspace internally).
#[allow(clippy::too_many_arguments)]
pub fn sandwich_variance(
    draw: &ImputationDraw,
    ds: &Dataset,
    xi: &[f64],
    a0: f64,
    h: f64,
    lambda: [f64; 2],
    weighting: MarginalWeighting,
) -> ([[f64; 2]; 2], f64) {
    let ws = draw_workspace(draw);
    sandwich_at(&ws, draw, ds, xi, a0, h, lambda, weighting)
}

#[derive(Debug, Clone, Copy)]
pub struct CombinedPoint {
    pub theta_bar: f64,
    pub within: f64,
    pub between: f64,
    pub total: f64,
}

/// Multiple-imputation combining: mean estimate, mean within-imputation
/// variance, and `(1 + 1/L)` times the between-imputation variance.
pub fn combine_rubin(theta: &[f64], within: &[f64]) -> Result<CombinedPoint> {
    let l = theta.len();
    if l < 2 {
        return Err(Error::Validation(
            "combining rules need at least two imputations".into(),
        ));
    }
    let lf = l as f64;
    let theta_bar = theta.iter().sum::<f64>() / lf;
    let between = theta.iter().map(|t| (t - theta_bar).powi(2)).sum::<f64>() / (lf - 1.0);
    let within_mean = within.iter().sum::<f64>() / lf;
    let total = within_mean + (1.0 + 1.0 / lf) * between;
    Ok(CombinedPoint {
        theta_bar,
        within: within_mean,
        between,
        total,
    })
}

/// K-fold cross-validated bandwidth: offset-weighted held-out squared error
/// of the local fit at each held-out exposure, tie-broken to the largest
/// near-minimizing candidate.
pub fn cv_bandwidth(
    xi: &[f64],
    a: &[f64],
    n_offsets: &[f64],
    cv_grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<f64> {
    if cv_grid.is_empty() {
        return Err(Error::Config("empty bandwidth candidate grid".into()));
    }
    let n = xi.len();
    let folds = folds.clamp(2, n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let fold_of: Vec<usize> = {
        let mut f = vec![0; n];
        for (rank, &i) in order.iter().enumerate() {
            f[i] = rank % folds;
        }
        f
    };

    let mut scored: Vec<(f64, f64)> = Vec::new();
    'candidates: for &h in cv_grid {
        if !(h > 0.0) {
            continue;
        }
        let mut err = 0.0;
        let mut wsum = 0.0;
        for fold in 0..folds {
            let tr: Vec<usize> = (0..n).filter(|&i| fold_of[i] != fold).collect();
            let xi_tr: Vec<f64> = tr.iter().map(|&i| xi[i]).collect();
            let a_tr: Vec<f64> = tr.iter().map(|&i| a[i]).collect();
            let w_tr: Vec<f64> = tr.iter().map(|&i| n_offsets[i]).collect();
            for i in (0..n).filter(|&i| fold_of[i] == fold) {
                match local_linear_fit(&xi_tr, &a_tr, &w_tr, a[i], h) {
                    Ok(fit) => {
                        err += n_offsets[i] * (xi[i] - fit.theta).powi(2);
                        wsum += n_offsets[i];
                    }
                    Err(_) => continue 'candidates,
                }
            }
        }
        scored.push((h, err / wsum));
    }
    if scored.is_empty() {
        return Err(Error::Validation(
            "no bandwidth candidate satisfied the effective-sample-size requirement".into(),
        ));
    }
    let min_err = scored.iter().map(|&(_, e)| e).fold(f64::INFINITY, f64::min);
    // Largest h among near-minimizers; the absolute epsilon keeps the
    // tie-break meaningful when the signal is interpolated exactly and all
    // errors are rounding noise.
    let tol = 1.01 * min_err + 1e-12;
    let best = scored
        .iter()
        .filter(|&&(_, e)| e <= tol)
        .map(|&(h, _)| h)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(best)
}

/// Streaming smoother: feed retained draws one at a time, then combine.
///
/// Grid points whose kernel mass falls below the effective-sample-size
/// floor for some draw are still fit (the Gaussian kernel keeps the system
/// well defined); they are counted in `low_support_points` instead of
/// failing the whole curve, matching how the boundary of the exposure range
/// is handled in the simulation tables.
pub struct ErfAccumulator<'d> {
    ds: &'d Dataset,
    cfg: SmootherConfig,
    h: Option<f64>,
    theta_draws: Vec<Vec<f64>>,
    omega_draws: Vec<Vec<f64>>,
    low_support: usize,
}

impl<'d> ErfAccumulator<'d> {
    pub fn new(ds: &'d Dataset, cfg: SmootherConfig) -> Result<Self> {
        cfg.validate()?;
        let h = match cfg.bandwidth {
            Bandwidth::Fixed(h) => Some(h),
            Bandwidth::Cv => None,
        };
        Ok(ErfAccumulator {
            ds,
            cfg,
            h,
            theta_draws: Vec::new(),
            omega_draws: Vec::new(),
            low_support: 0,
        })
    }

    /// Grid-point evaluations that fell below the effective-sample-size
    /// floor across all draws so far.
    pub fn low_support_points(&self) -> usize {
        self.low_support
    }

    pub fn bandwidth(&self) -> Option<f64> {
        self.h
    }

    pub fn add_draw(&mut self, draw: &ImputationDraw) -> Result<()> {
        let xi = match self.cfg.pseudo_kind {
            PseudoKind::Plain => pseudo_outcome(draw, self.ds),
            PseudoKind::DoublyRobust => pseudo_outcome_dr(draw, self.ds)?,
        };
        let offsets = self.ds.offsets();
        // Bandwidth selected once, on the first imputation, and reused.
        if self.h.is_none() {
            self.h = Some(cv_bandwidth(
                &xi,
                &draw.a,
                &offsets,
                &self.cfg.cv_grid,
                self.cfg.cv_folds,
                self.cfg.cv_seed,
            )?);
        }
        let h = self.h.unwrap();
        let ws = draw_workspace(draw);
        let mut theta = Vec::with_capacity(self.cfg.grid.len());
        let mut omega = Vec::with_capacity(self.cfg.grid.len());
        for &a0 in &self.cfg.grid {
            let (fit, supported) = local_linear_fit_impl(&xi, &draw.a, &offsets, a0, h);
            let fit = fit?;
            if !supported {
                self.low_support += 1;
            }
            let (_, var) = sandwich_at(
                &ws,
                draw,
                self.ds,
                &xi,
                a0,
                h,
                fit.lambda,
                self.cfg.weighting,
            );
            theta.push(fit.theta);
            omega.push(var);
        }
        self.theta_draws.push(theta);
        self.omega_draws.push(omega);
        Ok(())
    }

    pub fn finish(self) -> Result<ErfEstimate> {
        let l = self.theta_draws.len();
        if l == 0 {
            return Err(Error::Validation("no imputation draws to combine".into()));
        }
        let grid = self.cfg.grid.clone();
        let g = grid.len();
        let mut theta = vec![0.0; g];
        let mut within = vec![0.0; g];
        let mut between = vec![0.0; g];
        let mut total = vec![0.0; g];
        for k in 0..g {
            if l == 1 {
                // Single imputation: the curve is that fit, with
                // sandwich-only variance.
                theta[k] = self.theta_draws[0][k];
                within[k] = self.omega_draws[0][k];
                total[k] = within[k];
            } else {
                let th: Vec<f64> = self.theta_draws.iter().map(|d| d[k]).collect();
                let om: Vec<f64> = self.omega_draws.iter().map(|d| d[k]).collect();
                let c = combine_rubin(&th, &om)?;
                theta[k] = c.theta_bar;
                within[k] = c.within;
                between[k] = c.between;
                total[k] = c.total;
            }
        }
        let ci_low: Vec<f64> = (0..g).map(|k| theta[k] - 1.96 * total[k].sqrt()).collect();
        let ci_high: Vec<f64> = (0..g).map(|k| theta[k] + 1.96 * total[k].sqrt()).collect();
        Ok(ErfEstimate {
            grid,
            theta,
            within_var: within,
            between_var: between,
            total_var: total,
            ci_low,
            ci_high,
            bandwidth: self.h.unwrap_or(f64::NAN),
            n_imputations: l,
        })
    }
}

/// Smooths a list of retained draws in one call.
pub fn estimate_erf(
    draws: &[ImputationDraw],
    ds: &Dataset,
    cfg: &SmootherConfig,
) -> Result<ErfEstimate> {
    let mut acc = ErfAccumulator::new(ds, cfg.clone())?;
    for d in draws {
        acc.add_draw(d)?;
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClusterRecord, Dataset};
    use crate::engine::GpsDensity;

    fn toy_dataset(n: usize, ybar: &[f64], offsets: &[f64]) -> Dataset {
        let clusters: Vec<ClusterRecord> = (0..n)
            .map(|i| ClusterRecord {
                cluster_id: format!("k{i}"),
                y: (ybar[i] * offsets[i]).round() as u64,
                n_offset: offsets[i],
                x: vec![],
                cell_range: 0..0,
            })
            .collect();
        let cells = (0..n)
            .map(|i| (format!("g{i}"), format!("k{i}"), 0.0, None, vec![]))
            .collect();
        let ds = Dataset::from_parts(clusters, cells, None).unwrap();
        // Counts are integers, so the chosen rates must be exactly
        // representable as y / n_offset.
        for (c, want) in ds.clusters.iter().zip(ybar) {
            assert!((c.ybar() - want).abs() < 1e-12, "use exact rates in tests");
        }
        ds
    }

    fn draw_with(
        a: Vec<f64>,
        fitted: Vec<f64>,
        counterfactual: DMatrix<f64>,
        gps: Option<GpsDensity>,
    ) -> ImputationDraw {
        let n = a.len();
        ImputationDraw {
            index: 1,
            a,
            fitted,
            counterfactual,
            cf_columns: (0..n).collect(),
            gps,
        }
    }

    #[test]
    fn constant_model_gives_constant_pseudo_outcome() {
        let n = 4;
        let ybar = vec![2.0; n];
        let offsets = vec![10.0; n];
        let ds = toy_dataset(n, &ybar, &offsets);
        let draw = draw_with(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![2.0; n],
            DMatrix::from_element(n, n, 2.0),
            None,
        );
        let xi = pseudo_outcome(&draw, &ds);
        for v in xi {
            assert!((v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_built_three_by_three_matches_arithmetic() {
        let ybar = vec![1.0, 2.0, 0.5];
        let offsets = vec![2.0, 1.0, 2.0];
        let ds = toy_dataset(3, &ybar, &offsets);
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let fitted = vec![0.5, 1.5, 2.5];
        let draw = draw_with(vec![0.0, 1.0, 2.0], fitted, m, None);
        let xi = pseudo_outcome(&draw, &ds);
        // xi_i = (ybar - fitted) + rowmean
        assert!((xi[0] - ((1.0 - 0.5) + 2.0)).abs() < 1e-12);
        assert!((xi[1] - ((2.0 - 1.5) + 5.0)).abs() < 1e-12);
        assert!((xi[2] - ((0.5 - 2.5) + 8.0)).abs() < 1e-12);

        // Algebraic identity: mean(xi - marginal) = mean residual.
        let marginal = [2.0, 5.0, 8.0];
        let mean_diff: f64 = (0..3).map(|i| xi[i] - marginal[i]).sum::<f64>() / 3.0;
        let mean_resid: f64 = (0..3)
            .map(|i| ybar[i] - draw.fitted[i])
            .sum::<f64>()
            / 3.0;
        assert!((mean_diff - mean_resid).abs() < 1e-12);
    }

    #[test]
    fn dr_collapses_when_density_is_covariate_free() {
        let ybar = vec![1.0, 2.0, 0.5];
        let offsets = vec![2.0, 1.0, 2.0];
        let ds = toy_dataset(3, &ybar, &offsets);
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let gps = GpsDensity {
            at_own: vec![0.3, 0.2, 0.4],
            marginal: vec![0.3, 0.2, 0.4],
        };
        let draw = draw_with(vec![0.0, 1.0, 2.0], vec![0.5, 1.5, 2.5], m, Some(gps));
        let plain = pseudo_outcome(&draw, &ds);
        let dr = pseudo_outcome_dr(&draw, &ds).unwrap();
        for (p, d) in plain.iter().zip(&dr) {
            assert!((p - d).abs() < 1e-12);
        }
    }

    #[test]
    fn dr_zero_residuals_reduce_to_marginal() {
        let ybar = vec![1.0, 2.0];
        let offsets = vec![1.0, 1.0];
        let ds = toy_dataset(2, &ybar, &offsets);
        let m = DMatrix::from_row_slice(2, 2, &[3.0, 5.0, 7.0, 9.0]);
        let gps = GpsDensity {
            at_own: vec![0.1, 0.9],
            marginal: vec![0.7, 0.2],
        };
        let draw = draw_with(vec![0.0, 1.0], ybar.clone(), m, Some(gps));
        let dr = pseudo_outcome_dr(&draw, &ds).unwrap();
        assert!((dr[0] - 4.0).abs() < 1e-12);
        assert!((dr[1] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn dr_hand_arithmetic() {
        let ybar = vec![1.0, 2.0, 0.5];
        let offsets = vec![2.0, 1.0, 2.0];
        let ds = toy_dataset(3, &ybar, &offsets);
        let m = DMatrix::from_element(3, 3, 1.0);
        let gps = GpsDensity {
            at_own: vec![0.2, 0.5, 0.25],
            marginal: vec![0.4, 0.25, 0.5],
        };
        let draw = draw_with(vec![0.0, 1.0, 2.0], vec![0.5, 1.5, 2.5], m, Some(gps));
        let dr = pseudo_outcome_dr(&draw, &ds).unwrap();
        assert!((dr[0] - ((1.0 - 0.5) * 2.0 + 1.0)).abs() < 1e-12);
        assert!((dr[1] - ((2.0 - 1.5) * 0.5 + 1.0)).abs() < 1e-12);
        assert!((dr[2] - ((0.5 - 2.5) * 2.0 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn dr_flags_positivity_violations() {
        let ybar = vec![1.0, 2.0];
        let offsets = vec![1.0, 1.0];
        let ds = toy_dataset(2, &ybar, &offsets);
        let m = DMatrix::from_element(2, 2, 1.0);
        let gps = GpsDensity {
            at_own: vec![1e-15, 0.5],
            marginal: vec![0.2, 0.2],
        };
        let draw = draw_with(vec![0.0, 1.0], ybar.clone(), m, Some(gps));
        let err = pseudo_outcome_dr(&draw, &ds).unwrap_err();
        assert!(err.to_string().contains("k0"), "{err}");
    }

    #[test]
    fn affine_pseudo_outcomes_are_reproduced_exactly() {
        // Bandwidths chosen to keep the effective sample size above the
        // floor even at the grid boundary.
        let n = 40;
        let a: Vec<f64> = (0..n).map(|i| 6.0 + 8.0 * i as f64 / (n - 1) as f64).collect();
        let xi: Vec<f64> = a.iter().map(|v| 3.0 + 2.0 * v).collect();
        let w = vec![1.0; n];
        for &h in &[0.3, 0.5, 2.0, 50.0] {
            for &a0 in &[6.0, 9.37, 14.0] {
                let fit = local_linear_fit(&xi, &a, &w, a0, h).unwrap();
                assert!(
                    (fit.theta - (3.0 + 2.0 * a0)).abs() < 1e-8,
                    "h={h} a0={a0}: {}",
                    fit.theta
                );
            }
        }
        // Uneven offsets at an interior point reproduce the line too.
        let w: Vec<f64> = (0..n).map(|i| 1.0 + (i % 5) as f64).collect();
        let fit = local_linear_fit(&xi, &a, &w, 10.0, 0.6).unwrap();
        assert!((fit.theta - 23.0).abs() < 1e-8);
    }

    #[test]
    fn flat_kernel_limit_matches_global_weighted_regression() {
        let n = 25;
        let a: Vec<f64> = (0..n).map(|i| i as f64 * 0.4).collect();
        let xi: Vec<f64> = a.iter().map(|v| 1.0 + 0.3 * v + (v * 2.0).sin()).collect();
        let w: Vec<f64> = (0..n).map(|i| 1.0 + (i % 3) as f64).collect();
        let a0 = 4.0;
        let fit = local_linear_fit(&xi, &a, &w, a0, 1e5).unwrap();
        // Global weighted linear regression evaluated at a0.
        let sw: f64 = w.iter().sum();
        let ma = w.iter().zip(&a).map(|(w, a)| w * a).sum::<f64>() / sw;
        let my = w.iter().zip(&xi).map(|(w, y)| w * y).sum::<f64>() / sw;
        let sxx: f64 = (0..n).map(|i| w[i] * (a[i] - ma).powi(2)).sum();
        let sxy: f64 = (0..n).map(|i| w[i] * (a[i] - ma) * (xi[i] - my)).sum();
        let slope = sxy / sxx;
        let expect = my + slope * (a0 - ma);
        assert!((fit.theta - expect).abs() < 1e-6, "{} vs {expect}", fit.theta);
    }

    #[test]
    fn five_point_fit_matches_direct_normal_equations() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let xi = [2.0, 2.5, 1.0, 3.0, 4.5];
        let w = [1.0, 2.0, 1.0, 3.0, 1.0];
        let a0 = 2.5;
        let h = 1.0;
        let fit = local_linear_fit(&xi, &a, &w, a0, h).unwrap();
        // Direct 2x2 solve.
        let mut s = [[0.0; 2]; 2];
        let mut b = [0.0; 2];
        for i in 0..5 {
            let q = kernel_weight(a[i], a0, h, w[i]);
            let c = [1.0, (a[i] - a0) / h];
            for r in 0..2 {
                for cc in 0..2 {
                    s[r][cc] += q * c[r] * c[cc];
                }
                b[r] += q * xi[i] * c[r];
            }
        }
        let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
        let l0 = (s[1][1] * b[0] - s[0][1] * b[1]) / det;
        assert!((fit.theta - l0).abs() < 1e-12);
    }

    #[test]
    fn bandwidth_too_small_is_reported() {
        let a = [0.0, 100.0, 200.0];
        let xi = [1.0, 2.0, 3.0];
        let w = [1.0, 1.0, 1.0];
        let err = local_linear_fit(&xi, &a, &w, 0.0, 0.01).unwrap_err();
        assert!(err.to_string().contains("bandwidth too small"));
    }

    #[test]
    fn identical_columns_kill_the_correction_term() {
        // mu free of x: every column equal, so the centered matrix is zero
        // and the sandwich reduces to the plain form.
        let n = 8;
        let ybar: Vec<f64> = (0..n).map(|i| 0.5 + 0.1 * i as f64).collect();
        let offsets = vec![10.0; n];
        let ds = toy_dataset(n, &ybar, &offsets);
        let a: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let col: Vec<f64> = (0..n).map(|i| 0.3 * i as f64).collect();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for c in 0..n {
                m[(i, c)] = col[i];
            }
        }
        let draw = draw_with(a.clone(), vec![0.4; n], m, None);
        let xi = pseudo_outcome(&draw, &ds);
        let fit = local_linear_fit(&xi, &a, &offsets, 3.5, 1.5).unwrap();
        let (omega, var) = sandwich_variance(
            &draw,
            &ds,
            &xi,
            3.5,
            1.5,
            fit.lambda,
            MarginalWeighting::UniformMeasure,
        );

        // Plain sandwich computed directly.
        let q: Vec<f64> = (0..n)
            .map(|i| kernel_weight(a[i], 3.5, 1.5, offsets[i]))
            .collect();
        let c1: Vec<f64> = (0..n).map(|i| (a[i] - 3.5) / 1.5).collect();
        let mut d = [[0.0f64; 2]; 2];
        let mut s = [[0.0f64; 2]; 2];
        for i in 0..n {
            let c = [1.0, c1[i]];
            let resid = xi[i] - (fit.lambda[0] + fit.lambda[1] * c1[i]);
            for r in 0..2 {
                for cc in 0..2 {
                    d[r][cc] += q[i] * c[r] * c[cc];
                    s[r][cc] += q[i] * resid * c[r] * q[i] * resid * c[cc];
                }
            }
        }
        let det = d[0][0] * d[1][1] - d[0][1] * d[1][0];
        let inv = [[d[1][1] / det, -d[0][1] / det], [-d[1][0] / det, d[0][0] / det]];
        let mut expect = 0.0;
        for r in 0..2 {
            for cc in 0..2 {
                expect += inv[0][r] * s[r][cc] * inv[cc][0];
            }
        }
        assert!((var - expect).abs() < 1e-10 * expect.max(1.0), "{var} vs {expect}");
        assert!(omega[0][1].is_finite());
    }

    #[test]
    fn sandwich_matches_brute_force_transcription() {
        // n = 4 hand dataset, everything nontrivial: distinct exposures,
        // offsets, and a counterfactual with real covariate structure.
        let ybar = vec![1.0, 2.0, 0.5, 1.5];
        let offsets = vec![2.0, 1.0, 2.0, 2.0];
        let ds = toy_dataset(4, &ybar, &offsets);
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let m = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, 2.0, 0.5, 1.1, //
                0.3, 2.2, 1.7, 0.9, //
                1.9, 0.4, 2.6, 1.3, //
                0.8, 1.6, 2.4, 3.2,
            ],
        );
        let fitted = vec![0.9, 1.8, 0.7, 1.2];
        let draw = draw_with(a.clone(), fitted.clone(), m.clone(), None);
        let xi = pseudo_outcome(&draw, &ds);
        let a0 = 2.5;
        let h = 1.5;
        let fit = local_linear_fit(&xi, &a, &offsets, a0, h).unwrap();
        let (_, var) = sandwich_variance(
            &draw,
            &ds,
            &xi,
            a0,
            h,
            fit.lambda,
            MarginalWeighting::UniformMeasure,
        );

        // Brute force: loops written straight from the definitions.
        let n = 4usize;
        let q = |i: usize| {
            offsets[i] / (h * (2.0 * std::f64::consts::PI).sqrt())
                * (-(a[i] - a0).powi(2) / (2.0 * h * h)).exp()
        };
        let c = |i: usize| [1.0, (a[i] - a0) / h];
        let mut d = [[0.0f64; 2]; 2];
        for i in 0..n {
            let ci = c(i);
            for r in 0..2 {
                for cc in 0..2 {
                    d[r][cc] += q(i) * ci[r] * ci[cc];
                }
            }
        }
        let rowmean = |i: usize| (0..n).map(|cc| m[(i, cc)]).sum::<f64>() / n as f64;
        let mut ssum = [[0.0f64; 2]; 2];
        for i in 0..n {
            let ci = c(i);
            let resid = xi[i] - (fit.lambda[0] + fit.lambda[1] * ci[1]);
            let mut zeta = [q(i) * resid * ci[0], q(i) * resid * ci[1]];
            for i2 in 0..n {
                let ci2 = c(i2);
                let bracket = m[(i2, i)] - rowmean(i2);
                zeta[0] += q(i2) * bracket * ci2[0] / n as f64;
                zeta[1] += q(i2) * bracket * ci2[1] / n as f64;
            }
            for r in 0..2 {
                for cc in 0..2 {
                    ssum[r][cc] += zeta[r] * zeta[cc];
                }
            }
        }
        let det = d[0][0] * d[1][1] - d[0][1] * d[1][0];
        let inv = [[d[1][1] / det, -d[0][1] / det], [-d[1][0] / det, d[0][0] / det]];
        let mut expect = 0.0;
        for r in 0..2 {
            for cc in 0..2 {
                expect += inv[0][r] * ssum[r][cc] * inv[cc][0];
            }
        }
        assert!(
            (var - expect).abs() < 1e-10 * expect.max(1.0),
            "{var} vs {expect}"
        );
    }

    #[test]
    fn rubin_combining_hand_cases() {
        // Identical estimates: no between-imputation spread.
        let c = combine_rubin(&[2.0, 2.0, 2.0], &[0.5, 0.7, 0.6]).unwrap();
        assert!((c.between).abs() < 1e-15);
        assert!((c.total - 0.6).abs() < 1e-12);

        // L = 2 hand case from the combining formula.
        let c = combine_rubin(&[1.0, 3.0], &[0.0, 0.0]).unwrap();
        assert!((c.theta_bar - 2.0).abs() < 1e-15);
        assert!((c.total - 3.0).abs() < 1e-12);

        // Monotone in the spread at fixed within-variance.
        let narrow = combine_rubin(&[1.9, 2.1], &[0.1, 0.1]).unwrap();
        let wide = combine_rubin(&[1.0, 3.0], &[0.1, 0.1]).unwrap();
        assert!(wide.total > narrow.total);

        assert!(combine_rubin(&[1.0], &[0.1]).is_err());
    }

    #[test]
    fn cv_prefers_larger_h_on_linear_data() {
        let n = 60;
        let a: Vec<f64> = (0..n).map(|i| i as f64 * 0.2).collect();
        let xi: Vec<f64> = a.iter().map(|v| 1.0 + 0.5 * v).collect();
        let w = vec![1.0; n];
        let grid = [0.3, 0.6, 1.2, 2.4];
        let h = cv_bandwidth(&xi, &a, &w, &grid, 5, 3).unwrap();
        assert_eq!(h, 2.4);
    }

    #[test]
    fn cv_singleton_grid_returns_it() {
        let n = 60;
        let a: Vec<f64> = (0..n).map(|i| i as f64 * 0.15).collect();
        let xi: Vec<f64> = a.iter().map(|v| v.sin()).collect();
        let w = vec![1.0; n];
        assert_eq!(cv_bandwidth(&xi, &a, &w, &[1.0], 5, 1).unwrap(), 1.0);
    }

    #[test]
    fn cv_tracks_signal_wiggliness() {
        // Dense wiggly signal wants a smaller bandwidth than a linear one.
        let n = 200;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
        let noise = rand_distr::Normal::new(0.0, 0.05).unwrap();
        let wiggly: Vec<f64> = a
            .iter()
            .map(|v| (3.0 * v).sin() + rand_distr::Distribution::sample(&noise, &mut rng))
            .collect();
        let linear: Vec<f64> = a
            .iter()
            .map(|v| 0.4 * v + rand_distr::Distribution::sample(&noise, &mut rng))
            .collect();
        let w = vec![1.0; n];
        let grid = [0.1, 0.2, 0.4, 0.8, 1.6, 3.2];
        let h_wiggly = cv_bandwidth(&wiggly, &a, &w, &grid, 5, 5).unwrap();
        let h_linear = cv_bandwidth(&linear, &a, &w, &grid, 5, 5).unwrap();
        assert!(
            h_wiggly < h_linear,
            "wiggly {h_wiggly} vs linear {h_linear}"
        );
    }

    #[test]
    fn estimate_erf_on_constant_outcome_is_flat() {
        let n = 30;
        let ybar = vec![1.5; n];
        let offsets = vec![4.0; n];
        let ds = toy_dataset(n, &ybar, &offsets);
        let a: Vec<f64> = (0..n).map(|i| 6.0 + 8.0 * i as f64 / (n - 1) as f64).collect();
        // Two identical draws from a constant model.
        let draws: Vec<ImputationDraw> = (0..2)
            .map(|_| {
                draw_with(
                    a.clone(),
                    vec![1.5; n],
                    DMatrix::from_element(n, n, 1.5),
                    None,
                )
            })
            .collect();
        let cfg = SmootherConfig {
            grid: crate::dgp::equal_grid(7.0, 13.0, 25),
            bandwidth: Bandwidth::Fixed(1.0),
            ..Default::default()
        };
        let est = estimate_erf(&draws, &ds, &cfg).unwrap();
        for k in 0..est.grid.len() {
            assert!((est.theta[k] - 1.5).abs() < 1e-9);
            // Degenerate zero-variance interval collapses onto the estimate.
            assert!(est.ci_low[k] <= 1.5 + 1e-9 && 1.5 - 1e-9 <= est.ci_high[k]);
            assert!(est.between_var[k].abs() < 1e-18);
        }
        assert_eq!(est.n_imputations, 2);
    }

    #[test]
    fn erf_csv_round_trips() {
        let est = ErfEstimate {
            grid: vec![1.0, 2.0],
            theta: vec![0.5, 0.6],
            within_var: vec![0.01, 0.02],
            between_var: vec![0.001, 0.002],
            total_var: vec![0.0115, 0.023],
            ci_low: vec![0.2, 0.3],
            ci_high: vec![0.8, 0.9],
            bandwidth: 0.4,
            n_imputations: 3,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("erf.csv");
        est.write_csv(&path).unwrap();
        let back = ErfEstimate::read_csv(&path).unwrap();
        assert_eq!(back.grid, est.grid);
        assert_eq!(back.theta, est.theta);
        assert_eq!(back.within_var, est.within_var);
        assert_eq!(back.between_var, est.between_var);
        for (a, b) in back.total_var.iter().zip(&est.total_var) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
