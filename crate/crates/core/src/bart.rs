//! Weighted sum-of-trees outcome model: Metropolis-Hastings moves on the
//! tree structures, conjugate Gaussian leaf means, and an inverse-gamma
//! residual-variance update with per-observation precision weights
//! (`epsilon_i ~ N(0, psi2 / N_i)`).
//!
//! The response is standardized internally to [-0.5, 0.5]; the leaf-mean
//! prior sd follows the usual range/(2 k sqrt(T)) rule and the variance
//! prior is calibrated so that a weighted least-squares residual variance
//! sits at the `q_quantile` of the prior.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::linear::{sample_variance_ig, IgPrior};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BartHyper {
    pub n_trees: usize,
    pub split_alpha: f64,
    pub split_beta: f64,
    /// Leaf-mean prior scale factor k.
    pub k: f64,
    /// Degrees of freedom of the variance prior.
    pub nu_df: f64,
    /// Prior quantile pinned at the weighted least-squares variance.
    pub q_quantile: f64,
    /// Candidate cut values per variable (empirical quantile grid).
    pub n_cuts: usize,
    pub p_grow: f64,
    pub p_prune: f64,
    pub p_change: f64,
    pub p_swap: f64,
}

impl Default for BartHyper {
    fn default() -> Self {
        BartHyper {
            n_trees: 200,
            split_alpha: 0.95,
            split_beta: 2.0,
            k: 2.0,
            nu_df: 3.0,
            q_quantile: 0.90,
            n_cuts: 100,
            p_grow: 0.25,
            p_prune: 0.25,
            p_change: 0.40,
            p_swap: 0.10,
        }
    }
}

const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy)]
struct Node {
    /// Split variable; `NONE` marks a leaf.
    var: u32,
    cut: f64,
    left: u32,
    right: u32,
    parent: u32,
    depth: u16,
    /// Leaf mean (meaningful for leaves only).
    value: f64,
}

impl Node {
    fn leaf(parent: u32, depth: u16) -> Node {
        Node {
            var: NONE,
            cut: 0.0,
            left: NONE,
            right: NONE,
            parent,
            depth,
            value: 0.0,
        }
    }

    fn is_leaf(&self) -> bool {
        self.var == NONE
    }
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
    free: Vec<u32>,
    /// Leaf id each training point currently falls into.
    assign: Vec<u32>,
}

impl Tree {
    fn stump(n_points: usize) -> Tree {
        Tree {
            nodes: vec![Node::leaf(NONE, 0)],
            free: Vec::new(),
            assign: vec![0; n_points],
        }
    }

    fn alloc(&mut self, node: Node) -> u32 {
        if let Some(id) = self.free.pop() {
            self.nodes[id as usize] = node;
            id
        } else {
            self.nodes.push(node);
            (self.nodes.len() - 1) as u32
        }
    }

    fn live_ids(&self) -> Vec<u32> {
        // Reachable nodes from the root.
        let mut ids = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![0u32];
        while let Some(id) = stack.pop() {
            ids.push(id);
            let node = self.nodes[id as usize];
            if !node.is_leaf() {
                stack.push(node.left);
                stack.push(node.right);
            }
        }
        ids
    }

    fn leaves(&self) -> Vec<u32> {
        self.live_ids()
            .into_iter()
            .filter(|&id| self.nodes[id as usize].is_leaf())
            .collect()
    }

    fn internals(&self) -> Vec<u32> {
        self.live_ids()
            .into_iter()
            .filter(|&id| !self.nodes[id as usize].is_leaf())
            .collect()
    }

    /// Internal nodes whose both children are leaves.
    fn nogs(&self) -> Vec<u32> {
        self.internals()
            .into_iter()
            .filter(|&id| {
                let n = self.nodes[id as usize];
                self.nodes[n.left as usize].is_leaf() && self.nodes[n.right as usize].is_leaf()
            })
            .collect()
    }

    /// Leaf ids in the subtree rooted at `start`.
    fn subtree_leaves(&self, start: u32) -> Vec<u32> {
        let mut out = Vec::new();
        let mut stack = vec![start];
        while let Some(id) = stack.pop() {
            let node = self.nodes[id as usize];
            if node.is_leaf() {
                out.push(id);
            } else {
                stack.push(node.left);
                stack.push(node.right);
            }
        }
        out
    }

    /// Routes a point from `start`, optionally overriding rules at up to two
    /// nodes (used to evaluate change/swap proposals without mutating).
    fn route_with(
        &self,
        start: u32,
        value_of: impl Fn(u32) -> f64,
        overrides: &[(u32, u32, f64)],
    ) -> u32 {
        let mut id = start;
        loop {
            let node = self.nodes[id as usize];
            if node.is_leaf() {
                return id;
            }
            let (var, cut) = overrides
                .iter()
                .find(|(o, _, _)| *o == id)
                .map(|&(_, v, c)| (v, c))
                .unwrap_or((node.var, node.cut));
            id = if value_of(var) <= cut {
                node.left
            } else {
                node.right
            };
        }
    }
}

/// Weighted sum-of-trees regression sampler.
#[derive(Debug, Clone)]
pub struct BartOutcome {
    pub hyper: BartHyper,
    n: usize,
    /// Design dimension: exposure plus covariates.
    d: usize,
    /// Row-major n x d; column 0 is the exposure, refreshed every iteration.
    design: Vec<f64>,
    y_int: Vec<f64>,
    weights: Vec<f64>,
    center: f64,
    scale: f64,
    /// Residual variance on the internal scale.
    pub psi2: f64,
    sigma_mu2: f64,
    ig_prior: IgPrior,
    cuts: Vec<Vec<f64>>,
    trees: Vec<Tree>,
    total_fit: Vec<f64>,
}

impl BartOutcome {
    pub fn new(
        x_rows: &[Vec<f64>],
        a0: &[f64],
        ybar: &[f64],
        weights: &[f64],
        hyper: BartHyper,
    ) -> Result<Self> {
        let n = ybar.len();
        if n == 0 || a0.len() != n || x_rows.len() != n || weights.len() != n {
            return Err(Error::Validation("tree model: length mismatch".into()));
        }
        let p = x_rows[0].len();
        let d = 1 + p;
        let mut design = vec![0.0; n * d];
        for i in 0..n {
            design[i * d] = a0[i];
            design[i * d + 1..(i + 1) * d].copy_from_slice(&x_rows[i]);
        }

        let (lo, hi) = ybar
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let center = 0.5 * (lo + hi);
        let scale = if hi - lo > 0.0 { hi - lo } else { 1.0 };
        let y_int: Vec<f64> = ybar.iter().map(|&v| (v - center) / scale).collect();

        let t = hyper.n_trees as f64;
        let sigma_mu = 1.0 / (2.0 * hyper.k * t.sqrt());
        let psi2_wls = weighted_ls_variance(&design, n, d, &y_int, weights).max(1e-10);
        let chi = ChiSquared::new(hyper.nu_df)
            .map_err(|e| Error::Config(format!("tree model: bad nu_df: {e}")))?;
        let lambda = (psi2_wls * chi.inverse_cdf(1.0 - hyper.q_quantile) / hyper.nu_df).max(1e-10);

        let mut cuts = Vec::with_capacity(d);
        for v in 0..d {
            let col: Vec<f64> = (0..n).map(|i| design[i * d + v]).collect();
            cuts.push(quantile_cuts(&col, hyper.n_cuts));
        }

        Ok(BartOutcome {
            hyper,
            n,
            d,
            design,
            y_int,
            weights: weights.to_vec(),
            center,
            scale,
            psi2: psi2_wls,
            sigma_mu2: sigma_mu * sigma_mu,
            ig_prior: IgPrior {
                shape: hyper.nu_df / 2.0,
                rate: hyper.nu_df * lambda / 2.0,
            },
            cuts,
            trees: vec![Tree::stump(n); hyper.n_trees],
            total_fit: vec![0.0; n],
        })
    }

    /// Marginal log likelihood of one leaf's weighted residuals with the
    /// mean integrated out (terms that cancel in move ratios dropped).
    fn leaf_log_marginal(&self, w_sum: f64, s_sum: f64) -> f64 {
        let v = self.psi2 + self.sigma_mu2 * w_sum;
        0.5 * (self.psi2 / v).ln() + self.sigma_mu2 * s_sum * s_sum / (2.0 * self.psi2 * v)
    }

    fn design_at(&self, i: usize, var: u32) -> f64 {
        self.design[i * self.d + var as usize]
    }

    /// One full Gibbs sweep at the current exposure draws: refresh the
    /// exposure column and cut grid, re-route every point, update each tree
    /// by one structural move plus leaf draws, then draw the variance.
    pub fn iterate<R: Rng>(&mut self, a: &[f64], rng: &mut R) -> Result<()> {
        debug_assert_eq!(a.len(), self.n);
        for i in 0..self.n {
            self.design[i * self.d] = a[i];
        }
        self.cuts[0] = quantile_cuts(a, self.hyper.n_cuts);

        // Exposures moved, so every assignment is stale.
        self.total_fit.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..self.trees.len() {
            for i in 0..self.n {
                let leaf = self.trees[t].route_with(0, |v| self.design_at(i, v), &[]);
                self.trees[t].assign[i] = leaf;
                self.total_fit[i] += self.trees[t].nodes[leaf as usize].value;
            }
        }

        let mut partial = vec![0.0; self.n];
        let mut resid = vec![0.0; self.n];
        for t in 0..self.trees.len() {
            for i in 0..self.n {
                let tree_fit = self.trees[t].nodes[self.trees[t].assign[i] as usize].value;
                partial[i] = self.total_fit[i] - tree_fit;
                resid[i] = self.y_int[i] - partial[i];
            }
            self.move_tree(t, &resid, rng);
            self.draw_leaves(t, &resid, rng);
            for i in 0..self.n {
                let tree_fit = self.trees[t].nodes[self.trees[t].assign[i] as usize].value;
                self.total_fit[i] = partial[i] + tree_fit;
            }
        }

        // Rebuild the fit in tree order so the cached values are bitwise
        // identical to a fresh `predict` at the training points.
        self.total_fit.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..self.trees.len() {
            for i in 0..self.n {
                self.total_fit[i] += self.trees[t].nodes[self.trees[t].assign[i] as usize].value;
            }
        }

        let wrss: f64 = (0..self.n)
            .map(|i| self.weights[i] * (self.y_int[i] - self.total_fit[i]).powi(2))
            .sum();
        self.psi2 = sample_variance_ig(self.ig_prior, self.n as f64, wrss, rng).max(1e-30);
        Ok(())
    }

    /// Ensemble prediction at training point `i` for the exposure vector the
    /// last sweep ran with, read off the cached fit.
    pub fn cached_prediction(&self, i: usize) -> f64 {
        self.center + self.scale * self.total_fit[i]
    }

    /// Log density of the observed rate at training point `i` under the
    /// cached fit.
    pub fn cached_loglik(&self, i: usize, ybar: f64, n_offset: f64) -> f64 {
        let var = self.psi2_original() / n_offset;
        let resid = ybar - self.cached_prediction(i);
        -0.5 * (2.0 * std::f64::consts::PI * var).ln() - resid * resid / (2.0 * var)
    }

    fn move_tree<R: Rng>(&mut self, t: usize, resid: &[f64], rng: &mut R) {
        let h = self.hyper;
        let u: f64 = rng.random();
        let (log_ratio, commit) = if u < h.p_grow {
            match self.propose_grow(t, resid, rng) {
                Some(v) => v,
                None => return,
            }
        } else if u < h.p_grow + h.p_prune {
            match self.propose_prune(t, resid, rng) {
                Some(v) => v,
                None => return,
            }
        } else if u < h.p_grow + h.p_prune + h.p_change {
            match self.propose_change(t, resid, rng) {
                Some(v) => v,
                None => return,
            }
        } else {
            match self.propose_swap(t, resid, rng) {
                Some(v) => v,
                None => return,
            }
        };
        if rng.random::<f64>().ln() < log_ratio {
            self.apply(t, commit);
        }
    }

    /// Split-probability pieces of the structure prior at a given depth.
    fn p_split(&self, depth: u16) -> f64 {
        self.hyper.split_alpha * (1.0 + depth as f64).powf(-self.hyper.split_beta)
    }

    fn grow_structure_log_ratio(&self, depth: u16) -> f64 {
        let ps = self.p_split(depth);
        let ps_child = self.p_split(depth + 1);
        ps.ln() + 2.0 * (1.0 - ps_child).ln() - (1.0 - ps).ln()
    }

    fn propose_grow<R: Rng>(
        &self,
        t: usize,
        resid: &[f64],
        rng: &mut R,
    ) -> Option<(f64, Commit)> {
        let tree = &self.trees[t];
        let leaves = tree.leaves();
        let leaf = leaves[rng.random_range(0..leaves.len())];
        let var = rng.random_range(0..self.d) as u32;
        let cut_grid = &self.cuts[var as usize];
        if cut_grid.is_empty() {
            return None;
        }
        let cut = cut_grid[rng.random_range(0..cut_grid.len())];

        let mut wl = 0.0;
        let mut sl = 0.0;
        let mut wr = 0.0;
        let mut sr = 0.0;
        let mut members = Vec::new();
        for i in 0..self.n {
            if tree.assign[i] == leaf {
                members.push(i as u32);
                if self.design_at(i, var) <= cut {
                    wl += self.weights[i];
                    sl += self.weights[i] * resid[i];
                } else {
                    wr += self.weights[i];
                    sr += self.weights[i] * resid[i];
                }
            }
        }
        if wl == 0.0 || wr == 0.0 {
            return None; // empty child: auto-reject
        }

        let depth = tree.nodes[leaf as usize].depth;
        let delta = self.leaf_log_marginal(wl, sl) + self.leaf_log_marginal(wr, sr)
            - self.leaf_log_marginal(wl + wr, sl + sr);

        let n_leaves = leaves.len() as f64;
        let parent = tree.nodes[leaf as usize].parent;
        let parent_was_nog = parent != NONE && {
            let pn = tree.nodes[parent as usize];
            let sibling = if pn.left == leaf { pn.right } else { pn.left };
            tree.nodes[sibling as usize].is_leaf()
        };
        let n_nog_after = tree.nogs().len() as f64 + 1.0 - parent_was_nog as u8 as f64;

        let log_ratio = delta
            + self.grow_structure_log_ratio(depth)
            + self.hyper.p_prune.ln()
            - self.hyper.p_grow.ln()
            + n_leaves.ln()
            - n_nog_after.ln();
        Some((
            log_ratio,
            Commit::Grow {
                leaf,
                var,
                cut,
                members,
            },
        ))
    }

    fn propose_prune<R: Rng>(
        &self,
        t: usize,
        resid: &[f64],
        rng: &mut R,
    ) -> Option<(f64, Commit)> {
        let tree = &self.trees[t];
        let nogs = tree.nogs();
        if nogs.is_empty() {
            return None;
        }
        let nog = nogs[rng.random_range(0..nogs.len())];
        let node = tree.nodes[nog as usize];

        let mut wl = 0.0;
        let mut sl = 0.0;
        let mut wr = 0.0;
        let mut sr = 0.0;
        let mut members = Vec::new();
        for i in 0..self.n {
            let a = tree.assign[i];
            if a == node.left {
                wl += self.weights[i];
                sl += self.weights[i] * resid[i];
                members.push(i as u32);
            } else if a == node.right {
                wr += self.weights[i];
                sr += self.weights[i] * resid[i];
                members.push(i as u32);
            }
        }

        let delta = self.leaf_log_marginal(wl + wr, sl + sr)
            - self.leaf_log_marginal(wl, sl)
            - self.leaf_log_marginal(wr, sr);
        let n_leaves_after = tree.leaves().len() as f64 - 1.0;
        let log_ratio = delta - self.grow_structure_log_ratio(node.depth)
            + self.hyper.p_grow.ln()
            - self.hyper.p_prune.ln()
            + (nogs.len() as f64).ln()
            - n_leaves_after.ln();
        Some((log_ratio, Commit::Prune { nog, members }))
    }

    /// Shared evaluation for change/swap: re-route the subtree members under
    /// the rule overrides and return the marginal-likelihood difference,
    /// unless some leaf would end up empty.
    fn subtree_delta(
        &self,
        t: usize,
        resid: &[f64],
        top: u32,
        overrides: &[(u32, u32, f64)],
    ) -> Option<(f64, Vec<(u32, u32)>)> {
        let tree = &self.trees[t];
        let leaves = tree.subtree_leaves(top);
        let mut in_subtree = vec![false; tree.nodes.len()];
        for &l in &leaves {
            in_subtree[l as usize] = true;
        }
        let stat_idx: std::collections::HashMap<u32, usize> =
            leaves.iter().enumerate().map(|(k, &l)| (l, k)).collect();
        let mut old_w = vec![0.0; leaves.len()];
        let mut old_s = vec![0.0; leaves.len()];
        let mut new_w = vec![0.0; leaves.len()];
        let mut new_s = vec![0.0; leaves.len()];
        let mut reassign = Vec::new();
        for i in 0..self.n {
            let cur = tree.assign[i];
            if !in_subtree[cur as usize] {
                continue;
            }
            let k_old = stat_idx[&cur];
            old_w[k_old] += self.weights[i];
            old_s[k_old] += self.weights[i] * resid[i];
            let dest = tree.route_with(top, |v| self.design_at(i, v), overrides);
            let k_new = stat_idx[&dest];
            new_w[k_new] += self.weights[i];
            new_s[k_new] += self.weights[i] * resid[i];
            reassign.push((i as u32, dest));
        }
        if new_w.iter().any(|&w| w == 0.0) {
            return None; // empty leaf: auto-reject
        }
        let mut delta = 0.0;
        for k in 0..leaves.len() {
            delta += self.leaf_log_marginal(new_w[k], new_s[k])
                - self.leaf_log_marginal(old_w[k], old_s[k]);
        }
        Some((delta, reassign))
    }

    fn propose_change<R: Rng>(
        &self,
        t: usize,
        resid: &[f64],
        rng: &mut R,
    ) -> Option<(f64, Commit)> {
        let tree = &self.trees[t];
        let internals = tree.internals();
        if internals.is_empty() {
            return None;
        }
        let node = internals[rng.random_range(0..internals.len())];
        let var = rng.random_range(0..self.d) as u32;
        let grid = &self.cuts[var as usize];
        if grid.is_empty() {
            return None;
        }
        let cut = grid[rng.random_range(0..grid.len())];
        // Same uniform proposal both directions: the ratio is the
        // marginal-likelihood difference alone.
        let (delta, reassign) = self.subtree_delta(t, resid, node, &[(node, var, cut)])?;
        Some((
            delta,
            Commit::Rules {
                rules: vec![(node, var, cut)],
                reassign,
            },
        ))
    }

    fn propose_swap<R: Rng>(
        &self,
        t: usize,
        resid: &[f64],
        rng: &mut R,
    ) -> Option<(f64, Commit)> {
        let tree = &self.trees[t];
        let mut pairs = Vec::new();
        for &u in &tree.internals() {
            let n = tree.nodes[u as usize];
            for child in [n.left, n.right] {
                if !tree.nodes[child as usize].is_leaf() {
                    pairs.push((u, child));
                }
            }
        }
        if pairs.is_empty() {
            return None;
        }
        let (parent, child) = pairs[rng.random_range(0..pairs.len())];
        let pn = tree.nodes[parent as usize];
        let cn = tree.nodes[child as usize];
        let overrides = [(parent, cn.var, cn.cut), (child, pn.var, pn.cut)];
        let (delta, reassign) = self.subtree_delta(t, resid, parent, &overrides)?;
        Some((
            delta,
            Commit::Rules {
                rules: overrides.to_vec(),
                reassign,
            },
        ))
    }

    fn apply(&mut self, t: usize, commit: Commit) {
        let tree = &mut self.trees[t];
        match commit {
            Commit::Grow {
                leaf,
                var,
                cut,
                members,
            } => {
                let depth = tree.nodes[leaf as usize].depth + 1;
                let left = tree.alloc(Node::leaf(leaf, depth));
                let right = tree.alloc(Node::leaf(leaf, depth));
                {
                    let node = &mut tree.nodes[leaf as usize];
                    node.var = var;
                    node.cut = cut;
                    node.left = left;
                    node.right = right;
                }
                for &i in &members {
                    let i = i as usize;
                    tree.assign[i] = if self.design[i * self.d + var as usize] <= cut {
                        left
                    } else {
                        right
                    };
                }
            }
            Commit::Prune { nog, members } => {
                let node = tree.nodes[nog as usize];
                tree.free.push(node.left);
                tree.free.push(node.right);
                let n = &mut tree.nodes[nog as usize];
                n.var = NONE;
                n.left = NONE;
                n.right = NONE;
                for &i in &members {
                    tree.assign[i as usize] = nog;
                }
            }
            Commit::Rules { rules, reassign } => {
                for (id, var, cut) in rules {
                    let n = &mut tree.nodes[id as usize];
                    n.var = var;
                    n.cut = cut;
                }
                for (i, dest) in reassign {
                    tree.assign[i as usize] = dest;
                }
            }
        }
    }

    /// Conjugate Gaussian draws for every leaf mean of tree `t`.
    fn draw_leaves<R: Rng>(&mut self, t: usize, resid: &[f64], rng: &mut R) {
        let n_nodes = self.trees[t].nodes.len();
        let mut w_sum = vec![0.0; n_nodes];
        let mut s_sum = vec![0.0; n_nodes];
        for i in 0..self.n {
            let leaf = self.trees[t].assign[i] as usize;
            w_sum[leaf] += self.weights[i];
            s_sum[leaf] += self.weights[i] * resid[i];
        }
        for leaf in self.trees[t].leaves() {
            let l = leaf as usize;
            let prec = w_sum[l] / self.psi2 + 1.0 / self.sigma_mu2;
            let var = prec.recip();
            let mean = var * s_sum[l] / self.psi2;
            self.trees[t].nodes[l].value = mean + var.sqrt() * rng.sample::<f64, _>(StandardNormal);
        }
    }

    /// Ensemble prediction on the response scale.
    pub fn predict(&self, a: f64, x: &[f64]) -> f64 {
        let value_of = |var: u32| if var == 0 { a } else { x[var as usize - 1] };
        let mut sum = 0.0;
        for tree in &self.trees {
            let mut id = 0u32;
            loop {
                let node = tree.nodes[id as usize];
                if node.is_leaf() {
                    sum += node.value;
                    break;
                }
                id = if value_of(node.var) <= node.cut {
                    node.left
                } else {
                    node.right
                };
            }
        }
        self.center + self.scale * sum
    }

    /// Ensemble predictions over the exposure-row by covariate-column grid,
    /// returned column-major. Each tree is evaluated once by partitioning
    /// the row set at exposure splits and the column set at covariate
    /// splits, which is far cheaper than per-entry traversal.
    pub fn predict_grid(&self, a_rows: &[f64], x_cols: &[&[f64]]) -> Vec<f64> {
        let nr = a_rows.len();
        let nc = x_cols.len();
        let mut out = vec![0.0f64; nr * nc];
        let rows: Vec<u32> = (0..nr as u32).collect();
        let cols: Vec<u32> = (0..nc as u32).collect();
        let mut stack: Vec<(u32, Vec<u32>, Vec<u32>)> = Vec::new();
        for tree in &self.trees {
            stack.push((0, rows.clone(), cols.clone()));
            while let Some((id, rows, cols)) = stack.pop() {
                let node = tree.nodes[id as usize];
                if node.is_leaf() {
                    for &c in &cols {
                        let base = c as usize * nr;
                        for &r in &rows {
                            out[base + r as usize] += node.value;
                        }
                    }
                } else if node.var == 0 {
                    let (left, right): (Vec<u32>, Vec<u32>) = rows
                        .iter()
                        .copied()
                        .partition(|&r| a_rows[r as usize] <= node.cut);
                    if !left.is_empty() {
                        stack.push((node.left, left, cols.clone()));
                    }
                    if !right.is_empty() {
                        stack.push((node.right, right, cols));
                    }
                } else {
                    let v = node.var as usize - 1;
                    let (left, right): (Vec<u32>, Vec<u32>) = cols
                        .iter()
                        .copied()
                        .partition(|&c| x_cols[c as usize][v] <= node.cut);
                    if !left.is_empty() {
                        stack.push((node.left, rows.clone(), left));
                    }
                    if !right.is_empty() {
                        stack.push((node.right, rows, right));
                    }
                }
            }
        }
        for v in out.iter_mut() {
            *v = self.center + self.scale * *v;
        }
        out
    }

    /// Gaussian log density of the observed rate at exposure `a`:
    /// `N(ybar; predict(a, x), psi2_orig / n_offset)`.
    pub fn loglik(&self, ybar: f64, n_offset: f64, a: f64, x: &[f64]) -> f64 {
        let var = self.psi2_original() / n_offset;
        let resid = ybar - self.predict(a, x);
        -0.5 * (2.0 * std::f64::consts::PI * var).ln() - resid * resid / (2.0 * var)
    }

    /// Residual variance on the response scale.
    pub fn psi2_original(&self) -> f64 {
        self.scale * self.scale * self.psi2
    }

    /// Fitted values at the training points for the given exposures.
    pub fn fitted(&self, a: &[f64], x_rows: &[Vec<f64>]) -> Vec<f64> {
        (0..self.n).map(|i| self.predict(a[i], &x_rows[i])).collect()
    }

    #[cfg(test)]
    fn membership_counts_per_tree(&self) -> Vec<usize> {
        self.trees
            .iter()
            .map(|t| {
                let leaves = t.leaves();
                t.assign
                    .iter()
                    .filter(|a| leaves.contains(a))
                    .count()
            })
            .collect()
    }
}

enum Commit {
    Grow {
        leaf: u32,
        var: u32,
        cut: f64,
        members: Vec<u32>,
    },
    Prune {
        nog: u32,
        members: Vec<u32>,
    },
    Rules {
        rules: Vec<(u32, u32, f64)>,
        reassign: Vec<(u32, u32)>,
    },
}

/// Interior empirical-quantile cut grid (duplicates removed).
fn quantile_cuts(values: &[f64], n_cuts: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let mut cuts = Vec::with_capacity(n_cuts);
    for j in 1..=n_cuts {
        let pos = (j as f64 / (n_cuts + 1) as f64 * n as f64).floor() as usize;
        cuts.push(sorted[pos.min(n - 1)]);
    }
    cuts.dedup();
    // A constant column keeps its single degenerate cut; grow proposals on
    // it always produce an empty child and are rejected.
    cuts
}

/// Precision-weighted least-squares residual variance on `[1, design]`.
fn weighted_ls_variance(design: &[f64], n: usize, d: usize, y: &[f64], w: &[f64]) -> f64 {
    use nalgebra::{Cholesky, DMatrix, DVector};
    let cols = d + 1;
    let mut xtx = DMatrix::zeros(cols, cols);
    let mut xty = DVector::zeros(cols);
    let mut row = DVector::zeros(cols);
    for i in 0..n {
        row[0] = 1.0;
        for k in 0..d {
            row[k + 1] = design[i * d + k];
        }
        xtx.syger(w[i], &row, &row, 1.0);
        xty.axpy(w[i] * y[i], &row, 1.0);
    }
    for r in 0..cols {
        for c in (r + 1)..cols {
            xtx[(r, c)] = xtx[(c, r)];
        }
        xtx[(r, r)] += 1e-8;
    }
    let beta = match Cholesky::new(xtx) {
        Some(ch) => ch.solve(&xty),
        None => return 1.0,
    };
    let mut wrss = 0.0;
    for i in 0..n {
        let mut fit = beta[0];
        for k in 0..d {
            fit += beta[k + 1] * design[i * d + k];
        }
        wrss += w[i] * (y[i] - fit).powi(2);
    }
    wrss / (n as f64 - cols as f64).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::Distribution;

    fn uniform_xy(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..4).map(|_| rng.random::<f64>()).collect())
            .collect();
        let a: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        (x, a, rng)
    }

    #[test]
    fn constant_response_is_recovered() {
        let (x, a, mut rng) = uniform_xy(120, 0);
        let ybar = vec![3.5; 120];
        let weights = vec![10.0; 120];
        let hyper = BartHyper {
            n_trees: 50,
            ..Default::default()
        };
        let mut model = BartOutcome::new(&x, &a, &ybar, &weights, hyper).unwrap();
        for _ in 0..200 {
            model.iterate(&a, &mut rng).unwrap();
        }
        for i in 0..120 {
            let err = (model.predict(a[i], &x[i]) - 3.5).abs();
            assert!(err < 1e-6, "err = {err}");
        }
        assert!(model.psi2_original() < 1e-6);
    }

    #[test]
    fn stump_leaf_posterior_matches_conjugate_normal() {
        // One tree held as a stump (structural moves disabled through the
        // move probabilities): the leaf-mean draws must follow the weighted
        // conjugate Gaussian.
        let n = 30;
        let (x, a, mut rng) = uniform_xy(n, 1);
        let ybar: Vec<f64> = (0..n).map(|i| (i as f64 / n as f64) - 0.2).collect();
        let weights: Vec<f64> = (0..n).map(|i| 1.0 + (i % 7) as f64).collect();
        let hyper = BartHyper {
            n_trees: 1,
            p_grow: 0.0,
            p_prune: 0.0,
            p_change: 0.0,
            p_swap: 1.0, // swap on a stump is a no-op
            ..Default::default()
        };
        let mut model = BartOutcome::new(&x, &a, &ybar, &weights, hyper).unwrap();
        let psi2 = model.psi2;
        let sigma_mu2 = model.sigma_mu2;
        // Freeze the variance draw by restoring it each iteration.
        let w_sum: f64 = weights.iter().sum();
        let s_sum: f64 = weights
            .iter()
            .zip(&model.y_int)
            .map(|(w, y)| w * y)
            .sum();
        let prec = w_sum / psi2 + 1.0 / sigma_mu2;
        let expect_mean = (s_sum / psi2) / prec;
        let expect_var = prec.recip();

        let draws = 10_000;
        let mut sum = 0.0;
        for _ in 0..draws {
            model.psi2 = psi2;
            model.iterate(&a, &mut rng).unwrap();
            sum += model.trees[0].nodes[0].value;
        }
        let mean = sum / draws as f64;
        let se = (expect_var / draws as f64).sqrt();
        assert!(
            (mean - expect_mean).abs() < 3.0 * se,
            "{mean} vs {expect_mean}"
        );
    }

    #[test]
    fn nonlinear_signal_beats_linear_least_squares() {
        // Friedman-style test function; compare fits against the noiseless
        // truth. The linear baseline is an ordinary least-squares fit.
        let n = 500;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..4).map(|_| rng.random::<f64>()).collect())
            .collect();
        let a: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let truth: Vec<f64> = (0..n)
            .map(|i| {
                10.0 * (std::f64::consts::PI * a[i] * x[i][0]).sin()
                    + 20.0 * (x[i][1] - 0.5).powi(2)
                    + 10.0 * x[i][2]
                    + 5.0 * x[i][3]
            })
            .collect();
        let noise = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let ybar: Vec<f64> = truth.iter().map(|t| t + noise.sample(&mut rng)).collect();
        let weights = vec![1.0; n];

        let mut model =
            BartOutcome::new(&x, &a, &ybar, &weights, BartHyper::default()).unwrap();
        for _ in 0..300 {
            model.iterate(&a, &mut rng).unwrap();
        }
        // Posterior-mean fit over thinned draws.
        let mut fit = vec![0.0; n];
        let draws = 60;
        for _ in 0..draws {
            model.iterate(&a, &mut rng).unwrap();
            for i in 0..n {
                fit[i] += model.predict(a[i], &x[i]) / draws as f64;
            }
        }
        let bart_rmse = ((0..n)
            .map(|i| (fit[i] - truth[i]).powi(2))
            .sum::<f64>()
            / n as f64)
            .sqrt();

        // OLS on [1, a, x].
        let d = 5;
        let mut design = vec![0.0; n * d];
        for i in 0..n {
            design[i * d] = a[i];
            design[i * d + 1..(i + 1) * d].copy_from_slice(&x[i]);
        }
        let ols_var = weighted_ls_variance(&design, n, d, &ybar, &weights);
        // Residual variance against observed y upper-bounds fit error vs
        // truth; recompute vs truth directly for the comparison.
        let _ = ols_var;
        let (beta, fit_lin) = {
            use nalgebra::{DMatrix, DVector};
            let mut m = DMatrix::zeros(n, d + 1);
            for i in 0..n {
                m[(i, 0)] = 1.0;
                m[(i, 1)] = a[i];
                for k in 0..4 {
                    m[(i, 2 + k)] = x[i][k];
                }
            }
            let yv = DVector::from_column_slice(&ybar);
            let beta = (m.transpose() * &m)
                .try_inverse()
                .unwrap()
                * m.transpose()
                * yv;
            let fit = &m * &beta;
            (beta, fit)
        };
        let _ = beta;
        let ols_rmse = ((0..n)
            .map(|i| (fit_lin[i] - truth[i]).powi(2))
            .sum::<f64>()
            / n as f64)
            .sqrt();
        assert!(
            bart_rmse < 0.6 * ols_rmse,
            "tree rmse {bart_rmse} vs linear rmse {ols_rmse}"
        );
    }

    #[test]
    fn predictions_are_deterministic_and_bounded() {
        let (x, a, mut rng) = uniform_xy(80, 3);
        let ybar: Vec<f64> = (0..80).map(|i| (i % 9) as f64 * 0.1).collect();
        let weights = vec![5.0; 80];
        let hyper = BartHyper {
            n_trees: 30,
            ..Default::default()
        };
        let mut model = BartOutcome::new(&x, &a, &ybar, &weights, hyper).unwrap();
        for _ in 0..50 {
            model.iterate(&a, &mut rng).unwrap();
        }
        let p1 = model.predict(a[3], &x[3]);
        let p2 = model.predict(a[3], &x[3]);
        assert_eq!(p1, p2);
        // Permuting prediction rows permutes outputs identically.
        let fwd: Vec<f64> = (0..80).map(|i| model.predict(a[i], &x[i])).collect();
        let mut rev: Vec<f64> = (0..80).rev().map(|i| model.predict(a[i], &x[i])).collect();
        rev.reverse();
        assert_eq!(fwd, rev);
        // Far outside the training range the trees return a nearest-region
        // leaf value: finite, inside the observed response span.
        let out = model.predict(1e6, &x[0]);
        assert!(out.is_finite());
        let lo = ybar.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ybar.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let slack = 0.5 * (hi - lo);
        assert!(out > lo - slack && out < hi + slack, "{out}");
    }

    #[test]
    fn loglik_matches_direct_gaussian_density() {
        let (x, a, mut rng) = uniform_xy(40, 4);
        let ybar: Vec<f64> = (0..40).map(|i| 0.05 * (i as f64).sin()).collect();
        let weights = vec![7.0; 40];
        let mut model = BartOutcome::new(
            &x,
            &a,
            &ybar,
            &weights,
            BartHyper {
                n_trees: 20,
                ..Default::default()
            },
        )
        .unwrap();
        for _ in 0..20 {
            model.iterate(&a, &mut rng).unwrap();
        }
        let n_offset = 13.0;
        let pred = model.predict(a[5], &x[5]);
        let var = model.psi2_original() / n_offset;
        let direct = -0.5 * (2.0 * std::f64::consts::PI * var).ln()
            - (ybar[5] - pred).powi(2) / (2.0 * var);
        let ll = model.loglik(ybar[5], n_offset, a[5], &x[5]);
        assert!((ll - direct).abs() < 1e-12);

        // Zero residual: the density is just the normalizing constant.
        let ll0 = model.loglik(pred, n_offset, a[5], &x[5]);
        assert!((ll0 + 0.5 * (2.0 * std::f64::consts::PI * var).ln()).abs() < 1e-12);

        // Doubling the offset changes the log density by
        // log(2)/2 - resid^2 n/(2 psi2).
        let ll2 = model.loglik(ybar[5], 2.0 * n_offset, a[5], &x[5]);
        let expected = 0.5 * 2f64.ln()
            - (ybar[5] - pred).powi(2) * n_offset / (2.0 * model.psi2_original());
        assert!((ll2 - ll - expected).abs() < 1e-12);
    }

    #[test]
    fn membership_counts_stay_complete() {
        let (x, a, mut rng) = uniform_xy(60, 5);
        let ybar: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37).cos()).collect();
        let weights = vec![2.0; 60];
        let mut model = BartOutcome::new(
            &x,
            &a,
            &ybar,
            &weights,
            BartHyper {
                n_trees: 10,
                ..Default::default()
            },
        )
        .unwrap();
        for _ in 0..100 {
            model.iterate(&a, &mut rng).unwrap();
            for count in model.membership_counts_per_tree() {
                assert_eq!(count, 60);
            }
        }
    }

    #[test]
    fn grow_then_prune_ratios_cancel() {
        let (x, a, mut rng) = uniform_xy(50, 6);
        let ybar = vec![0.0; 50];
        let weights = vec![1.0; 50];
        let mut model = BartOutcome::new(
            &x,
            &a,
            &ybar,
            &weights,
            BartHyper {
                n_trees: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let resid = model.y_int.clone();
        // Propose a grow on the stump; commit it; the matching prune on the
        // single nog must have the exactly opposite log ratio.
        let (grow_ratio, commit) = loop {
            if let Some(v) = model.propose_grow(0, &resid, &mut rng) {
                break v;
            }
        };
        model.apply(0, commit);
        let (prune_ratio, _) = model.propose_prune(0, &resid, &mut rng).unwrap();
        assert!(
            (grow_ratio + prune_ratio).abs() < 1e-10,
            "{grow_ratio} vs {prune_ratio}"
        );
    }

    #[test]
    fn grid_prediction_matches_per_entry_traversal() {
        let (x, a, mut rng) = uniform_xy(50, 8);
        let ybar: Vec<f64> = (0..50).map(|i| (i as f64 * 0.23).sin()).collect();
        let weights = vec![3.0; 50];
        let mut model = BartOutcome::new(
            &x,
            &a,
            &ybar,
            &weights,
            BartHyper {
                n_trees: 40,
                ..Default::default()
            },
        )
        .unwrap();
        for _ in 0..40 {
            model.iterate(&a, &mut rng).unwrap();
        }
        let x_refs: Vec<&[f64]> = x.iter().map(|v| v.as_slice()).collect();
        let grid = model.predict_grid(&a, &x_refs);
        for c in 0..50 {
            for r in 0..50 {
                assert_eq!(grid[c * 50 + r], model.predict(a[r], &x[c]));
            }
        }
        // The cached training fit agrees with a fresh traversal bit for bit.
        for i in 0..50 {
            assert_eq!(model.cached_prediction(i), model.predict(a[i], &x[i]));
        }
    }

    #[test]
    fn affine_response_transform_round_trips() {
        let (x, a, _) = uniform_xy(70, 7);
        let ybar: Vec<f64> = (0..70).map(|i| (i as f64 * 0.17).sin() + 0.4).collect();
        let y2: Vec<f64> = ybar.iter().map(|v| 2.0 * v + 3.0).collect();
        let weights = vec![4.0; 70];
        let hyper = BartHyper {
            n_trees: 25,
            ..Default::default()
        };
        let mut m1 = BartOutcome::new(&x, &a, &ybar, &weights, hyper).unwrap();
        let mut m2 = BartOutcome::new(&x, &a, &y2, &weights, hyper).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..60 {
            m1.iterate(&a, &mut r1).unwrap();
            m2.iterate(&a, &mut r2).unwrap();
        }
        for i in 0..70 {
            let p1 = m1.predict(a[i], &x[i]);
            let p2 = m2.predict(a[i], &x[i]);
            assert!(
                (p2 - (2.0 * p1 + 3.0)).abs() < 1e-10,
                "{p2} vs {}",
                2.0 * p1 + 3.0
            );
        }
    }
}
