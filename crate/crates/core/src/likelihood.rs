//! Log-space likelihood kernel: the Gamma-Poisson marginal of discretized
//! group affinities, the rose-tree mixing proportion, the recursive tree
//! likelihood and the Bayes-factor merge score.

use libm::lgamma;

use crate::affinity::{group_affinity, AffinityStats, DEFAULT_RESOLUTION, N_CLASSES};
use crate::error::{Error, Result};
use crate::rose_tree::{MergeKind, TaskTree};

/// Shape (`alpha`) and rate (`beta`) of the Gamma prior for each affinity class,
/// in the order term, url, session, embedding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaPoissonParams {
    pub alpha: [f64; N_CLASSES],
    pub beta: [f64; N_CLASSES],
}

impl GammaPoissonParams {
    pub fn uniform(alpha: f64, beta: f64) -> Self {
        GammaPoissonParams {
            alpha: [alpha; N_CLASSES],
            beta: [beta; N_CLASSES],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for k in 0..N_CLASSES {
            check_positive("alpha", self.alpha[k])?;
            check_positive("beta", self.beta[k])?;
        }
        Ok(())
    }
}

impl Default for GammaPoissonParams {
    fn default() -> Self {
        Self::uniform(1.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Mixing hyperparameter, strictly inside (0, 1).
    pub gamma: f64,
    pub params: GammaPoissonParams,
    pub resolution: u32,
}

impl ModelConfig {
    pub fn new(gamma: f64, params: GammaPoissonParams, resolution: u32) -> Result<Self> {
        let c = ModelConfig {
            gamma,
            params,
            resolution,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Domain(format!(
                "gamma must lie strictly between 0 and 1, got {}",
                self.gamma
            )));
        }
        if self.resolution == 0 {
            return Err(Error::Domain("affinity resolution must be at least 1".into()));
        }
        self.params.validate()
    }

    /// Log marginal of a group's statistics under this configuration.
    pub fn group_log_marginal(&self, stats: &AffinityStats) -> f64 {
        log_marginal_unchecked(&group_affinity(stats, self.resolution), &self.params)
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            gamma: 0.5,
            params: GammaPoissonParams::default(),
            resolution: DEFAULT_RESOLUTION,
        }
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be positive and finite, got {v}")))
    }
}

/// `log p(r | alpha, beta)` for the Poisson rate integrated against a
/// Gamma(alpha, rate = beta) prior:
///
/// `Γ(α+r) / (r! Γ(α)) · (β/(β+1))^α · (1/(β+1))^r`
pub fn gamma_poisson_log_pmf(r: u64, alpha: f64, beta: f64) -> Result<f64> {
    check_positive("alpha", alpha)?;
    check_positive("beta", beta)?;
    Ok(log_pmf_unchecked(r, alpha, beta))
}

#[inline]
fn log_pmf_unchecked(r: u64, alpha: f64, beta: f64) -> f64 {
    let r = r as f64;
    let log_coeff = lgamma(alpha + r) - lgamma(r + 1.0) - lgamma(alpha);
    // log(β/(β+1)) = -log1p(1/β); log(1/(β+1)) = -log1p(β)
    log_coeff - alpha * (1.0 / beta).ln_1p() - r * beta.ln_1p()
}

/// Sum over the four classes of [`gamma_poisson_log_pmf`].
pub fn marginal_log_likelihood(counts: &[u64; N_CLASSES], params: &GammaPoissonParams) -> Result<f64> {
    params.validate()?;
    Ok(log_marginal_unchecked(counts, params))
}

fn log_marginal_unchecked(counts: &[u64; N_CLASSES], params: &GammaPoissonParams) -> f64 {
    (0..N_CLASSES)
        .map(|k| log_pmf_unchecked(counts[k], params.alpha[k], params.beta[k]))
        .sum()
}

/// `(log π, log(1 − π))` with `π = 1 − (1 − γ)^(n − 1)`.
///
/// A single child gives `π = 0`, reported as `log π = -∞`.
pub fn mixing_log_pi(n_children: usize, gamma: f64) -> (f64, f64) {
    debug_assert!(n_children >= 1);
    let exponent = n_children.saturating_sub(1) as f64;
    let log_one_minus_pi = exponent * (-gamma).ln_1p();
    if exponent == 0.0 {
        return (f64::NEG_INFINITY, 0.0);
    }
    // π = 1 − exp(log(1−π)) = −expm1(log(1−π))
    let log_pi = (-log_one_minus_pi.exp_m1()).ln();
    (log_pi, log_one_minus_pi)
}

/// `log(exp(a) + exp(b))`, exact when either side is `-∞`.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Log-likelihood of one node given its own log marginal and the summed
/// log-likelihoods of its children.
///
/// A node without children is a leaf and returns its marginal.
pub fn node_log_likelihood(log_marginal: f64, n_children: usize, children_sum: f64, gamma: f64) -> f64 {
    if n_children == 0 {
        return log_marginal;
    }
    let (log_pi, log_rest) = mixing_log_pi(n_children, gamma);
    log_add_exp(log_pi + log_marginal, log_rest + children_sum)
}

/// Left-to-right sum of children log-likelihoods, seeded with `init`.
///
/// Every code path that combines children goes through this fold so cached
/// and recomputed values agree to the last bit.
pub fn fold_children(init: f64, logliks: impl IntoIterator<Item = f64>) -> f64 {
    logliks.into_iter().fold(init, |acc, x| acc + x)
}

/// Recomputes and caches the log-likelihood of every node in `node`'s subtree.
pub fn tree_log_likelihood(node: &mut TaskTree, config: &ModelConfig) -> f64 {
    let mut children_sum = 0.0;
    for child in node.children.iter_mut() {
        children_sum += tree_log_likelihood(child, config);
    }
    let marginal = config.group_log_marginal(&node.stats);
    node.cached_loglik = node_log_likelihood(marginal, node.children.len(), children_sum, config.gamma);
    node.cached_loglik
}

/// What merge scoring needs to know about one side of a merge.
#[derive(Debug, Clone, Copy)]
pub struct TreeSummary<'a> {
    pub stats: AffinityStats,
    pub loglik: f64,
    /// Log-likelihoods of the direct children, in child order. Empty for a leaf.
    pub child_logliks: &'a [f64],
    /// `fold_children(0.0, child_logliks)`.
    pub child_sum: f64,
}

/// Shape and likelihood of a prospective merged node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergedNode {
    pub stats: AffinityStats,
    pub n_children: usize,
    pub child_sum: f64,
    pub loglik: f64,
}

/// Whether `kind` can merge `left` and `right`. Absorbing into or collapsing
/// a leaf would create a single-child node, so those require children.
pub fn merge_allowed(left: &TreeSummary, right: &TreeSummary, kind: MergeKind) -> bool {
    match kind {
        MergeKind::Join => true,
        MergeKind::AbsorbLeft => !left.child_logliks.is_empty(),
        MergeKind::AbsorbRight => !right.child_logliks.is_empty(),
        MergeKind::Collapse => !left.child_logliks.is_empty() && !right.child_logliks.is_empty(),
    }
}

/// The node obtained by merging `left` and `right` with `kind`, given the
/// stats over pairs that straddle the two trees.
///
/// Children orderings: Join `[left, right]`; AbsorbLeft `ch(left) ++ [right]`;
/// AbsorbRight `ch(right) ++ [left]`; Collapse `ch(left) ++ ch(right)`.
pub fn merged_node(
    left: &TreeSummary,
    right: &TreeSummary,
    cross: &AffinityStats,
    kind: MergeKind,
    config: &ModelConfig,
) -> MergedNode {
    let stats = left.stats.merged(&right.stats, cross);
    let (n_children, child_sum) = match kind {
        MergeKind::Join => (2, fold_children(0.0, [left.loglik, right.loglik])),
        MergeKind::AbsorbLeft => (
            left.child_logliks.len() + 1,
            fold_children(left.child_sum, [right.loglik]),
        ),
        MergeKind::AbsorbRight => (
            right.child_logliks.len() + 1,
            fold_children(right.child_sum, [left.loglik]),
        ),
        MergeKind::Collapse => (
            left.child_logliks.len() + right.child_logliks.len(),
            fold_children(left.child_sum, right.child_logliks.iter().copied()),
        ),
    };
    let marginal = config.group_log_marginal(&stats);
    MergedNode {
        stats,
        n_children,
        child_sum,
        loglik: node_log_likelihood(marginal, n_children, child_sum, config.gamma),
    }
}

/// Log Bayes factor of a merge: `log p(D_m | T_m) − (log p(D_i | T_i) + log p(D_j | T_j))`.
pub fn log_bayes_factor(merged_loglik: f64, left_loglik: f64, right_loglik: f64) -> f64 {
    merged_loglik - (left_loglik + right_loglik)
}

/// Log Bayes factor for merging two trees with `kind`.
///
/// `cross` holds the affinity stats of query pairs split between the two
/// trees. Returns `None` when `kind` is not applicable (absorbing into or
/// collapsing a leaf).
pub fn merge_score(
    ti: &TaskTree,
    tj: &TaskTree,
    kind: MergeKind,
    cross: &AffinityStats,
    config: &ModelConfig,
) -> Option<f64> {
    let li: Vec<f64> = ti.children.iter().map(|c| c.cached_loglik).collect();
    let lj: Vec<f64> = tj.children.iter().map(|c| c.cached_loglik).collect();
    let a = TreeSummary {
        stats: ti.stats,
        loglik: ti.cached_loglik,
        child_sum: fold_children(0.0, li.iter().copied()),
        child_logliks: &li,
    };
    let b = TreeSummary {
        stats: tj.stats,
        loglik: tj.cached_loglik,
        child_sum: fold_children(0.0, lj.iter().copied()),
        child_logliks: &lj,
    };
    if !merge_allowed(&a, &b, kind) {
        return None;
    }
    let merged = merged_node(&a, &b, cross, kind, config);
    Some(log_bayes_factor(merged.loglik, a.loglik, b.loglik))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn geometric_special_case() {
        // alpha = beta = 1 reduces to a geometric(1/2) pmf.
        assert!(close(gamma_poisson_log_pmf(0, 1.0, 1.0).unwrap(), 0.5f64.ln(), 1e-15));
        assert!(close(gamma_poisson_log_pmf(2, 1.0, 1.0).unwrap(), 0.125f64.ln(), 1e-15));
    }

    #[test]
    fn pmf_rejects_bad_parameters() {
        assert!(gamma_poisson_log_pmf(1, 0.0, 1.0).is_err());
        assert!(gamma_poisson_log_pmf(1, 1.0, -2.0).is_err());
        assert!(gamma_poisson_log_pmf(1, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn pmf_sums_to_one() {
        for &alpha in &[0.5, 1.0, 2.0, 10.0] {
            for &beta in &[0.5, 1.0, 2.0, 10.0] {
                let total: f64 = (0..2000u64)
                    .map(|r| gamma_poisson_log_pmf(r, alpha, beta).unwrap().exp())
                    .sum();
                assert!((total - 1.0).abs() < 1e-9, "alpha={alpha} beta={beta} total={total}");
            }
        }
    }

    #[test]
    fn large_counts_stay_finite() {
        let v = gamma_poisson_log_pmf(1_000_000, 2.0, 0.5).unwrap();
        assert!(v.is_finite() && v < 0.0);
    }

    #[test]
    fn marginal_examples() {
        let p = GammaPoissonParams::default();
        assert!(close(marginal_log_likelihood(&[0; 4], &p).unwrap(), 4.0 * 0.5f64.ln(), 1e-15));
        let params = GammaPoissonParams {
            alpha: [0.5, 1.0, 2.0, 10.0],
            beta: [10.0, 2.0, 1.0, 0.5],
        };
        let counts = [3, 0, 7, 1];
        let separate: f64 = (0..4)
            .map(|k| gamma_poisson_log_pmf(counts[k], params.alpha[k], params.beta[k]).unwrap())
            .sum();
        assert_eq!(marginal_log_likelihood(&counts, &params).unwrap(), separate);
    }

    #[test]
    fn mixing_proportion_examples() {
        let (lp, lq) = mixing_log_pi(2, 0.5);
        assert!(close(lp.exp(), 0.5, 1e-15) && close(lq.exp(), 0.5, 1e-15));
        let (lp, lq) = mixing_log_pi(1, 0.3);
        assert_eq!(lp, f64::NEG_INFINITY);
        assert_eq!(lq, 0.0);
        let (lp, _) = mixing_log_pi(3, 1.0 - 1e-12);
        assert!(lp.exp() > 1.0 - 1e-12);
    }

    #[test]
    fn single_child_reduces_to_product() {
        assert_eq!(node_log_likelihood(-3.0, 1, -7.5, 0.5), -7.5);
    }

    #[test]
    fn log_add_exp_handles_infinities() {
        assert_eq!(log_add_exp(f64::NEG_INFINITY, -2.0), -2.0);
        assert!(close(log_add_exp(0.0, 0.0), 2f64.ln(), 1e-15));
        assert!(close(log_add_exp(-1000.0, -1001.0), -1000.0 + (-1f64).exp().ln_1p(), 1e-15));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::new(0.0, GammaPoissonParams::default(), 100).is_err());
        assert!(ModelConfig::new(1.0, GammaPoissonParams::default(), 100).is_err());
        assert!(ModelConfig::new(0.5, GammaPoissonParams::default(), 0).is_err());
        assert!(ModelConfig::new(0.5, GammaPoissonParams::uniform(1.0, 0.0), 100).is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }
}
