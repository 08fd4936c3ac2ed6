//! Covariate-dependent counterfactual allocation policies.
//!
//! Under the policy, units in cluster `i` are treated independently given
//! covariates with `logit P(A_ij = 1 | L_ij) = xi_i(alpha) + L_ij' delta_L`,
//! where the cluster intercept `xi_i(alpha)` is chosen so that the mean
//! unit probability in the cluster equals `alpha`.
//!
//! Only this conditionally independent form is implemented. Because units are
//! independent given covariates, conditioning on a unit's own treatment does
//! not change the distribution of its neighbours' treatments.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{clamp_prob, dot, expit, logit};
use crate::model::{ClusterData, DiscreteAlphaDistribution, Population};

pub const DEFAULT_INTERCEPT_TOL: f64 = 1e-10;
const MAX_SOLVER_ITERATIONS: usize = 500;

/// Above this cluster size vector probabilities are accumulated in log space.
pub const LOG_SPACE_THRESHOLD: usize = 30;

/// Solves `mean_j expit(xi + offsets[j]) = alpha` for `xi`.
///
/// The mean is strictly increasing in `xi`, so the root is unique. The bracket
/// `logit(alpha) -/+ (max |offset| + 1)` always contains it; Newton steps are
/// taken when they stay inside the current bracket, bisection otherwise.
pub fn solve_intercept_for_offsets(offsets: &[f64], alpha: f64, tol: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha = {alpha} must lie in (0, 1)")));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance {tol} must be positive")));
    }
    if offsets.is_empty() {
        return Err(Error::DimensionMismatch("cannot solve an intercept for an empty cluster".into()));
    }
    let n = offsets.len() as f64;
    let span = offsets.iter().fold(0.0f64, |m, o| m.max(o.abs())) + 1.0;
    if !span.is_finite() {
        return Err(Error::Numerical("non-finite policy offsets".into()));
    }
    let centre = logit(alpha);
    let (mut lo, mut hi) = (centre - span, centre + span);
    let mut x = centre;
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_SOLVER_ITERATIONS {
        let (mut mean, mut slope) = (0.0, 0.0);
        for o in offsets {
            let p = expit(x + o);
            mean += p;
            slope += p * (1.0 - p);
        }
        mean /= n;
        slope /= n;
        residual = mean - alpha;
        if residual.abs() <= tol {
            return Ok(x);
        }
        if residual > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        if hi - lo <= f64::EPSILON * x.abs().max(1.0) {
            break;
        }
        let newton = x - residual / slope;
        x = if slope > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
    }
    Err(Error::NoConvergence { iterations: MAX_SOLVER_ITERATIONS, residual: residual.abs() })
}

/// Linear policy offsets `delta_L' L_ij` for every unit of a cluster.
pub fn policy_offsets(cluster: &ClusterData, delta_l: &[f64]) -> Result<Vec<f64>> {
    if delta_l.len() != cluster.p() {
        return Err(Error::DimensionMismatch(format!(
            "delta_L has length {}, covariates have p = {}",
            delta_l.len(),
            cluster.p()
        )));
    }
    Ok(cluster.covariate_rows().map(|row| dot(delta_l, row)).collect())
}

/// Cluster intercept `xi` such that the cluster-average policy probability is `alpha`.
pub fn solve_cluster_intercept(cluster: &ClusterData, delta_l: &[f64], alpha: f64, tol: f64) -> Result<f64> {
    solve_intercept_for_offsets(&policy_offsets(cluster, delta_l)?, alpha, tol)
}

/// Policy treatment probabilities of the units of one cluster at one `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyProbabilities {
    pub cluster_id: String,
    pub alpha: f64,
    pub unit_probs: Vec<f64>,
}

impl PolicyProbabilities {
    /// Wraps raw unit probabilities, clamping them into the open unit interval.
    pub fn from_probs(cluster_id: impl Into<String>, alpha: f64, probs: Vec<f64>) -> Self {
        Self {
            cluster_id: cluster_id.into(),
            alpha,
            unit_probs: probs.into_iter().map(clamp_prob).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.unit_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unit_probs.is_empty()
    }

    /// Probability that unit `j` takes treatment value `a`.
    #[inline]
    pub fn unit_prob_of(&self, j: usize, a: u8) -> f64 {
        let p = self.unit_probs[j];
        if a == 1 {
            p
        } else {
            1.0 - p
        }
    }
}

/// A covariate-dependent allocation policy with intercepts solved for every
/// cluster of a population on a fixed set of `alpha` values.
///
/// Intercepts are solved once at construction; afterwards the policy is
/// read-only and can be shared between threads.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualPolicy {
    delta_l: Vec<f64>,
    alpha_grid: Vec<f64>,
    cluster_index: HashMap<String, usize>,
    // intercepts[alpha index][cluster index]
    intercepts: Vec<Vec<f64>>,
    tol: f64,
}

impl CounterfactualPolicy {
    pub fn solve(population: &Population, delta_l: Vec<f64>, alphas: &[f64], tol: f64) -> Result<Self> {
        let mut alpha_grid: Vec<f64> = alphas.to_vec();
        if let Some(bad) = alpha_grid.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(Error::InvalidParameter(format!("alpha = {bad} must lie in (0, 1)")));
        }
        alpha_grid.sort_by(f64::total_cmp);
        alpha_grid.dedup();
        let offsets: Vec<Vec<f64>> = population
            .clusters()
            .iter()
            .map(|c| policy_offsets(c, &delta_l))
            .collect::<Result<_>>()?;
        let intercepts = alpha_grid
            .iter()
            .map(|&alpha| {
                offsets
                    .par_iter()
                    .map(|o| solve_intercept_for_offsets(o, alpha, tol))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let cluster_index = population
            .clusters()
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id().to_string(), i))
            .collect();
        Ok(Self { delta_l, alpha_grid, cluster_index, intercepts, tol })
    }

    pub fn delta_l(&self) -> &[f64] {
        &self.delta_l
    }

    pub fn alpha_grid(&self) -> &[f64] {
        &self.alpha_grid
    }

    pub fn tolerance(&self) -> f64 {
        self.tol
    }

    fn alpha_index(&self, alpha: f64) -> Option<usize> {
        self.alpha_grid.iter().position(|&a| a == alpha)
    }

    pub fn intercept(&self, cluster_id: &str, alpha: f64) -> Result<f64> {
        let missing = || Error::MissingIntercept { cluster: cluster_id.to_string(), alpha };
        let k = self.alpha_index(alpha).ok_or_else(missing)?;
        let i = *self.cluster_index.get(cluster_id).ok_or_else(missing)?;
        Ok(self.intercepts[k][i])
    }

    /// `p_ij = expit(xi_i(alpha) + delta_L' L_ij)` for every unit of `cluster`.
    pub fn unit_probabilities(&self, cluster: &ClusterData, alpha: f64) -> Result<PolicyProbabilities> {
        let xi = self.intercept(cluster.id(), alpha)?;
        let probs = policy_offsets(cluster, &self.delta_l)?
            .into_iter()
            .map(|o| expit(xi + o))
            .collect();
        Ok(PolicyProbabilities::from_probs(cluster.id(), alpha, probs))
    }
}

/// Free-function form of [`CounterfactualPolicy::unit_probabilities`].
pub fn unit_policy_probabilities(
    policy: &CounterfactualPolicy,
    cluster: &ClusterData,
    alpha: f64,
) -> Result<PolicyProbabilities> {
    policy.unit_probabilities(cluster, alpha)
}

fn check_binary(a: &[u8]) -> Result<()> {
    match a.iter().position(|&v| v > 1) {
        Some(unit) => Err(Error::InvalidParameter(format!("treatment value {} at position {unit} is not 0/1", a[unit]))),
        None => Ok(()),
    }
}

/// `P(A_i = a | L_i) = prod_j p_j^a_j (1 - p_j)^(1 - a_j)`.
pub fn policy_vector_probability(probs: &PolicyProbabilities, a: &[u8]) -> Result<f64> {
    if a.len() != probs.len() {
        return Err(Error::LengthMismatch { expected: probs.len(), actual: a.len() });
    }
    check_binary(a)?;
    let terms = a.iter().enumerate().map(|(j, &aj)| probs.unit_prob_of(j, aj));
    Ok(product(terms, a.len()))
}

fn product(terms: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n > LOG_SPACE_THRESHOLD {
        terms.map(f64::ln).sum::<f64>().exp()
    } else {
        terms.product()
    }
}

/// `P(A_{i,-j} = s | A_ij = a, L_i)`. Units are independent given covariates,
/// so this is the product over `k != j` and does not depend on `a`.
pub fn conditional_neighbor_probability(probs: &PolicyProbabilities, j: usize, neighbors: &[u8]) -> Result<f64> {
    let n = probs.len();
    if j >= n {
        return Err(Error::InvalidParameter(format!("unit index {j} out of range for cluster of size {n}")));
    }
    if neighbors.len() + 1 != n {
        return Err(Error::LengthMismatch { expected: n - 1, actual: neighbors.len() });
    }
    check_binary(neighbors)?;
    let terms = (0..n)
        .filter(|&k| k != j)
        .zip(neighbors)
        .map(|(k, &s)| probs.unit_prob_of(k, s));
    Ok(product(terms, n - 1))
}

/// For an observed treatment vector, the policy probability of the neighbours'
/// observed treatments for every unit: `out[j] = prod_{k != j} P(A_k = a_k)`.
///
/// Prefix/suffix products keep this O(n) without dividing by the own term.
/// Large clusters switch to log space and return log-probabilities when
/// `log_space` is requested.
pub fn leave_one_out_probabilities(probs: &PolicyProbabilities, a: &[u8], log_space: bool) -> Vec<f64> {
    let n = a.len();
    debug_assert_eq!(n, probs.len());
    let term = |k: usize| {
        let t = probs.unit_prob_of(k, a[k]);
        if log_space {
            t.ln()
        } else {
            t
        }
    };
    let (identity, op): (f64, fn(f64, f64) -> f64) =
        if log_space { (0.0, |x, y| x + y) } else { (1.0, |x, y| x * y) };
    let mut prefix = vec![identity; n + 1];
    for k in 0..n {
        prefix[k + 1] = op(prefix[k], term(k));
    }
    let mut out = vec![identity; n];
    let mut suffix = identity;
    for j in (0..n).rev() {
        out[j] = op(prefix[j], suffix);
        suffix = op(suffix, term(j));
    }
    out
}

/// Distribution of the number of treated neighbours of unit `j`
/// (Poisson-binomial over the other units), by dynamic programming.
/// Entry `k` is `P(sum_{l != j} A_l = k)`, for `k = 0..n-1`.
pub fn neighbor_count_distribution(probs: &PolicyProbabilities, j: usize) -> Vec<f64> {
    let n = probs.len();
    let mut pmf = vec![0.0; n.max(1)];
    pmf[0] = 1.0;
    let mut filled = 1;
    for (k, &p) in probs.unit_probs.iter().enumerate() {
        if k == j {
            continue;
        }
        for c in (0..=filled).rev() {
            let stay = if c < filled { pmf[c] * (1.0 - p) } else { 0.0 };
            let step = if c > 0 { pmf[c - 1] * p } else { 0.0 };
            pmf[c] = stay + step;
        }
        filled += 1;
    }
    pmf
}

/// `sum_k p_k P_{alpha_k}(A_{i,-j} = s | A_ij, L_i)` for a discrete alpha distribution.
pub fn mixture_conditional_probability(
    policy: &CounterfactualPolicy,
    distribution: &DiscreteAlphaDistribution,
    cluster: &ClusterData,
    j: usize,
    neighbors: &[u8],
) -> Result<f64> {
    distribution.iter().try_fold(0.0, |acc, (alpha, weight)| {
        let probs = policy.unit_probabilities(cluster, alpha)?;
        Ok(acc + weight * conditional_neighbor_probability(&probs, j, neighbors)?)
    })
}
