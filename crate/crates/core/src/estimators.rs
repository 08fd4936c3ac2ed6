//! IPW estimators of average potential outcomes and their sandwich variances.
//!
//! For cluster `i`, allocation parameter `alpha` and own treatment `a`, the
//! group estimate is
//!
//! ```text
//! Yhat_i(a; alpha) = 1/n_i sum_j P_alpha(A_{i,-j} | L_i) / f(A_i | L_i) * I(A_ij = a) * Y_ij
//! ```
//!
//! and the population estimate is the plain mean over clusters. Variances are
//! for the super-population mean of the group average potential outcomes.
//! Stacking the estimating functions of several `(a, alpha)` cells gives one
//! joint covariance from which any linear contrast (direct, indirect, total,
//! F_alpha effects) can be read off.

use nalgebra::DMatrix;
use rayon::prelude::*;

pub use crate::model::{Cell, EstimateTable, PsMode};

use crate::allocation::{
    leave_one_out_probabilities, mixture_conditional_probability, CounterfactualPolicy, PolicyProbabilities,
    LOG_SPACE_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::model::{ClusterData, DiscreteAlphaDistribution, Population, PropensityModel};
use crate::propensity;

/// IPW group sum from precomputed policy probabilities and the log of the
/// cluster propensity density.
pub fn group_estimate_from_probs(
    cluster: &ClusterData,
    probs: &PolicyProbabilities,
    a: u8,
    log_density: f64,
) -> Result<f64> {
    if !log_density.is_finite() {
        return Err(Error::ZeroDensity(cluster.id().to_string()));
    }
    let n = cluster.len();
    if probs.len() != n {
        return Err(Error::LengthMismatch { expected: n, actual: probs.len() });
    }
    let treat = cluster.treatment();
    if !treat.contains(&a) {
        return Ok(0.0);
    }
    let outcome = cluster.outcome();
    let log_space = n > LOG_SPACE_THRESHOLD;
    let neighbors = leave_one_out_probabilities(probs, treat, log_space);
    let total: f64 = if log_space {
        (0..n)
            .filter(|&j| treat[j] == a)
            .map(|j| (neighbors[j] - log_density).exp() * outcome[j])
            .sum()
    } else {
        let density = log_density.exp();
        if density <= 0.0 {
            return Err(Error::ZeroDensity(cluster.id().to_string()));
        }
        (0..n).filter(|&j| treat[j] == a).map(|j| neighbors[j] / density * outcome[j]).sum()
    };
    Ok(total / n as f64)
}

/// Group IPW estimate `Yhat_i(a; alpha)` given the cluster propensity density.
pub fn group_estimate(
    cluster: &ClusterData,
    policy: &CounterfactualPolicy,
    alpha: f64,
    a: u8,
    density: f64,
) -> Result<f64> {
    if !(density > 0.0) {
        return Err(Error::ZeroDensity(cluster.id().to_string()));
    }
    let probs = policy.unit_probabilities(cluster, alpha)?;
    group_estimate_from_probs(cluster, &probs, a, density.ln())
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::LengthMismatch { expected, actual });
    }
    Ok(())
}

/// Group estimates of every cluster at one cell.
pub fn group_estimates(
    population: &Population,
    policy: &CounterfactualPolicy,
    alpha: f64,
    a: u8,
    densities: &[f64],
) -> Result<Vec<f64>> {
    check_len(population.n_clusters(), densities.len())?;
    population
        .clusters()
        .par_iter()
        .zip(densities)
        .map(|(c, &d)| group_estimate(c, policy, alpha, a, d))
        .collect()
}

/// Population IPW estimate `Yhat(a; alpha)`, the mean of the group estimates.
pub fn population_estimate(
    population: &Population,
    policy: &CounterfactualPolicy,
    alpha: f64,
    a: u8,
    densities: &[f64],
) -> Result<f64> {
    let groups = group_estimates(population, policy, alpha, a, densities)?;
    Ok(groups.iter().sum::<f64>() / groups.len() as f64)
}

/// `sum_i d_i Yhat_i / sum_i d_i`. Unit weights give the plain mean; cluster
/// sizes give the unit-weighted estimator.
pub fn weighted_population_estimate(weights: &[f64], estimates: &[f64]) -> Result<f64> {
    check_len(estimates.len(), weights.len())?;
    if let Some(&w) = weights.iter().find(|&&w| !(w > 0.0)) {
        return Err(Error::NonPositiveWeight(w));
    }
    let total: f64 = weights.iter().sum();
    Ok(weights.iter().zip(estimates).map(|(w, y)| w * y).sum::<f64>() / total)
}

/// Estimating function `psi_{a,alpha} = Yhat_i(a; alpha) - mu`.
pub fn psi_value(
    cluster: &ClusterData,
    policy: &CounterfactualPolicy,
    alpha: f64,
    a: u8,
    density: f64,
    mu: f64,
) -> Result<f64> {
    Ok(group_estimate(cluster, policy, alpha, a, density)? - mu)
}

/// `(1/N) sum_i psi_i psi_i'` for the stacked estimating functions of every
/// cluster (one row per cluster).
pub fn variance_known_ps(psi: &DMatrix<f64>) -> DMatrix<f64> {
    let n = psi.nrows() as f64;
    psi.transpose() * psi / n
}

/// `d psi_{a,alpha} / d gamma = -psi_gamma * Yhat_i(a; alpha)`: the policy
/// probabilities do not depend on the propensity parameters.
pub fn psi_a_gamma_derivative(
    cluster: &ClusterData,
    policy: &CounterfactualPolicy,
    alpha: f64,
    a: u8,
    model: &PropensityModel,
) -> Result<Vec<f64>> {
    let log_density = propensity::log_cluster_density(model, cluster)?;
    let probs = policy.unit_probabilities(cluster, alpha)?;
    let ipw = group_estimate_from_probs(cluster, &probs, a, log_density)?;
    let score = propensity::score(model, cluster)?;
    Ok(score.into_iter().map(|s| -s * ipw).collect())
}

/// Per-cluster ingredients of the stacked estimating equations.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiBlocks {
    pub cells: Vec<Cell>,
    /// Group IPW estimates, one row per cluster and one column per cell.
    pub group_estimates: DMatrix<f64>,
    /// Point estimates (column means of `group_estimates`).
    pub mu: Vec<f64>,
    /// Propensity scores, one row per cluster, when the propensity was estimated.
    pub scores: Option<DMatrix<f64>>,
}

/// Result of assembling the sandwich covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Sandwich {
    pub covariance: DMatrix<f64>,
    pub ridge_applied: bool,
}

/// `B11^{-1}` by Cholesky, falling back to `B11 + 1e-10 * trace/q * I`.
fn invert_b11(b11: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    if let Some(ch) = b11.clone().cholesky() {
        return Ok((ch.inverse(), false));
    }
    let q = b11.nrows();
    let trace = b11.trace();
    let ridge = if trace > 0.0 { 1e-10 * trace / q as f64 } else { 1e-10 };
    let ridged = b11 + DMatrix::identity(q, q) * ridge;
    match ridged.cholesky() {
        Some(ch) => Ok((ch.inverse(), true)),
        None => Err(Error::SingularB11),
    }
}

impl PsiBlocks {
    pub fn n_clusters(&self) -> usize {
        self.group_estimates.nrows()
    }

    /// Estimating functions evaluated at `mu`, one row per cluster.
    pub fn psi(&self) -> DMatrix<f64> {
        let mut psi = self.group_estimates.clone();
        for (c, &m) in self.mu.iter().enumerate() {
            psi.column_mut(c).add_scalar_mut(-m);
        }
        psi
    }

    /// `V = E[psi psi']`.
    pub fn v(&self) -> DMatrix<f64> {
        variance_known_ps(&self.psi())
    }

    /// `A21 = E[d psi / d gamma']` (cells x q).
    pub fn a21(&self) -> Option<DMatrix<f64>> {
        let s = self.scores.as_ref()?;
        Some(-(self.group_estimates.transpose() * s) / self.n_clusters() as f64)
    }

    /// `B11 = E[psi_gamma psi_gamma']` (q x q).
    pub fn b11(&self) -> Option<DMatrix<f64>> {
        let s = self.scores.as_ref()?;
        Some(s.transpose() * s / self.n_clusters() as f64)
    }

    /// `B12 = E[psi_gamma psi']` (q x cells).
    pub fn b12(&self) -> Option<DMatrix<f64>> {
        let s = self.scores.as_ref()?;
        Some(s.transpose() * self.psi() / self.n_clusters() as f64)
    }

    /// `V + A21 B11^-1 A21' + A21 B11^-1 B12 + (A21 B11^-1 B12)'`, or just `V`
    /// when the propensity is known.
    pub fn sandwich(&self) -> Result<Sandwich> {
        let v = self.v();
        let (Some(a21), Some(b11), Some(b12)) = (self.a21(), self.b11(), self.b12()) else {
            return Ok(Sandwich { covariance: v, ridge_applied: false });
        };
        let (b11_inv, ridge_applied) = invert_b11(&b11)?;
        let ab = &a21 * &b11_inv;
        let cross = &ab * &b12;
        let covariance = v + &ab * a21.transpose() + &cross + cross.transpose();
        Ok(Sandwich { covariance: (&covariance + covariance.transpose()) * 0.5, ridge_applied })
    }
}

/// Builds the stacked estimating-function blocks for `cells`.
///
/// `log_densities` are the log cluster propensity densities of the observed
/// treatments. Passing `scores` (one propensity score vector per cluster)
/// selects the estimated-propensity variance.
pub fn psi_blocks(
    population: &Population,
    policy: &CounterfactualPolicy,
    cells: &[Cell],
    log_densities: &[f64],
    scores: Option<&[Vec<f64>]>,
) -> Result<PsiBlocks> {
    let n = population.n_clusters();
    check_len(n, log_densities.len())?;
    let mut alphas: Vec<f64> = cells.iter().map(|c| c.alpha).collect();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();

    let rows: Vec<Vec<f64>> = population
        .clusters()
        .par_iter()
        .zip(log_densities)
        .map(|(cluster, &ld)| {
            let probs: Vec<PolicyProbabilities> =
                alphas.iter().map(|&al| policy.unit_probabilities(cluster, al)).collect::<Result<_>>()?;
            cells
                .iter()
                .map(|cell| {
                    let k = alphas.iter().position(|&al| al == cell.alpha).expect("alpha collected above");
                    group_estimate_from_probs(cluster, &probs[k], cell.a, ld)
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let m = cells.len();
    let group_estimates = DMatrix::from_fn(n, m, |i, c| rows[i][c]);
    let mu = (0..m).map(|c| group_estimates.column(c).sum() / n as f64).collect();
    let scores = match scores {
        Some(s) => {
            check_len(n, s.len())?;
            let q = s.first().map_or(0, Vec::len);
            if s.iter().any(|row| row.len() != q) {
                return Err(Error::DimensionMismatch("score vectors have different lengths".into()));
            }
            Some(DMatrix::from_fn(n, q, |i, k| s[i][k]))
        }
        None => None,
    };
    Ok(PsiBlocks { cells: cells.to_vec(), group_estimates, mu, scores })
}

/// All `(a, alpha)` cells of a grid, ordered `a = 0` first then by alpha.
pub fn grid_cells(alphas: &[f64]) -> Vec<Cell> {
    [0u8, 1].iter().flat_map(|&a| alphas.iter().map(move |&alpha| Cell { a, alpha })).collect()
}

/// Point estimates and joint covariance for every `(a, alpha)` cell of `alphas`.
pub fn estimate_table(
    population: &Population,
    policy: &CounterfactualPolicy,
    alphas: &[f64],
    log_densities: &[f64],
    scores: Option<&[Vec<f64>]>,
) -> Result<(EstimateTable, PsiBlocks)> {
    let cells = grid_cells(alphas);
    let blocks = psi_blocks(population, policy, &cells, log_densities, scores)?;
    let sandwich = blocks.sandwich()?;
    let table = EstimateTable {
        alpha_grid: alphas.to_vec(),
        cells,
        estimates: blocks.mu.clone(),
        covariance: sandwich.covariance,
        n_clusters: population.n_clusters(),
        ps_mode: if scores.is_some() { PsMode::Estimated } else { PsMode::Known },
        ridge_applied: sandwich.ridge_applied,
    };
    Ok((table, blocks))
}

/// Convenience wrapper evaluating densities (and, for the estimated mode,
/// scores) from a propensity model.
pub fn estimate_with_model(
    population: &Population,
    policy: &CounterfactualPolicy,
    alphas: &[f64],
    model: &PropensityModel,
    mode: PsMode,
) -> Result<EstimateTable> {
    let log_densities = propensity::log_densities(model, population)?;
    let scores = match mode {
        PsMode::Known => None,
        PsMode::Estimated => Some(propensity::scores(model, population)?),
    };
    Ok(estimate_table(population, policy, alphas, &log_densities, scores.as_deref())?.0)
}

/// Estimated-propensity covariance `W` of `(Yhat(0; alpha), Yhat(1; alpha))`.
pub fn variance_estimated_ps(
    population: &Population,
    policy: &CounterfactualPolicy,
    alpha: f64,
    model: &PropensityModel,
) -> Result<DMatrix<f64>> {
    let cells = [Cell { a: 0, alpha }, Cell { a: 1, alpha }];
    pair_covariance(population, policy, &cells, model)
}

/// Estimated-propensity covariance `Q` of `(Yhat(0; alpha0), Yhat(0; alpha1))`.
pub fn variance_indirect(
    population: &Population,
    policy: &CounterfactualPolicy,
    alpha0: f64,
    alpha1: f64,
    model: &PropensityModel,
) -> Result<DMatrix<f64>> {
    let cells = [Cell { a: 0, alpha: alpha0 }, Cell { a: 0, alpha: alpha1 }];
    pair_covariance(population, policy, &cells, model)
}

fn pair_covariance(
    population: &Population,
    policy: &CounterfactualPolicy,
    cells: &[Cell],
    model: &PropensityModel,
) -> Result<DMatrix<f64>> {
    let log_densities = propensity::log_densities(model, population)?;
    let scores = propensity::scores(model, population)?;
    let blocks = psi_blocks(population, policy, cells, &log_densities, Some(&scores))?;
    Ok(blocks.sandwich()?.covariance)
}

/// Free-function form of [`EstimateTable::contrast`].
pub fn contrast(table: &EstimateTable, coefficients: &[f64]) -> Result<(f64, f64)> {
    table.contrast(coefficients)
}

/// `Yhat(a; F) = sum_k p_k Yhat(a; alpha_k)` with its delta-method variance,
/// read from a table whose grid contains the support of `distribution`.
pub fn f_alpha_contrast(table: &EstimateTable, distribution: &DiscreteAlphaDistribution, a: u8) -> Result<(f64, f64)> {
    let terms: Vec<(u8, f64, f64)> = distribution.iter().map(|(alpha, p)| (a, alpha, p)).collect();
    table.contrast_cells(&terms)
}

/// `IE(F1, F2) = sum_k (p2_k - p1_k) Yhat(0; alpha_k)` with its variance.
pub fn f_alpha_indirect(
    table: &EstimateTable,
    f1: &DiscreteAlphaDistribution,
    f2: &DiscreteAlphaDistribution,
) -> Result<(f64, f64)> {
    let mut terms: Vec<(u8, f64, f64)> = f2.iter().map(|(alpha, p)| (0, alpha, p)).collect();
    terms.extend(f1.iter().map(|(alpha, p)| (0, alpha, -p)));
    table.contrast_cells(&terms)
}

/// Point estimate and variance of `Yhat(a; F)`, computed on the support of `F`.
pub fn f_alpha_estimate(
    population: &Population,
    policy: &CounterfactualPolicy,
    distribution: &DiscreteAlphaDistribution,
    a: u8,
    log_densities: &[f64],
    scores: Option<&[Vec<f64>]>,
) -> Result<(f64, f64)> {
    let (table, _) = estimate_table(population, policy, distribution.support(), log_densities, scores)?;
    f_alpha_contrast(&table, distribution, a)
}

/// Group estimate with the mixture policy weights
/// `P_F(A_{i,-j} | L_i) = sum_k p_k P_{alpha_k}(A_{i,-j} | L_i)` inside the IPW sum.
pub fn f_alpha_group_estimate_mixture(
    cluster: &ClusterData,
    policy: &CounterfactualPolicy,
    distribution: &DiscreteAlphaDistribution,
    a: u8,
    density: f64,
) -> Result<f64> {
    if !(density > 0.0) {
        return Err(Error::ZeroDensity(cluster.id().to_string()));
    }
    let treat = cluster.treatment();
    let n = cluster.len();
    let mut total = 0.0;
    for j in (0..n).filter(|&j| treat[j] == a) {
        let neighbors: Vec<u8> = (0..n).filter(|&k| k != j).map(|k| treat[k]).collect();
        let weight = mixture_conditional_probability(policy, distribution, cluster, j, &neighbors)?;
        total += weight / density * cluster.outcome()[j];
    }
    Ok(total / n as f64)
}
