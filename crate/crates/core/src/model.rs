//! Immutable data model: clusters, populations, propensity parameters, alpha
//! distributions and estimate tables.

use std::collections::HashSet;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One interference cluster. Covariates are stored dense, row per unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterData {
    id: String,
    p: usize,
    covariates: Vec<f64>,
    treatment: Vec<u8>,
    outcome: Vec<f64>,
}

impl ClusterData {
    /// Builds a cluster from already validated parts. Use [`validate_population`]
    /// for untrusted input.
    pub fn new(
        id: impl Into<String>,
        covariates: Vec<Vec<f64>>,
        treatment: Vec<u8>,
        outcome: Vec<f64>,
    ) -> Result<Self> {
        let raw = RawCluster {
            id: id.into(),
            covariates,
            treatment: treatment.into_iter().map(f64::from).collect(),
            outcome,
        };
        let mut violations = Vec::new();
        match check_cluster(&raw, None, &mut violations) {
            Some(c) if violations.is_empty() => Ok(c),
            _ => Err(violations.remove(0)),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.treatment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.treatment.is_empty()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Covariate row of unit `j`.
    pub fn covariates(&self, j: usize) -> &[f64] {
        &self.covariates[j * self.p..(j + 1) * self.p]
    }

    pub fn covariate_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.len()).map(move |j| self.covariates(j))
    }

    pub fn treatment(&self) -> &[u8] {
        &self.treatment
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn treated_count(&self) -> usize {
        self.treatment.iter().filter(|&&a| a == 1).count()
    }

    pub fn treated_fraction(&self) -> f64 {
        self.treated_count() as f64 / self.len() as f64
    }

    /// Same covariates with a new treatment and outcome vector.
    pub fn with_observations(&self, treatment: Vec<u8>, outcome: Vec<f64>) -> Result<Self> {
        if treatment.len() != self.len() || outcome.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                actual: treatment.len().max(outcome.len()),
            });
        }
        if let Some(unit) = treatment.iter().position(|&a| a > 1) {
            return Err(Error::NonBinaryTreatment {
                cluster: self.id.clone(),
                unit,
                value: f64::from(treatment[unit]),
            });
        }
        Ok(Self { treatment, outcome, ..self.clone() })
    }
}

/// Untrusted cluster input, as read from a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCluster {
    pub id: String,
    pub covariates: Vec<Vec<f64>>,
    pub treatment: Vec<f64>,
    pub outcome: Vec<f64>,
}

/// All rule violations found while validating a population.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Error>,
}

impl ValidationReport {
    pub fn contains(&self, pred: impl Fn(&Error) -> bool) -> bool {
        self.violations.iter().any(pred)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} validation error(s)", self.violations.len())?;
        for v in &self.violations {
            write!(f, "\n  - {v}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationReport {}

fn check_cluster(
    raw: &RawCluster,
    expected_p: Option<usize>,
    violations: &mut Vec<Error>,
) -> Option<ClusterData> {
    let before = violations.len();
    let n = raw.treatment.len();
    if n == 0 {
        violations.push(Error::DimensionMismatch(format!("cluster `{}` has no units", raw.id)));
        return None;
    }
    if raw.covariates.len() != n || raw.outcome.len() != n {
        violations.push(Error::DimensionMismatch(format!(
            "cluster `{}`: {} covariate rows, {} treatments, {} outcomes",
            raw.id,
            raw.covariates.len(),
            n,
            raw.outcome.len()
        )));
        return None;
    }
    let p = expected_p.unwrap_or(raw.covariates[0].len());
    for (unit, row) in raw.covariates.iter().enumerate() {
        if row.len() != p {
            violations.push(Error::DimensionMismatch(format!(
                "cluster `{}` unit {unit} has {} covariates, expected {p}",
                raw.id,
                row.len()
            )));
            return None;
        }
        if row.iter().any(|x| !x.is_finite()) {
            violations.push(Error::MissingValue { cluster: raw.id.clone(), unit, field: "covariates" });
        }
    }
    for (unit, &a) in raw.treatment.iter().enumerate() {
        if a != 0.0 && a != 1.0 {
            violations.push(Error::NonBinaryTreatment { cluster: raw.id.clone(), unit, value: a });
        }
    }
    for (unit, y) in raw.outcome.iter().enumerate() {
        if !y.is_finite() {
            violations.push(Error::MissingValue { cluster: raw.id.clone(), unit, field: "outcome" });
        }
    }
    if violations.len() > before {
        return None;
    }
    Some(ClusterData {
        id: raw.id.clone(),
        p,
        covariates: raw.covariates.iter().flatten().copied().collect(),
        treatment: raw.treatment.iter().map(|&a| a as u8).collect(),
        outcome: raw.outcome.clone(),
    })
}

/// Ordered collection of clusters sharing one covariate dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    clusters: Vec<ClusterData>,
    p: usize,
}

impl Population {
    pub fn new(clusters: Vec<ClusterData>) -> Result<Self> {
        let Some(first) = clusters.first() else {
            return Err(Error::EmptyPopulation);
        };
        let p = first.p();
        let mut seen = HashSet::new();
        for c in &clusters {
            if c.p() != p {
                return Err(Error::DimensionMismatch(format!(
                    "cluster `{}` has p = {}, expected {p}",
                    c.id(),
                    c.p()
                )));
            }
            if !seen.insert(c.id()) {
                return Err(Error::DuplicateCluster(c.id().to_string()));
            }
        }
        Ok(Self { clusters, p })
    }

    pub fn clusters(&self) -> &[ClusterData] {
        &self.clusters
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_units(&self) -> usize {
        self.clusters.iter().map(ClusterData::len).sum()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Observed treated proportion of every cluster, in cluster order.
    pub fn treated_fractions(&self) -> Vec<f64> {
        self.clusters.iter().map(ClusterData::treated_fraction).collect()
    }
}

/// Validates raw clusters, collecting every violation rather than stopping at
/// the first one.
pub fn validate_population(raw: &[RawCluster]) -> std::result::Result<Population, ValidationReport> {
    if raw.is_empty() {
        return Err(ValidationReport { violations: vec![Error::EmptyPopulation] });
    }
    let mut violations = Vec::new();
    let p = raw.iter().find_map(|c| c.covariates.first().map(Vec::len));
    let mut seen = HashSet::new();
    let mut clusters = Vec::with_capacity(raw.len());
    for c in raw {
        if !seen.insert(c.id.as_str()) {
            violations.push(Error::DuplicateCluster(c.id.clone()));
        }
        if let Some(cluster) = check_cluster(c, p, &mut violations) {
            clusters.push(cluster);
        }
    }
    if !violations.is_empty() {
        return Err(ValidationReport { violations });
    }
    Population::new(clusters).map_err(|e| ValidationReport { violations: vec![e] })
}

/// Parameters of the random-intercept logistic cluster propensity score
/// `logit P(A_ij = 1 | L_ij, b_i) = delta0 + b_i + L_ij' delta`, `b_i ~ N(0, sigma_b^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub delta0: f64,
    pub delta: Vec<f64>,
    pub sigma_b: f64,
    pub quadrature_order: usize,
}

impl PropensityModel {
    pub const DEFAULT_QUADRATURE_ORDER: usize = 25;

    pub fn new(delta0: f64, delta: Vec<f64>, sigma_b: f64) -> Result<Self> {
        Self::with_order(delta0, delta, sigma_b, Self::DEFAULT_QUADRATURE_ORDER)
    }

    pub fn with_order(delta0: f64, delta: Vec<f64>, sigma_b: f64, quadrature_order: usize) -> Result<Self> {
        let m = Self { delta0, delta, sigma_b, quadrature_order };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_b >= 0.0) || !self.sigma_b.is_finite() {
            return Err(Error::InvalidParameter(format!("sigma_b = {} must be >= 0", self.sigma_b)));
        }
        if self.quadrature_order == 0 {
            return Err(Error::InvalidParameter("quadrature_order must be >= 1".into()));
        }
        if !self.delta0.is_finite() || self.delta.iter().any(|d| !d.is_finite()) {
            return Err(Error::InvalidParameter("non-finite propensity coefficient".into()));
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.delta.len()
    }

    /// Number of free parameters, `p + 2`.
    pub fn n_params(&self) -> usize {
        self.delta.len() + 2
    }

    /// Parameter vector `(delta0, delta, ln sigma_b)`; the last entry is `-inf`
    /// when `sigma_b == 0`.
    pub fn to_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.push(self.delta0);
        v.extend_from_slice(&self.delta);
        v.push(self.sigma_b.ln());
        v
    }

    pub fn from_params(params: &[f64], quadrature_order: usize) -> Self {
        let q = params.len();
        Self {
            delta0: params[0],
            delta: params[1..q - 1].to_vec(),
            sigma_b: params[q - 1].exp(),
            quadrature_order,
        }
    }

    /// Fixed-effect linear predictor `delta0 + L' delta`.
    pub fn linear_predictor(&self, covariates: &[f64]) -> f64 {
        self.delta0 + crate::math::dot(&self.delta, covariates)
    }
}

/// Discrete distribution of the cluster-average propensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteAlphaDistribution {
    support: Vec<f64>,
    probs: Vec<f64>,
}

impl DiscreteAlphaDistribution {
    pub fn new(support: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if support.is_empty() || support.len() != probs.len() {
            return Err(Error::LengthMismatch { expected: support.len(), actual: probs.len() });
        }
        if support.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return Err(Error::InvalidParameter("alpha support must lie strictly inside (0, 1)".into()));
        }
        if support.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter("alpha support must be distinct and sorted".into()));
        }
        if probs.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::InvalidParameter("probabilities must be non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { support, probs })
    }

    pub fn point_mass(alpha: f64) -> Result<Self> {
        Self::new(vec![alpha], vec![1.0])
    }

    /// Empirical distribution of `values`, keeping only values in `[lo, hi]`
    /// and strictly inside (0, 1), renormalised.
    pub fn empirical_restricted(values: &[f64], lo: f64, hi: f64) -> Result<Self> {
        let mut kept: Vec<f64> = values
            .iter()
            .copied()
            .filter(|&v| v >= lo && v <= hi && v > 0.0 && v < 1.0)
            .collect();
        if kept.is_empty() {
            return Err(Error::InvalidParameter(format!("no values inside [{lo}, {hi}]")));
        }
        kept.sort_by(f64::total_cmp);
        let total = kept.len() as f64;
        let mut support: Vec<f64> = Vec::new();
        let mut counts: Vec<f64> = Vec::new();
        for v in kept {
            if support.last() == Some(&v) {
                *counts.last_mut().unwrap() += 1.0;
            } else {
                support.push(v);
                counts.push(1.0);
            }
        }
        let mut probs: Vec<f64> = counts.iter().map(|c| c / total).collect();
        // absorb rounding so the sum is 1 to machine precision
        let drift = 1.0 - probs.iter().sum::<f64>();
        *probs.last_mut().unwrap() += drift;
        Self::new(support, probs)
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.support.iter().copied().zip(self.probs.iter().copied())
    }
}

/// One estimand cell: own treatment `a` and allocation parameter `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub a: u8,
    pub alpha: f64,
}

/// Whether the cluster propensity score was treated as known or estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsMode {
    Known,
    Estimated,
}

impl PsMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PsMode::Known => "known",
            PsMode::Estimated => "estimated",
        }
    }
}

/// Point estimates for a set of cells together with the joint asymptotic
/// covariance of `sqrt(N) * (estimate - truth)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateTable {
    pub alpha_grid: Vec<f64>,
    pub cells: Vec<Cell>,
    pub estimates: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub n_clusters: usize,
    pub ps_mode: PsMode,
    /// Set when `B11` needed ridge regularisation before inversion.
    pub ridge_applied: bool,
}

impl EstimateTable {
    pub fn index_of(&self, a: u8, alpha: f64) -> Option<usize> {
        self.cells.iter().position(|c| c.a == a && c.alpha == alpha)
    }

    pub fn estimate(&self, a: u8, alpha: f64) -> Option<f64> {
        self.index_of(a, alpha).map(|i| self.estimates[i])
    }

    /// Variance of the estimate itself, i.e. the covariance diagonal over N.
    pub fn variance(&self, a: u8, alpha: f64) -> Option<f64> {
        self.index_of(a, alpha).map(|i| self.covariance[(i, i)] / self.n_clusters as f64)
    }

    pub fn standard_error(&self, a: u8, alpha: f64) -> Option<f64> {
        self.variance(a, alpha).map(|v| v.max(0.0).sqrt())
    }

    /// Wald interval at the given confidence level.
    pub fn confidence_interval(&self, a: u8, alpha: f64, level: f64) -> Option<(f64, f64)> {
        let est = self.estimate(a, alpha)?;
        let se = self.standard_error(a, alpha)?;
        let z = crate::math::normal_critical_value(level);
        Some((est - z * se, est + z * se))
    }

    /// Linear contrast `c' mu`; the variance is `c' Sigma c / N`.
    pub fn contrast(&self, coefficients: &[f64]) -> Result<(f64, f64)> {
        let m = self.cells.len();
        if coefficients.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "contrast has {} coefficients for {m} cells",
                coefficients.len()
            )));
        }
        let point = crate::math::dot(coefficients, &self.estimates);
        let mut quad = 0.0;
        for i in 0..m {
            if coefficients[i] == 0.0 {
                continue;
            }
            for j in 0..m {
                quad += coefficients[i] * self.covariance[(i, j)] * coefficients[j];
            }
        }
        Ok((point, quad / self.n_clusters as f64))
    }

    /// Contrast given as `(a, alpha, coefficient)` triples.
    pub fn contrast_cells(&self, terms: &[(u8, f64, f64)]) -> Result<(f64, f64)> {
        let mut c = vec![0.0; self.cells.len()];
        for &(a, alpha, w) in terms {
            let i = self.index_of(a, alpha).ok_or(Error::DimensionMismatch(format!(
                "no cell for a = {a}, alpha = {alpha}"
            )))?;
            c[i] += w;
        }
        self.contrast(&c)
    }

    /// `DE(alpha) = mu(1, alpha) - mu(0, alpha)`.
    pub fn direct_effect(&self, alpha: f64) -> Result<(f64, f64)> {
        self.contrast_cells(&[(1, alpha, 1.0), (0, alpha, -1.0)])
    }

    /// `IE(alpha1, alpha2) = mu(0, alpha2) - mu(0, alpha1)`.
    pub fn indirect_effect(&self, alpha1: f64, alpha2: f64) -> Result<(f64, f64)> {
        self.contrast_cells(&[(0, alpha2, 1.0), (0, alpha1, -1.0)])
    }

    /// `TE(alpha1, alpha2) = mu(1, alpha2) - mu(0, alpha1) = DE(alpha2) + IE(alpha1, alpha2)`.
    pub fn total_effect(&self, alpha1: f64, alpha2: f64) -> Result<(f64, f64)> {
        self.contrast_cells(&[(1, alpha2, 1.0), (0, alpha1, -1.0)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(id: &str, cov: Vec<Vec<f64>>, a: Vec<f64>) -> RawCluster {
        let n = a.len();
        RawCluster { id: id.into(), covariates: cov, treatment: a, outcome: vec![1.0; n] }
    }

    #[test]
    fn valid_population() {
        let pop = validate_population(&[
            raw("a", vec![vec![0.1], vec![0.2]], vec![0.0, 1.0]),
            raw("b", vec![vec![-1.0]], vec![1.0]),
        ])
        .unwrap();
        assert_eq!(pop.n_clusters(), 2);
        assert_eq!(pop.n_units(), 3);
        assert_eq!(pop.clusters()[0].covariates(1), &[0.2]);
    }

    #[test]
    fn non_binary_treatment() {
        let err = validate_population(&[raw("a", vec![vec![0.0]], vec![2.0])]).unwrap_err();
        assert!(err.contains(|e| matches!(e, Error::NonBinaryTreatment { value, .. } if *value == 2.0)));
    }

    #[test]
    fn inconsistent_p() {
        let err = validate_population(&[
            raw("a", vec![vec![0.0; 3]], vec![1.0]),
            raw("b", vec![vec![0.0; 4]], vec![0.0]),
        ])
        .unwrap_err();
        assert!(err.contains(|e| matches!(e, Error::DimensionMismatch(_))));
    }

    #[test]
    fn empty_and_ragged_and_missing() {
        let err = validate_population(&[]).unwrap_err();
        assert_eq!(err.violations, vec![Error::EmptyPopulation]);

        let mut r = raw("a", vec![vec![0.0], vec![1.0]], vec![0.0, 1.0]);
        r.outcome.pop();
        assert!(validate_population(&[r]).unwrap_err().contains(|e| matches!(e, Error::DimensionMismatch(_))));

        let r = raw("a", vec![vec![f64::NAN]], vec![0.0]);
        assert!(validate_population(&[r])
            .unwrap_err()
            .contains(|e| matches!(e, Error::MissingValue { field: "covariates", .. })));
    }

    #[test]
    fn collects_all_violations() {
        let err = validate_population(&[
            raw("a", vec![vec![0.0]], vec![3.0]),
            raw("a", vec![vec![0.0]], vec![0.5]),
        ])
        .unwrap_err();
        assert_eq!(err.violations.len(), 3);
    }

    #[test]
    fn alpha_distribution_rules() {
        assert!(DiscreteAlphaDistribution::new(vec![0.2, 0.4], vec![0.5, 0.5]).is_ok());
        assert!(DiscreteAlphaDistribution::new(vec![0.4, 0.2], vec![0.5, 0.5]).is_err());
        assert!(DiscreteAlphaDistribution::new(vec![0.2, 0.4], vec![0.5, 0.6]).is_err());
        assert!(DiscreteAlphaDistribution::new(vec![0.0], vec![1.0]).is_err());
        let d = DiscreteAlphaDistribution::empirical_restricted(&[0.1, 0.2, 0.2, 0.5, 0.9], 0.15, 0.6).unwrap();
        assert_eq!(d.support(), &[0.2, 0.5]);
        assert!((d.probs()[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn propensity_params_round_trip() {
        let m = PropensityModel::new(-0.2, vec![0.3, -0.15], 0.5).unwrap();
        let back = PropensityModel::from_params(&m.to_params(), m.quadrature_order);
        assert!((back.sigma_b - 0.5).abs() < 1e-15);
        assert_eq!(back.delta, m.delta);
        assert!(PropensityModel::new(0.0, vec![], -1.0).is_err());
        assert!(PropensityModel::with_order(0.0, vec![], 1.0, 0).is_err());
    }
}
