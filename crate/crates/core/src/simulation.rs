//! Synthetic interference worlds with exact truths, and replication studies of
//! the estimators' bias, variance and interval coverage.
//!
//! A world is a fixed population of clusters with standard normal covariates
//! and pre-drawn binary potential outcomes `Y_ij(a, k)`, indexed by own
//! treatment `a` and number of treated neighbours `k`. Each replication redraws
//! only the observed treatment from a random-intercept logistic model and
//! reads the matching potential outcome.
//!
//! Random numbers come from counter-based ChaCha substreams keyed by
//! `(seed, purpose, replication, cluster)`, so results do not depend on the
//! order in which replications or clusters are processed.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{neighbor_count_distribution, CounterfactualPolicy, DEFAULT_INTERCEPT_TOL};
use crate::error::{Error, Result};
use crate::estimators::{estimate_table, weighted_population_estimate};
use crate::math::{dot, expit, normal_critical_value};
use crate::model::{Cell, ClusterData, Population, PropensityModel, PsMode};
use crate::propensity::{self, FitSettings};

/// Outcome log-odds
/// `intercept + treatment a + treated_share (a + k)/n + L' covariates + interaction a (a + k)/n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub intercept: f64,
    pub treatment: f64,
    pub treated_share: f64,
    pub covariates: Vec<f64>,
    pub interaction: f64,
}

impl Default for OutcomeModel {
    fn default() -> Self {
        Self {
            intercept: 0.5,
            treatment: -0.6,
            treated_share: -1.4,
            covariates: vec![-0.098, -0.145, 0.1, 0.3],
            interaction: 0.351,
        }
    }
}

impl OutcomeModel {
    pub fn log_odds(&self, a: u8, treated_neighbors: usize, n: usize, covariates: &[f64]) -> f64 {
        let a = f64::from(a);
        let share = (a + treated_neighbors as f64) / n as f64;
        self.intercept
            + self.treatment * a
            + self.treated_share * share
            + dot(&self.covariates, covariates)
            + self.interaction * a * share
    }
}

/// Observed-treatment log-odds `intercept + b_i + L' covariates`, `b_i ~ N(0, sigma_b^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentModel {
    pub intercept: f64,
    pub covariates: Vec<f64>,
    pub sigma_b: f64,
}

impl Default for TreatmentModel {
    fn default() -> Self {
        Self { intercept: -0.2, covariates: vec![0.3, -0.15, 0.2, -0.18], sigma_b: 0.5 }
    }
}

impl TreatmentModel {
    pub fn propensity_model(&self, quadrature_order: usize) -> Result<PropensityModel> {
        PropensityModel::with_order(self.intercept, self.covariates.clone(), self.sigma_b, quadrature_order)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub n_clusters: usize,
    /// Inclusive range of cluster sizes, drawn uniformly.
    pub cluster_size_min: usize,
    pub cluster_size_max: usize,
    pub outcome: OutcomeModel,
    pub treatment: TreatmentModel,
    /// Covariate coefficients of the counterfactual policy; defaults to the
    /// treatment model's coefficients when absent.
    pub policy_delta: Option<Vec<f64>>,
    pub replications: usize,
    pub seed: u64,
    pub alpha_grid: Vec<f64>,
    pub arms: Vec<PsMode>,
    pub ci_level: f64,
    pub quadrature_order: usize,
    /// Keep per-replication estimates in the report.
    pub keep_replications: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_clusters: 2000,
            cluster_size_min: 14,
            cluster_size_max: 18,
            outcome: OutcomeModel::default(),
            treatment: TreatmentModel::default(),
            policy_delta: None,
            replications: 500,
            seed: 20_190_101,
            alpha_grid: vec![0.25, 0.35, 0.45, 0.55, 0.65],
            arms: vec![PsMode::Known, PsMode::Estimated],
            ci_level: 0.95,
            quadrature_order: PropensityModel::DEFAULT_QUADRATURE_ORDER,
            keep_replications: false,
        }
    }
}

impl SimulationConfig {
    pub fn p(&self) -> usize {
        self.outcome.covariates.len()
    }

    pub fn policy_delta(&self) -> Vec<f64> {
        self.policy_delta.clone().unwrap_or_else(|| self.treatment.covariates.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.n_clusters == 0 {
            return bad("n_clusters must be >= 1".into());
        }
        if self.cluster_size_min == 0 || self.cluster_size_min > self.cluster_size_max {
            return bad(format!(
                "cluster size range [{}, {}] is empty",
                self.cluster_size_min, self.cluster_size_max
            ));
        }
        if self.replications == 0 {
            return bad("replications must be >= 1".into());
        }
        if self.treatment.covariates.len() != self.p() || self.policy_delta().len() != self.p() {
            return Err(Error::DimensionMismatch(
                "outcome, treatment and policy coefficient vectors must have equal length".into(),
            ));
        }
        if self.alpha_grid.is_empty() || self.alpha_grid.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return bad("alpha_grid must be non-empty and inside (0, 1)".into());
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return bad(format!("ci_level {} must lie in (0, 1)", self.ci_level));
        }
        if self.arms.is_empty() {
            return bad("at least one propensity arm is required".into());
        }
        self.treatment.propensity_model(self.quadrature_order)?;
        Ok(())
    }

    pub fn sorted_grid(&self) -> Vec<f64> {
        let mut g = self.alpha_grid.clone();
        g.sort_by(f64::total_cmp);
        g.dedup();
        g
    }
}

const STREAM_WORLD: u64 = 1;
const STREAM_TREATMENT: u64 = 2;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, purpose, replication, cluster)`.
pub fn substream(seed: u64, purpose: u64, replication: u64, cluster: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(purpose)));
    rng.set_stream(replication);
    rng.set_word_pos(u128::from(cluster) << 32);
    rng
}

/// Pre-drawn potential outcomes `Y_ij(a, k)` of every unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialOutcomeTable {
    // per cluster: unit-major, then a, then k; 2 n entries per unit
    clusters: Vec<Vec<u8>>,
    sizes: Vec<usize>,
}

impl PotentialOutcomeTable {
    pub fn get(&self, cluster: usize, unit: usize, a: u8, treated_neighbors: usize) -> u8 {
        let n = self.sizes[cluster];
        self.clusters[cluster][unit * 2 * n + usize::from(a) * n + treated_neighbors]
    }

    pub fn cluster_size(&self, cluster: usize) -> usize {
        self.sizes[cluster]
    }

    pub fn n_clusters(&self) -> usize {
        self.sizes.len()
    }
}

/// Draws covariates and potential outcomes. Treatments and outcomes of the
/// returned population are placeholders (all zero).
pub fn generate_population(config: &SimulationConfig, seed: u64) -> Result<(Population, PotentialOutcomeTable)> {
    config.validate()?;
    let p = config.p();
    let built: Vec<(ClusterData, Vec<u8>, usize)> = (0..config.n_clusters)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, STREAM_WORLD, 0, i as u64);
            let n = rng.gen_range(config.cluster_size_min..=config.cluster_size_max);
            let covariates: Vec<Vec<f64>> =
                (0..n).map(|_| (0..p).map(|_| rng.sample(StandardNormal)).collect()).collect();
            let mut outcomes = Vec::with_capacity(2 * n * n);
            for row in &covariates {
                for a in 0..2u8 {
                    for k in 0..n {
                        let prob = expit(config.outcome.log_odds(a, k, n, row));
                        outcomes.push(u8::from(rng.gen::<f64>() < prob));
                    }
                }
            }
            let cluster = ClusterData::new(format!("c{i}"), covariates, vec![0; n], vec![0.0; n])?;
            Ok((cluster, outcomes, n))
        })
        .collect::<Result<_>>()?;
    let mut clusters = Vec::with_capacity(built.len());
    let mut table = PotentialOutcomeTable { clusters: Vec::new(), sizes: Vec::new() };
    for (c, o, n) in built {
        clusters.push(c);
        table.clusters.push(o);
        table.sizes.push(n);
    }
    Ok((Population::new(clusters)?, table))
}

/// Draws the observed treatment of replication `replication` and reads the
/// matching potential outcomes.
pub fn resample_treatment(
    population: &Population,
    table: &PotentialOutcomeTable,
    model: &TreatmentModel,
    seed: u64,
    replication: u64,
) -> Result<Population> {
    if table.n_clusters() != population.n_clusters() {
        return Err(Error::LengthMismatch { expected: population.n_clusters(), actual: table.n_clusters() });
    }
    let random_effect =
        Normal::new(0.0, model.sigma_b).map_err(|e| Error::InvalidParameter(format!("sigma_b: {e}")))?;
    let clusters = population
        .clusters()
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut rng = substream(seed, STREAM_TREATMENT, replication, i as u64);
            let b: f64 = random_effect.sample(&mut rng);
            let treatment: Vec<u8> = c
                .covariate_rows()
                .map(|row| {
                    let prob = expit(model.intercept + b + dot(&model.covariates, row));
                    u8::from(rng.gen::<f64>() < prob)
                })
                .collect();
            let treated = treatment.iter().filter(|&&a| a == 1).count();
            let outcome = (0..c.len())
                .map(|j| {
                    let a = treatment[j];
                    f64::from(table.get(i, j, a, treated - usize::from(a)))
                })
                .collect();
            c.with_observations(treatment, outcome)
        })
        .collect::<Result<Vec<_>>>()?;
    Population::new(clusters)
}

/// True average potential outcomes of a fixed population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthTable {
    pub cells: Vec<Cell>,
    /// Population averages, one per cell.
    pub values: Vec<f64>,
    /// Group averages, `group_values[i][c]` for cluster `i` and cell `c`.
    pub group_values: Vec<Vec<f64>>,
}

impl TruthTable {
    pub fn value(&self, a: u8, alpha: f64) -> Option<f64> {
        self.cells.iter().position(|c| c.a == a && c.alpha == alpha).map(|i| self.values[i])
    }

    pub fn direct_effect(&self, alpha: f64) -> Option<f64> {
        Some(self.value(1, alpha)? - self.value(0, alpha)?)
    }

    pub fn indirect_effect(&self, alpha1: f64, alpha2: f64) -> Option<f64> {
        Some(self.value(0, alpha2)? - self.value(0, alpha1)?)
    }
}

/// `Ybar_ij(a; alpha) = sum_k P_alpha(K_{-j} = k) Y_ij(a, k)`, averaged over
/// units and then clusters.
pub fn true_estimands(
    population: &Population,
    table: &PotentialOutcomeTable,
    policy: &CounterfactualPolicy,
    alphas: &[f64],
) -> Result<TruthTable> {
    let cells = crate::estimators::grid_cells(alphas);
    let group_values = population
        .clusters()
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let n = c.len();
            let mut row = vec![0.0; cells.len()];
            for (k_alpha, &alpha) in alphas.iter().enumerate() {
                let probs = policy.unit_probabilities(c, alpha)?;
                for j in 0..n {
                    let pmf = neighbor_count_distribution(&probs, j);
                    for a in 0..2u8 {
                        let ybar: f64 =
                            pmf.iter().enumerate().map(|(k, pk)| pk * f64::from(table.get(i, j, a, k))).sum();
                        row[usize::from(a) * alphas.len() + k_alpha] += ybar / n as f64;
                    }
                }
            }
            Ok(row)
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let n = group_values.len() as f64;
    let values = (0..cells.len()).map(|c| group_values.iter().map(|r| r[c]).sum::<f64>() / n).collect();
    Ok(TruthTable { cells, values, group_values })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Estimand {
    Mean { a: u8, alpha: f64 },
    Direct { alpha: f64 },
    Indirect { alpha1: f64, alpha2: f64 },
}

impl Estimand {
    pub fn label(&self) -> String {
        match self {
            Estimand::Mean { a, .. } => format!("Y({a})"),
            Estimand::Direct { .. } => "DE".into(),
            Estimand::Indirect { .. } => "IE".into(),
        }
    }

    fn truth(&self, t: &TruthTable) -> f64 {
        match *self {
            Estimand::Mean { a, alpha } => t.value(a, alpha),
            Estimand::Direct { alpha } => t.direct_effect(alpha),
            Estimand::Indirect { alpha1, alpha2 } => t.indirect_effect(alpha1, alpha2),
        }
        .expect("estimand cells are on the truth grid")
    }

    /// Estimands reported for a grid: every mean cell, DE at every alpha and IE
    /// for every ordered pair `alpha1 < alpha2`.
    pub fn for_grid(alphas: &[f64]) -> Vec<Estimand> {
        let mut out: Vec<Estimand> = [0u8, 1]
            .iter()
            .flat_map(|&a| alphas.iter().map(move |&alpha| Estimand::Mean { a, alpha }))
            .collect();
        out.extend(alphas.iter().map(|&alpha| Estimand::Direct { alpha }));
        for (i, &a1) in alphas.iter().enumerate() {
            for &a2 in &alphas[i + 1..] {
                out.push(Estimand::Indirect { alpha1: a1, alpha2: a2 });
            }
        }
        out
    }
}

/// Monte-Carlo summary of one estimand in one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimandSummary {
    pub estimand: Estimand,
    pub truth: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    /// Monte-Carlo standard error of the bias.
    pub bias_mcse: f64,
    pub mc_variance: f64,
    pub mean_asymptotic_variance: f64,
    /// Coverage of the Wald interval, in percent.
    pub coverage: f64,
    pub coverage_mcse: f64,
    pub replications: usize,
}

impl EstimandSummary {
    pub fn variance_ratio(&self) -> f64 {
        self.mean_asymptotic_variance / self.mc_variance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: PsMode,
    pub summaries: Vec<EstimandSummary>,
    /// Replications dropped because estimation failed.
    pub dropped: usize,
    pub failures: Vec<String>,
    /// `(estimate, variance)` per kept replication and estimand, if requested.
    pub replications: Vec<Vec<(f64, f64)>>,
    /// Cluster-size weighted estimates of the mean cells per kept replication,
    /// if replications are kept.
    pub size_weighted: Vec<Vec<f64>>,
    /// Mean number of optimiser iterations of the propensity fits.
    pub mean_fit_iterations: Option<f64>,
}

impl ArmReport {
    pub fn summary(&self, estimand: &Estimand) -> Option<&EstimandSummary> {
        self.summaries.iter().find(|s| &s.estimand == estimand)
    }

    /// Smallest and largest coverage over estimands matching `pred`.
    pub fn coverage_range(&self, pred: impl Fn(&Estimand) -> bool) -> Option<(f64, f64)> {
        let cov: Vec<f64> = self.summaries.iter().filter(|s| pred(&s.estimand)).map(|s| s.coverage).collect();
        if cov.is_empty() {
            return None;
        }
        Some((cov.iter().copied().fold(f64::INFINITY, f64::min), cov.iter().copied().fold(f64::NEG_INFINITY, f64::max)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub config: SimulationConfig,
    pub n_units: usize,
    pub estimands: Vec<Estimand>,
    pub truth: TruthTable,
    pub arms: Vec<ArmReport>,
    /// 10th and 90th percentiles of observed cluster treated proportions,
    /// pooled over clusters and replications.
    pub treated_fraction_quantiles: (f64, f64),
}

impl SimulationReport {
    pub fn arm(&self, arm: PsMode) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.arm == arm)
    }
}

struct ArmDraw {
    values: Vec<(f64, f64)>,
    size_weighted: Vec<f64>,
    fit_iterations: Option<usize>,
}

struct ReplicationDraw {
    arms: Vec<std::result::Result<ArmDraw, String>>,
    // (cluster size, treated count) tallies
    fractions: BTreeMap<(usize, usize), usize>,
}

fn estimate_arm(
    world: &World,
    observed: &Population,
    arm: PsMode,
) -> std::result::Result<ArmDraw, String> {
    let config = &world.config;
    let true_model = config.treatment.propensity_model(config.quadrature_order).map_err(|e| e.to_string())?;
    let (model, fit_iterations) = match arm {
        PsMode::Known => (true_model, None),
        PsMode::Estimated => {
            let init = PropensityModel::with_order(0.0, vec![0.0; config.p()], 0.3, config.quadrature_order)
                .map_err(|e| e.to_string())?;
            let fit = propensity::fit(observed, &init, FitSettings::default()).map_err(|e| e.to_string())?;
            if !fit.converged {
                return Err(format!("propensity fit did not converge (gradient {:e})", fit.gradient_max_norm));
            }
            (fit.model, Some(fit.iterations))
        }
    };
    let log_densities = propensity::log_densities(&model, observed).map_err(|e| e.to_string())?;
    let scores = match arm {
        PsMode::Known => None,
        PsMode::Estimated => Some(propensity::scores(&model, observed).map_err(|e| e.to_string())?),
    };
    let (table, blocks) = estimate_table(observed, &world.policy, &world.grid, &log_densities, scores.as_deref())
        .map_err(|e| e.to_string())?;
    let values = world
        .estimands
        .iter()
        .map(|e| match *e {
            Estimand::Mean { a, alpha } => {
                Ok((table.estimate(a, alpha).unwrap_or(f64::NAN), table.variance(a, alpha).unwrap_or(f64::NAN)))
            }
            Estimand::Direct { alpha } => table.direct_effect(alpha),
            Estimand::Indirect { alpha1, alpha2 } => table.indirect_effect(alpha1, alpha2),
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let sizes: Vec<f64> = observed.clusters().iter().map(|c| c.len() as f64).collect();
    let size_weighted = (0..blocks.cells.len())
        .map(|c| {
            let col: Vec<f64> = blocks.group_estimates.column(c).iter().copied().collect();
            weighted_population_estimate(&sizes, &col)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    Ok(ArmDraw { values, size_weighted, fit_iterations })
}

/// A generated world ready for replications.
pub struct World {
    pub config: SimulationConfig,
    pub population: Population,
    pub table: PotentialOutcomeTable,
    pub policy: CounterfactualPolicy,
    pub grid: Vec<f64>,
    pub truth: TruthTable,
    pub estimands: Vec<Estimand>,
}

impl World {
    pub fn build(config: &SimulationConfig) -> Result<Self> {
        config.validate()?;
        let grid = config.sorted_grid();
        let (population, table) = generate_population(config, config.seed)?;
        let policy = CounterfactualPolicy::solve(&population, config.policy_delta(), &grid, DEFAULT_INTERCEPT_TOL)?;
        let truth = true_estimands(&population, &table, &policy, &grid)?;
        let estimands = Estimand::for_grid(&grid);
        Ok(Self { config: config.clone(), population, table, policy, grid, truth, estimands })
    }

    fn replicate(&self, r: usize) -> ReplicationDraw {
        let observed = match resample_treatment(&self.population, &self.table, &self.config.treatment, self.config.seed, r as u64) {
            Ok(p) => p,
            Err(e) => {
                return ReplicationDraw {
                    arms: self.config.arms.iter().map(|_| Err(e.to_string())).collect(),
                    fractions: BTreeMap::new(),
                }
            }
        };
        let mut fractions = BTreeMap::new();
        for c in observed.clusters() {
            *fractions.entry((c.len(), c.treated_count())).or_insert(0) += 1;
        }
        let arms = self.config.arms.iter().map(|&arm| estimate_arm(self, &observed, arm)).collect();
        ReplicationDraw { arms, fractions }
    }

    /// Runs every replication and aggregates per arm.
    pub fn run(&self) -> SimulationReport {
        let config = &self.config;
        let draws: Vec<ReplicationDraw> = (0..config.replications).into_par_iter().map(|r| self.replicate(r)).collect();
        let z = normal_critical_value(config.ci_level);
        let truths: Vec<f64> = self.estimands.iter().map(|e| e.truth(&self.truth)).collect();

        let arms = config
            .arms
            .iter()
            .enumerate()
            .map(|(k, &arm)| {
                let mut kept = Vec::new();
                let mut size_weighted = Vec::new();
                let mut failures = Vec::new();
                let mut iterations = Vec::new();
                for (r, d) in draws.iter().enumerate() {
                    match &d.arms[k] {
                        Ok(draw) => {
                            kept.push(draw.values.clone());
                            size_weighted.push(draw.size_weighted.clone());
                            iterations.extend(draw.fit_iterations);
                        }
                        Err(e) => failures.push(format!("replication {r}: {e}")),
                    }
                }
                let summaries = self
                    .estimands
                    .iter()
                    .enumerate()
                    .map(|(e, &estimand)| summarize(estimand, truths[e], kept.iter().map(|row| row[e]), z))
                    .collect();
                let mean_fit_iterations = (!iterations.is_empty())
                    .then(|| iterations.iter().sum::<usize>() as f64 / iterations.len() as f64);
                ArmReport {
                    arm,
                    summaries,
                    dropped: failures.len(),
                    failures,
                    replications: if config.keep_replications { kept } else { Vec::new() },
                    size_weighted: if config.keep_replications { size_weighted } else { Vec::new() },
                    mean_fit_iterations,
                }
            })
            .collect();

        let mut fractions: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for d in &draws {
            for (key, count) in &d.fractions {
                *fractions.entry(*key).or_insert(0) += count;
            }
        }
        SimulationReport {
            config: config.clone(),
            n_units: self.population.n_units(),
            estimands: self.estimands.clone(),
            truth: self.truth.clone(),
            arms,
            treated_fraction_quantiles: (
                tallied_quantile(&fractions, 0.1),
                tallied_quantile(&fractions, 0.9),
            ),
        }
    }
}

/// Generates the world and runs the replication study described by `config`.
pub fn run_replications(config: &SimulationConfig) -> Result<SimulationReport> {
    Ok(World::build(config)?.run())
}

fn summarize(estimand: Estimand, truth: f64, draws: impl Iterator<Item = (f64, f64)>, z: f64) -> EstimandSummary {
    let draws: Vec<(f64, f64)> = draws.collect();
    let r = draws.len();
    let rf = r as f64;
    let mean = draws.iter().map(|d| d.0).sum::<f64>() / rf;
    let mc_variance = if r > 1 { draws.iter().map(|d| (d.0 - mean).powi(2)).sum::<f64>() / (rf - 1.0) } else { 0.0 };
    let mean_asymptotic_variance = draws.iter().map(|d| d.1).sum::<f64>() / rf;
    let hits = draws
        .iter()
        .filter(|(est, var)| {
            let half = z * var.max(0.0).sqrt();
            est - half <= truth && truth <= est + half
        })
        .count();
    let cov = hits as f64 / rf;
    EstimandSummary {
        estimand,
        truth,
        mean_estimate: mean,
        bias: mean - truth,
        bias_mcse: (mc_variance / rf).sqrt(),
        mc_variance,
        mean_asymptotic_variance,
        coverage: 100.0 * cov,
        coverage_mcse: 100.0 * (cov * (1.0 - cov) / rf).sqrt(),
        replications: r,
    }
}

fn tallied_quantile(tally: &BTreeMap<(usize, usize), usize>, q: f64) -> f64 {
    let mut values: Vec<(f64, usize)> = tally.iter().map(|(&(n, k), &c)| (k as f64 / n as f64, c)).collect();
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: usize = values.iter().map(|v| v.1).sum();
    let at = |idx: usize| {
        let mut seen = 0;
        for &(v, c) in &values {
            seen += c;
            if idx < seen {
                return v;
            }
        }
        values.last().unwrap().0
    };
    let h = (total - 1) as f64 * q;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    at(lo) + (h - lo as f64) * (at(hi) - at(lo))
}
