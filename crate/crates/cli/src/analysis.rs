//! The estimation pipeline: ingest, propensity, policy, estimates, report.

use std::path::Path;

use serde::Serialize;
use spillover::estimators::{estimate_table, f_alpha_contrast, f_alpha_indirect};
use spillover::math::{logit, normal_critical_value, quantile_sorted};
use spillover::propensity::{self, FitSettings};
use spillover::{CounterfactualPolicy, DiscreteAlphaDistribution, EstimateTable, FittedPropensity, PropensityModel, PsMode};

use crate::config::{read_json, AlphaGridSpec, AnalysisConfig, DistributionSpec, PropensitySpec};
use crate::error::{CliError, Result, Stage};
use crate::ingest::{ingest_csv, Ingested, Standardization};
use crate::output::{create_dir, fmt10, write_csv, write_json};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub estimate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Interval {
    fn from_variance(estimate: f64, variance: f64, z: f64) -> Self {
        let se = variance.max(0.0).sqrt();
        Self { estimate, se, ci_low: estimate - z * se, ci_high: estimate + z * se }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FAlphaResult {
    pub name: String,
    pub f1: DiscreteAlphaDistribution,
    pub f2: DiscreteAlphaDistribution,
    pub y0_f1: Interval,
    pub y0_f2: Interval,
    pub indirect_effect: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropensityReport {
    pub mode: PsMode,
    pub model: PropensityModel,
    pub fit: Option<FittedPropensity>,
    pub standardization: Standardization,
    pub policy_delta: Vec<f64>,
}

pub struct AnalysisResult {
    pub ingested: Ingested,
    pub propensity: PropensityReport,
    pub alpha_grid: Vec<f64>,
    pub table: EstimateTable,
    pub f_alpha: Vec<FAlphaResult>,
    pub ci_level: f64,
    pub log: Vec<String>,
}

/// `points` evenly spaced values between the `lower` and `upper` quantiles
/// of `values`.
pub fn quantile_grid(values: &[f64], lower: f64, upper: f64, points: usize) -> Result<Vec<f64>> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (quantile_sorted(&sorted, lower), quantile_sorted(&sorted, upper));
    let grid: Vec<f64> = if points == 1 {
        vec![lo]
    } else {
        (0..points).map(|k| if k + 1 == points { hi } else { lo + (hi - lo) * k as f64 / (points - 1) as f64 }).collect()
    };
    let mut grid = grid;
    grid.dedup();
    if grid.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
        return Err(CliError::Validation(format!(
            "quantile grid [{lo}, {hi}] touches 0 or 1; choose narrower quantiles"
        )));
    }
    Ok(grid)
}

fn resolve_distribution(spec: &DistributionSpec, fractions: &[f64]) -> Result<DiscreteAlphaDistribution> {
    match spec {
        DistributionSpec::Explicit { support, probs } => {
            DiscreteAlphaDistribution::new(support.clone(), probs.clone()).stage("f-alpha")
        }
        DistributionSpec::Observed { lower, upper } => {
            let mut sorted = fractions.to_vec();
            sorted.sort_by(f64::total_cmp);
            let (lo, hi) = (quantile_sorted(&sorted, *lower), quantile_sorted(&sorted, *upper));
            DiscreteAlphaDistribution::empirical_restricted(fractions, lo, hi).stage("f-alpha")
        }
    }
}

fn propensity_model(config: &AnalysisConfig, ingested: &Ingested, log: &mut Vec<String>) -> Result<(PropensityModel, Option<FittedPropensity>)> {
    let pop = &ingested.population;
    match &config.propensity {
        PropensitySpec::Known { path } => {
            let mut model: PropensityModel = read_json(path)?;
            if model.p() != pop.p() {
                return Err(CliError::Validation(format!(
                    "known propensity has {} covariates, data has {}",
                    model.p(),
                    pop.p()
                )));
            }
            model.validate().stage("fit-ps")?;
            model.quadrature_order = config.quadrature_order;
            log.push(format!("propensity: known parameters from {}", path.display()));
            Ok((model, None))
        }
        PropensitySpec::Fit => {
            let treated: usize = pop.clusters().iter().map(|c| c.treated_count()).sum();
            let share = (treated as f64 / pop.n_units() as f64).clamp(0.01, 0.99);
            let init = PropensityModel::with_order(logit(share), vec![0.0; pop.p()], 0.5, config.quadrature_order)
                .stage("fit-ps")?;
            let fit = propensity::fit(pop, &init, FitSettings::default()).stage("fit-ps")?;
            log.push(format!(
                "propensity: fitted in {} iterations, log-likelihood {}, gradient {:e}{}{}",
                fit.iterations,
                fmt10(fit.log_likelihood),
                fit.gradient_max_norm,
                if fit.degenerate_sigma { ", random-intercept variance at zero" } else { "" },
                if fit.singular_hessian { ", information matrix singular" } else { "" },
            ));
            if !fit.converged {
                return Err(CliError::Numerical {
                    stage: "fit-ps",
                    message: format!("propensity fit did not converge (gradient {:e})", fit.gradient_max_norm),
                });
            }
            Ok((fit.model.clone(), Some(fit)))
        }
    }
}

/// Ingests the data and propensity model only.
pub fn fit_propensity(config: &AnalysisConfig) -> Result<(Ingested, PropensityReport, Vec<String>)> {
    let mut log = Vec::new();
    let ingested = ingest_csv(&config.input, config)?;
    log.extend(ingested.warnings.iter().map(|w| format!("warning: {w}")));
    log.push(format!(
        "ingest: {} units in {} clusters, {} covariates",
        ingested.population.n_units(),
        ingested.population.n_clusters(),
        ingested.population.p()
    ));
    let (model, fit) = propensity_model(config, &ingested, &mut log)?;
    let policy_delta = config.policy_delta.clone().unwrap_or_else(|| model.delta.clone());
    let mode = if fit.is_some() { PsMode::Estimated } else { PsMode::Known };
    let report = PropensityReport { mode, model, fit, standardization: ingested.standardization.clone(), policy_delta };
    Ok((ingested, report, log))
}

/// Runs the whole pipeline in memory.
pub fn analyze(config: &AnalysisConfig) -> Result<AnalysisResult> {
    let (ingested, report, mut log) = fit_propensity(config)?;
    let pop = &ingested.population;
    let fractions = pop.treated_fractions();

    let alpha_grid = match &config.alpha_grid {
        AlphaGridSpec::Explicit(v) => {
            let mut g = v.clone();
            g.sort_by(f64::total_cmp);
            g.dedup();
            g
        }
        AlphaGridSpec::Quantiles { lower, upper, points } => quantile_grid(&fractions, *lower, *upper, *points)?,
    };
    log.push(format!("alpha grid: {} values in [{}, {}]", alpha_grid.len(), fmt10(alpha_grid[0]), fmt10(*alpha_grid.last().unwrap())));

    let distributions: Vec<(String, DiscreteAlphaDistribution, DiscreteAlphaDistribution)> = config
        .f_alpha
        .iter()
        .map(|s| Ok((s.name.clone(), resolve_distribution(&s.f1, &fractions)?, resolve_distribution(&s.f2, &fractions)?)))
        .collect::<Result<_>>()?;
    let mut all_alphas = alpha_grid.clone();
    for (_, f1, f2) in &distributions {
        all_alphas.extend_from_slice(f1.support());
        all_alphas.extend_from_slice(f2.support());
    }
    all_alphas.sort_by(f64::total_cmp);
    all_alphas.dedup();

    let policy = CounterfactualPolicy::solve(pop, report.policy_delta.clone(), &all_alphas, spillover::allocation::DEFAULT_INTERCEPT_TOL)
        .stage("policy")?;
    log.push(format!("policy: intercepts solved for {} clusters at {} alpha values", pop.n_clusters(), all_alphas.len()));

    let log_densities = propensity::log_densities(&report.model, pop).stage("estimate")?;
    let scores = match report.mode {
        PsMode::Estimated => Some(propensity::scores(&report.model, pop).stage("estimate")?),
        PsMode::Known => None,
    };
    let (table, _) = estimate_table(pop, &policy, &alpha_grid, &log_densities, scores.as_deref()).stage("estimate")?;
    if table.ridge_applied {
        log.push("warning: score outer-product matrix was ridge-regularised before inversion".into());
    }

    let z = normal_critical_value(config.ci_level);
    let mut f_alpha = Vec::new();
    if !distributions.is_empty() {
        let mut support: Vec<f64> = distributions.iter().flat_map(|(_, f1, f2)| f1.support().iter().chain(f2.support()).copied()).collect();
        support.sort_by(f64::total_cmp);
        support.dedup();
        let (f_table, _) = estimate_table(pop, &policy, &support, &log_densities, scores.as_deref()).stage("f-alpha")?;
        for (name, f1, f2) in distributions {
            let (y1, v1) = f_alpha_contrast(&f_table, &f1, 0).stage("f-alpha")?;
            let (y2, v2) = f_alpha_contrast(&f_table, &f2, 0).stage("f-alpha")?;
            let (ie, vie) = f_alpha_indirect(&f_table, &f1, &f2).stage("f-alpha")?;
            log.push(format!("f-alpha `{name}`: IE = {} (se {})", fmt10(ie), fmt10(vie.max(0.0).sqrt())));
            f_alpha.push(FAlphaResult {
                name,
                f1,
                f2,
                y0_f1: Interval::from_variance(y1, v1, z),
                y0_f2: Interval::from_variance(y2, v2, z),
                indirect_effect: Interval::from_variance(ie, vie, z),
            });
        }
    }
    Ok(AnalysisResult { ingested, propensity: report, alpha_grid, table, f_alpha, ci_level: config.ci_level, log })
}

fn interval_row(i: Interval) -> [String; 4] {
    [fmt10(i.estimate), fmt10(i.se), fmt10(i.ci_low), fmt10(i.ci_high)]
}

/// Writes every report file of an analysis into `out_dir`.
pub fn write_analysis(result: &AnalysisResult, out_dir: &Path) -> Result<()> {
    create_dir(out_dir)?;
    let table = &result.table;
    let mode = table.ps_mode.as_str().to_string();
    let z = normal_critical_value(result.ci_level);
    let cell_interval = |a: u8, alpha: f64| {
        Interval::from_variance(table.estimate(a, alpha).unwrap(), table.variance(a, alpha).unwrap(), z)
    };

    let mut curves = Vec::new();
    for a in 0..2u8 {
        for &alpha in &result.alpha_grid {
            let mut row = vec![a.to_string(), fmt10(alpha)];
            row.extend(interval_row(cell_interval(a, alpha)));
            row.push(mode.clone());
            curves.push(row);
        }
    }
    write_csv(&out_dir.join("effect_curves.csv"), &["a", "alpha", "estimate", "se", "ci_low", "ci_high", "ps_mode"], &curves)?;

    let mut direct = Vec::new();
    for &alpha in &result.alpha_grid {
        let (d, v) = table.direct_effect(alpha).stage("write")?;
        let mut row = vec![fmt10(alpha)];
        row.extend(interval_row(Interval::from_variance(d, v, z)));
        row.push(mode.clone());
        direct.push(row);
    }
    write_csv(&out_dir.join("direct_effects.csv"), &["alpha", "estimate", "se", "ci_low", "ci_high", "ps_mode"], &direct)?;

    let mut indirect = Vec::new();
    for &a1 in &result.alpha_grid {
        for &a2 in &result.alpha_grid {
            let (ie, v) = table.indirect_effect(a1, a2).stage("write")?;
            let mut row = vec![fmt10(a1), fmt10(a2)];
            row.extend(interval_row(Interval::from_variance(ie, v, z)));
            row.push(mode.clone());
            indirect.push(row);
        }
    }
    write_csv(
        &out_dir.join("indirect_effects.csv"),
        &["alpha1", "alpha2", "estimate", "se", "ci_low", "ci_high", "ps_mode"],
        &indirect,
    )?;

    write_json(&out_dir.join("f_alpha_results.json"), &result.f_alpha)?;
    write_json(&out_dir.join("fitted_ps.json"), &result.propensity)?;
    let clusters: Vec<Vec<String>> =
        result.ingested.unit_clusters.iter().enumerate().map(|(i, c)| vec![(i + 1).to_string(), c.clone()]).collect();
    write_csv(&out_dir.join("clusters.csv"), &["row", "cluster"], &clusters)?;
    let log = out_dir.join("run.log");
    std::fs::write(&log, result.log.join("\n") + "\n").map_err(|e| CliError::io(&log, e))
}

/// Runs the pipeline and writes its reports.
pub fn run_analysis(config: &AnalysisConfig, out_dir: &Path) -> Result<AnalysisResult> {
    let result = analyze(config)?;
    write_analysis(&result, out_dir)?;
    Ok(result)
}
