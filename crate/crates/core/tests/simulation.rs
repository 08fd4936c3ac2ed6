mod common;

use common::expit;
use spillover::math::quantile_sorted;
use spillover::simulation::{
    generate_population, resample_treatment, run_replications, Estimand, OutcomeModel, SimulationConfig,
    TreatmentModel,
};
use spillover::PsMode;

#[test]
fn default_world_has_expected_scale() {
    let config = SimulationConfig::default();
    let (pop, _) = generate_population(&config, config.seed).unwrap();
    assert_eq!(pop.n_clusters(), 2000);
    let units = pop.n_units() as f64;
    assert!((units - 31_553.0).abs() / 31_553.0 < 0.03, "{units}");
    assert!(pop.clusters().iter().all(|c| (14..=18).contains(&c.len())));
}

#[test]
fn potential_outcome_contrast_matches_model() {
    let config = SimulationConfig { n_clusters: 3000, cluster_size_min: 10, cluster_size_max: 10, ..Default::default() };
    let (pop, table) = generate_population(&config, 8).unwrap();
    let k = 4;
    let (mut diffs, mut expected) = (Vec::new(), 0.0);
    for (i, c) in pop.clusters().iter().enumerate() {
        for j in 0..c.len() {
            let l = c.covariates(j);
            diffs.push(f64::from(table.get(i, j, 1, k)) - f64::from(table.get(i, j, 0, k)));
            expected += expit(config.outcome.log_odds(1, k, 10, l)) - expit(config.outcome.log_odds(0, k, 10, l));
        }
    }
    let m = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / m;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
    expected /= m;
    assert!((mean - expected).abs() < 3.0 * sd / m.sqrt(), "{mean} vs {expected}");
}

#[test]
fn constant_propensity_treats_expit_of_intercept() {
    let config = SimulationConfig {
        n_clusters: 1500,
        treatment: TreatmentModel { intercept: -0.2, covariates: vec![0.0; 4], sigma_b: 0.0 },
        ..Default::default()
    };
    let (pop, table) = generate_population(&config, 9).unwrap();
    let obs = resample_treatment(&pop, &table, &config.treatment, 9, 0).unwrap();
    let treated: usize = obs.clusters().iter().map(|c| c.treated_count()).sum();
    let n = obs.n_units() as f64;
    let p = expit(-0.2);
    assert!((p - 0.450).abs() < 5e-4);
    assert!((treated as f64 / n - p).abs() < 3.0 * (p * (1.0 - p) / n).sqrt());
}

#[test]
fn treated_fraction_quantiles_span_the_grid() {
    let config = SimulationConfig::default();
    let (pop, table) = generate_population(&config, config.seed).unwrap();
    let mut fractions = Vec::new();
    for r in 0..20 {
        let obs = resample_treatment(&pop, &table, &config.treatment, config.seed, r).unwrap();
        fractions.extend(obs.treated_fractions());
    }
    fractions.sort_by(f64::total_cmp);
    let (q10, q90) = (quantile_sorted(&fractions, 0.1), quantile_sorted(&fractions, 0.9));
    assert!((q10 - 0.25).abs() < 0.03 && (q90 - 0.65).abs() < 0.03, "{q10} {q90}");
}

#[test]
fn replication_study_is_reproducible_and_serialisable() {
    let config = SimulationConfig {
        n_clusters: 60,
        replications: 6,
        alpha_grid: vec![0.35, 0.55],
        keep_replications: true,
        ..Default::default()
    };
    let a = run_replications(&config).unwrap();
    let b = run_replications(&config).unwrap();
    let ja = serde_json::to_string(&a).unwrap();
    assert_eq!(ja, serde_json::to_string(&b).unwrap());
    let back: spillover::simulation::SimulationReport = serde_json::from_str(&ja).unwrap();
    assert_eq!(back, a);
    let estimated = a.arm(PsMode::Estimated).unwrap();
    assert_eq!(estimated.replications.len() + estimated.dropped, 6);
    assert_eq!(a.estimands.len(), 4 + 2 + 1);
}

#[test]
fn known_propensity_estimator_is_unbiased_at_small_scale() {
    let config = SimulationConfig {
        n_clusters: 200,
        replications: 200,
        alpha_grid: vec![0.3, 0.5],
        arms: vec![PsMode::Known],
        outcome: OutcomeModel::default(),
        ..Default::default()
    };
    let report = run_replications(&config).unwrap();
    let arm = report.arm(PsMode::Known).unwrap();
    assert_eq!(arm.dropped, 0);
    for s in &arm.summaries {
        if let Estimand::Mean { .. } = s.estimand {
            assert!(s.bias.abs() < 3.5 * s.bias_mcse, "{s:?}");
        }
    }
}
