//! Simulation driver and its report files.

use std::path::Path;

use spillover::simulation::{run_replications, ArmReport, Estimand, SimulationConfig, SimulationReport};

use crate::error::{Result, Stage};
use crate::output::{create_dir, fmt10, write_csv, write_json};

const ESTIMAND_HEADER: [&str; 15] = [
    "arm",
    "estimand",
    "a",
    "alpha1",
    "alpha2",
    "truth",
    "mean_estimate",
    "bias",
    "bias_mcse",
    "mc_variance",
    "mean_asymptotic_variance",
    "variance_ratio",
    "coverage",
    "coverage_mcse",
    "replications",
];

fn estimand_fields(e: &Estimand) -> [String; 3] {
    match *e {
        Estimand::Mean { a, alpha } => [a.to_string(), fmt10(alpha), String::new()],
        Estimand::Direct { alpha } => [String::new(), fmt10(alpha), String::new()],
        Estimand::Indirect { alpha1, alpha2 } => [String::new(), fmt10(alpha1), fmt10(alpha2)],
    }
}

fn quantity(e: &Estimand) -> &'static str {
    match e {
        Estimand::Mean { a: 0, .. } => "Y0",
        Estimand::Mean { .. } => "Y1",
        Estimand::Direct { .. } => "DE",
        Estimand::Indirect { .. } => "IE",
    }
}

/// Smallest and largest coverage per quantity, as in a coverage table.
pub fn coverage_rows(arm: &ArmReport) -> Vec<Vec<String>> {
    ["Y0", "Y1", "DE", "IE"]
        .iter()
        .filter_map(|&q| {
            let (lo, hi) = arm.coverage_range(|e| quantity(e) == q)?;
            Some(vec![arm.arm.as_str().to_string(), q.to_string(), fmt10(lo), fmt10(hi)])
        })
        .collect()
}

/// Writes `estimands.csv`, `table1.csv`, `curves.csv` and `summary.json`.
pub fn write_simulation(report: &SimulationReport, out_dir: &Path) -> Result<()> {
    create_dir(out_dir)?;
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    let mut table1 = Vec::new();
    for arm in &report.arms {
        for s in &arm.summaries {
            let mut row = vec![arm.arm.as_str().to_string(), s.estimand.label()];
            row.extend(estimand_fields(&s.estimand));
            row.extend([
                fmt10(s.truth),
                fmt10(s.mean_estimate),
                fmt10(s.bias),
                fmt10(s.bias_mcse),
                fmt10(s.mc_variance),
                fmt10(s.mean_asymptotic_variance),
                fmt10(s.variance_ratio()),
                fmt10(s.coverage),
                fmt10(s.coverage_mcse),
                s.replications.to_string(),
            ]);
            rows.push(row);
            let alpha = match s.estimand {
                Estimand::Mean { alpha, .. } | Estimand::Direct { alpha } => alpha,
                Estimand::Indirect { .. } => continue,
            };
            curves.push(vec![
                arm.arm.as_str().to_string(),
                quantity(&s.estimand).to_string(),
                fmt10(alpha),
                fmt10(s.truth),
                fmt10(s.mean_estimate),
                fmt10(s.mean_estimate - 1.96 * s.mc_variance.sqrt()),
                fmt10(s.mean_estimate + 1.96 * s.mc_variance.sqrt()),
                fmt10(s.coverage),
            ]);
        }
        table1.extend(coverage_rows(arm));
    }
    write_csv(&out_dir.join("estimands.csv"), &ESTIMAND_HEADER, &rows)?;
    write_csv(&out_dir.join("table1.csv"), &["arm", "quantity", "coverage_min", "coverage_max"], &table1)?;
    write_csv(
        &out_dir.join("curves.csv"),
        &["arm", "quantity", "alpha", "truth", "mean_estimate", "band_low", "band_high", "coverage"],
        &curves,
    )?;
    write_json(&out_dir.join("summary.json"), report)
}

/// Runs the replication study and writes its reports.
pub fn run_simulation(config: &SimulationConfig, out_dir: &Path) -> Result<SimulationReport> {
    let report = run_replications(config).stage("simulate")?;
    write_simulation(&report, out_dir)?;
    Ok(report)
}
