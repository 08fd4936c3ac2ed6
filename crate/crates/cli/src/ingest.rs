//! CSV ingestion into a validated population.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use spillover::clustering::{cluster_points, Linkage};
use spillover::{validate_population, Population, RawCluster};

use crate::config::AnalysisConfig;
use crate::error::{CliError, Result, Stage};

/// Column means and scales used to z-score the covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub columns: Vec<String>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardization {
    pub fn identity(columns: Vec<String>) -> Self {
        let p = columns.len();
        Self { columns, means: vec![0.0; p], scales: vec![1.0; p] }
    }

    /// Means and sample standard deviations of the columns of `rows`.
    pub fn fit(columns: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let p = columns.len();
        let n = rows.len() as f64;
        if rows.len() < 2 {
            return Err(CliError::Validation("standardisation needs at least two units".into()));
        }
        let means: Vec<f64> = (0..p).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
        let scales: Vec<f64> = (0..p)
            .map(|k| (rows.iter().map(|r| (r[k] - means[k]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
            .collect();
        if let Some(k) = scales.iter().position(|s| !(*s > 0.0)) {
            return Err(CliError::Validation(format!("covariate `{}` is constant", columns[k])));
        }
        Ok(Self { columns, means, scales })
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.means).zip(&self.scales).map(|((x, m), s)| (x - m) / s).collect()
    }

    pub fn invert(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.means).zip(&self.scales).map(|((z, m), s)| z * s + m).collect()
    }
}

/// One parsed data row.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitRow {
    pub line: u64,
    pub cluster: Option<String>,
    pub covariates: Vec<f64>,
    pub treatment: f64,
    pub outcome: f64,
    pub coordinates: Option<[f64; 2]>,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub population: Population,
    pub standardization: Standardization,
    /// Cluster id of every input row, in file order.
    pub unit_clusters: Vec<String>,
    pub warnings: Vec<String>,
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers.iter().position(|h| h.trim() == name).ok_or_else(|| CliError::MissingColumn(name.to_string()))
}

fn number(record: &csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<f64> {
    let cell = record.get(idx).unwrap_or("").trim();
    if cell.is_empty() || cell.eq_ignore_ascii_case("na") {
        // missing values are rejected by population validation
        return Ok(f64::NAN);
    }
    cell.parse::<f64>().map_err(|_| CliError::Parse {
        row: line,
        column: name.to_string(),
        message: format!("`{cell}` is not a number"),
    })
}

/// Reads the rows of `path` named by `config`. Rows are numbered by their
/// line in the file, the header being line 1.
pub fn read_rows(path: &Path, config: &AnalysisConfig) -> Result<Vec<UnitRow>> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers()?.clone();
    let cov_idx: Vec<usize> = config.covariates.iter().map(|c| column(&headers, c)).collect::<Result<_>>()?;
    let treat_idx = column(&headers, &config.treatment)?;
    let out_idx = column(&headers, &config.outcome)?;
    let id_idx = config.cluster_id.as_deref().map(|c| column(&headers, c)).transpose()?;
    let coord_idx = match &config.clustering {
        Some(spec) => Some([column(&headers, &spec.coordinates[0])?, column(&headers, &spec.coordinates[1])?]),
        None => None,
    };

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let covariates = cov_idx
            .iter()
            .zip(&config.covariates)
            .map(|(&i, name)| number(&record, i, name, line))
            .collect::<Result<_>>()?;
        let coordinates = match (coord_idx, &config.clustering) {
            (Some([x, y]), Some(spec)) => {
                let pt = [number(&record, x, &spec.coordinates[0], line)?, number(&record, y, &spec.coordinates[1], line)?];
                if pt.iter().any(|v| !v.is_finite()) {
                    return Err(CliError::Parse { row: line, column: spec.coordinates[0].clone(), message: "missing coordinate".into() });
                }
                Some(pt)
            }
            _ => None,
        };
        rows.push(UnitRow {
            line,
            cluster: id_idx.map(|i| record.get(i).unwrap_or("").trim().to_string()),
            covariates,
            treatment: number(&record, treat_idx, &config.treatment, line)?,
            outcome: number(&record, out_idx, &config.outcome, line)?,
            coordinates,
        });
    }
    if rows.is_empty() {
        return Err(CliError::Validation(format!("{} has no data rows", path.display())));
    }
    Ok(rows)
}

/// Clusters the rows by their coordinates, returning one label per row.
pub fn spatial_labels(rows: &[UnitRow], k: usize, linkage: Linkage) -> Result<Vec<usize>> {
    let points: Vec<[f64; 2]> = rows.iter().map(|r| r.coordinates.expect("coordinates parsed")).collect();
    cluster_points(&points, k, linkage).stage("cluster")
}

/// Reads, optionally clusters and standardises, and validates the input.
pub fn ingest_csv(path: &Path, config: &AnalysisConfig) -> Result<Ingested> {
    let rows = read_rows(path, config)?;
    let mut warnings = Vec::new();
    let ids: Vec<String> = match &config.clustering {
        Some(spec) => {
            let names = spec.coordinates.join(" ").to_ascii_lowercase();
            if names.contains("lon") || names.contains("lat") {
                warnings.push("clustering treats longitude/latitude as planar coordinates".to_string());
            }
            spatial_labels(&rows, spec.k, spec.linkage)?.into_iter().map(|l| format!("k{l}")).collect()
        }
        None => rows.iter().map(|r| r.cluster.clone().unwrap_or_default()).collect(),
    };
    if let Some(r) = rows.iter().zip(&ids).find(|(_, id)| id.is_empty()) {
        return Err(CliError::Parse {
            row: r.0.line,
            column: config.cluster_id.clone().unwrap_or_default(),
            message: "empty cluster id".into(),
        });
    }

    let raw_cov: Vec<Vec<f64>> = rows.iter().map(|r| r.covariates.clone()).collect();
    let standardization = if config.standardize {
        if raw_cov.iter().flatten().any(|x| !x.is_finite()) {
            // report missing covariates through validation, unstandardised
            Standardization::identity(config.covariates.clone())
        } else {
            Standardization::fit(config.covariates.clone(), &raw_cov)?
        }
    } else {
        Standardization::identity(config.covariates.clone())
    };

    let mut order: Vec<String> = Vec::new();
    let mut members: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, id) in ids.iter().enumerate() {
        let entry = members.entry(id.as_str()).or_default();
        if entry.is_empty() {
            order.push(id.clone());
        }
        entry.push(i);
    }
    let raw: Vec<RawCluster> = order
        .iter()
        .map(|id| {
            let idx = &members[id.as_str()];
            RawCluster {
                id: id.clone(),
                covariates: idx.iter().map(|&i| standardization.apply(&raw_cov[i])).collect(),
                treatment: idx.iter().map(|&i| rows[i].treatment).collect(),
                outcome: idx.iter().map(|&i| rows[i].outcome).collect(),
            }
        })
        .collect();
    let population = validate_population(&raw).map_err(|r| CliError::Validation(r.to_string()))?;
    Ok(Ingested { population, standardization, unit_clusters: ids, warnings })
}
