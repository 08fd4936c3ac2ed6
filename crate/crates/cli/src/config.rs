//! Analysis configuration, read from JSON.

use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use spillover::clustering::Linkage;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub input: PathBuf,
    pub covariates: Vec<String>,
    pub treatment: String,
    pub outcome: String,
    /// Column holding cluster ids; may be omitted when `clustering` is given.
    #[serde(default)]
    pub cluster_id: Option<String>,
    #[serde(default)]
    pub clustering: Option<ClusteringSpec>,
    pub alpha_grid: AlphaGridSpec,
    #[serde(default)]
    pub f_alpha: Vec<FAlphaContrastSpec>,
    #[serde(default)]
    pub propensity: PropensitySpec,
    /// Covariate coefficients of the counterfactual policy; defaults to the
    /// propensity model's covariate coefficients.
    #[serde(default)]
    pub policy_delta: Option<Vec<f64>>,
    #[serde(default = "default_ci_level")]
    pub ci_level: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Z-score the covariates before fitting.
    #[serde(default = "default_true")]
    pub standardize: bool,
    #[serde(default = "default_order")]
    pub quadrature_order: usize,
}

fn default_ci_level() -> f64 {
    0.95
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_true() -> bool {
    true
}

fn default_order() -> usize {
    spillover::PropensityModel::DEFAULT_QUADRATURE_ORDER
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusteringSpec {
    /// Two planar coordinate columns.
    pub coordinates: [String; 2],
    pub k: usize,
    #[serde(default)]
    pub linkage: Linkage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaGridSpec {
    Explicit(Vec<f64>),
    /// `points` evenly spaced values between two quantiles of the observed
    /// cluster treated proportions.
    Quantiles { lower: f64, upper: f64, points: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionSpec {
    Explicit { support: Vec<f64>, probs: Vec<f64> },
    /// Observed cluster treated proportions restricted to the range between
    /// two of their quantiles.
    Observed { lower: f64, upper: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FAlphaContrastSpec {
    pub name: String,
    pub f1: DistributionSpec,
    pub f2: DistributionSpec,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PropensitySpec {
    #[default]
    Fit,
    /// Known parameters, as a `PropensityModel` JSON file on the scale of the
    /// (possibly standardised) covariates.
    Known { path: PathBuf },
}

/// Reads a JSON file, reporting syntax and schema errors with line and column.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: format!("line {}, column {}: {e}", e.line(), e.column()),
    })
}

impl AnalysisConfig {
    /// Loads a config and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut config: Self = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.input = resolve(base, &config.input);
        config.out_dir = resolve(base, &config.out_dir);
        if let PropensitySpec::Known { path } = &mut config.propensity {
            *path = resolve(base, path);
        }
        config.validate(path)?;
        Ok(config)
    }

    pub fn validate(&self, origin: &Path) -> Result<()> {
        let bad = |message: String| Err(CliError::Config { path: origin.to_path_buf(), message });
        if self.covariates.is_empty() {
            return bad("at least one covariate column is required".into());
        }
        if self.cluster_id.is_none() && self.clustering.is_none() {
            return bad("either `cluster_id` or `clustering` must be given".into());
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return bad(format!("ci_level {} must lie in (0, 1)", self.ci_level));
        }
        match &self.alpha_grid {
            AlphaGridSpec::Explicit(v) => {
                if v.is_empty() || v.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
                    return bad("explicit alpha grid must be non-empty and inside (0, 1)".into());
                }
            }
            AlphaGridSpec::Quantiles { lower, upper, points } => {
                if !(0.0..=1.0).contains(lower) || !(0.0..=1.0).contains(upper) || lower > upper || *points == 0 {
                    return bad("quantile grid needs 0 <= lower <= upper <= 1 and points >= 1".into());
                }
            }
        }
        if let Some(d) = &self.policy_delta {
            if d.len() != self.covariates.len() {
                return bad(format!("policy_delta has {} entries for {} covariates", d.len(), self.covariates.len()));
            }
        }
        Ok(())
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
