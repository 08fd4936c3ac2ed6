use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use spillover::clustering::Linkage;
use spillover::simulation::SimulationConfig;
use spillover_cli::analysis::fit_propensity;
use spillover_cli::config::read_json;
use spillover_cli::error::Stage;
use spillover_cli::output::{create_dir, write_json};
use spillover_cli::{run_analysis, run_simulation, AnalysisConfig, CliError, Result};

#[derive(Parser)]
#[command(name = "spillover", version, about = "Direct and spillover effects of covariate-dependent allocation policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a replication study of the estimators on synthetic data.
    Simulate {
        /// JSON simulation config; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Estimate effect curves and F_alpha contrasts from a CSV.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Group units into clusters by their planar coordinates.
    Cluster {
        #[arg(long)]
        input: PathBuf,
        /// Two coordinate columns, comma separated.
        #[arg(long, value_delimiter = ',')]
        coordinates: Vec<String>,
        #[arg(long)]
        k: usize,
        #[arg(long, value_enum, default_value = "ward")]
        linkage: LinkageArg,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Fit the cluster propensity score only.
    FitPs {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LinkageArg {
    Ward,
    Complete,
}

impl From<LinkageArg> for Linkage {
    fn from(l: LinkageArg) -> Self {
        match l {
            LinkageArg::Ward => Linkage::Ward,
            LinkageArg::Complete => Linkage::Complete,
        }
    }
}

fn cluster_csv(input: &Path, coordinates: &[String], k: usize, linkage: Linkage, out_dir: &Path) -> Result<()> {
    let mut reader = csv::Reader::from_path(input)?;
    let headers = reader.headers()?.clone();
    let idx: Vec<usize> = coordinates
        .iter()
        .map(|c| headers.iter().position(|h| h.trim() == c).ok_or_else(|| CliError::MissingColumn(c.clone())))
        .collect::<Result<_>>()?;
    let records: Vec<csv::StringRecord> = reader.records().collect::<std::result::Result<_, _>>()?;
    let mut points = Vec::with_capacity(records.len());
    for r in &records {
        let line = r.position().map_or(0, |p| p.line());
        let mut pt = [0.0; 2];
        for (d, (&i, name)) in idx.iter().zip(coordinates).enumerate() {
            let cell = r.get(i).unwrap_or("").trim();
            pt[d] = cell.parse().map_err(|_| CliError::Parse {
                row: line,
                column: name.clone(),
                message: format!("`{cell}` is not a number"),
            })?;
        }
        points.push(pt);
    }
    let labels = spillover::clustering::cluster_points(&points, k, linkage).stage("cluster")?;
    create_dir(out_dir)?;
    let mut w = csv::Writer::from_path(out_dir.join("clustered.csv"))?;
    let mut header = headers.clone();
    header.push_field("cluster");
    w.write_record(&header)?;
    for (r, l) in records.iter().zip(labels) {
        let mut row = r.clone();
        row.push_field(&format!("k{l}"));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| CliError::io(out_dir, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, seed, out_dir } => {
            let mut cfg: SimulationConfig = match &config {
                Some(path) => read_json(path)?,
                None => SimulationConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate().map_err(|e| CliError::Config {
                path: config.unwrap_or_default(),
                message: e.to_string(),
            })?;
            let report = run_simulation(&cfg, &out_dir)?;
            for arm in &report.arms {
                eprintln!("{}: {} replications kept, {} dropped", arm.arm.as_str(), cfg.replications - arm.dropped, arm.dropped);
            }
            Ok(())
        }
        Command::Estimate { config, seed, out_dir } => {
            let mut cfg = AnalysisConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out = out_dir.unwrap_or_else(|| cfg.out_dir.clone());
            let result = run_analysis(&cfg, &out)?;
            for line in &result.log {
                eprintln!("{line}");
            }
            Ok(())
        }
        Command::Cluster { input, coordinates, k, linkage, out_dir } => {
            if coordinates.len() != 2 {
                return Err(CliError::Validation(format!("--coordinates needs two columns, got {}", coordinates.len())));
            }
            cluster_csv(&input, &coordinates, k, linkage.into(), &out_dir)
        }
        Command::FitPs { config, out_dir } => {
            let cfg = AnalysisConfig::load(&config)?;
            let out = out_dir.unwrap_or_else(|| cfg.out_dir.clone());
            let (_, report, log) = fit_propensity(&cfg)?;
            for line in &log {
                eprintln!("{line}");
            }
            create_dir(&out)?;
            write_json(&out.join("fitted_ps.json"), &report)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
