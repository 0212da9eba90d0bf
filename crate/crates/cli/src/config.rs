use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nwflow::ode::{DEFAULT_ATOL, DEFAULT_EULER_STEPS, DEFAULT_RTOL};
use nwflow::tasks::TaskSpec;
use nwflow::IntegratorConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_M: usize = 50;
pub const DEFAULT_N: usize = 1000;
pub const DEFAULT_SIGMA_MIN: f64 = 0.01;
pub const DEFAULT_QUERIES: usize = 512;
pub const SEED_ENV: &str = "NWFLOW_SEED";

#[derive(Debug, Parser)]
#[command(name = "nwflow", version, about = "Plug-in flow-matching generation and kernel diagnostics")]
pub struct Cli {
    /// Worker threads (default: logical cores). Never affects output bytes.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// JSON config file; command-line flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate samples from the plug-in field of a sampled support.
    Generate(Flags),
    /// Run a named experiment and write report.json and rows.csv.
    Experiment {
        name: String,
        #[command(flatten)]
        flags: Flags,
    },
    /// Median n_eff over a grid of flow times.
    DiagNeff(Flags),
    /// Whiten a feature table.
    Whiten(Flags),
    /// Validate a feature table and write it back in canonical form.
    Ingest(Flags),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutFormat {
    Csv,
    Bin,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// Task preset: gmm, gmm2d, shell, moons, rings, spirals, fourier.
    #[arg(long)]
    pub task: Option<String>,
    /// Feature table (CSV or NWF1 binary).
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    /// Falls back to the NWFLOW_SEED environment variable.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long = "sigma-min")]
    pub sigma_min: Option<f64>,
    /// Fixed-step Euler with this many steps.
    #[arg(long, conflicts_with = "rk45")]
    pub euler: Option<usize>,
    /// Adaptive Dormand-Prince 5(4).
    #[arg(long)]
    pub rk45: bool,
    #[arg(long, requires = "rk45")]
    pub rtol: Option<f64>,
    #[arg(long, requires = "rk45")]
    pub atol: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<OutFormat>,
    /// Number of fuzzed configurations (realization-fuzz, kde-identity).
    #[arg(long)]
    pub configs: Option<usize>,
    /// Task family for variance-scaling: fourier or gmm.
    #[arg(long)]
    pub family: Option<String>,
    /// Comma-separated flow times for diag-neff.
    #[arg(long = "t-grid", value_delimiter = ',')]
    pub t_grid: Option<Vec<f64>>,
    /// Queries per flow time for diag-neff.
    #[arg(long)]
    pub queries: Option<usize>,
    /// Whitening strength in [0, 1].
    #[arg(long)]
    pub strength: Option<f64>,
    /// Ridge added to the covariance before whitening.
    #[arg(long)]
    pub regularization: Option<f64>,
}

/// Contents of `--config`. Every field is optional; `experiment` holds
/// experiment-specific keys.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub task: Option<TaskSpec>,
    pub features: Option<PathBuf>,
    pub m: Option<usize>,
    pub n: Option<usize>,
    pub d: Option<usize>,
    pub seed: Option<u64>,
    pub seeds: Option<Vec<u64>>,
    pub sigma_min: Option<f64>,
    pub integrator: Option<IntegratorConfig>,
    pub out: Option<PathBuf>,
    pub format: Option<OutFormat>,
    pub t_grid: Option<Vec<f64>>,
    pub queries: Option<usize>,
    pub strength: Option<f64>,
    pub regularization: Option<f64>,
    pub experiment: Option<Value>,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Lib(nwflow::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "{m}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Lib(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }
}

impl From<nwflow::Error> for CliError {
    fn from(e: nwflow::Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(nwflow::Error::Io(e))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn load_file_config(path: Option<&Path>) -> CliResult<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Flags and file merged, with the defaults filled in. Echoed into every
/// output; `--jobs` is deliberately absent.
#[derive(Debug, Clone, Serialize)]
pub struct CliConfig {
    pub subcommand: String,
    pub task: Option<TaskSpec>,
    pub features: Option<String>,
    pub sigma_min: f64,
    pub integrator: IntegratorConfig,
    pub m: usize,
    pub n: usize,
    pub d: Option<usize>,
    pub seed: u64,
    pub seeds: Option<Vec<u64>>,
    pub out: String,
    pub format: OutFormat,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_grid: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub queries: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strength: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regularization: Option<f64>,
}

pub fn flag_integrator(flags: &Flags) -> Option<IntegratorConfig> {
    if flags.rk45 {
        Some(IntegratorConfig::rk45(flags.rtol.unwrap_or(DEFAULT_RTOL), flags.atol.unwrap_or(DEFAULT_ATOL)))
    } else {
        flags.euler.map(IntegratorConfig::euler)
    }
}

pub fn resolve(subcommand: &str, flags: &Flags, file: &FileConfig) -> CliResult<CliConfig> {
    let seed = match flags.seed.or(file.seed) {
        Some(s) => s,
        None => env_seed()?.unwrap_or(DEFAULT_SEED),
    };
    let d = flags.d.or(file.d);
    let features = flags.features.clone().or(file.features.clone());
    let task = match (&flags.task, &features) {
        (Some(_), Some(_)) => return Err(CliError::Config("--task and --features are mutually exclusive".into())),
        (Some(name), None) => Some(TaskSpec::preset(name, d, 0)?),
        (None, Some(_)) => None,
        (None, None) => match &file.task {
            Some(t) => Some(t.clone()),
            None if matches!(subcommand, "generate" | "diag-neff") => Some(TaskSpec::preset("gmm2d", d, 0)?),
            None => None,
        },
    };
    if let Some(t) = &task {
        t.validate()?;
        if let (Some(want), Some(have)) = (d, t.dim()) {
            if want != have {
                return Err(CliError::Config(format!("task is {have}-dimensional but --d is {want}")));
            }
        }
    }
    let integrator = flag_integrator(flags)
        .or(file.integrator)
        .unwrap_or(IntegratorConfig::euler(DEFAULT_EULER_STEPS));
    integrator.validate()?;
    let sigma_min = flags.sigma_min.or(file.sigma_min).unwrap_or(DEFAULT_SIGMA_MIN);
    nwflow::PathSchedule::new(sigma_min)?;
    let m = flags.m.or(file.m).unwrap_or(DEFAULT_M);
    let n = flags.n.or(file.n).unwrap_or(DEFAULT_N);
    if m == 0 {
        return Err(CliError::Config("--m must be >= 1".into()));
    }
    if n == 0 {
        return Err(CliError::Config("--n must be >= 1".into()));
    }
    let out = flags
        .out
        .clone()
        .or(file.out.clone())
        .unwrap_or_else(|| PathBuf::from("nwflow-out"));
    Ok(CliConfig {
        subcommand: subcommand.to_string(),
        task,
        features: features.map(|p| p.display().to_string()),
        sigma_min,
        integrator,
        m,
        n,
        d,
        seed,
        seeds: flags.seeds.clone().or(file.seeds.clone()),
        out: out.display().to_string(),
        format: flags.format.or(file.format).unwrap_or(OutFormat::Csv),
        t_grid: flags.t_grid.clone().or(file.t_grid.clone()),
        queries: flags.queries.or(file.queries),
        strength: flags.strength.or(file.strength),
        regularization: flags.regularization.or(file.regularization),
    })
}
