use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hdekit_core::hde::{MethodChoice, DEFAULT_FD_STEP};
use hdekit_core::scenarios::ScenarioKind;

#[derive(Debug, Parser)]
#[command(name = "hdekit", version, about = "Hauck-Donner effect diagnostics for vector generalized linear models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model and print its Wald table.
    Fit(ModelArgs),
    /// Wald statistic derivatives and HDE severity for every coefficient.
    Hde(ModelArgs),
    /// Wald, HDE-free Wald, likelihood ratio and score tests side by side.
    Tests(TestsArgs),
    /// Sweep a synthetic design over its grid, one row per grid point.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Auto,
    Analytic,
    Fd,
}

impl From<Method> for MethodChoice {
    fn from(m: Method) -> Self {
        match m {
            Method::Auto => MethodChoice::Auto,
            Method::Analytic => MethodChoice::Analytic,
            Method::Fd => MethodChoice::FiniteDifference,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Headered CSV file.
    #[arg(long)]
    pub input: PathBuf,
    /// binomial, poisson, normal, cumulative or zip.
    #[arg(long)]
    pub family: String,
    /// Link(s), one per linear predictor type; comma separated.
    #[arg(long = "link", value_delimiter = ',')]
    pub links: Vec<String>,
    #[arg(long)]
    pub response: String,
    /// Covariate columns; an intercept is always added.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    /// Prior weight column (grouped counts).
    #[arg(long)]
    pub weights: Option<String>,
    /// Per-covariate constraints, e.g. `x2:parallel;x3:cols(1,3)`. Unlisted
    /// terms are `trivial`.
    #[arg(long)]
    pub constraints: Option<String>,
    /// Number of response levels for `cumulative`; defaults to the largest response.
    #[arg(long)]
    pub levels: Option<usize>,
    /// Model `P(Y >= j+1)` instead of `P(Y <= j)` for `cumulative`.
    #[arg(long)]
    pub reversed: bool,
    /// Null values: one for all coefficients or one per coefficient.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub beta0: Vec<f64>,
    #[arg(long, value_enum, default_value = "auto")]
    pub method: Method,
    #[arg(long, env = "HDEKIT_FD_STEP", default_value_t = DEFAULT_FD_STEP)]
    pub fd_step: f64,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
}

#[derive(Debug, Clone, Args)]
pub struct TestsArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Report wall-clock cost of each procedure.
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    /// hd2x2, qsep or poisson2.
    #[arg(long)]
    pub scenario: String,
    /// Group size (hd2x2), number of points (qsep) or replicates (poisson2).
    #[arg(long)]
    pub n: Option<f64>,
    /// Baseline successes for hd2x2.
    #[arg(long)]
    pub r0: Option<u32>,
    /// Baseline mean for poisson2.
    #[arg(long)]
    pub mu0: Option<f64>,
    /// Largest second-group mean for poisson2.
    #[arg(long)]
    pub mu1_max: Option<u32>,
    /// Recorded in the output; every scenario grid is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "HDEKIT_FD_STEP", default_value_t = DEFAULT_FD_STEP)]
    pub fd_step: f64,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

impl SweepArgs {
    pub fn kind(&self) -> Result<ScenarioKind, String> {
        self.scenario.parse().map_err(|_| format!("unknown scenario '{}'; expected hd2x2, qsep or poisson2", self.scenario))
    }
}
