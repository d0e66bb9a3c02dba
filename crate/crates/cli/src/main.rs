use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use elmeta::estimation::{FitMode, FitOptions, Search};
use elmeta_cli::config::SimFile;
use elmeta_cli::fit::{run_fit, FitArgs};
use elmeta_cli::input::read_studies;
use elmeta_cli::output::{emit, pretty, to_rounded_json, Format};
use elmeta_cli::plot::{self, Kind};
use elmeta_cli::simulate::run_simulate;
use elmeta_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "elmeta", version, about = "Publication-bias-corrected meta-analysis by empirical likelihood")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct FitFlags {
    /// Confidence level of all intervals.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Treatment of (gamma1, gamma2) in the full-likelihood fit.
    #[arg(long, value_parser = parse_mode, default_value = "free-gamma12")]
    mode: FitMode,
    /// log* threshold; defaults to the number of studies.
    #[arg(long)]
    cn: Option<f64>,
    /// Full-likelihood search strategy.
    #[arg(long, value_parser = parse_search, default_value = "best")]
    search: Search,
}

impl FitFlags {
    fn options(&self) -> FitOptions {
        FitOptions { mode: self.mode, c_n: self.cn, search: self.search, ..FitOptions::default() }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fit both likelihoods to a CSV of studies (header `effect,se`).
    Fit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        #[command(flatten)]
        fit: FitFlags,
    },
    /// Monte Carlo study from a TOML config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        /// Overrides `replicates` in the config.
        #[arg(long)]
        reps: Option<usize>,
        /// Overrides `seed` in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Plot data: funnel and cdf from `--input`, qq from `--config`.
    Plotdata {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        fit: FitFlags,
    },
}

fn parse_mode(s: &str) -> Result<FitMode, String> {
    match s {
        "fix-gamma12" => Ok(FitMode::FixGamma12),
        "free-gamma12" => Ok(FitMode::FreeGamma12),
        _ => Err("expected fix-gamma12 or free-gamma12".into()),
    }
}

fn parse_search(s: &str) -> Result<Search, String> {
    match s {
        "local" => Ok(Search::Local),
        "global" => Ok(Search::Global),
        "best" => Ok(Search::Best),
        _ => Err("expected local, global or best".into()),
    }
}

fn sim_config(path: &Path, reps: Option<usize>, seed: Option<u64>) -> CliResult<elmeta::simulate::SimConfig> {
    let mut file = SimFile::load(path)?;
    if let Some(r) = reps {
        file.replicates = r;
    }
    if let Some(s) = seed {
        file.seed = s;
    }
    file.to_sim_config()
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Fit { input, output, format, fit } => {
            let data = read_studies(&input)?;
            let report = run_fit(&data, &FitArgs { level: fit.level, opts: fit.options() })?;
            let text = match format {
                Format::Json => pretty(&to_rounded_json(&report)),
                Format::Csv => report.table().to_csv(),
            };
            emit(output.as_deref(), &text)?;
            match report.failure() {
                Some(e) => Err(e),
                None => Ok(()),
            }
        }
        Command::Simulate { config, output, format, reps, seed } => {
            let cfg = sim_config(&config, reps, seed)?;
            let (_, text) = run_simulate(&cfg, format)?;
            emit(output.as_deref(), &text)
        }
        Command::Plotdata { kind, input, config, output, format, reps, seed, fit } => {
            let table = match kind {
                Kind::Funnel | Kind::Cdf => {
                    let path = input.ok_or_else(|| CliError::Usage("--input is required for this kind".into()))?;
                    let data = read_studies(&path)?;
                    if kind == Kind::Funnel {
                        plot::funnel(&data)
                    } else {
                        plot::cdf(&data, &fit.options())?
                    }
                }
                Kind::Qq => {
                    let path = config.ok_or_else(|| CliError::Usage("--config is required for qq".into()))?;
                    plot::qq(&sim_config(&path, reps, seed)?)?
                }
            };
            emit(output.as_deref(), &table.render(format))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
