//! Command-line experiment runner: run scheduler/seed/sweep grids, merge
//! completed runs into comparison tables, and validate configs.
//!
//! Exit codes: 0 ok, 1 usage, 2 config, 3 runtime.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use feelsim::config::{load_run_config, ConfigError, RunConfig};
use feelsim::report::{
    compare_runs, write_cells_csv, write_run_dir, CellSummary, ReportError,
};
use feelsim::sim::{run, summarize, SchedulerKind, SimError};

const EXIT_USAGE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "feelsim", version, about = "Federated edge learning scheduling simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (scheduler, seed, sweep) cell and write CSV artifacts
    Run(RunArgs),
    /// Merge completed runs under DIR into per-metric comparison tables
    Compare { dir: PathBuf },
    /// Check a config (plus overrides) and echo the resolved values
    ValidateConfig {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key (repeatable)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Config file; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Schedulers: proposed, amount-only, distribution-only, random
    #[arg(long, value_delimiter = ',', default_value = "proposed")]
    scheduler: Vec<String>,
    /// Seeds; defaults to the config's seed
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 = all cores)
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Sweep a config key over values, KEY=V1,V2 (repeatable)
    #[arg(long, value_name = "KEY=V1,V2")]
    sweep: Vec<String>,
}

enum CliError {
    Usage(String),
    Config(ConfigError),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Config(e) => e.to_string(),
            CliError::Runtime(m) => m.clone(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(c) => CliError::Config(c),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Incomparable(_) => CliError::Config(ConfigError::new("runs", e.to_string())),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Compare { dir } => cmd_compare(&dir),
        Command::ValidateConfig { config, set } => {
            let overrides = parse_overrides(&set)?;
            let cfg = load_run_config(config.as_deref(), &overrides)?;
            println!(
                "{}",
                serde_json_echo(&cfg).map_err(|e| CliError::Runtime(e.to_string()))?
            );
            println!("ok");
            Ok(())
        }
    }
}

fn serde_json_echo(cfg: &RunConfig) -> Result<String, serde_json::Error> {
    serde_json::to_string_pretty(cfg)
}

fn parse_overrides(set: &[String]) -> Result<Vec<(String, String)>, CliError> {
    set.iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))
        })
        .collect()
}

fn parse_sweeps(sweep: &[String]) -> Result<Vec<(String, Vec<String>)>, CliError> {
    sweep
        .iter()
        .map(|kv| {
            let (k, vals) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--sweep expects KEY=V1,V2, got `{kv}`")))?;
            let values: Vec<String> = vals.split(',').map(|v| v.trim().to_string()).collect();
            if values.is_empty() || values.iter().any(String::is_empty) {
                return Err(CliError::Usage(format!("--sweep `{kv}` has empty values")));
            }
            Ok((k.trim().to_string(), values))
        })
        .collect()
}

fn sanitize(v: &str) -> String {
    v.chars()
        .map(|c| if c.is_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

struct Cell {
    cfg: RunConfig,
    kind: SchedulerKind,
    dir: PathBuf,
    rel: String,
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    if args.jobs > 0 {
        // best effort: later calls in the same process cannot rebuild it
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(args.jobs)
            .build_global();
    }
    let overrides = parse_overrides(&args.set)?;
    let sweeps = parse_sweeps(&args.sweep)?;
    let schedulers: Vec<SchedulerKind> = args
        .scheduler
        .iter()
        .map(|s| s.parse().map_err(CliError::Usage))
        .collect::<Result<_, _>>()?;

    // every sweep combination, as extra override lists
    let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (key, values) in &sweeps {
        combos = combos
            .into_iter()
            .flat_map(|base| {
                values.iter().map(move |v| {
                    let mut c = base.clone();
                    c.push((key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }

    let mut cells = Vec::new();
    for combo in &combos {
        let mut all = overrides.clone();
        all.extend(combo.iter().cloned());
        let base_cfg = load_run_config(args.config.as_deref(), &all)?;
        let seeds = if args.seeds.is_empty() {
            vec![base_cfg.system.seed]
        } else {
            args.seeds.clone()
        };
        let combo_dir: Option<String> = (!combo.is_empty()).then(|| {
            combo
                .iter()
                .map(|(k, v)| format!("{}-{}", sanitize(k), sanitize(v)))
                .collect::<Vec<_>>()
                .join("_")
        });
        for &kind in &schedulers {
            for &seed in &seeds {
                let mut cfg = base_cfg.clone();
                cfg.system.seed = seed;
                let name = format!("{}_seed{seed}", kind.label());
                let rel = match &combo_dir {
                    Some(c) => format!("{c}/{name}"),
                    None => name,
                };
                cells.push(Cell {
                    cfg,
                    kind,
                    dir: args.out.join(&rel),
                    rel,
                });
            }
        }
    }

    let results: Vec<Result<CellSummary, CliError>> = cells
        .par_iter()
        .map(|cell| {
            let logs = run(&cell.cfg, cell.kind)?;
            write_run_dir(&cell.dir, &cell.cfg, cell.kind, &logs)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            let s = summarize(&logs, 10);
            Ok(CellSummary {
                dir: cell.rel.clone(),
                scheduler: cell.kind.label().to_string(),
                seed: cell.cfg.system.seed,
                rounds: s.rounds,
                time_avg_energy_per_device: s.time_avg_energy_per_device,
                final_test_accuracy: s.final_test_accuracy,
            })
        })
        .collect();

    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        rows.push(r?);
    }
    rows.sort_by(|a, b| a.dir.cmp(&b.dir));
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::Runtime(e.to_string()))?;
    let combined = args.out.join("cells_summary.csv");
    write_cells_csv(
        std::fs::File::create(&combined).map_err(|e| CliError::Runtime(e.to_string()))?,
        &rows,
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    for row in &rows {
        println!("wrote {}", row.dir);
    }
    println!("combined summary: {}", combined.display());
    Ok(())
}

fn cmd_compare(dir: &Path) -> Result<(), CliError> {
    let report = compare_runs(dir)?;
    report.write_to(dir).map_err(CliError::from)?;
    for name in ["accuracy_vs_round.csv", "loss_vs_round.csv", "energy_vs_round.csv"] {
        println!("wrote {}", dir.join(name).display());
    }
    Ok(())
}
