mod compare;
mod meanlab;
mod output;
mod train;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mapoca_core::config::{merge_entries, parse_entries, parse_overrides, ConfigError, Entry, Resolved, RunConfig};
use mapoca_core::meanlab::{parse_ranges, MeanlabConfig};

use crate::output::output_root;

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Numerical(String),
    Environment(String),
    Io(String),
}

impl Failure {
    pub fn io(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }

    fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Config(_) => 2,
            Failure::Numerical(_) => 3,
            Failure::Environment(_) => 4,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Numerical(m) => write!(f, "numerical failure: {m}"),
            Failure::Environment(m) => write!(f, "environment failure: {m}"),
            Failure::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "mapoca", version, about = "Cooperative multi-agent training with posthumous credit assignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration, optionally over several seeds.
    Train {
        /// `key = value` config file.
        config: Option<PathBuf>,
        /// Override a key, e.g. `--set algorithm=coma`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Seeds to run, e.g. `0-4` or `1,3,7`; overrides `seed`.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        quiet: bool,
    },
    /// Run the mean-regression study.
    Meanlab {
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Ranges, e.g. `2-10,8-10`.
        #[arg(long)]
        ranges: Option<String>,
        /// Number of seeds per configuration.
        #[arg(long)]
        seeds: Option<usize>,
        /// Also run the padding-value and fixed-count ablations.
        #[arg(long)]
        ablations: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        quiet: bool,
    },
    /// Summarize finished training runs found below the given directories.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Trailing fraction of each run used for the final reward.
        #[arg(long, default_value_t = 0.1)]
        window: f64,
        /// Report the first step whose reward reaches this value.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Check a config file and print it fully resolved.
    ValidateConfig {
        file: PathBuf,
        #[arg(long, value_enum, default_value_t = Kind::Train)]
        kind: Kind,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Train,
    Meanlab,
}

fn load_entries(file: Option<&Path>, set: &[String]) -> Result<Vec<Entry>, Failure> {
    let base = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            parse_entries(&text)?
        }
        None => Vec::new(),
    };
    Ok(merge_entries(base, parse_overrides(set)?))
}

fn parse_seeds(list: &str) -> Result<Vec<u64>, Failure> {
    let bad = || Failure::Config(format!("invalid seed list '{list}'"));
    let mut out = Vec::new();
    for part in list.split(',').map(str::trim) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

fn cmd_train(
    config: Option<&Path>,
    set: &[String],
    seeds: Option<&str>,
    out: Option<&Path>,
    jobs: usize,
    quiet: bool,
) -> Result<(), Failure> {
    let entries = load_entries(config, set)?;
    let resolved = match seeds {
        None => vec![RunConfig::from_entries(&entries)?],
        Some(list) => parse_seeds(list)?
            .into_iter()
            .map(|s| RunConfig::from_entries(&merge_entries(entries.clone(), parse_overrides(&[format!("seed={s}")])?)))
            .collect::<Result<Vec<Resolved>, _>>()?,
    };
    let root = output_root(out, resolved[0].config.output_dir.as_deref());
    let results = output::run_parallel(&resolved, jobs, |r| train::train_one(r, &root, quiet));
    let mut paths = Vec::new();
    let mut first_err = None;
    for r in results {
        match r {
            Ok(p) => paths.push(p),
            Err(e) => {
                eprintln!("{e}");
                first_err.get_or_insert(e);
            }
        }
    }
    train::print_paths(&paths);
    first_err.map_or(Ok(()), Err)
}

#[allow(clippy::too_many_arguments)]
fn cmd_meanlab(
    config: Option<&Path>,
    set: &[String],
    ranges: Option<&str>,
    seeds: Option<usize>,
    ablations: bool,
    out: Option<&Path>,
    jobs: usize,
    quiet: bool,
) -> Result<(), Failure> {
    let mut entries = load_entries(config, set)?;
    let mut extra = Vec::new();
    if let Some(r) = ranges {
        parse_ranges("ranges", r)?;
        extra.push(format!("ranges={r}"));
    }
    if let Some(s) = seeds {
        extra.push(format!("seeds={s}"));
    }
    entries = merge_entries(entries, parse_overrides(&extra)?);
    let cfg = MeanlabConfig::from_entries(&entries)?;
    let root = output_root(out, cfg.output_dir.as_deref());
    let dir = root.join("meanlab");
    let runs = meanlab::plan(&cfg, ablations);
    meanlab::execute(&cfg, &runs, &dir, jobs, quiet)?;
    println!("{}", dir.join("aggregate.csv").display());
    Ok(())
}

fn cmd_compare(dirs: &[PathBuf], window: f64, threshold: Option<f64>) -> Result<(), Failure> {
    if !(window > 0.0 && window <= 1.0) {
        return Err(Failure::Config(format!("window {window} must be in (0, 1]")));
    }
    let runs = compare::load_runs(dirs)?;
    let rows = compare::compare(&runs, window, threshold)?;
    compare::write_table(std::io::stdout().lock(), &rows)
}

fn cmd_validate(file: &Path, kind: Kind) -> Result<(), Failure> {
    let entries = load_entries(Some(file), &[])?;
    match kind {
        Kind::Train => {
            let r = RunConfig::from_entries(&entries)?;
            for (k, v) in r.config.to_entries() {
                let src = r.provenance.get(&k).map_or("default", |s| s.as_str());
                println!("{k} = {v}  # {src}");
            }
        }
        Kind::Meanlab => {
            let c = MeanlabConfig::from_entries(&entries)?;
            println!("{c:#?}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config, set, seeds, out, jobs, quiet } => {
            cmd_train(config.as_deref(), set, seeds.as_deref(), out.as_deref(), *jobs, *quiet)
        }
        Command::Meanlab { config, set, ranges, seeds, ablations, out, jobs, quiet } => cmd_meanlab(
            config.as_deref(),
            set,
            ranges.as_deref(),
            *seeds,
            *ablations,
            out.as_deref(),
            *jobs,
            *quiet,
        ),
        Command::Compare { dirs, window, threshold } => cmd_compare(dirs, *window, *threshold),
        Command::ValidateConfig { file, kind } => cmd_validate(file, *kind),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
