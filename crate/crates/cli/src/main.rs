use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "histlag", version, about = "Lag historical functional linear model")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a simulated dataset.
    Simulate {
        #[arg(long)]
        n: Option<String>,
    },
    /// Fit the model at fixed lags.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        lags: FitArgs,
    },
    /// Predict responses of new subjects from a saved fit.
    Predict {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        subjects: PathBuf,
    },
    /// Select lag windows and regularization.
    Select {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        d1_grid: Option<String>,
        #[arg(long)]
        d2_grid: Option<String>,
        #[arg(long)]
        rho_grid: Option<String>,
        #[arg(long)]
        folds: Option<String>,
    },
    /// Mean in-sample NPE at the true lags over sample sizes.
    #[command(name = "bench-table1")]
    BenchTable1 {
        #[arg(long)]
        reps: Option<String>,
        #[arg(long)]
        n_list: Option<String>,
    },
    /// Lag-selection hit count over replications.
    #[command(name = "bench-lags")]
    BenchLags {
        #[arg(long)]
        reps: Option<String>,
        #[arg(long)]
        uppers: Option<String>,
    },
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    lags1: Option<String>,
    #[arg(long)]
    lags2: Option<String>,
    /// `r1,r2` or `auto`.
    #[arg(long)]
    rho: Option<String>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Fit { .. } => "fit",
            Command::Predict { .. } => "predict",
            Command::Select { .. } => "select",
            Command::BenchTable1 { .. } => "bench-table1",
            Command::BenchLags { .. } => "bench-lags",
        }
    }

    fn overrides(&self) -> Vec<(&'static str, &str)> {
        let pairs: Vec<(&'static str, &Option<String>)> = match self {
            Command::Simulate { n } => vec![("n", n)],
            Command::Fit { lags, .. } => vec![("lags1", &lags.lags1), ("lags2", &lags.lags2), ("rho", &lags.rho)],
            Command::Predict { .. } => Vec::new(),
            Command::Select {
                d1_grid,
                d2_grid,
                rho_grid,
                folds,
                ..
            } => vec![("d1_grid", d1_grid), ("d2_grid", d2_grid), ("rho_grid", rho_grid), ("folds", folds)],
            Command::BenchTable1 { reps, n_list } => vec![("reps", reps), ("n_list", n_list)],
            Command::BenchLags { reps, uppers } => vec![("reps", reps), ("uppers", uppers)],
        };
        pairs
            .into_iter()
            .filter_map(|(key, v)| v.as_deref().map(|v| (key, v)))
            .collect()
    }

    fn inputs(&self) -> Vec<(&'static str, &Path)> {
        match self {
            Command::Fit { data, .. } | Command::Select { data, .. } => vec![("data", data)],
            Command::Predict { fit, subjects } => vec![("fit", fit), ("subjects", subjects)],
            _ => Vec::new(),
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    for (key, value) in cli.command.overrides() {
        cfg.set(key, value)?;
    }
    Ok(cfg)
}

fn manifest(cli: &Cli, cfg: &RunConfig) -> String {
    let mut text = format!(
        "# histlag {}\n# command: {}\n",
        env!("CARGO_PKG_VERSION"),
        cli.command.name()
    );
    for (name, path) in cli.command.inputs() {
        text.push_str(&format!("# input {name}: {}\n", path.display()));
    }
    text.push_str(&cfg.to_text());
    text
}

fn run(cli: Cli) -> Result<(), String> {
    let cfg = resolve_config(&cli)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| e.to_string())?;
    let outputs = pool.install(|| commands::execute(&cli.command, &cfg))?;
    fs::create_dir_all(&cli.out).map_err(|e| format!("{}: {e}", cli.out.display()))?;
    for (name, contents) in outputs.files {
        let path = cli.out.join(name);
        fs::write(&path, contents).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    let path = cli.out.join("manifest.txt");
    fs::write(&path, manifest(&cli, &cfg)).map_err(|e| format!("{}: {e}", path.display()))?;
    print!("{}", outputs.report);
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
