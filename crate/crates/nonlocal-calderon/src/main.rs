use clap::{Parser, Subcommand};
use nonlocal_calderon::harness::cache::MatrixCache;
use nonlocal_calderon::harness::config::ExperimentConfig;
use nonlocal_calderon::harness::scenarios::run_scenario;
use std::path::PathBuf;
use std::process::ExitCode;

/// Nonlocal diffusion and fractional Calderón experiments.
#[derive(Parser)]
#[command(name = "fdck", version)]
struct Cli {
    /// Directory for CSV tables and manifest.json (overrides the config).
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Seed for noise and random targets (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for independent measurement solves.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the scenario described by a TOML config.
    Run { config: PathBuf },
    /// Parse and check a config without running it.
    Validate { config: PathBuf },
    /// Manage the assembled-matrix cache.
    Cache {
        #[command(subcommand)]
        action: CacheCmd,
    },
}

#[derive(Subcommand)]
enum CacheCmd {
    /// Delete every cached matrix.
    Clean,
}

fn load(path: &std::path::Path, seed: Option<u64>) -> Result<ExperimentConfig, ExitCode> {
    match ExperimentConfig::load(path) {
        Ok(mut c) => {
            if let Some(s) = seed {
                c.seed = s;
            }
            Ok(c)
        }
        Err(e) => {
            eprintln!("fdck: {e}");
            Err(ExitCode::from(2))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cache = MatrixCache::from_env();
    match cli.cmd {
        Cmd::Validate { config } => match load(&config, cli.seed) {
            Ok(c) => {
                println!("{}: ok ({})", config.display(), c.scenario);
                ExitCode::SUCCESS
            }
            Err(code) => code,
        },
        Cmd::Cache { action: CacheCmd::Clean } => match cache.clean() {
            Ok(n) => {
                println!("removed {n} cached matrices from {}", cache.root.display());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("fdck: {e}");
                ExitCode::from(3)
            }
        },
        Cmd::Run { config } => {
            let cfg = match load(&config, cli.seed) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let out = cli
                .output_dir
                .or_else(|| cfg.output_dir.clone().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("fdck-out").join(&cfg.scenario));
            match run_scenario(&cfg, &out, &cache, cli.jobs) {
                Ok(m) => {
                    for a in &m.assertions {
                        println!("{} {} = {:e} ({} {:e})", if a.pass { "PASS" } else { "FAIL" }, a.name, a.value, a.comparison, a.threshold);
                    }
                    println!("manifest: {}", out.join("manifest.json").display());
                    if m.all_pass {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    }
                }
                Err(e) => {
                    eprintln!("fdck: {e}");
                    // config problems only visible once grids exist still count as config errors
                    ExitCode::from(if matches!(e, nonlocal_calderon::Error::Config(_)) { 2 } else { 3 })
                }
            }
        }
    }
}
