use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use dtfixup_core::checks::run_verification_suite;
use dtfixup_lab::config::{parse_config, ExperimentConfig};
use dtfixup_lab::csv_io::{curve_rows, write_curves_file, write_diagnostics_file};
use dtfixup_lab::harness::{
    cell_seed, run_depth_sweep, run_training, smoothed_eval, sweep_cells,
};
use dtfixup_lab::manifest::RunManifest;
use dtfixup_lab::summary::{render_table, summarize};

/// Depth-stability experiments for transformer initialization schemes:
/// diagnostic sweeps, warmup-free training runs, and a numerical
/// verification suite.
#[derive(Parser)]
#[command(name = "dtfixup-lab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Replace the config's seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweep/training cells (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override the flatness band used in summaries.
    #[arg(long, global = true)]
    band: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the depth sweep and write diagnostics.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the synthetic task and write curves.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the numerical property suite; exit code reflects the outcome.
    Verify,
}

fn load_config(path: &PathBuf, cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut config = match parse_config(&text) {
        Ok(cfg) => cfg,
        Err(errors) => {
            for e in &errors {
                eprintln!("{}: {e}", path.display());
            }
            bail!("{} configuration error(s)", errors.len());
        }
    };
    if let Some(seed) = cli.seed {
        config.seeds = vec![seed];
    }
    if let Some(band) = cli.band {
        if band <= 1.0 {
            bail!("--band must be > 1");
        }
        config.band = band;
    }
    Ok(config)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DTFIXUP_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("failed to size the worker pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<ExitCode> {
    match &cli.command {
        Command::Sweep { config, out } => {
            let cfg = load_config(config, cli)?;
            fs::create_dir_all(out)
                .with_context(|| format!("creating output dir {}", out.display()))?;
            let reports = run_depth_sweep(&cfg)?;
            let csv_path = out.join("diagnostics.csv");
            write_diagnostics_file(&reports, &csv_path)?;
            let run_seeds: Vec<u64> = sweep_cells(&cfg)
                .iter()
                .map(|c| cell_seed(&cfg, c))
                .collect();
            RunManifest::new(&cfg, run_seeds, vec!["diagnostics.csv".into()]).write(out)?;
            log::info!("wrote {}", csv_path.display());
            print!("{}", render_table(&summarize(&reports, cfg.band)?));
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { config, out } => {
            let cfg = load_config(config, cli)?;
            fs::create_dir_all(out)
                .with_context(|| format!("creating output dir {}", out.display()))?;
            let curves = run_training(&cfg)?;
            let csv_path = out.join("curves.csv");
            write_curves_file(&curves, &csv_path)?;
            RunManifest::new(&cfg, cfg.seeds.clone(), vec!["curves.csv".into()]).write(out)?;
            log::info!(
                "wrote {} ({} rows)",
                csv_path.display(),
                curve_rows(&curves).len()
            );
            for curve in &curves {
                let initial = curve.points[0].eval_loss;
                let outcome = if curve.diverged {
                    "diverged".to_string()
                } else {
                    format!(
                        "final smoothed eval {:.4} ({}x initial)",
                        smoothed_eval(curve, 100),
                        smoothed_eval(curve, 100) / initial
                    )
                };
                println!(
                    "{} N={} seed={}: initial eval {:.4}, {}",
                    curve.scheme.name(),
                    curve.n_blocks,
                    curve.seed,
                    initial,
                    outcome
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify => {
            let seed = cli.seed.unwrap_or(0xD7F1);
            let mut failed = 0usize;
            for (name, outcome) in run_verification_suite(seed) {
                match outcome {
                    Ok(()) => println!("ok   {name}"),
                    Err(msg) => {
                        failed += 1;
                        println!("FAIL {name}: {msg}");
                    }
                }
            }
            if failed == 0 {
                println!("verification suite passed");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("{failed} check(s) failed");
                Ok(ExitCode::FAILURE)
            }
        }
    }
}
