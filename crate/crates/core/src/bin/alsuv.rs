use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alsuv::harness::{
    run_ablation, run_experiment, run_sweep, write_ablation, write_run, write_sweep, ExperimentConfig,
};
use alsuv::worldgen::World;
use alsuv::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "alsuv", version, about = "Transferable latent inversion experiments on a toy world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Attack every identity, evaluate, write report.json and CSV tables.
    Run(Common),
    /// Run the n x averaging x validation grid, write ablation.csv.
    Ablate(Common),
    /// Sweep one hyperparameter, write sweep.csv in long format.
    Sweep(Common),
    /// Run with flatness statistics and loss slices enabled.
    Diagnose(Common),
    /// Build the world and save its networks and manifest.
    Worldgen(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads, 0 = all cores.
    #[arg(long, env = "ALSUV_THREADS", default_value_t = 0)]
    threads: usize,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

fn resolve(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

enum Status {
    Done,
    Partial(usize),
}

fn execute(command: &Command, cfg: &ExperimentConfig) -> Result<Status, Error> {
    let dir: &Path = &cfg.out_dir;
    match command {
        Command::Run(_) | Command::Diagnose(_) => {
            let mut cfg = cfg.clone();
            if matches!(command, Command::Diagnose(_)) {
                cfg.diagnostics.flatness = true;
                cfg.diagnostics.surfaces = true;
                cfg.diagnostics.surface_identities = cfg.diagnostics.surface_identities.max(1);
            }
            let out = run_experiment(&cfg)?;
            write_run(&out, dir)?;
            let failed = out.report.failed.len();
            if let Some(e) = &out.report.eval {
                println!(
                    "unseen average: sar {:.4}, rank-1 {:.4}, similarity {:.4}",
                    e.unseen_average.sar, e.unseen_average.rank1, e.unseen_average.mean_similarity
                );
            }
            if let Some(f) = &out.report.flatness {
                println!(
                    "median trace averaged/final {:.4}/{:.4}, lambda1 {:.4}/{:.4}",
                    f.median_trace_averaged, f.median_trace_final, f.median_lambda1_averaged, f.median_lambda1_final
                );
            }
            Ok(if failed > 0 { Status::Partial(failed) } else { Status::Done })
        }
        Command::Ablate(_) => {
            let report = run_ablation(cfg)?;
            write_ablation(&report, dir)?;
            let failed = report.rows.first().map_or(0, |r| r.failed);
            Ok(if failed > 0 { Status::Partial(failed) } else { Status::Done })
        }
        Command::Sweep(_) => {
            let report = run_sweep(cfg)?;
            write_sweep(&report, dir)?;
            Ok(Status::Done)
        }
        Command::Worldgen(_) => {
            cfg.world.validate()?;
            let world = World::build(&cfg.world, cfg.world_seed())?;
            world.save(dir)?;
            println!("world {}", world.hash()?);
            Ok(Status::Done)
        }
    }
}

fn is_config_error(e: &Error) -> bool {
    matches!(e, Error::InvalidConfig(_) | Error::Version { .. } | Error::MissingSweep)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::Run(c) | Command::Ablate(c) | Command::Sweep(c) | Command::Diagnose(c) | Command::Worldgen(c) => c,
    };
    let cfg = match resolve(common) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(common.threads).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return ExitCode::FAILURE;
        }
    };
    match pool.install(|| execute(&cli.command, &cfg)) {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::Partial(n)) => {
            eprintln!("{n} identities failed; see report");
            ExitCode::from(EXIT_PARTIAL)
        }
        Err(e) => {
            eprintln!("error: {e}");
            if is_config_error(&e) {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
