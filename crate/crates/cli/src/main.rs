use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use forgetlab_cli::commands::{cmd_dynamics, cmd_fpf, DynamicsOptions, FpfOptions};
use forgetlab_cli::config::{parse_config, FpfSection};
use forgetlab_cli::manifest::RunManifest;
use forgetlab_cli::sweep::{run_sweep, SweepSpec};
use forgetlab_cli::{execute, report, rerun_manifest, CliError, Result, DEFAULT_OUT};

#[derive(Parser)]
#[command(
    name = "forgetlab",
    version,
    about = "Continual-learning forgetting experiments"
)]
struct Cli {
    /// Output root for new run directories.
    #[arg(long, global = true, env = "FORGETLAB_OUT", default_value = DEFAULT_OUT)]
    out: PathBuf,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a continual-learning method from a TOML config or a manifest.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compute parameter dynamics and sensitivity from a run's checkpoints.
    Dynamics {
        run_dir: PathBuf,
        /// Report masks at this threshold too.
        #[arg(long)]
        threshold: Option<f64>,
        /// Task transitions averaged for sensitivity (default: all).
        #[arg(long)]
        window: Option<usize>,
    },
    /// Finetune a finished run's sensitive groups on its buffer.
    Fpf {
        run_dir: PathBuf,
        /// Comma-separated group ids, e.g. BN_STATS,FC_LAST.
        #[arg(long, conflicts_with = "threshold")]
        mask: Option<String>,
        /// Select the mask from sensitivity.json at this threshold.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Run a grid of cells over seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads (default: available parallelism).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Print summaries from a run or sweep directory.
    Report { dir: PathBuf },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Train { config, seed } => {
            let dir = if config.extension().is_some_and(|e| e == "json") {
                let mut m = RunManifest::load(&config)?;
                if let Some(s) = seed {
                    m.config.seed = s;
                }
                rerun_manifest(&m, &cli.out)?
            } else {
                let mut cfg = parse_config(&read(&config)?)?;
                if let Some(s) = seed {
                    cfg.seed = s;
                }
                execute(&cfg, &cli.out)?.dir
            };
            println!("{}", dir.display());
            print!("{}", report::render(&dir)?);
        }
        Cmd::Dynamics {
            run_dir,
            threshold,
            window,
        } => {
            cmd_dynamics(&run_dir, &DynamicsOptions { threshold, window })?;
            print!("{}", report::render(&run_dir)?);
        }
        Cmd::Fpf {
            run_dir,
            mask,
            threshold,
            steps,
            lr,
        } => {
            let mut section = FpfSection::default();
            if let Some(m) = mask {
                section.mask = m;
            }
            if let Some(s) = steps {
                section.steps = s;
            }
            if let Some(l) = lr {
                section.lr = l;
            }
            let out = cmd_fpf(&run_dir, &FpfOptions { section, threshold }, &cli.out)?;
            println!("{}", out.dir.display());
            print!("{}", report::render(&out.dir)?);
        }
        Cmd::Sweep { config, threads } => {
            let spec = SweepSpec::parse(&read(&config)?)?;
            let threads = threads
                .or_else(|| std::thread::available_parallelism().ok().map(Into::into))
                .unwrap_or(1);
            let out = run_sweep(&spec, &cli.out, threads)?;
            println!("{}", out.dir.display());
            print!("{}", report::render(&out.dir)?);
        }
        Cmd::Report { dir } => print!("{}", report::render(&dir)?),
    }
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
