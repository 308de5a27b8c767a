use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use metastyle_cli::common::{load_config, CliError, CliResult, EXIT_OK, EXIT_USAGE};
use metastyle_cli::generate::GenerateArgs;
use metastyle_cli::train::{EvalArgs, TrainArgs};
use metastyle_cli::{ablate, generate, report, train};

/// Style-statistics meta-learning for domain-generalized segmentation.
///
/// Exit codes: 0 success, 1 usage or configuration error, 2 data error,
/// 3 numeric failure (non-finite loss).
#[derive(Parser, Debug)]
#[command(name = "metastyle", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Comma-separated seeds; overrides the configured list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<metastyle::TrainConfig> {
        load_config(self.config.as_deref(), &self.set, self.seeds.as_deref())
    }

    fn given(&self) -> bool {
        self.config.is_some() || !self.set.is_empty()
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic source/target scenario to disk.
    GenerateData {
        #[arg(long, visible_alias = "data-dir")]
        out_dir: PathBuf,
        /// brats-like or abdominal-like.
        #[arg(long)]
        scenario: Option<String>,
        /// Geometry seed of the generated data.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of augmented source previews to write (0 for none).
        #[arg(long)]
        num_aug_domains: Option<usize>,
        /// Bezier augmentation strength in [0, 1].
        #[arg(long)]
        strength: Option<f64>,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Meta-learning plus retraining for every configured seed.
    Train {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Style bank to start from instead of an empty one.
        #[arg(long)]
        style_bank: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Held-out Dice and Hausdorff distance of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        /// Defaults to the checkpoint's directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Style bank to validate against the checkpoint.
        #[arg(long)]
        style_bank: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Component and loss ablations.
    Ablate {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// PNG plots from run directories or CSV logs.
    Report {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn init_workers() -> CliResult<()> {
    let Ok(v) = std::env::var("METASTYLE_NUM_WORKERS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("METASTYLE_NUM_WORKERS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn dispatch(cli: Cli) -> CliResult<()> {
    init_workers()?;
    match cli.command {
        Command::GenerateData {
            out_dir,
            scenario,
            seed,
            num_aug_domains,
            strength,
            force,
            cfg,
        } => {
            let c = cfg.load()?;
            generate::run(
                &c,
                &GenerateArgs {
                    out_dir: &out_dir,
                    scenario: scenario.as_deref(),
                    seed,
                    num_aug_domains,
                    strength,
                    force,
                },
            )?;
        }
        Command::Train {
            data_dir,
            out_dir,
            style_bank,
            force,
            cfg,
        } => {
            train::run(
                cfg.load()?,
                &TrainArgs {
                    data_dir: &data_dir,
                    out_dir: &out_dir,
                    style_bank: style_bank.as_deref(),
                    force,
                },
            )?;
        }
        Command::Eval {
            checkpoint,
            data_dir,
            out_dir,
            style_bank,
            cfg,
        } => {
            let expected = if cfg.given() { Some(cfg.load()?) } else { None };
            train::eval(
                expected.as_ref(),
                &EvalArgs {
                    checkpoint: &checkpoint,
                    data_dir: &data_dir,
                    out_dir: out_dir.as_deref(),
                    style_bank: style_bank.as_deref(),
                },
            )?;
        }
        Command::Ablate {
            data_dir,
            out_dir,
            force,
            cfg,
        } => {
            ablate::run(
                cfg.load()?,
                &ablate::AblateArgs {
                    data_dir: &data_dir,
                    out_dir: &out_dir,
                    force,
                },
            )?;
        }
        Command::Report { logs, out_dir } => {
            report::run(&logs, &out_dir)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::from(EXIT_OK) };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
