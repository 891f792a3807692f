use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rapidash_cli::commands::{cmd_audit, cmd_eval, cmd_grid, cmd_sample, cmd_train, load_config};
use rapidash_cli::{CliError, CliResult, ExperimentConfig};

/// Equivariant point cloud networks: symmetry audits, training and grids.
///
/// Any config key can be overridden with RAPIDASH_<SECTION>_<KEY>
/// (RAPIDASH_<KEY> for global keys such as the seed). Exit codes: 0 success,
/// 1 config or usage error, 2 audit failure, 3 training divergence,
/// 4 other runtime failure.
#[derive(Parser)]
#[command(name = "rapidash", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Measure the model's symmetries and compare with its claimed ones.
    Audit {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train, checkpoint, and append a summary row to results.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the aligned and rotated test sets.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to model.ckpt in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train several configs, optionally at several train-set fractions.
    Grid {
        #[arg(long = "config")]
        configs: Vec<PathBuf>,
        /// Percentages of the training set, e.g. 60,80,100.
        #[arg(long, value_delimiter = ',')]
        fractions: Vec<f64>,
    },
    /// Train the diffusion denoiser and draw samples.
    Sample {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load(path: &Path, cli: &Cli) -> CliResult<ExperimentConfig> {
    load_config(path, std::env::vars(), cli.seed, cli.out.as_deref())
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Audit { config } => cmd_audit(&load(config, cli)?).map(|_| ()),
        Command::Train { config } => cmd_train(&load(config, cli)?).map(|_| ()),
        Command::Eval { config, checkpoint } => cmd_eval(&load(config, cli)?, checkpoint.as_deref()).map(|_| ()),
        Command::Grid { configs, fractions } => {
            let cfgs = configs.iter().map(|c| load(c, cli)).collect::<CliResult<Vec<_>>>()?;
            let out = match (&cli.out, cfgs.first()) {
                (Some(o), _) => o.clone(),
                (None, Some(c)) => c.output.dir.clone(),
                (None, None) => return Err(CliError::Usage("grid needs at least one --config".into())),
            };
            let fractions: Vec<f64> = fractions.iter().map(|p| p / 100.0).collect();
            cmd_grid(&cfgs, &fractions, &out).map(|_| ())
        }
        Command::Sample { config } => cmd_sample(&load(config, cli)?).map(|_| ()),
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
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rapidash: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
