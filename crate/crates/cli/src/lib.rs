//! Command-line experiment harness for ODF fiber separation: dataset
//! generation, training, running the three separators, sensitivity sweeps,
//! and metric aggregation, all seeded and reproducible.

use std::fmt;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod methods;

use config::ExperimentConfig;
use methods::Method;

/// Harness errors, split by exit code: usage errors (bad flags, bad config,
/// degenerate grids) exit 1; runtime errors (missing files, failed runs)
/// exit 2.
#[derive(Clone, Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn usage(message: String) -> Self {
        CliError::Usage(message)
    }

    pub fn runtime(message: String) -> Self {
        CliError::Runtime(message)
    }

    pub fn is_usage(&self) -> bool {
        matches!(self, CliError::Usage(_))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

/// Separate simulated multi-fiber ODFs into single-fiber ODFs and benchmark
/// the separators.
#[derive(Parser, Debug)]
#[command(name = "odfsep", version, about, disable_help_subcommand = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags that override fields of the TOML config.
#[derive(Args, Debug, Default, Clone)]
pub struct GlobalArgs {
    /// TOML configuration file; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for datasets, sweeps, and training data.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Spherical-harmonic band limit (even).
    #[arg(long, global = true)]
    pub lmax: Option<usize>,
    /// Directory receiving all artifacts.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Worker threads for per-voxel work (never changes numeric output).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the seeded validation dataset (JSON lines + manifest).
    Simulate {
        /// Two-fiber sample count.
        #[arg(long)]
        n_two: Option<usize>,
        /// Three-fiber sample count.
        #[arg(long)]
        n_three: Option<usize>,
        /// Output dataset path (default: <output_dir>/dataset.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the mesh-to-mesh separation network.
    Train {
        /// Training sample budget.
        #[arg(long)]
        train_samples: Option<usize>,
        /// Validation set size.
        #[arg(long)]
        validation_samples: Option<usize>,
        /// Samples per optimizer step.
        #[arg(long)]
        batch_size: Option<usize>,
        /// Adam learning rate.
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Hidden layer width.
        #[arg(long)]
        hidden_width: Option<usize>,
        /// Use the full published training budget (5.12M samples).
        #[arg(long, conflicts_with = "train_samples")]
        full: bool,
        /// Checkpoint output path (default: <output_dir>/checkpoint.json).
        #[arg(long)]
        checkpoint_out: Option<PathBuf>,
        /// Loss curve CSV path (default: <output_dir>/loss.csv).
        #[arg(long)]
        loss_out: Option<PathBuf>,
    },
    /// Run one separator over a dataset and write per-voxel results.
    Separate {
        /// Separator: watershed, fissile, or net.
        #[arg(long)]
        method: String,
        /// Dataset path (default: <output_dir>/dataset.jsonl).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Checkpoint path for `net` (default: <output_dir>/checkpoint.json).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Process at most this many voxels.
        #[arg(long)]
        max_voxels: Option<usize>,
        /// Results path (default: <output_dir>/results_<method>.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep separation x smaller-fraction cells and report min-ACC medians.
    Sweep {
        /// Comma-separated methods (default from config).
        #[arg(long)]
        methods: Option<String>,
        /// Checkpoint path when the methods include `net`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Seeded samples per grid cell (>= 30).
        #[arg(long)]
        samples_per_cell: Option<usize>,
        /// Sweep CSV path (default: <output_dir>/sweep.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate results files into a summary table (CSV + Markdown).
    Evaluate {
        /// Results files from `odfsep separate`.
        #[arg(required = false)]
        results: Vec<PathBuf>,
        /// Summary CSV path (default: <output_dir>/summary.csv).
        #[arg(long)]
        out_csv: Option<PathBuf>,
        /// Summary Markdown path (default: <output_dir>/summary.md).
        #[arg(long)]
        out_md: Option<PathBuf>,
    },
}

/// Loads the config file and applies global and per-command overrides.
fn effective_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(cli.global.config.as_deref())?;
    if let Some(seed) = cli.global.seed {
        cfg.seed = seed;
    }
    if let Some(lmax) = cli.global.lmax {
        cfg.lmax = lmax;
    }
    if let Some(dir) = &cli.global.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(threads) = cli.global.threads {
        cfg.threads = threads;
    }
    match &cli.command {
        Command::Simulate { n_two, n_three, .. } => {
            if let Some(n) = n_two {
                cfg.n_two = *n;
            }
            if let Some(n) = n_three {
                cfg.n_three = *n;
            }
        }
        Command::Train {
            train_samples,
            validation_samples,
            batch_size,
            learning_rate,
            hidden_width,
            full,
            ..
        } => {
            if *full {
                cfg.train.apply_full_budget();
            }
            if let Some(n) = train_samples {
                cfg.train.train_samples = *n;
            }
            if let Some(n) = validation_samples {
                cfg.train.validation_samples = *n;
            }
            if let Some(n) = batch_size {
                cfg.train.batch_size = *n;
            }
            if let Some(lr) = learning_rate {
                cfg.train.learning_rate = *lr;
            }
            if let Some(w) = hidden_width {
                cfg.net.hidden_width = *w;
            }
        }
        Command::Sweep { samples_per_cell, methods, .. } => {
            if let Some(n) = samples_per_cell {
                cfg.sweep.samples_per_cell = *n;
            }
            if let Some(list) = methods {
                cfg.sweep.methods =
                    list.split(',').map(|s| s.trim().to_string()).collect();
            }
        }
        Command::Separate { .. } | Command::Evaluate { .. } => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let cfg = effective_config(cli)?;
    match &cli.command {
        Command::Simulate { out, .. } => commands::cmd_simulate(&cfg, out.as_deref()),
        Command::Train { checkpoint_out, loss_out, .. } => {
            commands::cmd_train(&cfg, checkpoint_out.as_deref(), loss_out.as_deref())
        }
        Command::Separate { method, dataset, checkpoint, max_voxels, out } => {
            let method = Method::parse(method)?;
            commands::cmd_separate(
                &cfg,
                method,
                dataset.as_deref(),
                checkpoint.as_deref(),
                *max_voxels,
                out.as_deref(),
            )
        }
        Command::Sweep { checkpoint, out, .. } => {
            let methods: Vec<Method> = cfg
                .sweep
                .methods
                .iter()
                .map(|name| Method::parse(name))
                .collect::<Result<_, _>>()?;
            commands::cmd_sweep(&cfg, &methods, checkpoint.as_deref(), out.as_deref())
        }
        Command::Evaluate { results, out_csv, out_md } => {
            commands::cmd_evaluate(&cfg, results, out_csv.as_deref(), out_md.as_deref())
        }
    }
}

/// Parses arguments and runs the requested command, returning the process
/// exit code: 0 success, 1 usage error, 2 runtime error.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_fields() {
        let cli = Cli::try_parse_from([
            "odfsep", "simulate", "--seed", "7", "--n-two", "3", "--n-three", "1",
            "--output-dir", "/tmp/x",
        ])
        .unwrap();
        let cfg = effective_config(&cli).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.n_two, 3);
        assert_eq!(cfg.n_three, 1);
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn full_flag_switches_to_published_budget() {
        let cli = Cli::try_parse_from(["odfsep", "train", "--full"]).unwrap();
        let cfg = effective_config(&cli).unwrap();
        assert_eq!(cfg.train.train_samples, odfsep_core::mlp::FULL_TRAIN_SAMPLES);
        assert_eq!(
            cfg.train.validation_samples,
            odfsep_core::mlp::FULL_VALIDATION_SAMPLES
        );
    }

    #[test]
    fn bad_flag_is_a_usage_exit() {
        assert_eq!(run(["odfsep", "separate", "--no-such-flag"]), 1);
        assert_eq!(run(["odfsep", "frobnicate"]), 1);
        assert_eq!(run(["odfsep", "--help"]), 0);
    }

    #[test]
    fn sweep_methods_flag_is_parsed_as_list() {
        let cli =
            Cli::try_parse_from(["odfsep", "sweep", "--methods", "watershed, fissile"])
                .unwrap();
        let cfg = effective_config(&cli).unwrap();
        assert_eq!(cfg.sweep.methods, vec!["watershed", "fissile"]);
    }
}
