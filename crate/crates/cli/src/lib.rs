//! Command-line surface over `hazekit-core`: dataset synthesis, the two
//! training phases, evaluation and benchmarking.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hazekit_core::trainer::BiaMode;
use hazekit_core::{Error, Result};

use crate::config::{parse_override, RunConfig};

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

/// Exit status for a failed command: numeric failures get their own code,
/// everything else is bad input or configuration.
pub fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_INPUT
    }
}

#[derive(Debug, Parser)]
#[command(name = "hazekit", version, about = "Train, adapt and evaluate compact dehazing networks")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config with flat dotted keys (e.g. `moc.n_steps = 300`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; defaults to `runs/<verb>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Extra `key=value` config overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Full,
    LowerOnly,
    UpperOnly,
}

impl From<ModeArg> for BiaMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => BiaMode::Full,
            ModeArg::LowerOnly => BiaMode::LowerOnly,
            ModeArg::UpperOnly => BiaMode::UpperOnly,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic hazy/clean pairs and an unlabelled real-domain set.
    SynthData,
    /// Train a teacher from scratch with the supervised losses only.
    TrainTeacher {
        /// Paired dataset manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Distil a teacher into a student.
    Moc {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Student checkpoint to start from instead of a fresh init.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Learn the haze/clear prompt pair (and, by default, the image encoder).
    TrainPrompts {
        /// Manifest whose hazy or unlabelled images form the hazy class.
        #[arg(long)]
        hazy: PathBuf,
        /// Manifest whose clean (or unlabelled) images form the clear class.
        #[arg(long)]
        clear: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Adapt a distilled student to unlabelled real-domain images.
    Bia {
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        real: PathBuf,
        /// Directory written by `train-prompts`.
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score a model (or `identity`) on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Skip reference metrics even when the manifest has pairs.
        #[arg(long)]
        no_ground_truth: bool,
    },
    /// Parameter count, FLOPs and median latency.
    Bench {
        #[arg(long)]
        model: PathBuf,
    },
    /// Restore a single PNG.
    Dehaze {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

impl Command {
    pub fn verb(&self) -> &'static str {
        match self {
            Command::SynthData => "synth-data",
            Command::TrainTeacher { .. } => "train-teacher",
            Command::Moc { .. } => "moc",
            Command::TrainPrompts { .. } => "train-prompts",
            Command::Bia { .. } => "bia",
            Command::Eval { .. } => "eval",
            Command::Bench { .. } => "bench",
            Command::Dehaze { .. } => "dehaze",
        }
    }

    /// Per-verb flags expressed as config overrides.
    fn overrides(&self) -> Vec<(String, toml::Value)> {
        let steps = |key: &str, s: &Option<usize>| s.map(|n| (key.to_string(), toml::Value::Integer(n as i64)));
        let mut out = Vec::new();
        match self {
            Command::TrainTeacher { steps: s, .. } => out.extend(steps("teacher.n_steps", s)),
            Command::Moc { steps: s, .. } => out.extend(steps("moc.n_steps", s)),
            Command::TrainPrompts { steps: s, .. } => out.extend(steps("prompts.steps", s)),
            Command::Bia { steps: s, alpha, mode, .. } => {
                out.extend(steps("bia.n_steps", s));
                out.extend(alpha.map(|a| ("bia.alpha".to_string(), toml::Value::Float(a))));
                if let Some(m) = mode {
                    let name = m.to_possible_value().expect("no skipped variants").get_name().to_string();
                    out.push(("bia.mode".to_string(), toml::Value::String(name)));
                }
            }
            _ => {}
        }
        out
    }
}

impl Cli {
    /// Config file, then `--set`, then `--seed` and per-verb flags.
    pub fn resolve_config(&self) -> Result<RunConfig> {
        let mut overrides = self.global.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
        if let Some(seed) = self.global.seed {
            let seed =
                i64::try_from(seed).map_err(|_| Error::Config(format!("seed {seed} does not fit a TOML integer")))?;
            overrides.push(("seed".into(), toml::Value::Integer(seed)));
        }
        overrides.extend(self.command.overrides());
        RunConfig::resolve(self.global.config.as_deref(), &overrides)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.global.out.clone().unwrap_or_else(|| commands::default_out(self.command.verb()))
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.resolve_config()?;
    let out = cli.out_dir();
    match &cli.command {
        Command::SynthData => commands::synth_data(&cfg, &out),
        Command::TrainTeacher { data, .. } => commands::train_teacher(&cfg, data, &out),
        Command::Moc { teacher, data, init, .. } => commands::moc(&cfg, teacher, data, init.as_deref(), &out),
        Command::TrainPrompts { hazy, clear, .. } => commands::train_prompts_cmd(&cfg, hazy, clear, &out),
        Command::Bia { student, real, prompts, .. } => commands::bia(&cfg, student, real, prompts, &out),
        Command::Eval { model, data, no_ground_truth } => {
            commands::eval(&cfg, model, data, *no_ground_truth, &out).map(|_| ())
        }
        Command::Bench { model } => commands::bench(&cfg, model, &out),
        Command::Dehaze { model, input, output } => commands::dehaze(model, input, output),
    }
}
