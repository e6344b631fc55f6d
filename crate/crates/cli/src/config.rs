//! Run configuration: one TOML document of flat dotted keys layered over
//! defaults, plus `key=value` overrides from the command line.

use std::path::{Path, PathBuf};

use hazekit_core::guidance::{BackendConfig, PromptTraining};
use hazekit_core::losses::{AlignWeights, LossWeights, SsimConfig};
use hazekit_core::net::NetConfig;
use hazekit_core::optim::{AdamConfig, OptimizerKind};
use hazekit_core::trainer::{BiaMode, TrainConfig};
use hazekit_core::{Error, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub net: NetSection,
    pub train: TrainSection,
    pub teacher: TeacherSection,
    pub moc: MocSection,
    pub bia: BiaSection,
    pub prompts: PromptsSection,
    pub bench: BenchSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Side of the procedural scenes.
    pub size: usize,
    pub pairs: usize,
    pub test_pairs: usize,
    pub real: usize,
    pub real_test: usize,
    /// Extra clean scenes for the clear prompt class.
    pub clear: usize,
    /// Clean corpus directory used instead of procedural scenes.
    pub clean_dir: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { size: 64, pairs: 72, test_pairs: 24, real: 128, real_test: 32, clear: 128, clean_dir: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    pub teacher: NetConfig,
    pub student: NetConfig,
}

impl Default for NetSection {
    fn default() -> Self {
        Self { teacher: NetConfig::teacher(), student: NetConfig::student() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub crop: usize,
    pub eta_min: f64,
    pub optimizer: OptimizerKind,
    pub adam: AdamConfig,
    pub checkpoint_every: usize,
    /// Steps between progress lines on stderr; `0` silences them.
    pub log_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            crop: t.crop,
            eta_min: t.eta_min,
            optimizer: t.optimizer,
            adam: t.adam,
            checkpoint_every: t.checkpoint_every,
            log_every: 25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub n_steps: usize,
    pub eta: f64,
}

impl Default for TeacherSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { n_steps: t.n_teacher, eta: t.eta_teacher }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MocSection {
    pub n_steps: usize,
    pub eta: f64,
    pub lambda_su: f64,
    pub lambda_ss: f64,
    pub lambda_pe: f64,
    /// Per-stage alignment weights; uniform when absent.
    pub align_weights: Option<Vec<f64>>,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
}

impl Default for MocSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            n_steps: t.n_moc,
            eta: t.eta_moc,
            lambda_su: t.loss.lambda_su,
            lambda_ss: t.loss.lambda_ss,
            lambda_pe: t.loss.lambda_pe,
            align_weights: None,
            ssim_window: t.ssim.window,
            ssim_sigma: t.ssim.sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiaSection {
    pub n_steps: usize,
    pub eta: f64,
    pub alpha: f64,
    pub mode: BiaMode,
}

impl Default for BiaSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { n_steps: t.t_bia, eta: t.eta_bia, alpha: t.alpha, mode: BiaMode::Full }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptsSection {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub train_backend: bool,
    pub holdout_fraction: f64,
    pub temperature: f64,
    pub dim: usize,
    pub widths: [usize; 3],
}

impl Default for PromptsSection {
    fn default() -> Self {
        let p = PromptTraining::default();
        let b = BackendConfig::default();
        Self {
            steps: p.steps,
            lr: p.lr,
            batch_size: p.batch_size,
            crop: p.crop,
            train_backend: p.train_backend,
            holdout_fraction: p.holdout_fraction,
            temperature: b.temperature,
            dim: b.dim,
            widths: b.widths,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    /// Square input sides; FLOPs are reported at the first.
    pub sizes: Vec<usize>,
    pub warmup: usize,
    pub runs: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self { sizes: vec![64, 128, 256], warmup: 3, runs: 20 }
    }
}

/// Parses `key=value` with the value read as a TOML literal; bare words are
/// taken as strings.
pub fn parse_override(raw: &str) -> Result<(String, Value)> {
    let (key, value) =
        raw.split_once('=').ok_or_else(|| Error::Config(format!("override `{raw}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key in override `{raw}`")));
    }
    let value = value.trim();
    let parsed = format!("v = {value}").parse::<Table>().ok().and_then(|mut t| t.remove("v"));
    Ok((key.to_string(), parsed.unwrap_or_else(|| Value::String(value.to_string()))))
}

/// Sets a dotted `key` inside `table`, creating intermediate tables.
pub fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("`{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Defaults, then the file at `path`, then each `key=value` override.
    pub fn resolve(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Input(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<Table>().map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for (k, v) in overrides {
            set_dotted(&mut table, k, v.clone())?;
        }
        let cfg: RunConfig =
            Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.backend_config().validate()?;
        self.net.teacher.validate()?;
        self.net.student.validate()?;
        if self.bench.sizes.is_empty() || self.bench.runs == 0 {
            return Err(Error::Config("bench needs at least one size and one timed run".into()));
        }
        if !(0.0..1.0).contains(&self.prompts.holdout_fraction) {
            return Err(Error::Config(format!(
                "prompts.holdout_fraction {} outside [0, 1)",
                self.prompts.holdout_fraction
            )));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            eta_moc: self.moc.eta,
            eta_bia: self.bia.eta,
            eta_min: self.train.eta_min,
            alpha: self.bia.alpha,
            n_moc: self.moc.n_steps,
            t_bia: self.bia.n_steps,
            n_teacher: self.teacher.n_steps,
            eta_teacher: self.teacher.eta,
            optimizer: self.train.optimizer,
            adam: self.train.adam,
            batch_size: self.train.batch_size,
            crop: self.train.crop,
            seed: self.seed,
            loss: LossWeights {
                lambda_su: self.moc.lambda_su,
                lambda_ss: self.moc.lambda_ss,
                lambda_pe: self.moc.lambda_pe,
            },
            align: self.moc.align_weights.clone().map(|w| AlignWeights { w }),
            ssim: SsimConfig { window: self.moc.ssim_window, sigma: self.moc.ssim_sigma, ..SsimConfig::default() },
            checkpoint_every: self.train.checkpoint_every,
        }
    }

    pub fn backend_config(&self) -> BackendConfig {
        BackendConfig { widths: self.prompts.widths, dim: self.prompts.dim, temperature: self.prompts.temperature }
    }

    pub fn prompt_training(&self) -> PromptTraining {
        PromptTraining {
            steps: self.prompts.steps,
            lr: self.prompts.lr,
            batch_size: self.prompts.batch_size,
            crop: self.prompts.crop,
            train_backend: self.prompts.train_backend,
            holdout_fraction: self.prompts.holdout_fraction,
            seed: self.seed,
        }
    }
}
