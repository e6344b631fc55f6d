//! The two training phases: distillation of a teacher into a student on
//! paired data, then bilevel adaptation of the student on unlabelled images.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{BatchSampler, PairedDataset, RealDataset};
use crate::error::{Error, Result};
use crate::guidance::{l_rea_graph, EmbeddingBackend, PromptPair};
use crate::losses::{moc_graph, AlignProjections, AlignWeights, LossWeights, MocSpec, SsimConfig};
use crate::net::{EncoderExtractor, FeatureExtractor, ModelHandle, Role};
use crate::optim::{AdamConfig, CosineSchedule, Optimizer, OptimizerKind};
use hazekit_tape::{Element, Gradients, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Initial step size of the distillation phase.
    pub eta_moc: f64,
    /// Initial step size of the adaptation phase.
    pub eta_bia: f64,
    /// Final step size of every cosine schedule.
    pub eta_min: f64,
    /// EMA coefficient of the upper-level model.
    pub alpha: f64,
    pub n_moc: usize,
    pub t_bia: usize,
    /// Supervised steps for a teacher trained from scratch.
    pub n_teacher: usize,
    pub eta_teacher: f64,
    pub optimizer: OptimizerKind,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub crop: usize,
    pub seed: u64,
    pub loss: LossWeights,
    /// Per-stage alignment weights; `None` means uniform.
    pub align: Option<AlignWeights>,
    pub ssim: SsimConfig,
    /// Intermediate checkpoint interval in steps; `0` disables them.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta_moc: 1e-4,
            eta_bia: 1e-4,
            eta_min: 1e-6,
            alpha: 0.95,
            n_moc: 300,
            t_bia: 200,
            n_teacher: 300,
            eta_teacher: 1e-4,
            optimizer: OptimizerKind::Adam,
            adam: AdamConfig::default(),
            batch_size: 8,
            crop: 64,
            seed: 0,
            loss: LossWeights::default(),
            align: None,
            ssim: SsimConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        for (name, eta) in [("eta_moc", self.eta_moc), ("eta_bia", self.eta_bia), ("eta_teacher", self.eta_teacher)] {
            CosineSchedule { start: eta, end: self.eta_min, total_steps: 1 }
                .validate()
                .map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        if self.batch_size == 0 || self.crop == 0 {
            return Err(Error::Config("batch_size and crop must be positive".into()));
        }
        self.loss.validate()
    }

    pub fn align_weights(&self, stages: usize) -> Result<AlignWeights> {
        let w = self.align.clone().unwrap_or_else(|| AlignWeights::uniform(stages));
        w.validate(stages)?;
        Ok(w)
    }

    fn schedule(&self, start: f64, total_steps: usize) -> CosineSchedule {
        CosineSchedule { start, end: self.eta_min, total_steps }
    }
}

/// One row of the distillation log; skipped terms are empty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MocLogRow {
    pub step: usize,
    pub loss_total: f64,
    pub loss_su: Option<f64>,
    pub loss_ss: Option<f64>,
    pub loss_pe: Option<f64>,
    pub loss_align: Option<f64>,
}

/// One row of the adaptation log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiaLogRow {
    pub step: usize,
    pub l_rea: f64,
    pub l_1: Option<f64>,
    pub loss_total: f64,
    /// Euclidean distance between upper and lower parameters after the step.
    pub ema_distance: f64,
}

/// Hooks called once per training step.
pub trait TrainObserver {
    fn on_moc_step(&mut self, _row: &MocLogRow, _student: &ModelHandle) -> Result<()> {
        Ok(())
    }

    fn on_bia_step(&mut self, _row: &BiaLogRow, _state: &BiaState) -> Result<()> {
        Ok(())
    }
}

/// Observer that does nothing.
pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// Writes a checkpoint of the trained model every `every` steps.
pub struct CheckpointEvery<'a> {
    pub dir: &'a Path,
    pub every: usize,
}

impl TrainObserver for CheckpointEvery<'_> {
    fn on_moc_step(&mut self, row: &MocLogRow, student: &ModelHandle) -> Result<()> {
        if self.every > 0 && (row.step + 1).is_multiple_of(self.every) {
            student.save(&self.dir.join(format!("student_moc_step{:05}", row.step + 1)), row.step as u64 + 1, "moc")?;
        }
        Ok(())
    }

    fn on_bia_step(&mut self, row: &BiaLogRow, state: &BiaState) -> Result<()> {
        if self.every > 0 && (row.step + 1).is_multiple_of(self.every) {
            state.upper().save(
                &self.dir.join(format!("student_bia_step{:05}", row.step + 1)),
                row.step as u64 + 1,
                "bia",
            )?;
        }
        Ok(())
    }
}

/// Result of a distillation or supervised run.
pub struct MocRun {
    pub student: ModelHandle,
    pub projections: AlignProjections<f32>,
    pub log: Vec<MocLogRow>,
}

/// Distils `teacher` into `student` for `cfg.n_moc` steps on `data`.
///
/// The loss is the weighted L1, SSIM and perceptual terms against the clean
/// image, plus feature alignment of every student stage (through a learned
/// 1x1 projection) to the teacher's stage on the same hazy input. The
/// teacher is frozen and doubles as the perceptual feature extractor.
pub fn run_moc(
    teacher: &ModelHandle,
    student: &ModelHandle,
    data: &PairedDataset,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<MocRun> {
    cfg.validate()?;
    if teacher.stages() != student.stages() {
        return Err(Error::Config(format!("teacher has {} stages, student {}", teacher.stages(), student.stages())));
    }
    let align = cfg.align_weights(student.stages())?;
    let projections =
        AlignProjections::new(&student.config().encoder_widths, &teacher.config().encoder_widths, cfg.seed ^ 0xA11C)?;
    let extractor = EncoderExtractor::new(teacher);
    let spec = MocSpec {
        weights: cfg.loss,
        align: &align,
        ssim: cfg.ssim,
        extractor: (cfg.loss.lambda_pe > 0.0).then_some(&extractor as &dyn FeatureExtractor<f32>),
    };
    supervised_loop(student, Some(teacher), projections, data, cfg, &spec, cfg.n_moc, cfg.eta_moc, observer)
}

/// Plain supervised training of `model` (L1 + SSIM only) on `data`, used for
/// teachers trained from scratch.
pub fn train_supervised(
    model: &ModelHandle,
    data: &PairedDataset,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<MocRun> {
    cfg.validate()?;
    let weights = LossWeights { lambda_pe: 0.0, ..cfg.loss };
    weights.validate()?;
    let stages = model.stages();
    let align = AlignWeights::zeros(stages);
    let widths = &model.config().encoder_widths;
    let projections = AlignProjections::identity(widths);
    let spec = MocSpec { weights, align: &align, ssim: cfg.ssim, extractor: None };
    supervised_loop(model, None, projections, data, cfg, &spec, cfg.n_teacher, cfg.eta_teacher, observer)
}

#[allow(clippy::too_many_arguments)]
fn supervised_loop(
    model: &ModelHandle,
    teacher: Option<&ModelHandle>,
    mut projections: AlignProjections<f32>,
    data: &PairedDataset,
    cfg: &TrainConfig,
    spec: &MocSpec<'_, f32>,
    steps: usize,
    eta: f64,
    observer: &mut dyn TrainObserver,
) -> Result<MocRun> {
    let mut student = model.clone();
    if steps == 0 {
        return Ok(MocRun { student, projections, log: Vec::new() });
    }
    if data.is_empty() {
        return Err(Error::Input("training needs a non-empty paired dataset".into()));
    }
    student.config().check_input(&[cfg.batch_size, 3, cfg.crop, cfg.crop])?;
    let align_active = teacher.is_some() && !spec.align.is_zero();
    let schedule = cfg.schedule(eta, steps);
    let mut sampler = BatchSampler::new(data.len(), cfg.batch_size, cfg.crop, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.adam);
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let (hazy, clean) = sampler.next_pairs(data)?;
        let teacher_taps = match teacher {
            Some(t) if align_active => t.encode(&hazy)?.per_stage,
            _ => Vec::new(),
        };
        let mut g = Graph::new();
        let p = student.bind(&mut g, true);
        let q = projections.bind(&mut g, align_active);
        let x = g.constant(hazy);
        let target = g.constant(clean);
        let (out, taps) = student.forward_graph(&mut g, &p, x);
        let terms = if align_active {
            moc_graph(&mut g, out, target, &teacher_taps, &taps, &q, spec)?
        } else {
            moc_graph(&mut g, out, target, &[], &[], &[], &MocSpec { align: &AlignWeights::zeros(0), ..*spec })?
        };
        let v = terms.values(&g);
        let row =
            MocLogRow { step, loss_total: v.total, loss_su: v.su, loss_ss: v.ss, loss_pe: v.pe, loss_align: v.align };
        if !v.total.is_finite() {
            return Err(Error::NonFinite { step, detail: format!("{row:?}") });
        }
        let mut grads = g.backward(terms.total);
        let mut gs = take_grads(&mut grads, &p, student.params().tensors());
        let mut targets: Vec<&mut Tensor<f32>> = student.params_mut().tensors_mut().iter_mut().collect();
        if align_active {
            gs.extend(take_grads(&mut grads, &q, projections.params().tensors()));
            targets.extend(projections.params_mut().tensors_mut().iter_mut());
        }
        if gs.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { step, detail: format!("gradient; {row:?}") });
        }
        opt.step(&mut targets, &gs, schedule.lr(step))?;
        observer.on_moc_step(&row, &student)?;
        log.push(row);
    }
    Ok(MocRun { student, projections, log })
}

fn take_grads<E: Element>(grads: &mut Gradients<E>, vars: &[Var], like: &[Tensor<E>]) -> Vec<Tensor<E>> {
    vars.iter().zip(like).map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))).collect()
}

/// Which parts of the bilevel scheme run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiaMode {
    /// Lower gradient step on `L_rea + L_1`, then EMA; returns the upper model.
    Full,
    /// Lower gradient step on `L_rea + L_1` against the initial model; no
    /// EMA; returns the lower model.
    LowerOnly,
    /// Gradient steps on `L_rea` alone; returns the tuned model.
    UpperOnly,
}

impl std::str::FromStr for BiaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(BiaMode::Full),
            "lower-only" => Ok(BiaMode::LowerOnly),
            "upper-only" => Ok(BiaMode::UpperOnly),
            other => Err(Error::Input(format!("unknown mode {other:?}; expected full, lower-only or upper-only"))),
        }
    }
}

/// The frozen real-domain supervision.
#[derive(Clone, Copy)]
pub struct Guidance<'a, E: Element = f32> {
    pub prompts: &'a PromptPair,
    pub backend: &'a EmbeddingBackend<E>,
}

/// Lower model (receives gradients) and upper model (EMA only).
///
/// The EMA is accumulated in `f64`; the upper model holds its rounding.
pub struct BiaState<E: Element = f32> {
    lower: ModelHandle<E>,
    upper: ModelHandle<E>,
    upper_acc: Vec<f64>,
    opt: Optimizer,
    step: usize,
}

impl<E: Element> BiaState<E> {
    /// Both levels start as copies of `student`.
    pub fn new(student: &ModelHandle<E>, optimizer: OptimizerKind, adam: AdamConfig) -> Self {
        let lower = student.clone().with_role(Role::StudentSyn);
        let upper = student.clone().with_role(Role::StudentRea);
        let upper_acc = upper.params().to_f64_vector();
        Self { lower, upper, upper_acc, opt: Optimizer::new(optimizer, adam), step: 0 }
    }

    pub fn from_models(
        lower: ModelHandle<E>,
        upper: ModelHandle<E>,
        optimizer: OptimizerKind,
        adam: AdamConfig,
    ) -> Result<Self> {
        if lower.config() != upper.config() {
            return Err(Error::Config("lower and upper models differ in configuration".into()));
        }
        lower.params().check_layout(upper.params())?;
        let upper_acc = upper.params().to_f64_vector();
        Ok(Self { lower, upper, upper_acc, opt: Optimizer::new(optimizer, adam), step: 0 })
    }

    pub fn lower(&self) -> &ModelHandle<E> {
        &self.lower
    }

    pub fn upper(&self) -> &ModelHandle<E> {
        &self.upper
    }

    /// The unrounded EMA of the upper parameters.
    pub fn upper_accumulator(&self) -> &[f64] {
        &self.upper_acc
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Euclidean distance between the upper and lower parameter vectors.
    pub fn ema_distance(&self) -> f64 {
        self.upper
            .params()
            .to_f64_vector()
            .iter()
            .zip(self.lower.params().to_f64_vector())
            .map(|(u, l)| (u - l).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn into_models(self) -> (ModelHandle<E>, ModelHandle<E>) {
        (self.lower, self.upper)
    }
}

/// Loss values of one lower step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LowerStepStats {
    pub l_rea: f64,
    pub l_1: Option<f64>,
    pub total: f64,
}

/// One gradient step of the lower model on `L_rea(lower(x))`, plus
/// `L_1 = mean |lower(x) - upper(x)|` with the upper output held constant
/// when `with_l1`. The upper model is not touched.
pub fn bia_lower_step<E: Element>(
    state: &mut BiaState<E>,
    real_batch: &Tensor<E>,
    guidance: Guidance<'_, E>,
    lr: f64,
    with_l1: bool,
) -> Result<LowerStepStats> {
    state.lower.config().check_input(real_batch.shape())?;
    let anchor = if with_l1 { Some(state.upper.forward(real_batch)?.0) } else { None };
    let mut g = Graph::new();
    let p = state.lower.bind(&mut g, true);
    let x = g.constant(real_batch.clone());
    let (out, _) = state.lower.forward_graph(&mut g, &p, x);
    let rea = l_rea_graph(&mut g, guidance.backend, guidance.prompts, out)?;
    let (total, l1) = match anchor {
        Some(a) => {
            let a = g.constant(a);
            let d = g.sub(out, a);
            let d = g.abs(d);
            let l1 = g.mean(d);
            (g.add(rea, l1), Some(l1))
        }
        None => (rea, None),
    };
    let stats = LowerStepStats {
        l_rea: g.value(rea).item().as_f64(),
        l_1: l1.map(|v| g.value(v).item().as_f64()),
        total: g.value(total).item().as_f64(),
    };
    let mut grads = g.backward(total);
    let gs = take_grads(&mut grads, &p, state.lower.params().tensors());
    if !stats.total.is_finite() || gs.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite { step: state.step, detail: format!("{stats:?}") });
    }
    let mut targets: Vec<&mut Tensor<E>> = state.lower.params_mut().tensors_mut().iter_mut().collect();
    state.opt.step(&mut targets, &gs, lr)?;
    Ok(stats)
}

/// `upper <- alpha * upper + (1 - alpha) * lower`, elementwise.
pub fn bia_ema_step<E: Element>(state: &mut BiaState<E>, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    state.lower.params().check_layout(state.upper.params())?;
    let lower = state.lower.params().to_f64_vector();
    for (u, l) in state.upper_acc.iter_mut().zip(&lower) {
        *u = alpha * *u + (1.0 - alpha) * l;
    }
    state.upper.params_mut().assign_f64(&state.upper_acc)
}

/// Result of the adaptation phase.
pub struct BiaRun {
    pub model: ModelHandle,
    pub log: Vec<BiaLogRow>,
}

/// Adapts `student` to `real` for `cfg.t_bia` interleaved steps.
pub fn run_bia(
    student: &ModelHandle,
    real: &RealDataset,
    guidance: Guidance<'_>,
    cfg: &TrainConfig,
    mode: BiaMode,
    observer: &mut dyn TrainObserver,
) -> Result<BiaRun> {
    cfg.validate()?;
    let mut state = BiaState::new(student, cfg.optimizer, cfg.adam);
    if cfg.t_bia == 0 {
        return Ok(BiaRun { model: state.upper, log: Vec::new() });
    }
    if real.is_empty() {
        return Err(Error::Input("adaptation needs at least one real-domain image".into()));
    }
    let schedule = cfg.schedule(cfg.eta_bia, cfg.t_bia);
    let mut sampler = BatchSampler::new(real.len(), cfg.batch_size, cfg.crop, cfg.seed ^ 0xB1A)?;
    let mut log = Vec::with_capacity(cfg.t_bia);
    for step in 0..cfg.t_bia {
        let batch = sampler.next_images(&real.images)?;
        let stats = bia_lower_step(&mut state, &batch, guidance, schedule.lr(step), mode != BiaMode::UpperOnly)?;
        if mode == BiaMode::Full {
            bia_ema_step(&mut state, cfg.alpha)?;
        }
        state.step += 1;
        let row = BiaLogRow {
            step,
            l_rea: stats.l_rea,
            l_1: stats.l_1,
            loss_total: stats.total,
            ema_distance: state.ema_distance(),
        };
        observer.on_bia_step(&row, &state)?;
        log.push(row);
    }
    let model = match mode {
        BiaMode::Full => state.upper,
        BiaMode::LowerOnly | BiaMode::UpperOnly => state.lower.with_role(Role::StudentRea),
    };
    Ok(BiaRun { model, log })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_moc_log(path: &Path, rows: &[MocLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss_total", "loss_su", "loss_ss", "loss_pe", "loss_align"])?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.loss_total.to_string(),
            fmt_opt(r.loss_su),
            fmt_opt(r.loss_ss),
            fmt_opt(r.loss_pe),
            fmt_opt(r.loss_align),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_bia_log(path: &Path, rows: &[BiaLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "l_rea", "l_1", "loss_total", "ema_distance"])?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.l_rea.to_string(),
            fmt_opt(r.l_1),
            r.loss_total.to_string(),
            r.ema_distance.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_bia_log(path: &Path) -> Result<Vec<BiaLogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn read_moc_log(path: &Path) -> Result<Vec<MocLogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Writes `value` as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { alpha: 1.5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { eta_moc: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { eta_min: 1e-3, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn modes_parse() {
        assert_eq!("full".parse::<BiaMode>().unwrap(), BiaMode::Full);
        assert_eq!("lower-only".parse::<BiaMode>().unwrap(), BiaMode::LowerOnly);
        assert_eq!("upper-only".parse::<BiaMode>().unwrap(), BiaMode::UpperOnly);
        assert!(matches!("both".parse::<BiaMode>(), Err(Error::Input(_))));
    }

    #[test]
    fn log_round_trip_keeps_empty_cells() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            BiaLogRow { step: 0, l_rea: 0.61, l_1: Some(0.0), loss_total: 0.61, ema_distance: 0.0 },
            BiaLogRow { step: 1, l_rea: 0.59, l_1: None, loss_total: 0.59, ema_distance: 1e-3 },
        ];
        let path = dir.path().join("bia.csv");
        write_bia_log(&path, &rows).unwrap();
        assert_eq!(read_bia_log(&path).unwrap(), rows);
        let moc = vec![MocLogRow {
            step: 3,
            loss_total: 1.25,
            loss_su: Some(0.5),
            loss_ss: None,
            loss_pe: Some(0.1),
            loss_align: None,
        }];
        let path = dir.path().join("moc.csv");
        write_moc_log(&path, &moc).unwrap();
        assert_eq!(read_moc_log(&path).unwrap(), moc);
    }
}
