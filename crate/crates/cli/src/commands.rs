use std::path::{Path, PathBuf};
use std::time::Instant;

use hazekit_core::data::{
    build_real_dataset, build_synthetic_dataset, load_png, save_png, CleanSource, Image, PairedDataset, RealDataset,
};
use hazekit_core::guidance::{mean_haze_probability, train_prompts, EmbeddingBackend, PromptPair};
use hazekit_core::metrics::{bench_efficiency, evaluate, BenchOptions, MetricReport};
use hazekit_core::net::{Dehazer, IdentityDehazer, ModelHandle, Role};
use hazekit_core::trainer::{
    run_bia, run_moc, train_supervised, write_bia_log, write_json, write_moc_log, BiaLogRow, BiaMode, BiaState,
    CheckpointEvery, Guidance, MocLogRow, TrainObserver,
};
use hazekit_core::{Error, Result};
use hazekit_tape::Tensor;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const PROMPTS_FILE: &str = "prompts.json";
pub const BACKEND_DIR: &str = "backend";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Input(format!("cannot create {}: {e}", dir.display())))
}

/// Records what a verb was run with and what it produced.
fn write_manifest(out: &Path, verb: &str, cfg: &RunConfig, inputs: serde_json::Value, outputs: &[&str]) -> Result<()> {
    let manifest = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "verb": verb,
        "inputs": inputs,
        "outputs": outputs,
        "config": cfg,
        "train_config": cfg.train_config(),
    });
    write_json(&out.join(RUN_MANIFEST), &manifest)
}

/// Writes periodic checkpoints and a progress line every `log_every` steps.
struct Progress<'a> {
    checkpoints: CheckpointEvery<'a>,
    log_every: usize,
    total: usize,
    started: Instant,
}

impl<'a> Progress<'a> {
    fn new(dir: &'a Path, cfg: &RunConfig, total: usize) -> Self {
        Self {
            checkpoints: CheckpointEvery { dir, every: cfg.train.checkpoint_every },
            log_every: cfg.train.log_every,
            total,
            started: Instant::now(),
        }
    }

    fn due(&self, step: usize) -> bool {
        self.log_every > 0 && ((step + 1).is_multiple_of(self.log_every) || step + 1 == self.total)
    }
}

impl TrainObserver for Progress<'_> {
    fn on_moc_step(&mut self, row: &MocLogRow, student: &ModelHandle) -> Result<()> {
        if self.due(row.step) {
            eprintln!(
                "step {}/{} loss {:.5} ({:.1}s)",
                row.step + 1,
                self.total,
                row.loss_total,
                self.started.elapsed().as_secs_f64()
            );
        }
        self.checkpoints.on_moc_step(row, student)
    }

    fn on_bia_step(&mut self, row: &BiaLogRow, state: &BiaState) -> Result<()> {
        if self.due(row.step) {
            eprintln!(
                "step {}/{} l_rea {:.5} total {:.5} ({:.1}s)",
                row.step + 1,
                self.total,
                row.l_rea,
                row.loss_total,
                self.started.elapsed().as_secs_f64()
            );
        }
        self.checkpoints.on_bia_step(row, state)
    }
}

fn clean_source(cfg: &RunConfig) -> Result<CleanSource> {
    match &cfg.data.clean_dir {
        Some(dir) => CleanSource::from_dir(dir),
        None => Ok(CleanSource::Procedural { size: cfg.data.size }),
    }
}

fn take(d: &PairedDataset, range: std::ops::Range<usize>) -> Result<PairedDataset> {
    PairedDataset::new(d.clean[range.clone()].to_vec(), d.hazy[range].to_vec(), d.seed)
}

pub fn synth_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let src = clean_source(cfg)?;
    let d = &cfg.data;
    let syn = build_synthetic_dataset(&src, d.pairs + d.test_pairs, cfg.seed)?;
    take(&syn, 0..d.pairs)?.write(&out.join("train"))?;
    let mut outputs = vec!["train/manifest.json"];
    if d.test_pairs > 0 {
        take(&syn, d.pairs..d.pairs + d.test_pairs)?.write(&out.join("test"))?;
        outputs.push("test/manifest.json");
    }
    let real = build_real_dataset(&src, d.real + d.real_test, cfg.seed.wrapping_add(1))?;
    RealDataset::new(real.images[..d.real].to_vec(), real.seed)?.write(&out.join("real"))?;
    outputs.push("real/manifest.json");
    if d.real_test > 0 {
        RealDataset::new(real.images[d.real..].to_vec(), real.seed)?.write(&out.join("real_test"))?;
        outputs.push("real_test/manifest.json");
    }
    if d.clear > 0 {
        build_synthetic_dataset(&src, d.clear, cfg.seed.wrapping_add(2))?.write(&out.join("clear"))?;
        outputs.push("clear/manifest.json");
    }
    eprintln!(
        "wrote {} pairs, {} test pairs, {} real, {} real test images",
        d.pairs, d.test_pairs, d.real, d.real_test
    );
    write_manifest(out, "synth-data", cfg, json!({ "clean_dir": d.clean_dir }), &outputs)
}

pub fn train_teacher(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    create_dir(out)?;
    let train = PairedDataset::read(data)?;
    let init = ModelHandle::init(cfg.net.teacher.clone(), Role::Teacher, cfg.seed)?;
    let tc = cfg.train_config();
    let mut progress = Progress::new(out, cfg, tc.n_teacher);
    let run = train_supervised(&init, &train, &tc, &mut progress)?;
    run.student.with_role(Role::Teacher).save(&out.join("teacher"), tc.n_teacher as u64, "teacher")?;
    write_moc_log(&out.join("teacher_log.csv"), &run.log)?;
    write_manifest(out, "train-teacher", cfg, json!({ "data": data }), &["teacher", "teacher_log.csv"])
}

pub fn moc(cfg: &RunConfig, teacher: &Path, data: &Path, init: Option<&Path>, out: &Path) -> Result<()> {
    create_dir(out)?;
    let teacher_model = ModelHandle::load(teacher)?;
    let train = PairedDataset::read(data)?;
    let student = match init {
        Some(p) => ModelHandle::load(p)?,
        None => ModelHandle::init(cfg.net.student.clone(), Role::StudentSyn, cfg.seed)?,
    };
    let tc = cfg.train_config();
    let mut progress = Progress::new(out, cfg, tc.n_moc);
    let run = run_moc(&teacher_model, &student, &train, &tc, &mut progress)?;
    run.student.save(&out.join("student_moc_final"), tc.n_moc as u64, "moc")?;
    write_moc_log(&out.join("moc_log.csv"), &run.log)?;
    write_manifest(
        out,
        "moc",
        cfg,
        json!({ "teacher": teacher, "data": data, "init": init }),
        &["student_moc_final", "moc_log.csv"],
    )
}

/// Images of a manifest: the hazy side of pairs, or the unlabelled list.
fn hazy_images(manifest: &Path) -> Result<Vec<Image>> {
    Ok(RealDataset::read(manifest)?.images)
}

/// Images of a manifest: the clean side of pairs, or the unlabelled list.
fn clear_images(manifest: &Path) -> Result<Vec<Image>> {
    match PairedDataset::read(manifest) {
        Ok(d) => Ok(d.clean),
        Err(Error::Input(_)) => hazy_images(manifest),
        Err(e) => Err(e),
    }
}

pub fn train_prompts_cmd(cfg: &RunConfig, hazy: &Path, clear: &Path, out: &Path) -> Result<()> {
    create_dir(out)?;
    let (h, c) = (hazy_images(hazy)?, clear_images(clear)?);
    let mut backend = EmbeddingBackend::init(cfg.backend_config(), cfg.seed)?;
    let opts = cfg.prompt_training();
    let log_every = cfg.train.log_every;
    let prompts = train_prompts(&h, &c, &mut backend, &opts, |s| {
        if log_every > 0 && (s.step + 1) % log_every == 0 {
            eprintln!("step {}/{} bce {:.5}", s.step + 1, opts.steps, s.bce);
        }
    })?;
    if let Some(acc) = prompts.holdout_accuracy {
        eprintln!("held-out accuracy {acc:.4}");
    }
    prompts.save(&out.join(PROMPTS_FILE))?;
    backend.save(&out.join(BACKEND_DIR))?;
    write_manifest(
        out,
        "train-prompts",
        cfg,
        json!({ "hazy": hazy, "clear": clear, "holdout_accuracy": prompts.holdout_accuracy }),
        &[PROMPTS_FILE, BACKEND_DIR],
    )
}

pub fn bia(cfg: &RunConfig, student: &Path, real: &Path, prompts_dir: &Path, out: &Path) -> Result<()> {
    create_dir(out)?;
    let model = ModelHandle::load(student)?;
    let data = RealDataset::read(real)?;
    let prompts = PromptPair::load(&prompts_dir.join(PROMPTS_FILE))?;
    let backend = EmbeddingBackend::load(&prompts_dir.join(BACKEND_DIR))?;
    let g = Guidance { prompts: &prompts, backend: &backend };
    let tc = cfg.train_config();
    let mut progress = Progress::new(out, cfg, tc.t_bia);
    let run = run_bia(&model, &data, g, &tc, cfg.bia.mode, &mut progress)?;
    run.model.save(&out.join("student_bia_final"), tc.t_bia as u64, "bia")?;
    write_bia_log(&out.join("bia_log.csv"), &run.log)?;
    let before = mean_haze_probability(&outputs(&model, &data.images)?, &prompts, &backend)?;
    let after = mean_haze_probability(&outputs(&run.model, &data.images)?, &prompts, &backend)?;
    eprintln!("mean l_rea on the adaptation set {before:.5} -> {after:.5}");
    write_manifest(
        out,
        "bia",
        cfg,
        json!({ "student": student, "real": real, "prompts": prompts_dir, "mode": mode_name(cfg.bia.mode) }),
        &["student_bia_final", "bia_log.csv"],
    )
}

fn mode_name(mode: BiaMode) -> &'static str {
    match mode {
        BiaMode::Full => "full",
        BiaMode::LowerOnly => "lower-only",
        BiaMode::UpperOnly => "upper-only",
    }
}

fn outputs(m: &dyn Dehazer, images: &[Image]) -> Result<Vec<Image>> {
    images.iter().map(|x| m.dehaze_batch(x)).collect()
}

/// `identity` selects the pass-through baseline; anything else is a
/// checkpoint directory.
fn load_dehazer(model: &Path) -> Result<Box<dyn Dehazer>> {
    if model == Path::new("identity") {
        Ok(Box::new(IdentityDehazer))
    } else {
        Ok(Box::new(ModelHandle::load(model)?))
    }
}

pub fn eval(cfg: &RunConfig, model: &Path, data: &Path, no_ground_truth: bool, out: &Path) -> Result<MetricReport> {
    create_dir(out)?;
    let m = load_dehazer(model)?;
    let report = match PairedDataset::read(data) {
        Ok(d) if !no_ground_truth => evaluate(m.as_ref(), &d.hazy, Some(&d.clean), true)?,
        Ok(d) => evaluate(m.as_ref(), &d.hazy, None, false)?,
        Err(Error::Input(_)) => evaluate(m.as_ref(), &RealDataset::read(data)?.images, None, false)?,
        Err(e) => return Err(e),
    };
    report.write_json(&out.join("metrics.json"))?;
    report.write_csv(&out.join("metrics.csv"))?;
    let a = &report.aggregate;
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    eprintln!(
        "{} images: psnr {} ssim {} entropy {:.4} haze density {:.4}",
        report.per_image.len(),
        opt(a.psnr),
        opt(a.ssim),
        a.entropy,
        a.haze_density
    );
    write_manifest(out, "eval", cfg, json!({ "model": model, "data": data }), &["metrics.json", "metrics.csv"])?;
    Ok(report)
}

#[derive(Serialize)]
struct BenchOutput<'a> {
    model: &'a Path,
    report: hazekit_core::metrics::EfficiencyReport,
}

pub fn bench(cfg: &RunConfig, model: &Path, out: &Path) -> Result<()> {
    create_dir(out)?;
    let m = ModelHandle::load(model)?;
    let shapes: Vec<[usize; 4]> = cfg.bench.sizes.iter().map(|&s| [1, 3, s, s]).collect();
    let report = bench_efficiency(&m, &shapes, BenchOptions { warmup: cfg.bench.warmup, runs: cfg.bench.runs })?;
    eprintln!("params {} flops {} at {:?}", report.params, report.flops, report.flops_shape);
    for e in &report.latency_ms {
        eprintln!("  {}x{}: {:.2} ms", e.shape[2], e.shape[3], e.median_ms);
    }
    write_json(&out.join("efficiency.json"), &BenchOutput { model, report })?;
    write_manifest(out, "bench", cfg, json!({ "model": model }), &["efficiency.json"])
}

/// Replicates edge pixels so both sides become multiples of `q`.
pub fn pad_to_multiple(img: &Image, q: usize) -> Image {
    let [n, c, h, w] = img.dims4();
    let (ph, pw) = (h.div_ceil(q) * q, w.div_ceil(q) * q);
    if (ph, pw) == (h, w) {
        return img.clone();
    }
    let mut data = Vec::with_capacity(n * c * ph * pw);
    for i in 0..n {
        for k in 0..c {
            for y in 0..ph {
                for x in 0..pw {
                    data.push(img.at4(i, k, y.min(h - 1), x.min(w - 1)));
                }
            }
        }
    }
    Tensor::new(vec![n, c, ph, pw], data)
}

/// Top-left `h x w` window of every plane.
pub fn crop_to(img: &Image, h: usize, w: usize) -> Image {
    let [n, c, ..] = img.dims4();
    let mut data = Vec::with_capacity(n * c * h * w);
    for i in 0..n {
        for k in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(img.at4(i, k, y, x));
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], data)
}

pub fn dehaze(model: &Path, input: &Path, output: &Path) -> Result<()> {
    let img = load_png(input)?;
    let [_, _, h, w] = img.dims4();
    let restored = if model == Path::new("identity") {
        img
    } else {
        let m = ModelHandle::load(model)?;
        let q = 1usize << (m.stages() - 1);
        crop_to(&m.dehaze_batch(&pad_to_multiple(&img, q))?, h, w)
    };
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_png(output, &restored)
}

pub fn default_out(verb: &str) -> PathBuf {
    PathBuf::from("runs").join(verb)
}
