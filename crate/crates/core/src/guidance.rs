//! Haze guidance for unlabelled images: a learned haze/clear prompt pair in
//! the embedding space of a small image encoder. The probability that an
//! image sits closer to the haze prompt is the adaptation loss.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Image, Transform};
use crate::error::{Error, Result};
use crate::net::checkpoint::{load_params, save_params};
use crate::net::ParamSet;
use crate::optim::{AdamConfig, Optimizer, OptimizerKind};
use hazekit_tape::{Element, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    /// Channels of the three stride-2 convolution stages.
    pub widths: [usize; 3],
    /// Embedding dimension.
    pub dim: usize,
    /// Softmax temperature applied to cosine similarities.
    pub temperature: f64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self { widths: [8, 16, 32], dim: 32, temperature: 1.0 }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.dim == 0 {
            return Err(Error::Config("backend widths and dimension must be positive".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Image encoder onto the unit sphere: three stride-2 conv + SiLU stages,
/// global average pooling, a linear map to `dim`, and L2 normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBackend<E: Element = f32> {
    config: BackendConfig,
    params: ParamSet<E>,
}

impl<E: Element> EmbeddingBackend<E> {
    pub fn init(config: BackendConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut prev = 3;
        for (i, &w) in config.widths.iter().enumerate() {
            let normal = Normal::new(0.0, (2.0 / (prev * 9) as f64).sqrt()).expect("positive std");
            let data = (0..w * prev * 9).map(|_| E::of(normal.sample(&mut rng))).collect();
            params.push(format!("conv.{i}.w"), Tensor::new(vec![w, prev, 3, 3], data));
            params.push(format!("conv.{i}.b"), Tensor::zeros(vec![w]));
            prev = w;
        }
        let normal = Normal::new(0.0, (1.0 / prev as f64).sqrt()).expect("positive std");
        let data = (0..config.dim * prev).map(|_| E::of(normal.sample(&mut rng))).collect();
        params.push("embed.w", Tensor::new(vec![config.dim, prev], data));
        params.push("embed.b", Tensor::zeros(vec![config.dim]));
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<E> {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn cast<F: Element>(&self) -> EmbeddingBackend<F> {
        EmbeddingBackend { config: self.config.clone(), params: self.params.cast() }
    }

    pub fn bind(&self, g: &mut Graph<E>, trainable: bool) -> Vec<Var> {
        self.params.bind(g, trainable)
    }

    /// `[N, dim]` unit-norm embeddings of an image batch.
    pub fn embed_graph(&self, g: &mut Graph<E>, p: &[Var], x: Var) -> Var {
        let mut h = x;
        for i in 0..3 {
            h = g.conv2d(h, p[2 * i], Some(p[2 * i + 1]), 2, 1);
            h = g.silu(h);
        }
        let pooled = g.global_avg_pool(h);
        let e = g.linear(pooled, p[6], Some(p[7]));
        g.normalize_rows(e)
    }

    pub fn embed(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        check_batch(x)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let e = self.embed_graph(&mut g, &p, xv);
        Ok(g.value(e).clone())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_params(dir, serde_json::to_value(&self.config)?, "embedding-backend", 0, "prompts", &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, params) = load_params(dir)?;
        if manifest.role != "embedding-backend" {
            return Err(Error::Input(format!("{} holds a {} checkpoint, not a backend", dir.display(), manifest.role)));
        }
        let config: BackendConfig = serde_json::from_value(manifest.net_config)?;
        let reference = Self::init(config, 0)?;
        reference.params.check_layout(&params)?;
        Ok(Self { params, ..reference })
    }
}

fn check_batch<E: Element>(x: &Tensor<E>) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 3 || s[0] == 0 || s[2] < 2 || s[3] < 2 {
        return Err(Error::Dimension(format!("expected a non-empty [N, 3, H, W] batch, got {s:?}")));
    }
    Ok(())
}

/// Learned haze (`T_H`) and clear (`T_C`) prompt embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptPair {
    pub dim: usize,
    pub haze_embed: Vec<f64>,
    pub clear_embed: Vec<f64>,
    pub holdout_accuracy: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub trained: bool,
}

impl PromptPair {
    /// Standard-normal draws, not yet trained.
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>();
        let haze_embed = draw();
        let clear_embed = draw();
        Self { dim, haze_embed, clear_embed, holdout_accuracy: None, seed, trained: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.haze_embed.len() != self.dim || self.clear_embed.len() != self.dim {
            return Err(Error::Dimension(format!(
                "prompts of length {} and {} for dimension {}",
                self.haze_embed.len(),
                self.clear_embed.len(),
                self.dim
            )));
        }
        if self.haze_embed.iter().chain(&self.clear_embed).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("prompt embeddings must be finite".into()));
        }
        Ok(())
    }

    fn require_trained(&self) -> Result<()> {
        if !self.trained {
            return Err(Error::State("prompt pair has not been trained".into()));
        }
        self.validate()
    }

    /// `[2, dim]` matrix with the haze prompt in row 0.
    pub fn matrix<E: Element>(&self) -> Tensor<E> {
        Tensor::from_f64(vec![2, self.dim], &[self.haze_embed.as_slice(), self.clear_embed.as_slice()].concat())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let pair: Self = serde_json::from_str(&text)?;
        pair.validate()?;
        Ok(pair)
    }
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Two-way softmax of the similarities, haze entry.
pub fn softmax_haze(sim_haze: f64, sim_clear: f64, temperature: f64) -> f64 {
    1.0 / (1.0 + ((sim_clear - sim_haze) / temperature).exp())
}

/// `[N, 2]` cosine similarities to (haze, clear), scaled by `1 / temperature`.
fn logits_graph<E: Element>(g: &mut Graph<E>, backend: &EmbeddingBackend<E>, bp: &[Var], prompts: Var, x: Var) -> Var {
    let e = backend.embed_graph(g, bp, x);
    let t = g.normalize_rows(prompts);
    let sims = g.matmul_nt(e, t);
    g.scale(sims, 1.0 / backend.config.temperature)
}

/// Per-image haze probabilities `[N]` of the batch `x`.
pub fn haze_probability_graph<E: Element>(
    g: &mut Graph<E>,
    backend: &EmbeddingBackend<E>,
    prompts: &PromptPair,
    x: Var,
) -> Result<Var> {
    prompts.validate()?;
    check_batch(g.value(x))?;
    if prompts.dim != backend.dim() {
        return Err(Error::Dimension(format!(
            "prompts of dimension {} for a {}-d backend",
            prompts.dim,
            backend.dim()
        )));
    }
    let bp = backend.bind(g, false);
    let pv = g.constant(prompts.matrix());
    let logits = logits_graph(g, backend, &bp, pv, x);
    let probs = g.softmax_rows(logits);
    let n = g.value(x).dims4()[0];
    Ok(g.gather(probs, &vec![0; n]))
}

/// Mean haze probability of the batch; requires trained prompts.
pub fn l_rea_graph<E: Element>(
    g: &mut Graph<E>,
    backend: &EmbeddingBackend<E>,
    prompts: &PromptPair,
    x: Var,
) -> Result<Var> {
    prompts.require_trained()?;
    let p = haze_probability_graph(g, backend, prompts, x)?;
    Ok(g.mean(p))
}

/// Haze probability of every image in the batch.
pub fn haze_probabilities<E: Element>(
    x: &Tensor<E>,
    prompts: &PromptPair,
    backend: &EmbeddingBackend<E>,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let p = haze_probability_graph(&mut g, backend, prompts, xv)?;
    Ok(g.value(p).to_f64_vec())
}

/// Haze probability of a single image.
pub fn haze_probability<E: Element>(
    image: &Tensor<E>,
    prompts: &PromptPair,
    backend: &EmbeddingBackend<E>,
) -> Result<f64> {
    let [n, ..] = image.dims4();
    if n != 1 {
        return Err(Error::Dimension(format!("expected one image, got a batch of {n}")));
    }
    Ok(haze_probabilities(image, prompts, backend)?[0])
}

pub fn l_rea<E: Element>(batch: &Tensor<E>, prompts: &PromptPair, backend: &EmbeddingBackend<E>) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(batch.clone());
    let v = l_rea_graph(&mut g, backend, prompts, xv)?;
    Ok(g.value(v).item().as_f64())
}

/// Mean haze probability over every image of every batch in `images`.
pub fn mean_haze_probability(images: &[Image], prompts: &PromptPair, backend: &EmbeddingBackend) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Input("no images to score".into()));
    }
    let mut total = 0.0;
    for img in images {
        total += haze_probabilities(img, prompts, backend)?.iter().sum::<f64>();
    }
    let count: usize = images.iter().map(|i| i.dims4()[0]).sum();
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTraining {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Square random crop used for training batches; `0` keeps full frames.
    pub crop: usize,
    /// Also train the image encoder, not just the prompts.
    pub train_backend: bool,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for PromptTraining {
    fn default() -> Self {
        Self { steps: 400, lr: 3e-3, batch_size: 16, crop: 32, train_backend: true, holdout_fraction: 0.2, seed: 0 }
    }
}

type Labelled<'a> = Vec<(&'a Image, usize)>;

fn split_holdout<'a>(
    images: &'a [Image],
    label: usize,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (Labelled<'a>, Labelled<'a>) {
    let mut idx: Vec<usize> = (0..images.len()).collect();
    idx.shuffle(rng);
    let hold = ((images.len() as f64 * fraction).round() as usize).min(images.len() - 1);
    let (h, t) = idx.split_at(hold);
    (t.iter().map(|&i| (&images[i], label)).collect(), h.iter().map(|&i| (&images[i], label)).collect())
}

/// Per-step record of prompt training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PromptStep {
    pub step: usize,
    pub bce: f64,
}

/// Fits the prompt pair (and, optionally, the backend) by binary cross
/// entropy with hazy images labelled 1 and clear images 0. A holdout split
/// is kept aside and scored at threshold 0.5 once training ends.
pub fn train_prompts(
    haze_images: &[Image],
    clear_images: &[Image],
    backend: &mut EmbeddingBackend,
    opts: &PromptTraining,
    mut log: impl FnMut(PromptStep),
) -> Result<PromptPair> {
    if haze_images.is_empty() || clear_images.is_empty() {
        return Err(Error::Input(format!(
            "both classes need images: {} hazy, {} clear",
            haze_images.len(),
            clear_images.len()
        )));
    }
    if opts.batch_size == 0 || opts.lr.is_nan() || opts.lr <= 0.0 || !(0.0..1.0).contains(&opts.holdout_fraction) {
        return Err(Error::Config("prompt training needs batch_size >= 1, lr > 0 and holdout in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    // label 0 = haze column, 1 = clear column
    let (mut train, mut holdout) = split_holdout(haze_images, 0, opts.holdout_fraction, &mut rng);
    let (t2, h2) = split_holdout(clear_images, 1, opts.holdout_fraction, &mut rng);
    train.extend(t2);
    holdout.extend(h2);

    let mut pair = PromptPair::init(backend.dim(), opts.seed);
    let mut prompts: Tensor<f32> = pair.matrix();
    let mut opt = Optimizer::new(OptimizerKind::Adam, AdamConfig::default());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    for step in 0..opts.steps {
        let mut batch = Vec::with_capacity(opts.batch_size);
        let mut labels = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let (img, label) = train[order[cursor]];
            cursor += 1;
            let [_, _, h, w] = img.dims4();
            let crop = if opts.crop == 0 { h.min(w) } else { opts.crop };
            batch.push(Transform::sample(&mut rng, h, w, crop)?.apply(img)?);
            labels.push(label);
        }
        let x = Tensor::stack_batch(&batch);

        let mut g = Graph::new();
        let bp = backend.bind(&mut g, opts.train_backend);
        let pv = g.variable(prompts.clone());
        let xv = g.constant(x);
        let logits = logits_graph(&mut g, backend, &bp, pv, xv);
        let logp = g.log_softmax_rows(logits);
        let picked = g.gather(logp, &labels);
        let nll = g.mean(picked);
        let bce = g.scale(nll, -1.0);
        let value = g.value(bce).item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite { step, detail: format!("prompt BCE = {value}") });
        }
        let mut grads = g.backward(bce);
        let mut targets: Vec<&mut Tensor<f32>> = vec![&mut prompts];
        let mut gs = vec![grads.take(pv).expect("prompt gradient")];
        if opts.train_backend {
            for (t, &v) in backend.params.tensors_mut().iter_mut().zip(&bp) {
                gs.push(grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())));
                targets.push(t);
            }
        }
        opt.step(&mut targets, &gs, opts.lr)?;
        log(PromptStep { step, bce: value });
    }

    let d = backend.dim();
    let flat = prompts.to_f64_vec();
    pair.haze_embed = flat[..d].to_vec();
    pair.clear_embed = flat[d..].to_vec();
    pair.trained = true;
    pair.validate()?;
    let scored = if holdout.is_empty() { &train } else { &holdout };
    let mut correct = 0;
    for (img, label) in scored {
        let p = haze_probability(img, &pair, backend)?;
        if (p > 0.5) == (*label == 0) {
            correct += 1;
        }
    }
    pair.holdout_accuracy = Some(correct as f64 / scored.len() as f64);
    Ok(pair)
}
