use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ConvSpec, NetConfig, Role};
use super::params::ParamSet;
use crate::error::{Error, Result};
use hazekit_tape::{Element, Graph, Tensor, Var};

/// Inputs are clamped to this margin before the logit skip.
const SKIP_EPS: f64 = 1e-3;

/// Per-stage encoder features, stage `i` at `1 / 2^i` resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTaps<E> {
    pub per_stage: Vec<Tensor<E>>,
}

impl<E: Element> FeatureTaps<E> {
    pub fn len(&self) -> usize {
        self.per_stage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_stage.is_empty()
    }
}

/// A dehazing network: configuration, role and parameters.
///
/// Each encoder stage is a linear projection (stride 2 after the first
/// stage) followed by residual blocks `x + conv(silu(conv(x)))`; its output
/// is the stage tap. The decoder mirrors it with nearest upsampling and
/// skip concatenation. The output is `sigmoid(head + logit(x))`, so a head
/// near zero starts the network near the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelHandle<E: Element = f32> {
    config: NetConfig,
    role: Role,
    params: ParamSet<E>,
    layout: Vec<ConvSpec>,
}

impl<E: Element> ModelHandle<E> {
    /// Kaiming-normal weights and zero biases; the second convolution of
    /// every residual block and the head start at a tenth of that scale.
    pub fn init(config: NetConfig, role: Role, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for spec in &layout {
            let fan_in = (spec.in_channels * spec.kernel * spec.kernel) as f64;
            let damp = if spec.name.ends_with("conv2") || spec.name == "head" { 0.1 } else { 1.0 };
            let normal = Normal::new(0.0, damp * (2.0 / fan_in).sqrt()).expect("positive std");
            let shape = spec.weight_shape();
            let w: Vec<E> = (0..shape.iter().product()).map(|_| E::of(normal.sample(&mut rng))).collect();
            params.push(format!("{}.w", spec.name), Tensor::new(shape.to_vec(), w));
            params.push(format!("{}.b", spec.name), Tensor::zeros(vec![spec.out_channels]));
        }
        Ok(Self { config, role, params, layout })
    }

    /// Wraps existing parameters, checking names and shapes against `config`.
    pub fn from_params(config: NetConfig, role: Role, params: ParamSet<E>) -> Result<Self> {
        let reference = Self::init(config, role, 0)?;
        reference.params.check_layout(&params)?;
        Ok(Self { params, ..reference })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn params(&self) -> &ParamSet<E> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<E> {
        &mut self.params
    }

    pub fn layout(&self) -> &[ConvSpec] {
        &self.layout
    }

    pub fn stages(&self) -> usize {
        self.config.stages()
    }

    pub fn cast<F: Element>(&self) -> ModelHandle<F> {
        ModelHandle {
            config: self.config.clone(),
            role: self.role,
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn param_count(&self) -> u64 {
        self.params.numel() as u64
    }

    /// `2 * MAC` over all convolutions for an `[N, 3, H, W]` input.
    pub fn flops_estimate(&self, input_shape: &[usize]) -> Result<u64> {
        self.config.check_input(input_shape)?;
        let (n, mut h, mut w) = (input_shape[0] as u64, input_shape[2], input_shape[3]);
        let mut total = 0u64;
        let mut sizes = Vec::with_capacity(self.stages());
        let mut specs = self.layout.iter();
        let blocks = 2 * self.config.blocks_per_stage;
        for _ in 0..self.stages() {
            for spec in specs.by_ref().take(1 + blocks) {
                total += spec.flops(h, w);
                (h, w) = spec.output_size(h, w);
            }
            sizes.push((h, w));
        }
        for i in (0..self.stages()).rev() {
            let (h, w) = sizes[i];
            for spec in specs.by_ref().take(1 + blocks) {
                total += spec.flops(h, w);
            }
        }
        let (h, w) = sizes[0];
        total += specs.next().expect("head").flops(h, w);
        Ok(n * total)
    }

    pub fn bind(&self, g: &mut Graph<E>, trainable: bool) -> Vec<Var> {
        self.params.bind(g, trainable)
    }

    /// Binds only the encoder parameters, enough for [`Self::encode_graph`].
    pub fn bind_encoder(&self, g: &mut Graph<E>, trainable: bool) -> Vec<Var> {
        let n = 2 * self.stages() * (1 + 2 * self.config.blocks_per_stage);
        self.params.tensors()[..n].iter().map(|t| g.leaf(t.clone(), trainable)).collect()
    }

    fn conv(&self, g: &mut Graph<E>, p: &[Var], index: usize, x: Var) -> Var {
        let spec = &self.layout[index];
        g.conv2d(x, p[2 * index], Some(p[2 * index + 1]), spec.stride, spec.pad())
    }

    fn stage(&self, g: &mut Graph<E>, p: &[Var], cursor: &mut usize, x: Var) -> Var {
        let mut h = self.conv(g, p, *cursor, x);
        *cursor += 1;
        for _ in 0..self.config.blocks_per_stage {
            let a = self.conv(g, p, *cursor, h);
            let a = g.silu(a);
            let a = self.conv(g, p, *cursor + 1, a);
            h = g.add(h, a);
            *cursor += 2;
        }
        h
    }

    /// Encoder taps of `x` for parameters bound at `p`.
    pub fn encode_graph(&self, g: &mut Graph<E>, p: &[Var], x: Var) -> Vec<Var> {
        let mut cursor = 0;
        let mut taps = Vec::with_capacity(self.stages());
        let mut h = x;
        for _ in 0..self.stages() {
            h = self.stage(g, p, &mut cursor, h);
            taps.push(h);
        }
        taps
    }

    /// Output and encoder taps. The logit skip treats `x` as a constant.
    pub fn forward_graph(&self, g: &mut Graph<E>, p: &[Var], x: Var) -> (Var, Vec<Var>) {
        let taps = self.encode_graph(g, p, x);
        let mut cursor = self.stages() * (1 + 2 * self.config.blocks_per_stage);
        let last = self.stages() - 1;
        let mut d = taps[last];
        for i in (0..=last).rev() {
            let input = if i == last {
                d
            } else {
                let up = g.upsample2x(d);
                g.concat_channels(&[up, taps[i]])
            };
            d = self.stage(g, p, &mut cursor, input);
        }
        let head = self.conv(g, p, cursor, d);
        let skip = g.value(x).map(|v| {
            let v = v.as_f64().clamp(SKIP_EPS, 1.0 - SKIP_EPS);
            E::of((v / (1.0 - v)).ln())
        });
        let skip = g.constant(skip);
        let z = g.add(head, skip);
        (g.sigmoid(z), taps)
    }

    /// Evaluates the network on `x`.
    pub fn forward(&self, x: &Tensor<E>) -> Result<(Tensor<E>, FeatureTaps<E>)> {
        self.config.check_input(x.shape())?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let (y, taps) = self.forward_graph(&mut g, &p, xv);
        let per_stage = taps.iter().map(|&t| g.value(t).clone()).collect();
        Ok((g.value(y).clone(), FeatureTaps { per_stage }))
    }

    pub fn encode(&self, x: &Tensor<E>) -> Result<FeatureTaps<E>> {
        self.config.check_input(x.shape())?;
        let mut g = Graph::new();
        let p = self.bind_encoder(&mut g, false);
        let xv = g.constant(x.clone());
        let taps = self.encode_graph(&mut g, &p, xv);
        Ok(FeatureTaps { per_stage: taps.iter().map(|&t| g.value(t).clone()).collect() })
    }

    /// Output only, evaluated in chunks of at most `chunk` images.
    pub fn dehaze(&self, x: &Tensor<E>, chunk: usize) -> Result<Tensor<E>> {
        let [n, ..] = x.dims4();
        if n <= chunk.max(1) {
            return Ok(self.forward(x)?.0);
        }
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let items: Vec<_> = (start..end).map(|i| x.batch_item(i)).collect();
            parts.push(self.forward(&Tensor::stack_batch(&items))?.0);
            start = end;
        }
        Ok(Tensor::stack_batch(&parts))
    }
}

/// Anything that maps a hazy batch to a restored batch of the same shape.
pub trait Dehazer {
    fn dehaze_batch(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Dehazer for ModelHandle<f32> {
    fn dehaze_batch(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.dehaze(x, 8)
    }
}

/// Returns its input; the "no restoration" baseline.
pub struct IdentityDehazer;

impl Dehazer for IdentityDehazer {
    fn dehaze_batch(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        if x.rank() != 4 {
            return Err(Error::Dimension(format!("expected a rank-4 batch, got {:?}", x.shape())));
        }
        Ok(x.clone())
    }
}

/// A frozen feature pyramid used by the perceptual loss.
pub trait FeatureExtractor<E: Element> {
    fn stages(&self) -> usize;

    fn check_input(&self, shape: &[usize]) -> Result<()>;

    /// Records the features of `x` on `g`; extractor weights are constants.
    fn extract_graph(&self, g: &mut Graph<E>, x: Var) -> Vec<Var>;
}

/// Uses a model's encoder as the extractor.
pub struct EncoderExtractor<'a, E: Element> {
    model: &'a ModelHandle<E>,
}

impl<'a, E: Element> EncoderExtractor<'a, E> {
    pub fn new(model: &'a ModelHandle<E>) -> Self {
        Self { model }
    }
}

impl<E: Element> FeatureExtractor<E> for EncoderExtractor<'_, E> {
    fn stages(&self) -> usize {
        self.model.stages()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        self.model.config().check_input(shape)
    }

    fn extract_graph(&self, g: &mut Graph<E>, x: Var) -> Vec<Var> {
        let p = self.model.bind_encoder(g, false);
        self.model.encode_graph(g, &p, x)
    }
}
