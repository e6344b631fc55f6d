//! Distillation losses: L1, SSIM, perceptual, and per-stage feature alignment.
//!
//! Every loss exists twice: a `*_graph` form recorded on a [`Graph`] for
//! training, and a plain form returning `f64` for evaluation and tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{resize_bilinear, FeatureExtractor, FeatureTaps, ParamSet};
use hazekit_tape::{Element, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_su: f64,
    pub lambda_ss: f64,
    pub lambda_pe: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_su: 1.0, lambda_ss: 0.5, lambda_pe: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_su, self.lambda_ss, self.lambda_pe];
        if all.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {all:?}")));
        }
        if all.iter().all(|l| *l == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// Per-stage weights of the alignment loss. A zero weight drops the stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignWeights {
    pub w: Vec<f64>,
}

impl AlignWeights {
    /// `1 / stages` on every stage.
    pub fn uniform(stages: usize) -> Self {
        Self { w: vec![1.0 / stages as f64; stages] }
    }

    pub fn zeros(stages: usize) -> Self {
        Self { w: vec![0.0; stages] }
    }

    pub fn is_zero(&self) -> bool {
        self.w.iter().all(|w| *w == 0.0)
    }

    pub fn validate(&self, stages: usize) -> Result<()> {
        if self.w.len() != stages {
            return Err(Error::Config(format!("{} alignment weights for {stages} stages", self.w.len())));
        }
        if self.w.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("alignment weights must be finite and nonnegative: {:?}", self.w)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, data_range: 1.0 }
    }
}

impl SsimConfig {
    /// Normalised 1-D Gaussian taps.
    pub fn kernel(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let raw: Vec<f64> =
            (0..self.window).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp()).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

fn same_shape<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_graph<E: Element>(g: &mut Graph<E>, pred: Var, target: Var) -> Result<Var> {
    same_shape(g.value(pred), g.value(target))?;
    let d = g.sub(pred, target);
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// `1 - mean SSIM` over every channel and valid window position.
pub fn ssim_graph<E: Element>(g: &mut Graph<E>, pred: Var, target: Var, cfg: &SsimConfig) -> Result<Var> {
    same_shape(g.value(pred), g.value(target))?;
    let shape = g.value(pred).shape().to_vec();
    if shape.len() != 4 || shape[2] < cfg.window || shape[3] < cfg.window {
        return Err(Error::Input(format!("SSIM window {} does not fit input {:?}", cfg.window, shape)));
    }
    let k = cfg.kernel();
    let filt = |g: &mut Graph<E>, v: Var| {
        let r = g.blur(v, &k, true);
        g.blur(r, &k, false)
    };
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let mu_x = filt(g, pred);
    let mu_y = filt(g, target);
    let xx = g.square(pred);
    let yy = g.square(target);
    let xy = g.mul(pred, target);
    let e_xx = filt(g, xx);
    let e_yy = filt(g, yy);
    let e_xy = filt(g, xy);
    let mu_xx = g.square(mu_x);
    let mu_yy = g.square(mu_y);
    let mu_xy = g.mul(mu_x, mu_y);
    let var_x = g.sub(e_xx, mu_xx);
    let var_y = g.sub(e_yy, mu_yy);
    let cov = g.sub(e_xy, mu_xy);

    let a = g.scale(mu_xy, 2.0);
    let a = g.add_scalar(a, c1);
    let b = g.scale(cov, 2.0);
    let b = g.add_scalar(b, c2);
    let num = g.mul(a, b);
    let c = g.add(mu_xx, mu_yy);
    let c = g.add_scalar(c, c1);
    let d = g.add(var_x, var_y);
    let d = g.add_scalar(d, c2);
    let den = g.mul(c, d);
    let map = g.div(num, den);
    let m = g.mean(map);
    let neg = g.scale(m, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Stage-averaged feature MSE under a frozen extractor.
pub fn perceptual_graph<E: Element>(
    g: &mut Graph<E>,
    pred: Var,
    target: Var,
    extractor: &dyn FeatureExtractor<E>,
) -> Result<Var> {
    same_shape(g.value(pred), g.value(target))?;
    extractor.check_input(g.value(pred).shape())?;
    let fp = extractor.extract_graph(g, pred);
    let ft = extractor.extract_graph(g, target);
    if fp.is_empty() || fp.len() != extractor.stages() || ft.len() != fp.len() {
        return Err(Error::Config(format!(
            "extractor reports {} stages but produced {}",
            extractor.stages(),
            fp.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (a, b) in fp.iter().zip(&ft) {
        let d = g.sub(*a, *b);
        let s = g.square(d);
        let m = g.mean(s);
        total = Some(match total {
            Some(t) => g.add(t, m),
            None => m,
        });
    }
    let total = total.expect("at least one stage");
    Ok(g.scale(total, 1.0 / fp.len() as f64))
}

/// Learned 1x1 maps from student stage widths to teacher stage widths.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignProjections<E: Element> {
    params: ParamSet<E>,
}

impl<E: Element> AlignProjections<E> {
    /// Identity where widths agree, Kaiming-normal otherwise; zero biases.
    pub fn new(student_widths: &[usize], teacher_widths: &[usize], seed: u64) -> Result<Self> {
        if student_widths.len() != teacher_widths.len() {
            return Err(Error::Config(format!(
                "{} student stages vs {} teacher stages",
                student_widths.len(),
                teacher_widths.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (i, (&s, &t)) in student_widths.iter().zip(teacher_widths).enumerate() {
            let w = if s == t {
                let mut eye = vec![E::zero(); t * s];
                for c in 0..t {
                    eye[c * s + c] = E::one();
                }
                eye
            } else {
                let normal = Normal::new(0.0, (2.0 / s as f64).sqrt()).expect("positive std");
                (0..t * s).map(|_| E::of(normal.sample(&mut rng))).collect()
            };
            params.push(format!("proj.{i}.w"), Tensor::new(vec![t, s, 1, 1], w));
            params.push(format!("proj.{i}.b"), Tensor::zeros(vec![t]));
        }
        Ok(Self { params })
    }

    pub fn identity(widths: &[usize]) -> Self {
        Self::new(widths, widths, 0).expect("equal stage counts")
    }

    pub fn stages(&self) -> usize {
        self.params.len() / 2
    }

    pub fn params(&self) -> &ParamSet<E> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<E> {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph<E>, trainable: bool) -> Vec<Var> {
        self.params.bind(g, trainable)
    }
}

/// `sum_i w_i * mean((T_i - proj_i(S_i))^2)`. Teacher taps are constants and
/// are resized bilinearly when their resolution differs from the student's.
pub fn context_align_graph<E: Element>(
    g: &mut Graph<E>,
    teacher: &[Tensor<E>],
    student: &[Var],
    proj: &[Var],
    weights: &AlignWeights,
) -> Result<Var> {
    if teacher.len() != student.len() || proj.len() != 2 * student.len() {
        return Err(Error::Config(format!(
            "{} teacher stages, {} student stages, {} projections",
            teacher.len(),
            student.len(),
            proj.len() / 2
        )));
    }
    weights.validate(student.len())?;
    let mut total: Option<Var> = None;
    for (i, (t, &s)) in teacher.iter().zip(student).enumerate() {
        let [_, sc, sh, sw] = g.value(s).dims4();
        let [pt, ps, _, _] = g.value(proj[2 * i]).dims4();
        let [tn, tc, th, tw] = t.dims4();
        if ps != sc || pt != tc || tn != g.value(s).dims4()[0] {
            return Err(Error::Config(format!(
                "stage {i}: projection {ps}->{pt} cannot map student width {sc} to teacher width {tc}"
            )));
        }
        if weights.w[i] == 0.0 {
            continue;
        }
        let t = if (th, tw) == (sh, sw) { t.clone() } else { resize_bilinear(t, sh, sw) };
        let tv = g.constant(t);
        let p = g.conv2d(s, proj[2 * i], Some(proj[2 * i + 1]), 1, 0);
        let d = g.sub(tv, p);
        let sq = g.square(d);
        let m = g.mean(sq);
        let term = g.scale(m, weights.w[i]);
        total = Some(match total {
            Some(acc) => g.add(acc, term),
            None => term,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(E::zero())),
    })
}

/// Recorded terms of the distillation objective; skipped terms are `None`.
pub struct MocTerms {
    pub total: Var,
    pub su: Option<Var>,
    pub ss: Option<Var>,
    pub pe: Option<Var>,
    pub align: Option<Var>,
}

/// Values of the distillation objective and its unweighted components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MocBreakdown {
    pub total: f64,
    pub su: Option<f64>,
    pub ss: Option<f64>,
    pub pe: Option<f64>,
    pub align: Option<f64>,
}

impl MocTerms {
    pub fn values<E: Element>(&self, g: &Graph<E>) -> MocBreakdown {
        let v = |x: Option<Var>| x.map(|x| g.value(x).item().as_f64());
        MocBreakdown {
            total: g.value(self.total).item().as_f64(),
            su: v(self.su),
            ss: v(self.ss),
            pe: v(self.pe),
            align: v(self.align),
        }
    }
}

/// Everything the distillation objective needs besides the images.
pub struct MocSpec<'a, E: Element> {
    pub weights: LossWeights,
    pub align: &'a AlignWeights,
    pub ssim: SsimConfig,
    pub extractor: Option<&'a dyn FeatureExtractor<E>>,
}

/// `l_su * L1 + l_ss * (1 - SSIM) + l_pe * perceptual + L_a`, skipping
/// terms whose weight is zero.
pub fn moc_graph<E: Element>(
    g: &mut Graph<E>,
    out: Var,
    target: Var,
    teacher_taps: &[Tensor<E>],
    student_taps: &[Var],
    proj: &[Var],
    spec: &MocSpec<'_, E>,
) -> Result<MocTerms> {
    spec.weights.validate()?;
    let mut terms: Vec<Var> = Vec::new();
    let mut weighted = |g: &mut Graph<E>, v: Var, w: f64| terms.push(g.scale(v, w));
    let su = if spec.weights.lambda_su > 0.0 {
        let v = l1_graph(g, out, target)?;
        weighted(g, v, spec.weights.lambda_su);
        Some(v)
    } else {
        None
    };
    let ss = if spec.weights.lambda_ss > 0.0 {
        let v = ssim_graph(g, out, target, &spec.ssim)?;
        weighted(g, v, spec.weights.lambda_ss);
        Some(v)
    } else {
        None
    };
    let pe = if spec.weights.lambda_pe > 0.0 {
        let ex = spec
            .extractor
            .ok_or_else(|| Error::Config("perceptual weight is positive but no extractor was given".into()))?;
        let v = perceptual_graph(g, out, target, ex)?;
        weighted(g, v, spec.weights.lambda_pe);
        Some(v)
    } else {
        None
    };
    let align = if spec.align.is_zero() {
        spec.align.validate(student_taps.len())?;
        None
    } else {
        let v = context_align_graph(g, teacher_taps, student_taps, proj, spec.align)?;
        terms.push(v);
        Some(v)
    };
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    Ok(MocTerms { total, su, ss, pe, align })
}

pub fn l1_loss<E: Element>(pred: &Tensor<E>, target: &Tensor<E>) -> Result<f64> {
    let mut g = Graph::new();
    let (p, t) = (g.constant(pred.clone()), g.constant(target.clone()));
    let v = l1_graph(&mut g, p, t)?;
    Ok(g.value(v).item().as_f64())
}

pub fn ssim_loss<E: Element>(pred: &Tensor<E>, target: &Tensor<E>) -> Result<f64> {
    ssim_loss_with(pred, target, &SsimConfig::default())
}

pub fn ssim_loss_with<E: Element>(pred: &Tensor<E>, target: &Tensor<E>, cfg: &SsimConfig) -> Result<f64> {
    let mut g = Graph::new();
    let (p, t) = (g.constant(pred.clone()), g.constant(target.clone()));
    let v = ssim_graph(&mut g, p, t, cfg)?;
    Ok(g.value(v).item().as_f64())
}

pub fn perceptual_loss<E: Element>(
    pred: &Tensor<E>,
    target: &Tensor<E>,
    extractor: &dyn FeatureExtractor<E>,
) -> Result<f64> {
    let mut g = Graph::new();
    let (p, t) = (g.constant(pred.clone()), g.constant(target.clone()));
    let v = perceptual_graph(&mut g, p, t, extractor)?;
    Ok(g.value(v).item().as_f64())
}

pub fn context_align_loss<E: Element>(
    teacher: &FeatureTaps<E>,
    student: &FeatureTaps<E>,
    weights: &AlignWeights,
    projections: &AlignProjections<E>,
) -> Result<f64> {
    let mut g = Graph::new();
    let s: Vec<Var> = student.per_stage.iter().map(|t| g.constant(t.clone())).collect();
    let p = projections.bind(&mut g, false);
    let v = context_align_graph(&mut g, &teacher.per_stage, &s, &p, weights)?;
    Ok(g.value(v).item().as_f64())
}

pub fn moc_loss<E: Element>(
    student_out: &Tensor<E>,
    target: &Tensor<E>,
    teacher_taps: &FeatureTaps<E>,
    student_taps: &FeatureTaps<E>,
    projections: &AlignProjections<E>,
    spec: &MocSpec<'_, E>,
) -> Result<MocBreakdown> {
    let mut g = Graph::new();
    let (o, t) = (g.constant(student_out.clone()), g.constant(target.clone()));
    let s: Vec<Var> = student_taps.per_stage.iter().map(|x| g.constant(x.clone())).collect();
    let p = projections.bind(&mut g, false);
    let terms = moc_graph(&mut g, o, t, &teacher_taps.per_stage, &s, &p, spec)?;
    Ok(terms.values(&g))
}
