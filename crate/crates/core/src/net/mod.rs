//! Encoder-decoder dehazing networks with per-stage feature taps.

pub mod checkpoint;
mod config;
mod model;
mod params;

pub use config::{ConvSpec, NetConfig, Role};
pub use model::{Dehazer, EncoderExtractor, FeatureExtractor, FeatureTaps, IdentityDehazer, ModelHandle};
pub use params::ParamSet;

use hazekit_tape::{Element, Tensor};

/// Bilinear resize of an NCHW tensor with half-pixel centres.
pub fn resize_bilinear<E: Element>(x: &Tensor<E>, height: usize, width: usize) -> Tensor<E> {
    let [n, c, h, w] = x.dims4();
    if (h, w) == (height, width) {
        return x.clone();
    }
    let coord = |o: usize, src: usize, dst: usize| {
        let s = ((o as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src - 1);
        (i0, i1, s - i0 as f64)
    };
    let ys: Vec<_> = (0..height).map(|o| coord(o, h, height)).collect();
    let xs: Vec<_> = (0..width).map(|o| coord(o, w, width)).collect();
    let mut out = Vec::with_capacity(n * c * height * width);
    for plane in x.data().chunks(h * w) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let at = |y: usize, x: usize| plane[y * w + x].as_f64();
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(E::of(top * (1.0 - fy) + bottom * fy));
            }
        }
    }
    Tensor::new(vec![n, c, height, width], out)
}
