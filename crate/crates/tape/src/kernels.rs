//! Raw NCHW kernels shared by the forward and backward passes.

use crate::{Element, Tensor};

/// Geometry of a batched 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_pixels(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds `x` into a `[C*k*k, N*Ho*Wo]` patch matrix.
fn im2col<E: Element>(x: &[E], g: &ConvGeom, cols: &mut [E]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    let ncols = g.batch * plane;
    let (h, w, k, s) = (g.height as isize, g.width as isize, g.kernel, g.stride as isize);
    let pad = g.pad as isize;
    for c in 0..g.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let src = &x[(b * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                    let dst = &mut dst_row[b * plane..(b + 1) * plane];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - pad;
                        let out = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h {
                            out.fill(E::zero());
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - pad;
                            *o = if ix < 0 || ix >= w { E::zero() } else { src_row[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Folds a patch-matrix gradient back onto the input, accumulating.
fn col2im<E: Element>(cols: &[E], g: &ConvGeom, dx: &mut [E]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    let ncols = g.batch * plane;
    let (h, w, k, s) = (g.height as isize, g.width as isize, g.kernel, g.stride as isize);
    let pad = g.pad as isize;
    for c in 0..g.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let dst = &mut dx[(b * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                    let src = &src_row[b * plane..(b + 1) * plane];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - pad;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                        for (ox, &v) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                            let ix = ox as isize * s + kx as isize - pad;
                            if ix >= 0 && ix < w {
                                dst_row[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<E: Element>(x: &Tensor<E>, w: &Tensor<E>, b: Option<&Tensor<E>>, g: &ConvGeom) -> Tensor<E> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    let ncols = g.batch * plane;
    let mut cols = vec![E::zero(); g.patch_len() * ncols];
    im2col(x.data(), g, &mut cols);
    let mut tmp = vec![E::zero(); g.out_channels * ncols];
    E::gemm(g.out_channels, g.patch_len(), ncols, E::one(), w.data(), false, &cols, false, E::zero(), &mut tmp);
    let mut out = vec![E::zero(); g.batch * g.out_channels * plane];
    for co in 0..g.out_channels {
        let bias = b.map_or(E::zero(), |b| b.data()[co]);
        let src = &tmp[co * ncols..(co + 1) * ncols];
        for bi in 0..g.batch {
            let dst = &mut out[(bi * g.out_channels + co) * plane..][..plane];
            for (d, &s) in dst.iter_mut().zip(&src[bi * plane..(bi + 1) * plane]) {
                *d = s + bias;
            }
        }
    }
    Tensor::new(vec![g.batch, g.out_channels, ho, wo], out)
}

/// Gradients of a convolution. Each requested gradient is returned freshly
/// allocated; unrequested ones are skipped entirely.
pub struct ConvGrads<E> {
    pub dx: Option<Tensor<E>>,
    pub dw: Option<Tensor<E>>,
    pub db: Option<Tensor<E>>,
}

pub fn conv2d_backward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    dy: &Tensor<E>,
    g: &ConvGeom,
    want: (bool, bool, bool),
) -> ConvGrads<E> {
    let plane = g.out_pixels();
    let ncols = g.batch * plane;
    let mut dym = vec![E::zero(); g.out_channels * ncols];
    for co in 0..g.out_channels {
        let dst = &mut dym[co * ncols..(co + 1) * ncols];
        for bi in 0..g.batch {
            dst[bi * plane..(bi + 1) * plane]
                .copy_from_slice(&dy.data()[(bi * g.out_channels + co) * plane..][..plane]);
        }
    }
    let (want_dx, want_dw, want_db) = want;
    let dw = want_dw.then(|| {
        let mut cols = vec![E::zero(); g.patch_len() * ncols];
        im2col(x.data(), g, &mut cols);
        let mut dw = vec![E::zero(); g.out_channels * g.patch_len()];
        E::gemm(g.out_channels, ncols, g.patch_len(), E::one(), &dym, false, &cols, true, E::zero(), &mut dw);
        Tensor::new(w.shape().to_vec(), dw)
    });
    let db = want_db.then(|| {
        let sums = (0..g.out_channels).map(|co| dym[co * ncols..(co + 1) * ncols].iter().copied().sum()).collect();
        Tensor::new(vec![g.out_channels], sums)
    });
    let dx = want_dx.then(|| {
        let mut dcols = vec![E::zero(); g.patch_len() * ncols];
        E::gemm(g.patch_len(), g.out_channels, ncols, E::one(), w.data(), true, &dym, false, E::zero(), &mut dcols);
        let mut dx = vec![E::zero(); x.numel()];
        col2im(&dcols, g, &mut dx);
        Tensor::new(x.shape().to_vec(), dx)
    });
    ConvGrads { dx, dw, db }
}

pub fn upsample2x<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let [n, c, h, w] = x.dims4();
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![E::zero(); n * c * h2 * w2];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            let s = &src[(y / 2) * w..(y / 2 + 1) * w];
            for (xx, d) in dst[y * w2..(y + 1) * w2].iter_mut().enumerate() {
                *d = s[xx / 2];
            }
        }
    }
    Tensor::new(vec![n, c, h2, w2], out)
}

pub fn upsample2x_backward<E: Element>(dy: &Tensor<E>) -> Tensor<E> {
    let [n, c, h2, w2] = dy.dims4();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = vec![E::zero(); n * c * h * w];
    for p in 0..n * c {
        let src = &dy.data()[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Valid-region correlation of every row (`along_width`) or column with `kernel`.
pub fn blur_valid<E: Element>(x: &Tensor<E>, kernel: &[E], along_width: bool) -> Tensor<E> {
    let [n, c, h, w] = x.dims4();
    let k = kernel.len();
    let (ho, wo) = if along_width { (h, w + 1 - k) } else { (h + 1 - k, w) };
    let mut out = vec![E::zero(); n * c * ho * wo];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                let mut acc = E::zero();
                for (t, &kv) in kernel.iter().enumerate() {
                    let v = if along_width { src[y * w + xx + t] } else { src[(y + t) * w + xx] };
                    acc += kv * v;
                }
                dst[y * wo + xx] = acc;
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

pub fn blur_valid_backward<E: Element>(
    dy: &Tensor<E>,
    kernel: &[E],
    along_width: bool,
    input_shape: &[usize],
) -> Tensor<E> {
    let [n, c, h, w] = [input_shape[0], input_shape[1], input_shape[2], input_shape[3]];
    let [_, _, ho, wo] = dy.dims4();
    let mut dx = vec![E::zero(); n * c * h * w];
    for p in 0..n * c {
        let src = &dy.data()[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let gv = src[y * wo + xx];
                for (t, &kv) in kernel.iter().enumerate() {
                    let idx = if along_width { y * w + xx + t } else { (y + t) * w + xx };
                    dst[idx] += kv * gv;
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, g: &ConvGeom) -> Tensor<f64> {
        let (ho, wo) = (g.out_height(), g.out_width());
        let mut out = Tensor::zeros(vec![g.batch, g.out_channels, ho, wo]);
        let k = g.kernel;
        for n in 0..g.batch {
            for co in 0..g.out_channels {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data()[co];
                        for ci in 0..g.in_channels {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < g.height && (ix as usize) < g.width {
                                        acc += w.data()[((co * g.in_channels + ci) * k + ky) * k + kx]
                                            * x.at4(n, ci, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        out.data_mut()[((n * g.out_channels + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            let g = ConvGeom { batch: 2, in_channels: 3, height: 6, width: 6, out_channels: 4, kernel: k, stride, pad };
            let x = Tensor::new(vec![2, 3, 6, 6], (0..216).map(|i| ((i * 7 % 13) as f64) / 13.0 - 0.4).collect());
            let w =
                Tensor::new(vec![4, 3, k, k], (0..4 * 3 * k * k).map(|i| ((i * 5 % 11) as f64) / 11.0 - 0.5).collect());
            let b = Tensor::new(vec![4], vec![0.1, -0.2, 0.3, 0.0]);
            let fast = conv2d_forward(&x, &w, Some(&b), &g);
            let slow = direct_conv(&x, &w, &b, &g);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let dy = Tensor::<f64>::full(vec![1, 1, 4, 4], 1.0);
        let dx = upsample2x_backward(&dy);
        assert_eq!(dx.data(), &[4.0; 4]);
    }
}
