//! Explicit-loop reference implementations shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use hazekit_tape::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(shape.to_vec(), (0..shape.iter().product()).map(|_| rng.random::<f64>()).collect())
}

pub fn l1(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let [n, c, h, w] = a.dims4();
    let mut total = 0.0;
    for i in 0..n {
        for k in 0..c {
            for y in 0..h {
                for x in 0..w {
                    total += (a.at4(i, k, y, x) - b.at4(i, k, y, x)).abs();
                }
            }
        }
    }
    total / (n * c * h * w) as f64
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `1 - mean SSIM` with a `window x window` Gaussian computed directly in two
/// dimensions and statistics accumulated pixel by pixel.
pub fn ssim_loss(a: &Tensor<f64>, b: &Tensor<f64>, window: usize, sigma: f64) -> f64 {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let centre = (window as f64 - 1.0) / 2.0;
    let mut weights = vec![vec![0.0; window]; window];
    let mut total = 0.0;
    for (u, row) in weights.iter_mut().enumerate() {
        for (v, w) in row.iter_mut().enumerate() {
            let d2 = (u as f64 - centre).powi(2) + (v as f64 - centre).powi(2);
            *w = (-d2 / (2.0 * sigma * sigma)).exp();
            total += *w;
        }
    }
    let [n, c, h, w] = a.dims4();
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for k in 0..c {
            for y in 0..=h - window {
                for x in 0..=w - window {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for u in 0..window {
                        for v in 0..window {
                            let wt = weights[u][v] / total;
                            let p = a.at4(i, k, y + u, x + v);
                            let q = b.at4(i, k, y + u, x + v);
                            mx += wt * p;
                            my += wt * q;
                            sxx += wt * p * p;
                            syy += wt * q * q;
                            sxy += wt * p * q;
                        }
                    }
                    let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                    sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
        }
    }
    1.0 - sum / count as f64
}

/// `sum_i w_i * mean((T_i - (P_i S_i + b_i))^2)` with the 1x1 projection
/// written out channel by channel. Taps must share spatial size.
pub fn align_loss(
    teacher: &[Tensor<f64>],
    student: &[Tensor<f64>],
    proj: &[(Tensor<f64>, Tensor<f64>)],
    weights: &[f64],
) -> f64 {
    let mut total = 0.0;
    for (((t, s), (pw, pb)), wi) in teacher.iter().zip(student).zip(proj).zip(weights) {
        let [n, tc, h, w] = t.dims4();
        let sc = s.dims4()[1];
        let mut acc = 0.0;
        for i in 0..n {
            for o in 0..tc {
                for y in 0..h {
                    for x in 0..w {
                        let mut p = pb.data()[o];
                        for k in 0..sc {
                            p += pw.data()[o * sc + k] * s.at4(i, k, y, x);
                        }
                        acc += (t.at4(i, o, y, x) - p).powi(2);
                    }
                }
            }
        }
        total += wi * acc / (n * tc * h * w) as f64;
    }
    total
}
