//! Procedural outdoor-like scenes with matching depth maps.
//!
//! Scenes are a sky-to-ground gradient with textured shapes painted far to
//! near. Colours keep their darkest channel at or below [`MAX_DARK_CHANNEL`],
//! so any airlight of at least that brightness strictly raises the dark
//! channel of the hazy rendering.

use rand::Rng;

use super::haze::ScalarField;
use super::Image;
use hazekit_tape::Tensor;

/// Upper bound on `min(r, g, b)` for every generated clean pixel.
pub const MAX_DARK_CHANNEL: f64 = 0.65;

/// Largest value of a generated depth map.
pub const MAX_DEPTH: f64 = 3.0;

/// Smooth field on `[0, 1]`: random values on a coarse `grid x grid` lattice,
/// bilinearly interpolated up to `height x width`.
pub fn smooth_field(height: usize, width: usize, grid: usize, rng: &mut impl Rng) -> ScalarField {
    let grid = grid.max(2);
    let lattice: Vec<f64> = (0..grid * grid).map(|_| rng.random::<f64>()).collect();
    let mut values = Vec::with_capacity(height * width);
    for y in 0..height {
        let gy = y as f64 / (height.max(2) - 1) as f64 * (grid - 1) as f64;
        let y0 = (gy.floor() as usize).min(grid - 2);
        let fy = gy - y0 as f64;
        for x in 0..width {
            let gx = x as f64 / (width.max(2) - 1) as f64 * (grid - 1) as f64;
            let x0 = (gx.floor() as usize).min(grid - 2);
            let fx = gx - x0 as f64;
            let at = |r: usize, c: usize| lattice[r * grid + c];
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            values.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    ScalarField { height, width, values }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Lowers all channels equally until the darkest is at most [`MAX_DARK_CHANNEL`].
fn cap_dark_channel(rgb: [f64; 3]) -> [f64; 3] {
    let dark = rgb.iter().copied().fold(f64::INFINITY, f64::min);
    let shift = (dark - MAX_DARK_CHANNEL).max(0.0);
    rgb.map(|c| (c - shift).clamp(0.0, 1.0))
}

enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Disc { cy: f64, cx: f64, r: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
        }
    }
}

/// A clean scene of `size x size` pixels and its depth map in `[0, MAX_DEPTH]`.
pub fn procedural_scene(size: usize, rng: &mut impl Rng) -> (Image, ScalarField) {
    let s = size as f64;
    let sky = hsv(rng.random_range(185.0..235.0), rng.random_range(0.3..0.6), rng.random_range(0.75..0.95));
    let ground = hsv(rng.random_range(0.0..360.0), rng.random_range(0.5..0.95), rng.random_range(0.25..0.6));
    let horizon = rng.random_range(0.3..0.55);

    let mut rgb = vec![[0.0f64; 3]; size * size];
    let mut depth = vec![0.0f64; size * size];
    let noise = smooth_field(size, size, 5, rng);
    for y in 0..size {
        let v = y as f64 / (s - 1.0).max(1.0);
        for x in 0..size {
            let i = y * size + x;
            if v < horizon {
                let k = v / horizon;
                rgb[i] = [0, 1, 2].map(|c| sky[c] * (1.0 - 0.25 * k) + ground[c] * 0.25 * k);
                depth[i] = MAX_DEPTH;
            } else {
                let k = (v - horizon) / (1.0 - horizon);
                let shade = 1.0 - 0.35 * k;
                rgb[i] = ground.map(|c| c * shade);
                depth[i] = MAX_DEPTH * (1.0 - k) * 0.8 + 0.2 * noise.values[i];
            }
        }
    }

    let count = rng.random_range(3..7);
    let mut shapes: Vec<(f64, Shape, [f64; 3], f64)> = (0..count)
        .map(|_| {
            let d = rng.random_range(0.2..2.6);
            let shape = if rng.random_bool(0.5) {
                let (h, w) = (rng.random_range(0.15..0.5) * s, rng.random_range(0.1..0.45) * s);
                let y0 = rng.random_range(0.1..0.9) * s - h / 2.0;
                let x0 = rng.random_range(0.0..1.0) * s - w / 2.0;
                Shape::Rect { y0, x0, y1: y0 + h, x1: x0 + w }
            } else {
                Shape::Disc {
                    cy: rng.random_range(0.15..0.9) * s,
                    cx: rng.random_range(0.0..1.0) * s,
                    r: rng.random_range(0.06..0.22) * s,
                }
            };
            let color = hsv(rng.random_range(0.0..360.0), rng.random_range(0.55..1.0), rng.random_range(0.3..0.95));
            let period = rng.random_range(2.5..7.0);
            (d, shape, color, period)
        })
        .collect();
    // painter's order: far shapes first
    shapes.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (d, shape, color, period) in &shapes {
        for y in 0..size {
            for x in 0..size {
                if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    let i = y * size + x;
                    let stripe = 0.82 + 0.18 * ((x + y) as f64 * std::f64::consts::PI / period).sin();
                    rgb[i] = color.map(|c| c * stripe);
                    depth[i] = *d;
                }
            }
        }
    }

    let lo = depth.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = depth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    let depth: Vec<f64> = depth.iter().map(|d| (d - lo) / span * MAX_DEPTH).collect();

    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in rgb.iter().enumerate() {
        let px = cap_dark_channel(*px);
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32;
        }
    }
    (Tensor::new(vec![1, 3, size, size], data), ScalarField { height: size, width: size, values: depth })
}
