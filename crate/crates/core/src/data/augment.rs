//! Paired geometric augmentation: quarter-turn rotation, horizontal flip and
//! a square crop, drawn once and applied identically to both images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Image;
use crate::error::{Error, Result};
use hazekit_tape::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Transform {
    /// Counter-clockwise rotation in multiples of 90 degrees, `0..4`.
    pub quarter_turns: u8,
    pub flip: bool,
    pub top: usize,
    pub left: usize,
    pub crop: usize,
}

impl Transform {
    /// No rotation, no flip, crop covering the whole `size x size` frame.
    pub fn identity(size: usize) -> Self {
        Self { quarter_turns: 0, flip: false, top: 0, left: 0, crop: size }
    }

    pub fn sample(rng: &mut impl Rng, height: usize, width: usize, crop: usize) -> Result<Self> {
        if crop == 0 || crop > height || crop > width {
            return Err(Error::Input(format!("crop {crop} does not fit a {height}x{width} image")));
        }
        let quarter_turns = rng.random_range(0..4u8);
        let flip = rng.random_bool(0.5);
        let (h, w) = if quarter_turns % 2 == 1 { (width, height) } else { (height, width) };
        let top = rng.random_range(0..=h - crop);
        let left = rng.random_range(0..=w - crop);
        Ok(Self { quarter_turns, flip, top, left, crop })
    }

    /// Applies the transform to every image of a rank-4 batch.
    pub fn apply<E: Element>(&self, img: &Tensor<E>) -> Result<Tensor<E>> {
        let [n, c, h, w] = img.dims4();
        let (rh, rw) = if self.quarter_turns % 2 == 1 { (w, h) } else { (h, w) };
        if self.top + self.crop > rh || self.left + self.crop > rw {
            return Err(Error::Input(format!(
                "crop {} at ({}, {}) exceeds the {}x{} rotated frame",
                self.crop, self.top, self.left, rh, rw
            )));
        }
        let k = self.crop;
        let mut out = Vec::with_capacity(n * c * k * k);
        for plane in img.data().chunks(h * w) {
            for oy in 0..k {
                for ox in 0..k {
                    // position in the rotated + flipped frame
                    let ry = oy + self.top;
                    let mut rx = ox + self.left;
                    if self.flip {
                        rx = rw - 1 - rx;
                    }
                    let (sy, sx) = match self.quarter_turns % 4 {
                        0 => (ry, rx),
                        1 => (rx, w - 1 - ry),
                        2 => (h - 1 - ry, w - 1 - rx),
                        _ => (h - 1 - rx, ry),
                    };
                    out.push(plane[sy * w + sx]);
                }
            }
        }
        Ok(Tensor::new(vec![n, c, k, k], out))
    }
}

/// Draws one transform from `seed` and applies it to both images.
pub fn augment(hazy: &Image, clean: &Image, seed: u64, crop: usize) -> Result<(Image, Image)> {
    if hazy.shape() != clean.shape() {
        return Err(Error::Dimension(format!(
            "paired images differ in shape: {:?} vs {:?}",
            hazy.shape(),
            clean.shape()
        )));
    }
    let [_, _, h, w] = hazy.dims4();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Transform::sample(&mut rng, h, w, crop)?;
    Ok((t.apply(hazy)?, t.apply(clean)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        Tensor::new(vec![1, 3, h, w], (0..3 * h * w).map(|i| i as f32).collect())
    }

    #[test]
    fn identity_returns_input() {
        let img = ramp(5, 5);
        assert_eq!(Transform::identity(5).apply(&img).unwrap(), img);
    }

    #[test]
    fn half_turn_twice_is_identity() {
        let img = ramp(4, 4);
        let t = Transform { quarter_turns: 2, flip: false, top: 0, left: 0, crop: 4 };
        assert_eq!(t.apply(&t.apply(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn quarter_turn_four_times_is_identity() {
        let img = ramp(3, 3);
        let t = Transform { quarter_turns: 1, flip: false, top: 0, left: 0, crop: 3 };
        let mut x = img.clone();
        for _ in 0..4 {
            x = t.apply(&x).unwrap();
        }
        assert_eq!(x, img);
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        let img: Image = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let t = Transform { quarter_turns: 1, flip: false, top: 0, left: 0, crop: 2 };
        // [[1,2],[3,4]] rotated CCW is [[2,4],[1,3]]
        assert_eq!(t.apply(&img).unwrap().data(), &[2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn crop_larger_than_image_is_input_error() {
        let img = ramp(4, 4);
        assert!(matches!(augment(&img, &img, 0, 5), Err(Error::Input(_))));
    }

    #[test]
    fn same_image_twice_stays_identical() {
        let img = ramp(9, 9);
        for seed in 0..20 {
            let (a, b) = augment(&img, &img, seed, 6).unwrap();
            assert_eq!(a, b);
        }
    }
}
