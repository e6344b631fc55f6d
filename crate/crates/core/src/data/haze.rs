//! Atmospheric scattering: `I = J t + A (1 - t)` with `t = exp(-beta * depth)`.

use hazekit_tape::Tensor;

use super::Image;
use crate::error::{Error, Result};

/// Row-major `height x width` field of nonnegative values.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Dimension(format!(
                "field of {}x{} needs {} values, got {}",
                height,
                width,
                height * width,
                values.len()
            )));
        }
        Ok(Self { height, width, values })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, values: vec![value; height * width] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HazeParams {
    airlight: [f64; 3],
    beta: f64,
    depth: ScalarField,
}

impl HazeParams {
    /// Validates airlight in `[0, 1]`, `beta >= 0` and a finite nonnegative depth map.
    pub fn new(airlight: [f64; 3], beta: f64, depth: ScalarField) -> Result<Self> {
        if airlight.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Input(format!("airlight {airlight:?} outside [0, 1]")));
        }
        if !beta.is_finite() || beta < 0.0 {
            return Err(Error::Input(format!("scattering coefficient {beta} must be finite and nonnegative")));
        }
        if depth.values.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::Input("depth map must be finite and nonnegative".into()));
        }
        Ok(Self { airlight, beta, depth })
    }

    pub fn airlight(&self) -> [f64; 3] {
        self.airlight
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn depth(&self) -> &ScalarField {
        &self.depth
    }

    /// Per-pixel transmission, each value in `(0, 1]`.
    pub fn transmission(&self) -> ScalarField {
        let values = self.depth.values.iter().map(|d| (-self.beta * d).exp()).collect();
        ScalarField { height: self.depth.height, width: self.depth.width, values }
    }
}

/// Blends `clean` towards `airlight` by `1 - transmission`, clipping to `[0, 1]`.
pub fn apply_scattering(clean: &Image, airlight: [f64; 3], transmission: &ScalarField) -> Result<Image> {
    let [n, c, h, w] = clean.dims4();
    if n != 1 || c != 3 {
        return Err(Error::Dimension(format!("expected a single RGB image, got {:?}", clean.shape())));
    }
    if (transmission.height, transmission.width) != (h, w) {
        return Err(Error::Dimension(format!(
            "depth map is {}x{} but image is {}x{}",
            transmission.height, transmission.width, h, w
        )));
    }
    let plane = h * w;
    let mut out = clean.data().to_vec();
    for (ch, a) in airlight.iter().enumerate() {
        for (px, t) in out[ch * plane..(ch + 1) * plane].iter_mut().zip(&transmission.values) {
            let v = *px as f64 * t + a * (1.0 - t);
            *px = v.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(Tensor::new(clean.shape().to_vec(), out))
}

pub fn synthesize_haze(clean: &Image, params: &HazeParams) -> Result<Image> {
    apply_scattering(clean, params.airlight, &params.transmission())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(h: usize, w: usize, v: f32) -> Image {
        Tensor::full(vec![1, 3, h, w], v)
    }

    #[test]
    fn zero_scattering_is_identity() {
        let clean = Tensor::new(vec![1, 3, 2, 2], (0..12).map(|i| i as f32 / 12.0).collect());
        let p = HazeParams::new([0.8, 0.9, 1.0], 0.0, ScalarField::constant(2, 2, 1.5)).unwrap();
        assert_eq!(synthesize_haze(&clean, &p).unwrap(), clean);
    }

    #[test]
    fn infinite_depth_gives_airlight() {
        let clean = uniform(3, 3, 0.2);
        let p = HazeParams::new([0.7, 0.8, 0.9], 1.0, ScalarField::constant(3, 3, 1e6)).unwrap();
        let out = synthesize_haze(&clean, &p).unwrap();
        for (ch, a) in [0.7f32, 0.8, 0.9].iter().enumerate() {
            assert!(out.data()[ch * 9..(ch + 1) * 9].iter().all(|v| v == a));
        }
    }

    #[test]
    fn hand_evaluated_blend() {
        let clean = uniform(2, 2, 0.5);
        // beta * depth = ln 2 gives t = 0.5
        let p = HazeParams::new([1.0; 3], 1.0, ScalarField::constant(2, 2, std::f64::consts::LN_2)).unwrap();
        let out = synthesize_haze(&clean, &p).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.75).abs() < 1e-7));
    }

    #[test]
    fn depth_shape_mismatch_is_a_dimension_error() {
        let p = HazeParams::new([0.8; 3], 1.0, ScalarField::constant(4, 4, 1.0)).unwrap();
        assert!(matches!(synthesize_haze(&uniform(3, 3, 0.1), &p), Err(Error::Dimension(_))));
    }

    #[test]
    fn invalid_parameters_rejected() {
        let d = ScalarField::constant(1, 1, 1.0);
        assert!(HazeParams::new([1.2, 0.8, 0.8], 1.0, d.clone()).is_err());
        assert!(HazeParams::new([0.8; 3], -1.0, d).is_err());
        assert!(HazeParams::new([0.8; 3], 1.0, ScalarField::constant(1, 1, -0.5)).is_err());
    }

    #[test]
    fn transmission_is_monotone_in_beta() {
        let depth = ScalarField::new(1, 4, vec![0.0, 0.5, 1.5, 3.0]).unwrap();
        let t1 = HazeParams::new([0.8; 3], 0.7, depth.clone()).unwrap().transmission();
        let t2 = HazeParams::new([0.8; 3], 1.9, depth).unwrap().transmission();
        for (a, b) in t1.values.iter().zip(&t2.values) {
            assert!(b <= a && *b > 0.0 && *a <= 1.0);
        }
    }
}
