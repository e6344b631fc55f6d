use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of an encoder-decoder dehazing network.
///
/// Encoder stage `i` runs at `1 / 2^i` of the input resolution and is tapped
/// for feature alignment; decoder stage `i` fuses the upsampled stage `i + 1`
/// with the encoder skip at the same resolution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    #[serde(default = "two")]
    pub downsample_factor: usize,
}

fn two() -> usize {
    2
}

impl NetConfig {
    pub fn teacher() -> Self {
        Self {
            encoder_widths: vec![32, 64, 128, 256],
            decoder_widths: vec![32, 64, 128, 256],
            blocks_per_stage: 2,
            downsample_factor: 2,
        }
    }

    pub fn student() -> Self {
        Self {
            encoder_widths: vec![8, 16, 32, 64],
            decoder_widths: vec![8, 16, 32, 64],
            blocks_per_stage: 1,
            downsample_factor: 2,
        }
    }

    /// Same widths for encoder and decoder.
    pub fn symmetric(widths: &[usize], blocks_per_stage: usize) -> Self {
        Self {
            encoder_widths: widths.to_vec(),
            decoder_widths: widths.to_vec(),
            blocks_per_stage,
            downsample_factor: 2,
        }
    }

    pub fn stages(&self) -> usize {
        self.encoder_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.is_empty() {
            return Err(Error::Config("at least one encoder stage is required".into()));
        }
        if self.encoder_widths.len() != self.decoder_widths.len() {
            return Err(Error::Config(format!(
                "{} encoder widths but {} decoder widths",
                self.encoder_widths.len(),
                self.decoder_widths.len()
            )));
        }
        if self.encoder_widths.iter().chain(&self.decoder_widths).any(|&w| w == 0) {
            return Err(Error::Config("all widths must be at least 1".into()));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be at least 1".into()));
        }
        if self.downsample_factor != 2 {
            return Err(Error::Config(format!("downsample_factor must be 2, got {}", self.downsample_factor)));
        }
        Ok(())
    }

    /// Spatial dims must be divisible by `2^(L-1)`.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Dimension(format!("expected [batch, 3, height, width], got {shape:?}")));
        }
        let q = 1usize << (self.stages() - 1);
        if shape[0] == 0 || shape[2] == 0 || shape[3] == 0 || !shape[2].is_multiple_of(q) || !shape[3].is_multiple_of(q)
        {
            return Err(Error::Dimension(format!(
                "spatial dims {}x{} must be positive multiples of {q}",
                shape[2], shape[3]
            )));
        }
        Ok(())
    }

    /// Every convolution in execution order, which is also parameter order.
    pub fn layout(&self) -> Vec<ConvSpec> {
        let mut convs = Vec::new();
        let blocks = |convs: &mut Vec<ConvSpec>, prefix: &str, width: usize| {
            for j in 0..self.blocks_per_stage {
                convs.push(ConvSpec::new(format!("{prefix}.block.{j}.conv1"), width, width, 3, 1));
                convs.push(ConvSpec::new(format!("{prefix}.block.{j}.conv2"), width, width, 3, 1));
            }
        };
        let mut prev = 3;
        for (i, &w) in self.encoder_widths.iter().enumerate() {
            let (name, stride) = if i == 0 { ("stem", 1) } else { ("down", 2) };
            convs.push(ConvSpec::new(format!("enc.{i}.{name}"), prev, w, 3, stride));
            blocks(&mut convs, &format!("enc.{i}"), w);
            prev = w;
        }
        let last = self.stages() - 1;
        for i in (0..=last).rev() {
            let input =
                if i == last { self.encoder_widths[i] } else { self.decoder_widths[i + 1] + self.encoder_widths[i] };
            convs.push(ConvSpec::new(format!("dec.{i}.fuse"), input, self.decoder_widths[i], 3, 1));
            blocks(&mut convs, &format!("dec.{i}"), self.decoder_widths[i]);
        }
        convs.push(ConvSpec::new("head".into(), self.decoder_widths[0], 3, 3, 1));
        convs
    }
}

/// One square convolution with bias and "same" padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn new(name: String, in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self { name, in_channels, out_channels, kernel, stride }
    }

    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn param_count(&self) -> u64 {
        (self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels) as u64
    }

    /// Output spatial size for an input of `height x width`.
    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let out = |n: usize| (n + 2 * self.pad() - self.kernel) / self.stride + 1;
        (out(height), out(width))
    }

    /// `2 * MAC` for one image of `height x width`; bias adds are not counted.
    pub fn flops(&self, height: usize, width: usize) -> u64 {
        let (ho, wo) = self.output_size(height, width);
        2 * (self.in_channels * self.kernel * self.kernel) as u64 * self.out_channels as u64 * (ho * wo) as u64
    }
}

/// Which parameter set of the training flow a model holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Teacher,
    StudentSyn,
    StudentRea,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::StudentSyn => "student-syn",
            Role::StudentRea => "student-rea",
        }
    }
}

impl std::str::FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Role::Teacher),
            "student-syn" => Ok(Role::StudentSyn),
            "student-rea" => Ok(Role::StudentRea),
            other => Err(Error::Input(format!("unknown role {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_conv_accounting() {
        let c = ConvSpec::new("c".into(), 3, 8, 3, 1);
        assert_eq!(c.param_count(), 224);
        assert_eq!(c.flops(8, 8), 27_648);
        assert_eq!(c.flops(16, 16), 4 * 27_648);
    }

    #[test]
    fn stride_two_halves_resolution() {
        let c = ConvSpec::new("c".into(), 4, 4, 3, 2);
        assert_eq!(c.output_size(16, 8), (8, 4));
    }

    #[test]
    fn validation() {
        assert!(NetConfig::teacher().validate().is_ok());
        assert!(NetConfig::student().validate().is_ok());
        let mut c = NetConfig::student();
        c.decoder_widths.pop();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = NetConfig::student();
        c.blocks_per_stage = 0;
        assert!(c.validate().is_err());
        let mut c = NetConfig::student();
        c.encoder_widths[2] = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn input_divisibility() {
        let c = NetConfig::student();
        assert!(c.check_input(&[1, 3, 64, 64]).is_ok());
        assert!(matches!(c.check_input(&[1, 3, 60, 64]), Err(Error::Dimension(_))));
        assert!(c.check_input(&[1, 1, 64, 64]).is_err());
    }

    #[test]
    fn role_names_round_trip() {
        for r in [Role::Teacher, Role::StudentSyn, Role::StudentRea] {
            assert_eq!(r.as_str().parse::<Role>().unwrap(), r);
            assert_eq!(serde_json::to_string(&r).unwrap(), format!("\"{}\"", r.as_str()));
        }
    }
}
