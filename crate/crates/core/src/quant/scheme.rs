//! Quantization scheme descriptors.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

/// Default zero-substitution constant used by the sign binarizer.
pub const DEFAULT_EPS: f32 = 1e-6;

/// Default static clipping fraction for the clipped experiment presets.
pub const DEFAULT_CLIP: f32 = 0.95;

/// How weights are mapped to integer codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// Sign codes in {-1, +1} with a per-group mean-absolute-value scale.
    /// Only valid at 1 bit.
    AbsmeanSymmetric,
    /// Affine codes in `0..2^bits` with a per-group (scale, zero-point)
    /// derived from the group min/max range.
    AbsmaxAsymmetric,
}

/// Scale grouping: one scale per weight channel, or per fixed-size block
/// after splitting each channel into sub-channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerChannel,
    SubChannel { block_size: usize },
}

/// Full description of one quantization configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantScheme {
    /// Code width per weight, 1 or 2.
    pub bits: u8,
    pub mode: QuantMode,
    pub granularity: Granularity,
    /// Static clip fraction in (0, 1]; the group range endpoints are scaled
    /// by this factor before code assignment. 1.0 disables clipping.
    pub clip: f32,
    /// Zero-substitution constant: exact zeros become `+eps` before the sign
    /// step so codes are always -1 or +1.
    pub eps: f32,
}

impl QuantScheme {
    /// 1-bit absmean binarization, one scale per channel.
    pub fn absmean1() -> Self {
        Self {
            bits: 1,
            mode: QuantMode::AbsmeanSymmetric,
            granularity: Granularity::PerChannel,
            clip: 1.0,
            eps: DEFAULT_EPS,
        }
    }

    /// 1-bit absmean binarization with sub-channel blocks.
    pub fn absmean1_block(block_size: usize) -> Self {
        Self {
            granularity: Granularity::SubChannel { block_size },
            ..Self::absmean1()
        }
    }

    /// Asymmetric absmax quantization at the given width, per channel.
    pub fn absmax_asym(bits: u8) -> Self {
        Self {
            bits,
            mode: QuantMode::AbsmaxAsymmetric,
            granularity: Granularity::PerChannel,
            clip: 1.0,
            eps: DEFAULT_EPS,
        }
    }

    /// 2-bit asymmetric per-channel quantization (experiment preset `e1`).
    pub fn e1() -> Self {
        Self::absmax_asym(2)
    }

    /// 2-bit asymmetric quantization with static clipping and block-64
    /// sub-channel split (experiment preset `e2`).
    pub fn e2() -> Self {
        Self {
            granularity: Granularity::SubChannel { block_size: 64 },
            clip: DEFAULT_CLIP,
            ..Self::absmax_asym(2)
        }
    }

    /// 1-bit asymmetric quantization with static clipping (experiment
    /// preset `e3`).
    pub fn e3() -> Self {
        Self {
            clip: DEFAULT_CLIP,
            ..Self::absmax_asym(1)
        }
    }

    /// 1-bit per-channel absmean binarization (experiment preset `e4`).
    pub fn e4() -> Self {
        Self::absmean1()
    }

    /// 1-bit absmean binarization with block-64 sub-channel split
    /// (experiment preset `e5`).
    pub fn e5() -> Self {
        Self::absmean1_block(64)
    }

    /// Parse a scheme name: an experiment alias (`e1`..`e5`) or an explicit
    /// name (`absmean1`, `absmax1`/`asym1`, `absmax2`/`asym2`).
    pub fn parse(name: &str) -> Result<Self> {
        let scheme = match name.to_ascii_lowercase().as_str() {
            "e1" => Self::e1(),
            "e2" => Self::e2(),
            "e3" => Self::e3(),
            "e4" => Self::e4(),
            "e5" => Self::e5(),
            "absmean1" => Self::absmean1(),
            "absmax1" | "asym1" => Self::absmax_asym(1),
            "absmax2" | "asym2" => Self::absmax_asym(2),
            other => {
                return Err(Error::InvalidScheme(format!(
                    "unknown scheme name `{other}` \
                     (valid: e1..e5, absmean1, absmax1, asym1, absmax2, asym2)"
                )))
            }
        };
        Ok(scheme)
    }

    /// Switch the grouping to sub-channel blocks of `block_size`.
    pub fn with_block(mut self, block_size: usize) -> Self {
        self.granularity = Granularity::SubChannel { block_size };
        self
    }

    /// Set the static clip fraction.
    pub fn with_clip(mut self, clip: f32) -> Self {
        self.clip = clip;
        self
    }

    pub fn block_size(&self) -> Option<usize> {
        match self.granularity {
            Granularity::PerChannel => None,
            Granularity::SubChannel { block_size } => Some(block_size),
        }
    }

    /// Number of code levels, `2^bits`.
    pub fn levels(&self) -> u8 {
        1 << self.bits
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits != 1 && self.bits != 2 {
            return Err(Error::InvalidScheme(format!(
                "bits must be 1 or 2, got {}",
                self.bits
            )));
        }
        if self.mode == QuantMode::AbsmeanSymmetric && self.bits != 1 {
            return Err(Error::InvalidScheme(
                "absmean binarization requires bits = 1".into(),
            ));
        }
        if let Granularity::SubChannel { block_size } = self.granularity {
            if block_size == 0 {
                return Err(Error::InvalidScheme("block_size must be >= 1".into()));
            }
        }
        if !(self.clip > 0.0 && self.clip <= 1.0) {
            return Err(Error::InvalidScheme(format!(
                "clip must be in (0, 1], got {}",
                self.clip
            )));
        }
        if !self.eps.is_finite() || self.eps <= 0.0 {
            return Err(Error::InvalidScheme(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

impl fmt::Display for QuantScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            QuantMode::AbsmeanSymmetric => "absmean",
            QuantMode::AbsmaxAsymmetric => "asym",
        };
        write!(f, "{mode}{}", self.bits)?;
        match self.granularity {
            Granularity::PerChannel => write!(f, "-pc")?,
            Granularity::SubChannel { block_size } => write!(f, "-b{block_size}")?,
        }
        if self.clip < 1.0 {
            write!(f, "-c{}", self.clip)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aliases_match_experiment_definitions() {
        assert_eq!(
            QuantScheme::parse("e1").unwrap(),
            QuantScheme::absmax_asym(2)
        );
        let e2 = QuantScheme::parse("e2").unwrap();
        assert_eq!(e2.bits, 2);
        assert_eq!(e2.block_size(), Some(64));
        assert!(e2.clip < 1.0);
        let e3 = QuantScheme::parse("E3").unwrap();
        assert_eq!((e3.bits, e3.mode), (1, QuantMode::AbsmaxAsymmetric));
        assert_eq!(QuantScheme::parse("e4").unwrap(), QuantScheme::absmean1());
        assert_eq!(
            QuantScheme::parse("e5").unwrap(),
            QuantScheme::absmean1_block(64)
        );
    }

    #[test]
    fn absmean_requires_one_bit() {
        let mut s = QuantScheme::absmean1();
        s.bits = 2;
        assert!(s.validate().is_err());
    }

    #[test]
    fn unknown_name_rejected() {
        assert!(QuantScheme::parse("int8").is_err());
    }

    #[test]
    fn display_is_compact() {
        assert_eq!(QuantScheme::e5().to_string(), "absmean1-b64");
        assert_eq!(QuantScheme::e1().to_string(), "asym2-pc");
    }
}
