use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::ssm_nd::MAX_RANK;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    TimeS4Unet,
    TfS4Unet,
    S4ndUnet,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::TimeS4Unet, Variant::TfS4Unet, Variant::S4ndUnet];

    pub fn is_time_domain(self) -> bool {
        self == Variant::TimeS4Unet
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::TimeS4Unet => "time_s4_unet",
            Variant::TfS4Unet => "tf_s4_unet",
            Variant::S4ndUnet => "s4nd_unet",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    MagRegression,
    MagMasking,
    ComplexMasking,
}

impl Scenario {
    /// Channels of the model output for a TF variant.
    pub fn out_channels(self) -> usize {
        match self {
            Scenario::ComplexMasking => 2,
            _ => 1,
        }
    }
}

fn default_levels() -> usize {
    2
}
fn default_blocks() -> usize {
    4
}
fn default_base() -> usize {
    64
}
fn default_state() -> usize {
    8
}
fn default_rank() -> usize {
    1
}
fn default_scenario() -> Scenario {
    Scenario::ComplexMasking
}
fn default_in_channels() -> usize {
    2
}
fn default_true() -> bool {
    true
}

/// Architecture hyperparameters.
///
/// `rank` (output-projection rank of the 2-D SSM) and `amplitude_transform`
/// (power-law compression of the input features) extend the base key set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    #[serde(default = "default_scenario")]
    pub scenario: Scenario,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_levels")]
    pub num_unet_levels: usize,
    #[serde(default = "default_blocks")]
    pub blocks_per_level: usize,
    #[serde(default = "default_base")]
    pub base_channels: usize,
    #[serde(default = "default_state")]
    pub state_size: usize,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_true")]
    pub whitening: bool,
    #[serde(default = "default_true")]
    pub amplitude_transform: bool,
    #[serde(default)]
    pub stft: Option<StftConfig>,
}

impl ModelConfig {
    /// The small S4ND U-Net: 2 levels of 4 blocks, 64 base channels.
    pub fn s4nd_small() -> Self {
        Self {
            variant: Variant::S4ndUnet,
            scenario: Scenario::ComplexMasking,
            in_channels: 2,
            num_unet_levels: 2,
            blocks_per_level: 4,
            base_channels: 64,
            state_size: 8,
            rank: 1,
            whitening: true,
            amplitude_transform: true,
            stft: Some(StftConfig::fine()),
        }
    }

    /// Time-domain S4 U-Net with 64 base channels.
    pub fn time_default() -> Self {
        Self {
            variant: Variant::TimeS4Unet,
            scenario: Scenario::MagRegression,
            in_channels: 1,
            num_unet_levels: 4,
            blocks_per_level: 2,
            base_channels: 64,
            state_size: 8,
            rank: 1,
            whitening: false,
            amplitude_transform: false,
            stft: None,
        }
    }

    /// TF-domain 1-D S4 U-Net (frequency bins as channels), reduced width.
    pub fn tf_default() -> Self {
        Self {
            variant: Variant::TfS4Unet,
            scenario: Scenario::MagMasking,
            in_channels: 1,
            num_unet_levels: 2,
            blocks_per_level: 4,
            base_channels: 256,
            state_size: 8,
            rank: 1,
            whitening: true,
            amplitude_transform: true,
            stft: Some(StftConfig::fine()),
        }
    }

    pub fn default_for(variant: Variant) -> Self {
        match variant {
            Variant::TimeS4Unet => Self::time_default(),
            Variant::TfS4Unet => Self::tf_default(),
            Variant::S4ndUnet => Self::s4nd_small(),
        }
    }

    /// Tiny configuration for gradient checks (at most a few thousand parameters).
    pub fn tiny(variant: Variant) -> Self {
        let mut c = Self::default_for(variant);
        c.num_unet_levels = 2;
        c.blocks_per_level = 1;
        c.state_size = 2;
        c.whitening = false;
        c.amplitude_transform = false;
        match variant {
            Variant::TimeS4Unet => c.base_channels = 4,
            Variant::TfS4Unet => {
                c.base_channels = 8;
                c.stft = Some(StftConfig::new(30, 20, 5).expect("valid tiny STFT"));
            }
            Variant::S4ndUnet => {
                c.base_channels = 4;
                c.rank = 2;
                c.stft = Some(StftConfig::new(30, 20, 5).expect("valid tiny STFT"));
            }
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.base_channels == 0 || self.state_size == 0 || self.blocks_per_level == 0 {
            return bad("base_channels, state_size and blocks_per_level must be positive".into());
        }
        if self.rank == 0 || self.rank > MAX_RANK {
            return bad(format!("rank must be in 1..={MAX_RANK}"));
        }
        if self.num_unet_levels > 6 {
            return bad("num_unet_levels must be <= 6".into());
        }
        if self.variant.is_time_domain() {
            if self.in_channels != 1 {
                return bad("time_s4_unet takes a single waveform channel".into());
            }
        } else {
            let Some(stft) = &self.stft else {
                return bad(format!("{} requires an [stft] section", self.variant));
            };
            stft.validate_geometry()?;
            stft.check_overlap_add()?;
            if !(1..=2).contains(&self.in_channels) {
                return bad("in_channels must be 1 or 2".into());
            }
        }
        Ok(())
    }

    /// Frequency bins seen by a TF model.
    pub fn n_freqs(&self) -> Option<usize> {
        self.stft.as_ref().map(StftConfig::n_freqs)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}
