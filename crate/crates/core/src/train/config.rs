use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::AdamConfig;
use crate::data::DEFAULT_SEGMENT_LEN;
use crate::error::{Error, Result};
use crate::nn::ModelConfig;
use crate::objectives::MultiResStftConfig;

/// Generator behind every random draw of a run.
pub const PRNG: &str = "chacha8";

fn d_epochs() -> usize {
    100
}
fn d_batch() -> usize {
    4
}
fn d_segment() -> usize {
    DEFAULT_SEGMENT_LEN
}
fn d_lr() -> f64 {
    1e-3
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_clip() -> f64 {
    5.0
}
fn d_prng() -> String {
    PRNG.into()
}
fn d_true() -> bool {
    true
}
fn d_bandmask_prob() -> f64 {
    0.5
}
fn d_bandmask_width() -> f64 {
    0.2
}
fn d_whitening_eps() -> f64 {
    crate::dsp::whitening::DEFAULT_EPS
}
fn d_one() -> usize {
    1
}

/// Optimization settings (the `[train]` table).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Random-crop length in samples.
    #[serde(default = "d_segment")]
    pub segment_len: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    /// Global gradient-norm clip.
    #[serde(default = "d_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_prng")]
    pub prng: String,
    #[serde(default = "d_true")]
    pub remix: bool,
    #[serde(default = "d_bandmask_prob")]
    pub bandmask_prob: f64,
    #[serde(default = "d_bandmask_width")]
    pub bandmask_width: f64,
    #[serde(default = "d_whitening_eps")]
    pub whitening_eps: f64,
    /// Evaluate every this many epochs (and always after the last one).
    #[serde(default = "d_one")]
    pub eval_every: usize,
    /// Keep a numbered checkpoint every this many epochs; `last.s4ck` is
    /// rewritten after every epoch.
    #[serde(default = "d_one")]
    pub checkpoint_every: usize,
    /// Held-out manifest; the training set is evaluated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_manifest: Option<PathBuf>,
    /// Multi-resolution STFT loss of the time-domain variant.
    #[serde(default)]
    pub loss_stft: MultiResStftConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl TrainSettings {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

/// A training run: `[model]` and `[train]` tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSettings,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self { model, train: TrainSettings::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        let bad = |m: String| Err(Error::Config(m));
        if t.prng != PRNG {
            return bad(format!("prng must be {PRNG:?}, got {:?}", t.prng));
        }
        if t.epochs == 0 || t.batch_size == 0 || t.segment_len == 0 || t.eval_every == 0 || t.checkpoint_every == 0 {
            return bad("epochs, batch_size, segment_len, eval_every and checkpoint_every must be positive".into());
        }
        if !(t.lr > 0.0) || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.eps > 0.0) || !(t.grad_clip > 0.0) {
            return bad("optimizer settings out of range".into());
        }
        if !(0.0..=1.0).contains(&t.bandmask_prob) || !(t.bandmask_width > 0.0 && t.bandmask_width < 1.0) {
            return bad("bandmask_prob must be in [0, 1] and bandmask_width in (0, 1)".into());
        }
        if !(t.whitening_eps > 0.0) {
            return bad("whitening_eps must be positive".into());
        }
        let min = if self.model.variant.is_time_domain() {
            t.loss_stft.validate()?;
            t.loss_stft.min_signal_len()
        } else {
            self.model.stft.as_ref().map_or(1, |s| s.min_signal_len())
        };
        if t.segment_len < min {
            return bad(format!("segment_len {} is shorter than the {min} samples the STFT settings need", t.segment_len));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads a config file; a relative `val_manifest` is resolved against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(v) = &cfg.train.val_manifest {
            if v.is_relative() {
                cfg.train.val_manifest = Some(path.parent().unwrap_or(Path::new(".")).join(v));
            }
        }
        Ok(cfg)
    }
}
