//! Audio I/O, SNR mixing, manifests, batching and the Remix / BandMask
//! augmentations.

mod augment;
mod manifest;
mod wav;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{band_for_m0, band_stop, bandmask, bandmask_with, remix, remix_with, sample_band, BandStop};
pub use manifest::{load_manifest, read_manifest, write_manifest, write_synthetic_corpus, ManifestEntry};
pub use wav::{quantize, read_wav, read_wav_from, write_wav, write_wav_to};

/// Training segment length in samples (2 s at 16 kHz).
pub const DEFAULT_SEGMENT_LEN: usize = 32_000;

pub fn power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

pub fn peak(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Result of [`mix_at_snr`]: `noisy = scale·(clean + gain·noise)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub noisy: Vec<f64>,
    pub gain: f64,
    pub scale: f64,
}

/// Noise gain giving `10·log10(P_clean / P_{gain·noise}) = snr_db`.
pub fn snr_gain(clean: &[f64], noise: &[f64], snr_db: f64) -> Result<f64> {
    if clean.len() != noise.len() {
        return Err(Error::ShapeMismatch(format!("clean has {} samples, noise {}", clean.len(), noise.len())));
    }
    let (pc, pn) = (power(clean), power(noise));
    if pc == 0.0 || pn == 0.0 {
        return Err(Error::ZeroPowerInput);
    }
    Ok((pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// Mixes at the requested SNR, then scales by `1/max(1, peak)`.
pub fn mix_at_snr(clean: &[f64], noise: &[f64], snr_db: f64) -> Result<Mixture> {
    let gain = snr_gain(clean, noise, snr_db)?;
    let mut noisy: Vec<f64> = clean.iter().zip(noise).map(|(c, n)| c + gain * n).collect();
    let scale = 1.0 / peak(&noisy).max(1.0);
    noisy.iter_mut().for_each(|v| *v *= scale);
    Ok(Mixture { noisy, gain, scale })
}

/// A clean/noise pair and its mixture; `noisy = clean + noise_gain·noise`.
///
/// Peak normalization is folded into `clean` and `noise_gain`; `noise` is
/// kept at its original level so it can be remixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub clean: Vec<f64>,
    pub noise: Vec<f64>,
    pub snr_db: f64,
    pub noise_gain: f64,
    pub noisy: Vec<f64>,
}

impl Utterance {
    pub fn mix(id: impl Into<String>, clean: Vec<f64>, noise: Vec<f64>, snr_db: f64) -> Result<Self> {
        let m = mix_at_snr(&clean, &noise, snr_db)?;
        let clean = clean.iter().map(|c| c * m.scale).collect();
        Ok(Self { id: id.into(), clean, noise, snr_db, noise_gain: m.gain * m.scale, noisy: m.noisy })
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    /// Rebuilds `noisy` from the parts, rescaling everything if it would clip.
    pub(crate) fn rebuild(&mut self) {
        self.noisy = self.clean.iter().zip(&self.noise).map(|(c, n)| c + self.noise_gain * n).collect();
        let p = peak(&self.noisy);
        if p > 1.0 {
            let s = 1.0 / p;
            self.clean.iter_mut().for_each(|v| *v *= s);
            self.noisy.iter_mut().for_each(|v| *v *= s);
            self.noise_gain *= s;
        }
    }

    /// `len` samples from `start`, zero-padded past the end.
    pub fn segment(&self, start: usize, len: usize) -> Self {
        let cut = |x: &[f64]| (start..start + len).map(|i| x.get(i).copied().unwrap_or(0.0)).collect();
        Self {
            id: self.id.clone(),
            clean: cut(&self.clean),
            noise: cut(&self.noise),
            snr_db: self.snr_db,
            noise_gain: self.noise_gain,
            noisy: cut(&self.noisy),
        }
    }
}

/// Equal-length segments processed together.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub utterances: Vec<Utterance>,
    pub rng_seed: u64,
}

impl Batch {
    pub fn new(utterances: Vec<Utterance>, rng_seed: u64) -> Result<Self> {
        let Some(first) = utterances.first() else {
            return Err(Error::Data("empty batch".into()));
        };
        let len = first.len();
        if utterances.iter().any(|u| u.len() != len || u.noise.len() != len || u.noisy.len() != len) {
            return Err(Error::ShapeMismatch("batch segments differ in length".into()));
        }
        Ok(Self { utterances, rng_seed })
    }

    pub fn segment_len(&self) -> usize {
        self.utterances[0].len()
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.rng_seed)
    }
}

/// Independent seed for stream `(a, b)` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a);
    rng.set_word_pos(u128::from(b) << 6);
    rng.random()
}

/// Shuffles the utterances for `epoch` and cuts them into batches of random
/// crops. Utterances shorter than `segment_len` are zero-padded; a final
/// partial batch is kept.
pub fn make_batches(utts: &[Utterance], batch_size: usize, segment_len: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if utts.is_empty() {
        return Err(Error::Data("no utterances".into()));
    }
    if batch_size == 0 || segment_len == 0 {
        return Err(Error::Config("batch size and segment length must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, epoch));
    let mut order: Vec<usize> = (0..utts.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    order
        .chunks(batch_size)
        .enumerate()
        .map(|(i, idx)| {
            let segs = idx
                .iter()
                .map(|&j| {
                    let u = &utts[j];
                    let start = if u.len() > segment_len { rng.random_range(0..=u.len() - segment_len) } else { 0 };
                    u.segment(start, segment_len)
                })
                .collect();
            Batch::new(segs, derive_seed(seed, 2, epoch << 32 | i as u64))
        })
        .collect()
}

/// Sine tone in white Gaussian noise. The tone frequency is drawn from
/// 200–1000 Hz and its amplitude from 0.3–0.6.
pub fn synthetic_utterance(id: impl Into<String>, len: usize, snr_db: f64, sample_rate: u32, rng: &mut impl Rng) -> Result<Utterance> {
    let f0 = rng.random_range(200.0..1000.0);
    let amp = rng.random_range(0.3..0.6);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let w = std::f64::consts::TAU * f0 / sample_rate as f64;
    let clean: Vec<f64> = (0..len).map(|n| amp * (w * n as f64 + phase).sin()).collect();
    let normal = Normal::new(0.0, 0.3).expect("valid sigma");
    let noise: Vec<f64> = (0..len).map(|_| normal.sample(rng)).collect();
    Utterance::mix(id, clean, noise, snr_db)
}

pub fn synthetic_corpus(n: usize, len: usize, snr_db: f64, seed: u64) -> Result<Vec<Utterance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| synthetic_utterance(format!("syn{i:03}"), len, snr_db, crate::dsp::SAMPLE_RATE, &mut rng)).collect()
}
