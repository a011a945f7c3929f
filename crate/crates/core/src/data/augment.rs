use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;

use super::{Batch, Utterance};
use crate::dsp::{hz_to_mel, mel_to_hz};
use crate::error::{Error, Result};
use crate::fft;

/// Shuffles the noises of a batch with a uniform random permutation.
pub fn remix(batch: &Batch, rng: &mut impl Rng) -> Batch {
    let mut perm: Vec<usize> = (0..batch.utterances.len()).collect();
    perm.shuffle(rng);
    remix_with(batch, &perm).expect("valid permutation")
}

/// Utterance `i` receives the noise of utterance `perm[i]` at its own gain.
pub fn remix_with(batch: &Batch, perm: &[usize]) -> Result<Batch> {
    let n = batch.utterances.len();
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&j| j >= n || std::mem::replace(&mut seen[j], true)) {
        return Err(Error::ShapeMismatch(format!("{perm:?} is not a permutation of {n}")));
    }
    let utterances = batch
        .utterances
        .iter()
        .zip(perm)
        .map(|(u, &j)| {
            let mut v = Utterance { noise: batch.utterances[j].noise.clone(), ..u.clone() };
            v.rebuild();
            v
        })
        .collect();
    Ok(Batch { utterances, rng_seed: batch.rng_seed })
}

/// Closed frequency interval removed by BandMask, in Hz.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandStop {
    pub lo_hz: f64,
    pub hi_hz: f64,
}

fn check_width(width_fraction: f64) -> Result<()> {
    if !(width_fraction > 0.0 && width_fraction < 1.0) {
        return Err(Error::Config(format!("band width fraction {width_fraction} outside (0, 1)")));
    }
    Ok(())
}

/// Band starting at mel `m0` and spanning `width_fraction` of the mel range.
pub fn band_for_m0(m0: f64, width_fraction: f64, sample_rate: u32) -> BandStop {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let hi = (m0 + width_fraction * top).min(top);
    BandStop { lo_hz: mel_to_hz(m0), hi_hz: if hi == top { sample_rate as f64 / 2.0 } else { mel_to_hz(hi) } }
}

/// Start drawn uniformly on the mel scale so the band fits below Nyquist.
pub fn sample_band(rng: &mut impl Rng, width_fraction: f64, sample_rate: u32) -> Result<BandStop> {
    check_width(width_fraction)?;
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let m0 = rng.random_range(0.0..=top * (1.0 - width_fraction));
    Ok(band_for_m0(m0, width_fraction, sample_rate))
}

/// Zeroes every DFT bin of the whole signal whose frequency lies in the band.
pub fn band_stop(signal: &[f64], band: BandStop, sample_rate: u32) -> Vec<f64> {
    let n = signal.len();
    if n == 0 {
        return Vec::new();
    }
    let mut buf: Vec<Complex64> = signal.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft::fft(&mut buf);
    let df = sample_rate as f64 / n as f64;
    for k in 0..=n / 2 {
        let f = k as f64 * df;
        if f >= band.lo_hz && f <= band.hi_hz {
            buf[k] = Complex64::new(0.0, 0.0);
            if k != 0 {
                buf[n - k] = Complex64::new(0.0, 0.0);
            }
        }
    }
    fft::ifft(&mut buf);
    buf.iter().map(|z| z.re).collect()
}

/// Applies one random band to clean, noise and noisy signals of every
/// utterance in the batch.
pub fn bandmask(batch: &Batch, rng: &mut impl Rng, width_fraction: f64, sample_rate: u32) -> Result<Batch> {
    let band = sample_band(rng, width_fraction, sample_rate)?;
    Ok(bandmask_with(batch, band, sample_rate))
}

pub fn bandmask_with(batch: &Batch, band: BandStop, sample_rate: u32) -> Batch {
    let utterances = batch
        .utterances
        .iter()
        .map(|u| Utterance {
            clean: band_stop(&u.clean, band, sample_rate),
            noise: band_stop(&u.noise, band, sample_rate),
            noisy: band_stop(&u.noisy, band, sample_rate),
            ..u.clone()
        })
        .collect();
    Batch { utterances, rng_seed: batch.rng_seed }
}
