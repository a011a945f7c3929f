//! Evaluation metrics and their JSON-lines records.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dsp::{stft, StftConfig, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::objectives::LOG_FLOOR;

/// SI-SDR values are clamped to `±SI_SDR_CAP` dB.
pub const SI_SDR_CAP: f64 = 100.0;

/// Scale-invariant SDR in dB.
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::ShapeMismatch(format!("lengths {} and {}", reference.len(), estimate.len())));
    }
    let rr: f64 = reference.iter().map(|x| x * x).sum();
    if rr == 0.0 {
        return Err(Error::ZeroReference);
    }
    let alpha = reference.iter().zip(estimate).map(|(r, e)| r * e).sum::<f64>() / rr;
    let (mut tt, mut ee) = (0.0, 0.0);
    for (r, e) in reference.iter().zip(estimate) {
        let t = alpha * r;
        tt += t * t;
        ee += (e - t) * (e - t);
    }
    if tt == 0.0 {
        return Ok(-SI_SDR_CAP);
    }
    if ee == 0.0 {
        return Ok(SI_SDR_CAP);
    }
    Ok((10.0 * (tt / ee).log10()).clamp(-SI_SDR_CAP, SI_SDR_CAP))
}

/// Log-spectral distance in dB: RMS over frames of the per-frame RMS
/// difference of `20·log10` magnitudes.
pub fn log_spectral_distance(reference: &[f64], estimate: &[f64], cfg: &StftConfig) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::ShapeMismatch(format!("lengths {} and {}", reference.len(), estimate.len())));
    }
    let a = stft(reference, cfg, SAMPLE_RATE)?;
    let b = stft(estimate, cfg, SAMPLE_RATE)?;
    let (f, t) = a.shape();
    let db = |z: num_complex::Complex64| 20.0 * z.norm().max(LOG_FLOOR).log10();
    let mut acc = 0.0;
    for ti in 0..t {
        let frame: f64 = (0..f).map(|fi| (db(a.at(fi, ti)) - db(b.at(fi, ti))).powi(2)).sum::<f64>() / f as f64;
        acc += frame;
    }
    Ok((acc / t as f64).sqrt())
}

/// One line of a metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub id: String,
    pub si_sdr_db: Option<f64>,
    pub lsd_db: Option<f64>,
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noisy_si_sdr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clipped: Option<usize>,
}

impl MetricRecord {
    pub fn new(id: impl Into<String>) -> Self {
        Self { id: id.into(), si_sdr_db: None, lsd_db: None, loss: None, noisy_si_sdr_db: None, clipped: None }
    }
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[MetricRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
