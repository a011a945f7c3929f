//! PCM16 mono WAV input and output.

use std::io::{Read, Seek, Write};
use std::path::Path;

use crate::error::{Error, Result};

const SCALE: f64 = 32768.0;

// the stream is already open, so read failures mean a malformed or truncated file
fn map_err(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(e) => Error::CorruptHeader(e.to_string()),
        hound::Error::Unsupported => Error::UnsupportedFormat("unsupported WAV encoding".into()),
        hound::Error::FormatError(m) => Error::CorruptHeader(m.into()),
        other => Error::CorruptHeader(other.to_string()),
    }
}

/// Samples scaled to `[-1, 1)` and the sample rate.
pub fn read_wav_from<R: Read>(r: R) -> Result<(Vec<f64>, u32)> {
    let reader = hound::WavReader::new(r).map_err(map_err)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedFormat(format!("{} channels, need mono", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::UnsupportedFormat("floating-point samples, need PCM".into()));
    }
    if spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedFormat(format!("{}-bit samples, need 16", spec.bits_per_sample)));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / SCALE).map_err(map_err))
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, spec.sample_rate))
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<(Vec<f64>, u32)> {
    let f = std::fs::File::open(path.as_ref())?;
    read_wav_from(std::io::BufReader::new(f))
}

/// Rounds to the nearest 16-bit code, saturating outside `[-1, 1)`.
pub fn quantize(x: f64) -> i16 {
    let v = (x * SCALE).round();
    if v.is_nan() {
        0
    } else {
        v.clamp(i16::MIN as f64, i16::MAX as f64) as i16
    }
}

pub fn write_wav_to<W: Write + Seek>(w: W, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec { channels: 1, sample_rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut writer = hound::WavWriter::new(w, spec).map_err(map_err)?;
    for &s in samples {
        writer.write_sample(quantize(s)).map_err(map_err)?;
    }
    writer.finalize().map_err(map_err)
}

pub fn write_wav(path: impl AsRef<Path>, samples: &[f64], sample_rate: u32) -> Result<()> {
    let f = std::fs::File::create(path.as_ref())?;
    write_wav_to(std::io::BufWriter::new(f), samples, sample_rate)
}
