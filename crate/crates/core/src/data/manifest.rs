use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{read_wav, synthetic_utterance, write_wav, Utterance};
use crate::dsp::SAMPLE_RATE;
use crate::error::{Error, Result};

/// One row of `id,clean_path,noise_path,snr_db`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub clean_path: PathBuf,
    pub noise_path: PathBuf,
    pub snr_db: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        k => Error::Data(format!("{}: {k:?}", path.display())),
    }
}

/// Reads the manifest, resolving relative paths against its directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| csv_err(path, e))?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != ["id", "clean_path", "noise_path", "snr_db"] {
        return Err(Error::Data(format!("{}: header must be id,clean_path,noise_path,snr_db", path.display())));
    }
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let mut e: ManifestEntry = row.map_err(|e| csv_err(path, e))?;
        e.clean_path = dir.join(&e.clean_path);
        e.noise_path = dir.join(&e.noise_path);
        out.push(e);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: manifest has no entries", path.display())));
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for e in entries {
        w.serialize(e).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

fn read_16k(path: &Path) -> Result<Vec<f64>> {
    let (x, sr) = read_wav(path).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("{}: {io}", path.display())),
        e => e,
    })?;
    if sr != SAMPLE_RATE {
        return Err(Error::UnsupportedFormat(format!("{}: {sr} Hz, need {SAMPLE_RATE}", path.display())));
    }
    Ok(x)
}

/// Decodes and mixes every entry. Longer noise is truncated to the clean
/// length; shorter noise is an error.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<Utterance>> {
    read_manifest(path)?
        .into_iter()
        .map(|e| {
            let clean = read_16k(&e.clean_path)?;
            let mut noise = read_16k(&e.noise_path)?;
            if noise.len() < clean.len() {
                return Err(Error::Data(format!("{}: noise shorter than clean speech", e.id)));
            }
            noise.truncate(clean.len());
            Utterance::mix(e.id.clone(), clean, noise, e.snr_db).map_err(|err| match err {
                Error::ZeroPowerInput => Error::Data(format!("{}: clean or noise is silent", e.id)),
                other => other,
            })
        })
        .collect()
}

/// Writes `n` synthetic tone-in-noise pairs as WAV files plus `manifest.csv`
/// into `dir`; returns the manifest path.
pub fn write_synthetic_corpus(dir: impl AsRef<Path>, n: usize, len: usize, snr_db: f64, seed: u64) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let u = synthetic_utterance(format!("syn{i:03}"), len, snr_db, SAMPLE_RATE, &mut rng)?;
        let (c, z) = (format!("{}_clean.wav", u.id), format!("{}_noise.wav", u.id));
        write_wav(dir.join(&c), &u.clean, SAMPLE_RATE)?;
        write_wav(dir.join(&z), &u.noise, SAMPLE_RATE)?;
        entries.push(ManifestEntry { id: u.id, clean_path: c.into(), noise_path: z.into(), snr_db });
    }
    let path = dir.join("manifest.csv");
    write_manifest(&path, &entries)?;
    Ok(path)
}
