//! ZCA whitening of frequency-bin vectors.
//!
//! Each time frame is one observation of an `F`-dimensional vector. The
//! transform is `W = (Σ + ε·I)^{-1/2}`, symmetric, so whitened bins stay
//! aligned with the original frequency axis.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use super::ComplexSpectrogram;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ZCAW";
pub const VERSION: u32 = 1;
/// Default regularizer, relative to the mean covariance diagonal.
pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct WhiteningStats {
    /// Magnitude-domain mean per bin.
    pub mean: Vec<f64>,
    pub transform: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
    /// Absolute regularizer added to the covariance diagonal.
    pub eps: f64,
}

impl WhiteningStats {
    pub fn identity(f: usize) -> Self {
        Self { mean: vec![0.0; f], transform: DMatrix::identity(f, f), inverse: DMatrix::identity(f, f), eps: 0.0 }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Whitens one real frame: `W (x − μ)`.
    pub fn forward_frame(&self, x: &[f64]) -> Vec<f64> {
        let centred = DVector::from_iterator(x.len(), x.iter().zip(&self.mean).map(|(a, m)| a - m));
        (&self.transform * centred).iter().copied().collect()
    }

    pub fn inverse_frame(&self, y: &[f64]) -> Vec<f64> {
        let v = &self.inverse * DVector::from_column_slice(y);
        v.iter().zip(&self.mean).map(|(a, m)| a + m).collect()
    }

    /// Whitens an `F × T` row-major real matrix frame by frame.
    pub fn forward_matrix(&self, data: &[f64], n_frames: usize) -> Vec<f64> {
        apply_affine(&self.transform, Some(&self.mean), false, data, n_frames)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let f = self.dim();
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(f as u32).to_le_bytes())?;
        w.write_all(&self.eps.to_le_bytes())?;
        for m in &self.mean {
            w.write_all(&m.to_le_bytes())?;
            w.write_all(&0f64.to_le_bytes())?;
        }
        for i in 0..f {
            for j in 0..f {
                w.write_all(&self.transform[(i, j)].to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let corrupt = |e: std::io::Error| Error::CorruptHeader(e.to_string());
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(corrupt)?;
        if &b4 != MAGIC {
            return Err(Error::CorruptHeader(format!("bad whitening magic {b4:?}")));
        }
        r.read_exact(&mut b4).map_err(corrupt)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(Error::CorruptHeader(format!("unsupported whitening version {version}")));
        }
        r.read_exact(&mut b4).map_err(corrupt)?;
        let f = u32::from_le_bytes(b4) as usize;
        let mut b8 = [0u8; 8];
        let mut next = |r: &mut R| -> Result<f64> {
            r.read_exact(&mut b8).map_err(corrupt)?;
            Ok(f64::from_le_bytes(b8))
        };
        let eps = next(r)?;
        let mut mean = Vec::with_capacity(f);
        for _ in 0..f {
            mean.push(next(r)?);
            next(r)?;
        }
        let mut transform = DMatrix::zeros(f, f);
        for i in 0..f {
            for j in 0..f {
                transform[(i, j)] = next(r)?;
            }
        }
        let inverse = transform.clone().try_inverse().ok_or(Error::SingularMatrix)?;
        Ok(Self { mean, transform, inverse, eps })
    }
}

/// Fits ZCA statistics to real observation vectors of equal length.
///
/// `eps` is relative to the mean of the covariance diagonal.
pub fn fit_whitening_frames(frames: &[Vec<f64>], eps: f64) -> Result<WhiteningStats> {
    let f = frames.first().map_or(0, Vec::len);
    if frames.len() <= f || f == 0 {
        return Err(Error::InsufficientData { frames: frames.len(), bins: f });
    }
    if frames.iter().any(|x| x.len() != f) {
        return Err(Error::DimensionMismatch("frames differ in length".into()));
    }
    let count = frames.len() as f64;
    let mut mean = vec![0.0; f];
    for x in frames {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut centred = DMatrix::<f64>::zeros(f, frames.len());
    for (t, x) in frames.iter().enumerate() {
        for i in 0..f {
            centred[(i, t)] = x[i] - mean[i];
        }
    }
    let mut cov = &centred * centred.transpose() / count;
    let reg = eps * cov.diagonal().mean();
    for i in 0..f {
        cov[(i, i)] += reg;
    }
    let eig = SymmetricEigen::new(cov);
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::NumericalInstability("covariance is not positive definite; increase eps".into()));
    }
    let q = &eig.eigenvectors;
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    let sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    let transform = q * inv_sqrt * q.transpose();
    let inverse = q * sqrt * q.transpose();
    Ok(WhiteningStats { mean, transform, inverse, eps: reg })
}

/// Fits statistics on the magnitudes of the given spectrograms.
///
/// Callers apply the amplitude transform beforehand when that is the feature domain.
pub fn fit_whitening(specs: &[ComplexSpectrogram], eps: f64) -> Result<WhiteningStats> {
    let mut frames = Vec::new();
    for s in specs {
        for t in 0..s.n_frames {
            frames.push((0..s.n_freqs).map(|f| s.at(f, t).norm()).collect::<Vec<f64>>());
        }
    }
    fit_whitening_frames(&frames, eps)
}

fn apply_affine(m: &DMatrix<f64>, mean: Option<&[f64]>, add_after: bool, data: &[f64], n_frames: usize) -> Vec<f64> {
    let f = m.nrows();
    let mut x = DMatrix::<f64>::from_fn(f, n_frames, |i, t| data[i * n_frames + t]);
    if let (Some(mu), false) = (mean, add_after) {
        for i in 0..f {
            for t in 0..n_frames {
                x[(i, t)] -= mu[i];
            }
        }
    }
    let mut y = m * x;
    if let (Some(mu), true) = (mean, add_after) {
        for i in 0..f {
            for t in 0..n_frames {
                y[(i, t)] += mu[i];
            }
        }
    }
    let mut out = vec![0.0; f * n_frames];
    for i in 0..f {
        for t in 0..n_frames {
            out[i * n_frames + t] = y[(i, t)];
        }
    }
    out
}

/// Affine whitening applied per frame: `y = W (x − μ)` forward, `x = W⁻¹ y + μ`
/// inverse. The map acts on the real part with the mean and on the imaginary
/// part without it, so magnitude spectrograms (zero imaginary part) are
/// whitened exactly and any complex input round-trips.
pub fn whiten(spec: &ComplexSpectrogram, stats: &WhiteningStats, inverse: bool) -> Result<ComplexSpectrogram> {
    if spec.n_freqs != stats.dim() {
        return Err(Error::DimensionMismatch(format!("spectrogram has {} bins, stats {}", spec.n_freqs, stats.dim())));
    }
    let t = spec.n_frames;
    let re: Vec<f64> = spec.data.iter().map(|z| z.re).collect();
    let im: Vec<f64> = spec.data.iter().map(|z| z.im).collect();
    let m = if inverse { &stats.inverse } else { &stats.transform };
    let re = apply_affine(m, Some(&stats.mean), inverse, &re, t);
    let im = apply_affine(m, None, inverse, &im, t);
    Ok(spec.with_data(re.into_iter().zip(im).map(|(a, b)| Complex64::new(a, b)).collect()))
}
