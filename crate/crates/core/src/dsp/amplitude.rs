//! Compressive amplitude transform `c ↦ β·|c|^α·e^{i∠c}`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::ComplexSpectrogram;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeTransform {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for AmplitudeTransform {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 0.15 }
    }
}

impl AmplitudeTransform {
    pub fn identity() -> Self {
        Self { alpha: 1.0, beta: 1.0 }
    }

    #[inline]
    pub fn forward(&self, c: Complex64) -> Complex64 {
        let r = c.norm();
        if r == 0.0 {
            return c;
        }
        c * (self.beta * r.powf(self.alpha) / r)
    }

    #[inline]
    pub fn inverse(&self, c: Complex64) -> Complex64 {
        let r = c.norm();
        if r == 0.0 {
            return c;
        }
        c * ((r / self.beta).powf(1.0 / self.alpha) / r)
    }

    pub fn apply(&self, spec: &ComplexSpectrogram, inverse: bool) -> ComplexSpectrogram {
        let data = spec.data.iter().map(|&c| if inverse { self.inverse(c) } else { self.forward(c) }).collect();
        spec.with_data(data)
    }
}

pub fn amplitude_transform(spec: &ComplexSpectrogram, alpha: f64, beta: f64, inverse: bool) -> ComplexSpectrogram {
    AmplitudeTransform { alpha, beta }.apply(spec, inverse)
}
