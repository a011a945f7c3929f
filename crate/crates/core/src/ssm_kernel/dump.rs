//! Binary kernel dumps (little-endian).
//!
//! * 1-D: `"SSMK"`, `u32` version = 1, `u32 L`, then `L` pairs of `f64` (re, im).
//! * 2-D: `"SSK2"`, `u32` version = 1, `u32 L1`, `u32 L2`, `u32 R`, then the summed
//!   taps row-major as `f64` (re, im) pairs.

use std::io::{Read, Write};

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::init::{complex_normal, hippo_dplr};
use super::{materialize_kernel_dplr, SsmKernel};
use crate::error::{Error, Result};
use crate::ssm_nd::{materialize_kernel_2d, Ssm2D, SsmKernel2D, MAX_RANK};

pub const MAGIC_1D: &[u8; 4] = b"SSMK";
pub const MAGIC_2D: &[u8; 4] = b"SSK2";
pub const VERSION: u32 = 1;

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_taps<W: Write>(w: &mut W, taps: &[Complex64]) -> Result<()> {
    for z in taps {
        w.write_all(&z.re.to_le_bytes())?;
        w.write_all(&z.im.to_le_bytes())?;
    }
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::CorruptHeader(e.to_string()))?;
    Ok(u32::from_le_bytes(b))
}

fn get_taps<R: Read>(r: &mut R, count: usize) -> Result<Vec<Complex64>> {
    let mut out = Vec::with_capacity(count);
    let mut b = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut b).map_err(|e| Error::CorruptHeader(e.to_string()))?;
        let re = f64::from_le_bytes(b);
        r.read_exact(&mut b).map_err(|e| Error::CorruptHeader(e.to_string()))?;
        out.push(Complex64::new(re, f64::from_le_bytes(b)));
    }
    Ok(out)
}

fn check_header<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m).map_err(|e| Error::CorruptHeader(e.to_string()))?;
    if &m != magic {
        return Err(Error::CorruptHeader(format!("bad magic {m:?}")));
    }
    let v = get_u32(r)?;
    if v != VERSION {
        return Err(Error::CorruptHeader(format!("unsupported version {v}")));
    }
    Ok(())
}

pub fn write_kernel<W: Write>(w: &mut W, kernel: &SsmKernel) -> Result<()> {
    w.write_all(MAGIC_1D)?;
    put_u32(w, VERSION)?;
    put_u32(w, kernel.len() as u32)?;
    put_taps(w, &kernel.taps)
}

pub fn read_kernel<R: Read>(r: &mut R) -> Result<SsmKernel> {
    check_header(r, MAGIC_1D)?;
    let len = get_u32(r)? as usize;
    SsmKernel::new(get_taps(r, len)?)
}

pub fn write_kernel_2d<W: Write>(w: &mut W, kernel: &SsmKernel2D) -> Result<()> {
    w.write_all(MAGIC_2D)?;
    let (l1, l2) = kernel.lengths();
    put_u32(w, VERSION)?;
    put_u32(w, l1 as u32)?;
    put_u32(w, l2 as u32)?;
    put_u32(w, kernel.rank() as u32)?;
    put_taps(w, &kernel.taps())
}

/// Reads a 2-D dump; returns `(L1, L2, R, row-major taps)`.
pub fn read_kernel_2d<R: Read>(r: &mut R) -> Result<(usize, usize, usize, Vec<Complex64>)> {
    check_header(r, MAGIC_2D)?;
    let l1 = get_u32(r)? as usize;
    let l2 = get_u32(r)? as usize;
    let rank = get_u32(r)? as usize;
    let taps = get_taps(r, l1 * l2)?;
    Ok((l1, l2, rank, taps))
}

fn one() -> usize {
    1
}

/// TOML description of a randomly initialized kernel to dump.
///
/// ```toml
/// dims = 2          # 1 or 2
/// state_size = 16
/// seed = 7
/// rank = 2          # 2-D only
/// len2 = 32         # 2-D only; defaults to the first length
/// delta = 0.01      # optional step size override
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    #[serde(default = "one")]
    pub dims: usize,
    pub state_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub rank: usize,
    #[serde(default)]
    pub len2: Option<usize>,
    #[serde(default)]
    pub delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum KernelDump {
    OneD(SsmKernel),
    TwoD(SsmKernel2D),
}

impl KernelSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.dims) {
            return Err(Error::Config(format!("dims must be 1 or 2, got {}", self.dims)));
        }
        if self.state_size == 0 {
            return Err(Error::Config("state_size must be positive".into()));
        }
        if !(1..=MAX_RANK).contains(&self.rank) {
            return Err(Error::Config(format!("rank must be in 1..={MAX_RANK}, got {}", self.rank)));
        }
        if self.len2 == Some(0) {
            return Err(Error::Config("len2 must be positive".into()));
        }
        Ok(())
    }

    /// Builds HiPPO-initialized SSM(s) from `seed` and materializes `len` taps
    /// (`len × len2` in 2-D).
    pub fn build(&self, len: usize) -> Result<KernelDump> {
        self.validate()?;
        if len == 0 {
            return Err(Error::Config("kernel length must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let n = self.state_size;
        let axis = |rng: &mut ChaCha8Rng| -> Result<_> {
            let mut s = hippo_dplr(n, rng);
            if let Some(d) = self.delta {
                if !(d > 0.0) {
                    return Err(Error::InvalidDelta(d));
                }
                s.delta = d;
            }
            Ok(s)
        };
        if self.dims == 1 {
            let s = axis(&mut rng)?;
            return Ok(KernelDump::OneD(materialize_kernel_dplr(&s, len)?));
        }
        let a1 = axis(&mut rng)?;
        let a2 = axis(&mut rng)?;
        let scale = (self.rank as f64).sqrt().recip();
        let factors = (0..self.rank)
            .map(|_| {
                let c1 = complex_normal(&mut rng, n).into_iter().map(|z| z * scale).collect();
                (c1, complex_normal(&mut rng, n))
            })
            .collect();
        let ssm = Ssm2D::new(a1, a2, factors)?;
        Ok(KernelDump::TwoD(materialize_kernel_2d(&ssm, len, self.len2.unwrap_or(len))?))
    }
}

pub fn write_dump<W: Write>(w: &mut W, dump: &KernelDump) -> Result<()> {
    match dump {
        KernelDump::OneD(k) => write_kernel(w, k),
        KernelDump::TwoD(k) => write_kernel_2d(w, k),
    }
}
