//! Timing of the kernel and convolution paths.

use std::fmt;
use std::hint::black_box;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fft::{causal_conv, direct_causal_conv};
use crate::ssm_kernel::dplr::materialize_kernel_dplr;
use crate::ssm_kernel::init::hippo_dplr;
use crate::ssm_kernel::materialize_kernel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchMode {
    KernelNaive,
    KernelDplr,
    ConvDirect,
    ConvFft,
}

impl BenchMode {
    pub const ALL: [BenchMode; 4] = [BenchMode::KernelNaive, BenchMode::KernelDplr, BenchMode::ConvDirect, BenchMode::ConvFft];
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchMode::KernelNaive => "kernel-naive",
            BenchMode::KernelDplr => "kernel-dplr",
            BenchMode::ConvDirect => "conv-direct",
            BenchMode::ConvFft => "conv-fft",
        })
    }
}

impl std::str::FromStr for BenchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.to_string() == s).ok_or_else(|| Error::Config(format!("unknown bench mode {s:?}")))
    }
}

/// One CSV row: mode, state size, length, repetitions, mean seconds per call.
#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub mode: BenchMode,
    pub n: usize,
    pub len: usize,
    pub reps: usize,
    pub seconds: f64,
}

pub const CSV_HEADER: &str = "mode,n,len,reps,seconds";

impl BenchRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{},{:.9e}", self.mode, self.n, self.len, self.reps, self.seconds)
    }
}

/// Calls `f` until `min_time` has elapsed (at least three times).
fn time_it(min_time: Duration, mut f: impl FnMut() -> Result<()>) -> Result<(usize, f64)> {
    f()?;
    let start = Instant::now();
    let mut reps = 0;
    while reps < 3 || start.elapsed() < min_time {
        f()?;
        reps += 1;
    }
    Ok((reps, start.elapsed().as_secs_f64() / reps as f64))
}

fn random_signal(rng: &mut ChaCha8Rng, len: usize) -> Vec<Complex64> {
    (0..len).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect()
}

/// Times one path. Kernel modes use a HiPPO SSM of state size `n`;
/// convolution modes convolve a length-`len` kernel with a length-`len`
/// input (`n` is ignored).
pub fn run(mode: BenchMode, n: usize, len: usize, min_time: Duration) -> Result<BenchRow> {
    if n == 0 || len == 0 {
        return Err(Error::Config("--n and --len must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (reps, seconds) = match mode {
        BenchMode::KernelNaive | BenchMode::KernelDplr => {
            let ssm = hippo_dplr(n, &mut rng);
            if mode == BenchMode::KernelNaive {
                time_it(min_time, || {
                    let d = ssm.discretize()?;
                    black_box(materialize_kernel(&d, len)?);
                    Ok(())
                })?
            } else {
                time_it(min_time, || {
                    black_box(materialize_kernel_dplr(&ssm, len)?);
                    Ok(())
                })?
            }
        }
        BenchMode::ConvDirect | BenchMode::ConvFft => {
            let k = random_signal(&mut rng, len);
            let u = random_signal(&mut rng, len);
            let conv = if mode == BenchMode::ConvFft { causal_conv } else { direct_causal_conv };
            time_it(min_time, || {
                black_box(conv(&k, &u));
                Ok(())
            })?
        }
    };
    Ok(BenchRow { mode, n, len, reps, seconds })
}
