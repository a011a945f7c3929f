//! 2-D S4ND layer.
//!
//! Each axis carries its own DPLR SSM. With the output projection factored as
//! `C = Σ_r c1_r ⊗ c2_r`, the 2-D impulse response is a sum of outer products
//! of ordinary 1-D kernels, so the layer is a separable causal 2-D convolution.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft;
use crate::ssm_kernel::{project_states, propagate_states, DplrSsm, SsmKernel};

pub const MAX_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Ssm2D {
    pub axis1: DplrSsm,
    pub axis2: DplrSsm,
    /// `(c1_r, c2_r)` for each rank component; the axes' own `c` are ignored.
    pub c_factors: Vec<(Vec<Complex64>, Vec<Complex64>)>,
}

impl Ssm2D {
    pub fn new(axis1: DplrSsm, axis2: DplrSsm, c_factors: Vec<(Vec<Complex64>, Vec<Complex64>)>) -> Result<Self> {
        if c_factors.is_empty() {
            return Err(Error::DimensionMismatch("rank must be >= 1".into()));
        }
        let (n1, n2) = (axis1.state_size(), axis2.state_size());
        if c_factors.iter().any(|(a, b)| a.len() != n1 || b.len() != n2) {
            return Err(Error::DimensionMismatch(format!("C factors must have lengths ({n1}, {n2})")));
        }
        Ok(Self { axis1, axis2, c_factors })
    }

    pub fn rank(&self) -> usize {
        self.c_factors.len()
    }

    /// The full `N1 × N2` output tensor `Σ_r c1_r ⊗ c2_r`.
    pub fn c_tensor(&self) -> DMatrix<Complex64> {
        let (n1, n2) = (self.axis1.state_size(), self.axis2.state_size());
        let mut c = DMatrix::zeros(n1, n2);
        for (c1, c2) in &self.c_factors {
            for i in 0..n1 {
                for j in 0..n2 {
                    c[(i, j)] += c1[i] * c2[j];
                }
            }
        }
        c
    }
}

/// Materialized 2-D kernel, kept together with its rank factors.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmKernel2D {
    taps: DMatrix<Complex64>,
    factors: Vec<(SsmKernel, SsmKernel)>,
}

impl SsmKernel2D {
    pub fn from_factors(factors: Vec<(SsmKernel, SsmKernel)>) -> Result<Self> {
        let (l1, l2) = match factors.first() {
            Some((a, b)) => (a.len(), b.len()),
            None => return Err(Error::DimensionMismatch("rank must be >= 1".into())),
        };
        if factors.iter().any(|(a, b)| a.len() != l1 || b.len() != l2) {
            return Err(Error::DimensionMismatch("rank factors differ in length".into()));
        }
        let mut taps = DMatrix::zeros(l1, l2);
        for (k1, k2) in &factors {
            for i in 0..l1 {
                for j in 0..l2 {
                    taps[(i, j)] += k1.taps[i] * k2.taps[j];
                }
            }
        }
        Ok(Self { taps, factors })
    }

    pub fn lengths(&self) -> (usize, usize) {
        (self.taps.nrows(), self.taps.ncols())
    }

    pub fn rank(&self) -> usize {
        self.factors.len()
    }

    pub fn factors(&self) -> &[(SsmKernel, SsmKernel)] {
        &self.factors
    }

    pub fn tap(&self, i: usize, j: usize) -> Complex64 {
        self.taps[(i, j)]
    }

    pub fn taps_matrix(&self) -> &DMatrix<Complex64> {
        &self.taps
    }

    /// Row-major copy of the summed taps.
    pub fn taps(&self) -> Vec<Complex64> {
        let (l1, l2) = self.lengths();
        let mut out = Vec::with_capacity(l1 * l2);
        for i in 0..l1 {
            for j in 0..l2 {
                out.push(self.taps[(i, j)]);
            }
        }
        out
    }
}

/// Per-rank 1-D kernels on each axis, summed by outer product.
pub fn materialize_kernel_2d(ssm: &Ssm2D, len1: usize, len2: usize) -> Result<SsmKernel2D> {
    if len1 == 0 || len2 == 0 {
        return Err(Error::DimensionMismatch("kernel lengths must be >= 1".into()));
    }
    let d1 = ssm.axis1.discretize()?;
    let d2 = ssm.axis2.discretize()?;
    let s1 = propagate_states(&d1.a_bar, d1.b_bar.as_slice(), len1);
    let s2 = propagate_states(&d2.a_bar, d2.b_bar.as_slice(), len2);
    let factors = ssm
        .c_factors
        .iter()
        .map(|(c1, c2)| Ok((SsmKernel::new(project_states(&s1, c1))?, SsmKernel::new(project_states(&s2, c2))?)))
        .collect::<Result<Vec<_>>>()?;
    SsmKernel2D::from_factors(factors)
}

/// Causal 2-D convolution truncated to the input shape, computed separably:
/// rows (axis 2) with `K2_r`, then columns (axis 1) with `K1_r`, summed over r.
pub fn apply_conv_2d(kernel: &SsmKernel2D, u: &DMatrix<Complex64>) -> Result<DMatrix<Complex64>> {
    let (l1, l2) = kernel.lengths();
    if u.shape() != (l1, l2) {
        return Err(Error::DimensionMismatch(format!("input {:?}, kernel ({l1}, {l2})", u.shape())));
    }
    let mut out = DMatrix::<Complex64>::zeros(l1, l2);
    let mut tmp = DMatrix::<Complex64>::zeros(l1, l2);
    for (k1, k2) in kernel.factors() {
        for i in 0..l1 {
            let row: Vec<Complex64> = u.row(i).iter().copied().collect();
            let conv = fft::causal_conv(&k2.taps, &row);
            for (j, v) in conv.into_iter().enumerate() {
                tmp[(i, j)] = v;
            }
        }
        for j in 0..l2 {
            let conv = fft::causal_conv(&k1.taps, tmp.column(j).as_slice());
            for (i, v) in conv.into_iter().enumerate() {
                out[(i, j)] += v;
            }
        }
    }
    Ok(out)
}
