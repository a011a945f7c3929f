//! Central finite-difference check of tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
/// Gradients below `REL_FLOOR·max(1, |loss|)` are compared in absolute terms,
/// which keeps difference round-off on exactly-zero entries from counting.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub samples: usize,
    pub max_rel_err: f64,
    pub disconnected: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn disconnected(&self) -> Vec<&str> {
        self.groups.iter().filter(|g| g.disconnected).map(|g| g.name.as_str()).collect()
    }
}

pub fn rel_err(analytic: f64, numeric: f64, loss: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR * loss.abs().max(1.0))
}

fn eval(params: &[Tensor], f: &impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().enumerate().map(|(i, p)| tape.param(i, p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.value(loss).item())
}

/// Compares the tape gradient of `f` with central differences on `samples`
/// randomly chosen scalars (every group gets at least one when possible).
pub fn check_gradients(
    names: &[String],
    params: &[Tensor],
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    samples: usize,
    seed: u64,
) -> Result<GradcheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().enumerate().map(|(i, p)| tape.param(i, p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let loss = tape.value(loss).item();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = params.iter().map(Tensor::len).collect();
    let total: usize = sizes.iter().sum();
    let mut picks: Vec<(usize, usize)> = Vec::new();
    if samples >= params.len() {
        for (gi, n) in sizes.iter().enumerate() {
            if *n > 0 {
                picks.push((gi, rng.random_range(0..*n)));
            }
        }
    }
    let rest = samples.saturating_sub(picks.len()).min(total);
    for flat in sample(&mut rng, total, rest).into_iter() {
        let mut k = flat;
        for (gi, n) in sizes.iter().enumerate() {
            if k < *n {
                picks.push((gi, k));
                break;
            }
            k -= n;
        }
    }
    picks.sort_unstable();
    picks.dedup();

    let mut groups: Vec<GroupReport> = names
        .iter()
        .enumerate()
        .map(|(i, n)| GroupReport { name: n.clone(), samples: 0, max_rel_err: 0.0, disconnected: grads.get(i).is_none() })
        .collect();
    let mut work = params.to_vec();
    for (gi, idx) in picks {
        let orig = work[gi].data()[idx];
        work[gi].data_mut()[idx] = orig + FD_STEP;
        let lp = eval(&work, &f)?;
        work[gi].data_mut()[idx] = orig - FD_STEP;
        let lm = eval(&work, &f)?;
        work[gi].data_mut()[idx] = orig;
        let numeric = (lp - lm) / (2.0 * FD_STEP);
        let analytic = grads.get(gi).map_or(0.0, |g| g[idx]);
        let grp = &mut groups[gi];
        grp.samples += 1;
        grp.max_rel_err = grp.max_rel_err.max(rel_err(analytic, numeric, loss));
    }
    let max_rel_err = groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    let passed = max_rel_err <= TOLERANCE && groups.iter().all(|g| !g.disconnected);
    Ok(GradcheckReport { groups, max_rel_err, tolerance: TOLERANCE, passed })
}
