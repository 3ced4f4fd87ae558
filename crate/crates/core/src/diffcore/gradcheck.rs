use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Grads, ParamBlock};
use crate::error::DiffError;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub h: f64,
    /// Blocks with more scalars than this are checked on a random subset of
    /// this many coordinates.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { h: 1e-4, max_coords: 256, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub coords_checked: usize,
}

/// Compares `analytic` against central differences of `f` at `params`.
/// Relative error is `|a − n| / max(1, |a|, |n|)`.
pub fn grad_check<F>(params: &ParamBlock, analytic: &Grads, mut f: F, cfg: GradCheckConfig) -> Result<GradCheckReport, DiffError>
where
    F: FnMut(&ParamBlock) -> Result<f64, DiffError>,
{
    let total = params.num_scalars();
    let coords: Vec<usize> = if total <= cfg.max_coords {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut c = sample(&mut rng, total, cfg.max_coords.max(200).min(total)).into_vec();
        c.sort_unstable();
        c
    };
    let mut probe = params.clone();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst_coord: 0, coords_checked: coords.len() };
    for &i in &coords {
        let x = params.scalar(i);
        probe.set_scalar(i, x + cfg.h);
        let fp = f(&probe)?;
        probe.set_scalar(i, x - cfg.h);
        let fm = f(&probe)?;
        probe.set_scalar(i, x);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(DiffError::NonFinite("grad_check evaluation"));
        }
        let num = (fp - fm) / (2.0 * cfg.h);
        let a = analytic.scalar(i);
        let err = (a - num).abs() / 1f64.max(a.abs()).max(num.abs());
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_coord = i;
        }
    }
    Ok(report)
}
