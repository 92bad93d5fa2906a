//! Central finite-difference checks for hand-derived adjoints.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_EPS: f64 = 1e-5;

/// Relative errors are measured against `max(|analytic|, |numeric|, REL_FLOOR)`, so
/// gradients far below the finite-difference noise floor compare absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Input index, flat coordinate, analytic, numeric of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl FdReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    fn merge(&mut self, other: FdReport) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }
}

/// Compares `analytic[i]` against central differences of `f` for every coordinate of
/// every input, or for at most `max_coords` seeded random coordinates per input.
pub fn check_gradients(
    inputs: &[Tensor],
    analytic: &[Tensor],
    f: impl Fn(&[Tensor]) -> Result<f64>,
    eps: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<FdReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, g) in analytic.iter().enumerate() {
        g.expect_same_shape(&inputs[i])?;
        let n = inputs[i].numel();
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + eps;
            let plus = f(&work)?;
            work[i].data_mut()[c] = orig - eps;
            let minus = f(&work)?;
            work[i].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = g.data()[c];
            let err = relative_error(a, numeric);
            report.merge(FdReport { max_rel_err: err, checked: 1, worst: Some((i, c, a, numeric)) });
        }
    }
    Ok(report)
}
