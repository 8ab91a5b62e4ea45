use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub h: f64,
    /// Coordinates checked per parameter tensor.
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            samples_per_tensor: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Tensor index and flat coordinate of the worst match.
    pub worst: Option<(usize, usize)>,
    pub coordinates_checked: usize,
}

/// Compares analytic gradients against central differences of `loss`.
///
/// Per tensor, half of the sampled coordinates come from entries with a
/// non-zero analytic gradient (when there are any) and the rest uniformly from
/// the whole tensor. The error for one coordinate is
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(
    params: &[Tensor<f64>],
    analytic: &[Vec<f64>],
    config: &GradCheckConfig,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    if analytic.len() != params.len()
        || params.iter().zip(analytic).any(|(p, g)| p.len() != g.len())
    {
        return Err(Error::InvalidTensor(
            "analytic gradients do not match parameters".into(),
        ));
    }
    let first = loss(params)?;
    let second = loss(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NondeterministicLoss { first, second });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        coordinates_checked: 0,
    };
    for (t, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        let want = config.samples_per_tensor.min(n);
        let nonzero: Vec<usize> = (0..n).filter(|&i| grad[i] != 0.0).collect();
        let from_nonzero = (want / 2).min(nonzero.len());
        let mut coords: Vec<usize> = index::sample(&mut rng, nonzero.len(), from_nonzero)
            .into_iter()
            .map(|i| nonzero[i])
            .collect();
        coords.extend(index::sample(&mut rng, n, want - from_nonzero));

        for i in coords {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + config.h;
            let up = loss(&work)?;
            work[t].data_mut()[i] = orig - config.h;
            let down = loss(&work)?;
            work[t].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * config.h);
            let a = grad[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coordinates_checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = Some((t, i));
            }
        }
    }
    Ok(report)
}
