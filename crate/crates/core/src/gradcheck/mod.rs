//! Central-difference gradient checking.
//!
//! The caller supplies the point (a list of flattened coordinate groups, e.g.
//! one per input or parameter tensor), the analytic gradient at that point in
//! the same layout, and an objective that can be evaluated anywhere.

pub mod suite;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Step is `eps * max(1, |x|)` per coordinate.
    pub eps: f64,
    /// Above this many coordinates a seeded random subset of this size is checked.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-6,
            max_coords: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coordinate {
    pub group: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    pub checked: usize,
    /// Sampled coordinates left out because a probe changed linear region.
    pub skipped: usize,
    pub total: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn grad_check<F>(
    inputs: &[Vec<f64>],
    analytic: &[Vec<f64>],
    mut objective: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Vec<f64>]) -> Result<f64>,
{
    grad_check_piecewise(inputs, analytic, |p| objective(p).map(Some), opts)
}

/// Like [`grad_check`] for objectives with kinks. The objective returns
/// `None` when the probe left the linear region of the unperturbed point;
/// such coordinates are counted in `skipped` instead of compared.
pub fn grad_check_piecewise<F>(
    inputs: &[Vec<f64>],
    analytic: &[Vec<f64>],
    mut objective: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Vec<f64>]) -> Result<Option<f64>>,
{
    if inputs.len() != analytic.len()
        || inputs.iter().zip(analytic).any(|(a, b)| a.len() != b.len())
    {
        return Err(Error::shape(
            "grad_check",
            "analytic gradient layout differs from the inputs",
        ));
    }
    let offsets: Vec<usize> = inputs
        .iter()
        .scan(0, |acc, g| {
            let start = *acc;
            *acc += g.len();
            Some(start)
        })
        .collect();
    let total: usize = inputs.iter().map(Vec::len).sum();
    let selected: Vec<usize> = if total > opts.max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut v = index::sample(&mut rng, total, opts.max_coords).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..total).collect()
    };

    let mut point = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
        total,
    };
    for flat in selected {
        let group = offsets.partition_point(|&o| o <= flat) - 1;
        let index = flat - offsets[group];
        let original = point[group][index];
        let h = opts.eps * original.abs().max(1.0);

        point[group][index] = original + h;
        let plus = objective(&point)?;
        point[group][index] = original - h;
        let minus = objective(&point)?;
        point[group][index] = original;

        let (Some(plus), Some(minus)) = (plus, minus) else {
            report.skipped += 1;
            continue;
        };
        report.checked += 1;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                what: format!("objective while perturbing group {group}"),
                index,
            });
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[group][index];
        if !a.is_finite() {
            return Err(Error::NonFinite {
                what: format!("analytic gradient of group {group}"),
                index,
            });
        }
        let err = relative_error(a, numeric);
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(Coordinate {
                group,
                index,
                analytic: a,
                numeric,
            });
        }
    }
    Ok(report)
}
