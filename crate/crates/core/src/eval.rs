//! Sample-quality distances between point clouds.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::random;

fn check_batches(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("distance needs two nonempty batches"));
    }
    let d = a[0].len();
    if d == 0 {
        return Err(invalid("points must have dimension >= 1"));
    }
    for row in a.iter().chain(b) {
        if row.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: row.len(),
            });
        }
    }
    Ok(d)
}

/// 2-Wasserstein distance between two 1-D empirical distributions, via the
/// quantile functions (handles unequal sizes). Sorts its inputs.
pub fn wasserstein_1d(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    if n == m {
        let s: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum();
        return (s / n as f64).sqrt();
    }
    // walk the merged quantile breakpoints i/n and j/m
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        total += (next - u) * (a[i] - b[j]).powi(2);
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    total.sqrt()
}

/// Mean over `projections` random unit directions of the projected 1-D
/// 2-Wasserstein distance.
pub fn sliced_wasserstein<R: Rng + ?Sized>(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    projections: usize,
    rng: &mut R,
) -> Result<f64> {
    let d = check_batches(a, b)?;
    if projections == 0 {
        return Err(invalid("need at least one projection"));
    }
    let mut total = 0.0;
    for _ in 0..projections {
        let dir = loop {
            let v: Vec<f64> = random::normal_vec(rng, d);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                break v.into_iter().map(|x| x / n).collect::<Vec<_>>();
            }
        };
        let proj = |p: &Vec<f64>| p.iter().zip(&dir).map(|(x, w)| x * w).sum::<f64>();
        let mut pa: Vec<f64> = a.iter().map(proj).collect();
        let mut pb: Vec<f64> = b.iter().map(proj).collect();
        total += wasserstein_1d(&mut pa, &mut pb);
    }
    Ok(total / projections as f64)
}

fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

fn mean_pair_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for x in a {
        for y in b {
            s += dist(x, y);
        }
    }
    s / (a.len() as f64 * b.len() as f64)
}

/// `2 E|a - b| - E|a - a'| - E|b - b'|` over all empirical pairs (diagonal
/// included), which is zero for identical multisets and never negative.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_batches(a, b)?;
    // fixed summation order, independent of how the batches are permuted
    let canonical = |v: &[Vec<f64>]| {
        let mut v = v.to_vec();
        v.sort_by(|x, y| {
            x.iter()
                .zip(y)
                .map(|(p, q)| p.total_cmp(q))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        v
    };
    let (a, b) = (&canonical(a), &canonical(b));
    let v = 2.0 * mean_pair_distance(a, b) - mean_pair_distance(a, a) - mean_pair_distance(b, b);
    Ok(v.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisMoments {
    pub axis: usize,
    pub sample_mean: f64,
    pub reference_mean: f64,
    pub sample_std: f64,
    pub reference_std: f64,
}

pub fn moment_table(samples: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<Vec<AxisMoments>> {
    let d = check_batches(samples, reference)?;
    let stats = |v: &[Vec<f64>], j: usize| {
        let n = v.len() as f64;
        let mean = v.iter().map(|p| p[j]).sum::<f64>() / n;
        let var = v.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    Ok((0..d)
        .map(|axis| {
            let (sample_mean, sample_std) = stats(samples, axis);
            let (reference_mean, reference_std) = stats(reference, axis);
            AxisMoments {
                axis,
                sample_mean,
                reference_mean,
                sample_std,
                reference_std,
            }
        })
        .collect())
}

pub const METRIC_NOTE: &str = "FID is not computed: it needs a pretrained Inception network. \
Sample quality is reported as sliced Wasserstein and energy distance against fresh draws \
from the data distribution.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub note: String,
    pub sliced_wasserstein: f64,
    pub energy_distance: f64,
    pub projections: usize,
    pub sample_count: usize,
    pub reference_count: usize,
    pub seed: u64,
    pub moments: Vec<AxisMoments>,
}

impl EvalReport {
    /// Compares `samples` with `reference`; projections are drawn from `seed`.
    pub fn compute(samples: &[Vec<f64>], reference: &[Vec<f64>], projections: usize, seed: u64) -> Result<Self> {
        let mut rng = random::stream(seed, 0x534c_4943, 0);
        Ok(Self {
            note: METRIC_NOTE.to_string(),
            sliced_wasserstein: sliced_wasserstein(samples, reference, projections, &mut rng)?,
            energy_distance: energy_distance(samples, reference)?,
            projections,
            sample_count: samples.len(),
            reference_count: reference.len(),
            seed,
            moments: moment_table(samples, reference)?,
        })
    }
}
