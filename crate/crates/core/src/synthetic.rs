//! Synthetic data distributions whose noised scores are known exactly.
//!
//! Every distribution is a mixture of isotropic Gaussians; a point mass is the
//! zero-variance special case. Convolving with `N(0, sigma^2 I)` keeps the
//! family closed, which gives the exact perturbed score and, for a single
//! component, the exact probability-flow consistency function.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::random;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionKind {
    Delta,
    Gaussian,
    GaussianMixture,
}

impl FromStr for DistributionKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "delta" => Ok(Self::Delta),
            "gaussian" => Ok(Self::Gaussian),
            "gaussian_mixture" | "mixture" => Ok(Self::GaussianMixture),
            _ => Err(format!("unknown distribution kind `{s}`")),
        }
    }
}

impl fmt::Display for DistributionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Delta => "delta",
            Self::Gaussian => "gaussian",
            Self::GaussianMixture => "gaussian_mixture",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component<T> {
    pub weight: T,
    pub mean: Vec<T>,
    pub stddev: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDistribution<T> {
    kind: DistributionKind,
    dim: usize,
    components: Vec<Component<T>>,
    cumulative: Vec<f64>,
}

impl<T: Scalar> SyntheticDistribution<T> {
    pub fn new(kind: DistributionKind, components: Vec<Component<T>>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| invalid("distribution needs at least one component"))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(invalid("distribution dimension must be >= 1"));
        }
        for c in &components {
            if c.mean.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: c.mean.len(),
                });
            }
            if !(c.weight >= T::zero()) {
                return Err(invalid("component weights must be nonnegative"));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight.as_f64()).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("component weights sum to {total}, expected 1")));
        }
        match kind {
            DistributionKind::Delta => {
                if components.len() != 1 || components[0].stddev != T::zero() {
                    return Err(invalid("delta needs exactly one component with stddev 0"));
                }
            }
            DistributionKind::Gaussian | DistributionKind::GaussianMixture => {
                if components.iter().any(|c| !(c.stddev > T::zero())) {
                    return Err(invalid("gaussian components need stddev > 0"));
                }
                if kind == DistributionKind::Gaussian && components.len() != 1 {
                    return Err(invalid("gaussian has exactly one component"));
                }
            }
        }
        let mut acc = 0.0;
        let cumulative = components
            .iter()
            .map(|c| {
                acc += c.weight.as_f64();
                acc
            })
            .collect();
        Ok(Self {
            kind,
            dim,
            components,
            cumulative,
        })
    }

    pub fn delta(xi: Vec<T>) -> Result<Self> {
        Self::new(
            DistributionKind::Delta,
            vec![Component {
                weight: T::one(),
                mean: xi,
                stddev: T::zero(),
            }],
        )
    }

    pub fn gaussian(mean: Vec<T>, stddev: T) -> Result<Self> {
        Self::new(
            DistributionKind::Gaussian,
            vec![Component {
                weight: T::one(),
                mean,
                stddev,
            }],
        )
    }

    pub fn mixture(components: Vec<Component<T>>) -> Result<Self> {
        Self::new(DistributionKind::GaussianMixture, components)
    }

    /// Equal-weight mixture with components at the corners `(+-half_side, +-half_side)`.
    pub fn square_mixture(half_side: T, stddev: T) -> Result<Self> {
        let q = T::of(0.25);
        let corners = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)];
        Self::mixture(
            corners
                .iter()
                .map(|&(a, b)| Component {
                    weight: q,
                    mean: vec![T::of(a) * half_side, T::of(b) * half_side],
                    stddev,
                })
                .collect(),
        )
    }

    pub fn kind(&self) -> DistributionKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component<T>] {
        &self.components
    }

    fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if self.components.len() == 1 {
            return 0;
        }
        let u = random::unit(rng) * self.cumulative[self.cumulative.len() - 1];
        self.cumulative
            .partition_point(|&c| c <= u)
            .min(self.components.len() - 1)
    }

    /// Draws one point and reports which component produced it.
    pub fn sample_labeled<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, Vec<T>) {
        let k = self.pick(rng);
        let c = &self.components[k];
        let x = if c.stddev == T::zero() {
            c.mean.clone()
        } else {
            c.mean
                .iter()
                .map(|&m| m + c.stddev * random::normal::<T, _>(rng))
                .collect()
        };
        (k, x)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<T>> {
        (0..n).map(|_| self.sample_labeled(rng).1).collect()
    }

    fn check_point(&self, x: &[T], sigma: T) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        if !(sigma > T::zero()) {
            return Err(invalid(format!("noise level must be positive, got {sigma}")));
        }
        Ok(())
    }

    /// Per-component log densities of `p_sigma` (including the weight).
    fn component_log_densities(&self, x: &[T], sigma: T) -> Vec<T> {
        let half_d = T::of(self.dim as f64 * 0.5);
        let two_pi = T::of(2.0) * T::PI();
        self.components
            .iter()
            .map(|c| {
                let var = c.stddev * c.stddev + sigma * sigma;
                let sq = x
                    .iter()
                    .zip(&c.mean)
                    .fold(T::zero(), |a, (&xi, &mi)| a + (xi - mi) * (xi - mi));
                c.weight.ln() - half_d * (two_pi * var).ln() - sq / (T::of(2.0) * var)
            })
            .collect()
    }

    /// `log p_sigma(x)`.
    pub fn log_density(&self, x: &[T], sigma: T) -> Result<T> {
        self.check_point(x, sigma)?;
        Ok(log_sum_exp(&self.component_log_densities(x, sigma)))
    }

    /// Exact `grad_x log p_sigma(x)`.
    pub fn perturbed_score(&self, x: &[T], sigma: T) -> Result<Vec<T>> {
        self.check_point(x, sigma)?;
        let logs = self.component_log_densities(x, sigma);
        let lse = log_sum_exp(&logs);
        let mut score = vec![T::zero(); self.dim];
        for (c, l) in self.components.iter().zip(&logs) {
            let r = (*l - lse).exp();
            if r == T::zero() {
                continue;
            }
            let var = c.stddev * c.stddev + sigma * sigma;
            for ((s, &xi), &mi) in score.iter_mut().zip(x).zip(&c.mean) {
                *s -= r * (xi - mi) / var;
            }
        }
        Ok(score)
    }

    /// Closed-form consistency function for single-component distributions.
    pub fn true_consistency(&self, x: &[T], sigma: T, sigma_min: T) -> Result<Vec<T>> {
        self.check_point(x, sigma)?;
        if !(sigma_min > T::zero() && sigma >= sigma_min) {
            return Err(invalid(format!(
                "need sigma >= sigma_min > 0, got sigma={sigma} sigma_min={sigma_min}"
            )));
        }
        let c = &self.components[0];
        let ratio = match self.kind {
            DistributionKind::Delta => sigma_min / sigma,
            DistributionKind::Gaussian => {
                let s2 = c.stddev * c.stddev;
                ((s2 + sigma_min * sigma_min) / (s2 + sigma * sigma)).sqrt()
            }
            DistributionKind::GaussianMixture => {
                return Err(Error::NoClosedForm("gaussian mixtures"))
            }
        };
        if sigma == sigma_min {
            return Ok(x.to_vec());
        }
        Ok(x.iter()
            .zip(&c.mean)
            .map(|(&xi, &m)| ratio * xi + (T::one() - ratio) * m)
            .collect())
    }
}

fn log_sum_exp<T: Scalar>(v: &[T]) -> T {
    let m = v.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    if m == T::neg_infinity() {
        return m;
    }
    m + v.iter().fold(T::zero(), |a, &b| a + (b - m).exp()).ln()
}

/// Anything that can supply `grad_x log p_sigma(x)`.
pub trait ScoreSource<T> {
    fn dim(&self) -> usize;
    fn score(&self, x: &[T], sigma: T) -> Result<Vec<T>>;
}

impl<T: Scalar> ScoreSource<T> for SyntheticDistribution<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, x: &[T], sigma: T) -> Result<Vec<T>> {
        self.perturbed_score(x, sigma)
    }
}

/// Default sub-step count for the probability-flow oracle.
pub const DEFAULT_ODE_STEPS: usize = 1000;

/// Integrates `dx/dsigma = -sigma * score(x, sigma)` from `sigma_from` to
/// `sigma_to` with Heun's method on a `rho = 7` spaced sub-grid. Either
/// direction is allowed.
pub fn pf_ode_solve<T: Scalar, S: ScoreSource<T> + ?Sized>(
    source: &S,
    x: &[T],
    sigma_from: T,
    sigma_to: T,
    steps: usize,
) -> Result<Vec<T>> {
    if !(sigma_from > T::zero() && sigma_to > T::zero()) {
        return Err(invalid("ODE endpoints must be positive"));
    }
    if steps < 1 {
        return Err(invalid("ODE solve needs at least one step"));
    }
    if x.len() != source.dim() {
        return Err(Error::DimensionMismatch {
            expected: source.dim(),
            got: x.len(),
        });
    }
    if sigma_from == sigma_to {
        return Ok(x.to_vec());
    }
    let rho = T::of(7.0);
    let a = sigma_from.powf(T::one() / rho);
    let b = sigma_to.powf(T::one() / rho);
    let n = T::from_usize_exact(steps);
    let level = |j: usize| -> T {
        if j == 0 {
            sigma_from
        } else if j == steps {
            sigma_to
        } else {
            (a + T::from_usize_exact(j) / n * (b - a)).powf(rho)
        }
    };
    let drift = |x: &[T], s: T| -> Result<Vec<T>> {
        Ok(source.score(x, s)?.into_iter().map(|g| -s * g).collect())
    };
    let mut cur = x.to_vec();
    let half = T::of(0.5);
    for j in 0..steps {
        let (s0, s1) = (level(j), level(j + 1));
        let h = s1 - s0;
        let d0 = drift(&cur, s0)?;
        let pred: Vec<T> = cur.iter().zip(&d0).map(|(&c, &d)| c + h * d).collect();
        let d1 = drift(&pred, s1)?;
        for ((c, &u), &v) in cur.iter_mut().zip(&d0).zip(&d1) {
            *c += h * half * (u + v);
        }
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::seeded;

    #[test]
    fn delta_samples_are_copies() {
        let d = SyntheticDistribution::delta(vec![1.0, 2.0]).unwrap();
        let s = d.sample(3, &mut seeded(0));
        assert_eq!(s, vec![vec![1.0, 2.0]; 3]);
    }

    #[test]
    fn gaussian_sample_mean() {
        let d = SyntheticDistribution::gaussian(vec![0.0], 1.0).unwrap();
        let n = 100_000;
        let s = d.sample(n, &mut seeded(1));
        let mean: f64 = s.iter().map(|v| v[0]).sum::<f64>() / n as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());
    }

    #[test]
    fn mixture_occupancy_is_binomial() {
        let d = SyntheticDistribution::mixture(vec![
            Component { weight: 0.5, mean: vec![-5.0], stddev: 0.5 },
            Component { weight: 0.5, mean: vec![5.0], stddev: 0.5 },
        ])
        .unwrap();
        let n = 20_000;
        let mut rng = seeded(2);
        let left = (0..n).filter(|_| d.sample_labeled(&mut rng).0 == 0).count();
        let sd = (n as f64 * 0.25).sqrt();
        assert!((left as f64 - n as f64 * 0.5).abs() < 3.0 * sd);
    }

    #[test]
    fn validation() {
        assert!(SyntheticDistribution::<f64>::gaussian(vec![0.0], 0.0).is_err());
        assert!(SyntheticDistribution::<f64>::mixture(vec![
            Component { weight: 0.3, mean: vec![0.0], stddev: 1.0 },
            Component { weight: 0.3, mean: vec![1.0], stddev: 1.0 },
        ])
        .is_err());
        assert!(SyntheticDistribution::<f64>::mixture(vec![
            Component { weight: 0.5, mean: vec![0.0], stddev: 1.0 },
            Component { weight: 0.5, mean: vec![1.0, 0.0], stddev: 1.0 },
        ])
        .is_err());
    }

    #[test]
    fn closed_form_scores() {
        let d = SyntheticDistribution::delta(vec![0.0]).unwrap();
        assert_eq!(d.perturbed_score(&[2.0], 1.0).unwrap(), vec![-2.0]);
        let g = SyntheticDistribution::<f64>::gaussian(vec![0.0], 1.0).unwrap();
        assert!((g.perturbed_score(&[2.0], 1.0).unwrap()[0] + 1.0).abs() < 1e-15);
        assert!(d.perturbed_score(&[2.0], 0.0).is_err());
    }

    #[test]
    fn mixture_score_matches_finite_differences() {
        let d = SyntheticDistribution::square_mixture(1.0, 0.2).unwrap();
        let mut rng = seeded(9);
        for _ in 0..50 {
            let x: Vec<f64> = random::normal_vec(&mut rng, 2);
            let sigma = 0.05 + 3.0 * random::unit(&mut rng);
            let s = d.perturbed_score(&x, sigma).unwrap();
            for j in 0..2 {
                let h = 1e-5;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let fd = (d.log_density(&xp, sigma).unwrap() - d.log_density(&xm, sigma).unwrap())
                    / (2.0 * h);
                assert!((fd - s[j]).abs() <= 1e-6 * s[j].abs().max(1e-3), "{fd} vs {}", s[j]);
            }
        }
    }

    #[test]
    fn mixture_score_is_stable_far_out() {
        let d = SyntheticDistribution::<f64>::square_mixture(1.0, 0.01).unwrap();
        let s = d.perturbed_score(&[400.0, -300.0], 0.002).unwrap();
        assert!(s.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_component_mixture_matches_closed_forms() {
        let g = SyntheticDistribution::gaussian(vec![0.3, -1.0], 0.7).unwrap();
        let m = SyntheticDistribution::mixture(g.components().to_vec()).unwrap();
        let x = [1.5, 2.0];
        for sigma in [0.002, 0.5, 80.0] {
            let a = g.perturbed_score(&x, sigma).unwrap();
            let b = m.perturbed_score(&x, sigma).unwrap();
            let direct: Vec<f64> = x
                .iter()
                .zip([0.3, -1.0])
                .map(|(&xi, mu)| -(xi - mu) / (0.49 + sigma * sigma))
                .collect();
            for j in 0..2 {
                assert!((a[j] - b[j]).abs() <= 1e-12 * a[j].abs());
                assert!((a[j] - direct[j]).abs() <= 1e-12 * a[j].abs());
            }
        }
    }

    #[test]
    fn consistency_boundary_and_limits() {
        let d = SyntheticDistribution::<f64>::delta(vec![1.0]).unwrap();
        assert_eq!(d.true_consistency(&[5.0], 0.002, 0.002).unwrap(), vec![5.0]);
        let f = d.true_consistency(&[0.0], 80.0, 0.002).unwrap()[0];
        assert!((f - 0.999975).abs() < 1e-12);
        let g = SyntheticDistribution::gaussian(vec![0.5], 0.3).unwrap();
        assert_eq!(g.true_consistency(&[2.0], 0.002, 0.002).unwrap(), vec![2.0]);
        let m = SyntheticDistribution::square_mixture(1.0, 0.1).unwrap();
        assert!(matches!(
            m.true_consistency(&[0.0, 0.0], 1.0, 0.002),
            Err(Error::NoClosedForm(_))
        ));
    }

    #[test]
    fn ode_zero_distance_is_identity() {
        let d = SyntheticDistribution::gaussian(vec![0.0], 1.0).unwrap();
        assert_eq!(pf_ode_solve(&d, &[0.37], 2.0, 2.0, 10).unwrap(), vec![0.37]);
        assert!(pf_ode_solve(&d, &[0.37], 0.0, 2.0, 10).is_err());
        assert!(pf_ode_solve(&d, &[0.37], 1.0, 2.0, 0).is_err());
    }

    #[test]
    fn ode_reproduces_delta_consistency() {
        let d = SyntheticDistribution::delta(vec![0.7]).unwrap();
        let mut rng = seeded(4);
        for _ in 0..10 {
            let z: f64 = random::normal(&mut rng);
            let x = [0.7 + 80.0 * z];
            let ode = pf_ode_solve(&d, &x, 80.0, 0.002, DEFAULT_ODE_STEPS).unwrap()[0];
            let exact = d.true_consistency(&x, 80.0, 0.002).unwrap()[0];
            assert!((ode - exact).abs() < 1e-6, "{ode} vs {exact}");
        }
    }

    #[test]
    fn ode_matches_gaussian_consistency() {
        let d = SyntheticDistribution::gaussian(vec![0.4], 0.5).unwrap();
        let mut rng = seeded(5);
        for _ in 0..20 {
            let sigma = (random::unit(&mut rng) * (80f64.ln() - 0.002f64.ln()) + 0.002f64.ln()).exp();
            let x = [0.4 + (0.25 + sigma * sigma).sqrt() * random::normal::<f64, _>(&mut rng)];
            let ode = pf_ode_solve(&d, &x, sigma, 0.002, 4 * DEFAULT_ODE_STEPS).unwrap()[0];
            let exact = d.true_consistency(&x, sigma, 0.002).unwrap()[0];
            assert!((ode - exact).abs() < 1e-5, "sigma={sigma}: {ode} vs {exact}");
        }
    }

    #[test]
    fn ode_round_trip() {
        let d = SyntheticDistribution::<f64>::square_mixture(1.0, 0.3).unwrap();
        let x0 = [0.8, -1.1];
        let up = pf_ode_solve(&d, &x0, 0.002, 80.0, DEFAULT_ODE_STEPS).unwrap();
        let back = pf_ode_solve(&d, &up, 80.0, 0.002, DEFAULT_ODE_STEPS).unwrap();
        for j in 0..2 {
            assert!((back[j] - x0[j]).abs() < 1e-4, "{back:?}");
        }
    }

    #[test]
    fn semigroup_property() {
        let d = SyntheticDistribution::<f64>::gaussian(vec![-0.2, 0.6], 0.4).unwrap();
        let x = [3.0, -2.0];
        let direct = d.true_consistency(&x, 5.0, 0.002).unwrap();
        for mid in [0.01, 0.5, 2.0] {
            let moved = pf_ode_solve(&d, &x, 5.0, mid, DEFAULT_ODE_STEPS).unwrap();
            let via = d.true_consistency(&moved, mid, 0.002).unwrap();
            for j in 0..2 {
                assert!((direct[j] - via[j]).abs() < 1e-6);
            }
        }
    }
}
