//! Noise grids, discretization curricula, noise-index distributions and
//! loss weights.
//!
//! Indices into a [`NoiseGrid`] are 1-based in every public function, matching
//! the usual `sigma_1 < ... < sigma_N` notation; `sigma_1 = sigma_min`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::random;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Spacing {
    /// Karras-style interpolation in `sigma^(1/rho)`.
    RhoInterpolated,
    /// Evenly spaced levels.
    Linear,
}

impl FromStr for Spacing {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rho_interpolated" | "rho" => Ok(Self::RhoInterpolated),
            "linear" => Ok(Self::Linear),
            _ => Err(format!("unknown spacing `{s}`")),
        }
    }
}

impl fmt::Display for Spacing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RhoInterpolated => "rho_interpolated",
            Self::Linear => "linear",
        })
    }
}

/// Ordered noise levels `sigma_1 < ... < sigma_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseGrid<T> {
    sigma_min: T,
    sigma_max: T,
    rho: T,
    spacing: Spacing,
    levels: Vec<T>,
}

impl<T: Scalar> NoiseGrid<T> {
    /// Builds an `n`-level grid. Endpoints are pinned to the inputs exactly.
    pub fn new(n: usize, sigma_min: T, sigma_max: T, rho: T, spacing: Spacing) -> Result<Self> {
        if n < 2 {
            return Err(invalid(format!("grid needs at least 2 levels, got {n}")));
        }
        if !(sigma_min > T::zero() && sigma_min < sigma_max && sigma_max.is_finite()) {
            return Err(invalid(format!(
                "need 0 < sigma_min < sigma_max, got ({sigma_min}, {sigma_max})"
            )));
        }
        if spacing == Spacing::RhoInterpolated && !(rho >= T::one()) {
            return Err(invalid(format!("rho must be >= 1, got {rho}")));
        }
        let last = T::from_usize_exact(n - 1);
        let mut levels: Vec<T> = match spacing {
            Spacing::RhoInterpolated => {
                let inv = T::one() / rho;
                let lo = sigma_min.powf(inv);
                let hi = sigma_max.powf(inv);
                (0..n)
                    .map(|j| (lo + T::from_usize_exact(j) / last * (hi - lo)).powf(rho))
                    .collect()
            }
            Spacing::Linear => (0..n)
                .map(|j| sigma_min + T::from_usize_exact(j) / last * (sigma_max - sigma_min))
                .collect(),
        };
        levels[0] = sigma_min;
        levels[n - 1] = sigma_max;
        if levels.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(invalid(format!(
                "grid of {n} levels is not strictly increasing at this precision"
            )));
        }
        Ok(Self {
            sigma_min,
            sigma_max,
            rho,
            spacing,
            levels,
        })
    }

    /// The default `rho = 7` grid.
    pub fn karras(n: usize, sigma_min: T, sigma_max: T) -> Result<Self> {
        Self::new(n, sigma_min, sigma_max, T::of(7.0), Spacing::RhoInterpolated)
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn levels(&self) -> &[T] {
        &self.levels
    }

    /// `sigma_i` for 1-based `i`.
    ///
    /// Panics when `i` is outside `1..=n`.
    pub fn sigma(&self, i: usize) -> T {
        assert!(i >= 1 && i <= self.levels.len(), "grid index {i} out of range");
        self.levels[i - 1]
    }

    pub fn sigma_min(&self) -> T {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> T {
        self.sigma_max
    }

    pub fn rho(&self) -> T {
        self.rho
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    /// 1-based index of the level closest to `sigma`.
    pub fn nearest_index(&self, sigma: T) -> usize {
        let mut best = 0;
        for (j, &s) in self.levels.iter().enumerate() {
            if (s - sigma).abs() < (self.levels[best] - sigma).abs() {
                best = j;
            }
        }
        best + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurriculumShape {
    Constant,
    SqrtOriginal,
    Linear,
    Square,
    Cosine,
    Exponential,
}

impl CurriculumShape {
    pub const ALL: [Self; 6] = [
        Self::Constant,
        Self::SqrtOriginal,
        Self::Linear,
        Self::Square,
        Self::Cosine,
        Self::Exponential,
    ];
}

impl FromStr for CurriculumShape {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "constant" => Ok(Self::Constant),
            "sqrt_original" | "sqrt" => Ok(Self::SqrtOriginal),
            "linear" => Ok(Self::Linear),
            "square" => Ok(Self::Square),
            "cosine" => Ok(Self::Cosine),
            "exponential" | "exp" => Ok(Self::Exponential),
            _ => Err(format!("unknown curriculum shape `{s}`")),
        }
    }
}

impl fmt::Display for CurriculumShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::SqrtOriginal => "sqrt_original",
            Self::Linear => "linear",
            Self::Square => "square",
            Self::Cosine => "cosine",
            Self::Exponential => "exponential",
        })
    }
}

/// Map from training step `k` to the number of noise levels `N(k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Curriculum {
    pub shape: CurriculumShape,
    pub s0: usize,
    pub s1: usize,
    pub total_steps: usize,
}

impl Curriculum {
    pub fn new(shape: CurriculumShape, s0: usize, s1: usize, total_steps: usize) -> Result<Self> {
        let c = Self {
            shape,
            s0,
            s1,
            total_steps,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.s0 < 1 || self.s1 < self.s0 {
            return Err(invalid(format!(
                "curriculum needs 1 <= s0 <= s1, got s0={} s1={}",
                self.s0, self.s1
            )));
        }
        if self.total_steps < 1 {
            return Err(invalid("curriculum needs at least one training step"));
        }
        Ok(())
    }

    /// Steps per doubling for the exponential shape.
    pub fn doubling_period(&self) -> usize {
        let ratio = (self.s1 / self.s0) as f64;
        let period = (self.total_steps as f64 / (ratio.log2() + 1.0)).floor() as usize;
        period.max(1)
    }

    /// `N(k)` for `0 <= k < total_steps`.
    pub fn n_levels(&self, k: usize) -> Result<usize> {
        if k >= self.total_steps {
            return Err(Error::IndexOutOfRange {
                index: k,
                lo: 0,
                hi: self.total_steps - 1,
            });
        }
        let (s0, s1) = (self.s0 as f64, self.s1 as f64);
        let t = k as f64 / self.total_steps as f64;
        let n = match self.shape {
            CurriculumShape::Exponential => {
                let doublings = k / self.doubling_period();
                let steps = if doublings >= 63 {
                    self.s1
                } else {
                    self.s0.saturating_mul(1usize << doublings).min(self.s1)
                };
                steps + 1
            }
            CurriculumShape::SqrtOriginal => {
                let inner = t * ((s1 + 1.0).powi(2) - s0 * s0) + s0 * s0;
                (inner.sqrt() - 1.0).ceil() as usize + 1
            }
            shape => {
                let interp = match shape {
                    CurriculumShape::Constant => 1.0,
                    CurriculumShape::Linear => t,
                    CurriculumShape::Square => t * t,
                    CurriculumShape::Cosine => 0.5 * (1.0 - (std::f64::consts::PI * t).cos()),
                    _ => unreachable!(),
                };
                (interp * (s1 + 1.0 - s0) + s0 - 1.0).ceil() as usize + 1
            }
        };
        Ok(n.max(2))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseIndexSampler<T> {
    Uniform,
    Lognormal { p_mean: T, p_std: T },
}

impl<T: Scalar> NoiseIndexSampler<T> {
    pub fn lognormal(p_mean: T, p_std: T) -> Result<Self> {
        if !(p_std > T::zero()) {
            return Err(invalid(format!("p_std must be positive, got {p_std}")));
        }
        Ok(Self::Lognormal { p_mean, p_std })
    }

    /// Probability of each index `i in 1..n`; entry `j` holds `p(i = j + 1)`.
    pub fn pmf(&self, grid: &NoiseGrid<T>) -> Vec<T> {
        let m = grid.len() - 1;
        match *self {
            Self::Uniform => vec![T::one() / T::from_usize_exact(m); m],
            Self::Lognormal { p_mean, p_std } => {
                let scale = T::SQRT_2() * p_std;
                let cdf: Vec<T> = grid
                    .levels()
                    .iter()
                    .map(|&s| ((s.ln() - p_mean) / scale).erf())
                    .collect();
                let raw: Vec<T> = cdf.windows(2).map(|w| w[1] - w[0]).collect();
                let total = raw.iter().fold(T::zero(), |a, &b| a + b);
                raw.into_iter().map(|p| p / total).collect()
            }
        }
    }
}

/// Cached inverse-CDF table for drawing noise indices on one grid.
#[derive(Debug, Clone)]
pub struct IndexTable<T> {
    pmf: Vec<T>,
    cdf: Vec<f64>,
}

impl<T: Scalar> IndexTable<T> {
    pub fn new(sampler: &NoiseIndexSampler<T>, grid: &NoiseGrid<T>) -> Self {
        let pmf = sampler.pmf(grid);
        let mut acc = 0.0;
        let cdf = pmf
            .iter()
            .map(|p| {
                acc += p.as_f64();
                acc
            })
            .collect();
        Self { pmf, cdf }
    }

    pub fn pmf(&self) -> &[T] {
        &self.pmf
    }

    /// Draws a 1-based index `i in 1..n`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u = random::unit(rng) * self.cdf[self.cdf.len() - 1];
        let j = self.cdf.partition_point(|&c| c <= u);
        j.min(self.cdf.len() - 1) + 1
    }
}

/// One inverse-CDF draw; build an [`IndexTable`] when drawing repeatedly.
pub fn sample_index<T: Scalar, R: Rng + ?Sized>(
    sampler: &NoiseIndexSampler<T>,
    grid: &NoiseGrid<T>,
    rng: &mut R,
) -> usize {
    IndexTable::new(sampler, grid).sample(rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightingFn {
    Uniform,
    /// `1 / (sigma_{i+1} - sigma_i)`.
    InverseGap,
}

impl WeightingFn {
    pub fn weight<T: Scalar>(&self, grid: &NoiseGrid<T>, i: usize) -> Result<T> {
        let hi = grid.len() - 1;
        if i < 1 || i > hi {
            return Err(Error::IndexOutOfRange { index: i, lo: 1, hi });
        }
        Ok(match self {
            Self::Uniform => T::one(),
            Self::InverseGap => T::one() / (grid.sigma(i + 1) - grid.sigma(i)),
        })
    }
}

impl FromStr for WeightingFn {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "inverse_gap" => Ok(Self::InverseGap),
            _ => Err(format!("unknown weighting `{s}`")),
        }
    }
}

impl fmt::Display for WeightingFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::InverseGap => "inverse_gap",
        })
    }
}
