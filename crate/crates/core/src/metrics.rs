//! Distances for the consistency loss, with gradients in the first argument.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric<T> {
    SquaredL2,
    L1,
    /// `sqrt(|x - y|^2 + c^2) - c`.
    PseudoHuber { c: T },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    SquaredL2,
    L1,
    PseudoHuber,
}

impl FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "squared_l2" | "l2" => Ok(Self::SquaredL2),
            "l1" => Ok(Self::L1),
            "pseudo_huber" | "huber" => Ok(Self::PseudoHuber),
            _ => Err(format!("unknown metric `{s}`")),
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SquaredL2 => "squared_l2",
            Self::L1 => "l1",
            Self::PseudoHuber => "pseudo_huber",
        })
    }
}

impl<T: Scalar> Metric<T> {
    pub fn pseudo_huber(c: T) -> Result<Self> {
        if !(c > T::zero()) {
            return Err(invalid(format!("pseudo-Huber c must be positive, got {c}")));
        }
        Ok(Self::PseudoHuber { c })
    }

    pub fn kind(&self) -> MetricKind {
        match self {
            Self::SquaredL2 => MetricKind::SquaredL2,
            Self::L1 => MetricKind::L1,
            Self::PseudoHuber { .. } => MetricKind::PseudoHuber,
        }
    }

    pub fn value(&self, x: &[T], y: &[T]) -> Result<T> {
        check_dims(x, y)?;
        let diff = x.iter().zip(y).map(|(&a, &b)| a - b);
        Ok(match *self {
            Self::SquaredL2 => diff.fold(T::zero(), |acc, d| acc + d * d),
            Self::L1 => diff.fold(T::zero(), |acc, d| acc + d.abs()),
            Self::PseudoHuber { c } => {
                let r2 = diff.fold(T::zero(), |acc, d| acc + d * d);
                pseudo_huber_from_sq(r2, c)
            }
        })
    }

    /// Value and gradient with respect to `x`.
    pub fn value_grad(&self, x: &[T], y: &[T]) -> Result<(T, Vec<T>)> {
        check_dims(x, y)?;
        let diff: Vec<T> = x.iter().zip(y).map(|(&a, &b)| a - b).collect();
        Ok(match *self {
            Self::SquaredL2 => {
                let v = diff.iter().fold(T::zero(), |acc, &d| acc + d * d);
                let two = T::of(2.0);
                (v, diff.into_iter().map(|d| two * d).collect())
            }
            Self::L1 => {
                let v = diff.iter().fold(T::zero(), |acc, &d| acc + d.abs());
                // exact ties get a zero subgradient
                let g = diff
                    .into_iter()
                    .map(|d| {
                        if d > T::zero() {
                            T::one()
                        } else if d < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                (v, g)
            }
            Self::PseudoHuber { c } => {
                let r2 = diff.iter().fold(T::zero(), |acc, &d| acc + d * d);
                let root = (r2 + c * c).sqrt();
                let g = diff.into_iter().map(|d| d / root).collect();
                (pseudo_huber_from_sq(r2, c), g)
            }
        })
    }
}

/// `sqrt(r2 + c^2) - c` written to avoid cancellation when `r2 << c^2`.
fn pseudo_huber_from_sq<T: Scalar>(r2: T, c: T) -> T {
    r2 / ((r2 + c * c).sqrt() + c)
}

fn check_dims<T>(x: &[T], y: &[T]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.is_empty() {
        return Err(invalid("metric needs dimension >= 1"));
    }
    Ok(())
}

/// Dimension heuristic for the pseudo-Huber breadth: `0.00054 * sqrt(d)`.
pub fn huber_c<T: Scalar>(d: usize) -> Result<T> {
    if d < 1 {
        return Err(invalid("data dimensionality must be >= 1"));
    }
    Ok(T::of(0.00054) * T::from_usize_exact(d).sqrt())
}
