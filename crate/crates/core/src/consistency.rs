//! Consistency-model wrapper `f(x, sigma) = c_skip x + c_out F(c_in x, sigma)`
//! and one-step / multistep samplers.

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::net::{DropoutState, Mode, Network, Tape};
use crate::random;
use crate::scalar::Scalar;
use crate::schedules::NoiseGrid;
use crate::synthetic::{ScoreSource, SyntheticDistribution};

/// `(c_skip, c_out)`; exactly `(1, 0)` at `sigma_min`.
pub fn skip_scales<T: Scalar>(sigma: T, sigma_min: T, sigma_data: T) -> Result<(T, T)> {
    if !(sigma >= sigma_min) {
        return Err(Error::SigmaOutOfRange {
            sigma: sigma.as_f64(),
            lo: sigma_min.as_f64(),
            hi: f64::INFINITY,
        });
    }
    let d2 = sigma_data * sigma_data;
    let gap = sigma - sigma_min;
    let c_skip = d2 / (gap * gap + d2);
    let c_out = sigma_data * gap / (d2 + sigma * sigma).sqrt();
    Ok((c_skip, c_out))
}

/// Anything usable as a consistency function by the samplers.
pub trait ConsistencyFn<T> {
    fn dim(&self) -> usize;
    fn sigma_min(&self) -> T;
    fn apply(&self, x: &[T], sigma: T) -> Result<Vec<T>>;
}

#[derive(Debug, Clone)]
pub struct ConsistencyModel<T> {
    network: Network<T>,
    sigma_min: T,
    sigma_max: T,
    sigma_data: T,
}

/// Record of a consistency forward pass, for [`ConsistencyModel::backward`].
#[derive(Debug, Clone)]
pub struct ConsistencyTape<T> {
    net: Tape<T>,
    c_out: T,
}

impl<T> ConsistencyTape<T> {
    pub fn network_tape(&self) -> &Tape<T> {
        &self.net
    }
}

impl<T: Scalar> ConsistencyModel<T> {
    pub fn new(network: Network<T>, sigma_min: T, sigma_max: T, sigma_data: T) -> Result<Self> {
        if !(sigma_min > T::zero() && sigma_max >= sigma_min) {
            return Err(invalid("need 0 < sigma_min <= sigma_max"));
        }
        if !(sigma_data > T::zero()) {
            return Err(invalid("sigma_data must be positive"));
        }
        Ok(Self {
            network,
            sigma_min,
            sigma_max,
            sigma_data,
        })
    }

    pub fn network(&self) -> &Network<T> {
        &self.network
    }

    pub fn network_mut(&mut self) -> &mut Network<T> {
        &mut self.network
    }

    pub fn sigma_max(&self) -> T {
        self.sigma_max
    }

    pub fn sigma_data(&self) -> T {
        self.sigma_data
    }

    /// Input scale `1 / sqrt(sigma^2 + sigma_data^2)` applied before the network.
    pub fn input_scale(&self, sigma: T) -> T {
        T::one() / (sigma * sigma + self.sigma_data * self.sigma_data).sqrt()
    }

    fn check_sigma(&self, sigma: T) -> Result<()> {
        if !(sigma >= self.sigma_min && sigma <= self.sigma_max) {
            return Err(Error::SigmaOutOfRange {
                sigma: sigma.as_f64(),
                lo: self.sigma_min.as_f64(),
                hi: self.sigma_max.as_f64(),
            });
        }
        Ok(())
    }

    fn combine(&self, x: &[T], sigma: T, f: &[T]) -> Result<(Vec<T>, T)> {
        let (cs, co) = skip_scales(sigma, self.sigma_min, self.sigma_data)?;
        Ok((x.iter().zip(f).map(|(&xi, &fi)| cs * xi + co * fi).collect(), co))
    }

    fn scaled(&self, x: &[T], sigma: T) -> Vec<T> {
        let c_in = self.input_scale(sigma);
        x.iter().map(|&v| c_in * v).collect()
    }

    /// `f(x, sigma)` with the model's own parameters, recording a tape.
    pub fn forward(
        &self,
        x: &[T],
        sigma: T,
        mode: Mode,
        drop: Option<&DropoutState>,
    ) -> Result<(Vec<T>, ConsistencyTape<T>)> {
        self.check_sigma(sigma)?;
        let (f, net) = self.network.forward(&self.scaled(x, sigma), sigma, mode, drop)?;
        let (out, c_out) = self.combine(x, sigma, &f)?;
        Ok((out, ConsistencyTape { net, c_out }))
    }

    /// `f(x, sigma)` under another parameter vector (e.g. a teacher), no tape.
    pub fn output_with(
        &self,
        params: &[T],
        x: &[T],
        sigma: T,
        mode: Mode,
        drop: Option<&DropoutState>,
    ) -> Result<Vec<T>> {
        self.check_sigma(sigma)?;
        let f = self
            .network
            .output_with(params, &self.scaled(x, sigma), sigma, mode, drop)?;
        Ok(self.combine(x, sigma, &f)?.0)
    }

    /// Like [`Self::output_with`] but also returns the network tape (masks etc.).
    pub fn traced_with(
        &self,
        params: &[T],
        x: &[T],
        sigma: T,
        mode: Mode,
        drop: Option<&DropoutState>,
    ) -> Result<(Vec<T>, Tape<T>)> {
        self.check_sigma(sigma)?;
        let (f, tape) = self
            .network
            .forward_with(params, &self.scaled(x, sigma), sigma, mode, drop)?;
        Ok((self.combine(x, sigma, &f)?.0, tape))
    }

    /// Gradient of `f . upstream` with respect to the network parameters.
    pub fn backward(&self, tape: &ConsistencyTape<T>, upstream: &[T]) -> Result<Vec<T>> {
        let mut grad = vec![T::zero(); self.network.param_count()];
        self.backward_accumulate(tape, upstream, &mut grad)?;
        Ok(grad)
    }

    pub fn backward_accumulate(
        &self,
        tape: &ConsistencyTape<T>,
        upstream: &[T],
        grad: &mut [T],
    ) -> Result<()> {
        let scaled: Vec<T> = upstream.iter().map(|&u| u * tape.c_out).collect();
        self.network.backward_accumulate(&tape.net, &scaled, grad)
    }

    /// Same model with different parameters.
    pub fn with_params(&self, params: &[T]) -> Result<Self> {
        let mut m = self.clone();
        m.network.set_params(params)?;
        Ok(m)
    }
}

impl<T: Scalar> ConsistencyFn<T> for ConsistencyModel<T> {
    fn dim(&self) -> usize {
        self.network.data_dim()
    }

    fn sigma_min(&self) -> T {
        self.sigma_min
    }

    fn apply(&self, x: &[T], sigma: T) -> Result<Vec<T>> {
        self.output_with(self.network.params(), x, sigma, Mode::Eval, None)
    }
}

/// The exact consistency function of a single-component synthetic distribution.
#[derive(Debug, Clone)]
pub struct OracleConsistency<T> {
    pub distribution: SyntheticDistribution<T>,
    pub sigma_min: T,
}

impl<T: Scalar> ConsistencyFn<T> for OracleConsistency<T> {
    fn dim(&self) -> usize {
        self.distribution.dim()
    }

    fn sigma_min(&self) -> T {
        self.sigma_min
    }

    fn apply(&self, x: &[T], sigma: T) -> Result<Vec<T>> {
        self.distribution.true_consistency(x, sigma, self.sigma_min)
    }
}

/// Score implied by treating `f(x, sigma)` as a denoiser: `(f - x) / sigma^2`.
pub struct ModelScore<'a, T, F: ?Sized> {
    pub model: &'a F,
    _marker: std::marker::PhantomData<T>,
}

impl<'a, T, F: ?Sized> ModelScore<'a, T, F> {
    pub fn new(model: &'a F) -> Self {
        Self {
            model,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Scalar, F: ConsistencyFn<T> + ?Sized> ScoreSource<T> for ModelScore<'_, T, F> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn score(&self, x: &[T], sigma: T) -> Result<Vec<T>> {
        let d = self.model.apply(x, sigma)?;
        let inv = T::one() / (sigma * sigma);
        Ok(d.iter().zip(x).map(|(&di, &xi)| (di - xi) * inv).collect())
    }
}

/// `x = f(z, sigma_max)` with `z ~ N(0, sigma_max^2 I)`.
pub fn one_step_sample<T: Scalar, F: ConsistencyFn<T> + ?Sized, R: Rng + ?Sized>(
    model: &F,
    n: usize,
    sigma_max: T,
    rng: &mut R,
) -> Result<Vec<Vec<T>>> {
    let d = model.dim();
    (0..n)
        .map(|_| {
            let z: Vec<T> = random::normal_vec::<T, _>(rng, d).into_iter().map(|v| v * sigma_max).collect();
            model.apply(&z, sigma_max)
        })
        .collect()
}

/// Checks `1 = i_1 < ... < i_K = N` against the grid.
pub fn validate_indices<T: Scalar>(grid: &NoiseGrid<T>, indices: &[usize]) -> Result<()> {
    if indices.len() < 2 {
        return Err(invalid("multistep schedule needs at least two indices"));
    }
    if indices[0] != 1 || *indices.last().unwrap() != grid.len() {
        return Err(invalid(format!(
            "multistep schedule must start at 1 and end at {}, got {indices:?}",
            grid.len()
        )));
    }
    if indices.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid(format!("indices must be strictly increasing, got {indices:?}")));
    }
    Ok(())
}

/// `[1, j, N]` with `j` the level closest to `sigma_mid` (kept strictly inside).
pub fn two_step_indices<T: Scalar>(grid: &NoiseGrid<T>, sigma_mid: T) -> Result<Vec<usize>> {
    let n = grid.len();
    if n < 3 {
        return Err(invalid("two-step sampling needs a grid of at least 3 levels"));
    }
    let j = grid.nearest_index(sigma_mid).clamp(2, n - 1);
    Ok(vec![1, j, n])
}

/// Multistep consistency sampling over the grid levels named by `indices`.
///
/// Draws the initial noise for all samples first (matching
/// [`one_step_sample`]); zero-variance refresh steps draw nothing.
pub fn multistep_sample<T: Scalar, F: ConsistencyFn<T> + ?Sized, R: Rng + ?Sized>(
    model: &F,
    grid: &NoiseGrid<T>,
    indices: &[usize],
    n: usize,
    rng: &mut R,
) -> Result<Vec<Vec<T>>> {
    validate_indices(grid, indices)?;
    if grid.sigma(1) != model.sigma_min() {
        return Err(invalid("grid sigma_min does not match the model"));
    }
    let sigma_min = model.sigma_min();
    let top = grid.sigma(*indices.last().unwrap());
    let mut xs = one_step_sample(model, n, top, rng)?;
    // index 1 is skipped: its refresh has zero variance and f is the identity there
    for &i in indices[1..indices.len() - 1].iter().rev() {
        let s = grid.sigma(i);
        let refresh = (s * s - sigma_min * sigma_min).max(T::zero()).sqrt();
        for x in xs.iter_mut() {
            for v in x.iter_mut() {
                *v += refresh * random::normal::<T, _>(rng);
            }
            *x = model.apply(x, s)?;
        }
    }
    Ok(xs)
}
