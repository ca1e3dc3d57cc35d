//! Small fully connected network `F(x, sigma)` with noise embeddings,
//! inverted dropout and exact reverse-mode gradients.
//!
//! Parameters live in one flat vector. Each dense layer stores its weight
//! matrix input-major (`w[k * out + j]` connects input `k` to output `j`)
//! followed by its bias.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::random;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingKind {
    Fourier,
    Positional,
}

impl FromStr for EmbeddingKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "fourier" => Ok(Self::Fourier),
            "positional" => Ok(Self::Positional),
            _ => Err(format!("unknown embedding `{s}`")),
        }
    }
}

impl fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fourier => "fourier",
            Self::Positional => "positional",
        })
    }
}

/// Sinusoidal embedding of `u = ln(sigma) / 4`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseEmbedding<T> {
    kind: EmbeddingKind,
    scale: T,
    /// Fourier: raw `N(0, 1)` draws. Positional: angular frequencies.
    frequencies: Vec<T>,
}

impl<T: Scalar> NoiseEmbedding<T> {
    pub fn fourier<R: Rng + ?Sized>(dim: usize, scale: T, rng: &mut R) -> Result<Self> {
        check_embedding_dim(dim)?;
        if !(scale > T::zero()) {
            return Err(invalid(format!("Fourier scale must be positive, got {scale}")));
        }
        Ok(Self {
            kind: EmbeddingKind::Fourier,
            scale,
            frequencies: random::normal_vec(rng, dim / 2),
        })
    }

    /// Transformer-style wavelengths `10000^(-j / half)`.
    pub fn positional(dim: usize) -> Result<Self> {
        check_embedding_dim(dim)?;
        let half = dim / 2;
        let frequencies = (0..half)
            .map(|j| T::of(10_000f64.powf(-(j as f64) / half as f64)))
            .collect();
        Ok(Self {
            kind: EmbeddingKind::Positional,
            scale: T::one(),
            frequencies,
        })
    }

    pub fn from_parts(kind: EmbeddingKind, scale: T, frequencies: Vec<T>) -> Result<Self> {
        check_embedding_dim(2 * frequencies.len())?;
        Ok(Self {
            kind,
            scale,
            frequencies,
        })
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn frequencies(&self) -> &[T] {
        &self.frequencies
    }

    pub fn dim(&self) -> usize {
        2 * self.frequencies.len()
    }

    /// Interleaved `(cos, sin)` pairs, one per frequency.
    pub fn embed(&self, sigma: T) -> Vec<T> {
        let mut out = Vec::with_capacity(self.dim());
        self.embed_into(sigma, &mut out);
        out
    }

    fn embed_into(&self, sigma: T, out: &mut Vec<T>) {
        let u = sigma.ln() / T::of(4.0);
        let factor = match self.kind {
            EmbeddingKind::Fourier => T::of(2.0) * T::PI() * self.scale,
            EmbeddingKind::Positional => T::one(),
        };
        for &w in &self.frequencies {
            let (s, c) = (factor * w * u).sin_cos();
            out.push(c);
            out.push(s);
        }
    }
}

fn check_embedding_dim(dim: usize) -> Result<()> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(invalid(format!("embedding dim must be even and positive, got {dim}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Tanh,
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "silu" => Ok(Self::Silu),
            "tanh" => Ok(Self::Tanh),
            _ => Err(format!("unknown activation `{s}`")),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Silu => "silu",
            Self::Tanh => "tanh",
        })
    }
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Self::Silu => x / (T::one() + (-x).exp()),
            Self::Tanh => x.tanh(),
        }
    }

    #[inline]
    fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Self::Silu => {
                let s = T::one() / (T::one() + (-x).exp());
                s * (T::one() + x * (T::one() - s))
            }
            Self::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
        }
    }
}

/// Shape and conditioning of a [`Network`].
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub dropout: f64,
    pub embedding: EmbeddingKind,
    pub embedding_dim: usize,
    pub fourier_scale: f64,
}

impl Topology {
    /// Three hidden layers of 128 with a 32-wide Fourier embedding at scale 0.02.
    pub fn default_for(data_dim: usize) -> Self {
        Self {
            data_dim,
            hidden: vec![128, 128, 128],
            activation: Activation::Silu,
            dropout: 0.0,
            embedding: EmbeddingKind::Fourier,
            embedding_dim: 32,
            fourier_scale: 0.02,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.embedding_dim
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(&self.hidden);
        w.push(self.data_dim);
        w
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 {
            return Err(invalid("network data dimension must be >= 1"));
        }
        if self.hidden.contains(&0) {
            return Err(invalid("hidden widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        check_embedding_dim(self.embedding_dim)?;
        if self.embedding == EmbeddingKind::Fourier && !(self.fourier_scale > 0.0) {
            return Err(invalid("Fourier scale must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl Layer {
    fn weights<'a, T>(&self, p: &'a [T]) -> &'a [T] {
        &p[self.offset..self.offset + self.fan_in * self.fan_out]
    }

    fn bias<'a, T>(&self, p: &'a [T]) -> &'a [T] {
        let start = self.offset + self.fan_in * self.fan_out;
        &p[start..start + self.fan_out]
    }

    fn len(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

/// Dense-layer parameters in matrix form (`weights[k][j]`: input `k` to output `j`).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weights: Vec<Vec<T>>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Identifies a dropout draw. Equal states give equal masks for equal shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutState {
    pub seed: u64,
    pub step: u64,
    /// Batch element (or any other sub-stream) within one step.
    pub stream: u64,
}

impl DropoutState {
    pub fn new(seed: u64, step: u64) -> Self {
        Self {
            seed,
            step,
            stream: 0,
        }
    }

    pub fn for_element(self, stream: u64) -> Self {
        Self { stream, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Origin {
    Own(u64),
    External,
}

/// Activation record of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    origin: Origin,
    /// Input to each dense layer.
    inputs: Vec<Vec<T>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Vec<T>>,
    /// Dropout multipliers per hidden layer (empty when no dropout was applied).
    masks: Vec<Vec<T>>,
}

impl<T> Tape<T> {
    pub fn masks(&self) -> &[Vec<T>] {
        &self.masks
    }

    pub fn input(&self) -> &[T] {
        &self.inputs[0]
    }
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    topology: Topology,
    embedding: NoiseEmbedding<T>,
    layers: Vec<Layer>,
    params: Vec<T>,
    version: u64,
}

impl<T: Scalar> Network<T> {
    /// Random initialization: weights `N(0, 1 / fan_in)`, zero biases.
    pub fn new(topology: Topology, seed: u64) -> Result<Self> {
        topology.validate()?;
        let mut emb_rng = random::stream(seed, 0x454d_4245, 0);
        let embedding = match topology.embedding {
            EmbeddingKind::Fourier => NoiseEmbedding::fourier(
                topology.embedding_dim,
                T::of(topology.fourier_scale),
                &mut emb_rng,
            )?,
            EmbeddingKind::Positional => NoiseEmbedding::positional(topology.embedding_dim)?,
        };
        let layers = layout(&topology);
        let mut rng = random::stream(seed, 0x5041_5241, 0);
        let mut params = vec![T::zero(); topology.param_count()];
        for l in &layers {
            let std = (1.0 / l.fan_in as f64).sqrt();
            for w in &mut params[l.offset..l.offset + l.fan_in * l.fan_out] {
                *w = T::of(std * random::normal::<f64, _>(&mut rng));
            }
        }
        Ok(Self {
            topology,
            embedding,
            layers,
            params,
            version: 0,
        })
    }

    /// Rebuilds a network from stored parts (e.g. a checkpoint).
    pub fn from_parts(topology: Topology, embedding: NoiseEmbedding<T>, params: Vec<T>) -> Result<Self> {
        topology.validate()?;
        if embedding.dim() != topology.embedding_dim {
            return Err(Error::DimensionMismatch {
                expected: topology.embedding_dim,
                got: embedding.dim(),
            });
        }
        if params.len() != topology.param_count() {
            return Err(Error::DimensionMismatch {
                expected: topology.param_count(),
                got: params.len(),
            });
        }
        let layers = layout(&topology);
        Ok(Self {
            topology,
            embedding,
            layers,
            params,
            version: 0,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn embedding(&self) -> &NoiseEmbedding<T> {
        &self.embedding
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn data_dim(&self) -> usize {
        self.topology.data_dim
    }

    pub fn dropout_rate(&self) -> f64 {
        self.topology.dropout
    }

    /// Replaces all parameters; outstanding tapes become stale.
    pub fn set_params(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        self.params.copy_from_slice(params);
        self.version += 1;
        Ok(())
    }

    /// Adds `delta` to the parameters; outstanding tapes become stale.
    pub fn apply_delta(&mut self, delta: &[T]) -> Result<()> {
        if delta.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                got: delta.len(),
            });
        }
        for (p, &d) in self.params.iter_mut().zip(delta) {
            *p += d;
        }
        self.version += 1;
        Ok(())
    }

    /// Splits a flat vector into per-layer matrices.
    pub fn unflatten(&self, flat: &[T]) -> Result<Vec<LayerParams<T>>> {
        if flat.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                got: flat.len(),
            });
        }
        Ok(self
            .layers
            .iter()
            .map(|l| LayerParams {
                weights: l.weights(flat).chunks(l.fan_out).map(<[T]>::to_vec).collect(),
                bias: l.bias(flat).to_vec(),
            })
            .collect())
    }

    pub fn flatten(&self, layers: &[LayerParams<T>]) -> Result<Vec<T>> {
        if layers.len() != self.layers.len() {
            return Err(invalid("layer count does not match topology"));
        }
        let mut flat = Vec::with_capacity(self.params.len());
        for (shape, lp) in self.layers.iter().zip(layers) {
            if lp.weights.len() != shape.fan_in
                || lp.weights.iter().any(|r| r.len() != shape.fan_out)
                || lp.bias.len() != shape.fan_out
            {
                return Err(invalid("layer shape does not match topology"));
            }
            for row in &lp.weights {
                flat.extend_from_slice(row);
            }
            flat.extend_from_slice(&lp.bias);
        }
        Ok(flat)
    }

    /// `F(x, sigma)` with this network's parameters.
    pub fn forward(
        &self,
        x: &[T],
        sigma: T,
        mode: Mode,
        drop: Option<&DropoutState>,
    ) -> Result<(Vec<T>, Tape<T>)> {
        let (out, tape) = self.run(&self.params, x, sigma, mode, drop, true)?;
        let mut tape = tape.expect("tape requested");
        tape.origin = Origin::Own(self.version);
        Ok((out, tape))
    }

    /// Forward pass with an external parameter vector of the same topology.
    ///
    /// The returned tape cannot be fed to [`Network::backward`].
    pub fn forward_with(
        &self,
        params: &[T],
        x: &[T],
        sigma: T,
        mode: Mode,
        drop: Option<&DropoutState>,
    ) -> Result<(Vec<T>, Tape<T>)> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        let (out, tape) = self.run(params, x, sigma, mode, drop, true)?;
        Ok((out, tape.expect("tape requested")))
    }

    /// Forward pass without recording, for evaluation-only callers.
    pub fn output_with(
        &self,
        params: &[T],
        x: &[T],
        sigma: T,
        mode: Mode,
        drop: Option<&DropoutState>,
    ) -> Result<Vec<T>> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        Ok(self.run(params, x, sigma, mode, drop, false)?.0)
    }

    fn run(
        &self,
        params: &[T],
        x: &[T],
        sigma: T,
        mode: Mode,
        drop: Option<&DropoutState>,
        record: bool,
    ) -> Result<(Vec<T>, Option<Tape<T>>)> {
        let d = self.topology.data_dim;
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: x.len(),
            });
        }
        if !(sigma > T::zero()) {
            return Err(invalid(format!("noise level must be positive, got {sigma}")));
        }
        let rate = self.topology.dropout;
        let mut mask_rng = match (mode, rate > 0.0) {
            (Mode::Train, true) => {
                let s = drop.ok_or_else(|| invalid("train mode with dropout needs a DropoutState"))?;
                Some(random::stream(s.seed, s.step, s.stream))
            }
            _ => None,
        };
        let keep_scale = T::of(1.0 / (1.0 - rate));

        let mut h = Vec::with_capacity(self.topology.input_dim());
        h.extend_from_slice(x);
        self.embedding.embed_into(sigma, &mut h);

        let mut tape = record.then(|| Tape {
            origin: Origin::External,
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len() - 1),
            masks: Vec::new(),
        });
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let w = layer.weights(params);
            let mut z = layer.bias(params).to_vec();
            for (k, &hk) in h.iter().enumerate() {
                let row = &w[k * layer.fan_out..(k + 1) * layer.fan_out];
                for (zj, &wj) in z.iter_mut().zip(row) {
                    *zj += hk * wj;
                }
            }
            if li == last {
                if let Some(t) = tape.as_mut() {
                    t.inputs.push(h);
                }
                return Ok((z, tape));
            }
            let mut a: Vec<T> = z.iter().map(|&v| self.topology.activation.apply(v)).collect();
            let mask = mask_rng.as_mut().map(|rng| {
                (0..a.len())
                    .map(|_| {
                        if random::unit(rng) < rate {
                            T::zero()
                        } else {
                            keep_scale
                        }
                    })
                    .collect::<Vec<T>>()
            });
            if let Some(m) = &mask {
                for (ai, &mi) in a.iter_mut().zip(m) {
                    *ai *= mi;
                }
            }
            if let Some(t) = tape.as_mut() {
                t.inputs.push(std::mem::replace(&mut h, a));
                t.pre.push(z);
                if let Some(m) = mask {
                    t.masks.push(m);
                }
            } else {
                h = a;
            }
        }
        unreachable!("network has at least one layer")
    }

    /// Gradient of `output . upstream` with respect to the flat parameters.
    pub fn backward(&self, tape: &Tape<T>, upstream: &[T]) -> Result<Vec<T>> {
        let mut grad = vec![T::zero(); self.params.len()];
        self.backward_accumulate(tape, upstream, &mut grad)?;
        Ok(grad)
    }

    /// Adds the gradient of `output . upstream` into `grad`.
    pub fn backward_accumulate(&self, tape: &Tape<T>, upstream: &[T], grad: &mut [T]) -> Result<()> {
        if tape.origin != Origin::Own(self.version) || tape.inputs.len() != self.layers.len() {
            return Err(Error::StaleTape);
        }
        if upstream.len() != self.topology.data_dim {
            return Err(Error::DimensionMismatch {
                expected: self.topology.data_dim,
                got: upstream.len(),
            });
        }
        if grad.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                got: grad.len(),
            });
        }
        let mut delta = upstream.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = self.layers[li];
            let input = &tape.inputs[li];
            let (gw, gb) = grad[layer.offset..layer.offset + layer.len()]
                .split_at_mut(layer.fan_in * layer.fan_out);
            for (b, &dj) in gb.iter_mut().zip(&delta) {
                *b += dj;
            }
            for (k, &hk) in input.iter().enumerate() {
                if hk == T::zero() {
                    continue;
                }
                let row = &mut gw[k * layer.fan_out..(k + 1) * layer.fan_out];
                for (g, &dj) in row.iter_mut().zip(&delta) {
                    *g += hk * dj;
                }
            }
            if li == 0 {
                break;
            }
            let w = layer.weights(&self.params);
            let pre = &tape.pre[li - 1];
            let mask = tape.masks.get(li - 1);
            let mut next = vec![T::zero(); layer.fan_in];
            for (k, nk) in next.iter_mut().enumerate() {
                let row = &w[k * layer.fan_out..(k + 1) * layer.fan_out];
                let mut acc = row.iter().zip(&delta).fold(T::zero(), |a, (&wj, &dj)| a + wj * dj);
                if let Some(m) = mask {
                    acc *= m[k];
                }
                *nk = acc * self.topology.activation.derivative(pre[k]);
            }
            delta = next;
        }
        Ok(())
    }
}

fn layout(t: &Topology) -> Vec<Layer> {
    let mut offset = 0;
    t.widths()
        .windows(2)
        .map(|p| {
            let l = Layer {
                fan_in: p[0],
                fan_out: p[1],
                offset,
            };
            offset += l.len();
            l
        })
        .collect()
}

/// Settings for [`grad_check_with`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step, relative to `max(1, |theta_j|)`.
    pub step: f64,
    /// Floor on the denominator of the relative error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-8,
        }
    }
}

/// Worst relative error between backprop and central differences over
/// `trials` random (input, noise level, upstream, coordinate) draws.
pub fn grad_check<T: Scalar, R: Rng + ?Sized>(net: &Network<T>, trials: usize, rng: &mut R) -> Result<f64> {
    grad_check_with(net, trials, rng, GradCheckOptions::default())
}

pub fn grad_check_with<T: Scalar, R: Rng + ?Sized>(
    net: &Network<T>,
    trials: usize,
    rng: &mut R,
    opts: GradCheckOptions,
) -> Result<f64> {
    if trials == 0 {
        return Err(invalid("grad check needs at least one trial"));
    }
    let d = net.data_dim();
    let mut worst = 0.0f64;
    let mut probe = net.params().to_vec();
    for _ in 0..trials {
        let sigma = T::of((random::unit(rng) * (80f64.ln() - 0.002f64.ln()) + 0.002f64.ln()).exp());
        let x: Vec<T> = random::normal_vec(rng, d);
        let up: Vec<T> = random::normal_vec(rng, d);
        let drop = DropoutState::new(rng.random(), rng.random());
        let j = rng.random_range(0..net.param_count());

        let (_, tape) = net.forward(&x, sigma, Mode::Train, Some(&drop))?;
        let analytic = net.backward(&tape, &up)?[j].as_f64();

        let objective = |p: &[T]| -> Result<f64> {
            let out = net.output_with(p, &x, sigma, Mode::Train, Some(&drop))?;
            Ok(out.iter().zip(&up).map(|(&o, &u)| (o * u).as_f64()).sum())
        };
        let theta = probe[j];
        let h = opts.step * theta.as_f64().abs().max(1.0);
        probe[j] = theta + T::of(h);
        let plus = objective(&probe)?;
        probe[j] = theta - T::of(h);
        let minus = objective(&probe)?;
        probe[j] = theta;
        let numeric = (plus - minus) / (2.0 * h);

        let denom = analytic.abs().max(numeric.abs()).max(opts.floor);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(worst)
}
