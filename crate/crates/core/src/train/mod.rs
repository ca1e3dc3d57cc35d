//! Curriculum-driven consistency training.

mod loss;
mod optim;

pub use loss::{cm_loss_exact_and_grad, ct_loss_and_grad, ct_loss_traced, Batch, LossSpec, PairTrace};
pub use optim::{ema_update, optimizer_step, Moments, RAdam};

use std::fmt;
use std::str::FromStr;

use crate::consistency::ConsistencyModel;
use crate::error::{invalid, Error, Result};
use crate::metrics::{huber_c, Metric};
use crate::net::{DropoutState, Network, Topology};
use crate::random;
use crate::scalar::{norm, Scalar};
use crate::schedules::{
    Curriculum, CurriculumShape, IndexTable, NoiseGrid, NoiseIndexSampler, Spacing, WeightingFn,
};
use crate::synthetic::SyntheticDistribution;

const DATA_STREAM: u64 = 0x4441_5441;
const NOISE_STREAM: u64 = 0x4e4f_4953;
const INDEX_STREAM: u64 = 0x494e_4458;
const DROPOUT_SEED: u64 = 0x4452_4f50;
const INIT_SEED: u64 = 0x494e_4954;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TeacherRule<T> {
    /// The teacher is the current student, `theta_minus = theta`.
    ZeroEma,
    /// Legacy schedule `mu(k) = exp(s0 ln(mu0) / N(k))`.
    Ema { mu0: T },
}

impl<T: Scalar> TeacherRule<T> {
    /// Teacher decay rate at a step with `n` levels.
    pub fn rate(&self, s0: usize, n: usize) -> T {
        match *self {
            Self::ZeroEma => T::zero(),
            Self::Ema { mu0 } => (T::from_usize_exact(s0) * mu0.ln() / T::from_usize_exact(n)).exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Ct,
    CmExactScore,
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ct" => Ok(Self::Ct),
            "cm_exact_score" => Ok(Self::CmExactScore),
            _ => Err(invalid(format!("unknown objective '{s}'"))),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ct => "ct",
            Self::CmExactScore => "cm_exact_score",
        })
    }
}

/// Noise-grid parameters; the level count comes from the curriculum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec<T> {
    pub sigma_min: T,
    pub sigma_max: T,
    pub rho: T,
    pub spacing: Spacing,
}

impl<T: Scalar> GridSpec<T> {
    pub fn build(&self, n: usize) -> Result<NoiseGrid<T>> {
        NoiseGrid::new(n, self.sigma_min, self.sigma_max, self.rho, self.spacing)
    }
}

impl<T: Scalar> Default for GridSpec<T> {
    fn default() -> Self {
        Self {
            sigma_min: T::of(0.002),
            sigma_max: T::of(80.0),
            rho: T::of(7.0),
            spacing: Spacing::RhoInterpolated,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig<T> {
    pub distribution: SyntheticDistribution<T>,
    pub grid: GridSpec<T>,
    pub curriculum: CurriculumShape,
    pub s0: usize,
    pub s1: usize,
    pub sampler: NoiseIndexSampler<T>,
    pub weighting: WeightingFn,
    pub metric: Metric<T>,
    pub topology: Topology,
    pub sigma_data: T,
    pub batch_size: usize,
    pub lr: T,
    /// Total optimizer steps `K`.
    pub steps: usize,
    pub student_ema: T,
    pub objective: Objective,
    pub teacher: TeacherRule<T>,
    pub optimizer: RAdam<T>,
    pub seed: u64,
}

impl<T: Scalar> TrainConfig<T> {
    /// Improved-training defaults at desk scale for the given data.
    pub fn new(distribution: SyntheticDistribution<T>) -> Result<Self> {
        let d = distribution.dim();
        Ok(Self {
            grid: GridSpec::default(),
            curriculum: CurriculumShape::Exponential,
            s0: 10,
            s1: 1280,
            sampler: NoiseIndexSampler::lognormal(T::of(-1.1), T::of(2.0))?,
            weighting: WeightingFn::InverseGap,
            metric: Metric::pseudo_huber(huber_c(d)?)?,
            topology: Topology::default_for(d),
            sigma_data: T::of(0.5),
            batch_size: 256,
            lr: T::of(1e-4),
            steps: 20_000,
            student_ema: T::of(0.9999),
            objective: Objective::Ct,
            teacher: TeacherRule::ZeroEma,
            optimizer: RAdam::default(),
            seed: 0,
            distribution,
        })
    }

    /// The curriculum over this run's steps (`None` when `steps == 0`).
    pub fn schedule(&self) -> Result<Option<Curriculum>> {
        if self.steps == 0 {
            Curriculum::new(self.curriculum, self.s0, self.s1, 1)?;
            return Ok(None);
        }
        Curriculum::new(self.curriculum, self.s0, self.s1, self.steps).map(Some)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.topology.validate()?;
        self.optimizer.validate()?;
        if self.topology.data_dim != self.distribution.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.distribution.dim(),
                got: self.topology.data_dim,
            });
        }
        let g = &self.grid;
        if !(g.sigma_min > T::zero() && g.sigma_max > g.sigma_min) {
            return Err(invalid("grid needs 0 < sigma_min < sigma_max"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(self.lr > T::zero()) {
            return Err(invalid("learning rate must be positive"));
        }
        if !(self.student_ema >= T::zero() && self.student_ema < T::one()) {
            return Err(invalid("student EMA rate must be in [0, 1)"));
        }
        if let TeacherRule::Ema { mu0 } = self.teacher {
            if !(mu0 > T::zero() && mu0 < T::one()) {
                return Err(invalid("teacher mu0 must be in (0, 1)"));
            }
        }
        if !(self.sigma_data > T::zero()) {
            return Err(invalid("sigma_data must be positive"));
        }
        Ok(())
    }

    pub fn loss_spec(&self) -> LossSpec<T> {
        LossSpec {
            metric: self.metric,
            weighting: self.weighting,
        }
    }

    /// Freshly initialized model for this config.
    pub fn init_model(&self) -> Result<ConsistencyModel<T>> {
        let net = Network::new(self.topology.clone(), random::mix64(self.seed ^ INIT_SEED))?;
        ConsistencyModel::new(net, self.grid.sigma_min, self.grid.sigma_max, self.sigma_data)
    }
}

#[derive(Debug, Clone)]
pub struct TrainState<T> {
    /// Student; its network parameters are `theta`.
    pub model: ConsistencyModel<T>,
    pub ema: Vec<T>,
    /// Stored teacher parameters; `None` means the teacher is the student.
    pub teacher: Option<Vec<T>>,
    pub moments: Moments<T>,
    /// Number of completed steps.
    pub step: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn init(config: &TrainConfig<T>) -> Result<Self> {
        let model = config.init_model()?;
        let params = model.network().params().to_vec();
        Ok(Self {
            teacher: match config.teacher {
                TeacherRule::ZeroEma => None,
                TeacherRule::Ema { .. } => Some(params.clone()),
            },
            moments: Moments::zeros(params.len()),
            ema: params,
            model,
            step: 0,
        })
    }

    pub fn params(&self) -> &[T] {
        self.model.network().params()
    }

    pub fn teacher_params(&self) -> &[T] {
        self.teacher.as_deref().unwrap_or_else(|| self.params())
    }

    /// The student-EMA model used for sampling.
    pub fn ema_model(&self) -> Result<ConsistencyModel<T>> {
        self.model.with_params(&self.ema)
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub n_levels: usize,
    pub loss: f64,
    pub update_norm: f64,
    pub lr: f64,
}

/// Step-by-step driver; callers that need to react to failures (e.g. write a
/// snapshot) use this instead of [`train`].
pub struct Trainer<T> {
    config: TrainConfig<T>,
    schedule: Option<Curriculum>,
    state: TrainState<T>,
    cache: Option<(usize, NoiseGrid<T>, IndexTable<T>)>,
    log: Vec<LogRow>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig<T>) -> Result<Self> {
        config.validate()?;
        let state = TrainState::init(&config)?;
        Self::resume(config, state)
    }

    pub fn resume(config: TrainConfig<T>, state: TrainState<T>) -> Result<Self> {
        config.validate()?;
        if state.params().len() != config.topology.param_count() {
            return Err(invalid("state does not match the configured topology"));
        }
        Ok(Self {
            schedule: config.schedule()?,
            config,
            state,
            cache: None,
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig<T> {
        &self.config
    }

    pub fn state(&self) -> &TrainState<T> {
        &self.state
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.config.steps
    }

    pub fn into_parts(self) -> (TrainState<T>, Vec<LogRow>) {
        (self.state, self.log)
    }

    fn grid_for(&mut self, n: usize) -> Result<()> {
        if self.cache.as_ref().map(|c| c.0) != Some(n) {
            let grid = self.config.grid.build(n)?;
            let table = IndexTable::new(&self.config.sampler, &grid);
            self.cache = Some((n, grid, table));
        }
        Ok(())
    }

    /// Runs one optimizer step.
    pub fn step(&mut self) -> Result<LogRow> {
        let k = self.state.step;
        let schedule = match self.schedule {
            Some(s) if k < self.config.steps => s,
            _ => return Err(invalid("training already finished")),
        };
        let n = schedule.n_levels(k)?;
        self.grid_for(n)?;
        let (_, grid, table) = self.cache.as_ref().expect("grid cached");
        let cfg = &self.config;
        let bsz = cfg.batch_size;
        let d = cfg.distribution.dim();
        let seed = cfg.seed;

        let x = cfg.distribution.sample(bsz, &mut random::stream(seed, DATA_STREAM, k as u64));
        let mut noise = random::stream(seed, NOISE_STREAM, k as u64);
        let z: Vec<Vec<T>> = (0..bsz).map(|_| random::normal_vec(&mut noise, d)).collect();
        let mut idx_rng = random::stream(seed, INDEX_STREAM, k as u64);
        let i: Vec<usize> = (0..bsz).map(|_| table.sample(&mut idx_rng)).collect();
        let batch = Batch {
            grid,
            x: &x,
            z: &z,
            i: &i,
            drop: Some(DropoutState::new(random::mix64(seed ^ DROPOUT_SEED), k as u64)),
        };

        let st = &self.state;
        let spec = cfg.loss_spec();
        let (loss, grad) = match cfg.objective {
            Objective::Ct => ct_loss_and_grad(&st.model, st.teacher_params(), &spec, &batch)?,
            Objective::CmExactScore => {
                cm_loss_exact_and_grad(&st.model, st.teacher_params(), &spec, &cfg.distribution, &batch)?
            }
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: k,
                snapshot: format!(
                    "N={n}, loss={loss}, |theta|={:e}, |grad|={:e}",
                    norm(st.params()).as_f64(),
                    norm(&grad).as_f64()
                ),
            });
        }

        let delta = optimizer_step(&cfg.optimizer, &mut self.state.moments, &grad, cfg.lr)?;
        let update_norm = norm(&delta).as_f64();
        self.state.model.network_mut().apply_delta(&delta)?;
        let params = self.state.model.network().params();
        ema_update(&mut self.state.ema, params, cfg.student_ema)?;
        if let Some(teacher) = self.state.teacher.as_mut() {
            ema_update(teacher, params, cfg.teacher.rate(cfg.s0, n))?;
        }
        self.state.step += 1;
        let row = LogRow {
            step: k,
            n_levels: n,
            loss: loss.as_f64(),
            update_norm,
            lr: cfg.lr.as_f64(),
        };
        self.log.push(row);
        Ok(row)
    }

    /// Steps until `steps` are done.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(())
    }
}

/// Result of a complete run.
#[derive(Debug, Clone)]
pub struct TrainRun<T> {
    pub state: TrainState<T>,
    pub log: Vec<LogRow>,
}

impl<T> TrainRun<T> {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.loss).collect()
    }

    pub fn update_norms(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.update_norm).collect()
    }
}

pub fn train<T: Scalar>(config: &TrainConfig<T>) -> Result<TrainRun<T>> {
    let mut trainer = Trainer::new(config.clone())?;
    trainer.run()?;
    let (state, log) = trainer.into_parts();
    Ok(TrainRun { state, log })
}

/// Variance of `values` after rescaling them to unit mean.
pub fn normalized_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v / mean - 1.0).powi(2)).sum::<f64>() / n
}

#[cfg(test)]
mod tests;
