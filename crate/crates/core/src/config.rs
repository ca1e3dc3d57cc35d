//! Experiment configuration as flat `section.key = value` text.
//!
//! Lines starting with `#` are comments. Every key except the `data.*`
//! block has a default, and [`ExperimentConfig::render`] writes all of them
//! out so a saved config fully describes its run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::{huber_c, Metric, MetricKind};
use crate::net::{Activation, EmbeddingKind, Topology};
use crate::schedules::{CurriculumShape, NoiseIndexSampler, Spacing, WeightingFn};
use crate::synthetic::{Component, DistributionKind, SyntheticDistribution};
use crate::train::{GridSpec, Objective, RAdam, TeacherRule, TrainConfig};

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "ICTLAB_OUTPUT_ROOT";

const DEFAULT_P_MEAN: f64 = -1.1;
const DEFAULT_P_STD: f64 = 2.0;
const DEFAULT_MU0: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub projections: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            projections: 64,
            samples: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig<f64>,
    /// Pseudo-Huber `c` comes from the dimension heuristic rather than a number.
    pub metric_c_auto: bool,
    pub eval: EvalSettings,
    pub output_dir: String,
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

struct Fields {
    map: BTreeMap<String, (String, usize)>,
}

impl Fields {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(format!("line {}: expected 'key = value'", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || !k.contains('.') {
                return Err(cfg_err(format!("line {}: key '{k}' must be 'section.key'", n + 1)));
            }
            if map.insert(k.to_string(), (v.to_string(), n + 1)).is_some() {
                return Err(cfg_err(format!("line {}: duplicate key '{k}'", n + 1)));
            }
        }
        Ok(Self { map })
    }

    fn take<V: FromStr>(&mut self, key: &str) -> Result<Option<V>>
    where
        V::Err: std::fmt::Display,
    {
        match self.map.remove(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|e| cfg_err(format!("line {line}: bad value '{v}' for {key}: {e}"))),
        }
    }

    fn get<V: FromStr>(&mut self, key: &str, default: V) -> Result<V>
    where
        V::Err: std::fmt::Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    fn require<V: FromStr>(&mut self, key: &str) -> Result<V>
    where
        V::Err: std::fmt::Display,
    {
        self.take(key)?.ok_or_else(|| cfg_err(format!("missing required key {key}")))
    }

    fn list(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some((v, line)) => v
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|e| cfg_err(format!("line {line}: bad list '{v}' for {key}: {e}"))),
        }
    }

    fn finish(self) -> Result<()> {
        if let Some((k, (_, line))) = self.map.into_iter().next() {
            return Err(cfg_err(format!("line {line}: unknown key '{k}'")));
        }
        Ok(())
    }
}

fn parse_distribution(f: &mut Fields) -> Result<SyntheticDistribution<f64>> {
    let kind: DistributionKind = f.require("data.kind")?;
    let dim: usize = f.require("data.dim")?;
    let count: usize = f.get("data.components", 1)?;
    let mut comps = Vec::with_capacity(count);
    for j in 0..count {
        let weight = f.get(&format!("data.component.{j}.weight"), 1.0 / count as f64)?;
        let mean = f
            .list(&format!("data.component.{j}.mean"))?
            .ok_or_else(|| cfg_err(format!("missing data.component.{j}.mean")))?;
        if mean.len() != dim {
            return Err(cfg_err(format!(
                "data.component.{j}.mean has {} entries, data.dim is {dim}",
                mean.len()
            )));
        }
        let default_std = if kind == DistributionKind::Delta { 0.0 } else { 1.0 };
        let stddev = f.get(&format!("data.component.{j}.stddev"), default_std)?;
        comps.push(Component { weight, mean, stddev });
    }
    SyntheticDistribution::new(kind, comps)
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ")
}

impl ExperimentConfig {
    /// Defaults around the given data distribution.
    pub fn new(distribution: SyntheticDistribution<f64>) -> Result<Self> {
        Ok(Self {
            train: TrainConfig::new(distribution)?,
            metric_c_auto: true,
            eval: EvalSettings::default(),
            output_dir: "runs/default".to_string(),
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut f = Fields::parse(text)?;
        let distribution = parse_distribution(&mut f)?;
        let dim = distribution.dim();
        let mut t = TrainConfig::new(distribution)?;

        let g = GridSpec::<f64>::default();
        t.grid = GridSpec {
            sigma_min: f.get("grid.sigma_min", g.sigma_min)?,
            sigma_max: f.get("grid.sigma_max", g.sigma_max)?,
            rho: f.get("grid.rho", g.rho)?,
            spacing: f.get::<Spacing>("grid.spacing", g.spacing)?,
        };

        t.curriculum = f.get::<CurriculumShape>("curriculum.shape", t.curriculum)?;
        t.s0 = f.get("curriculum.s0", t.s0)?;
        t.s1 = f.get("curriculum.s1", t.s1)?;

        let sampler_kind: String = f.get("sampler.kind", "lognormal".to_string())?;
        let p_mean = f.get("sampler.p_mean", DEFAULT_P_MEAN)?;
        let p_std = f.get("sampler.p_std", DEFAULT_P_STD)?;
        t.sampler = match sampler_kind.as_str() {
            "lognormal" => NoiseIndexSampler::lognormal(p_mean, p_std)?,
            "uniform" => NoiseIndexSampler::Uniform,
            other => return Err(cfg_err(format!("unknown sampler.kind '{other}'"))),
        };

        t.weighting = f.get::<WeightingFn>("weighting.kind", t.weighting)?;

        let metric_kind = f.get::<MetricKind>("metric.kind", MetricKind::PseudoHuber)?;
        let c_text: String = f.get("metric.c", "auto".to_string())?;
        let metric_c_auto = c_text == "auto";
        t.metric = match metric_kind {
            MetricKind::SquaredL2 => Metric::SquaredL2,
            MetricKind::L1 => Metric::L1,
            MetricKind::PseudoHuber => {
                let c = if metric_c_auto {
                    huber_c(dim)?
                } else {
                    c_text
                        .parse::<f64>()
                        .map_err(|e| cfg_err(format!("bad metric.c '{c_text}': {e}")))?
                };
                Metric::pseudo_huber(c)?
            }
        };

        let top = Topology::default_for(dim);
        let hidden = match f.list("net.hidden")? {
            Some(v) => v
                .into_iter()
                .map(|w| {
                    if w >= 1.0 && w.fract() == 0.0 {
                        Ok(w as usize)
                    } else {
                        Err(cfg_err(format!("net.hidden widths must be positive integers, got {w}")))
                    }
                })
                .collect::<Result<Vec<_>>>()?,
            None => top.hidden.clone(),
        };
        t.topology = Topology {
            data_dim: dim,
            hidden,
            activation: f.get::<Activation>("net.activation", top.activation)?,
            dropout: f.get("net.dropout", top.dropout)?,
            embedding: f.get::<EmbeddingKind>("net.embedding", top.embedding)?,
            embedding_dim: f.get("net.embedding_dim", top.embedding_dim)?,
            fourier_scale: f.get("net.fourier_scale", top.fourier_scale)?,
        };

        t.sigma_data = f.get("model.sigma_data", t.sigma_data)?;

        t.objective = f.get::<Objective>("train.objective", t.objective)?;
        let teacher: String = f.get("train.teacher", "zero_ema".to_string())?;
        let mu0 = f.get("train.mu0", DEFAULT_MU0)?;
        t.teacher = match teacher.as_str() {
            "zero_ema" => TeacherRule::ZeroEma,
            "ema" => TeacherRule::Ema { mu0 },
            other => return Err(cfg_err(format!("unknown train.teacher '{other}'"))),
        };
        t.batch_size = f.get("train.batch_size", t.batch_size)?;
        t.lr = f.get("train.lr", t.lr)?;
        t.steps = f.get("train.steps", t.steps)?;
        t.student_ema = f.get("train.student_ema", t.student_ema)?;
        t.seed = f.get("train.seed", t.seed)?;

        let o = RAdam::<f64>::default();
        t.optimizer = RAdam {
            beta1: f.get("optimizer.beta1", o.beta1)?,
            beta2: f.get("optimizer.beta2", o.beta2)?,
            eps: f.get("optimizer.eps", o.eps)?,
        };

        let e = EvalSettings::default();
        let eval = EvalSettings {
            projections: f.get("eval.projections", e.projections)?,
            samples: f.get("eval.samples", e.samples)?,
            seed: f.get("eval.seed", e.seed)?,
        };
        let output_dir = f.get("output.dir", "runs/default".to_string())?;
        f.finish()?;
        t.validate().map_err(|e| cfg_err(e.to_string()))?;
        if eval.projections == 0 || eval.samples == 0 {
            return Err(cfg_err("eval.projections and eval.samples must be positive"));
        }
        Ok(Self {
            train: t,
            metric_c_auto,
            eval,
            output_dir,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn render(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let d = &t.distribution;
        kv("data.kind", d.kind().to_string());
        kv("data.dim", d.dim().to_string());
        kv("data.components", d.components().len().to_string());
        for (j, c) in d.components().iter().enumerate() {
            kv(&format!("data.component.{j}.weight"), format!("{:?}", c.weight));
            kv(&format!("data.component.{j}.mean"), join(&c.mean));
            kv(&format!("data.component.{j}.stddev"), format!("{:?}", c.stddev));
        }
        kv("grid.sigma_min", format!("{:?}", t.grid.sigma_min));
        kv("grid.sigma_max", format!("{:?}", t.grid.sigma_max));
        kv("grid.rho", format!("{:?}", t.grid.rho));
        kv("grid.spacing", t.grid.spacing.to_string());
        kv("curriculum.shape", t.curriculum.to_string());
        kv("curriculum.s0", t.s0.to_string());
        kv("curriculum.s1", t.s1.to_string());
        let (kind, pm, ps) = match t.sampler {
            NoiseIndexSampler::Uniform => ("uniform", DEFAULT_P_MEAN, DEFAULT_P_STD),
            NoiseIndexSampler::Lognormal { p_mean, p_std } => ("lognormal", p_mean, p_std),
        };
        kv("sampler.kind", kind.to_string());
        kv("sampler.p_mean", format!("{pm:?}"));
        kv("sampler.p_std", format!("{ps:?}"));
        kv("weighting.kind", t.weighting.to_string());
        kv("metric.kind", t.metric.kind().to_string());
        let c = match t.metric {
            Metric::PseudoHuber { c } if !self.metric_c_auto => format!("{c:?}"),
            _ => "auto".to_string(),
        };
        kv("metric.c", c);
        let top = &t.topology;
        kv(
            "net.hidden",
            top.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(", "),
        );
        kv("net.activation", top.activation.to_string());
        kv("net.dropout", format!("{:?}", top.dropout));
        kv("net.embedding", top.embedding.to_string());
        kv("net.embedding_dim", top.embedding_dim.to_string());
        kv("net.fourier_scale", format!("{:?}", top.fourier_scale));
        kv("model.sigma_data", format!("{:?}", t.sigma_data));
        kv("train.objective", t.objective.to_string());
        let (teacher, mu0) = match t.teacher {
            TeacherRule::ZeroEma => ("zero_ema", DEFAULT_MU0),
            TeacherRule::Ema { mu0 } => ("ema", mu0),
        };
        kv("train.teacher", teacher.to_string());
        kv("train.mu0", format!("{mu0:?}"));
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.lr", format!("{:?}", t.lr));
        kv("train.steps", t.steps.to_string());
        kv("train.student_ema", format!("{:?}", t.student_ema));
        kv("train.seed", t.seed.to_string());
        kv("optimizer.beta1", format!("{:?}", t.optimizer.beta1));
        kv("optimizer.beta2", format!("{:?}", t.optimizer.beta2));
        kv("optimizer.eps", format!("{:?}", t.optimizer.eps));
        kv("eval.projections", self.eval.projections.to_string());
        kv("eval.samples", self.eval.samples.to_string());
        kv("eval.seed", self.eval.seed.to_string());
        kv("output.dir", self.output_dir.clone());
        s
    }

    /// Output directory, placed under `$ICTLAB_OUTPUT_ROOT` when that is set
    /// and the configured path is relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output(Path::new(&self.output_dir))
    }
}

/// Applies the output-root override to a relative path.
pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() && !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}
