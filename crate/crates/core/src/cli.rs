//! Command-line front end.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint;
use crate::config::{resolve_output, ExperimentConfig};
use crate::consistency::{multistep_sample, one_step_sample, two_step_indices, ConsistencyModel};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::net::{grad_check_with, GradCheckOptions, Network, Topology};
use crate::prop1::{run_prop1, Prop1Preset};
use crate::random;
use crate::schedules::{Curriculum, CurriculumShape, IndexTable, NoiseGrid, NoiseIndexSampler, Spacing, WeightingFn};
use crate::train::{LogRow, Trainer};

const SAMPLE_STREAM: u64 = 0x5341_4d50;
const REFERENCE_STREAM: u64 = 0x5245_4646;

/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "ictlab", version, about = "Consistency training on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Compare a sample CSV against fresh draws from the config's data.
    Eval(EvalArgs),
    /// Print a curriculum table or a noise-grid table as CSV.
    ScheduleTable(ScheduleArgs),
    /// Run the scalar toy-model checks.
    Prop1(Prop1Args),
    /// Compare network gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides output.dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated grid indices `1,...,N` for multistep sampling.
    #[arg(long, conflicts_with = "sigma_mid")]
    indices: Option<String>,
    /// Two-step sampling through the grid level nearest this noise level.
    #[arg(long)]
    sigma_mid: Option<f64>,
    /// Grid size for multistep sampling (default: curriculum s1 + 1).
    #[arg(long)]
    grid_n: Option<usize>,
    /// Sample with the raw student instead of the EMA parameters.
    #[arg(long)]
    student: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    samples: PathBuf,
    /// Report path (default: print JSON).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ScheduleArgs {
    #[arg(long)]
    curriculum: Option<CurriculumShape>,
    #[arg(long, default_value_t = 10)]
    s0: usize,
    #[arg(long, default_value_t = 1280)]
    s1: usize,
    #[arg(long = "K")]
    k: Option<usize>,
    /// Emit every E-th step instead of only the steps where N changes.
    #[arg(long)]
    every: Option<usize>,
    /// Print the noise grid of this size instead of a curriculum.
    #[arg(long)]
    grid_n: Option<usize>,
    #[arg(long, default_value_t = 0.002)]
    sigma_min: f64,
    #[arg(long, default_value_t = 80.0)]
    sigma_max: f64,
    #[arg(long, default_value_t = 7.0)]
    rho: f64,
    #[arg(long, default_value_t = Spacing::RhoInterpolated)]
    spacing: Spacing,
    #[arg(long, default_value_t = -1.1, allow_negative_numbers = true)]
    p_mean: f64,
    #[arg(long, default_value_t = 2.0)]
    p_std: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Prop1Args {
    #[arg(long, default_value = "paper-defaults")]
    preset: String,
    /// Convergence CSV path (default: prop1_convergence.csv under the output root).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Use this config's network topology (default: the 2-D default network).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    dropout: Option<f64>,
}

/// Failure of a command; the exit code distinguishes bad input from failed checks.
enum Failure {
    Input(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Input(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Input(e.into())
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Runs the tool on `argv` (including the program name) and returns the exit code.
pub fn run_cli(argv: &[String]) -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_cli_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_cli_with(argv: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a, out, err),
        Command::Sample(a) => cmd_sample(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::ScheduleTable(a) => cmd_schedule(a, out),
        Command::Prop1(a) => cmd_prop1(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Check(msg)) => {
            let _ = writeln!(err, "check failed: {msg}");
            1
        }
        Err(Failure::Input(e)) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

/// Exclusive claim on an output directory, released on drop.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::InvalidArgument(format!(
                "{} is in use by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,n_levels,loss,update_norm,lr\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.16e},{:.16e},{:.16e}", r.step, r.n_levels, r.loss, r.update_norm, r.lr);
    }
    s
}

fn points_csv(points: &[Vec<f64>]) -> String {
    let d = points.first().map_or(0, |p| p.len());
    let mut s = (0..d).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",");
    s.push('\n');
    for p in points {
        let row: Vec<String> = p.iter().map(|v| format!("{v:.16e}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Reads a sample CSV written by `sample` (a header line, then numeric rows).
pub fn read_points(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::InvalidArgument(format!("{} is empty", path.display())))?;
    let d = header.split(',').count();
    let mut pts = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::InvalidArgument(format!("{} line {}: {e}", path.display(), n + 2)))?;
        if row.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: row.len(),
            });
        }
        pts.push(row);
    }
    Ok(pts)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    checkpoint: String,
    checkpoint_sha256: String,
    steps: usize,
    final_loss: Option<f64>,
    final_n_levels: Option<usize>,
    eval: &'a EvalReport,
}

/// One-step samples from `model` and fresh data draws, both seeded from the eval settings.
fn eval_model(cfg: &ExperimentConfig, model: &ConsistencyModel<f64>) -> Result<EvalReport> {
    let e = &cfg.eval;
    let mut rng = random::stream(e.seed, SAMPLE_STREAM, 0);
    let samples = one_step_sample(model, e.samples, cfg.train.grid.sigma_max, &mut rng)?;
    let reference = cfg
        .train
        .distribution
        .sample(e.samples, &mut random::stream(e.seed, REFERENCE_STREAM, 0));
    EvalReport::compute(&samples, &reference, e.projections, e.seed)
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let cfg = ExperimentConfig::load(&a.config)?;
    let dir = match &a.out {
        Some(p) => resolve_output(p),
        None => cfg.resolved_output_dir(),
    };
    fs::create_dir_all(&dir)?;
    let _lock = DirLock::acquire(&dir)?;
    fs::write(dir.join("config.cfg"), cfg.render())?;
    let mut trainer = Trainer::new(cfg.train.clone())?;
    let total = cfg.train.steps;
    let mut next_report = total / 10;
    while !trainer.is_done() {
        match trainer.step() {
            Ok(row) => {
                if total >= 10 && row.step + 1 == next_report.max(1) {
                    let _ = writeln!(err, "step {}/{total}  N={}  loss={:.4e}", row.step + 1, row.n_levels, row.loss);
                    next_report += total / 10;
                }
            }
            Err(e @ Error::NonFiniteLoss { .. }) => {
                let snap = dir.join("snapshot.ckpt");
                checkpoint::save(&snap, &cfg, trainer.state())?;
                fs::write(dir.join("train_log.csv"), log_csv(trainer.log()))?;
                return Err(Failure::Check(format!("{e}; state saved to {}", snap.display())));
            }
            Err(e) => return Err(e.into()),
        }
    }
    let ckpt = dir.join("checkpoint.ckpt");
    checkpoint::save(&ckpt, &cfg, trainer.state())?;
    fs::write(dir.join("train_log.csv"), log_csv(trainer.log()))?;
    let report = eval_model(&cfg, &trainer.state().ema_model()?)?;
    let last = trainer.log().last();
    let summary = TrainSummary {
        checkpoint: ckpt.display().to_string(),
        checkpoint_sha256: checkpoint::file_sha256(&ckpt)?,
        steps: trainer.state().step,
        final_loss: last.map(|r| r.loss),
        final_n_levels: last.map(|r| r.n_levels),
        eval: &report,
    };
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&summary).map_err(Error::from)? + "\n")?;
    writeln!(
        out,
        "trained {} steps; sliced_wasserstein={:.6e} energy_distance={:.6e}; outputs in {}",
        summary.steps,
        report.sliced_wasserstein,
        report.energy_distance,
        dir.display()
    )?;
    Ok(())
}

fn parse_indices(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| Error::InvalidArgument(format!("bad index '{t}': {e}")))
        })
        .collect()
}

#[derive(Serialize)]
struct SampleSidecar {
    checkpoint: String,
    checkpoint_sha256: String,
    seed: u64,
    n: usize,
    params: &'static str,
    indices: Vec<usize>,
    grid_n: Option<usize>,
    sigmas: Vec<f64>,
}

fn cmd_sample(a: SampleArgs, out: &mut dyn Write) -> CmdResult {
    let (cfg, state) = checkpoint::load(&a.checkpoint)?;
    let hash = checkpoint::file_sha256(&a.checkpoint)?;
    let model = if a.student { state.model.clone() } else { state.ema_model()? };
    let tc = &cfg.train;
    let mut rng = random::stream(a.seed, SAMPLE_STREAM, 0);
    let (points, indices, grid_n, sigmas) = if a.indices.is_none() && a.sigma_mid.is_none() {
        let pts = one_step_sample(&model, a.n, tc.grid.sigma_max, &mut rng)?;
        (pts, vec![], None, vec![tc.grid.sigma_max])
    } else {
        let n = a.grid_n.unwrap_or(tc.s1 + 1);
        let grid = tc.grid.build(n)?;
        let idx = match (&a.indices, a.sigma_mid) {
            (Some(s), _) => parse_indices(s)?,
            (None, Some(mid)) => two_step_indices(&grid, mid)?,
            (None, None) => unreachable!(),
        };
        let pts = multistep_sample(&model, &grid, &idx, a.n, &mut rng)?;
        let sig = idx.iter().map(|&i| grid.sigma(i)).collect();
        (pts, idx, Some(n), sig)
    };
    let out_path = resolve_output(&a.out);
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&out_path, points_csv(&points))?;
    let sidecar = SampleSidecar {
        checkpoint: a.checkpoint.display().to_string(),
        checkpoint_sha256: hash,
        seed: a.seed,
        n: a.n,
        params: if a.student { "student" } else { "ema" },
        indices,
        grid_n,
        sigmas,
    };
    let mut side = out_path.clone().into_os_string();
    side.push(".json");
    fs::write(&side, serde_json::to_string_pretty(&sidecar).map_err(Error::from)? + "\n")?;
    writeln!(out, "wrote {} samples to {}", points.len(), out_path.display())?;
    Ok(())
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = ExperimentConfig::load(&a.config)?;
    let samples = read_points(&a.samples)?;
    let seed = a.seed.unwrap_or(cfg.eval.seed);
    let reference = cfg
        .train
        .distribution
        .sample(cfg.eval.samples, &mut random::stream(seed, REFERENCE_STREAM, 0));
    let report = EvalReport::compute(&samples, &reference, cfg.eval.projections, seed)?;
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n";
    match a.out {
        Some(p) => {
            let p = resolve_output(&p);
            fs::write(&p, json)?;
            writeln!(
                out,
                "sliced_wasserstein={:.6e} energy_distance={:.6e} (report in {})",
                report.sliced_wasserstein,
                report.energy_distance,
                p.display()
            )?;
        }
        None => out.write_all(json.as_bytes())?,
    }
    Ok(())
}

fn emit(out: &mut dyn Write, path: Option<&Path>, text: &str) -> CmdResult {
    match path {
        Some(p) => fs::write(resolve_output(p), text)?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn cmd_schedule(a: ScheduleArgs, out: &mut dyn Write) -> CmdResult {
    if let Some(n) = a.grid_n {
        let grid = NoiseGrid::new(n, a.sigma_min, a.sigma_max, a.rho, a.spacing)?;
        let table = IndexTable::new(&NoiseIndexSampler::lognormal(a.p_mean, a.p_std)?, &grid);
        let mut s = String::from("i,sigma,lognormal_p,inverse_gap_weight\n");
        for i in 1..=n {
            let (p, w) = if i < n {
                (table.pmf()[i - 1], WeightingFn::InverseGap.weight(&grid, i)?)
            } else {
                (0.0, 0.0)
            };
            let _ = writeln!(s, "{i},{:.16e},{p:.16e},{w:.16e}", grid.sigma(i));
        }
        return emit(out, a.out.as_deref(), &s);
    }
    let shape = a
        .curriculum
        .ok_or_else(|| Error::InvalidArgument("pass --curriculum (with --K) or --grid-n".into()))?;
    let k_total = a.k.ok_or_else(|| Error::InvalidArgument("--K is required with --curriculum".into()))?;
    let c = Curriculum::new(shape, a.s0, a.s1, k_total)?;
    let mut s = String::from("k,n_levels\n");
    let mut prev = None;
    for k in 0..k_total {
        let n = c.n_levels(k)?;
        let keep = match a.every {
            Some(e) => k % e.max(1) == 0,
            None => prev != Some(n),
        };
        if keep || k + 1 == k_total {
            let _ = writeln!(s, "{k},{n}");
        }
        prev = Some(n);
    }
    emit(out, a.out.as_deref(), &s)
}

fn cmd_prop1(a: Prop1Args, out: &mut dyn Write) -> CmdResult {
    let preset = Prop1Preset::by_name(&a.preset)?;
    let report = run_prop1(&preset)?;
    out.write_all(report.table().as_bytes())?;
    let csv = match &a.csv {
        Some(p) => resolve_output(p),
        None => resolve_output(Path::new("prop1_convergence.csv")),
    };
    fs::write(&csv, report.csv())?;
    writeln!(out, "convergence table written to {}", csv.display())?;
    if report.all_passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.claim.as_str()).collect();
        Err(Failure::Check(failed.join("; ")))
    }
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> CmdResult {
    let mut topology = match &a.config {
        Some(p) => ExperimentConfig::load(p)?.train.topology,
        None => Topology::default_for(2),
    };
    if let Some(p) = a.dropout {
        topology.dropout = p;
    }
    let net = Network::<f64>::new(topology, a.seed)?;
    let mut rng = random::stream(a.seed, 0x4743_484b, 0);
    let worst = grad_check_with(&net, a.trials, &mut rng, GradCheckOptions::default())?;
    writeln!(
        out,
        "max relative error over {} coordinates: {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e}, dropout {})",
        a.trials,
        net.dropout_rate()
    )?;
    if worst <= GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:.0e}")))
    }
}
