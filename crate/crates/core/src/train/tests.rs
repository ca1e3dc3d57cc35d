use super::*;
use crate::net::{Activation, EmbeddingKind, Mode};
use crate::random::seeded;
use rand::Rng;

fn topo(d: usize, dropout: f64) -> Topology {
    Topology {
        data_dim: d,
        hidden: vec![12, 12],
        activation: Activation::Silu,
        dropout,
        embedding: EmbeddingKind::Fourier,
        embedding_dim: 8,
        fourier_scale: 0.02,
    }
}

fn small_config(dist: SyntheticDistribution<f64>, dropout: f64) -> TrainConfig<f64> {
    let mut c = TrainConfig::new(dist).unwrap();
    c.topology = topo(c.distribution.dim(), dropout);
    c.batch_size = 8;
    c.steps = 30;
    c
}

struct Fixture {
    grid: NoiseGrid<f64>,
    x: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    i: Vec<usize>,
}

fn fixture(dist: &SyntheticDistribution<f64>, n: usize, b: usize, seed: u64) -> Fixture {
    let grid = NoiseGrid::karras(n, 0.002, 80.0).unwrap();
    let mut rng = seeded(seed);
    let x = dist.sample(b, &mut rng);
    let z = (0..b).map(|_| random::normal_vec(&mut rng, dist.dim())).collect();
    let i = (0..b).map(|_| rng.random_range(1..n)).collect();
    Fixture { grid, x, z, i }
}

impl Fixture {
    fn batch(&self, drop: Option<DropoutState>) -> Batch<'_, f64> {
        Batch {
            grid: &self.grid,
            x: &self.x,
            z: &self.z,
            i: &self.i,
            drop,
        }
    }
}

#[test]
fn ct_grad_matches_finite_differences_with_frozen_teacher() {
    let cfg = small_config(SyntheticDistribution::square_mixture(1.0, 0.2).unwrap(), 0.3);
    let model = cfg.init_model().unwrap();
    let mut rng = seeded(11);
    let teacher: Vec<f64> = model
        .network()
        .params()
        .iter()
        .map(|p| p + 0.01 * random::normal::<f64, _>(&mut rng))
        .collect();
    let fx = fixture(&cfg.distribution, 40, 6, 3);
    let batch = fx.batch(Some(DropoutState::new(5, 7)));
    let spec = cfg.loss_spec();
    let (_, grad) = ct_loss_and_grad(&model, &teacher, &spec, &batch).unwrap();
    let base = model.network().params().to_vec();
    let loss_at = |p: &[f64]| {
        let m = model.with_params(p).unwrap();
        ct_loss_and_grad(&m, &teacher, &spec, &batch).unwrap().0
    };
    let mut worst = 0.0f64;
    for _ in 0..40 {
        let j = rng.random_range(0..base.len());
        let h = 1e-6 * base[j].abs().max(1.0);
        let mut p = base.clone();
        p[j] = base[j] + h;
        let a = loss_at(&p);
        p[j] = base[j] - h;
        let b = loss_at(&p);
        let fd = (a - b) / (2.0 * h);
        let rel = (fd - grad[j]).abs() / fd.abs().max(grad[j].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn teacher_only_changes_value_not_gradient_path() {
    let cfg = small_config(SyntheticDistribution::gaussian(vec![0.0, 0.5], 0.4).unwrap(), 0.0);
    let model = cfg.init_model().unwrap();
    let fx = fixture(&cfg.distribution, 20, 5, 8);
    let batch = fx.batch(None);
    let spec = LossSpec {
        metric: Metric::SquaredL2,
        weighting: WeightingFn::Uniform,
    };
    let theta = model.network().params().to_vec();
    let (l0, g0) = ct_loss_and_grad(&model, &theta, &spec, &batch).unwrap();
    // with theta_minus = theta the student gradient is not the full derivative
    // of the loss, which also moves through the teacher branch
    let full = |h: f64, j: usize| {
        let mut p = theta.clone();
        p[j] += h;
        let m = model.with_params(&p).unwrap();
        ct_loss_and_grad(&m, &p, &spec, &batch).unwrap().0
    };
    let j = theta.len() - 1;
    let full_fd = (full(1e-6, j) - full(-1e-6, j)) / 2e-6;
    assert!((full_fd - g0[j]).abs() > 1e-6);
    let mut shifted = theta.clone();
    for v in shifted.iter_mut() {
        *v += 0.05;
    }
    let (l1, g1) = ct_loss_and_grad(&model, &shifted, &spec, &batch).unwrap();
    assert!(l1 != l0);
    assert_eq!(g0.len(), g1.len());
}

#[test]
fn shared_noise_and_masks_between_passes() {
    let cfg = small_config(SyntheticDistribution::square_mixture(1.0, 0.2).unwrap(), 0.3);
    let model = cfg.init_model().unwrap();
    let fx = fixture(&cfg.distribution, 30, 10, 4);
    let batch = fx.batch(Some(DropoutState::new(1, 2)));
    let (_, _, rows) = ct_loss_traced(&model, model.network().params(), &cfg.loss_spec(), &batch).unwrap();
    assert_eq!(rows.len(), 10);
    for (b, r) in rows.iter().enumerate() {
        let gap = r.sigma_student - r.sigma_teacher;
        for j in 0..2 {
            let diff = r.student_input[j] - r.teacher_input[j];
            let want = gap * fx.z[b][j];
            assert!((diff - want).abs() <= 1e-12 * (1.0 + r.student_input[j].abs()));
        }
        assert!(!r.student_masks.is_empty());
        assert_eq!(r.student_masks, r.teacher_masks);
    }
    assert_ne!(rows[0].student_masks, rows[1].student_masks);
}

#[test]
fn cm_equals_ct_on_delta() {
    let dist = SyntheticDistribution::delta(vec![0.7]).unwrap();
    let cfg = small_config(dist.clone(), 0.0);
    let mut rng = seeded(21);
    for trial in 0..10 {
        let model = cfg.init_model().unwrap().with_params(
            &random::normal_vec::<f64, _>(&mut rng, cfg.topology.param_count()),
        )
        .unwrap();
        let fx = fixture(&dist, 200, 16, trial);
        let spec = cfg.loss_spec();
        let teacher = model.network().params();
        let (ct, gct) = ct_loss_and_grad(&model, teacher, &spec, &fx.batch(None)).unwrap();
        let (cm, gcm) = cm_loss_exact_and_grad(&model, teacher, &spec, &dist, &fx.batch(None)).unwrap();
        assert!((ct - cm).abs() <= 1e-10 * ct.abs().max(1.0), "{ct} vs {cm}");
        for (a, b) in gct.iter().zip(&gcm) {
            assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0));
        }
    }
}

#[test]
fn cm_ct_gap_shrinks_with_grid_size() {
    let dist = SyntheticDistribution::gaussian(vec![0.3], 0.5).unwrap();
    let cfg = small_config(dist.clone(), 0.0);
    let model = cfg.init_model().unwrap();
    let mut rng = seeded(2);
    let b = 64;
    let x = dist.sample(b, &mut rng);
    let z: Vec<Vec<f64>> = (0..b).map(|_| random::normal_vec(&mut rng, 1)).collect();
    let targets: Vec<f64> = (0..b).map(|_| (random::unit(&mut rng) * 8.0 - 4.0).exp()).collect();
    // squared l2 with 1/gap weights: both losses are O(gap) and so is their difference
    let spec = LossSpec {
        metric: Metric::SquaredL2,
        weighting: WeightingFn::InverseGap,
    };
    let mut gaps = vec![];
    for n in [321, 641, 1281] {
        let grid = NoiseGrid::karras(n, 0.002, 80.0).unwrap();
        let i: Vec<usize> = targets.iter().map(|&s| grid.nearest_index(s).min(n - 1)).collect();
        let batch = Batch {
            grid: &grid,
            x: &x,
            z: &z,
            i: &i,
            drop: None,
        };
        let p = model.network().params();
        let ct = ct_loss_and_grad(&model, p, &spec, &batch).unwrap().0;
        let cm = cm_loss_exact_and_grad(&model, p, &spec, &dist, &batch).unwrap().0;
        gaps.push((ct - cm).abs());
    }
    for w in gaps.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.5..2.6).contains(&ratio), "{gaps:?}");
    }
}

#[test]
fn batch_shape_errors() {
    let dist = SyntheticDistribution::delta(vec![0.7]).unwrap();
    let cfg = small_config(dist.clone(), 0.0);
    let model = cfg.init_model().unwrap();
    let mut fx = fixture(&dist, 10, 4, 0);
    let p = model.network().params().to_vec();
    fx.i[0] = 10;
    assert!(ct_loss_and_grad(&model, &p, &cfg.loss_spec(), &fx.batch(None)).is_err());
    fx.i[0] = 1;
    fx.z.pop();
    assert!(ct_loss_and_grad(&model, &p, &cfg.loss_spec(), &fx.batch(None)).is_err());
}

#[test]
fn zero_steps_returns_initial_state() {
    let mut cfg = small_config(SyntheticDistribution::delta(vec![0.7]).unwrap(), 0.0);
    cfg.steps = 0;
    let run = train(&cfg).unwrap();
    assert!(run.log.is_empty());
    assert_eq!(run.state.params(), cfg.init_model().unwrap().network().params());
    assert_eq!(run.state.ema, run.state.params());
}

#[test]
fn zero_ema_teacher_is_the_student() {
    let cfg = small_config(SyntheticDistribution::delta(vec![0.7]).unwrap(), 0.0);
    let mut t = Trainer::new(cfg).unwrap();
    for _ in 0..5 {
        t.step().unwrap();
        let st = t.state();
        assert!(st.teacher.is_none());
        assert_eq!(st.teacher_params(), st.params());
    }
}

#[test]
fn legacy_teacher_rate() {
    let r = TeacherRule::Ema { mu0: 0.9f64 };
    assert!((r.rate(10, 10) - 0.9).abs() < 1e-15);
    assert!((r.rate(2, 4) - 0.9f64.sqrt()).abs() < 1e-15);
    assert!(r.rate(10, 1281) > r.rate(10, 11));
    assert_eq!(TeacherRule::<f64>::ZeroEma.rate(10, 11), 0.0);
}

#[test]
fn training_is_deterministic() {
    let mut cfg = small_config(SyntheticDistribution::square_mixture(1.0, 0.2).unwrap(), 0.3);
    cfg.teacher = TeacherRule::Ema { mu0: 0.9 };
    let a = train(&cfg).unwrap();
    let b = train(&cfg).unwrap();
    assert_eq!(a.state.params(), b.state.params());
    assert_eq!(a.state.teacher, b.state.teacher);
    assert_eq!(a.log, b.log);
    cfg.seed = 1;
    let c = train(&cfg).unwrap();
    assert_ne!(a.state.params(), c.state.params());
}

#[test]
fn curriculum_drives_logged_levels() {
    let mut cfg = small_config(SyntheticDistribution::delta(vec![0.7]).unwrap(), 0.0);
    cfg.s0 = 2;
    cfg.s1 = 8;
    cfg.steps = 30;
    let run = train(&cfg).unwrap();
    let levels: Vec<usize> = run.log.iter().map(|r| r.n_levels).collect();
    assert_eq!(levels[0], 3);
    assert_eq!(*levels.last().unwrap(), 9);
    assert!(levels.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn non_finite_loss_aborts() {
    let cfg = small_config(SyntheticDistribution::delta(vec![0.7]).unwrap(), 0.0);
    let mut state = TrainState::init(&cfg).unwrap();
    let mut p = state.params().to_vec();
    p[0] = f64::NAN;
    state.model = state.model.with_params(&p).unwrap();
    let mut t = Trainer::resume(cfg, state).unwrap();
    match t.step() {
        Err(Error::NonFiniteLoss { step: 0, .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn short_run_reduces_loss_on_delta() {
    let mut cfg = small_config(SyntheticDistribution::delta(vec![0.7]).unwrap(), 0.0);
    cfg.batch_size = 32;
    cfg.steps = 400;
    cfg.lr = 1e-3;
    cfg.student_ema = 0.0;
    let run = train(&cfg).unwrap();
    let model = run.state.ema_model().unwrap();
    let mut rng = seeded(3);
    let mut err = 0.0;
    for _ in 0..64 {
        let z: f64 = random::normal(&mut rng);
        let out = model.output_with(model.network().params(), &[80.0 * z], 80.0, Mode::Eval, None).unwrap();
        err += (out[0] - 0.7).abs() / 64.0;
    }
    assert!(err < 0.5, "mean abs error {err}");
}

#[test]
fn normalized_variance_is_scale_free() {
    let v = [1.0, 2.0, 3.0];
    let w: Vec<f64> = v.iter().map(|x| x * 7.5).collect();
    assert!((normalized_variance(&v) - normalized_variance(&w)).abs() < 1e-15);
    assert_eq!(normalized_variance(&[4.0, 4.0]), 0.0);
}
